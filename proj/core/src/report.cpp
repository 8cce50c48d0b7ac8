#include "amalgam/report.hpp"

#include <fmt/format.h>
#include <json.hpp>

namespace amalgam {

using nlohmann::ordered_json;

namespace {

ordered_json metrics_json(const MetricReport& r) {
  ordered_json j = ordered_json::object();
  if (r.seg) j["seg"] = {{"miou", r.seg->miou}, {"pixel_acc", r.seg->pixel_acc}};
  if (r.depth) {
    j["depth"] = {{"abs_rel", r.depth->abs_rel},
                  {"sqr_rel", r.depth->sqr_rel},
                  {"delta1", r.depth->delta1},
                  {"delta2", r.depth->delta2},
                  {"delta3", r.depth->delta3}};
  }
  if (r.normal) {
    j["normal"] = {{"mean_deg", r.normal->mean_deg},
                   {"median_deg", r.normal->median_deg},
                   {"within_11_25", r.normal->within_11},
                   {"within_22_5", r.normal->within_22},
                   {"within_30", r.normal->within_30},
                   {"degenerate", r.degenerate_normals}};
  }
  return j;
}

ordered_json table_json(const BlockLossTable& t) {
  ordered_json j = ordered_json::object();
  for (std::size_t c = 0; c < t.columns.size(); ++c) j[t.columns[c]] = t.losses[c];
  return j;
}

std::string hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

}  // namespace

std::string metrics_to_json(const MetricReport& report) {
  return metrics_json(report).dump(2) + "\n";
}

std::string report_to_json(const AmalgamationReport& r) {
  ordered_json j;
  j["pipeline"] = r.pipeline;
  j["mode"] = mode_name(r.mode);
  j["blocks"] = r.blocks;
  j["block_losses"] = table_json(r.table);
  if (!r.components.columns.empty()) j["block_loss_components"] = table_json(r.components);
  if (!r.feature_table.columns.empty()) j["block_feature_losses"] = table_json(r.feature_table);
  ordered_json plan = ordered_json::object();
  for (const auto& [name, p] : r.plan.points) plan[name] = p;
  j["branch_out"] = plan;
  j["removed_blocks"] = r.plan.removed_blocks;
  ordered_json params;
  params["teachers"] = r.params.teachers;
  params["teacher_sum"] = r.params.teacher_sum;
  params["student_trunk"] = r.params.student_trunk;
  params["coding_max_block"] = r.params.coding_max_block;
  params["student"] = r.params.student;
  params["adapters"] = r.params.adapters;
  params["student_over_teachers"] =
      r.params.teacher_sum ? static_cast<double>(r.params.student) / r.params.teacher_sum : 0.0;
  j["params"] = params;
  j["finetune"] = {{"steps", r.finetune_steps},
                   {"probe_loss_initial", r.finetune.initial_loss},
                   {"probe_loss_final", r.finetune.final_loss},
                   {"curve", r.finetune.curve}};
  ordered_json metrics = ordered_json::object();
  for (const auto& [name, m] : r.metrics) metrics[name] = metrics_json(m);
  j["metrics"] = metrics;
  ordered_json freeze = ordered_json::array();
  for (const auto& f : r.freeze) {
    freeze.push_back({{"name", f.name},
                      {"hash_before", hex(f.before)},
                      {"hash_after", hex(f.after)},
                      {"unchanged", f.before == f.after}});
  }
  j["freeze_audit"] = freeze;
  j["train_ground_truth_reads"] = r.train_ground_truth_reads;
  j["student_hash"] = hex(r.student_hash);
  return j.dump(2) + "\n";
}

std::string format_block_table(const AmalgamationReport& r) {
  std::string out = fmt::format("{:<8}", "block");
  for (const auto& c : r.table.columns) out += fmt::format(" {:>14}", "L_" + c);
  out += "\n";
  for (int n = 1; n <= r.table.blocks(); ++n) {
    const bool decoder = n > r.blocks / 2;
    out += fmt::format("{:<8}", decoder ? fmt::format("dec_b{}", n - r.blocks / 2)
                                        : fmt::format("enc_b{}", n));
    for (const auto& col : r.table.losses) out += fmt::format(" {:>14.6f}", col[n - 1]);
    out += "\n";
  }
  out += "\n";
  const auto student = r.metrics.find("student");
  for (const auto& [name, p] : r.plan.points) {
    std::string row = fmt::format("Decoder_b{} (Target-{})", p - r.blocks / 2, name);
    if (student != r.metrics.end()) {
      const MetricReport& m = student->second;
      if (name == "seg" && m.seg) row += fmt::format("  mIoU={:.4f} PA={:.4f}", m.seg->miou, m.seg->pixel_acc);
      if ((name == "depth" || name == "u2") && m.depth) {
        row += fmt::format("  abs_rel={:.4f} sqr_rel={:.4f}", m.depth->abs_rel, m.depth->sqr_rel);
      }
      if (name == "u2" && m.seg) row += fmt::format(" mIoU={:.4f}", m.seg->miou);
      if (name == "normal" && m.normal) {
        row += fmt::format("  mean={:.3f} median={:.3f}", m.normal->mean_deg, m.normal->median_deg);
      }
    }
    out += row + "\n";
  }
  out += fmt::format("params: student={} teachers={} ratio={:.4f}\n", r.params.student,
                     r.params.teacher_sum,
                     r.params.teacher_sum
                         ? static_cast<double>(r.params.student) / r.params.teacher_sum
                         : 0.0);
  return out;
}

std::string curve_to_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "step,epoch,loss,lr\n";
  for (const auto& p : curve) out += fmt::format("{},{},{},{}\n", p.step, p.epoch, p.loss, p.lr);
  return out;
}

}  // namespace amalgam
