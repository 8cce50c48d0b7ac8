#include "amalgam/teacher.hpp"

#include <cmath>

#include <spdlog/spdlog.h>

#include "amalgam/error.hpp"
#include "amalgam/losses.hpp"
#include "amalgam/rng.hpp"

namespace amalgam {

std::vector<std::vector<int>> epoch_batches(int count, int batch_size, std::uint64_t seed,
                                            std::uint64_t epoch) {
  if (batch_size <= 0) throw ConfigError("batch size must be > 0");
  std::vector<int> order(count);
  for (int i = 0; i < count; ++i) order[i] = i;
  Rng rng(Rng::derive(seed, "epoch", epoch));
  rng.shuffle(order);
  std::vector<std::vector<int>> out;
  for (int i = 0; i < count; i += batch_size) {
    out.emplace_back(order.begin() + i, order.begin() + std::min(count, i + batch_size));
  }
  return out;
}

TeacherResult train_teacher(const NetworkSpec& spec, const LabeledSet& train,
                            const TeacherTrainConfig& cfg) {
  validate(spec);
  const auto heads = spec.heads();
  if (heads.size() != 1) throw ConfigError("a teacher has exactly one head");
  const TaskKind task = heads.front().second.task;
  if (cfg.epochs < 0) throw ConfigError("train.epochs must be >= 0");
  validate(train.config(), 1 << spec.pool_depth());

  TeacherResult result;
  result.model.spec = spec;
  result.model.state = init_state(spec, Rng::derive(cfg.seed, "teacher.init"));
  ModelState& state = result.model.state;

  const int per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::int64_t total = static_cast<std::int64_t>(per_epoch) * cfg.epochs;
  if (cfg.max_steps >= 0) total = std::min(total, cfg.max_steps);
  Sgd sgd(cfg.optim, total);
  const auto trainable = [](const std::string&) { return true; };

  for (int epoch = 0; epoch < cfg.epochs && sgd.step_count() < total; ++epoch) {
    const auto batches = epoch_batches(train.size(), cfg.batch_size,
                                       Rng::derive(cfg.seed, "teacher.shuffle"), epoch);
    double epoch_loss = 0.0;
    int seen = 0;
    for (const auto& idx : batches) {
      if (sgd.step_count() >= total) break;
      const Batch b = train.batch(idx);
      Tape tape;
      BoundParams params(tape, state, trainable);
      const ForwardResult fr = forward(spec, params, tape.constant(b.images));
      const HeadOutput& head = fr.heads.front();
      Var loss;
      switch (task) {
        case TaskKind::kSegmentation:
          loss = seg_loss(head.prediction, b.seg, 0.0, {});
          break;
        case TaskKind::kDepth:
          loss = depth_loss(tape.constant(b.depth), head.prediction, b.mask);
          break;
        case TaskKind::kNormal:
          loss = norm_loss(tape.constant(b.normal), head.prediction, b.mask);
          break;
      }
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw DivergenceError(std::string(task_name(task)) + " teacher loss became " +
                              std::to_string(value) + " at step " +
                              std::to_string(sgd.step_count()));
      }
      tape.backward(loss);
      const double lr = sgd.current_lr();
      for (auto& [name, var] : params.vars()) {
        sgd.update(name, state.params.at(name), tape.grad_view(var));
      }
      sgd.finish_step();
      ++state.step;
      result.curve.push_back({sgd.step_count(), epoch, value, lr});
      epoch_loss += value;
      ++seen;
    }
    if (seen > 0) {
      spdlog::info("teacher {} epoch {} mean loss {:.6f}", task_name(task), epoch,
                   epoch_loss / seen);
    }
  }
  return result;
}

MetricReport evaluate(const Model& model, const LabeledSet& eval, int batch_size) {
  if (batch_size <= 0) throw UsageError("evaluation batch size must be > 0");
  const auto heads = model.spec.heads();
  if (heads.empty()) throw UsageError("model has no heads to evaluate");
  int classes = 0;
  bool has_seg = false, has_depth = false, has_normal = false;
  for (const auto& [seg, h] : heads) {
    if (h.task == TaskKind::kSegmentation) {
      has_seg = true;
      classes = h.out_channels;
      if (classes < eval.config().classes) {
        throw UsageError("segmentation head predicts " + std::to_string(classes) +
                         " classes, data has " + std::to_string(eval.config().classes));
      }
    }
    has_depth |= h.task == TaskKind::kDepth;
    has_normal |= h.task == TaskKind::kNormal;
  }
  SegAccumulator seg_acc(std::max(classes, 1));
  DepthAccumulator depth_acc;
  NormalAccumulator normal_acc;
  MetricReport report;
  for (int first = 0; first < eval.size(); first += batch_size) {
    std::vector<int> idx;
    for (int i = first; i < std::min(eval.size(), first + batch_size); ++i) idx.push_back(i);
    const Batch b = eval.batch(idx);
    const InferenceResult out = infer(model, b.images);
    if (has_seg) {
      seg_acc.add(one_hot_supervision(out.head(TaskKind::kSegmentation)), b.seg);
    }
    if (has_depth) depth_acc.add(out.head(TaskKind::kDepth), b.depth, b.mask);
    if (has_normal) {
      const Tensor& n = out.head(TaskKind::kNormal);
      normal_acc.add(n, b.normal, b.mask);
      report.degenerate_normals += degenerate_normals(n, b.mask);
    }
  }
  if (has_seg) report.seg = seg_acc.result();
  if (has_depth) report.depth = depth_acc.result();
  if (has_normal) report.normal = normal_acc.result();
  return report;
}

}  // namespace amalgam
