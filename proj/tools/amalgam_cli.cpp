// amalgam: train teachers, amalgamate them into a multi-head student,
// evaluate checkpoints and probe feature grafts.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "amalgam/amalgamation.hpp"
#include "amalgam/checkpoint.hpp"
#include "amalgam/config.hpp"
#include "amalgam/error.hpp"
#include "amalgam/log.hpp"
#include "amalgam/ops.hpp"
#include "amalgam/report.hpp"
#include "amalgam/teacher.hpp"

namespace fs = std::filesystem;
using namespace amalgam;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kDivergence = 4 };

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string data;
  std::map<std::string, std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key=value configuration file");
  cmd->add_option("--seed", c.seed, "run seed (overrides the config file)");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--data", c.data, "directory with train.shard / eval.shard from gen-data");
  for (const auto& key : config_keys()) {
    if (key == "seed") continue;
    cmd->add_option("--" + key, c.overrides[key], "override " + key)->group("Config overrides");
  }
}

RunConfig load(const Common& c) {
  ConfigMap values;
  if (!c.config.empty()) values = load_config_file(c.config);
  for (const auto& [k, v] : c.overrides) {
    if (!v.empty()) values[k] = v;
  }
  if (c.seed) values["seed"] = std::to_string(*c.seed);
  return resolve_config(values);
}

struct Data {
  LabeledSet train;
  LabeledSet eval;
};

Data load_data(const Common& c, const RunConfig& cfg) {
  if (c.data.empty()) {
    DataSplit s = split(cfg.scene, cfg.data);
    return {s.train, s.eval};
  }
  auto shard = [&](const char* name) {
    DatasetShard d = load_dataset(fs::path(c.data) / name);
    return LabeledSet(d.scene, d.first_index, std::move(d.samples));
  };
  return {shard("train.shard"), shard("eval.shard")};
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

fs::path out_dir(const Common& c) {
  const fs::path out(c.out);
  fs::create_directories(out);
  return out;
}

void write_timing(const fs::path& dir, double seconds) {
  write_text(dir / "timing.json", fmt::format("{{\n  \"wall_seconds\": {:.3f}\n}}\n", seconds));
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_train_teacher(const Common& c, const std::string& task_arg) {
  const auto t0 = std::chrono::steady_clock::now();
  const TaskKind task = parse_task(task_arg);
  const RunConfig cfg = load(c);
  const Data data = load_data(c, cfg);
  const NetworkSpec spec = make_teacher(cfg.arch, task, cfg.heads);
  const TeacherResult r = train_teacher(spec, data.train, cfg.train);
  const MetricReport m = evaluate(r.model, data.eval);
  const fs::path out = out_dir(c);
  const std::string name = task_name(task);
  save_checkpoint(out / (name + ".ckpt"), r.model);
  write_text(out / (name + "_metrics.json"), metrics_to_json(m));
  write_text(out / (name + "_curve.csv"), curve_to_csv(r.curve));
  write_text(out / (name + "_config.txt"), render_config(cfg));
  write_timing(out, since(t0));
  std::cout << format_metrics(m);
  return kOk;
}

int cmd_amalgamate(const Common& c, const std::vector<std::string>& teacher_paths,
                   const std::string& online_base, const std::string& mode) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = load(c);
  if (!mode.empty()) cfg.amalg.mode = parse_mode(mode);
  std::map<TaskKind, Model> teachers;
  for (const auto& p : teacher_paths) {
    Model m = load_checkpoint(p);
    const auto heads = m.spec.heads();
    if (heads.size() != 1) throw UsageError(p + " is not a single-task teacher");
    const TaskKind task = heads.front().second.task;
    if (teachers.count(task)) throw UsageError(std::string("two ") + task_name(task) + " teachers");
    teachers.emplace(task, std::move(m));
  }
  // Fail early with the first differing block.
  if (!teachers.empty()) {
    const NetworkSpec ref = student_spec_from(teachers.begin()->second);
    for (const auto& [task, m] : teachers) {
      if (auto diff = first_block_difference(ref, student_spec_from(m))) {
        throw ConfigError(std::string("teacher ") + task_name(task) + ": " + *diff);
      }
    }
  }
  const Data data = load_data(c, cfg);
  const ImageSource images(data.train);
  const std::uint64_t reads_before = data.train.gt_reads();
  auto has = [&](TaskKind t) { return teachers.count(t) > 0; };

  AmalgamationResult result;
  if (!online_base.empty()) {
    if (teachers.size() != 1 || !has(TaskKind::kNormal)) {
      throw UsageError("--online-base needs exactly one normal teacher in --teachers");
    }
    const Model base = load_checkpoint(online_base);
    result = amalgamate_online(base, teachers.at(TaskKind::kNormal), images, &data.eval, cfg.amalg);
  } else if (teachers.size() == 2 && has(TaskKind::kSegmentation) && has(TaskKind::kDepth)) {
    const Model& seg = teachers.at(TaskKind::kSegmentation);
    result = amalgamate_two(student_spec_from(seg), seg, teachers.at(TaskKind::kDepth), images,
                            &data.eval, cfg.amalg);
  } else if (teachers.size() == 3) {
    const Model& seg = teachers.at(TaskKind::kSegmentation);
    result = amalgamate_offline3(student_spec_from(seg), seg, teachers.at(TaskKind::kDepth),
                                 teachers.at(TaskKind::kNormal), images, &data.eval, cfg.amalg);
  } else {
    throw UsageError("--teachers takes seg + depth (two-task) or seg + depth + normal (offline)");
  }
  result.report.train_ground_truth_reads = data.train.gt_reads() - reads_before;

  const fs::path out = out_dir(c);
  save_checkpoint(out / "student.ckpt", result.student);
  write_text(out / "report.json", report_to_json(result.report));
  write_text(out / "table.txt", format_block_table(result.report));
  write_text(out / "config.txt", render_config(cfg));
  write_timing(out, since(t0));
  std::cout << format_block_table(result.report);
  return kOk;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint) {
  const RunConfig cfg = load(c);
  const Model m = load_checkpoint(checkpoint);
  const Data data = load_data(c, cfg);
  const MetricReport r = evaluate(m, data.eval);
  write_text(out_dir(c) / "metrics.json", metrics_to_json(r));
  std::cout << format_metrics(r);
  return kOk;
}

int cmd_graft_probe(const Common& c, const std::string& checkpoint, int block, int sample,
                    const std::string& features, bool zeros, bool capture) {
  const RunConfig cfg = load(c);
  const Model teacher = load_checkpoint(checkpoint);
  const Data data = load_data(c, cfg);
  if (sample < 0 || sample >= data.eval.size()) {
    throw UsageError("--sample " + std::to_string(sample) + " outside the eval stream");
  }
  const Sample& s = data.eval.sample(sample);
  const Tensor image = stack_images({&s});
  const fs::path out = out_dir(c);

  Tape tape;
  BoundParams params(tape, teacher.state);
  const ForwardResult plain = forward(teacher.spec, params, tape.constant(image));
  if (capture) {
    const Var f = plain.block_feature(block);
    save_tensor(out / fmt::format("features_b{}.tensor", block), f.value());
    std::cout << fmt::format("captured block {} features {}\n", block, f.shape().str());
    return kOk;
  }
  Tensor injected;
  if (zeros) {
    injected = Tensor(block_output_shape(teacher.spec, block, 1, s.height, s.width), 0.0);
  } else if (!features.empty()) {
    injected = load_tensor(features);
  } else {
    throw UsageError("graft-probe needs --features PATH, --zeros or --capture");
  }
  const ForwardResult grafted = forward_from(teacher.spec, params, block, tape.constant(injected));
  double max_delta = 0.0;
  for (std::size_t h = 0; h < grafted.heads.size(); ++h) {
    const Tensor& a = grafted.heads[h].prediction.value();
    const Tensor& b = plain.head(grafted.heads[h].task).prediction.value();
    Tensor delta(a.shape(), 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
      delta[i] = a[i] - b[i];
      max_delta = std::max(max_delta, std::abs(delta[i]));
    }
    const std::string task = task_name(grafted.heads[h].task);
    save_tensor(out / ("prediction_" + task + ".tensor"), a);
    save_tensor(out / ("delta_" + task + ".tensor"), delta);
  }
  std::cout << fmt::format("block={} max_abs_delta={:.17g}\n", block, max_delta);
  return kOk;
}

int cmd_gen_data(const Common& c) {
  const RunConfig cfg = load(c);
  const DataSplit s = split(cfg.scene, cfg.data);
  const fs::path out = out_dir(c);
  auto dump = [&](const LabeledSet& set, const char* name) {
    DatasetShard shard{cfg.scene, set.first_index(), {}};
    for (int i = 0; i < set.size(); ++i) shard.samples.push_back(set.sample(i));
    save_dataset(out / name, shard);
  };
  dump(s.train, "train.shard");
  dump(s.eval, "eval.shard");
  std::cout << fmt::format("wrote {} train and {} eval samples to {}\n", s.train.size(),
                           s.eval.size(), out.string());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge amalgamation of dense-prediction teachers"};
  app.require_subcommand(1);

  Common tt, am, ev, gp, gd;
  std::string task, checkpoint, online_base, mode, probe_ckpt, features;
  std::vector<std::string> teachers;
  int block = 0, sample = 0;
  bool zeros = false, capture = false;

  auto* train = app.add_subcommand("train-teacher", "train one single-task teacher");
  add_common(train, tt);
  train->add_option("--task", task, "seg | depth | normal")->required();

  auto* amalg = app.add_subcommand("amalgamate", "amalgamate teachers into one student");
  add_common(amalg, am);
  amalg->add_option("--teachers", teachers, "teacher checkpoints")->required();
  amalg->add_option("--online-base", online_base, "two-task student to extend online");
  amalg->add_option("--mode", mode, "graft | feat-l2");

  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on the eval stream");
  add_common(eval, ev);
  eval->add_option("checkpoint", checkpoint, "checkpoint to evaluate")->required();

  auto* probe = app.add_subcommand("graft-probe", "inject features into a teacher at block n");
  add_common(probe, gp);
  probe->add_option("checkpoint", probe_ckpt, "teacher checkpoint")->required();
  probe->add_option("--block", block, "block index n")->required();
  probe->add_option("--sample", sample, "eval sample index");
  probe->add_option("--features", features, "tensor file with the injected features");
  probe->add_flag("--zeros", zeros, "inject an all-zero tensor");
  probe->add_flag("--capture", capture, "write the teacher's own block-n features");

  auto* gen = app.add_subcommand("gen-data", "write train/eval dataset shards");
  add_common(gen, gd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    configure_logging();
    if (*train) return cmd_train_teacher(tt, task);
    if (*amalg) return cmd_amalgamate(am, teachers, online_base, mode);
    if (*eval) return cmd_evaluate(ev, checkpoint);
    if (*probe) return cmd_graft_probe(gp, probe_ckpt, block, sample, features, zeros, capture);
    if (*gen) return cmd_gen_data(gd);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
