// Acceptance run: one PASS/FAIL line per criterion. Trains the desk-scale
// teachers from scratch unless --reuse-teachers finds checkpoints in the
// work directory (development only; the timing then comes from the cache).
#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/core.h>

#include "amalgam/amalgamation.hpp"
#include "amalgam/checkpoint.hpp"
#include "amalgam/config.hpp"
#include "amalgam/error.hpp"
#include "amalgam/log.hpp"
#include "amalgam/losses.hpp"
#include "amalgam/metrics.hpp"
#include "amalgam/report.hpp"
#include "amalgam/rng.hpp"
#include "amalgam/teacher.hpp"
#include "support/compare.hpp"
#include "support/gradcheck.hpp"

namespace fs = std::filesystem;
using namespace amalgam;
using amalgam::testing::bit_equal;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("FAILED ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

int failures = 0;

void report(int id, const std::string& title, const Verdict& v) {
  if (!v.pass) ++failures;
  std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << title << " — "
            << v.detail << std::endl;
}

template <typename Fn>
void criterion(int id, const std::string& title, Fn&& fn) {
  Verdict v;
  try {
    fn(v);
  } catch (const std::exception& e) {
    v.require(false, std::string("exception: ") + e.what());
  }
  report(id, title, v);
}

// ---------------------------------------------------------------------------

void gradient_criterion(Verdict& v) {
  const auto t0 = Clock::now();
  const auto checks = amalgam::testing::gradient_suite(0);
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  for (const auto& c : checks) {
    checked += c.checked;
    if (c.max_rel_error > worst) {
      worst = c.max_rel_error;
      worst_name = c.name;
    }
    v.require(c.ok(1e-5), fmt::format("{} rel error {:.3g}", c.name, c.max_rel_error));
  }
  v.require(elapsed < 60.0, fmt::format("suite took {:.1f} s", elapsed));
  v.note(fmt::format("{} checks, {} partials, worst {:.2e} ({}), {:.1f} s", checks.size(), checked,
                     worst, worst_name, elapsed));
}

void depth_loss_criterion(Verdict& v) {
  Rng rng(2024);
  int bound_violations = 0, zero_violations = 0, grad_violations = 0, zero_cases = 0;
  double tightest = std::numeric_limits<double>::infinity();
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = rng.uniform_int(1, 64);
    Tensor gt({1, 1, 1, n}), pred({1, 1, 1, n});
    // Every tenth vector is d = 0 exactly; a few more are constant offsets.
    const bool zero = trial % 10 == 0;
    const bool constant = trial % 10 == 5;
    const double offset = rng.uniform(-2, 2);
    for (int i = 0; i < n; ++i) {
      gt[i] = rng.uniform(0.5, 8.0);
      pred[i] = zero ? gt[i] : gt[i] + (constant ? offset : rng.normal());
    }
    double sq = 0.0;
    bool all_zero = true;
    for (int i = 0; i < n; ++i) {
      const double d = pred[i] - gt[i];
      sq += d * d;
      all_zero &= d == 0.0;
    }
    ValidMask mask(1, 1, n);
    // Masked copy: half the pixels dropped, each carrying a wild residual.
    ValidMask half(1, 1, n);
    Tensor wild = pred;
    for (int i = 0; i < n; ++i) {
      if (i % 2 == 1) {
        half.valid[i] = 0;
        wild[i] = rng.uniform(-100, 100);
      }
    }
    Tape t;
    const double value = depth_loss(t.constant(gt), t.constant(pred), mask).value().item();
    if (value < sq / (2.0 * n) - 1e-12) ++bound_violations;
    tightest = std::min(tightest, value - sq / (2.0 * n));
    if (all_zero) {
      ++zero_cases;
      if (value != 0.0) ++zero_violations;
    } else if (!(value > 0.0)) {
      ++zero_violations;
    }
    const Var p = t.variable(wild);
    const Var loss = depth_loss(t.constant(gt), p, half);
    t.backward(loss);
    const Tensor g = t.grad(p);
    for (int i = 1; i < n; i += 2) {
      if (g[i] != 0.0 || std::signbit(g[i])) ++grad_violations;
    }
  }
  v.require(bound_violations == 0, fmt::format("{} bound violations", bound_violations));
  v.require(zero_violations == 0, fmt::format("{} zero-iff violations", zero_violations));
  v.require(grad_violations == 0, fmt::format("{} masked pixels with nonzero gradient", grad_violations));
  v.note(fmt::format("1000 vectors ({} with d = 0), min slack over the bound {:.3g}, masked "
                     "gradients exactly zero",
                     zero_cases, tightest));
}

Tensor unit_normals(int n, double x, double y, double z) {
  Tensor t({1, 3, 1, n});
  const double len = std::sqrt(x * x + y * y + z * z);
  for (int i = 0; i < n; ++i) {
    t[i] = x / len;
    t[n + i] = y / len;
    t[2 * n + i] = z / len;
  }
  return t;
}

Tensor depth_map(std::vector<double> values) {
  const int n = static_cast<int>(values.size());
  return Tensor({1, 1, 1, n}, std::move(values));
}

void metric_criterion(Verdict& v) {
  Rng rng(11);
  LabelMap gt(1, 4, 4);
  for (auto& l : gt.labels) l = static_cast<std::uint16_t>(rng.uniform_int(0, 4));
  const SegMetrics ps = seg_metrics(gt, gt, 5);
  v.require(ps.miou == 1.0 && ps.pixel_acc == 1.0, "perfect segmentation");

  Tensor d({1, 1, 4, 4});
  for (auto& x : d.data()) x = rng.uniform(1, 7);
  const DepthMetrics pd = depth_metrics(d, d, ValidMask(1, 4, 4));
  v.require(pd.abs_rel == 0.0 && pd.sqr_rel == 0.0 && pd.delta1 == 1.0 && pd.delta2 == 1.0 &&
                pd.delta3 == 1.0,
            "perfect depth");

  const Tensor n = unit_normals(8, 0.3, -0.4, -0.8);
  const NormalMetrics pn = normal_metrics(n, n, ValidMask(1, 1, 8));
  v.require(std::abs(pn.mean_deg) < 1e-9 && std::abs(pn.median_deg) < 1e-9, "perfect normals");

  LabelMap g2(1, 2, 2), p2(1, 2, 2);
  g2.labels = {0, 0, 1, 1};
  p2.labels = {0, 1, 1, 1};
  const SegMetrics hand = seg_metrics(p2, g2, 5);
  v.require(std::abs(hand.miou - 7.0 / 12.0) < 1e-9, fmt::format("2x2 mIoU {}", hand.miou));
  v.require(std::abs(hand.pixel_acc - 0.75) < 1e-9, "2x2 pixel accuracy");

  const ValidMask one(1, 1, 1);
  const DepthMetrics two = depth_metrics(depth_map({2.0}), depth_map({1.0}), one);
  v.require(std::abs(two.abs_rel - 1.0) < 1e-9 && std::abs(two.sqr_rel - 1.0) < 1e-9 &&
                two.delta1 == 0.0 && two.delta2 == 0.0 && two.delta3 == 0.0,
            "ratio-2 case");
  const DepthMetrics close = depth_metrics(depth_map({1.2}), depth_map({1.0}), one);
  v.require(std::abs(close.delta1 - 1.0) < 1e-9, "ratio-1.2 case");
  v.note(fmt::format("perfect cases exact; 2x2 mIoU = {:.12f}, PA = {}; ratio 2 -> abs rel {}, "
                     "delta (0,0,0); ratio 1.2 -> delta1 {}",
                     hand.miou, hand.pixel_acc, two.abs_rel, close.delta1));
}

// Brute force over (N/2, N]; ties go to the deeper block.
int brute_force_point(const std::vector<double>& col) {
  const int N = static_cast<int>(col.size());
  int best = -1;
  for (int n = N / 2 + 1; n <= N; ++n) {
    if (best < 0 || col[n - 1] <= col[best - 1]) best = n;
  }
  return best;
}

void branch_out_criterion(Verdict& v, int N) {
  Rng rng(99);
  int mismatches = 0, ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    BlockLossTable t;
    const int cols = rng.uniform_int(1, 3);
    const bool coarse = trial % 2 == 0;  // small value set: frequent ties
    for (int c = 0; c < cols; ++c) {
      t.columns.push_back("t" + std::to_string(c));
      std::vector<double> col(N);
      for (auto& x : col) x = coarse ? rng.uniform_int(0, 2) * 0.25 : rng.uniform(0, 3);
      t.losses.push_back(col);
    }
    const BranchOutPlan plan = select_branch_out(t, N);
    for (int c = 0; c < cols; ++c) {
      const auto& col = t.losses[c];
      int at_min = 0;
      const double m = col[brute_force_point(col) - 1];
      for (int n = N / 2 + 1; n <= N; ++n) at_min += col[n - 1] == m;
      ties += at_min > 1;
      if (plan.at(t.columns[c]) != brute_force_point(col)) ++mismatches;
    }
  }
  v.require(mismatches == 0, fmt::format("{} mismatches", mismatches));
  v.note(fmt::format("1000 tables, N = {}, {} columns with tied minima, 0 mismatches", N, ties));
}

// ---------------------------------------------------------------------------

struct Desk {
  explicit Desk(RunConfig c) : cfg(std::move(c)), data(split(cfg.scene, cfg.data)) {}

  RunConfig cfg;
  DataSplit data;
  Model seg, depth, normal;
  double teacher_seconds = 0.0;
  std::map<std::string, MetricReport> teacher_metrics;
};

Model trained(const Desk& d, TaskKind task, const fs::path& workdir, bool reuse, double& seconds) {
  const fs::path ckpt = workdir / (std::string(task_name(task)) + ".ckpt");
  const fs::path timing = workdir / (std::string(task_name(task)) + ".seconds");
  if (reuse && fs::exists(ckpt) && fs::exists(timing)) {
    seconds += std::stod(read_file(timing));
    return load_checkpoint(ckpt);
  }
  const auto t0 = Clock::now();
  TeacherResult r = train_teacher(make_teacher(d.cfg.arch, task, d.cfg.heads), d.data.train, d.cfg.train);
  const double s = seconds_since(t0);
  seconds += s;
  save_checkpoint(ckpt, r.model);
  write_file_atomic(timing, fmt::format("{:.3f}\n", s));
  return std::move(r.model);
}

int run_cli(const std::string& args, const fs::path& out) {
  fs::create_directories(out);
  const std::string cmd = std::string(AMALGAM_CLI_PATH) + " " + args + " --out " + out.string() +
                          " > " + (out / "stdout.txt").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance run"};
  std::string workdir = "acceptance_run";
  std::string config_path = AMALGAM_DESK_CONFIG;
  bool reuse = false;
  app.add_option("--workdir", workdir, "scratch directory for checkpoints and reports");
  app.add_option("--config", config_path, "desk configuration");
  app.add_flag("--reuse-teachers", reuse, "load cached teacher checkpoints (development)");
  CLI11_PARSE(app, argc, argv);
  configure_logging();
  const fs::path work(workdir);
  fs::create_directories(work);
  const auto start = Clock::now();

  criterion(1, "gradient suite, central differences, rel error < 1e-5, < 60 s", gradient_criterion);

  Desk desk(resolve_config(load_config_file(config_path)));
  std::cout << fmt::format("desk config {}: seed {}, {}x{} scenes, {} train / {} eval", config_path,
                           desk.cfg.seed, desk.cfg.scene.height, desk.cfg.scene.width,
                           desk.data.train.size(), desk.data.eval.size())
            << std::endl;
  desk.seg = trained(desk, TaskKind::kSegmentation, work, reuse, desk.teacher_seconds);
  desk.depth = trained(desk, TaskKind::kDepth, work, reuse, desk.teacher_seconds);
  desk.normal = trained(desk, TaskKind::kNormal, work, reuse, desk.teacher_seconds);
  for (const Model* m : {&desk.seg, &desk.depth, &desk.normal}) {
    const std::string name = task_name(m->spec.heads().front().second.task);
    desk.teacher_metrics[name] = evaluate(*m, desk.data.eval);
    std::cout << "teacher " << name << ":\n" << format_metrics(desk.teacher_metrics[name]);
  }
  std::cout << fmt::format("teachers trained in {:.1f} s", desk.teacher_seconds) << std::endl;
  const NetworkSpec student_spec = student_spec_from(desk.seg);
  const int N = student_spec.block_count();

  criterion(2, "identity graft is bit-exact, every decoder block of every teacher, 20 inputs",
            [&](Verdict& v) {
              int compared = 0;
              for (const Model* m : {&desk.seg, &desk.depth, &desk.normal}) {
                for (int i = 0; i < 20; ++i) {
                  const Tensor x = stack_images({&desk.data.eval.sample(i)});
                  Tape t;
                  BoundParams p(t, m->state);
                  const ForwardResult full = forward(m->spec, p, t.constant(x));
                  const Tensor& ref = full.heads.front().prediction.value();
                  for (int n = N / 2 + 1; n <= N; ++n) {
                    const ForwardResult g = forward_from(m->spec, p, n, full.block_feature(n));
                    ++compared;
                    v.require(bit_equal(g.heads.front().prediction.value(), ref),
                              fmt::format("{} block {} input {}",
                                          task_name(m->spec.heads().front().second.task), n, i));
                  }
                }
              }
              v.note(fmt::format("{} grafts (3 teachers x 20 inputs x {} decoder blocks), all "
                                 "bit-identical",
                                 compared, N / 2));
            });

  criterion(3, "depth loss: bound, zero iff d = 0, masked pixels get zero gradient",
            depth_loss_criterion);
  criterion(4, "metric oracles (perfect cases, 2x2 mIoU 7/12, delta thresholds)", metric_criterion);

  // Two-task amalgamation at desk scale.
  const ImageSource images(desk.data.train);
  const std::uint64_t reads_before = desk.data.train.gt_reads();
  const auto t_amalg = Clock::now();
  const AmalgamationResult two =
      amalgamate_two(student_spec, desk.seg, desk.depth, images, &desk.data.eval, desk.cfg.amalg);
  const double amalg_seconds = seconds_since(t_amalg);
  const std::uint64_t reads = desk.data.train.gt_reads() - reads_before;
  write_file_atomic(work / "two_report.json", report_to_json(two.report));
  write_file_atomic(work / "two_table.txt", format_block_table(two.report));
  std::cout << format_block_table(two.report) << std::flush;

  criterion(5, "desk end-to-end: teachers mIoU >= 0.85 / abs rel <= 0.10; student >= 0.95x "
               "mIoU, <= 1.10x abs rel; zero GT reads; < 30 min",
            [&](Verdict& v) {
              const double t_miou = desk.teacher_metrics.at("seg").seg->miou;
              const double t_rel = desk.teacher_metrics.at("depth").depth->abs_rel;
              const MetricReport& s = two.report.metrics.at("student");
              const double total = desk.teacher_seconds + amalg_seconds;
              v.require(t_miou >= 0.85, fmt::format("teacher mIoU {:.4f}", t_miou));
              v.require(t_rel <= 0.10, fmt::format("teacher abs rel {:.4f}", t_rel));
              v.require(s.seg->miou >= 0.95 * t_miou,
                        fmt::format("student mIoU {:.4f} < {:.4f}", s.seg->miou, 0.95 * t_miou));
              v.require(s.depth->abs_rel <= 1.10 * t_rel,
                        fmt::format("student abs rel {:.4f} > {:.4f}", s.depth->abs_rel, 1.10 * t_rel));
              v.require(reads == 0, fmt::format("{} ground-truth reads", reads));
              v.require(total < 1800.0, fmt::format("runtime {:.0f} s", total));
              v.note(fmt::format("teacher mIoU {:.4f}, abs rel {:.4f}; student mIoU {:.4f} "
                                 "({:.3f}x), abs rel {:.4f} ({:.3f}x); plan seg={} depth={}; "
                                 "GT reads {}; teachers {:.0f} s + amalgamation {:.0f} s = "
                                 "{:.0f} s on 1 core",
                                 t_miou, t_rel, s.seg->miou, s.seg->miou / t_miou, s.depth->abs_rel,
                                 s.depth->abs_rel / t_rel, two.report.plan.at("seg"),
                                 two.report.plan.at("depth"), reads, desk.teacher_seconds,
                                 amalg_seconds, total));
            });

  criterion(6, "student params < 0.60 x teacher sum for every plan in (N/2, N]", [&](Verdict& v) {
    const double sum = static_cast<double>(count_params(desk.seg.spec) + count_params(desk.depth.spec));
    const ModelState trunk = init_state(student_spec, 1);
    double worst = 0.0;
    int plans = 0;
    for (int ps = N / 2 + 1; ps <= N; ++ps) {
      for (int pd = N / 2 + 1; pd <= N; ++pd) {
        const std::size_t predicted = assembled_param_count(
            student_spec, {{&desk.seg.spec, ps}, {&desk.depth.spec, pd}}, desk.cfg.amalg.coding_reduction);
        const int c_s = student_spec.root_blocks()[ps - 1].out_channels();
        const int c_d = student_spec.root_blocks()[pd - 1].out_channels();
        const AssembledTarget a = assemble_target(
            student_spec, trunk,
            {{"seg", &desk.seg, ps, ChannelCoding::init({c_s, desk.cfg.amalg.coding_reduction}, 1)},
             {"depth", &desk.depth, pd, ChannelCoding::init({c_d, desk.cfg.amalg.coding_reduction}, 2)}});
        const std::size_t built = count_params(a.model.spec);
        v.require(built == predicted, fmt::format("plan ({}, {}) count {} vs {}", ps, pd, built, predicted));
        const double ratio = built / sum;
        worst = std::max(worst, ratio);
        v.require(ratio < 0.60, fmt::format("plan ({}, {}) ratio {:.4f}", ps, pd, ratio));
        ++plans;
      }
    }
    v.note(fmt::format("{} plans, worst ratio {:.4f} (teachers {} params)", plans, worst,
                       static_cast<std::size_t>(sum)));
  });

  criterion(7, "channel codings add < 4% parameters", [&](Verdict& v) {
    const double student = static_cast<double>(count_params(student_spec));
    double worst = 0.0, all_blocks = 0.0;
    int worst_block = 0;
    for (int n = 1; n <= N; ++n) {
      const int c = student_spec.root_blocks()[n - 1].out_channels();
      const double per_block =
          2.0 * ChannelCoding::init({c, desk.cfg.amalg.coding_reduction}, 0).param_count();
      all_blocks += per_block;
      if (per_block / student > worst) {
        worst = per_block / student;
        worst_block = n;
      }
    }
    const double adapters =
        static_cast<double>(two.report.params.adapters) / two.report.params.student;
    v.require(worst < 0.04, fmt::format("block {} codings {:.2f}%", worst_block, 100 * worst));
    v.require(adapters < 0.04, fmt::format("assembled adapters {:.2f}%", 100 * adapters));
    v.note(fmt::format("largest attachment (block {}, two codings) {:.2f}% of the student; "
                       "adapters kept after assembly {:.2f}%; codings of all blocks together "
                       "{:.2f}%",
                       worst_block, 100 * worst, 100 * adapters, 100 * all_blocks / student));
  });

  criterion(8, "select_branch_out equals brute force on 1000 random tables with ties",
            [&](Verdict& v) { branch_out_criterion(v, N); });

  criterion(9, "three teachers: offline lambda3 = 0 reproduces the two-task table; online "
               "freezes TargetNet-2; offline normal mean <= 1.15 x NormNet",
            [&](Verdict& v) {
              AmalgamationConfig zero = desk.cfg.amalg;
              zero.lambda_norm = 0.0;
              const AmalgamationResult off0 = amalgamate_offline3(
                  student_spec, desk.seg, desk.depth, desk.normal, images, nullptr, zero);
              bool same = true;
              for (const char* col : {"seg", "depth"}) {
                const auto& a = two.report.table.column(col);
                const auto& b = off0.report.table.column(col);
                same &= a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
              }
              v.require(same, "lambda3 = 0 table differs from the two-task table");

              const ModelState before = two.student.state;
              const AmalgamationResult online =
                  amalgamate_online(two.student, desk.normal, images, &desk.data.eval, desk.cfg.amalg);
              v.require(bit_equal(before, two.student.state), "TargetNet-2 parameters changed");
              const FreezeAudit& audit = online.report.freeze.front();
              v.require(audit.name == "u2" && audit.before == audit.after &&
                            audit.before == state_hash(before),
                        "freeze audit");
              const AmalgamationResult off = amalgamate_offline3(
                  student_spec, desk.seg, desk.depth, desk.normal, images, &desk.data.eval,
                  desk.cfg.amalg);
              write_file_atomic(work / "offline3_report.json", report_to_json(off.report));
              write_file_atomic(work / "online_report.json", report_to_json(online.report));
              const double teacher_mean = desk.teacher_metrics.at("normal").normal->mean_deg;
              const double student_mean = off.report.metrics.at("student").normal->mean_deg;
              const double online_mean = online.report.metrics.at("student").normal->mean_deg;
              v.require(student_mean <= 1.15 * teacher_mean,
                        fmt::format("offline normal mean {:.3f} > {:.3f}", student_mean,
                                    1.15 * teacher_mean));
              v.note(fmt::format("lambda3 = 0 seg/depth columns bit-identical: {}; every "
                                 "TargetNet-2 tensor bit-identical, hash {:016x}; offline normal "
                                 "mean {:.3f} deg vs NormNet {:.3f} ({:.3f}x); online normal mean "
                                 "{:.3f}",
                                 same ? "yes" : "no", audit.before, student_mean, teacher_mean, student_mean / teacher_mean, online_mean));
            });

  criterion(10, "two identical amalgamate invocations give byte-identical outputs", [&](Verdict& v) {
    // A reduced configuration keeps this check cheap; the code path is the same.
    const fs::path dir = work / "determinism";
    fs::create_directories(dir);
    const fs::path conf = dir / "reduced.conf";
    write_file_atomic(conf,
                      "seed = 0\n[scene]\nheight = 32\nwidth = 32\n[data]\ntrain_count = 24\n"
                      "eval_first = 5000\neval_count = 8\n[train]\nepochs = 1\n[amalg]\n"
                      "epochs_per_block = 1\nfinetune_steps = 10\nprobe_samples = 8\n");
    const std::string base = " --config " + conf.string();
    v.require(run_cli("train-teacher --task seg" + base, dir / "teachers") == 0, "seg teacher");
    v.require(run_cli("train-teacher --task depth" + base, dir / "teachers") == 0, "depth teacher");
    const std::string args = "amalgamate --teachers " + (dir / "teachers" / "seg.ckpt").string() +
                             " " + (dir / "teachers" / "depth.ckpt").string() + base;
    v.require(run_cli(args, dir / "run_a") == 0, "first amalgamate run");
    v.require(run_cli(args, dir / "run_b") == 0, "second amalgamate run");
    std::size_t bytes = 0;
    for (const char* f : {"student.ckpt", "report.json", "table.txt", "config.txt"}) {
      const std::string a = read_file(dir / "run_a" / f);
      const std::string b = read_file(dir / "run_b" / f);
      v.require(a == b, std::string(f) + " differs");
      bytes += a.size();
    }
    v.note(fmt::format("student.ckpt, report.json, table.txt, config.txt identical ({} bytes)", bytes));
  });

  std::cout << fmt::format("{} of 10 criteria failed; total wall time {:.0f} s", failures,
                           seconds_since(start))
            << std::endl;
  return failures == 0 ? 0 : 1;
}
