#include <benchmark/benchmark.h>

#include <filesystem>

#include "amalgam/amalgamation.hpp"
#include "amalgam/checkpoint.hpp"
#include "amalgam/ops.hpp"
#include "amalgam/rng.hpp"
#include "amalgam/scene.hpp"
#include "amalgam/teacher.hpp"

using namespace amalgam;

namespace {

Tensor random(Rng& rng, Shape s) {
  Tensor t(s);
  for (auto& v : t.data()) v = rng.uniform(-1, 1);
  return t;
}

Model desk_teacher(TaskKind task) {
  HeadConfig heads;
  heads.depth.bin_length = SceneConfig{}.far / heads.depth.bins;
  Model m{make_teacher(ArchConfig{}, task, heads), {}};
  m.state = init_state(m.spec, 1);
  return m;
}

}  // namespace

// 3x3 convolution, batch 8, forward and backward; arg = channels.
static void BM_Conv2d(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const int hw = static_cast<int>(state.range(1));
  Rng rng(1);
  const Tensor x = random(rng, {8, c, hw, hw});
  const Tensor w = random(rng, {c, c, 3, 3});
  const Tensor b = random(rng, {1, c, 1, 1});
  for (auto _ : state) {
    Tape t;
    const Var xv = t.variable(x), wv = t.variable(w), bv = t.variable(b);
    const Var y = ops::conv2d(xv, wv, bv, 1, 1);
    t.backward(ops::sum_squares(y));
    benchmark::DoNotOptimize(t.grad(wv).ptr());
  }
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_Conv2d)->Args({16, 64})->Args({32, 32})->Args({64, 16})->Unit(benchmark::kMillisecond);

static void BM_TeacherInfer(benchmark::State& state) {
  const Model m = desk_teacher(TaskKind::kDepth);
  Rng rng(2);
  const Tensor x = random(rng, {8, 3, 64, 64});
  for (auto _ : state) benchmark::DoNotOptimize(infer(m, x).heads.size());
  state.SetItemsProcessed(state.iterations() * 8);
}
BENCHMARK(BM_TeacherInfer)->Unit(benchmark::kMillisecond);

// One graft-objective evaluation with gradients at block n.
static void BM_GraftStep(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Model seg = desk_teacher(TaskKind::kSegmentation);
  const Model depth = desk_teacher(TaskKind::kDepth);
  const NetworkSpec spec = student_spec_from(seg);
  const ModelState student = init_state(spec, 3);
  Rng rng(4);
  const Tensor x = random(rng, {8, 3, 64, 64});
  const int c = spec.root_blocks()[n - 1].out_channels();
  const ChannelCoding coding = ChannelCoding::init({c, 4}, 5);
  for (auto _ : state) {
    Tape t;
    BoundParams sp(t, student), gp(t, seg.state), dp(t, depth.state);
    const Var f = forward(spec, sp, t.constant(x), ForwardOptions{n}).block_feature(n);
    const CodingVars cs = bind_coding(t, coding, true), cd = bind_coding(t, coding, true);
    const Var s_out = forward_from(seg.spec, gp, n, channel_code(cs, f)).heads.front().prediction;
    const Var d_out = forward_from(depth.spec, dp, n, channel_code(cd, f)).heads.front().prediction;
    const Var loss = ops::add(ops::sum_squares(s_out), ops::sum_squares(d_out));
    t.backward(loss);
    benchmark::DoNotOptimize(loss.value().item());
  }
}
BENCHMARK(BM_GraftStep)->Arg(4)->Arg(6)->Unit(benchmark::kMillisecond);

static void BM_SceneGenerate(benchmark::State& state) {
  SceneConfig cfg;
  std::int64_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(generate(cfg, i++).image.data());
}
BENCHMARK(BM_SceneGenerate)->Unit(benchmark::kMicrosecond);

static void BM_SelectBranchOut(benchmark::State& state) {
  Rng rng(6);
  BlockLossTable t;
  t.columns = {"seg", "depth", "normal"};
  for (int c = 0; c < 3; ++c) {
    std::vector<double> col(10);
    for (auto& v : col) v = rng.uniform();
    t.losses.push_back(col);
  }
  for (auto _ : state) benchmark::DoNotOptimize(select_branch_out(t, 10).last());
}
BENCHMARK(BM_SelectBranchOut);

static void BM_CheckpointRoundTrip(benchmark::State& state) {
  const Model m = desk_teacher(TaskKind::kSegmentation);
  const auto path = std::filesystem::temp_directory_path() / "amalgam_bench.ckpt";
  for (auto _ : state) {
    save_checkpoint(path, m);
    benchmark::DoNotOptimize(load_checkpoint(path).state.params.size());
  }
  std::filesystem::remove(path);
  state.SetBytesProcessed(state.iterations() * count_params(m.spec) * sizeof(double));
}
BENCHMARK(BM_CheckpointRoundTrip)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
