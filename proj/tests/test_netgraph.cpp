#include <cmath>

#include <gtest/gtest.h>

#include "amalgam/error.hpp"
#include "amalgam/losses.hpp"
#include "amalgam/network.hpp"
#include "amalgam/ops.hpp"
#include "support/compare.hpp"
#include "support/gradcheck.hpp"

namespace amalgam {
namespace {

using testing::bit_equal;
using testing::random_tensor;

Model teacher(TaskKind task, std::uint64_t seed = 5) {
  HeadConfig heads;
  heads.depth.bin_length = 0.5;
  Model m;
  m.spec = make_teacher(ArchConfig{}, task, heads);
  m.state = init_state(m.spec, seed);
  return m;
}

Tensor image(std::uint64_t seed, int n = 1, int size = 64) {
  Rng rng(seed);
  return random_tensor(rng, {n, 3, size, size}, 0, 1);
}

TEST(Spec, DefaultIsSymmetricEncoderDecoder) {
  const NetworkSpec s = make_encoder_decoder(ArchConfig{});
  EXPECT_NO_THROW(validate_encoder_decoder(s));
  const auto blocks = s.root_blocks();
  ASSERT_EQ(blocks.size(), 6u);
  const std::vector<int> out{16, 32, 64, 32, 16, 8};
  for (int k = 0; k < 6; ++k) EXPECT_EQ(blocks[k].out_channels(), out[k]) << "block " << k + 1;
  for (int k = 1; k <= 3; ++k) {
    EXPECT_EQ(blocks[k - 1].terminal, Terminal::kPool);
    EXPECT_EQ(blocks[6 - k].terminal, Terminal::kUpsample);
    EXPECT_EQ(blocks[6 - k].width(), blocks[k - 1].width()) << "mirror of block " << k;
    EXPECT_EQ(blocks[k - 1].convs.size(), 2u);
  }
}

TEST(Spec, RejectsBrokenChains) {
  NetworkSpec s = make_encoder_decoder(ArchConfig{});
  s.segments[0].stages.pop_back();
  EXPECT_THROW(validate_encoder_decoder(s), ConfigError);

  NetworkSpec t = make_encoder_decoder(ArchConfig{});
  t.segments[0].stages[1].block.convs[0].in_channels = 7;
  EXPECT_THROW(validate(t), ConfigError);
}

TEST(Spec, FirstDifferenceNamesBlock) {
  const NetworkSpec a = make_encoder_decoder(ArchConfig{});
  ArchConfig other;
  other.encoder_widths = {16, 24, 64};
  const NetworkSpec b = make_encoder_decoder(other);
  EXPECT_FALSE(first_block_difference(a, a).has_value());
  const auto diff = first_block_difference(a, b);
  ASSERT_TRUE(diff.has_value());
  EXPECT_NE(diff->find("block 2"), std::string::npos) << *diff;
}

TEST(Forward, FeatureResolutions) {
  const Model m = teacher(TaskKind::kSegmentation);
  Tape t;
  BoundParams p(t, m.state);
  const ForwardResult r = forward(m.spec, p, t.constant(image(1)));
  const std::vector<int> res{32, 16, 8, 16, 32, 64};
  for (int n = 1; n <= 6; ++n) {
    const Shape s = r.block_feature(n).shape();
    EXPECT_EQ(s.h, res[n - 1]);
    EXPECT_EQ(s.w, res[n - 1]);
    EXPECT_EQ(s, block_output_shape(m.spec, n, 1, 64, 64));
  }
  EXPECT_EQ(r.head(TaskKind::kSegmentation).prediction.shape(), (Shape{1, 5, 64, 64}));
}

TEST(Forward, Deterministic) {
  const Model m = teacher(TaskKind::kDepth);
  const Tensor x = image(2, 2);
  const Tensor a = infer(m, x).head(TaskKind::kDepth);
  const Tensor b = infer(m, x).head(TaskKind::kDepth);
  EXPECT_TRUE(bit_equal(a, b));
}

TEST(Forward, LastFeatureFeedsHead) {
  const Model m = teacher(TaskKind::kNormal);
  Tape t;
  BoundParams p(t, m.state);
  const ForwardResult r = forward(m.spec, p, t.constant(image(3)));
  const Var logits = ops::conv2d(r.block_feature(6), p.at(head_param_name(0, false)),
                                 p.at(head_param_name(0, true)));
  EXPECT_TRUE(bit_equal(logits.value(), r.head(TaskKind::kNormal).logits.value()));
}

TEST(Forward, CaptureDoesNotChangeOutput) {
  const Model m = teacher(TaskKind::kSegmentation);
  const Tensor x = image(4);
  Tape t;
  BoundParams p(t, m.state);
  const ForwardResult r = forward(m.spec, p, t.constant(x));
  EXPECT_TRUE(bit_equal(r.head(TaskKind::kSegmentation).prediction.value(),
                        infer(m, x).head(TaskKind::kSegmentation)));
}

TEST(Forward, IndivisibleInputRejected) {
  const Model m = teacher(TaskKind::kSegmentation);
  Tape t;
  BoundParams p(t, m.state);
  EXPECT_THROW(forward(m.spec, p, t.constant(image(5, 1, 60))), DimensionError);
  EXPECT_THROW(infer(m, Tensor({1, 1, 64, 64})), DimensionError);
}

TEST(ForwardFrom, IdentityGraftEveryBlock) {
  for (TaskKind task : {TaskKind::kSegmentation, TaskKind::kDepth, TaskKind::kNormal}) {
    const Model m = teacher(task);
    Tape t;
    BoundParams p(t, m.state);
    const ForwardResult full = forward(m.spec, p, t.constant(image(6, 2)));
    for (int n = 1; n <= 6; ++n) {
      const ForwardResult g = forward_from(m.spec, p, n, t.constant(full.block_feature(n).value()));
      EXPECT_TRUE(bit_equal(g.head(task).prediction.value(), full.head(task).prediction.value()))
          << task_name(task) << " block " << n;
    }
  }
}

TEST(ForwardFrom, ZerosMatchManualContinuation) {
  const Model m = teacher(TaskKind::kDepth);
  const int n = 4;
  Tape t;
  BoundParams p(t, m.state);
  const Shape s = block_output_shape(m.spec, n, 1, 64, 64);
  const ForwardResult g = forward_from(m.spec, p, n, t.constant(Tensor(s, 0.0)));

  Var x = t.constant(Tensor(s, 0.0));
  const auto blocks = m.spec.root_blocks();
  for (int k = n; k < 6; ++k) x = block_forward(blocks[k], p, 0, k, x);
  const Var logits = ops::conv2d(x, p.at(head_param_name(0, false)), p.at(head_param_name(0, true)));
  const Var depth = depth_decode(logits, {16, 0.5});
  EXPECT_TRUE(bit_equal(depth.value(), g.head(TaskKind::kDepth).prediction.value()));
}

TEST(ForwardFrom, ShapeMismatchNamesBlock) {
  const Model m = teacher(TaskKind::kSegmentation);
  Tape t;
  BoundParams p(t, m.state);
  try {
    forward_from(m.spec, p, 5, t.constant(Tensor({1, 7, 32, 32})));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("block 5"), std::string::npos) << e.what();
  }
  EXPECT_THROW(forward_from(m.spec, p, 9, t.constant(Tensor({1, 8, 64, 64}))), Error);
}

TEST(ForwardFrom, InjectedGradientMatchesFiniteDifferences) {
  ArchConfig arch{3, {3, 4}, 2, 2};
  HeadConfig heads{3, {4, 1.0}};
  Model m{make_teacher(arch, TaskKind::kSegmentation, heads), {}};
  m.state = init_state(m.spec, 9);
  Rng rng(10);
  LabelMap labels(1, 8, 8);
  for (auto& l : labels.labels) l = static_cast<std::uint16_t>(rng.uniform_int(0, 2));
  const auto r = testing::check_gradients(
      "injected", {random_tensor(rng, block_output_shape(m.spec, 3, 1, 8, 8), 0, 1)},
      [&](Tape& t, const std::vector<Var>& v) {
        BoundParams p(t, m.state);
        return seg_loss(forward_from(m.spec, p, 3, v[0]).heads[0].prediction, labels, 0.0, {});
      });
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(ChannelCoding, ZeroInputStaysZero) {
  const ChannelCoding c = ChannelCoding::init({8, 4}, 1);
  Tape t;
  const Var y = channel_code(bind_coding(t, c, false), t.constant(Tensor({2, 8, 4, 4})));
  for (double v : y.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(ChannelCoding, ZeroWeightsHalve) {
  ChannelCoding c = ChannelCoding::init({8, 4}, 2);
  for (Tensor* w : {&c.w1, &c.b1, &c.w2, &c.b2}) *w = Tensor(w->shape(), 0.0);
  Rng rng(3);
  const Tensor x = random_tensor(rng, {1, 8, 4, 4});
  Tape t;
  const Var y = channel_code(bind_coding(t, c, false), t.constant(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y.value()[i], 0.5 * x[i]);
}

TEST(ChannelCoding, MatchesStraightLinePipeline) {
  const int C = 8, H = 3, W = 5, hidden = 2;
  const ChannelCoding c = ChannelCoding::init({C, 4}, 4);
  Rng rng(5);
  const Tensor x = random_tensor(rng, {1, C, H, W});
  Tape t;
  const Var y = channel_code(bind_coding(t, c, false), t.constant(x));
  ASSERT_EQ(y.shape(), x.shape());

  std::vector<double> gap(C, 0.0), hid(hidden, 0.0), s(C, 0.0);
  for (int ch = 0; ch < C; ++ch) {
    for (int i = 0; i < H * W; ++i) gap[ch] += x[ch * H * W + i];
    gap[ch] /= H * W;
  }
  for (int j = 0; j < hidden; ++j) {
    double a = c.b1[j];
    for (int ch = 0; ch < C; ++ch) a += c.w1[j * C + ch] * gap[ch];
    hid[j] = std::max(0.0, a);
  }
  for (int ch = 0; ch < C; ++ch) {
    double a = c.b2[ch];
    for (int j = 0; j < hidden; ++j) a += c.w2[ch * hidden + j] * hid[j];
    s[ch] = 1.0 / (1.0 + std::exp(-a));
    EXPECT_GT(s[ch], 0.0);
    EXPECT_LT(s[ch], 1.0);
  }
  for (int ch = 0; ch < C; ++ch) {
    for (int i = 0; i < H * W; ++i) {
      EXPECT_NEAR(y.value()[ch * H * W + i], x[ch * H * W + i] * s[ch], 1e-14);
    }
  }
}

TEST(ChannelCoding, ChannelMismatch) {
  const ChannelCoding c = ChannelCoding::init({8, 4}, 6);
  Tape t;
  EXPECT_THROW(channel_code(bind_coding(t, c, false), t.constant(Tensor({1, 4, 2, 2}))),
               DimensionError);
}

TEST(DepthDecode, EqualLogits) {
  Tape t;
  const Var d = depth_decode(t.constant(Tensor({1, 3, 2, 2}, 0.3)), {3, 1.0});
  for (double v : d.value().data()) EXPECT_NEAR(v, 2.0, 1e-15);
}

TEST(DepthDecode, OneHotBin) {
  Tape t;
  Tensor logits({1, 3, 1, 1}, {-1e3, 1e3, -1e3});
  const Var d = depth_decode(t.constant(logits), {3, 0.5});
  EXPECT_DOUBLE_EQ(d.value().item(), 1.0);
}

TEST(DepthDecode, HandExpectation) {
  Tape t;
  const Var d = depth_decode(t.constant(Tensor({1, 3, 1, 1}, {0.0, std::log(2.0), std::log(3.0)})),
                             {3, 1.0});
  EXPECT_NEAR(d.value().item(), 14.0 / 6.0, 1e-14);
}

TEST(OneHot, Argmax) {
  const LabelMap a = one_hot_supervision(Tensor({1, 3, 1, 1}, {0.1, 0.7, 0.2}));
  EXPECT_EQ(a.labels[0], 1);
  const LabelMap b = one_hot_supervision(Tensor({1, 3, 1, 1}, 1.0 / 3.0));
  EXPECT_EQ(b.labels[0], 0);
}

TEST(OneHot, MonotoneRescaleInvariant) {
  Rng rng(7);
  Tensor p = random_tensor(rng, {2, 5, 4, 4}, 0, 1);
  Tensor q = p;
  for (auto& v : q.data()) v = 3.0 * v * v + 0.1;
  EXPECT_EQ(one_hot_supervision(p).labels, one_hot_supervision(q).labels);
}

TEST(CountParams, SingleConv) {
  NetworkSpec s;
  s.input_channels = 2;
  Segment seg;
  seg.stages.push_back(Stage::of(BlockSpec{1, {ConvSpec{2, 4, 3}}, Terminal::kPool}));
  s.segments.push_back(seg);
  EXPECT_EQ(count_params(s), 2u * 4 * 9 + 4);
  EXPECT_EQ(count_params(s, init_state(s, 1)), 76u);
}

TEST(CountParams, Coding) {
  EXPECT_EQ((CodingSpec{8, 4}).param_count(), 42u);
  NetworkSpec s;
  s.input_channels = 3;
  Segment seg;
  seg.stages.push_back(Stage::of(BlockSpec{1, {ConvSpec{3, 8, 3}}, Terminal::kPool}));
  seg.stages.push_back(Stage::of(CodingSpec{8, 4}));
  s.segments.push_back(seg);
  EXPECT_EQ(count_params(s), 3u * 8 * 9 + 8 + 42);
  EXPECT_EQ(count_params(s, init_state(s, 2)), count_params(s));
}

TEST(CountParams, EmptySpec) { EXPECT_EQ(count_params(NetworkSpec{}), 0u); }

TEST(State, CheckRejectsMismatch) {
  Model m = teacher(TaskKind::kSegmentation);
  EXPECT_NO_THROW(check_state(m.spec, m.state));
  m.state.params.erase(m.state.params.begin());
  EXPECT_THROW(check_state(m.spec, m.state), ConfigError);
}

TEST(State, InitIsSeeded) {
  const Model a = teacher(TaskKind::kDepth, 1);
  const Model b = teacher(TaskKind::kDepth, 1);
  const Model c = teacher(TaskKind::kDepth, 2);
  EXPECT_EQ(state_hash(a.state), state_hash(b.state));
  EXPECT_NE(state_hash(a.state), state_hash(c.state));
}

}  // namespace
}  // namespace amalgam
