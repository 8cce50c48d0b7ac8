#include "amalgam/network.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <utility>

#include "amalgam/error.hpp"
#include "amalgam/ops.hpp"
#include "amalgam/rng.hpp"

namespace amalgam {

const char* task_name(TaskKind task) {
  switch (task) {
    case TaskKind::kSegmentation: return "seg";
    case TaskKind::kDepth: return "depth";
    case TaskKind::kNormal: return "normal";
  }
  return "unknown";
}

TaskKind parse_task(std::string_view name) {
  if (name == "seg" || name == "segmentation") return TaskKind::kSegmentation;
  if (name == "depth") return TaskKind::kDepth;
  if (name == "normal" || name == "norm") return TaskKind::kNormal;
  throw UsageError("unknown task '" + std::string(name) +
                   "' (expected seg, depth or normal)");
}

int NetworkSpec::block_count() const {
  int n = 0;
  for (const auto& seg : segments) {
    for (const auto& st : seg.stages) {
      if (st.is_block()) n = std::max(n, st.block.index);
    }
  }
  return n;
}

std::vector<BlockSpec> NetworkSpec::root_blocks() const {
  std::vector<BlockSpec> out;
  if (segments.empty()) return out;
  for (const auto& st : segments.front().stages) {
    if (st.is_block()) out.push_back(st.block);
  }
  return out;
}

std::vector<std::pair<int, HeadSpec>> NetworkSpec::heads() const {
  std::vector<std::pair<int, HeadSpec>> out;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    if (segments[s].head) out.emplace_back(static_cast<int>(s), *segments[s].head);
  }
  return out;
}

int NetworkSpec::entry_block(int segment) const {
  const Segment& seg = segments.at(segment);
  if (seg.parent < 0) {
    int last = 0;
    for (const auto& st : seg.stages) {
      if (st.is_block()) last = st.block.index;
    }
    return last;
  }
  int s = seg.parent;
  int upto = seg.attach;
  while (s >= 0) {
    const Segment& p = segments[s];
    for (int k = upto; k >= 0; --k) {
      if (p.stages[k].is_block()) return p.stages[k].block.index;
    }
    upto = p.attach;
    s = p.parent;
  }
  return 0;
}

int NetworkSpec::pool_depth() const {
  int best = 0;
  std::vector<int> depth_at_start(segments.size(), 0);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const Segment& seg = segments[s];
    int d = seg.parent < 0 ? 0 : depth_at_start[s];
    int peak = d;
    std::vector<int> after(seg.stages.size(), 0);
    for (std::size_t k = 0; k < seg.stages.size(); ++k) {
      const Stage& st = seg.stages[k];
      if (st.is_block()) d += st.block.terminal == Terminal::kPool ? 1 : -1;
      after[k] = d;
      peak = std::max(peak, d);
    }
    best = std::max(best, peak);
    for (std::size_t c = s + 1; c < segments.size(); ++c) {
      if (segments[c].parent == static_cast<int>(s)) {
        depth_at_start[c] = after[segments[c].attach];
      }
    }
  }
  return best;
}

void validate(const NetworkSpec& spec) {
  if (spec.input_channels <= 0) throw ConfigError("network input_channels must be > 0");
  for (std::size_t s = 0; s < spec.segments.size(); ++s) {
    const Segment& seg = spec.segments[s];
    int channels = spec.input_channels;
    if (seg.parent >= 0) {
      if (seg.parent >= static_cast<int>(s)) {
        throw ConfigError("segment " + std::to_string(s) + " precedes its parent");
      }
      const Segment& p = spec.segments[seg.parent];
      if (seg.attach < 0 || seg.attach >= static_cast<int>(p.stages.size())) {
        throw ConfigError("segment " + std::to_string(s) + " attaches outside its parent");
      }
      channels = p.stages[seg.attach].out_channels();
    } else if (seg.attach != -1) {
      throw ConfigError("root segment " + std::to_string(s) + " has an attach point");
    }
    for (const auto& st : seg.stages) {
      if (st.is_block()) {
        if (st.block.convs.empty()) throw ConfigError("block without convolutions");
        for (const auto& conv : st.block.convs) {
          if (conv.in_channels != channels) {
            throw ConfigError("block " + std::to_string(st.block.index) +
                              ": conv expects " + std::to_string(conv.in_channels) +
                              " channels, receives " + std::to_string(channels));
          }
          channels = conv.out_channels;
        }
      } else {
        if (st.coding.channels != channels || st.coding.reduction <= 0) {
          throw ConfigError("coding width " + std::to_string(st.coding.channels) +
                            " does not match " + std::to_string(channels) + " channels");
        }
      }
    }
    if (seg.head && seg.head->in_channels != channels) {
      throw ConfigError("head of segment " + std::to_string(s) + " expects " +
                        std::to_string(seg.head->in_channels) + " channels, receives " +
                        std::to_string(channels));
    }
  }
}

void validate_encoder_decoder(const NetworkSpec& spec) {
  validate(spec);
  if (spec.segments.size() != 1) {
    throw ConfigError("expected a single-path encoder-decoder network");
  }
  const auto blocks = spec.root_blocks();
  const int n = static_cast<int>(blocks.size());
  if (n == 0 || n % 2 != 0) {
    throw ConfigError("encoder-decoder needs an even, non-zero block count, got " +
                      std::to_string(n));
  }
  for (int k = 0; k < n; ++k) {
    if (blocks[k].index != k + 1) throw ConfigError("block indices must run 1..N");
    const Terminal want = (k < n / 2) ? Terminal::kPool : Terminal::kUpsample;
    if (blocks[k].terminal != want) {
      throw ConfigError("block " + std::to_string(k + 1) + " has the wrong terminal layer");
    }
  }
  for (int k = 1; k <= n / 2; ++k) {
    if (blocks[n - k].width() != blocks[k - 1].width()) {
      throw ConfigError("decoder block " + std::to_string(n + 1 - k) +
                        " width differs from encoder block " + std::to_string(k));
    }
  }
}

std::optional<std::string> first_block_difference(const NetworkSpec& a,
                                                  const NetworkSpec& b) {
  if (a.input_channels != b.input_channels) return "input channels differ";
  const auto ba = a.root_blocks(), bb = b.root_blocks();
  const std::size_t n = std::min(ba.size(), bb.size());
  for (std::size_t k = 0; k < n; ++k) {
    if (!(ba[k] == bb[k])) return "block " + std::to_string(ba[k].index) + " differs";
  }
  if (ba.size() != bb.size()) {
    return "block " + std::to_string(n + 1) + " present in only one network";
  }
  return std::nullopt;
}

NetworkSpec make_encoder_decoder(const ArchConfig& arch) {
  if (arch.encoder_widths.empty()) throw ConfigError("encoder_widths is empty");
  if (arch.convs_per_block < 1) throw ConfigError("convs_per_block must be >= 1");
  NetworkSpec spec;
  spec.input_channels = arch.input_channels;
  Segment root;
  const int half = static_cast<int>(arch.encoder_widths.size());
  int channels = arch.input_channels;
  for (int k = 0; k < half; ++k) {
    BlockSpec block;
    block.index = k + 1;
    block.terminal = Terminal::kPool;
    const int width = arch.encoder_widths[k];
    for (int l = 0; l < arch.convs_per_block; ++l) {
      block.convs.push_back({channels, width, 3});
      channels = width;
    }
    root.stages.push_back(Stage::of(std::move(block)));
  }
  for (int j = 0; j < half; ++j) {
    const int mirror = half - 1 - j;
    const int width = arch.encoder_widths[mirror];
    const int out = mirror > 0 ? arch.encoder_widths[mirror - 1] : arch.output_width;
    BlockSpec block;
    block.index = half + j + 1;
    block.terminal = Terminal::kUpsample;
    for (int l = 0; l < arch.convs_per_block; ++l) {
      const int to = (l + 1 == arch.convs_per_block) ? out : width;
      block.convs.push_back({channels, to, 3});
      channels = to;
    }
    root.stages.push_back(Stage::of(std::move(block)));
  }
  spec.segments.push_back(std::move(root));
  return spec;
}

HeadSpec make_head(TaskKind task, int in_channels, const HeadConfig& heads) {
  HeadSpec head;
  head.task = task;
  head.in_channels = in_channels;
  switch (task) {
    case TaskKind::kSegmentation:
      if (heads.classes < 2) throw ConfigError("segmentation needs >= 2 classes");
      head.out_channels = heads.classes;
      break;
    case TaskKind::kDepth:
      if (heads.depth.bins < 2 || !(heads.depth.bin_length > 0.0)) {
        throw ConfigError("depth head needs bins >= 2 and bin_length > 0");
      }
      head.out_channels = heads.depth.bins;
      head.bin_length = heads.depth.bin_length;
      break;
    case TaskKind::kNormal:
      head.out_channels = 3;
      break;
  }
  return head;
}

NetworkSpec make_teacher(const ArchConfig& arch, TaskKind task,
                         const HeadConfig& heads) {
  NetworkSpec spec = make_encoder_decoder(arch);
  spec.segments.front().head = make_head(task, arch.output_width, heads);
  return spec;
}

std::string conv_param_name(int segment, int stage, int layer, bool bias) {
  return "s" + std::to_string(segment) + "." + std::to_string(stage) + ".conv" +
         std::to_string(layer) + (bias ? ".bias" : ".weight");
}

std::string coding_param_name(int segment, int stage, int fc, bool bias) {
  return "s" + std::to_string(segment) + "." + std::to_string(stage) + ".fc" +
         std::to_string(fc) + (bias ? ".bias" : ".weight");
}

std::string head_param_name(int segment, bool bias) {
  return "s" + std::to_string(segment) + ".head" + (bias ? ".bias" : ".weight");
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const NetworkSpec& spec) {
  std::vector<std::pair<std::string, Shape>> out;
  for (std::size_t s = 0; s < spec.segments.size(); ++s) {
    const Segment& seg = spec.segments[s];
    const int si = static_cast<int>(s);
    for (std::size_t k = 0; k < seg.stages.size(); ++k) {
      const Stage& st = seg.stages[k];
      const int ki = static_cast<int>(k);
      if (st.is_block()) {
        for (std::size_t l = 0; l < st.block.convs.size(); ++l) {
          const ConvSpec& c = st.block.convs[l];
          const int li = static_cast<int>(l);
          out.emplace_back(conv_param_name(si, ki, li, false),
                           Shape{c.out_channels, c.in_channels, c.kernel, c.kernel});
          out.emplace_back(conv_param_name(si, ki, li, true),
                           Shape{1, c.out_channels, 1, 1});
        }
      } else {
        const int c = st.coding.channels, h = st.coding.hidden();
        out.emplace_back(coding_param_name(si, ki, 1, false), Shape{h, c, 1, 1});
        out.emplace_back(coding_param_name(si, ki, 1, true), Shape{1, h, 1, 1});
        out.emplace_back(coding_param_name(si, ki, 2, false), Shape{c, h, 1, 1});
        out.emplace_back(coding_param_name(si, ki, 2, true), Shape{1, c, 1, 1});
      }
    }
    if (seg.head) {
      const HeadSpec& h = *seg.head;
      out.emplace_back(head_param_name(si, false),
                       Shape{h.out_channels, h.in_channels, 3, 3});
      out.emplace_back(head_param_name(si, true), Shape{1, h.out_channels, 1, 1});
    }
  }
  return out;
}

namespace {

bool is_bias(const std::string& name) {
  return name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

Tensor init_tensor(const Shape& shape, bool bias, std::uint64_t seed) {
  Tensor t(shape, 0.0);
  if (bias) return t;
  const int fan_in = shape.c * shape.h * shape.w;
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  Rng rng(seed);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

ModelState init_state(const NetworkSpec& spec, std::uint64_t seed) {
  validate(spec);
  ModelState state;
  for (const auto& [name, shape] : parameter_layout(spec)) {
    state.params.emplace(name, init_tensor(shape, is_bias(name), Rng::derive(seed, name)));
  }
  return state;
}

void check_state(const NetworkSpec& spec, const ModelState& state) {
  const auto layout = parameter_layout(spec);
  if (layout.size() != state.params.size()) {
    throw ConfigError("state holds " + std::to_string(state.params.size()) +
                      " tensors, spec declares " + std::to_string(layout.size()));
  }
  for (const auto& [name, shape] : layout) {
    auto it = state.params.find(name);
    if (it == state.params.end()) throw ConfigError("missing parameter " + name);
    if (!(it->second.shape() == shape)) {
      throw ConfigError("parameter " + name + " has shape " + it->second.shape().str() +
                        ", expected " + shape.str());
    }
  }
}

std::size_t count_params(const NetworkSpec& spec) {
  std::size_t total = 0;
  for (const auto& [name, shape] : parameter_layout(spec)) total += shape.numel();
  return total;
}

std::size_t count_params(const NetworkSpec& spec, const ModelState& state) {
  check_state(spec, state);
  std::size_t total = 0;
  for (const auto& [name, t] : state.params) total += t.size();
  return total;
}

std::uint64_t state_hash(const ModelState& state) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [name, t] : state.params) {
    mix(name.data(), name.size());
    mix(t.ptr(), t.size() * sizeof(double));
  }
  return h;
}

ChannelCoding ChannelCoding::init(const CodingSpec& spec, std::uint64_t seed) {
  ChannelCoding c;
  c.spec = spec;
  const int ch = spec.channels, h = spec.hidden();
  c.w1 = init_tensor({h, ch, 1, 1}, false, Rng::derive(seed, "fc1"));
  c.b1 = Tensor({1, h, 1, 1}, 0.0);
  c.w2 = init_tensor({ch, h, 1, 1}, false, Rng::derive(seed, "fc2"));
  c.b2 = Tensor({1, ch, 1, 1}, 0.0);
  return c;
}

BoundParams::BoundParams(Tape& tape, const ModelState& state,
                         const Trainable& trainable)
    : tape_(&tape) {
  for (const auto& [name, t] : state.params) {
    vars_.emplace(name, trainable && trainable(name) ? tape.variable(t) : tape.constant(t));
  }
}

BoundParams::BoundParams(Tape& tape, const ModelState& state)
    : BoundParams(tape, state, Trainable{}) {}

Var BoundParams::at(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("parameter " + name + " is not bound");
  return it->second;
}

CodingVars bind_coding(Tape& tape, const ChannelCoding& coding, bool trainable) {
  auto bind = [&](const Tensor& t) {
    return trainable ? tape.variable(t) : tape.constant(t);
  };
  return {bind(coding.w1), bind(coding.b1), bind(coding.w2), bind(coding.b2)};
}

Var channel_code(const CodingVars& coding, Var features) {
  const int channels = features.shape().c;
  if (coding.w1.shape().c != channels) {
    throw DimensionError("channel coding expects " +
                         std::to_string(coding.w1.shape().c) +
                         " channels, features have " + std::to_string(channels));
  }
  Var squeezed = ops::global_avg_pool(features);
  Var hidden = ops::relu(ops::dense(squeezed, coding.w1, coding.b1));
  Var gate = ops::sigmoid(ops::dense(hidden, coding.w2, coding.b2));
  return ops::channel_scale(features, gate);
}

Var ForwardResult::block_feature(int n) const {
  Var found;
  for (const auto& f : features) {
    if (f.block != n) continue;
    if (found.valid()) throw UsageError("block " + std::to_string(n) + " captured on several paths");
    found = f.value;
  }
  if (!found.valid()) throw UsageError("block " + std::to_string(n) + " was not captured");
  return found;
}

const HeadOutput& ForwardResult::head(TaskKind task) const {
  for (const auto& h : heads) {
    if (h.task == task) return h;
  }
  throw UsageError(std::string("no ") + task_name(task) + " head in forward result");
}

bool ForwardResult::has_head(TaskKind task) const {
  for (const auto& h : heads) {
    if (h.task == task) return true;
  }
  return false;
}

std::vector<double> depth_bin_weights(int bins, double bin_length) {
  std::vector<double> w(bins);
  for (int b = 0; b < bins; ++b) w[b] = static_cast<double>(b + 1) * bin_length;
  return w;
}

Var depth_decode(Var logits, const DepthHeadConfig& cfg) {
  if (logits.shape().c != cfg.bins) {
    throw DimensionError("depth_decode: " + std::to_string(logits.shape().c) +
                         " channels for " + std::to_string(cfg.bins) + " bins");
  }
  return ops::channel_expectation(ops::softmax_channels(logits),
                                  depth_bin_weights(cfg.bins, cfg.bin_length));
}

LabelMap one_hot_supervision(const Tensor& probs) {
  const Shape s = probs.shape();
  LabelMap out(s.n, s.h, s.w);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      int best = 0;
      double bv = probs[base + p];
      for (int c = 1; c < s.c; ++c) {
        const double v = probs[base + c * plane + p];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out.labels[static_cast<std::size_t>(n) * plane + p] = static_cast<std::uint16_t>(best);
    }
  }
  return out;
}

Var block_forward(const BlockSpec& block, const BoundParams& params, int segment,
                  int stage, Var x) {
  for (std::size_t l = 0; l < block.convs.size(); ++l) {
    const int li = static_cast<int>(l);
    const int pad = block.convs[l].kernel / 2;
    x = ops::relu(ops::conv2d(x, params.at(conv_param_name(segment, stage, li, false)),
                              params.at(conv_param_name(segment, stage, li, true)), 1,
                              pad));
  }
  return block.terminal == Terminal::kPool ? ops::maxpool2x2(x) : ops::upsample2x(x);
}

namespace {

class Evaluator {
 public:
  Evaluator(const NetworkSpec& spec, const BoundParams& params,
            const ForwardOptions& options)
      : spec_(spec), params_(params), options_(options) {
    children_.resize(spec.segments.size());
    for (std::size_t s = 0; s < spec.segments.size(); ++s) {
      const int p = spec.segments[s].parent;
      if (p >= 0) children_[p].push_back(static_cast<int>(s));
    }
  }

  ForwardResult run_roots(Var image) {
    for (std::size_t s = 0; s < spec_.segments.size(); ++s) {
      if (spec_.segments[s].parent < 0) run(static_cast<int>(s), 0, image);
    }
    return std::move(result_);
  }

  ForwardResult run_from_block(int block, Var injected) {
    bool any = false;
    for (std::size_t s = 0; s < spec_.segments.size(); ++s) {
      const Segment& seg = spec_.segments[s];
      for (std::size_t k = 0; k < seg.stages.size(); ++k) {
        const Stage& st = seg.stages[k];
        if (!st.is_block() || st.block.index != block) continue;
        if (injected.shape().c != st.block.out_channels()) {
          throw DimensionError("forward_from block " + std::to_string(block) +
                               ": injected features " + injected.shape().str() +
                               " need " + std::to_string(st.block.out_channels()) +
                               " channels");
        }
        any = true;
        const int si = static_cast<int>(s), ki = static_cast<int>(k);
        result_.features.push_back({si, ki, block, injected});
        if (options_.stop_after_block == block) continue;
        after_stage(si, ki, injected);
      }
    }
    if (!any) throw DimensionError("forward_from: network has no block " + std::to_string(block));
    return std::move(result_);
  }

 private:
  // Runs segment s starting at stage `first` with input x.
  void run(int s, int first, Var x) {
    const Segment& seg = spec_.segments[s];
    for (int k = first; k < static_cast<int>(seg.stages.size()); ++k) {
      const Stage& st = seg.stages[k];
      if (st.is_block()) {
        x = apply_block(s, k, st.block, x);
        result_.features.push_back({s, k, st.block.index, x});
        if (options_.stop_after_block == st.block.index) return;
      } else {
        x = apply_coding(s, k, x);
      }
      for (int c : children_[s]) {
        if (spec_.segments[c].attach == k) run(c, 0, x);
      }
    }
    if (seg.head) apply_head(s, *seg.head, x);
  }

  // Continues segment s as if stage k had produced x.
  void after_stage(int s, int k, Var x) {
    for (int c : children_[s]) {
      if (spec_.segments[c].attach == k) run(c, 0, x);
    }
    const Segment& seg = spec_.segments[s];
    if (k + 1 < static_cast<int>(seg.stages.size())) {
      run(s, k + 1, x);
    } else if (seg.head) {
      apply_head(s, *seg.head, x);
    }
  }

  Var apply_block(int s, int k, const BlockSpec& block, Var x) {
    return block_forward(block, params_, s, k, x);
  }

  Var apply_coding(int s, int k, Var x) {
    CodingVars c{params_.at(coding_param_name(s, k, 1, false)),
                 params_.at(coding_param_name(s, k, 1, true)),
                 params_.at(coding_param_name(s, k, 2, false)),
                 params_.at(coding_param_name(s, k, 2, true))};
    return channel_code(c, x);
  }

  void apply_head(int s, const HeadSpec& head, Var x) {
    HeadOutput out;
    out.segment = s;
    out.task = head.task;
    out.logits = ops::conv2d(x, params_.at(head_param_name(s, false)),
                             params_.at(head_param_name(s, true)), 1, 1);
    switch (head.task) {
      case TaskKind::kSegmentation:
        out.prediction = ops::softmax_channels(out.logits);
        break;
      case TaskKind::kDepth:
        out.prediction = depth_decode(out.logits, {head.out_channels, head.bin_length});
        break;
      case TaskKind::kNormal:
        out.prediction = out.logits;
        break;
    }
    result_.heads.push_back(out);
  }

  const NetworkSpec& spec_;
  const BoundParams& params_;
  ForwardOptions options_;
  std::vector<std::vector<int>> children_;
  ForwardResult result_;
};

}  // namespace

ForwardResult forward(const NetworkSpec& spec, const BoundParams& params,
                      Var image, const ForwardOptions& options) {
  const Shape s = image.shape();
  if (s.c != spec.input_channels) {
    throw DimensionError("forward: image has " + std::to_string(s.c) +
                         " channels, network expects " +
                         std::to_string(spec.input_channels));
  }
  const int div = 1 << spec.pool_depth();
  if (s.h % div != 0 || s.w % div != 0) {
    throw DimensionError("forward: input " + std::to_string(s.h) + "x" +
                         std::to_string(s.w) + " is not divisible by " +
                         std::to_string(div));
  }
  return Evaluator(spec, params, options).run_roots(image);
}

ForwardResult forward_from(const NetworkSpec& spec, const BoundParams& params,
                           int block, Var injected, const ForwardOptions& options) {
  return Evaluator(spec, params, options).run_from_block(block, injected);
}

Shape block_output_shape(const NetworkSpec& spec, int block, int batch,
                         int height, int width) {
  for (std::size_t s = 0; s < spec.segments.size(); ++s) {
    int h = height, w = width;
    // Walk the ancestor chain down to segment s.
    std::vector<std::pair<int, int>> chain;  // (segment, last stage inclusive)
    int cur = static_cast<int>(s);
    int upto = static_cast<int>(spec.segments[s].stages.size()) - 1;
    while (cur >= 0) {
      chain.emplace_back(cur, upto);
      upto = spec.segments[cur].attach;
      cur = spec.segments[cur].parent;
    }
    for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
      const Segment& seg = spec.segments[it->first];
      for (int k = 0; k <= it->second; ++k) {
        const Stage& st = seg.stages[k];
        if (!st.is_block()) continue;
        if (st.block.terminal == Terminal::kPool) {
          h /= 2;
          w /= 2;
        } else {
          h *= 2;
          w *= 2;
        }
        if (st.block.index == block && it->first == static_cast<int>(s)) {
          return {batch, st.block.out_channels(), h, w};
        }
      }
    }
  }
  throw DimensionError("network has no block " + std::to_string(block));
}

const Tensor& InferenceResult::head(TaskKind task) const {
  for (const auto& h : heads) {
    if (h.task == task) return h.output;
  }
  throw UsageError(std::string("model has no ") + task_name(task) + " head");
}

InferenceResult infer(const Model& model, const Tensor& images) {
  Tape tape;
  BoundParams params(tape, model.state);
  ForwardResult fr = forward(model.spec, params, tape.constant(images));
  InferenceResult out;
  for (const auto& h : fr.heads) out.heads.push_back({h.task, h.prediction.value()});
  return out;
}

}  // namespace amalgam
