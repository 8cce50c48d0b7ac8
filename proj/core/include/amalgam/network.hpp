#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "amalgam/maps.hpp"
#include "amalgam/tape.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

enum class TaskKind : std::uint8_t { kSegmentation, kDepth, kNormal };

const char* task_name(TaskKind task);
// Accepts "seg", "depth", "normal"; throws UsageError otherwise.
TaskKind parse_task(std::string_view name);

enum class Terminal : std::uint8_t { kPool, kUpsample };

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

// Layers between two resolution changes; ends in a pool (encoder) or an
// upsample (decoder).
struct BlockSpec {
  int index = 0;  // 1-based block number n
  std::vector<ConvSpec> convs;
  Terminal terminal = Terminal::kPool;

  int in_channels() const { return convs.front().in_channels; }
  int out_channels() const { return convs.back().out_channels; }
  // Working width of the block (output of its first convolution).
  int width() const { return convs.front().out_channels; }

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

// Global pool -> FC (C -> C/r) -> ReLU -> FC (C/r -> C) -> sigmoid, used to
// scale the input channel-wise.
struct CodingSpec {
  int channels = 0;
  int reduction = 4;

  int hidden() const { return channels / reduction > 0 ? channels / reduction : 1; }
  std::size_t param_count() const {
    const std::size_t c = channels, h = hidden();
    return c * h * 2 + h + c;
  }

  friend bool operator==(const CodingSpec&, const CodingSpec&) = default;
};

struct DepthHeadConfig {
  int bins = 16;
  double bin_length = 0.5;
};

struct HeadSpec {
  TaskKind task = TaskKind::kSegmentation;
  int in_channels = 0;
  int out_channels = 0;     // K classes, N_d bins, or 3
  double bin_length = 0.0;  // depth heads only

  friend bool operator==(const HeadSpec&, const HeadSpec&) = default;
};

struct Stage {
  enum class Kind : std::uint8_t { kBlock, kCoding };

  Kind kind = Kind::kBlock;
  BlockSpec block;
  CodingSpec coding;

  static Stage of(BlockSpec b) { return Stage{Kind::kBlock, std::move(b), {}}; }
  static Stage of(CodingSpec c) { return Stage{Kind::kCoding, {}, c}; }
  bool is_block() const { return kind == Kind::kBlock; }
  int out_channels() const {
    return is_block() ? block.out_channels() : coding.channels;
  }

  friend bool operator==(const Stage&, const Stage&) = default;
};

// A chain of stages. Root segments (parent < 0) consume the network input;
// the others start from the output of stage `attach` of segment `parent`.
struct Segment {
  int parent = -1;
  int attach = -1;
  std::vector<Stage> stages;
  std::optional<HeadSpec> head;

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct NetworkSpec {
  int input_channels = 3;
  std::vector<Segment> segments;

  // Largest block index n in the network.
  int block_count() const;
  // Blocks of the root chain, in order (single-path networks only).
  std::vector<BlockSpec> root_blocks() const;
  // (segment, head) for every segment that carries a head.
  std::vector<std::pair<int, HeadSpec>> heads() const;
  // Block index after which the given segment's head branches off the
  // first root segment (its entry block).
  int entry_block(int segment) const;
  // Number of 2x2 pools the input must be divisible by.
  int pool_depth() const;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

// Throws ConfigError on dangling parents or attach points.
void validate(const NetworkSpec& spec);
// Throws ConfigError unless the spec is a single encoder-decoder chain:
// N even, blocks 1..N/2 pool, N/2+1..N upsample, mirrored widths.
void validate_encoder_decoder(const NetworkSpec& spec);
// Description of the first structural difference between two single-path
// networks' blocks, or nullopt when identical.
std::optional<std::string> first_block_difference(const NetworkSpec& a,
                                                  const NetworkSpec& b);

struct ArchConfig {
  int input_channels = 3;
  std::vector<int> encoder_widths{16, 32, 64};
  int convs_per_block = 2;
  int output_width = 8;
};

struct HeadConfig {
  int classes = 5;
  DepthHeadConfig depth;
};

// Symmetric encoder-decoder without a head: decoder block N+1-k works at the
// width of encoder block k and narrows to the preceding encoder width.
NetworkSpec make_encoder_decoder(const ArchConfig& arch);
HeadSpec make_head(TaskKind task, int in_channels, const HeadConfig& heads);
NetworkSpec make_teacher(const ArchConfig& arch, TaskKind task,
                         const HeadConfig& heads);

// Learnable parameters keyed by "s<segment>.<stage>.<layer>.<role>" and
// "s<segment>.head.<role>".
struct ModelState {
  std::map<std::string, Tensor> params;
  std::int64_t step = 0;
};

struct Model {
  NetworkSpec spec;
  ModelState state;
};

std::string conv_param_name(int segment, int stage, int layer, bool bias);
std::string coding_param_name(int segment, int stage, int fc, bool bias);
std::string head_param_name(int segment, bool bias);

// Ordered (name, shape) list of every parameter the spec declares.
std::vector<std::pair<std::string, Shape>> parameter_layout(const NetworkSpec& spec);
// Fan-in scaled uniform weights, zero biases; each tensor draws from its own
// stream derived from (seed, name).
ModelState init_state(const NetworkSpec& spec, std::uint64_t seed);
// Throws ConfigError if a key is missing, extra, or mis-shaped.
void check_state(const NetworkSpec& spec, const ModelState& state);

std::size_t count_params(const NetworkSpec& spec);
// Counts the state's tensors after check_state().
std::size_t count_params(const NetworkSpec& spec, const ModelState& state);
// FNV-1a over names and raw parameter bytes.
std::uint64_t state_hash(const ModelState& state);

// Standalone coding used while training block n.
struct ChannelCoding {
  CodingSpec spec;
  Tensor w1, b1, w2, b2;

  static ChannelCoding init(const CodingSpec& spec, std::uint64_t seed);
  std::size_t param_count() const { return spec.param_count(); }
};

// Parameter tensors bound onto a tape.
class BoundParams {
 public:
  using Trainable = std::function<bool(const std::string&)>;

  BoundParams(Tape& tape, const ModelState& state, const Trainable& trainable);
  // All parameters constant.
  BoundParams(Tape& tape, const ModelState& state);

  Var at(const std::string& name) const;
  const std::map<std::string, Var>& vars() const { return vars_; }
  Tape& tape() const { return *tape_; }

 private:
  Tape* tape_;
  std::map<std::string, Var> vars_;
};

struct CodingVars {
  Var w1, b1, w2, b2;
};

CodingVars bind_coding(Tape& tape, const ChannelCoding& coding, bool trainable);
Var channel_code(const CodingVars& coding, Var features);

struct HeadOutput {
  int segment = 0;
  TaskKind task = TaskKind::kSegmentation;
  Var logits;
  // Class probabilities, decoded depth (n,1,h,w), or raw normals (n,3,h,w).
  Var prediction;
};

struct FeatureCapture {
  int segment = 0;
  int stage = 0;
  int block = 0;
  Var value;
};

struct ForwardResult {
  std::vector<HeadOutput> heads;
  std::vector<FeatureCapture> features;

  // Unique captured output of block n; throws UsageError when absent or
  // captured on more than one path.
  Var block_feature(int n) const;
  const HeadOutput& head(TaskKind task) const;
  bool has_head(TaskKind task) const;
};

struct ForwardOptions {
  // Stop each path after executing this block (0 = run to the heads).
  int stop_after_block = 0;
};

ForwardResult forward(const NetworkSpec& spec, const BoundParams& params,
                      Var image, const ForwardOptions& options = {});

// Convolutions + ReLU + terminal layer of one block whose parameters live at
// (segment, stage).
Var block_forward(const BlockSpec& block, const BoundParams& params, int segment,
                  int stage, Var x);

// Resumes every path at the slot after block n with `injected` standing in
// for that block's output; blocks 1..n are never executed.
ForwardResult forward_from(const NetworkSpec& spec, const BoundParams& params,
                           int block, Var injected,
                           const ForwardOptions& options = {});

// Output shape of block n for an input of the given size.
Shape block_output_shape(const NetworkSpec& spec, int block, int batch,
                         int height, int width);

std::vector<double> depth_bin_weights(int bins, double bin_length);
// softmax over bins then sum_b b * l * p(b), bins indexed from 1.
Var depth_decode(Var logits, const DepthHeadConfig& cfg);
// Per-pixel argmax over channels; ties go to the lowest class.
LabelMap one_hot_supervision(const Tensor& probs);

// Tensors of a tape-free forward pass.
struct Prediction {
  TaskKind task = TaskKind::kSegmentation;
  Tensor output;
};

struct InferenceResult {
  std::vector<Prediction> heads;
  const Tensor& head(TaskKind task) const;
};

InferenceResult infer(const Model& model, const Tensor& images);

}  // namespace amalgam
