#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <vector>

#include "amalgam/tensor.hpp"

namespace amalgam {

enum class OpKind : std::uint8_t {
  kLeaf,
  kConv2d,
  kMaxPool2x2,
  kUpsample2x,
  kRelu,
  kSigmoid,
  kSoftmaxChannels,
  kChannelScale,
  kDense,
  kGlobalAvgPool,
  kChannelExpectation,
  kAdd,
  kScale,
  kSumSquares,
  kSquaredDifference,
  kCrossEntropy,
  kDepthLoss,
  kNormalLoss,
};

const char* op_name(OpKind op);

// One recorded operation. Inputs always precede the node on the tape, so the
// tape is topologically ordered by construction.
struct TapeNode {
  OpKind op = OpKind::kLeaf;
  std::vector<int> inputs;
  bool requires_grad = false;
  std::vector<std::int32_t> saved_index;  // argmax positions, labels
  std::vector<double> saved;              // cached per-op values
  std::array<double, 4> attr{};           // scalar attributes
};

class Tape;

// Lightweight handle to a tape entry.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  const Tensor& value() const;  // valid for the lifetime of the tape
  const Shape& shape() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Records a forward computation and replays it in reverse to compute
// gradients. Single-threaded; one tape per training step.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf that never receives a gradient.
  Var constant(Tensor value);
  // Leaf that receives a gradient during backward().
  Var variable(Tensor value);

  Var record(TapeNode node, Tensor value);

  const Tensor& value(Var v) const;
  const TapeNode& node(Var v) const;
  bool requires_grad(Var v) const;

  // Reverse sweep from a 1x1x1x1 loss. Every leaf ends up with a gradient
  // buffer; leaves not reachable from the loss hold zeros.
  void backward(Var loss);

  // Gradient of the most recent backward(), zeros when unreached.
  Tensor grad(Var v) const;
  // Direct view; empty when the node was never reached.
  std::span<const double> grad_view(Var v) const;

  std::size_t size() const { return nodes_.size(); }

  // Used by op backward passes to accumulate into an input.
  std::span<double> accumulator(int id);
  const Tensor& value_at(int id) const { return values_[id]; }
  bool requires_grad_at(int id) const { return nodes_[id].requires_grad; }

 private:
  void check(Var v) const;

  // Deques keep addresses stable, so value() references survive growth.
  std::deque<TapeNode> nodes_;
  std::deque<Tensor> values_;
};

}  // namespace amalgam
