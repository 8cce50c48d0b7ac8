#include "amalgam/tape.hpp"

#include <utility>

#include "amalgam/error.hpp"
#include "ops_internal.hpp"

namespace amalgam {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kMaxPool2x2: return "maxpool2x2";
    case OpKind::kUpsample2x: return "upsample2x";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmaxChannels: return "softmax";
    case OpKind::kChannelScale: return "channel_scale";
    case OpKind::kDense: return "dense";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kChannelExpectation: return "channel_expectation";
    case OpKind::kAdd: return "add";
    case OpKind::kScale: return "scale";
    case OpKind::kSumSquares: return "sum_squares";
    case OpKind::kSquaredDifference: return "squared_difference";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kDepthLoss: return "depth_loss";
    case OpKind::kNormalLoss: return "normal_loss";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (!tape_) throw UsageError("value() on an unbound Var");
  return tape_->value(*this);
}

const Shape& Var::shape() const { return value().shape(); }

Var Tape::constant(Tensor value) {
  TapeNode node;
  node.op = OpKind::kLeaf;
  node.requires_grad = false;
  return record(std::move(node), std::move(value));
}

Var Tape::variable(Tensor value) {
  TapeNode node;
  node.op = OpKind::kLeaf;
  node.requires_grad = true;
  return record(std::move(node), std::move(value));
}

Var Tape::record(TapeNode node, Tensor value) {
  for (int in : node.inputs) {
    if (in < 0 || in >= static_cast<int>(nodes_.size())) {
      throw UsageError("tape input id out of range");
    }
  }
  if (node.op != OpKind::kLeaf) {
    node.requires_grad = false;
    for (int in : node.inputs) node.requires_grad |= nodes_[in].requires_grad;
  }
  value.clear_grad();
  nodes_.push_back(std::move(node));
  values_.push_back(std::move(value));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::check(Var v) const {
  if (v.tape_ != this || v.id_ < 0 || v.id_ >= static_cast<int>(nodes_.size())) {
    throw UsageError("Var does not belong to this tape");
  }
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return values_[v.id_];
}

const TapeNode& Tape::node(Var v) const {
  check(v);
  return nodes_[v.id_];
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

std::span<double> Tape::accumulator(int id) {
  return values_[id].mutable_grad();
}

void Tape::backward(Var loss) {
  check(loss);
  if (values_[loss.id_].shape() != Shape{1, 1, 1, 1}) {
    throw UsageError("backward() requires a 1x1x1x1 loss, got " +
                     values_[loss.id_].shape().str());
  }
  for (auto& t : values_) t.clear_grad();
  values_[loss.id_].mutable_grad()[0] = 1.0;
  for (int id = loss.id_; id >= 0; --id) {
    const TapeNode& node = nodes_[id];
    if (node.op == OpKind::kLeaf || !node.requires_grad) continue;
    if (!values_[id].has_grad()) continue;
    detail::backward_op(*this, id, node, values_[id].grad());
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (nodes_[id].op == OpKind::kLeaf) values_[id].mutable_grad();
  }
}

Tensor Tape::grad(Var v) const {
  check(v);
  const Tensor& t = values_[v.id_];
  if (!t.has_grad()) return Tensor(t.shape(), 0.0);
  auto g = t.grad();
  return Tensor(t.shape(), std::vector<double>(g.begin(), g.end()));
}

std::span<const double> Tape::grad_view(Var v) const {
  check(v);
  const Tensor& t = values_[v.id_];
  if (!t.has_grad()) return {};
  return t.grad();
}

}  // namespace amalgam
