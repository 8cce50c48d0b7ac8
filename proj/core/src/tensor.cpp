#include "amalgam/tensor.hpp"

#include <utility>

#include "amalgam/error.hpp"

namespace amalgam {

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" +
         std::to_string(h) + "x" + std::to_string(w);
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(shape), data_(shape.numel(), fill) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw DimensionError("negative tensor dimension " + shape.str());
  }
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape.numel()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape.str());
  }
}

Tensor Tensor::scalar(double value) { return Tensor({1, 1, 1, 1}, value); }

Tensor Tensor::vector(std::vector<double> values) {
  const int len = static_cast<int>(values.size());
  return Tensor({1, len, 1, 1}, std::move(values));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw UsageError("item() on non-scalar tensor " + shape_.str());
  }
  return data_[0];
}

std::span<const double> Tensor::grad() const {
  if (!grad_) throw UsageError("tensor has no gradient");
  return *grad_;
}

std::span<double> Tensor::mutable_grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
  return *grad_;
}

void require_same_shape(const Shape& a, const Shape& b,
                        const std::string& what) {
  if (!(a == b)) {
    throw DimensionError(what + ": shape " + a.str() + " vs " + b.str());
  }
}

}  // namespace amalgam
