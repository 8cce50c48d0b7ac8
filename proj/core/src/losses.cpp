#include "amalgam/losses.hpp"

#include <cmath>

#include "amalgam/error.hpp"
#include "amalgam/ops.hpp"

namespace amalgam {

Var seg_loss(Var probs, const LabelMap& labels, double lambda,
             const std::vector<Var>& params, const ValidMask* mask) {
  if (lambda < 0.0) throw ConfigError("seg_loss: negative weight decay");
  Var loss = ops::cross_entropy(probs, labels, mask);
  if (lambda == 0.0 || params.empty()) return loss;
  Var reg = ops::sum_squares(params.front());
  for (std::size_t i = 1; i < params.size(); ++i) {
    reg = ops::add(reg, ops::sum_squares(params[i]));
  }
  return ops::add(loss, ops::scale(reg, lambda));
}

Var depth_loss(Var gt, Var pred, const ValidMask& mask) {
  return ops::depth_loss(gt, pred, mask);
}

Var norm_loss(Var gt, Var pred, const ValidMask& mask) {
  return ops::normal_loss(gt, pred, mask);
}

Var feature_l2_loss(Var f_ud, Var f_d, Var f_us, Var f_s, double lambda1,
                    double lambda2) {
  if (!(f_ud.shape() == f_d.shape())) {
    throw DimensionError("feature_l2_loss: depth pair " + f_ud.shape().str() + " vs " +
                         f_d.shape().str());
  }
  if (!(f_us.shape() == f_s.shape())) {
    throw DimensionError("feature_l2_loss: seg pair " + f_us.shape().str() + " vs " +
                         f_s.shape().str());
  }
  return ops::add(ops::scale(ops::squared_difference(f_ud, f_d), lambda1),
                  ops::scale(ops::squared_difference(f_us, f_s), lambda2));
}

std::size_t degenerate_normals(const Tensor& pred, const ValidMask& mask) {
  const Shape s = pred.shape();
  if (s.c != 3 || s.n != mask.n || s.h != mask.h || s.w != mask.w) {
    throw DimensionError("degenerate_normals: prediction " + s.str() +
                         " does not match the mask");
  }
  const std::size_t plane = s.plane();
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n) {
    const double* p = pred.ptr() + static_cast<std::size_t>(n) * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      if (!mask.valid[static_cast<std::size_t>(n) * plane + i]) continue;
      const double len = std::sqrt(p[i] * p[i] + p[plane + i] * p[plane + i] +
                                   p[2 * plane + i] * p[2 * plane + i]);
      if (len < ops::kNormalEpsilon) ++count;
    }
  }
  return count;
}

}  // namespace amalgam
