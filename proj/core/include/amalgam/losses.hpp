#pragma once

#include <cstddef>
#include <vector>

#include "amalgam/maps.hpp"
#include "amalgam/tape.hpp"

// Task losses on tape variables. Predictions come straight from the heads:
// class probabilities, decoded depth, raw normals.
namespace amalgam {

// Mean cross-entropy over valid pixels plus lambda * sum of squared
// parameters. lambda = 0 skips the regularizer entirely.
Var seg_loss(Var probs, const LabelMap& labels, double lambda,
             const std::vector<Var>& params, const ValidMask* mask = nullptr);

// (1/N) sum d^2 - (1/(2N^2)) (sum d)^2 with d = gt - pred, per image, averaged
// over the batch.
Var depth_loss(Var gt, Var pred, const ValidMask& mask);

// -(1/N) sum normalize(pred) . gt over valid pixels.
Var norm_loss(Var gt, Var pred, const ValidMask& mask);

// lambda1 * |f_ud - f_d|^2 + lambda2 * |f_us - f_s|^2.
Var feature_l2_loss(Var f_ud, Var f_d, Var f_us, Var f_s, double lambda1,
                    double lambda2);

// Valid pixels whose predicted normal is shorter than the normalisation
// epsilon (they are normalised with the epsilon instead).
std::size_t degenerate_normals(const Tensor& pred, const ValidMask& mask);

}  // namespace amalgam
