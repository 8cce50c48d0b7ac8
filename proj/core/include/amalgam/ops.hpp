#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "amalgam/maps.hpp"
#include "amalgam/tape.hpp"

// Differentiable operations. Every function records one node on the tape its
// inputs live on; all inputs of a call must share a tape.
namespace amalgam::ops {

// weight (outC, inC, kH, kW), bias (1, outC, 1, 1).
Var conv2d(Var input, Var weight, Var bias, int stride = 1, int pad = 1);

// 2x2 non-overlapping max pooling. Ties resolve to the first element of the
// window in row-major order.
Var maxpool2x2(Var input);
// Flat input offsets of the selected element per output position.
std::span<const std::int32_t> pool_indices(Var pooled);

// Nearest-neighbour 2x upsampling.
Var upsample2x(Var input);

Var relu(Var input);
Var sigmoid(Var input);
// Softmax across channels independently at every (n, h, w).
Var softmax_channels(Var input);
// out[n,c,:,:] = input[n,c,:,:] * scale[n,c]; scale is (n, c, 1, 1).
Var channel_scale(Var input, Var scale);

// input (n, in, 1, 1), weight (out, in, 1, 1), bias (1, out, 1, 1).
Var dense(Var input, Var weight, Var bias);
// (n, c, h, w) -> (n, c, 1, 1) mean over h*w.
Var global_avg_pool(Var input);

// out[n,0,h,w] = sum_c weights[c] * input[n,c,h,w].
Var channel_expectation(Var input, std::vector<double> weights);

Var add(Var a, Var b);
Var scale(Var input, double factor);
// Sum of squared elements, 1x1x1x1.
Var sum_squares(Var input);
// Sum of squared element differences, 1x1x1x1.
Var squared_difference(Var a, Var b);

// Mean of -log probs[label] over valid pixels. probs must be (n, K, h, w).
Var cross_entropy(Var probs, const LabelMap& labels,
                  const ValidMask* mask = nullptr);

// Scale-invariant depth loss on (n, 1, h, w) maps with d = target - pred,
// averaged over the images of the batch.
Var depth_loss(Var target, Var pred, const ValidMask& mask);

// -mean(normalize(pred) . target) over valid pixels; target is expected to
// be unit length. Zero-length predictions normalise with epsilon 1e-12.
Var normal_loss(Var target, Var pred, const ValidMask& mask);

inline constexpr double kNormalEpsilon = 1e-12;

}  // namespace amalgam::ops
