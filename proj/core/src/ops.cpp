#include "amalgam/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "amalgam/error.hpp"
#include "ops_internal.hpp"

namespace amalgam::ops {
namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Tape& tape_of(Var a) {
  if (!a.valid()) throw UsageError("operation on an unbound Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw UsageError("operands live on different tapes");
  return t;
}

int conv_out(int size, int k, int stride, int pad) {
  return (size + 2 * pad - k) / stride + 1;
}

// col[(c*k + ky)*k + kx][oy*wo + ox] = in[c][oy*s - p + ky][ox*s - p + kx]
void im2col(const double* in, int channels, int h, int w, int kh, int kw,
            int stride, int pad, int ho, int wo, double* col) {
  for (int c = 0; c < channels; ++c) {
    const double* plane = in + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        double* row = col + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) *
                                ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          double* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int lo = std::max(0, pad - kx);
            const int hi = std::min(wo, w + pad - kx);
            for (int ox = 0; ox < lo; ++ox) dst[ox] = 0.0;
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox - pad + kx];
            for (int ox = std::max(hi, lo); ox < wo; ++ox) dst[ox] = 0.0;
          } else {
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int channels, int h, int w, int kh, int kw,
                int stride, int pad, int ho, int wo, double* out) {
  for (int c = 0; c < channels; ++c) {
    double* plane = out + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const double* row =
            col + ((static_cast<std::size_t>(c) * kh + ky) * kw + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          double* dst = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

void conv2d_backward(Tape& tape, const TapeNode& node,
                     std::span<const double> grad_out) {
  const int in_id = node.inputs[0], w_id = node.inputs[1], b_id = node.inputs[2];
  const Tensor& x = tape.value_at(in_id);
  const Tensor& wt = tape.value_at(w_id);
  const int stride = static_cast<int>(node.attr[0]);
  const int pad = static_cast<int>(node.attr[1]);
  const Shape xs = x.shape(), ws = wt.shape();
  const int ho = conv_out(xs.h, ws.h, stride, pad);
  const int wo = conv_out(xs.w, ws.w, stride, pad);
  const int kdim = ws.c * ws.h * ws.w;
  const int pix = ho * wo;
  const bool need_x = tape.requires_grad_at(in_id);
  const bool need_w = tape.requires_grad_at(w_id);
  const bool need_b = tape.requires_grad_at(b_id);

  ConstMatMap wmat(wt.ptr(), ws.n, kdim);
  std::vector<double> col(static_cast<std::size_t>(kdim) * pix);
  std::vector<double> dcol(need_x ? col.size() : 0);
  double* dx = need_x ? tape.accumulator(in_id).data() : nullptr;
  double* dw = need_w ? tape.accumulator(w_id).data() : nullptr;
  double* db = need_b ? tape.accumulator(b_id).data() : nullptr;

  for (int n = 0; n < xs.n; ++n) {
    ConstMatMap gout(grad_out.data() + static_cast<std::size_t>(n) * ws.n * pix,
                     ws.n, pix);
    if (need_w) {
      im2col(x.ptr() + static_cast<std::size_t>(n) * xs.c * xs.h * xs.w, xs.c,
             xs.h, xs.w, ws.h, ws.w, stride, pad, ho, wo, col.data());
      MatMap dwmat(dw, ws.n, kdim);
      ConstMatMap colmat(col.data(), kdim, pix);
      dwmat.noalias() += gout * colmat.transpose();
    }
    if (need_b) {
      for (int oc = 0; oc < ws.n; ++oc) {
        const double* g = grad_out.data() +
                          (static_cast<std::size_t>(n) * ws.n + oc) * pix;
        double s = 0.0;
        for (int i = 0; i < pix; ++i) s += g[i];
        db[oc] += s;
      }
    }
    if (need_x) {
      MatMap dcolmat(dcol.data(), kdim, pix);
      dcolmat.noalias() = wmat.transpose() * gout;
      col2im_add(dcol.data(), xs.c, xs.h, xs.w, ws.h, ws.w, stride, pad, ho, wo,
                 dx + static_cast<std::size_t>(n) * xs.c * xs.h * xs.w);
    }
  }
}

}  // namespace

Var conv2d(Var input, Var weight, Var bias, int stride, int pad) {
  Tape& tape = tape_of(input, weight);
  tape_of(input, bias);
  const Shape xs = input.shape(), ws = weight.shape(), bs = bias.shape();
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  if (pad < 0) throw DimensionError("conv2d: pad must be >= 0");
  if (xs.c != ws.c) {
    throw DimensionError("conv2d: input channel axis (" + std::to_string(xs.c) +
                         ") != weight inC axis (" + std::to_string(ws.c) + ")");
  }
  if (bs.numel() != static_cast<std::size_t>(ws.n)) {
    throw DimensionError("conv2d: bias length (" + std::to_string(bs.numel()) +
                         ") != weight outC axis (" + std::to_string(ws.n) + ")");
  }
  const int ho = conv_out(xs.h, ws.h, stride, pad);
  const int wo = conv_out(xs.w, ws.w, stride, pad);
  if (ho <= 0 || wo <= 0) {
    throw DimensionError("conv2d: kernel " + ws.str() +
                         " larger than padded input height/width " + xs.str());
  }
  const int kdim = ws.c * ws.h * ws.w;
  const int pix = ho * wo;
  Tensor out({xs.n, ws.n, ho, wo});
  const Tensor& x = input.value();
  ConstMatMap wmat(weight.value().ptr(), ws.n, kdim);
  const double* b = bias.value().ptr();
  std::vector<double> col(static_cast<std::size_t>(kdim) * pix);
  for (int n = 0; n < xs.n; ++n) {
    im2col(x.ptr() + static_cast<std::size_t>(n) * xs.c * xs.h * xs.w, xs.c,
           xs.h, xs.w, ws.h, ws.w, stride, pad, ho, wo, col.data());
    MatMap omat(out.ptr() + static_cast<std::size_t>(n) * ws.n * pix, ws.n, pix);
    ConstMatMap colmat(col.data(), kdim, pix);
    omat.noalias() = wmat * colmat;
    for (int oc = 0; oc < ws.n; ++oc) omat.row(oc).array() += b[oc];
  }
  TapeNode node;
  node.op = OpKind::kConv2d;
  node.inputs = {input.id(), weight.id(), bias.id()};
  node.attr = {static_cast<double>(stride), static_cast<double>(pad), 0, 0};
  return tape.record(std::move(node), std::move(out));
}

Var maxpool2x2(Var input) {
  Tape& tape = tape_of(input);
  const Shape s = input.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) {
    throw DimensionError("maxpool2x2: odd spatial dimension in " + s.str());
  }
  const Tensor& x = input.value();
  Tensor out({s.n, s.c, s.h / 2, s.w / 2});
  TapeNode node;
  node.op = OpKind::kMaxPool2x2;
  node.inputs = {input.id()};
  node.saved_index.resize(out.size());
  std::size_t o = 0;
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const std::size_t base = static_cast<std::size_t>(nc) * s.h * s.w;
    for (int y = 0; y < s.h; y += 2) {
      for (int xw = 0; xw < s.w; xw += 2) {
        const std::size_t cand[4] = {
            base + static_cast<std::size_t>(y) * s.w + xw,
            base + static_cast<std::size_t>(y) * s.w + xw + 1,
            base + static_cast<std::size_t>(y + 1) * s.w + xw,
            base + static_cast<std::size_t>(y + 1) * s.w + xw + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k) {
          if (x[cand[k]] > x[best]) best = cand[k];
        }
        out[o] = x[best];
        node.saved_index[o] = static_cast<std::int32_t>(best);
        ++o;
      }
    }
  }
  return tape.record(std::move(node), std::move(out));
}

std::span<const std::int32_t> pool_indices(Var pooled) {
  const TapeNode& node = tape_of(pooled).node(pooled);
  if (node.op != OpKind::kMaxPool2x2) {
    throw UsageError("pool_indices on a non-pooling node");
  }
  return node.saved_index;
}

Var upsample2x(Var input) {
  Tape& tape = tape_of(input);
  const Shape s = input.shape();
  const Tensor& x = input.value();
  Tensor out({s.n, s.c, s.h * 2, s.w * 2});
  const int w2 = s.w * 2;
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const double* src = x.ptr() + static_cast<std::size_t>(nc) * s.h * s.w;
    double* dst = out.ptr() + static_cast<std::size_t>(nc) * 4 * s.h * s.w;
    for (int y = 0; y < s.h; ++y) {
      double* r0 = dst + static_cast<std::size_t>(2 * y) * w2;
      double* r1 = r0 + w2;
      for (int xw = 0; xw < s.w; ++xw) {
        const double v = src[static_cast<std::size_t>(y) * s.w + xw];
        r0[2 * xw] = r0[2 * xw + 1] = v;
        r1[2 * xw] = r1[2 * xw + 1] = v;
      }
    }
  }
  TapeNode node;
  node.op = OpKind::kUpsample2x;
  node.inputs = {input.id()};
  return tape.record(std::move(node), std::move(out));
}

Var relu(Var input) {
  Tape& tape = tape_of(input);
  Tensor out = Tensor(input.shape());
  const Tensor& x = input.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  TapeNode node;
  node.op = OpKind::kRelu;
  node.inputs = {input.id()};
  return tape.record(std::move(node), std::move(out));
}

Var sigmoid(Var input) {
  Tape& tape = tape_of(input);
  Tensor out = Tensor(input.shape());
  const Tensor& x = input.value();
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i]))
                         : std::exp(x[i]) / (1.0 + std::exp(x[i]));
  }
  TapeNode node;
  node.op = OpKind::kSigmoid;
  node.inputs = {input.id()};
  return tape.record(std::move(node), std::move(out));
}

Var softmax_channels(Var input) {
  Tape& tape = tape_of(input);
  const Shape s = input.shape();
  const Tensor& x = input.value();
  Tensor out(s);
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < s.c; ++c) mx = std::max(mx, x[base + c * plane + p]);
      double total = 0.0;
      for (int c = 0; c < s.c; ++c) {
        const double e = std::exp(x[base + c * plane + p] - mx);
        out[base + c * plane + p] = e;
        total += e;
      }
      for (int c = 0; c < s.c; ++c) out[base + c * plane + p] /= total;
    }
  }
  TapeNode node;
  node.op = OpKind::kSoftmaxChannels;
  node.inputs = {input.id()};
  return tape.record(std::move(node), std::move(out));
}

Var channel_scale(Var input, Var scale_vec) {
  Tape& tape = tape_of(input, scale_vec);
  const Shape s = input.shape(), v = scale_vec.shape();
  if (v.n != s.n || v.c != s.c || v.h != 1 || v.w != 1) {
    throw DimensionError("channel_scale: scale " + v.str() +
                         " does not match (batch, channel) axes of " + s.str());
  }
  const Tensor& x = input.value();
  const Tensor& f = scale_vec.value();
  Tensor out(s);
  const std::size_t plane = s.plane();
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    const double k = f[nc];
    const std::size_t base = static_cast<std::size_t>(nc) * plane;
    for (std::size_t p = 0; p < plane; ++p) out[base + p] = x[base + p] * k;
  }
  TapeNode node;
  node.op = OpKind::kChannelScale;
  node.inputs = {input.id(), scale_vec.id()};
  return tape.record(std::move(node), std::move(out));
}

Var dense(Var input, Var weight, Var bias) {
  Tape& tape = tape_of(input, weight);
  tape_of(input, bias);
  const Shape xs = input.shape(), ws = weight.shape(), bs = bias.shape();
  const int in_len = xs.c * xs.h * xs.w;
  if (ws.c * ws.h * ws.w != in_len) {
    throw DimensionError("dense: weight columns (" +
                         std::to_string(ws.c * ws.h * ws.w) +
                         ") != input length (" + std::to_string(in_len) + ")");
  }
  if (bs.numel() != static_cast<std::size_t>(ws.n)) {
    throw DimensionError("dense: bias length (" + std::to_string(bs.numel()) +
                         ") != weight rows (" + std::to_string(ws.n) + ")");
  }
  Tensor out({xs.n, ws.n, 1, 1});
  const Tensor& x = input.value();
  const Tensor& wt = weight.value();
  const Tensor& b = bias.value();
  for (int n = 0; n < xs.n; ++n) {
    const double* xv = x.ptr() + static_cast<std::size_t>(n) * in_len;
    for (int o = 0; o < ws.n; ++o) {
      const double* wr = wt.ptr() + static_cast<std::size_t>(o) * in_len;
      double acc = b[o];
      for (int i = 0; i < in_len; ++i) acc += wr[i] * xv[i];
      out[static_cast<std::size_t>(n) * ws.n + o] = acc;
    }
  }
  TapeNode node;
  node.op = OpKind::kDense;
  node.inputs = {input.id(), weight.id(), bias.id()};
  return tape.record(std::move(node), std::move(out));
}

Var global_avg_pool(Var input) {
  Tape& tape = tape_of(input);
  const Shape s = input.shape();
  if (s.plane() == 0) throw DimensionError("global_avg_pool: empty plane");
  const Tensor& x = input.value();
  Tensor out({s.n, s.c, 1, 1});
  const std::size_t plane = s.plane();
  for (int nc = 0; nc < s.n * s.c; ++nc) {
    double acc = 0.0;
    const std::size_t base = static_cast<std::size_t>(nc) * plane;
    for (std::size_t p = 0; p < plane; ++p) acc += x[base + p];
    out[nc] = acc / static_cast<double>(plane);
  }
  TapeNode node;
  node.op = OpKind::kGlobalAvgPool;
  node.inputs = {input.id()};
  return tape.record(std::move(node), std::move(out));
}

Var channel_expectation(Var input, std::vector<double> weights) {
  Tape& tape = tape_of(input);
  const Shape s = input.shape();
  if (weights.size() != static_cast<std::size_t>(s.c)) {
    throw DimensionError("channel_expectation: " +
                         std::to_string(weights.size()) +
                         " weights for channel axis " + std::to_string(s.c));
  }
  const Tensor& x = input.value();
  Tensor out({s.n, 1, s.h, s.w});
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
    double* dst = out.ptr() + static_cast<std::size_t>(n) * plane;
    for (int c = 0; c < s.c; ++c) {
      const double k = weights[c];
      const double* src = x.ptr() + base + c * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] += k * src[p];
    }
  }
  TapeNode node;
  node.op = OpKind::kChannelExpectation;
  node.inputs = {input.id()};
  node.saved = std::move(weights);
  return tape.record(std::move(node), std::move(out));
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor out(a.shape());
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  TapeNode node;
  node.op = OpKind::kAdd;
  node.inputs = {a.id(), b.id()};
  return tape.record(std::move(node), std::move(out));
}

Var scale(Var input, double factor) {
  Tape& tape = tape_of(input);
  Tensor out(input.shape());
  const Tensor& x = input.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  TapeNode node;
  node.op = OpKind::kScale;
  node.inputs = {input.id()};
  node.attr[0] = factor;
  return tape.record(std::move(node), std::move(out));
}

Var sum_squares(Var input) {
  Tape& tape = tape_of(input);
  const Tensor& x = input.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * x[i];
  TapeNode node;
  node.op = OpKind::kSumSquares;
  node.inputs = {input.id()};
  return tape.record(std::move(node), Tensor::scalar(acc));
}

Var squared_difference(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.shape(), b.shape(), "squared_difference");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    acc += d * d;
  }
  TapeNode node;
  node.op = OpKind::kSquaredDifference;
  node.inputs = {a.id(), b.id()};
  return tape.record(std::move(node), Tensor::scalar(acc));
}

namespace {

void check_map(const Shape& s, int n, int h, int w, const char* what) {
  if (s.n != n || s.h != h || s.w != w) {
    throw DimensionError(std::string(what) + ": map " + std::to_string(n) +
                         "x" + std::to_string(h) + "x" + std::to_string(w) +
                         " does not match tensor " + s.str());
  }
}

}  // namespace

Var cross_entropy(Var probs, const LabelMap& labels, const ValidMask* mask) {
  Tape& tape = tape_of(probs);
  const Shape s = probs.shape();
  check_map(s, labels.n, labels.h, labels.w, "cross_entropy labels");
  if (mask) check_map(s, mask->n, mask->h, mask->w, "cross_entropy mask");
  const Tensor& p = probs.value();
  const std::size_t plane = s.plane();
  TapeNode node;
  node.op = OpKind::kCrossEntropy;
  node.inputs = {probs.id()};
  node.saved_index.assign(labels.size(), -1);
  double acc = 0.0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n) {
    for (std::size_t q = 0; q < plane; ++q) {
      const std::size_t pix = static_cast<std::size_t>(n) * plane + q;
      if (mask && !mask->valid[pix]) continue;
      const int label = labels.labels[pix];
      if (label >= s.c) {
        throw DataError("cross_entropy: label " + std::to_string(label) +
                        " out of range [0, " + std::to_string(s.c) + ")");
      }
      const double pr = std::max(
          p[(static_cast<std::size_t>(n) * s.c + label) * plane + q],
          std::numeric_limits<double>::min());
      acc -= std::log(pr);
      node.saved_index[pix] = label;
      ++count;
    }
  }
  if (count == 0) throw DataError("cross_entropy: no valid pixels");
  node.attr[0] = static_cast<double>(count);
  return tape.record(std::move(node),
                     Tensor::scalar(acc / static_cast<double>(count)));
}

Var depth_loss(Var target, Var pred, const ValidMask& mask) {
  Tape& tape = tape_of(target, pred);
  require_same_shape(target.shape(), pred.shape(), "depth_loss");
  const Shape s = pred.shape();
  if (s.c != 1) throw DimensionError("depth_loss: expected 1 channel, got " + s.str());
  check_map(s, mask.n, mask.h, mask.w, "depth_loss mask");
  const Tensor& t = target.value();
  const Tensor& y = pred.value();
  const std::size_t plane = s.plane();
  TapeNode node;
  node.op = OpKind::kDepthLoss;
  node.inputs = {target.id(), pred.id()};
  // saved: per-pixel residual, then per-image (count, sum); saved_index holds
  // the mask bits.
  node.saved.assign(s.numel() + 2 * static_cast<std::size_t>(s.n), 0.0);
  node.saved_index.assign(s.numel(), 0);
  double total = 0.0;
  for (int n = 0; n < s.n; ++n) {
    double sum = 0.0, sq = 0.0;
    std::size_t count = 0;
    for (std::size_t q = 0; q < plane; ++q) {
      const std::size_t i = static_cast<std::size_t>(n) * plane + q;
      if (!mask.valid[i]) continue;
      const double d = t[i] - y[i];
      node.saved[i] = d;
      node.saved_index[i] = 1;
      sum += d;
      sq += d * d;
      ++count;
    }
    if (count == 0) {
      throw DataError("depth_loss: image " + std::to_string(n) +
                      " has an empty validity mask");
    }
    const double cnt = static_cast<double>(count);
    node.saved[s.numel() + 2 * n] = cnt;
    node.saved[s.numel() + 2 * n + 1] = sum;
    total += sq / cnt - sum * sum / (2.0 * cnt * cnt);
  }
  return tape.record(std::move(node),
                     Tensor::scalar(total / static_cast<double>(s.n)));
}

Var normal_loss(Var target, Var pred, const ValidMask& mask) {
  Tape& tape = tape_of(target, pred);
  require_same_shape(target.shape(), pred.shape(), "normal_loss");
  const Shape s = pred.shape();
  if (s.c != 3) throw DimensionError("normal_loss: expected 3 channels, got " + s.str());
  check_map(s, mask.n, mask.h, mask.w, "normal_loss mask");
  const Tensor& g = target.value();
  const Tensor& m = pred.value();
  const std::size_t plane = s.plane();
  TapeNode node;
  node.op = OpKind::kNormalLoss;
  node.inputs = {target.id(), pred.id()};
  // saved: per-pixel norm of the prediction (0 outside mask).
  node.saved.assign(static_cast<std::size_t>(s.n) * plane, 0.0);
  double acc = 0.0;
  std::size_t count = 0;
  for (int n = 0; n < s.n; ++n) {
    const std::size_t base = static_cast<std::size_t>(n) * 3 * plane;
    for (std::size_t q = 0; q < plane; ++q) {
      const std::size_t pix = static_cast<std::size_t>(n) * plane + q;
      if (!mask.valid[pix]) continue;
      const double mx = m[base + q], my = m[base + plane + q],
                   mz = m[base + 2 * plane + q];
      const double len =
          std::max(std::sqrt(mx * mx + my * my + mz * mz), kNormalEpsilon);
      node.saved[pix] = len;
      acc += (mx * g[base + q] + my * g[base + plane + q] +
              mz * g[base + 2 * plane + q]) /
             len;
      ++count;
    }
  }
  if (count == 0) throw DataError("normal_loss: empty validity mask");
  node.attr[0] = static_cast<double>(count);
  return tape.record(std::move(node),
                     Tensor::scalar(-acc / static_cast<double>(count)));
}

}  // namespace amalgam::ops

namespace amalgam::detail {

void backward_op(Tape& tape, int id, const TapeNode& node,
                 std::span<const double> g) {
  const Tensor& out = tape.value_at(id);
  auto needs = [&](int k) { return tape.requires_grad_at(node.inputs[k]); };
  auto acc = [&](int k) { return tape.accumulator(node.inputs[k]); };
  auto in = [&](int k) -> const Tensor& { return tape.value_at(node.inputs[k]); };

  switch (node.op) {
    case OpKind::kLeaf:
      return;
    case OpKind::kConv2d:
      ops::conv2d_backward(tape, node, g);
      return;
    case OpKind::kMaxPool2x2: {
      if (!needs(0)) return;
      auto dx = acc(0);
      for (std::size_t o = 0; o < g.size(); ++o) dx[node.saved_index[o]] += g[o];
      return;
    }
    case OpKind::kUpsample2x: {
      if (!needs(0)) return;
      auto dx = acc(0);
      const Shape s = in(0).shape();
      const int w2 = s.w * 2;
      for (int nc = 0; nc < s.n * s.c; ++nc) {
        const double* src = g.data() + static_cast<std::size_t>(nc) * 4 * s.h * s.w;
        double* dst = dx.data() + static_cast<std::size_t>(nc) * s.h * s.w;
        for (int y = 0; y < s.h; ++y) {
          const double* r0 = src + static_cast<std::size_t>(2 * y) * w2;
          const double* r1 = r0 + w2;
          for (int xw = 0; xw < s.w; ++xw) {
            dst[static_cast<std::size_t>(y) * s.w + xw] +=
                r0[2 * xw] + r0[2 * xw + 1] + r1[2 * xw] + r1[2 * xw + 1];
          }
        }
      }
      return;
    }
    case OpKind::kRelu: {
      if (!needs(0)) return;
      auto dx = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (out[i] > 0.0) dx[i] += g[i];
      }
      return;
    }
    case OpKind::kSigmoid: {
      if (!needs(0)) return;
      auto dx = acc(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        dx[i] += g[i] * out[i] * (1.0 - out[i]);
      }
      return;
    }
    case OpKind::kSoftmaxChannels: {
      if (!needs(0)) return;
      auto dx = acc(0);
      const Shape s = out.shape();
      const std::size_t plane = s.plane();
      for (int n = 0; n < s.n; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * s.c * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          double dot = 0.0;
          for (int c = 0; c < s.c; ++c) {
            dot += g[base + c * plane + p] * out[base + c * plane + p];
          }
          for (int c = 0; c < s.c; ++c) {
            const std::size_t i = base + c * plane + p;
            dx[i] += out[i] * (g[i] - dot);
          }
        }
      }
      return;
    }
    case OpKind::kChannelScale: {
      const Tensor& x = in(0);
      const Tensor& f = in(1);
      const Shape s = x.shape();
      const std::size_t plane = s.plane();
      if (needs(0)) {
        auto dx = acc(0);
        for (int nc = 0; nc < s.n * s.c; ++nc) {
          const std::size_t base = static_cast<std::size_t>(nc) * plane;
          for (std::size_t p = 0; p < plane; ++p) dx[base + p] += g[base + p] * f[nc];
        }
      }
      if (needs(1)) {
        auto df = acc(1);
        for (int nc = 0; nc < s.n * s.c; ++nc) {
          const std::size_t base = static_cast<std::size_t>(nc) * plane;
          double sacc = 0.0;
          for (std::size_t p = 0; p < plane; ++p) sacc += g[base + p] * x[base + p];
          df[nc] += sacc;
        }
      }
      return;
    }
    case OpKind::kDense: {
      const Tensor& x = in(0);
      const Tensor& wt = in(1);
      const Shape xs = x.shape();
      const int in_len = xs.c * xs.h * xs.w;
      const int out_len = wt.shape().n;
      if (needs(0)) {
        auto dx = acc(0);
        for (int n = 0; n < xs.n; ++n) {
          for (int o = 0; o < out_len; ++o) {
            const double go = g[static_cast<std::size_t>(n) * out_len + o];
            const double* wr = wt.ptr() + static_cast<std::size_t>(o) * in_len;
            double* d = dx.data() + static_cast<std::size_t>(n) * in_len;
            for (int i = 0; i < in_len; ++i) d[i] += go * wr[i];
          }
        }
      }
      if (needs(1)) {
        auto dw = acc(1);
        for (int n = 0; n < xs.n; ++n) {
          const double* xv = x.ptr() + static_cast<std::size_t>(n) * in_len;
          for (int o = 0; o < out_len; ++o) {
            const double go = g[static_cast<std::size_t>(n) * out_len + o];
            double* d = dw.data() + static_cast<std::size_t>(o) * in_len;
            for (int i = 0; i < in_len; ++i) d[i] += go * xv[i];
          }
        }
      }
      if (needs(2)) {
        auto db = acc(2);
        for (int n = 0; n < xs.n; ++n) {
          for (int o = 0; o < out_len; ++o) {
            db[o] += g[static_cast<std::size_t>(n) * out_len + o];
          }
        }
      }
      return;
    }
    case OpKind::kGlobalAvgPool: {
      if (!needs(0)) return;
      auto dx = acc(0);
      const Shape s = in(0).shape();
      const std::size_t plane = s.plane();
      const double inv = 1.0 / static_cast<double>(plane);
      for (int nc = 0; nc < s.n * s.c; ++nc) {
        const double v = g[nc] * inv;
        const std::size_t base = static_cast<std::size_t>(nc) * plane;
        for (std::size_t p = 0; p < plane; ++p) dx[base + p] += v;
      }
      return;
    }
    case OpKind::kChannelExpectation: {
      if (!needs(0)) return;
      auto dx = acc(0);
      const Shape s = in(0).shape();
      const std::size_t plane = s.plane();
      for (int n = 0; n < s.n; ++n) {
        const double* src = g.data() + static_cast<std::size_t>(n) * plane;
        for (int c = 0; c < s.c; ++c) {
          const double k = node.saved[c];
          double* dst = dx.data() + (static_cast<std::size_t>(n) * s.c + c) * plane;
          for (std::size_t p = 0; p < plane; ++p) dst[p] += k * src[p];
        }
      }
      return;
    }
    case OpKind::kAdd: {
      for (int k = 0; k < 2; ++k) {
        if (!needs(k)) continue;
        auto d = acc(k);
        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
      }
      return;
    }
    case OpKind::kScale: {
      if (!needs(0)) return;
      auto dx = acc(0);
      const double f = node.attr[0];
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * f;
      return;
    }
    case OpKind::kSumSquares: {
      if (!needs(0)) return;
      auto dx = acc(0);
      const Tensor& x = in(0);
      const double go = g[0];
      for (std::size_t i = 0; i < x.size(); ++i) dx[i] += 2.0 * go * x[i];
      return;
    }
    case OpKind::kSquaredDifference: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const double go = g[0];
      if (needs(0)) {
        auto d = acc(0);
        for (std::size_t i = 0; i < a.size(); ++i) d[i] += 2.0 * go * (a[i] - b[i]);
      }
      if (needs(1)) {
        auto d = acc(1);
        for (std::size_t i = 0; i < a.size(); ++i) d[i] -= 2.0 * go * (a[i] - b[i]);
      }
      return;
    }
    case OpKind::kCrossEntropy: {
      if (!needs(0)) return;
      auto dx = acc(0);
      const Tensor& p = in(0);
      const Shape s = p.shape();
      const std::size_t plane = s.plane();
      const double scale = g[0] / node.attr[0];
      for (int n = 0; n < s.n; ++n) {
        for (std::size_t q = 0; q < plane; ++q) {
          const std::size_t pix = static_cast<std::size_t>(n) * plane + q;
          const int label = node.saved_index[pix];
          if (label < 0) continue;
          const std::size_t i = (static_cast<std::size_t>(n) * s.c + label) * plane + q;
          const double pr = std::max(p[i], std::numeric_limits<double>::min());
          dx[i] -= scale / pr;
        }
      }
      return;
    }
    case OpKind::kDepthLoss: {
      const Shape s = in(1).shape();
      const std::size_t plane = s.plane();
      const double go = g[0] / static_cast<double>(s.n);
      const bool nt = needs(0), np = needs(1);
      std::span<double> dt, dp;
      if (nt) dt = acc(0);
      if (np) dp = acc(1);
      for (int n = 0; n < s.n; ++n) {
        const double cnt = node.saved[s.numel() + 2 * n];
        const double sum = node.saved[s.numel() + 2 * n + 1];
        for (std::size_t q = 0; q < plane; ++q) {
          const std::size_t i = static_cast<std::size_t>(n) * plane + q;
          if (node.saved_index[i] == 0) continue;
          const double dd = go * (2.0 * node.saved[i] / cnt - sum / (cnt * cnt));
          if (nt) dt[i] += dd;
          if (np) dp[i] -= dd;
        }
      }
      return;
    }
    case OpKind::kNormalLoss: {
      const Tensor& gt = in(0);
      const Tensor& m = in(1);
      const Shape s = m.shape();
      const std::size_t plane = s.plane();
      const double scale = -g[0] / node.attr[0];
      const bool ng = needs(0), nm = needs(1);
      std::span<double> dg, dm;
      if (ng) dg = acc(0);
      if (nm) dm = acc(1);
      for (int n = 0; n < s.n; ++n) {
        const std::size_t base = static_cast<std::size_t>(n) * 3 * plane;
        for (std::size_t q = 0; q < plane; ++q) {
          const double len = node.saved[static_cast<std::size_t>(n) * plane + q];
          if (len == 0.0) continue;
          double u[3], t[3];
          for (int k = 0; k < 3; ++k) {
            u[k] = m[base + k * plane + q] / len;
            t[k] = gt[base + k * plane + q];
          }
          if (ng) {
            for (int k = 0; k < 3; ++k) dg[base + k * plane + q] += scale * u[k];
          }
          if (nm) {
            const double ut = u[0] * t[0] + u[1] * t[1] + u[2] * t[2];
            for (int k = 0; k < 3; ++k) {
              dm[base + k * plane + q] += scale * (t[k] - ut * u[k]) / len;
            }
          }
        }
      }
      return;
    }
  }
}

}  // namespace amalgam::detail
