#include "amalgam/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "amalgam/error.hpp"
#include "amalgam/ops.hpp"

namespace amalgam {

namespace {

void check_map(const ValidMask& mask, int n, int h, int w, const char* what) {
  if (mask.n != n || mask.h != h || mask.w != w) {
    throw DimensionError(std::string(what) + ": mask does not match the maps");
  }
}

}  // namespace

SegAccumulator::SegAccumulator(int classes)
    : k_(classes), confusion_(static_cast<std::size_t>(classes) * classes, 0) {
  if (classes < 1) throw UsageError("SegAccumulator needs at least one class");
}

void SegAccumulator::add(const LabelMap& pred, const LabelMap& gt, const ValidMask* mask) {
  if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w) {
    throw DimensionError("seg_metrics: prediction and ground truth differ in size");
  }
  if (mask) check_map(*mask, gt.n, gt.h, gt.w, "seg_metrics");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (mask && !mask->valid[i]) continue;
    const int g = gt.labels[i], p = pred.labels[i];
    if (g >= k_ || p >= k_) {
      throw DataError("seg_metrics: label " + std::to_string(std::max(g, p)) +
                      " outside [0, " + std::to_string(k_) + ")");
    }
    ++confusion_[static_cast<std::size_t>(g) * k_ + p];
  }
}

SegMetrics SegAccumulator::result() const {
  std::uint64_t total = 0, correct = 0;
  double iou_sum = 0.0;
  int present = 0;
  for (int c = 0; c < k_; ++c) {
    std::uint64_t gt_c = 0, pred_c = 0;
    for (int j = 0; j < k_; ++j) {
      gt_c += confusion_[static_cast<std::size_t>(c) * k_ + j];
      pred_c += confusion_[static_cast<std::size_t>(j) * k_ + c];
    }
    const std::uint64_t tp = confusion_[static_cast<std::size_t>(c) * k_ + c];
    total += gt_c;
    correct += tp;
    const std::uint64_t uni = gt_c + pred_c - tp;
    if (uni == 0) continue;
    iou_sum += static_cast<double>(tp) / static_cast<double>(uni);
    ++present;
  }
  SegMetrics m;
  m.pixel_acc = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  m.miou = present ? iou_sum / present : 0.0;
  return m;
}

void DepthAccumulator::add(const Tensor& pred, const Tensor& gt, const ValidMask& mask) {
  require_same_shape(pred.shape(), gt.shape(), "depth_metrics");
  const Shape s = gt.shape();
  if (s.c != 1) throw DimensionError("depth_metrics: expected one channel, got " + s.str());
  check_map(mask, s.n, s.h, s.w, "depth_metrics");
  static const double kThresholds[3] = {1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25};
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (!mask.valid[i]) continue;
    const double y = pred[i], t = gt[i];
    if (!(t > 0.0)) {
      throw DataError("depth_metrics: non-positive ground truth " + std::to_string(t) +
                      " at valid pixel " + std::to_string(i));
    }
    const double diff = y - t;
    abs_sum_ += std::abs(diff) / t;
    sqr_sum_ += diff * diff / t;
    const double ratio = std::max(y / t, t / y);
    for (int k = 0; k < 3; ++k) {
      if (y > 0.0 && ratio < kThresholds[k]) ++within_[k];
    }
    ++count_;
  }
}

DepthMetrics DepthAccumulator::result() const {
  DepthMetrics m;
  if (count_ == 0) return m;
  const double n = static_cast<double>(count_);
  m.abs_rel = abs_sum_ / n;
  m.sqr_rel = sqr_sum_ / n;
  m.delta1 = within_[0] / n;
  m.delta2 = within_[1] / n;
  m.delta3 = within_[2] / n;
  return m;
}

void NormalAccumulator::add(const Tensor& pred, const Tensor& gt, const ValidMask& mask) {
  require_same_shape(pred.shape(), gt.shape(), "normal_metrics");
  const Shape s = gt.shape();
  if (s.c != 3) throw DimensionError("normal_metrics: expected 3 channels, got " + s.str());
  check_map(mask, s.n, s.h, s.w, "normal_metrics");
  const std::size_t plane = s.plane();
  for (int n = 0; n < s.n; ++n) {
    const double* p = pred.ptr() + static_cast<std::size_t>(n) * 3 * plane;
    const double* g = gt.ptr() + static_cast<std::size_t>(n) * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      if (!mask.valid[static_cast<std::size_t>(n) * plane + i]) continue;
      const double px = p[i], py = p[plane + i], pz = p[2 * plane + i];
      const double gx = g[i], gy = g[plane + i], gz = g[2 * plane + i];
      const double len = std::sqrt(px * px + py * py + pz * pz);
      // atan2 of (|p x g|, p . g) is exact for identical directions, unlike acos.
      double angle = 90.0;
      if (len >= ops::kNormalEpsilon) {
        const double cx = py * gz - pz * gy, cy = pz * gx - px * gz, cz = px * gy - py * gx;
        const double cross = std::sqrt(cx * cx + cy * cy + cz * cz);
        angle = std::atan2(cross, px * gx + py * gy + pz * gz) * 180.0 / std::numbers::pi;
      }
      angles_.push_back(angle);
    }
  }
}

NormalMetrics NormalAccumulator::result() const {
  NormalMetrics m;
  if (angles_.empty()) return m;
  double sum = 0.0;
  std::size_t w11 = 0, w22 = 0, w30 = 0;
  for (double a : angles_) {
    sum += a;
    w11 += a < 11.25;
    w22 += a < 22.5;
    w30 += a < 30.0;
  }
  const double n = static_cast<double>(angles_.size());
  m.mean_deg = sum / n;
  m.median_deg = median(angles_);
  m.within_11 = w11 / n;
  m.within_22 = w22 / n;
  m.within_30 = w30 / n;
  return m;
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + mid, values.end());
  const double upper = values[mid];
  if (values.size() % 2 == 1) return upper;
  const double lower = *std::max_element(values.begin(), values.begin() + mid);
  return 0.5 * (lower + upper);
}

SegMetrics seg_metrics(const LabelMap& pred, const LabelMap& gt, int classes,
                       const ValidMask* mask) {
  SegAccumulator acc(classes);
  acc.add(pred, gt, mask);
  return acc.result();
}

DepthMetrics depth_metrics(const Tensor& pred, const Tensor& gt, const ValidMask& mask) {
  DepthAccumulator acc;
  acc.add(pred, gt, mask);
  return acc.result();
}

NormalMetrics normal_metrics(const Tensor& pred, const Tensor& gt, const ValidMask& mask) {
  NormalAccumulator acc;
  acc.add(pred, gt, mask);
  return acc.result();
}

std::string format_metrics(const MetricReport& r, const std::string& prefix) {
  std::string out;
  auto line = [&](const char* key, double v) {
    out += fmt::format("{}{}={:.6f}\n", prefix, key, v);
  };
  if (r.seg) {
    line("seg.miou", r.seg->miou);
    line("seg.pixel_acc", r.seg->pixel_acc);
  }
  if (r.depth) {
    line("depth.abs_rel", r.depth->abs_rel);
    line("depth.sqr_rel", r.depth->sqr_rel);
    line("depth.delta1", r.depth->delta1);
    line("depth.delta2", r.depth->delta2);
    line("depth.delta3", r.depth->delta3);
  }
  if (r.normal) {
    line("normal.mean_deg", r.normal->mean_deg);
    line("normal.median_deg", r.normal->median_deg);
    line("normal.within_11_25", r.normal->within_11);
    line("normal.within_22_5", r.normal->within_22);
    line("normal.within_30", r.normal->within_30);
    out += fmt::format("{}normal.degenerate={}\n", prefix, r.degenerate_normals);
  }
  return out;
}

}  // namespace amalgam
