#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "amalgam/maps.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

struct SegMetrics {
  double miou = 0.0;
  double pixel_acc = 0.0;
};

struct DepthMetrics {
  double abs_rel = 0.0;
  double sqr_rel = 0.0;
  double delta1 = 0.0;  // max(y/y*, y*/y) < 1.25
  double delta2 = 0.0;  // < 1.25^2
  double delta3 = 0.0;  // < 1.25^3
};

struct NormalMetrics {
  double mean_deg = 0.0;
  double median_deg = 0.0;
  double within_11 = 0.0;  // < 11.25 degrees
  double within_22 = 0.0;  // < 22.5
  double within_30 = 0.0;  // < 30
};

// Whatever the evaluated model could produce; absent heads stay empty.
struct MetricReport {
  std::optional<SegMetrics> seg;
  std::optional<DepthMetrics> depth;
  std::optional<NormalMetrics> normal;
  std::size_t degenerate_normals = 0;
};

// Dataset-level confusion matrix. IoU is averaged over classes present in
// the ground truth or the prediction.
class SegAccumulator {
 public:
  explicit SegAccumulator(int classes);

  void add(const LabelMap& pred, const LabelMap& gt, const ValidMask* mask = nullptr);
  SegMetrics result() const;
  std::uint64_t count(int gt, int pred) const { return confusion_[gt * k_ + pred]; }

 private:
  int k_;
  std::vector<std::uint64_t> confusion_;
};

class DepthAccumulator {
 public:
  // pred, gt are (n, 1, h, w). Throws DataError on gt <= 0 inside the mask.
  void add(const Tensor& pred, const Tensor& gt, const ValidMask& mask);
  DepthMetrics result() const;

 private:
  double abs_sum_ = 0.0;
  double sqr_sum_ = 0.0;
  std::size_t within_[3] = {0, 0, 0};
  std::size_t count_ = 0;
};

class NormalAccumulator {
 public:
  // pred, gt are (n, 3, h, w); predictions are renormalised.
  void add(const Tensor& pred, const Tensor& gt, const ValidMask& mask);
  NormalMetrics result() const;
  const std::vector<double>& angles() const { return angles_; }

 private:
  std::vector<double> angles_;
};

SegMetrics seg_metrics(const LabelMap& pred, const LabelMap& gt, int classes,
                       const ValidMask* mask = nullptr);
DepthMetrics depth_metrics(const Tensor& pred, const Tensor& gt, const ValidMask& mask);
NormalMetrics normal_metrics(const Tensor& pred, const Tensor& gt, const ValidMask& mask);

// Median with the midpoint of the two central values for even counts.
double median(std::vector<double> values);

// key=value lines, one metric per line, fixed order.
std::string format_metrics(const MetricReport& report, const std::string& prefix = "");

}  // namespace amalgam
