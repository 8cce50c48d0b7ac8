#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace amalgam {

// Per-pixel class indices laid out (n, h, w), w fastest.
struct LabelMap {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint16_t> labels;

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_, std::uint16_t fill = 0)
      : n(n_), h(h_), w(w_),
        labels(static_cast<std::size_t>(n_) * h_ * w_, fill) {}

  std::size_t size() const { return labels.size(); }
  std::uint16_t& at(int b, int y, int x) {
    return labels[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
  std::uint16_t at(int b, int y, int x) const {
    return labels[(static_cast<std::size_t>(b) * h + y) * w + x];
  }
};

// Per-pixel validity, same layout as LabelMap. Pixels with missing ground
// truth are excluded from losses and metrics.
struct ValidMask {
  int n = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> valid;

  ValidMask() = default;
  ValidMask(int n_, int h_, int w_, bool fill = true)
      : n(n_), h(h_), w(w_),
        valid(static_cast<std::size_t>(n_) * h_ * w_, fill ? 1 : 0) {}

  std::size_t size() const { return valid.size(); }
  std::size_t count() const {
    std::size_t total = 0;
    for (auto v : valid) total += v != 0;
    return total;
  }
  bool at(int b, int y, int x) const {
    return valid[(static_cast<std::size_t>(b) * h + y) * w + x] != 0;
  }
};

}  // namespace amalgam
