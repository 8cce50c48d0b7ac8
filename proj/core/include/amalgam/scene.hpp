#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "amalgam/maps.hpp"
#include "amalgam/tensor.hpp"

namespace amalgam {

// Orthographic camera: pixel (u, v) sees the ray through
// X = (u + 0.5 - W/2) * pixel_size, Y = (v + 0.5 - H/2) * pixel_size.
struct Intrinsics {
  double pixel_size = 1.0 / 16.0;
};

struct SceneConfig {
  int height = 64;
  int width = 64;
  int classes = 5;  // class 0 is the background plane
  int min_primitives = 2;
  int max_primitives = 6;
  double near = 2.0;
  double far = 8.0;
  double noise = 0.02;
  Intrinsics intrinsics;
  std::uint64_t seed = 0;
};

// Throws ConfigError on an unusable configuration; `divisor` is the network's
// required input stride (2^(N/2)).
void validate(const SceneConfig& cfg, int divisor = 1);

enum class PrimitiveKind : std::uint8_t { kRectTiltX, kRectTiltY, kSphere };

// Geometry the class renders as (class 0 is the background plane).
PrimitiveKind class_kind(int cls);
std::array<double, 3> class_albedo(int cls);

// One primitive in scene units (x right, y down, z away from the camera).
struct ScenePrimitive {
  int cls = 1;
  PrimitiveKind kind = PrimitiveKind::kRectTiltX;
  double cx = 0, cy = 0;
  double hx = 0, hy = 0;  // rectangle half extents
  double radius = 0;      // sphere
  double z0 = 0;          // depth at the centre (sphere: centre depth)
  double slope = 0;       // depth change per scene unit along the tilt axis
};

// Random draw behind generate(): the background plane runs from depth `far`
// at the top edge to `z_bottom` at the bottom edge.
struct SceneLayout {
  double z_bottom = 0.0;
  std::vector<ScenePrimitive> primitives;
};
SceneLayout layout(const SceneConfig& cfg, std::int64_t index);

// Depth of the first surface point of `p` on the ray through (x, y).
std::optional<double> primitive_depth(const ScenePrimitive& p, double x, double y);

struct Sample {
  int height = 0;
  int width = 0;
  std::vector<double> image;          // 3 x H x W in [0, 1]
  std::vector<std::uint16_t> seg;     // H x W
  std::vector<double> depth;          // H x W
  std::vector<double> normal;         // 3 x H x W, unit length where valid
  std::vector<std::uint8_t> mask;     // H x W
  std::vector<std::uint16_t> instance;  // 0 = background, i + 1 = primitive i

  friend bool operator==(const Sample&, const Sample&) = default;
};

// Pure function of (cfg, index).
Sample generate(const SceneConfig& cfg, std::int64_t index);

// Per-pixel normals from central differences of back-projected neighbours,
// oriented towards the camera (n_z < 0). Border pixels and pixels with an
// invalid neighbour are cleared in `mask`.
std::vector<double> normals_from_depth(const std::vector<double>& depth, int height,
                                       int width, std::vector<std::uint8_t>& mask,
                                       const Intrinsics& intrinsics);

Sample crop(const Sample& s, int top, int left, int height, int width);

struct Batch {
  Tensor images;  // (n, 3, h, w)
  LabelMap seg;
  Tensor depth;   // (n, 1, h, w)
  Tensor normal;  // (n, 3, h, w)
  ValidMask mask;
};

Tensor stack_images(const std::vector<const Sample*>& samples);

// Generated samples for one contiguous index range. Ground-truth accessors
// are audited: gt_reads() counts every sample whose labels were handed out.
class LabeledSet {
 public:
  LabeledSet(const SceneConfig& cfg, std::int64_t first, int count);
  // Wraps already generated (e.g. loaded) samples.
  LabeledSet(const SceneConfig& cfg, std::int64_t first, std::vector<Sample> samples);

  int size() const { return static_cast<int>(samples_->size()); }
  std::int64_t first_index() const { return first_; }
  const SceneConfig& config() const { return cfg_; }

  const Sample& sample(int i) const;
  Batch batch(const std::vector<int>& indices) const;
  std::uint64_t gt_reads() const { return *reads_; }

  // Images of sample i without touching ground truth.
  const std::vector<double>& image(int i) const { return (*samples_)[i].image; }

 private:
  SceneConfig cfg_;
  std::int64_t first_;
  std::shared_ptr<std::vector<Sample>> samples_;
  std::shared_ptr<std::uint64_t> reads_;
};

// Images only: there is deliberately no way to reach labels through this
// type.
class ImageSource {
 public:
  explicit ImageSource(const LabeledSet& set);
  ImageSource(std::vector<std::vector<double>> images, int height, int width);

  int size() const { return static_cast<int>(images_.size()); }
  int height() const { return height_; }
  int width() const { return width_; }
  Tensor batch(const std::vector<int>& indices) const;
  Tensor all() const;

 private:
  std::vector<std::vector<double>> images_;
  int height_ = 0;
  int width_ = 0;
};

struct SplitConfig {
  std::int64_t train_first = 0;
  int train_count = 400;
  std::int64_t eval_first = 400;
  int eval_count = 100;
};

struct DataSplit {
  LabeledSet train;
  LabeledSet eval;
};

// Throws ConfigError if the index ranges overlap or are empty.
DataSplit split(const SceneConfig& scene, const SplitConfig& cfg);

}  // namespace amalgam
