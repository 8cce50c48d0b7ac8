#include "amalgam/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "amalgam/error.hpp"
#include "amalgam/rng.hpp"

namespace amalgam {

void validate(const SceneConfig& cfg, int divisor) {
  if (cfg.height <= 0 || cfg.width <= 0) throw ConfigError("scene size must be positive");
  if (divisor > 0 && (cfg.height % divisor != 0 || cfg.width % divisor != 0)) {
    throw ConfigError("scene size " + std::to_string(cfg.height) + "x" +
                      std::to_string(cfg.width) + " is not divisible by " +
                      std::to_string(divisor));
  }
  if (cfg.classes < 2) throw ConfigError("scene needs at least 2 classes");
  if (cfg.classes > 65535) throw ConfigError("too many classes");
  if (cfg.min_primitives < 0 || cfg.max_primitives < cfg.min_primitives) {
    throw ConfigError("invalid primitive count range");
  }
  if (!(cfg.near > 0.0) || !(cfg.far > cfg.near)) {
    throw ConfigError("depth range requires far > near > 0");
  }
  if (cfg.far - cfg.near < 3.0) throw ConfigError("depth range must span at least 3 units");
  if (!(cfg.intrinsics.pixel_size > 0.0)) throw ConfigError("pixel_size must be > 0");
  if (cfg.noise < 0.0) throw ConfigError("noise must be >= 0");
}

PrimitiveKind class_kind(int cls) {
  static constexpr PrimitiveKind kShapes[3] = {
      PrimitiveKind::kRectTiltX, PrimitiveKind::kRectTiltY, PrimitiveKind::kSphere};
  return kShapes[(std::max(cls, 1) - 1) % 3];
}

std::array<double, 3> class_albedo(int cls) {
  static constexpr std::array<double, 3> kTable[] = {
      {0.90, 0.90, 0.90}, {0.90, 0.25, 0.20}, {0.20, 0.90, 0.30}, {0.25, 0.35, 0.90},
      {0.90, 0.80, 0.20}, {0.75, 0.30, 0.90}, {0.20, 0.85, 0.90}, {0.90, 0.55, 0.15},
  };
  if (cls < 8) return kTable[cls];
  Rng rng(Rng::derive(0, "albedo", static_cast<std::uint64_t>(cls)));
  std::array<double, 3> a{rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9), rng.uniform(0.15, 0.9)};
  a[rng.uniform_int(0, 2)] = 0.9;
  return a;
}

namespace {

struct Hit {
  double z = std::numeric_limits<double>::infinity();
  double nx = 0, ny = 0, nz = -1;
};

bool intersect(const ScenePrimitive& p, double x, double y, Hit& hit) {
  const double dx = x - p.cx, dy = y - p.cy;
  if (p.kind == PrimitiveKind::kSphere) {
    const double r2 = dx * dx + dy * dy;
    if (r2 >= p.radius * p.radius) return false;
    const double dz = std::sqrt(p.radius * p.radius - r2);
    hit.z = p.z0 - dz;
    hit.nx = dx / p.radius;
    hit.ny = dy / p.radius;
    hit.nz = -dz / p.radius;
    return true;
  }
  if (std::abs(dx) > p.hx || std::abs(dy) > p.hy) return false;
  const double gx = p.kind == PrimitiveKind::kRectTiltX ? p.slope : 0.0;
  const double gy = p.kind == PrimitiveKind::kRectTiltY ? p.slope : 0.0;
  hit.z = p.z0 + gx * dx + gy * dy;
  const double len = std::sqrt(gx * gx + gy * gy + 1.0);
  hit.nx = gx / len;
  hit.ny = gy / len;
  hit.nz = -1.0 / len;
  return true;
}

constexpr double kGrazingNz = 0.25;

}  // namespace

SceneLayout layout(const SceneConfig& cfg, std::int64_t index) {
  validate(cfg);
  const int H = cfg.height, W = cfg.width;
  const double ps = cfg.intrinsics.pixel_size;
  const double span = cfg.far - cfg.near;
  Rng rng(Rng::derive(cfg.seed, "scene", static_cast<std::uint64_t>(index)));

  SceneLayout out;
  // Background: depth `far` at the top edge, rising towards the bottom.
  out.z_bottom = rng.uniform(cfg.near + 0.55 * span, cfg.far - 0.15 * span);
  const int count = cfg.max_primitives > 0
                        ? rng.uniform_int(cfg.min_primitives, cfg.max_primitives)
                        : 0;
  const double half_w = 0.5 * W * ps, half_h = 0.5 * H * ps;
  const double extent = std::min(W, H) * ps;
  for (int i = 0; i < count; ++i) {
    ScenePrimitive p;
    p.cls = rng.uniform_int(1, cfg.classes - 1);
    p.kind = class_kind(p.cls);
    p.cx = rng.uniform(-0.8, 0.8) * half_w;
    p.cy = rng.uniform(-0.8, 0.8) * half_h;
    if (p.kind == PrimitiveKind::kSphere) {
      p.radius = rng.uniform(0.11, 0.22) * extent;
      p.z0 = rng.uniform(cfg.near + p.radius + 0.05 * span, cfg.far - 0.25 * span);
    } else {
      p.hx = rng.uniform(0.11, 0.26) * extent;
      p.hy = rng.uniform(0.11, 0.26) * extent;
      p.slope = rng.uniform(-0.6, 0.6);
      const double reach = std::abs(p.slope) * std::max(p.hx, p.hy);
      p.z0 = rng.uniform(cfg.near + reach + 0.05 * span, cfg.far - reach - 0.15 * span);
    }
    out.primitives.push_back(p);
  }
  return out;
}

std::optional<double> primitive_depth(const ScenePrimitive& p, double x, double y) {
  Hit h;
  if (!intersect(p, x, y, h)) return std::nullopt;
  return h.z;
}

Sample generate(const SceneConfig& cfg, std::int64_t index) {
  validate(cfg);
  const int H = cfg.height, W = cfg.width;
  const double ps = cfg.intrinsics.pixel_size;
  const double span = cfg.far - cfg.near;
  Rng noise(Rng::derive(cfg.seed, "noise", static_cast<std::uint64_t>(index)));

  const SceneLayout scene = layout(cfg, index);
  const double z_bottom = scene.z_bottom;
  const double bg_gy = (z_bottom - cfg.far) / (H * ps);
  const double bg_len = std::sqrt(bg_gy * bg_gy + 1.0);
  const std::vector<ScenePrimitive>& prims = scene.primitives;

  Sample s;
  s.height = H;
  s.width = W;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  s.image.assign(3 * plane, 0.0);
  s.seg.assign(plane, 0);
  s.depth.assign(plane, 0.0);
  s.normal.assign(3 * plane, 0.0);
  s.mask.assign(plane, 1);
  s.instance.assign(plane, 0);

  double lx = 0.4, ly = -0.5, lz = -1.0;
  const double llen = std::sqrt(lx * lx + ly * ly + lz * lz);
  lx /= llen;
  ly /= llen;
  lz /= llen;

  for (int v = 0; v < H; ++v) {
    const double y = (v + 0.5 - 0.5 * H) * ps;
    for (int u = 0; u < W; ++u) {
      const double x = (u + 0.5 - 0.5 * W) * ps;
      Hit best;
      best.z = cfg.far + (z_bottom - cfg.far) * (y / (H * ps) + 0.5);
      best.nx = 0.0;
      best.ny = bg_gy / bg_len;
      best.nz = -1.0 / bg_len;
      int cls = 0, inst = 0;
      for (std::size_t i = 0; i < prims.size(); ++i) {
        Hit h;
        if (intersect(prims[i], x, y, h) && h.z < best.z) {
          best = h;
          cls = prims[i].cls;
          inst = static_cast<int>(i) + 1;
        }
      }
      const std::size_t p = static_cast<std::size_t>(v) * W + u;
      best.z = std::clamp(best.z, cfg.near, cfg.far);
      s.depth[p] = best.z;
      s.seg[p] = static_cast<std::uint16_t>(cls);
      s.instance[p] = static_cast<std::uint16_t>(inst);
      s.normal[p] = best.nx;
      s.normal[plane + p] = best.ny;
      s.normal[2 * plane + p] = best.nz;
      s.mask[p] = std::abs(best.nz) >= kGrazingNz ? 1 : 0;

      const double depth_term = (cfg.far - best.z) / span;
      const double lambert = std::max(0.0, best.nx * lx + best.ny * ly + best.nz * lz);
      const double shade = 0.2 + 0.7 * depth_term + 0.1 * lambert;
      const auto albedo = class_albedo(cls);
      for (int c = 0; c < 3; ++c) {
        const double n = cfg.noise > 0.0 ? noise.uniform(-cfg.noise, cfg.noise) : 0.0;
        s.image[c * plane + p] = std::clamp(albedo[c] * shade + n, 0.0, 1.0);
      }
    }
  }
  return s;
}

std::vector<double> normals_from_depth(const std::vector<double>& depth, int height,
                                       int width, std::vector<std::uint8_t>& mask,
                                       const Intrinsics& intrinsics) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (depth.size() != plane || mask.size() != plane) {
    throw DimensionError("normals_from_depth: depth/mask size does not match " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  const double ps = intrinsics.pixel_size;
  std::vector<double> out(3 * plane, 0.0);
  std::vector<std::uint8_t> result(plane, 0);
  for (int v = 1; v + 1 < height; ++v) {
    for (int u = 1; u + 1 < width; ++u) {
      const std::size_t p = static_cast<std::size_t>(v) * width + u;
      if (!mask[p] || !mask[p - 1] || !mask[p + 1] || !mask[p - width] || !mask[p + width]) {
        continue;
      }
      // Tangents tx = (2ps, 0, dzx), ty = (0, 2ps, dzy); n = tx x ty.
      const double dzx = depth[p + 1] - depth[p - 1];
      const double dzy = depth[p + width] - depth[p - width];
      double nx = -2.0 * ps * dzx, ny = -2.0 * ps * dzy, nz = 4.0 * ps * ps;
      if (nz > 0.0) {
        nx = -nx;
        ny = -ny;
        nz = -nz;
      }
      const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
      out[p] = nx / len;
      out[plane + p] = ny / len;
      out[2 * plane + p] = nz / len;
      result[p] = 1;
    }
  }
  mask = std::move(result);
  return out;
}

Sample crop(const Sample& s, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || height <= 0 || width <= 0 || top + height > s.height ||
      left + width > s.width) {
    throw DimensionError("crop window exceeds the " + std::to_string(s.height) + "x" +
                         std::to_string(s.width) + " sample");
  }
  Sample out;
  out.height = height;
  out.width = width;
  const std::size_t src_plane = static_cast<std::size_t>(s.height) * s.width;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  auto copy = [&](const auto& src, auto& dst, int channels) {
    dst.resize(channels * plane);
    for (int c = 0; c < channels; ++c) {
      for (int v = 0; v < height; ++v) {
        for (int u = 0; u < width; ++u) {
          dst[c * plane + static_cast<std::size_t>(v) * width + u] =
              src[c * src_plane + static_cast<std::size_t>(top + v) * s.width + left + u];
        }
      }
    }
  };
  copy(s.image, out.image, 3);
  copy(s.seg, out.seg, 1);
  copy(s.depth, out.depth, 1);
  copy(s.normal, out.normal, 3);
  copy(s.mask, out.mask, 1);
  copy(s.instance, out.instance, 1);
  return out;
}

Tensor stack_images(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw UsageError("stack_images: empty batch");
  const int H = samples.front()->height, W = samples.front()->width;
  Tensor t({static_cast<int>(samples.size()), 3, H, W}, 0.0);
  const std::size_t len = 3 * static_cast<std::size_t>(H) * W;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy(samples[i]->image.begin(), samples[i]->image.end(), t.ptr() + i * len);
  }
  return t;
}

LabeledSet::LabeledSet(const SceneConfig& cfg, std::int64_t first, int count)
    : cfg_(cfg),
      first_(first),
      samples_(std::make_shared<std::vector<Sample>>()),
      reads_(std::make_shared<std::uint64_t>(0)) {
  validate(cfg);
  if (count < 0) throw ConfigError("negative sample count");
  samples_->reserve(count);
  for (int i = 0; i < count; ++i) samples_->push_back(generate(cfg, first + i));
}

LabeledSet::LabeledSet(const SceneConfig& cfg, std::int64_t first, std::vector<Sample> samples)
    : cfg_(cfg),
      first_(first),
      samples_(std::make_shared<std::vector<Sample>>(std::move(samples))),
      reads_(std::make_shared<std::uint64_t>(0)) {
  validate(cfg);
  for (const auto& s : *samples_) {
    if (s.height != cfg.height || s.width != cfg.width) {
      throw DimensionError("sample size does not match the scene configuration");
    }
  }
}

const Sample& LabeledSet::sample(int i) const {
  ++*reads_;
  return samples_->at(i);
}

Batch LabeledSet::batch(const std::vector<int>& indices) const {
  if (indices.empty()) throw UsageError("empty batch");
  const int n = static_cast<int>(indices.size());
  const int H = cfg_.height, W = cfg_.width;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Batch b;
  b.images = Tensor({n, 3, H, W}, 0.0);
  b.seg = LabelMap(n, H, W);
  b.depth = Tensor({n, 1, H, W}, 0.0);
  b.normal = Tensor({n, 3, H, W}, 0.0);
  b.mask = ValidMask(n, H, W);
  for (int k = 0; k < n; ++k) {
    const Sample& s = sample(indices[k]);
    std::copy(s.image.begin(), s.image.end(), b.images.ptr() + k * 3 * plane);
    std::copy(s.seg.begin(), s.seg.end(), b.seg.labels.begin() + k * plane);
    std::copy(s.depth.begin(), s.depth.end(), b.depth.ptr() + k * plane);
    std::copy(s.normal.begin(), s.normal.end(), b.normal.ptr() + k * 3 * plane);
    std::copy(s.mask.begin(), s.mask.end(), b.mask.valid.begin() + k * plane);
  }
  return b;
}

ImageSource::ImageSource(const LabeledSet& set)
    : height_(set.config().height), width_(set.config().width) {
  images_.reserve(set.size());
  for (int i = 0; i < set.size(); ++i) images_.push_back(set.image(i));
}

ImageSource::ImageSource(std::vector<std::vector<double>> images, int height, int width)
    : images_(std::move(images)), height_(height), width_(width) {
  const std::size_t len = 3 * static_cast<std::size_t>(height) * width;
  for (const auto& im : images_) {
    if (im.size() != len) throw DimensionError("ImageSource: image size mismatch");
  }
}

Tensor ImageSource::batch(const std::vector<int>& indices) const {
  if (indices.empty()) throw UsageError("empty batch");
  const std::size_t len = 3 * static_cast<std::size_t>(height_) * width_;
  Tensor t({static_cast<int>(indices.size()), 3, height_, width_}, 0.0);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& im = images_.at(indices[k]);
    std::copy(im.begin(), im.end(), t.ptr() + k * len);
  }
  return t;
}

Tensor ImageSource::all() const {
  std::vector<int> idx(images_.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  return batch(idx);
}

DataSplit split(const SceneConfig& scene, const SplitConfig& cfg) {
  if (cfg.train_count <= 0 || cfg.eval_count <= 0) {
    throw ConfigError("train and eval streams must be non-empty");
  }
  if (cfg.train_first < 0 || cfg.eval_first < 0) throw ConfigError("negative sample index");
  const auto a0 = cfg.train_first, a1 = cfg.train_first + cfg.train_count;
  const auto b0 = cfg.eval_first, b1 = cfg.eval_first + cfg.eval_count;
  if (a0 < b1 && b0 < a1) {
    throw ConfigError("train range [" + std::to_string(a0) + ", " + std::to_string(a1) +
                      ") overlaps eval range [" + std::to_string(b0) + ", " +
                      std::to_string(b1) + ")");
  }
  return {LabeledSet(scene, cfg.train_first, cfg.train_count),
          LabeledSet(scene, cfg.eval_first, cfg.eval_count)};
}

}  // namespace amalgam
