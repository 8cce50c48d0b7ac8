#include <cmath>
#include <numbers>
#include <set>

#include <gtest/gtest.h>

#include "amalgam/error.hpp"
#include "amalgam/scene.hpp"

namespace amalgam {
namespace {

SceneConfig small(std::uint64_t seed = 3) {
  SceneConfig c;
  c.seed = seed;
  return c;
}

TEST(Generate, Deterministic) {
  const Sample a = generate(small(), 17);
  const Sample b = generate(small(), 17);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(a == generate(small(), 18));
  EXPECT_FALSE(a == generate(small(4), 17));
}

TEST(Generate, FieldInvariants) {
  const SceneConfig cfg = small();
  for (int i = 0; i < 20; ++i) {
    const Sample s = generate(cfg, i);
    const std::size_t plane = 64 * 64;
    ASSERT_EQ(s.image.size(), 3 * plane);
    for (double v : s.image) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (std::size_t p = 0; p < plane; ++p) {
      EXPECT_LT(s.seg[p], cfg.classes);
      EXPECT_GE(s.depth[p], cfg.near);
      EXPECT_LE(s.depth[p], cfg.far);
      if (!s.mask[p]) continue;
      const double n = std::hypot(s.normal[p], s.normal[plane + p], s.normal[2 * plane + p]);
      EXPECT_NEAR(n, 1.0, 1e-9);
      EXPECT_LT(s.normal[2 * plane + p], 0.0);
    }
  }
}

TEST(Generate, EmptySceneIsBackgroundPlane) {
  SceneConfig cfg = small();
  cfg.min_primitives = 0;
  cfg.max_primitives = 0;
  const Sample s = generate(cfg, 5);
  const std::size_t plane = 64 * 64;
  for (std::size_t p = 0; p < plane; ++p) {
    EXPECT_EQ(s.seg[p], 0);
    EXPECT_EQ(s.mask[p], 1);
    for (int c = 0; c < 3; ++c) EXPECT_EQ(s.normal[c * plane + p], s.normal[c * plane]);
  }
  // Planar: depth is affine in the row and constant along it.
  for (int v = 0; v < 64; ++v) {
    for (int u = 1; u < 64; ++u) EXPECT_EQ(s.depth[v * 64 + u], s.depth[v * 64]);
  }
  const double step = s.depth[64] - s.depth[0];
  for (int v = 1; v < 64; ++v) EXPECT_NEAR(s.depth[v * 64] - s.depth[(v - 1) * 64], step, 1e-12);
}

TEST(Generate, NearestPrimitiveWins) {
  const SceneConfig cfg = small();
  const double ps = cfg.intrinsics.pixel_size;
  for (int index = 0; index < 25; ++index) {
    const SceneLayout scene = layout(cfg, index);
    const Sample s = generate(cfg, index);
    for (int v = 0; v < 64; ++v) {
      const double y = (v + 0.5 - 32) * ps;
      const double bg = cfg.far + (scene.z_bottom - cfg.far) * (y / (64 * ps) + 0.5);
      for (int u = 0; u < 64; ++u) {
        const double x = (u + 0.5 - 32) * ps;
        double best = bg;
        int cls = 0, inst = 0;
        for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
          const auto z = primitive_depth(scene.primitives[i], x, y);
          if (z && *z < best) {
            best = *z;
            cls = scene.primitives[i].cls;
            inst = static_cast<int>(i) + 1;
          }
        }
        const int p = v * 64 + u;
        ASSERT_EQ(s.seg[p], cls) << "sample " << index << " pixel " << u << "," << v;
        ASSERT_EQ(s.instance[p], inst);
        ASSERT_EQ(s.depth[p], std::clamp(best, cfg.near, cfg.far));
      }
    }
  }
}

TEST(Generate, PrimitiveCountInRange) {
  const SceneConfig cfg = small();
  for (int i = 0; i < 100; ++i) {
    const auto n = layout(cfg, i).primitives.size();
    EXPECT_GE(n, 2u);
    EXPECT_LE(n, 6u);
  }
}

TEST(Generate, AllClassesAppear) {
  const SceneConfig cfg = small(0);
  std::set<int> seen;
  for (int i = 0; i < 500; ++i) {
    for (auto l : generate(cfg, i).seg) seen.insert(l);
  }
  EXPECT_EQ(static_cast<int>(seen.size()), cfg.classes);
}

TEST(Generate, ClassKindsAndAlbedo) {
  EXPECT_EQ(class_kind(1), PrimitiveKind::kRectTiltX);
  EXPECT_EQ(class_kind(2), PrimitiveKind::kRectTiltY);
  EXPECT_EQ(class_kind(3), PrimitiveKind::kSphere);
  EXPECT_NE(class_albedo(1), class_albedo(4));
}

TEST(Generate, InvalidConfig) {
  SceneConfig c = small();
  c.near = 5;
  c.far = 4;
  EXPECT_THROW(generate(c, 0), ConfigError);
  EXPECT_THROW(validate(small(), 3), ConfigError);
  EXPECT_NO_THROW(validate(small(), 8));
}

TEST(NormalsFromDepth, FrontoParallelPlane) {
  const int H = 8, W = 9;
  std::vector<double> depth(H * W, 3.5);
  std::vector<std::uint8_t> mask(H * W, 1);
  const auto n = normals_from_depth(depth, H, W, mask, Intrinsics{});
  for (int v = 1; v + 1 < H; ++v) {
    for (int u = 1; u + 1 < W; ++u) {
      const int p = v * W + u;
      ASSERT_TRUE(mask[p]);
      EXPECT_NEAR(n[p], 0.0, 1e-15);
      EXPECT_NEAR(n[H * W + p], 0.0, 1e-15);
      EXPECT_NEAR(n[2 * H * W + p], -1.0, 1e-15);
    }
  }
}

TEST(NormalsFromDepth, RampMatchesPlaneNormal) {
  const int H = 10, W = 12;
  const Intrinsics k{0.1};
  const double a = 0.7, c = 4.0;
  std::vector<double> depth(H * W);
  for (int v = 0; v < H; ++v) {
    for (int u = 0; u < W; ++u) depth[v * W + u] = a * (u + 0.5 - W / 2.0) * k.pixel_size + c;
  }
  std::vector<std::uint8_t> mask(H * W, 1);
  const auto n = normals_from_depth(depth, H, W, mask, k);
  const double len = std::sqrt(a * a + 1.0);
  for (int v = 1; v + 1 < H; ++v) {
    for (int u = 1; u + 1 < W; ++u) {
      const int p = v * W + u;
      EXPECT_NEAR(n[p], a / len, 1e-6);
      EXPECT_NEAR(n[H * W + p], 0.0, 1e-6);
      EXPECT_NEAR(n[2 * H * W + p], -1.0 / len, 1e-6);
    }
  }
}

TEST(NormalsFromDepth, BorderAndHolesInvalid) {
  const int H = 6, W = 6;
  std::vector<double> depth(H * W, 2.0);
  std::vector<std::uint8_t> mask(H * W, 1);
  mask[3 * W + 3] = 0;
  normals_from_depth(depth, H, W, mask, Intrinsics{});
  for (int i = 0; i < W; ++i) {
    EXPECT_FALSE(mask[i]);
    EXPECT_FALSE(mask[(H - 1) * W + i]);
    EXPECT_FALSE(mask[i * W]);
    EXPECT_FALSE(mask[i * W + W - 1]);
  }
  EXPECT_FALSE(mask[3 * W + 3]);
  EXPECT_FALSE(mask[2 * W + 3]);
  EXPECT_FALSE(mask[3 * W + 4]);
  EXPECT_TRUE(mask[1 * W + 1]);
}

TEST(NormalsFromDepth, AgreesWithAnalyticNormals) {
  const SceneConfig cfg = small();
  double sum = 0.0;
  std::size_t count = 0;
  for (int i = 0; i < 20; ++i) {
    const Sample s = generate(cfg, i);
    std::vector<std::uint8_t> mask = s.mask;
    // Interior pixels only: all neighbours on the same primitive.
    for (int v = 1; v < 63; ++v) {
      for (int u = 1; u < 63; ++u) {
        const int p = v * 64 + u;
        for (int q : {p - 1, p + 1, p - 64, p + 64}) {
          if (s.instance[q] != s.instance[p]) mask[p] = 0;
        }
      }
    }
    const auto n = normals_from_depth(s.depth, 64, 64, mask, cfg.intrinsics);
    const std::size_t plane = 64 * 64;
    for (std::size_t p = 0; p < plane; ++p) {
      if (!mask[p]) continue;
      double dot = 0;
      for (int c = 0; c < 3; ++c) dot += n[c * plane + p] * s.normal[c * plane + p];
      sum += std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / std::numbers::pi;
      ++count;
    }
  }
  ASSERT_GT(count, 10000u);
  EXPECT_LT(sum / count, 2.0);
}

TEST(Crop, Window) {
  const Sample s = generate(small(), 2);
  const Sample c = crop(s, 8, 16, 32, 32);
  EXPECT_EQ(c.height, 32);
  EXPECT_EQ(c.width, 32);
  EXPECT_EQ(c.seg[0], s.seg[8 * 64 + 16]);
  EXPECT_EQ(c.depth[31 * 32 + 31], s.depth[39 * 64 + 47]);
  EXPECT_EQ(c.image[2 * 32 * 32 + 5], s.image[2 * 64 * 64 + 8 * 64 + 21]);
  EXPECT_THROW(crop(s, 40, 0, 32, 32), Error);
}

TEST(Split, DisjointAndDeterministic) {
  const SplitConfig cfg{0, 10, 10, 5};
  const DataSplit a = split(small(), cfg);
  const DataSplit b = split(small(), cfg);
  EXPECT_EQ(a.train.first_index() + a.train.size(), a.eval.first_index());
  for (int i = 0; i < 10; ++i) EXPECT_EQ(a.train.image(i), b.train.image(i));
  EXPECT_EQ(a.eval.sample(0), generate(small(), 10));
  EXPECT_THROW(split(small(), SplitConfig{0, 10, 5, 5}), ConfigError);
  EXPECT_THROW(split(small(), SplitConfig{0, 0, 5, 5}), ConfigError);
}

template <typename T>
concept HasSampleAccessor = requires(const T& t) { t.sample(0); };
template <typename T>
concept HasBatchLabels = requires(const T& t) { t.batch(std::vector<int>{0}).seg; };

TEST(Split, ImagesOnlyView) {
  static_assert(!HasSampleAccessor<ImageSource>);
  static_assert(!HasBatchLabels<ImageSource>);
  static_assert(HasSampleAccessor<LabeledSet>);

  const DataSplit d = split(small(), SplitConfig{0, 6, 6, 2});
  const ImageSource view(d.train);
  EXPECT_EQ(d.train.gt_reads(), 0u);
  const Tensor x = view.batch({0, 5});
  EXPECT_EQ(x.shape(), (Shape{2, 3, 64, 64}));
  EXPECT_EQ(d.train.gt_reads(), 0u);
  d.train.sample(1);
  d.train.batch({2, 3});
  EXPECT_EQ(d.train.gt_reads(), 3u);
}

TEST(Batch, StacksFields) {
  const DataSplit d = split(small(), SplitConfig{0, 4, 4, 1});
  const Batch b = d.train.batch({1, 3});
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 64, 64}));
  EXPECT_EQ(b.depth.shape(), (Shape{2, 1, 64, 64}));
  EXPECT_EQ(b.normal.shape(), (Shape{2, 3, 64, 64}));
  const Sample& s = d.train.sample(3);
  EXPECT_EQ(b.seg.at(1, 10, 20), s.seg[10 * 64 + 20]);
  EXPECT_EQ(b.depth.at(1, 0, 10, 20), s.depth[10 * 64 + 20]);
  EXPECT_EQ(b.mask.at(1, 10, 20), s.mask[10 * 64 + 20] != 0);
}

}  // namespace
}  // namespace amalgam
