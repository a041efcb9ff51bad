#include "screenreg/stitch.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

using namespace screenreg;
using screenreg::testing::psnr;

namespace {

/// Smooth non-periodic texture: a sum of random Gaussian blobs.
struct BlobField {
  struct Blob {
    Vec2 c;
    double sigma;
    Vec3 amp;
  };
  std::vector<Blob> blobs;

  BlobField(std::uint64_t seed, double extent, int count, double smin, double smax) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pos(-20.0, extent), sig(smin, smax), amp(0.1, 0.5);
    for (int k = 0; k < count; ++k) blobs.push_back({Vec2(pos(rng), pos(rng)), sig(rng), Vec3(amp(rng), amp(rng), amp(rng))});
  }
  Vec3 at(double x, double y) const {
    Vec3 v = Vec3::Constant(0.1);
    for (const auto& b : blobs) v += b.amp * std::exp(-0.5 * (Vec2(x, y) - b.c).squaredNorm() / (b.sigma * b.sigma));
    return v;
  }
  LinearImage render(int w, int h, Vec2 origin = Vec2::Zero()) const {
    LinearImage img(w, h, 3);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const Vec3 v = at(origin.x() + x, origin.y() + y);
        for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<float>(v[c]);
      }
    return img;
  }
};

LinearImage crop(const LinearImage& src, int x0, int y0, int w, int h) {
  LinearImage out(w, h, src.channels());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < src.channels(); ++c) out.at(x, y, c) = src.at(x0 + x, y0 + y, c);
  return out;
}

RenderedTile flat_tile(int x0, int y0, int w, int h, float v, float a) {
  RenderedTile t;
  t.x0 = x0;
  t.y0 = y0;
  t.image = LinearImage(w, h, 3, v);
  t.alpha = LinearImage(w, h, 1, a);
  return t;
}

}  // namespace

TEST(MatchPair, IntegerOffsetExact) {
  const LinearImage big = BlobField(1, 400, 400, 3, 9).render(400, 400);
  const LinearImage a = crop(big, 50, 80, 240, 240);
  const LinearImage b = crop(big, 50 + 37, 80 - 12, 240, 240);
  const MatchResult r = match_pair(a, b);
  EXPECT_LT((r.offset - Vec2(37, -12)).norm(), 0.05);
  EXPECT_GT(r.score, 0.99);
  EXPECT_GE(r.points.size(), 8u);
  for (const auto& p : r.points) EXPECT_LT((p.a - p.b - Vec2(37, -12)).norm(), 0.2);
}

TEST(MatchPair, FractionalOffsetFromAnalyticTexture) {
  const BlobField f(2, 300, 300, 4, 10);
  const LinearImage a = f.render(220, 220);
  const LinearImage b = f.render(220, 220, Vec2(20.4, 5.7));
  const MatchResult r = match_pair(a, b);
  EXPECT_LT((r.offset - Vec2(20.4, 5.7)).norm(), 0.2);
}

TEST(MatchPair, HintRestrictsSearch) {
  const LinearImage big = BlobField(3, 400, 400, 3, 9).render(400, 400);
  const LinearImage a = crop(big, 40, 40, 240, 240);
  const LinearImage b = crop(big, 40 + 60, 40 + 5, 240, 240);
  const MatchResult r = match_pair(a, b, Vec2(58, 3), 10);
  EXPECT_LT((r.offset - Vec2(60, 5)).norm(), 0.05);
}

TEST(MatchPair, FeaturelessOverlapFails) {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0.0f, 1e-5f);
  LinearImage a(200, 200, 3, 0.5f), b(200, 200, 3, 0.5f);
  for (auto& v : a.data()) v += n(rng);
  for (auto& v : b.data()) v += n(rng);
  try {
    match_pair(a, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MatchFailure);
  }
}

TEST(MatchPair, MaskedPixelsIgnored) {
  const LinearImage big = BlobField(5, 400, 400, 3, 9).render(400, 400);
  LinearImage a = crop(big, 60, 60, 240, 240);
  const LinearImage b = crop(big, 60 + 30, 60 + 20, 240, 240);
  std::vector<std::uint8_t> va(240 * 240, 1);
  // Corrupt a band of a and mask it out.
  for (int y = 0; y < 240; ++y)
    for (int x = 200; x < 240; ++x) {
      for (int c = 0; c < 3; ++c) a.at(x, y, c) = 0.0f;
      va[static_cast<std::size_t>(y) * 240 + x] = 0;
    }
  const MatchResult r = match_pair(a, b, std::nullopt, 0, {}, &va, nullptr);
  EXPECT_LT((r.offset - Vec2(30, 20)).norm(), 0.05);
  for (const auto& p : r.points) EXPECT_LT(p.a.x(), 200.0);
}

TEST(MapPointsToScan, IdentityMeshes) {
  const MeshTransform m = MeshTransform::uniform(Homography(), {0, 0}, {50, 50}, 2, 2);
  const ControlPointSet cps = map_points_to_scan({{Vec2(3, 4), Vec2(13, 4)}}, 0, 1, m, m);
  ASSERT_EQ(cps.size(), 1u);
  EXPECT_LT((cps[0].scan_a - Vec2(3, 4)).norm(), 1e-9);
  EXPECT_LT((cps[0].scan_b - Vec2(13, 4)).norm(), 1e-9);
  EXPECT_EQ(cps[0].tile_b, 1);
}

TEST(MapPointsToScan, OutOfDomainThrows) {
  const MeshTransform m = MeshTransform::uniform(Homography(), {0, 0}, {50, 50}, 2, 2);
  EXPECT_THROW(map_points_to_scan({{Vec2(3, 4), Vec2(80, 4)}}, 0, 1, m, m), Error);
}

TEST(SolveLayout, Chain) {
  const LayoutResult r = solve_layout(3, {{0, 1, Vec2(10, 0)}, {1, 2, Vec2(10, 1)}});
  EXPECT_LT((r.offsets[1] - Vec2(10, 0)).norm(), 1e-9);
  EXPECT_LT((r.offsets[2] - Vec2(20, 1)).norm(), 1e-9);
  EXPECT_EQ(r.components, 1);
}

TEST(SolveLayout, ConsistentLoopHasZeroResidual) {
  const LayoutResult r = solve_layout(3, {{0, 1, Vec2(10, 0)}, {1, 2, Vec2(0, 10)}, {0, 2, Vec2(10, 10)}});
  for (double e : r.edge_residuals) EXPECT_LT(e, 1e-9);
}

TEST(SolveLayout, InconsistentLoopSpreadsError) {
  const LayoutResult r = solve_layout(3, {{0, 1, Vec2(10, 0)}, {1, 2, Vec2(0, 10)}, {0, 2, Vec2(10.3, 10)}});
  // Least squares distributes the 0.3 misclosure equally over the three edges.
  for (double e : r.edge_residuals) EXPECT_NEAR(e, 0.1, 1e-9);
}

TEST(SolveLayout, SnapsNearIntegers) {
  const LayoutResult r = solve_layout(2, {{0, 1, Vec2(70.1, -0.9)}}, 0.25);
  EXPECT_EQ(r.offsets[1], Vec2(70, -1));
}

TEST(SolveLayout, DisconnectedWarns) {
  const LayoutResult r = solve_layout(4, {{0, 1, Vec2(1, 0)}, {2, 3, Vec2(0, 1)}});
  EXPECT_EQ(r.components, 2);
  EXPECT_FALSE(r.warnings.empty());
  EXPECT_EQ(r.offsets[2], Vec2(0, 0));
  EXPECT_THROW(solve_layout(2, {{0, 5, Vec2(1, 0)}}), Error);
}

TEST(EstimateGains, IdenticalTilesUnitGains) {
  const LinearImage img = BlobField(6, 100, 30, 3, 8).render(100, 100);
  const GainResult g = estimate_gains({{&img, Vec2(0, 0)}, {&img, Vec2(0, 0)}});
  EXPECT_LT((g.gains[1] - Vec3::Ones()).norm(), 1e-9);
}

TEST(EstimateGains, ScaledTileRecovered) {
  const LinearImage a = BlobField(7, 200, 60, 3, 8).render(120, 100);
  LinearImage b = crop(a, 40, 0, 80, 100);
  for (auto& v : b.data()) v *= 1.2f;
  const GainResult g = estimate_gains({{&a, Vec2(0, 0)}, {&b, Vec2(40, 0)}});
  EXPECT_EQ(g.gains[0], Vec3::Ones());
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(1.0 / g.gains[1][c], 1.2, 0.01);
}

TEST(EstimateGains, ThreeTilesWithinOnePercent) {
  const LinearImage base = BlobField(8, 200, 80, 3, 8).render(200, 80);
  const double truth[3] = {1.0, 1.1, 0.9};
  std::vector<LinearImage> tiles;
  for (int k = 0; k < 3; ++k) {
    LinearImage t = crop(base, 50 * k, 0, 100, 80);
    for (auto& v : t.data()) v *= static_cast<float>(truth[k]);
    tiles.push_back(std::move(t));
  }
  const GainResult g = estimate_gains({{&tiles[0], Vec2(0, 0)}, {&tiles[1], Vec2(50, 0)}, {&tiles[2], Vec2(100, 0)}});
  for (int k = 0; k < 3; ++k)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(g.gains[static_cast<std::size_t>(k)][c] * truth[k], 1.0, 0.01);
}

TEST(EstimateGains, NoOverlapWarns) {
  const LinearImage a(10, 10, 3, 0.5f);
  const GainResult g = estimate_gains({{&a, Vec2(0, 0)}, {&a, Vec2(100, 0)}});
  EXPECT_FALSE(g.warnings.empty());
  EXPECT_EQ(g.gains[1], Vec3::Ones());
}

TEST(RenderTile, IdentityMeshResamplesAtHigherResolution) {
  const BlobField f(9, 120, 40, 6, 12);
  const LinearImage img = f.render(120, 120);
  const MeshTransform mesh = MeshTransform::uniform(Homography(), {0, 0}, {119, 119}, 2, 2);
  CanvasSpec canvas;
  canvas.px_per_lattice = 2;
  canvas.width = 240;
  canvas.height = 240;
  const RenderedTile t = render_tile(img, mesh, Vec2::Zero(), Vec3::Ones(), canvas, {8.0, 1});
  double sum = 0;
  std::size_t n = 0;
  for (int y = 20; y < 200; ++y)
    for (int x = 20; x < 200; ++x) {
      const int cx = t.x0 + x, cy = t.y0 + y;
      const Vec3 want = f.at(cx / 2.0, cy / 2.0);
      for (int c = 0; c < 3; ++c) {
        const double e = t.image.at(x, y, c) - want[c];
        sum += e * e;
        ++n;
      }
      EXPECT_EQ(t.alpha.at(x, y), 1.0f);
    }
  EXPECT_GE(psnr(sum / static_cast<double>(n)), 50.0);
}

TEST(RenderTile, GainScalesChannels) {
  const LinearImage img(40, 40, 3, 0.3f);
  const MeshTransform mesh = MeshTransform::uniform(Homography(), {0, 0}, {39, 39}, 2, 2);
  CanvasSpec canvas;
  canvas.px_per_lattice = 1;
  canvas.width = 40;
  canvas.height = 40;
  const RenderedTile t = render_tile(img, mesh, Vec2::Zero(), Vec3(2, 1, 1), canvas, {4.0, 1});
  EXPECT_NEAR(t.image.at(20, 20, 0), 0.6f, 1e-6);
  EXPECT_NEAR(t.image.at(20, 20, 1), 0.3f, 1e-6);
}

TEST(RenderTile, AlphaFeathersToEdge) {
  const LinearImage img(60, 60, 3, 0.3f);
  const MeshTransform mesh = MeshTransform::uniform(Homography(), {0, 0}, {59, 59}, 2, 2);
  CanvasSpec canvas;
  canvas.px_per_lattice = 1;
  canvas.width = 60;
  canvas.height = 60;
  const RenderedTile t = render_tile(img, mesh, Vec2::Zero(), Vec3::Ones(), canvas, {10.0, 1});
  EXPECT_EQ(t.alpha.at(30, 30), 1.0f);
  EXPECT_GT(t.alpha.at(5, 30), 0.0f);
  EXPECT_LT(t.alpha.at(5, 30), 1.0f);
  EXPECT_LT(t.alpha.at(2, 30), t.alpha.at(5, 30));
}

TEST(Blend, SingleTilePassesThrough) {
  RenderedTile t = flat_tile(2, 3, 5, 4, 0.0f, 0.4f);
  for (std::size_t k = 0; k < t.image.data().size(); ++k) t.image.data()[k] = 0.01f * static_cast<float>(k);
  const BlendResult r = blend({t}, 10, 10);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x)
      for (int c = 0; c < 3; ++c) EXPECT_EQ(r.image.at(x + 2, y + 3, c), t.image.at(x, y, c));
  EXPECT_EQ(r.coverage.at(0, 0), 0.0f);
}

TEST(Blend, IdenticalOverlapEqualsInput) {
  const BlendResult r = blend({flat_tile(0, 0, 6, 6, 0.7f, 0.3f), flat_tile(3, 0, 6, 6, 0.7f, 0.9f)}, 9, 6);
  for (int x = 0; x < 9; ++x) EXPECT_EQ(r.image.at(x, 2, 1), 0.7f);
}

TEST(Blend, WeightedAverageInOverlap) {
  const BlendResult r = blend({flat_tile(0, 0, 4, 4, 1.0f, 0.25f), flat_tile(0, 0, 4, 4, 0.0f, 0.75f)}, 4, 4);
  EXPECT_NEAR(r.image.at(1, 1, 0), 0.25f, 1e-7);
  EXPECT_NEAR(r.coverage.at(1, 1), 1.0f, 1e-7);
}

TEST(Blend, TileOrderDoesNotMatter) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<RenderedTile> tiles;
  for (int k = 0; k < 4; ++k) {
    RenderedTile t = flat_tile(k * 3, k * 2, 10, 10, 0.0f, 0.0f);
    for (auto& v : t.image.data()) v = u(rng);
    for (auto& v : t.alpha.data()) v = u(rng);
    tiles.push_back(t);
  }
  const BlendResult a = blend(tiles, 25, 20);
  std::reverse(tiles.begin(), tiles.end());
  std::swap(tiles[0], tiles[2]);
  const BlendResult b = blend(tiles, 25, 20);
  EXPECT_EQ(a.image.data(), b.image.data());
  EXPECT_EQ(a.coverage.data(), b.coverage.data());
}
