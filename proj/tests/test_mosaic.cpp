#include "screenreg/mosaic.hpp"
#include "screenreg/synth.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace screenreg;
using screenreg::testing::clean_scene;
using screenreg::testing::psnr;

namespace {

struct Fitted {
  SynthResult truth;
  TileAnalysis analysis;
  MeshTransform mesh;
};

Fitted fit_scene(const SynthScene& s) {
  Fitted f{synth_scan(s), {}, {}};
  f.analysis = analyze_tile(f.truth.image, s.spec);
  MeshFitParams mp;
  mp.mesh.nx = 20;
  mp.mesh.ny = 20;
  f.mesh = fit_screen_mesh(f.analysis.grid, s.spec, mp);
  return f;
}

/// Mosaic filled straight from an intensity pattern.
MosaicImage oracle_mosaic(const IntensityPattern& pat, LatticeRect b, const ScreenSpec& spec) {
  MosaicImage m(b, static_cast<int>(spec.site_count()));
  for (int j = b.v0; j < b.v0 + b.height; ++j)
    for (int i = b.u0; i < b.u0 + b.width; ++i)
      for (std::size_t s = 0; s < spec.site_count(); ++s)
        m.set(i, j, static_cast<int>(s),
              static_cast<float>(pat.at(Vec2(i, j) + spec.site(s).offset, spec.site(s).color, {i, j})));
  return m;
}

}  // namespace

TEST(Collect, UniformIntensity) {
  SynthScene s = clean_scene(300, 300, 3.0);
  s.pattern.value = 0.8;
  const Fitted f = fit_scene(s);
  const MosaicImage m = collect(f.truth.image, f.analysis.profile, f.mesh, f.analysis.grid, s.spec);
  ASSERT_GT(m.valid_count(), 1000u);
  const auto& b = m.bounds();
  for (int j = b.v0; j < b.v0 + b.height; ++j)
    for (int i = b.u0; i < b.u0 + b.width; ++i)
      for (int k = 0; k < 3; ++k)
        if (m.valid(i, j, k)) EXPECT_NEAR(m.value(i, j, k), 0.8, 0.02) << i << "," << j << "," << k;
}

TEST(Collect, RandomIntensityMatchesOracle) {
  SynthScene s = clean_scene(300, 300, 3.0);
  s.pattern.kind = PatternKind::Random;
  s.pattern.low = 0.2;
  s.pattern.high = 0.9;
  const Fitted f = fit_scene(s);
  const MosaicImage m = collect(f.truth.image, f.analysis.profile, f.mesh, f.analysis.grid, s.spec);
  const GridComparison c = compare_grids(f.analysis.grid, f.truth.truth);
  ASSERT_TRUE(c.aligned);
  const MosaicImage& t = f.truth.truth_mosaic;
  double sum = 0;
  std::size_t n = 0;
  const auto& b = m.bounds();
  for (int j = b.v0; j < b.v0 + b.height; ++j)
    for (int i = b.u0; i < b.u0 + b.width; ++i)
      for (int k = 0; k < 3; ++k) {
        const int ti = i + c.shift.i, tj = j + c.shift.j;
        if (!m.valid(i, j, k) || !t.bounds().contains(ti, tj) || !t.valid(ti, tj, k)) continue;
        const double d = m.value(i, j, k) - t.value(ti, tj, k);
        sum += d * d;
        ++n;
      }
  ASSERT_GT(n, 1000u);
  EXPECT_LT(std::sqrt(sum / static_cast<double>(n)), 0.03);
}

TEST(Collect, InvalidSiteStaysInvalid) {
  SynthScene s = clean_scene(200, 200);
  const Fitted f = fit_scene(s);
  PatchGrid pg = f.analysis.grid;
  const auto& b = pg.bounds();
  const int i = b.u0 + b.width / 2, j = b.v0 + b.height / 2;
  ASSERT_TRUE(pg.at(i, j, 0).valid);
  pg.at(i, j, 0).valid = false;
  const MosaicImage m = collect(f.truth.image, f.analysis.profile, f.mesh, pg, s.spec);
  EXPECT_FALSE(m.valid(i, j, 0));
  EXPECT_EQ(m.value(i, j, 0), 0.0f);
  EXPECT_TRUE(m.valid(i, j, 1));
}

TEST(MosaicImage, ClearDropsIntensity) {
  MosaicImage m({0, 0, 2, 2}, 3);
  m.set(1, 1, 2, 0.5f);
  EXPECT_TRUE(m.valid(1, 1, 2));
  m.clear(1, 1, 2);
  EXPECT_FALSE(m.valid(1, 1, 2));
  EXPECT_EQ(m.value(1, 1, 2), 0.0f);
}

TEST(Demosaic, UniformMosaicGivesUniformGray) {
  IntensityPattern pat;
  pat.value = 0.6;
  const MosaicImage m = oracle_mosaic(pat, {-5, 3, 12, 9}, presets::dufay());
  for (const auto mode : {DemosaicMode::SiteGrid, DemosaicMode::Cell}) {
    DemosaicParams dp;
    dp.mode = mode;
    const DemosaicResult d = demosaic(m, presets::dufay(), dp);
    EXPECT_EQ(d.rgb.width(), 12 * static_cast<int>(demosaic_scale(mode)));
    for (float v : d.rgb.data()) EXPECT_NEAR(v, 0.6f, 1e-6);
  }
}

TEST(Demosaic, SmoothPatternPsnr) {
  IntensityPattern pat;
  pat.kind = PatternKind::Smooth;
  pat.low = 0.1;
  pat.high = 0.9;
  pat.seed = 3;
  const ScreenSpec spec = presets::dufay();
  const LatticeRect b{0, 0, 120, 120};
  const DemosaicResult d = demosaic(oracle_mosaic(pat, b, spec), spec);
  const Vec2 origin = demosaic_origin(b, DemosaicMode::SiteGrid);
  double sum = 0;
  std::size_t n = 0;
  for (int y = 4; y < d.rgb.height() - 4; ++y)
    for (int x = 4; x < d.rgb.width() - 4; ++x) {
      const Vec3 want = pat.rgb(origin + Vec2(x, y) / 2.0);
      for (int c = 0; c < 3; ++c) {
        const double e = d.rgb.at(x, y, c) - want[c];
        sum += e * e;
        ++n;
      }
    }
  EXPECT_GE(psnr(sum / static_cast<double>(n)), 35.0);
}

TEST(Demosaic, MissingSiteFilledWithinNeighborRange) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(0.2f, 0.6f);
  MosaicImage m({0, 0, 10, 10}, 3);
  for (int j = 0; j < 10; ++j)
    for (int i = 0; i < 10; ++i)
      for (int s = 0; s < 3; ++s) m.set(i, j, s, u(rng));
  m.clear(5, 5, 0);  // green at (5, 5)
  float lo = 1, hi = 0;
  for (int j = 3; j <= 7; ++j)
    for (int i = 3; i <= 7; ++i)
      if (m.valid(i, j, 0)) {
        lo = std::min(lo, m.value(i, j, 0));
        hi = std::max(hi, m.value(i, j, 0));
      }
  const DemosaicResult d = demosaic(m, presets::dufay());
  const float g = d.rgb.at(10, 10, 1);
  EXPECT_GE(g, lo);
  EXPECT_LE(g, hi);
  EXPECT_TRUE(d.valid[10 * d.rgb.width() + 10]);
  EXPECT_GT(d.filled, 0u);
}

TEST(Demosaic, EmptyNeighborhoodFlaggedInvalid) {
  MosaicImage m({0, 0, 12, 12}, 3);
  for (int j = 0; j < 12; ++j)
    for (int i = 0; i < 12; ++i)
      for (int s = 0; s < 3; ++s)
        if (i < 3) m.set(i, j, s, 0.5f);
  const DemosaicResult d = demosaic(m, presets::dufay());
  EXPECT_FALSE(d.valid[12 * d.rgb.width() + 22]);
  EXPECT_TRUE(d.valid[12 * d.rgb.width() + 2]);
}

TEST(ColorRender, IdentityHalfScale) {
  LinearImage img(1, 1, 3, 0.5f);
  const RenderResult r = color_render(img, {});
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(r.image.data[c], 0.5 * 65535, 1.0);
}

TEST(ColorRender, GainClips) {
  LinearImage img(1, 1, 3, 0.6f);
  RenderParams p;
  p.gain = 2;
  p.depth = SampleDepth::U8;
  const RenderResult r = color_render(img, p);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(r.image.data[c], 255);
}

TEST(ColorRender, MatrixColumnsOnUnitPrimaries) {
  RenderParams p;
  p.matrix << 0.7, 0.2, 0.1,
              0.1, 0.6, 0.3,
              0.05, 0.15, 0.8;
  LinearImage img(3, 1, 3);
  for (int k = 0; k < 3; ++k) img.at(k, 0, k) = 1.0f;
  const RenderResult r = color_render(img, p);
  for (int k = 0; k < 3; ++k)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(r.image.data[3 * k + c] / 65535.0, p.matrix(c, k), 1e-4);
}

TEST(ColorRender, GammaEncodes) {
  LinearImage img(1, 1, 3, 0.25f);
  RenderParams p;
  p.gamma = 2.0;
  EXPECT_NEAR(color_render(img, p).image.data[0] / 65535.0, 0.5, 1e-4);
}

TEST(ColorRender, AutoBrightenPlacesP99) {
  LinearImage img(100, 10, 3);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 100; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = 0.002f * static_cast<float>(x * 10 + y);
  RenderParams p;
  p.auto_brighten = true;
  const RenderResult r = color_render(img, p);
  std::vector<double> lum;
  for (std::size_t k = 0; k < img.pixel_count(); ++k) lum.push_back(img.data()[3 * k] * r.gain_used);
  std::sort(lum.begin(), lum.end());
  EXPECT_NEAR(lum[static_cast<std::size_t>(0.99 * (lum.size() - 1) + 0.5)], 0.9, 0.01);
}

TEST(ColorRender, SingularMatrixRejected) {
  RenderParams p;
  p.matrix = Mat3::Zero();
  EXPECT_THROW(color_render(LinearImage(1, 1, 3), p), Error);
}

TEST(RenderParams, JsonRoundTrip) {
  RenderParams p;
  p.matrix = nominal_dufay_render_matrix();
  p.gamma = 2.2;
  p.gain = 1.5;
  p.depth = SampleDepth::U8;
  const RenderParams q = RenderParams::from_json(p.to_json());
  EXPECT_EQ(q.matrix, p.matrix);
  EXPECT_EQ(q.gamma, p.gamma);
  EXPECT_EQ(q.gain, p.gain);
  EXPECT_EQ(q.depth, p.depth);
  EXPECT_THROW(RenderParams::from_json(R"({"bits": 12})"), Error);
}
