#include "screenreg/analysis.hpp"
#include "screenreg/synth.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <numbers>

using namespace screenreg;
using screenreg::testing::angle_between;
using screenreg::testing::clean_scene;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::InvalidArgument;
}

Vec2 truth_a1(double angle_deg, double pitch) {
  const double a = angle_deg * std::numbers::pi / 180.0;
  return pitch * Vec2(std::cos(a), std::sin(a));
}

Vec2 center_of(const LinearImage& img) { return {(img.width() - 1) / 2.0, (img.height() - 1) / 2.0}; }

}  // namespace

class SeedAngles : public ::testing::TestWithParam<double> {};

TEST_P(SeedAngles, SeedMatchesTruthBasis) {
  const double angle = GetParam();
  const SynthResult r = synth_scan(clean_scene(300, 300, angle));
  const ClassMap cm = classify(r.image);
  const LocalFrame f = find_seed(cm, presets::dufay(), center_of(r.image));
  const Vec2 a1 = truth_a1(angle, 10);
  EXPECT_LT(angle_between(f.a1, a1), 3.0);
  EXPECT_LT(std::abs(f.a1.norm() / a1.norm() - 1.0), 0.05);
}

INSTANTIATE_TEST_SUITE_P(Rotations, SeedAngles, ::testing::Values(0.0, 7.5, 30.0, -20.0));

TEST(FindSeed, AllNoneIsNoSeed) {
  ClassMap cm{200, 200, std::vector<Label>(200 * 200, Label::None)};
  EXPECT_EQ(kind_of([&] { find_seed(cm, presets::dufay(), {100, 100}); }), ErrorKind::NoSeed);
}

TEST(FindSeed, StartOutsideImage) {
  ClassMap cm{20, 20, std::vector<Label>(400, Label::None)};
  EXPECT_EQ(kind_of([&] { find_seed(cm, presets::dufay(), {50, 5}); }), ErrorKind::InvalidArgument);
}

TEST(RefineSeedGrid, ScaleErrorShrinks) {
  const SynthResult r = synth_scan(clean_scene(300, 300, 5.0));
  const ClassMap cm = classify(r.image);
  LocalFrame f = find_seed(cm, presets::dufay(), center_of(r.image));
  f.a1 *= 1.04;
  f.a2 *= 1.04;
  const LocalFrame g = refine_seed_grid(cm, presets::dufay(), f);
  const Vec2 a1 = truth_a1(5.0, 10);
  EXPECT_LT(std::abs(g.a1.norm() / a1.norm() - 1.0), 0.005);
  EXPECT_LT(angle_between(g.a1, a1), 0.3);
}

TEST(RefineSeedGrid, FixedPointOnExactFrame) {
  const SynthResult r = synth_scan(clean_scene(300, 300));
  const ClassMap cm = classify(r.image);
  const LocalFrame f = refine_seed_grid(cm, presets::dufay(), find_seed(cm, presets::dufay(), center_of(r.image)));
  const LocalFrame g = refine_seed_grid(cm, presets::dufay(), f);
  EXPECT_LT((g.origin - f.origin).norm(), 0.05);
  EXPECT_LT((g.a1 - f.a1).norm(), 0.05);
  EXPECT_LT((g.a2 - f.a2).norm(), 0.05);
}

TEST(RefineSeedGrid, BlankImageFails) {
  ClassMap cm{200, 200, std::vector<Label>(200 * 200, Label::None)};
  LocalFrame f;
  f.origin = {100, 100};
  EXPECT_EQ(kind_of([&] { refine_seed_grid(cm, presets::dufay(), f); }), ErrorKind::RefineFailure);
}

TEST(FloodFill, CleanScanCoverageAndAccuracy) {
  const SynthResult r = synth_scan(clean_scene(400, 400, 10.0));
  const ClassMap cm = classify(r.image);
  const LocalFrame f = refine_seed_grid(cm, presets::dufay(), find_seed(cm, presets::dufay(), center_of(r.image)));
  const PatchGrid pg = flood_fill(cm, presets::dufay(), f);
  const GridComparison c = compare_grids(pg, r.truth);
  ASSERT_TRUE(c.aligned);
  EXPECT_GE(c.coverage, 0.99);
  EXPECT_LT(c.max_error_px, 0.15 * 10);
  EXPECT_EQ(c.index_mismatches, 0u);
}

TEST(FloodFill, MaskedRegionHasNoValidSites) {
  SynthScene s = clean_scene(400, 400, 4.0);
  MaskRegion m;
  m.x = 260;
  m.y = 60;
  m.width = 120;
  m.height = 133;  // 10% of the image
  s.masks.push_back(m);
  const SynthResult r = synth_scan(s);
  const ClassMap cm = classify(r.image);
  const LocalFrame f = refine_seed_grid(cm, presets::dufay(), find_seed(cm, presets::dufay(), {100, 300}));
  const PatchGrid pg = flood_fill(cm, presets::dufay(), f);
  const GridComparison c = compare_grids(pg, r.truth);
  EXPECT_GE(c.coverage, 0.85);
  // Patches straddling the mask edge may still be measured; half a cell in is fully masked.
  MaskRegion interior = m;
  interior.x += 5;
  interior.y += 5;
  interior.width -= 10;
  interior.height -= 10;
  std::size_t inside = 0;
  for (const auto& rec : pg.records())
    if (rec.valid && interior.contains(rec.center)) ++inside;
  EXPECT_EQ(inside, 0u);
}

TEST(FloodFill, Deterministic) {
  const SynthResult r = synth_scan(clean_scene(250, 250, 3.0));
  const ClassMap cm = classify(r.image);
  const LocalFrame f = find_seed(cm, presets::dufay(), center_of(r.image));
  const PatchGrid a = flood_fill(cm, presets::dufay(), f), b = flood_fill(cm, presets::dufay(), f);
  ASSERT_EQ(a.records().size(), b.records().size());
  for (std::size_t k = 0; k < a.records().size(); ++k) {
    EXPECT_EQ(a.records()[k].valid, b.records()[k].valid);
    EXPECT_EQ(a.records()[k].center, b.records()[k].center);
  }
}

TEST(AnalyzeTile, CleanTileSucceedsOnFirstAttempt) {
  const SynthResult r = synth_scan(clean_scene(300, 300, 2.0));
  const TileAnalysis a = analyze_tile(r.image, presets::dufay());
  ASSERT_FALSE(a.attempts.empty());
  EXPECT_EQ(a.attempts.front().outcome, "ok");
  EXPECT_EQ(a.attempts.size(), 1u);
  EXPECT_GE(compare_grids(a.grid, r.truth).coverage, 0.99);
}

TEST(AnalyzeTile, RetriesWhenCenterIsUnusable) {
  SynthScene s = clean_scene(400, 400, 2.0);
  MaskRegion m;
  m.circle = true;
  m.center = {199.5, 199.5};
  m.radius = 120;
  s.masks.push_back(m);
  const SynthResult r = synth_scan(s);
  const TileAnalysis a = analyze_tile(r.image, presets::dufay());
  ASSERT_GE(a.attempts.size(), 2u);
  EXPECT_NE(a.attempts.front().outcome, "ok");
  EXPECT_EQ(a.attempts.back().outcome, "ok");
  EXPECT_GE(a.grid.valid_count(), 500u);
}

TEST(AnalyzeTile, GrayTileFails) {
  const LinearImage gray(200, 200, 3, 0.4f);
  EXPECT_EQ(kind_of([&] { analyze_tile(gray, presets::dufay()); }), ErrorKind::TileAnalysisFailure);
}

TEST(AnalyzeTile, TinyImageRejected) {
  const LinearImage small(50, 50, 3, 0.4f);
  EXPECT_EQ(kind_of([&] { analyze_tile(small, presets::dufay()); }), ErrorKind::InvalidArgument);
}

TEST(Coverage, AllValidEmptyAndHalf) {
  PatchGrid pg({0, 0, 10, 10}, 3, 100, 100);
  for (int j = 0; j < 10; ++j)
    for (int i = 0; i < 10; ++i)
      for (int s = 0; s < 3; ++s) pg.at(i, j, s).center = Vec2(i * 10 + 2, j * 10 + 2);
  EXPECT_DOUBLE_EQ(coverage(pg), 0.0);
  for (auto& r : pg.records()) r.valid = true;
  EXPECT_DOUBLE_EQ(coverage(pg), 1.0);
  for (int j = 0; j < 10; ++j)
    for (int i = 5; i < 10; ++i)
      for (int s = 0; s < 3; ++s) pg.at(i, j, s).valid = false;
  EXPECT_DOUBLE_EQ(coverage(pg), 0.5);
}

TEST(Coverage, SitesOutsideImageIgnored) {
  PatchGrid pg({0, 0, 2, 1}, 1, 10, 10);
  pg.at(0, 0, 0) = {Vec2(5, 5), true, 1.0f};
  pg.at(1, 0, 0) = {Vec2(50, 5), false, 0.0f};
  EXPECT_DOUBLE_EQ(coverage(pg), 1.0);
}

TEST(RetryStarts, InsideCentralRegion) {
  const auto s = retry_starts(1000, 500, 20);
  ASSERT_EQ(s.size(), 20u);
  for (const auto& p : s) {
    EXPECT_GE(p.x(), 0.1 * 999);
    EXPECT_LE(p.x(), 0.9 * 999);
    EXPECT_GE(p.y(), 0.1 * 499);
    EXPECT_LE(p.y(), 0.9 * 499);
  }
}
