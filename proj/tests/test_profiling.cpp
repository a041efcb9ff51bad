#include "screenreg/profiling.hpp"
#include "screenreg/synth.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace screenreg;
using screenreg::testing::angle_between;

namespace {

/// 40x40 image: pure red, green and blue blocks plus a black block.
LinearImage canonical_blocks() {
  LinearImage img(40, 40, 3);
  for (int y = 0; y < 40; ++y)
    for (int x = 0; x < 40; ++x) {
      const int q = (y / 20) * 2 + (x / 20);
      if (q < 3) img.at(x, y, q) = 1.0f;
    }
  return img;
}

/// Mixed primaries on black gaps, rendered by the synthetic oracle.
SynthResult mixed_scene(const Mat3& mixing) {
  SynthScene s = screenreg::testing::clean_scene(240, 240);
  s.mixing = mixing;
  s.fill = 0.7;
  s.pattern.kind = PatternKind::Random;
  s.pattern.low = 0.3;
  s.pattern.high = 0.9;
  return synth_scan(s);
}

}  // namespace

TEST(Linearize, GammaOneIsIdentity) {
  LinearImage img(1, 1, 1, 0.5f);
  EXPECT_FLOAT_EQ(linearize(img, Transfer::power(1.0)).at(0, 0), 0.5f);
}

TEST(Linearize, EndpointFixed) {
  LinearImage img(1, 1, 1, 1.0f);
  EXPECT_FLOAT_EQ(linearize(img, Transfer::power(2.2)).at(0, 0), 1.0f);
}

TEST(Linearize, GammaHalf) {
  LinearImage img(1, 1, 1, 0.5f);
  const float v = linearize(img, Transfer::power(2.2)).at(0, 0);
  EXPECT_NEAR(v, std::pow(0.5, 2.2), 1e-6);
  EXPECT_NEAR(v, 0.2176, 1e-4);
}

TEST(Linearize, SrgbKnee) {
  LinearImage img(2, 1, 1);
  img.at(0, 0) = 0.04f;
  img.at(1, 0) = 0.5f;
  const LinearImage out = linearize(img, Transfer::srgb());
  EXPECT_NEAR(out.at(0, 0), 0.04 / 12.92, 1e-7);
  EXPECT_NEAR(out.at(1, 0), std::pow((0.5 + 0.055) / 1.055, 2.4), 1e-6);
}

TEST(Linearize, ParseDescriptions) {
  EXPECT_EQ(Transfer::parse("linear").kind, Transfer::Kind::Linear);
  EXPECT_EQ(Transfer::parse("srgb").kind, Transfer::Kind::Srgb);
  EXPECT_DOUBLE_EQ(Transfer::parse("gamma:2.2").gamma, 2.2);
  EXPECT_DOUBLE_EQ(Transfer::parse("1.8").gamma, 1.8);
  EXPECT_THROW(Transfer::parse("log"), Error);
}

TEST(EstimateProfile, CanonicalPrimaries) {
  const LinearImage img = canonical_blocks();
  const MatrixProfile p = estimate_profile(img, {0, 0, 40, 40});
  EXPECT_NEAR(p.d.norm(), 0.0, 1e-9);
  EXPECT_LT((p.r - Vec3(1, 0, 0)).norm(), 1e-9);
  EXPECT_LT((p.g - Vec3(0, 1, 0)).norm(), 1e-9);
  EXPECT_LT((p.b - Vec3(0, 0, 1)).norm(), 1e-9);
  EXPECT_LT((p.matrix() - Mat4::Identity()).norm(), 1e-9);
}

TEST(EstimateProfile, MixedPrimariesWithinOneDegree) {
  Mat3 c;
  c << 0.80, 0.15, 0.05,
       0.15, 0.70, 0.20,
       0.05, 0.15, 0.75;
  const SynthResult r = mixed_scene(c);
  const MatrixProfile p = estimate_profile(r.image, {0, 0, r.image.width(), r.image.height()});
  EXPECT_LT(angle_between(p.r, Vec3(c.col(0))), 1.0);
  EXPECT_LT(angle_between(p.g, Vec3(c.col(1))), 1.0);
  EXPECT_LT(angle_between(p.b, Vec3(c.col(2))), 1.0);
}

TEST(EstimateProfile, GrayRegionFails) {
  LinearImage img(30, 30, 3, 0.4f);
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 30; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = 0.3f + 0.01f * static_cast<float>((x * 7 + y * 3) % 5);
  try {
    estimate_profile(img, {0, 0, 30, 30});
    FAIL() << "expected a profile failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ProfileFailure);
  }
}

TEST(EstimateProfile, RegionOutsideImage) {
  EXPECT_THROW(estimate_profile(canonical_blocks(), {30, 30, 20, 20}), Error);
}

TEST(ApplyProfile, BlackPointMapsToOrigin) {
  MatrixProfile p;
  p.d = Vec3(0.02, 0.03, 0.04);
  p.r = Vec3(0.8, 0.15, 0.05);
  p.g = Vec3(0.1, 0.8, 0.1);
  p.b = Vec3(0.05, 0.15, 0.8);
  LinearImage img(2, 1, 3);
  const Vec3 second = p.d + 0.7 * p.r;
  for (int c = 0; c < 3; ++c) {
    img.at(0, 0, c) = static_cast<float>(p.d[c]);
    img.at(1, 0, c) = static_cast<float>(second[c]);
  }
  const LinearImage out = apply_profile(img, p);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(out.at(0, 0, c), 0.0, 1e-6);
  EXPECT_NEAR(out.at(1, 0, 0), 0.7, 1e-6);
  EXPECT_NEAR(out.at(1, 0, 1), 0.0, 1e-6);
  EXPECT_NEAR(out.at(1, 0, 2), 0.0, 1e-6);
}

TEST(ApplyProfile, ForwardRoundTrip) {
  MatrixProfile p;
  p.d = Vec3(0.01, 0.02, 0.015);
  p.r = Vec3(0.7, 0.2, 0.1);
  p.g = Vec3(0.2, 0.6, 0.2);
  p.b = Vec3(0.1, 0.2, 0.7);
  const Vec3 x(0.3, 0.55, 0.12);
  const Vec3 scan = p.forward(x);
  LinearImage img(1, 1, 3);
  for (int c = 0; c < 3; ++c) img.at(0, 0, c) = static_cast<float>(scan[c]);
  const LinearImage out = apply_profile(img, p);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(out.at(0, 0, c), x[c], 1e-6);
}

TEST(MatrixProfile, JsonRoundTrip) {
  MatrixProfile p;
  p.d = Vec3(0.01, 0.02, 0.03);
  p.r = Vec3(0.7, 0.2, 0.1);
  const MatrixProfile back = MatrixProfile::from_json(p.to_json());
  EXPECT_EQ(back.d, p.d);
  EXPECT_EQ(back.r, p.r);
  EXPECT_EQ(back.matrix(), p.matrix());
}

TEST(Unsharp, ZeroAmountIsIdentity) {
  const LinearImage img = canonical_blocks();
  EXPECT_EQ(unsharp(img, 2.0, 0.0).data(), img.data());
}

TEST(Unsharp, ConstantImageUnchanged) {
  const LinearImage img(25, 17, 3, 0.37f);
  const LinearImage out = unsharp(img, 3.0, 1.5);
  for (float v : out.data()) EXPECT_NEAR(v, 0.37f, 1e-6);
}

TEST(Unsharp, PointSourceGetsBrighter) {
  LinearImage img(21, 21, 1, 0.0f);
  img.at(10, 10) = 1.0f;
  EXPECT_GT(unsharp(img, 1.5, 1.0).at(10, 10), 1.0f);
}

TEST(Classify, PureRed) {
  LinearImage img(1, 1, 3);
  img.at(0, 0, 0) = 1.0f;
  EXPECT_EQ(classify(img, 1.5).at(0, 0), Label::Red);
}

TEST(Classify, BelowThresholdIsNone) {
  LinearImage img(1, 1, 3);
  img.at(0, 0, 0) = 0.4f;
  img.at(0, 0, 1) = 0.3f;
  img.at(0, 0, 2) = 0.3f;
  EXPECT_EQ(classify(img, 1.5).at(0, 0), Label::None);
}

TEST(Classify, CleanTileMatchesOracleSites) {
  SynthScene s = screenreg::testing::clean_scene(300, 300, 12.0);
  const SynthResult r = synth_scan(s);
  const ClassMap cm = classify(r.image, 1.5);
  std::size_t total = 0, agree = 0;
  const auto& b = r.truth.bounds();
  for (int j = b.v0; j < b.v0 + b.height; ++j)
    for (int i = b.u0; i < b.u0 + b.width; ++i)
      for (int site = 0; site < 3; ++site) {
        const auto& rec = r.truth.at(i, j, site);
        if (!rec.valid) continue;
        const int x = static_cast<int>(std::lround(rec.center.x())), y = static_cast<int>(std::lround(rec.center.y()));
        if (!cm.contains(x, y)) continue;
        ++total;
        agree += cm.at(x, y) == label_of(s.spec.site(static_cast<std::size_t>(site)).color) ? 1 : 0;
      }
  ASSERT_GT(total, 1000u);
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(total), 0.99);
}
