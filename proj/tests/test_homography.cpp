#include "screenreg/homography.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace screenreg;

namespace {

Homography sample_h() {
  Mat3 m;
  m << 9.8, -1.7, 512.0,
       1.9, 10.3, 388.0,
       2e-4, -1e-4, 1.0;
  return Homography(m);
}

std::vector<PointPair> exact_pairs(const Homography& h, int n) {
  std::vector<PointPair> out;
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      const Vec2 lat(i * 1.5 - 10, j * 1.25 - 8);
      out.push_back({lat, h.apply(lat), 1.0});
    }
  return out;
}

double max_transfer_error(const Homography& a, const Homography& b) {
  double e = 0;
  for (int j = -10; j <= 10; j += 2)
    for (int i = -10; i <= 10; i += 2) e = std::max(e, (a.apply({i, j}) - b.apply({i, j})).norm());
  return e;
}

}  // namespace

TEST(Homography, InverseComposesToIdentity) {
  const Homography h = sample_h();
  const Vec2 p(3.25, -7.5);
  EXPECT_LT((h.inverse().apply(h.apply(p)) - p).norm(), 1e-9);
}

TEST(Homography, SimilarityMapsPoints) {
  const Homography s = Homography::similarity(2.0, std::numbers::pi / 2, Vec2(1, 1));
  EXPECT_LT((s.apply({1, 0}) - Vec2(1, 3)).norm(), 1e-12);
}

TEST(Homography, SingularInverseThrows) {
  Mat3 m = Mat3::Zero();
  m(2, 2) = 1;
  const Homography h(m);
  EXPECT_FALSE(h.invertible());
  EXPECT_THROW(h.inverse(), Error);
}

TEST(FitHomography, ExactPointsRecovered) {
  const Homography h = sample_h();
  const Homography fit = fit_homography(exact_pairs(h, 6));
  EXPECT_LT(max_transfer_error(fit, h), 1e-6);
}

TEST(FitHomography, FourPointsSuffice) {
  const Homography h = sample_h();
  std::vector<PointPair> p;
  for (const Vec2 lat : {Vec2(0, 0), Vec2(5, 0), Vec2(0, 5), Vec2(6, 7)}) p.push_back({lat, h.apply(lat), 1.0});
  EXPECT_LT(max_transfer_error(fit_homography(p), h), 1e-6);
}

TEST(FitHomography, ThreePointsRejected) {
  const Homography h = sample_h();
  std::vector<PointPair> p;
  for (const Vec2 lat : {Vec2(0, 0), Vec2(5, 0), Vec2(0, 5)}) p.push_back({lat, h.apply(lat), 1.0});
  try {
    fit_homography(p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientData);
  }
  EXPECT_THROW(ransac_homography(p), Error);
}

TEST(FitHomography, ZeroWeightPointsIgnored) {
  const Homography h = sample_h();
  auto p = exact_pairs(h, 5);
  p.push_back({Vec2(1, 1), Vec2(9999, -9999), 0.0});
  EXPECT_LT(max_transfer_error(fit_homography(p), h), 1e-6);
}

TEST(RansacHomography, ThirtyPercentOutliers) {
  const Homography h = sample_h();
  auto p = exact_pairs(h, 12);
  std::mt19937_64 rng(42);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::uniform_real_distribution<double> junk(-80.0, 80.0);
  std::vector<bool> outlier(p.size(), false);
  for (std::size_t k = 0; k < p.size(); ++k) {
    p[k].scan += Vec2(noise(rng), noise(rng));
    if (k % 10 < 3) {
      p[k].scan += Vec2(junk(rng), junk(rng));
      outlier[k] = true;
    }
  }
  const RansacResult r = ransac_homography(p);
  EXPECT_LT(max_transfer_error(r.h, h), 0.1);
  std::size_t flagged_outliers = 0;
  for (std::size_t k = 0; k < p.size(); ++k)
    if (outlier[k] && r.inliers[k]) ++flagged_outliers;
  EXPECT_LE(flagged_outliers, 2u);
  EXPECT_GE(r.inlier_count, p.size() * 6 / 10);
}

TEST(RansacHomography, SameSeedSameResult) {
  auto p = exact_pairs(sample_h(), 8);
  p[3].scan += Vec2(30, 30);
  const RansacResult a = ransac_homography(p), b = ransac_homography(p);
  EXPECT_EQ(a.h.matrix(), b.h.matrix());
  EXPECT_EQ(a.inliers, b.inliers);
}

TEST(RansacHomography, TooFewInliers) {
  auto p = exact_pairs(sample_h(), 4);
  RansacParams rp;
  rp.min_inliers = 100;
  EXPECT_THROW(ransac_homography(p, rp), Error);
}
