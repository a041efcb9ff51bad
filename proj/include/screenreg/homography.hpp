#pragma once

#include "screenreg/core.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace screenreg {

/// Projective map, normalized so that m(2,2) == 1 (or unit Frobenius norm
/// when that entry vanishes).
class Homography {
 public:
  Homography() : m_(Mat3::Identity()) {}
  explicit Homography(const Mat3& m);

  const Mat3& matrix() const noexcept { return m_; }
  Vec2 apply(const Vec2& p) const {
    const double w = m_(2, 0) * p.x() + m_(2, 1) * p.y() + m_(2, 2);
    return {(m_(0, 0) * p.x() + m_(0, 1) * p.y() + m_(0, 2)) / w,
            (m_(1, 0) * p.x() + m_(1, 1) * p.y() + m_(1, 2)) / w};
  }
  Homography inverse() const;
  bool invertible() const;

  static Homography similarity(double scale, double angle_rad, const Vec2& translation);

 private:
  Mat3 m_;
};

/// Correspondence between a lattice position and a scan pixel.
struct PointPair {
  Vec2 lattice = Vec2::Zero();
  Vec2 scan = Vec2::Zero();
  double weight = 1.0;
};

/// Weighted normalized DLT. Needs at least 4 pairs with positive weight.
Homography fit_homography(std::span<const PointPair> pairs);

struct RansacParams {
  int iterations = 2000;
  double inlier_threshold_px = 0.75;
  int min_inliers = 4;
  double confidence = 0.999;
  std::uint64_t seed = 0x5eed;
};

struct RansacResult {
  Homography h;
  std::vector<std::uint8_t> inliers;  // parallel to the input pairs
  std::size_t inlier_count = 0;
  int iterations_run = 0;
};

/// Weight-proportional sampling RANSAC followed by a weighted refit on the
/// inliers. The result does not depend on the order of `pairs`.
RansacResult ransac_homography(std::span<const PointPair> pairs, const RansacParams& params = {});

}  // namespace screenreg
