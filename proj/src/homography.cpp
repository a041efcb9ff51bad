#include "screenreg/homography.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace screenreg {

Homography::Homography(const Mat3& m) : m_(m) {
  if (std::abs(m_(2, 2)) > 1e-12 * m_.norm()) {
    m_ /= m_(2, 2);
  } else {
    const double n = m_.norm();
    if (n > 0) m_ /= n;
  }
}

bool Homography::invertible() const {
  return std::abs(m_.determinant()) > 1e-14 * std::pow(m_.norm(), 3);
}

Homography Homography::inverse() const {
  if (!invertible()) throw Error(ErrorKind::IllConditioned, "homography is singular");
  return Homography(m_.inverse());
}

Homography Homography::similarity(double scale, double angle_rad, const Vec2& t) {
  Mat3 m = Mat3::Identity();
  m(0, 0) = scale * std::cos(angle_rad);
  m(0, 1) = -scale * std::sin(angle_rad);
  m(1, 0) = scale * std::sin(angle_rad);
  m(1, 1) = scale * std::cos(angle_rad);
  m(0, 2) = t.x();
  m(1, 2) = t.y();
  return Homography(m);
}

namespace {

/// Similarity that moves the weighted centroid to the origin and scales
/// the mean distance to sqrt(2).
Mat3 normalizer(std::span<const PointPair> pairs, bool lattice_side) {
  double wsum = 0;
  Vec2 c = Vec2::Zero();
  for (const auto& p : pairs) {
    if (p.weight <= 0) continue;
    c += p.weight * (lattice_side ? p.lattice : p.scan);
    wsum += p.weight;
  }
  if (!(wsum > 0)) return Mat3::Identity();
  c /= wsum;
  double md = 0;
  for (const auto& p : pairs) {
    if (p.weight <= 0) continue;
    md += p.weight * ((lattice_side ? p.lattice : p.scan) - c).norm();
  }
  md /= wsum;
  const double s = md > 0 ? std::sqrt(2.0) / md : 1.0;
  Mat3 t = Mat3::Identity();
  t(0, 0) = t(1, 1) = s;
  t(0, 2) = -s * c.x();
  t(1, 2) = -s * c.y();
  return t;
}

Vec2 apply3(const Mat3& t, const Vec2& p) {
  const Vec3 q = t * Vec3(p.x(), p.y(), 1.0);
  return {q.x() / q.z(), q.y() / q.z()};
}

/// Weighted DLT in normalized coordinates; returns the pixel-space matrix.
bool dlt(std::span<const PointPair> pairs, const Mat3& tl, const Mat3& ts, Mat3& out) {
  Eigen::Matrix<double, 9, 9> ata = Eigen::Matrix<double, 9, 9>::Zero();
  int used = 0;
  for (const auto& p : pairs) {
    if (p.weight <= 0) continue;
    const Vec2 l = apply3(tl, p.lattice), s = apply3(ts, p.scan);
    Eigen::Matrix<double, 9, 1> r1, r2;
    r1 << l.x(), l.y(), 1, 0, 0, 0, -s.x() * l.x(), -s.x() * l.y(), -s.x();
    r2 << 0, 0, 0, l.x(), l.y(), 1, -s.y() * l.x(), -s.y() * l.y(), -s.y();
    ata.noalias() += p.weight * (r1 * r1.transpose() + r2 * r2.transpose());
    ++used;
  }
  if (used < 4) return false;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 9, 9>> es(ata);
  const Eigen::Matrix<double, 9, 1> h = es.eigenvectors().col(0);
  Mat3 hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  out = ts.inverse() * hn * tl;
  return std::isfinite(out.norm());
}

/// Exact 4-point solve in normalized coordinates with h33 = 1.
bool four_point(const std::array<Vec2, 4>& l, const std::array<Vec2, 4>& s, Mat3& hn) {
  Eigen::Matrix<double, 8, 8> a;
  Eigen::Matrix<double, 8, 1> b;
  for (int k = 0; k < 4; ++k) {
    a.row(2 * k) << l[k].x(), l[k].y(), 1, 0, 0, 0, -s[k].x() * l[k].x(), -s[k].x() * l[k].y();
    a.row(2 * k + 1) << 0, 0, 0, l[k].x(), l[k].y(), 1, -s[k].y() * l[k].x(), -s[k].y() * l[k].y();
    b(2 * k) = s[k].x();
    b(2 * k + 1) = s[k].y();
  }
  Eigen::PartialPivLU<Eigen::Matrix<double, 8, 8>> lu(a);
  if (std::abs(lu.determinant()) < 1e-12) return false;
  const Eigen::Matrix<double, 8, 1> h = lu.solve(b);
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  return std::isfinite(hn.norm());
}

double tri_area(const Vec2& a, const Vec2& b, const Vec2& c) {
  return 0.5 * std::abs((b - a).x() * (c - a).y() - (b - a).y() * (c - a).x());
}

}  // namespace

Homography fit_homography(std::span<const PointPair> pairs) {
  const Mat3 tl = normalizer(pairs, true), ts = normalizer(pairs, false);
  Mat3 h;
  if (!dlt(pairs, tl, ts, h))
    throw Error(ErrorKind::InsufficientData, "homography fit needs >= 4 weighted pairs");
  Homography out(h);
  if (!out.invertible()) throw Error(ErrorKind::IllConditioned, "degenerate homography fit");
  return out;
}

RansacResult ransac_homography(std::span<const PointPair> input, const RansacParams& params) {
  const std::size_t n = input.size();
  if (n < 4) throw Error(ErrorKind::InsufficientData, "RANSAC needs at least 4 pairs");

  // Canonical order makes the result independent of input permutation.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& p = input[a];
    const auto& q = input[b];
    return std::tie(p.lattice.x(), p.lattice.y(), p.scan.x(), p.scan.y(), p.weight) <
           std::tie(q.lattice.x(), q.lattice.y(), q.scan.x(), q.scan.y(), q.weight);
  });
  std::vector<PointPair> pairs(n);
  for (std::size_t k = 0; k < n; ++k) pairs[k] = input[order[k]];

  std::vector<double> cum(n);
  double total_w = 0;
  std::size_t positive = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double w = std::max(0.0, pairs[k].weight);
    if (w > 0) ++positive;
    total_w += w;
    cum[k] = total_w;
  }
  if (positive < 4 || !(total_w > 0))
    throw Error(ErrorKind::InsufficientData, "RANSAC needs at least 4 weighted pairs");

  const Mat3 tl = normalizer(pairs, true), ts = normalizer(pairs, false);
  const Mat3 ts_inv = ts.inverse();
  std::vector<Vec2> nl(n), ns(n);
  for (std::size_t k = 0; k < n; ++k) {
    nl[k] = apply3(tl, pairs[k].lattice);
    ns[k] = apply3(ts, pairs[k].scan);
  }

  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> uni(0.0, total_w);
  auto draw = [&]() {
    const double r = uni(rng);
    auto it = std::upper_bound(cum.begin(), cum.end(), r);
    return static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - cum.begin(), n - 1));
  };

  const double thr2 = params.inlier_threshold_px * params.inlier_threshold_px;
  auto score = [&](const Mat3& h, std::vector<std::uint8_t>* flags) {
    double s = 0;
    std::size_t count = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const Vec3 q = h * Vec3(pairs[k].lattice.x(), pairs[k].lattice.y(), 1.0);
      const bool in = q.z() != 0 &&
                      (Vec2(q.x() / q.z(), q.y() / q.z()) - pairs[k].scan).squaredNorm() <= thr2;
      if (flags) (*flags)[k] = in ? 1 : 0;
      if (in) {
        s += std::max(0.0, pairs[k].weight);
        ++count;
      }
    }
    return std::pair{s, count};
  };

  Mat3 best_h = Mat3::Identity();
  double best_score = -1;
  std::size_t best_count = 0;
  int needed = params.iterations;
  int it = 0;
  const double area_eps = 1e-6;
  for (; it < std::min(needed, params.iterations); ++it) {
    std::array<std::size_t, 4> idx{};
    bool distinct = true;
    for (int k = 0; k < 4; ++k) {
      idx[k] = draw();
      for (int m = 0; m < k; ++m)
        if (idx[m] == idx[k]) distinct = false;
    }
    if (!distinct) continue;
    std::array<Vec2, 4> l, s;
    for (int k = 0; k < 4; ++k) {
      l[k] = nl[idx[k]];
      s[k] = ns[idx[k]];
    }
    if (tri_area(l[0], l[1], l[2]) < area_eps || tri_area(l[0], l[1], l[3]) < area_eps ||
        tri_area(l[0], l[2], l[3]) < area_eps || tri_area(l[1], l[2], l[3]) < area_eps)
      continue;
    Mat3 hn;
    if (!four_point(l, s, hn)) continue;
    const Mat3 h = ts_inv * hn * tl;
    const auto [sc, count] = score(h, nullptr);
    if (sc > best_score || (sc == best_score && count > best_count)) {
      best_score = sc;
      best_count = count;
      best_h = h;
      const double eps = std::clamp(sc / total_w, 1e-9, 1.0 - 1e-12);
      const double denom = std::log(1.0 - std::pow(eps, 4));
      if (denom < 0) {
        const double req = std::log(1.0 - params.confidence) / denom;
        needed = static_cast<int>(std::min<double>(params.iterations, std::ceil(req)));
      }
    }
  }
  if (best_score < 0 || best_count < static_cast<std::size_t>(std::max(4, params.min_inliers)))
    throw Error(ErrorKind::InsufficientData, "RANSAC consensus below minimum inlier count");

  std::vector<std::uint8_t> flags(n, 0);
  score(best_h, &flags);
  Mat3 h = best_h;
  for (int round = 0; round < 3; ++round) {
    std::vector<PointPair> in;
    in.reserve(n);
    for (std::size_t k = 0; k < n; ++k)
      if (flags[k]) in.push_back(pairs[k]);
    Mat3 refit;
    const Mat3 itl = normalizer(in, true), its = normalizer(in, false);
    if (!dlt(in, itl, its, refit)) break;
    std::vector<std::uint8_t> next(n, 0);
    score(refit, &next);
    h = refit;
    const bool stable = next == flags;
    flags = std::move(next);
    if (stable) break;
  }

  RansacResult res;
  res.h = Homography(h);
  res.iterations_run = it;
  res.inliers.assign(n, 0);
  for (std::size_t k = 0; k < n; ++k) {
    res.inliers[order[k]] = flags[k];
    res.inlier_count += flags[k];
  }
  if (res.inlier_count < static_cast<std::size_t>(std::max(4, params.min_inliers)))
    throw Error(ErrorKind::InsufficientData, "RANSAC consensus below minimum inlier count");
  return res;
}

}  // namespace screenreg
