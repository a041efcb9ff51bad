#include "screenreg/mesh.hpp"

#include "screenreg/parallel.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <optional>

namespace screenreg {

Vec2 LensModel::distort(const Vec2& p) const {
  if (is_identity()) return p;
  const Vec2 d = p - center;
  const double rho2 = d.squaredNorm() / (norm_radius * norm_radius);
  return center + d * factor(rho2);
}

Vec2 LensModel::undistort(const Vec2& q) const {
  if (is_identity()) return q;
  const Vec2 d = q - center;
  const double rq = d.norm() / norm_radius;
  if (rq == 0) return q;
  // Solve r * f(r^2) = rq for r.
  double r = rq;
  for (int it = 0; it < 30; ++it) {
    const double r2 = r * r;
    const double g = r * factor(r2) - rq;
    const double dg = 1.0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2;
    if (dg <= 0) break;
    const double step = g / dg;
    r -= step;
    if (std::abs(step) < 1e-15) break;
  }
  return center + d * (r / rq);
}

LensModel LensModel::for_image(int width, int height) {
  LensModel l;
  l.center = Vec2((width - 1) / 2.0, (height - 1) / 2.0);
  l.norm_radius = 0.5 * std::hypot(static_cast<double>(width), static_cast<double>(height));
  if (!(l.norm_radius > 0)) l.norm_radius = 1;
  return l;
}

bool LensModel::injective_over(int width, int height) const {
  const double rmax =
      1.05 * std::hypot(std::max(center.x(), width - center.x()),
                        std::max(center.y(), height - center.y())) / norm_radius;
  for (int k = 0; k <= 200; ++k) {
    const double r = rmax * k / 200.0, r2 = r * r;
    if (factor(r2) <= 0) return false;
    if (1.0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2 <= 0) return false;
  }
  return true;
}

namespace {

Mat3 normalizing_similarity(const std::vector<Vec2>& pts) {
  Vec2 c = Vec2::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  double md = 0;
  for (const auto& p : pts) md += (p - c).norm();
  md /= static_cast<double>(pts.size());
  const double s = md > 0 ? std::sqrt(2.0) / md : 1.0;
  Mat3 t = Mat3::Identity();
  t(0, 0) = t(1, 1) = s;
  t(0, 2) = -s * c.x();
  t(1, 2) = -s * c.y();
  return t;
}

}  // namespace

LensModel fit_lens(std::span<const PointPair> all_pairs, Homography& h, const LensModel& frame,
                   const LensFitParams& params) {
  std::vector<PointPair> pairs;
  for (const auto& p : all_pairs)
    if (p.weight > 0) pairs.push_back(p);
  if (pairs.size() < 20) throw Error(ErrorKind::InsufficientData, "lens fit needs >= 20 pairs");
  if (static_cast<int>(pairs.size()) > params.max_points) {
    std::vector<PointPair> sub;
    const double stride = static_cast<double>(pairs.size()) / params.max_points;
    for (int k = 0; k < params.max_points; ++k)
      sub.push_back(pairs[static_cast<std::size_t>(k * stride)]);
    pairs = std::move(sub);
  }
  const std::size_t n = pairs.size();

  {
    double m = 0, m2 = 0, rmax = 0;
    for (const auto& p : pairs) {
      const double r2 = (p.scan - frame.center).squaredNorm() / (frame.norm_radius * frame.norm_radius);
      m += r2;
      m2 += r2 * r2;
      rmax = std::max(rmax, std::sqrt(r2));
    }
    m /= static_cast<double>(n);
    m2 /= static_cast<double>(n);
    const double sd = std::sqrt(std::max(0.0, m2 - m * m));
    if (rmax < 0.05 || sd < 0.05 * m)
      throw Error(ErrorKind::IllConditioned, "lens fit points are not spread radially");
  }

  std::vector<Vec2> lat(n), scn(n);
  for (std::size_t k = 0; k < n; ++k) {
    lat[k] = pairs[k].lattice;
    scn[k] = pairs[k].scan;
  }
  const Mat3 tl = normalizing_similarity(lat), ts = normalizing_similarity(scn);
  const Mat3 ts_inv = ts.inverse();
  Mat3 hn = ts * h.matrix() * tl.inverse();
  hn /= hn(2, 2);

  using Vec10 = Eigen::Matrix<double, 10, 1>;
  Vec10 p;
  p << hn(0, 0), hn(0, 1), hn(0, 2), hn(1, 0), hn(1, 1), hn(1, 2), hn(2, 0), hn(2, 1), 0.0, 0.0;

  auto residuals = [&](const Vec10& q, Eigen::VectorXd& r) {
    Mat3 m;
    m << q(0), q(1), q(2), q(3), q(4), q(5), q(6), q(7), 1.0;
    const Mat3 full = ts_inv * m * tl;
    LensModel lens = frame;
    lens.k1 = q(8);
    lens.k2 = q(9);
    r.resize(static_cast<Eigen::Index>(2 * n));
    for (std::size_t k = 0; k < n; ++k) {
      const Vec3 v = full * Vec3(lat[k].x(), lat[k].y(), 1.0);
      const Vec2 u(v.x() / v.z(), v.y() / v.z());
      const Vec2 e = (lens.distort(u) - scn[k]) * std::sqrt(pairs[k].weight);
      r(static_cast<Eigen::Index>(2 * k)) = e.x();
      r(static_cast<Eigen::Index>(2 * k + 1)) = e.y();
    }
  };

  Eigen::VectorXd r, r_try;
  residuals(p, r);
  double cost = r.squaredNorm();
  double lambda = 1e-3;
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(2 * n), 10);
  for (int it = 0; it < params.iterations; ++it) {
    for (int c = 0; c < 10; ++c) {
      const double step = 1e-7 * std::max(1.0, std::abs(p(c)));
      Vec10 pp = p, pm = p;
      pp(c) += step;
      pm(c) -= step;
      Eigen::VectorXd rp, rm;
      residuals(pp, rp);
      residuals(pm, rm);
      jac.col(c) = (rp - rm) / (2 * step);
    }
    const Eigen::Matrix<double, 10, 10> jtj = jac.transpose() * jac;
    const Vec10 jtr = jac.transpose() * r;
    bool improved = false;
    for (int tries = 0; tries < 10; ++tries) {
      Eigen::Matrix<double, 10, 10> a = jtj;
      for (int c = 0; c < 10; ++c) a(c, c) += lambda * std::max(jtj(c, c), 1e-12);
      const Vec10 delta = a.ldlt().solve(-jtr);
      const Vec10 cand = p + delta;
      residuals(cand, r_try);
      const double c2 = r_try.squaredNorm();
      if (c2 < cost) {
        const double rel = (cost - c2) / std::max(cost, 1e-300);
        p = cand;
        r = r_try;
        cost = c2;
        lambda = std::max(lambda / 4, 1e-12);
        improved = true;
        if (rel < 1e-12) it = params.iterations;
        break;
      }
      lambda *= 8;
    }
    if (!improved) break;
  }

  // Conditioning of the radial terms against the homography.
  const Eigen::Matrix<double, 10, 10> jtj = jac.transpose() * jac;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 10, 10>> es(jtj);
  if (!(es.eigenvalues()(0) > 1e-12 * es.eigenvalues()(9)))
    throw Error(ErrorKind::IllConditioned, "lens fit is ill-conditioned");

  Mat3 m;
  m << p(0), p(1), p(2), p(3), p(4), p(5), p(6), p(7), 1.0;
  h = Homography(ts_inv * m * tl);
  LensModel lens = frame;
  lens.k1 = p(8);
  lens.k2 = p(9);
  return lens;
}

MeshTransform::MeshTransform(int nx, int ny, Vec2 domain_min, Vec2 domain_max, LensModel lens)
    : nx_(nx), ny_(ny), dmin_(domain_min), dmax_(domain_max), lens_(lens) {
  if (nx < 2 || ny < 2) throw Error(ErrorKind::InvalidArgument, "mesh needs >= 2x2 nodes");
  if (!(domain_max.x() > domain_min.x()) || !(domain_max.y() > domain_min.y()))
    throw Error(ErrorKind::InvalidArgument, "mesh domain is empty");
  nodes_.assign(static_cast<std::size_t>(nx) * ny, Homography());
  inverses_.assign(nodes_.size(), Homography());
  solved_.assign(nodes_.size(), 0);
}

MeshTransform MeshTransform::uniform(const Homography& h, Vec2 domain_min, Vec2 domain_max,
                                     int nx, int ny, const LensModel& lens) {
  MeshTransform m(nx, ny, domain_min, domain_max, lens);
  for (int l = 0; l < ny; ++l)
    for (int k = 0; k < nx; ++k) m.set_node(k, l, h, true);
  return m;
}

Vec2 MeshTransform::spacing() const {
  return {(dmax_.x() - dmin_.x()) / (nx_ - 1), (dmax_.y() - dmin_.y()) / (ny_ - 1)};
}

Vec2 MeshTransform::node_position(int k, int l) const {
  const Vec2 sp = spacing();
  return {dmin_.x() + k * sp.x(), dmin_.y() + l * sp.y()};
}

void MeshTransform::set_node(int k, int l, const Homography& h, bool solved) {
  nodes_[idx(k, l)] = h;
  inverses_[idx(k, l)] = h.inverse();
  solved_[idx(k, l)] = solved ? 1 : 0;
}

std::size_t MeshTransform::solved_count() const {
  return static_cast<std::size_t>(std::count(solved_.begin(), solved_.end(), 1));
}

bool MeshTransform::in_domain(const LatticeCoord& lc, bool* extrapolated) const {
  const bool inside = lc.u >= dmin_.x() && lc.v >= dmin_.y() && lc.u <= dmax_.x() &&
                      lc.v <= dmax_.y();
  const bool near = lc.u >= dmin_.x() - 1 && lc.v >= dmin_.y() - 1 && lc.u <= dmax_.x() + 1 &&
                    lc.v <= dmax_.y() + 1;
  if (extrapolated) *extrapolated = !inside && near;
  return near;
}

Vec2 MeshTransform::forward_undistorted(const LatticeCoord& lc) const {
  const Vec2 sp = spacing();
  const double s = (lc.u - dmin_.x()) / sp.x();
  const double t = (lc.v - dmin_.y()) / sp.y();
  const int k = std::clamp(static_cast<int>(std::floor(s)), 0, nx_ - 2);
  const int l = std::clamp(static_cast<int>(std::floor(t)), 0, ny_ - 2);
  const double fs = std::clamp(s - k, 0.0, 1.0);
  const double ft = std::clamp(t - l, 0.0, 1.0);
  const Vec2 p = lc.vec();
  Vec2 out = Vec2::Zero();
  if ((1 - fs) * (1 - ft) > 0) out += (1 - fs) * (1 - ft) * nodes_[idx(k, l)].apply(p);
  if (fs * (1 - ft) > 0) out += fs * (1 - ft) * nodes_[idx(k + 1, l)].apply(p);
  if ((1 - fs) * ft > 0) out += (1 - fs) * ft * nodes_[idx(k, l + 1)].apply(p);
  if (fs * ft > 0) out += fs * ft * nodes_[idx(k + 1, l + 1)].apply(p);
  return out;
}

Vec2 MeshTransform::forward_unchecked(const LatticeCoord& lc) const {
  return lens_.distort(forward_undistorted(lc));
}

Vec2 MeshTransform::forward(const LatticeCoord& lc) const {
  if (!in_domain(lc))
    throw Error(ErrorKind::OutOfDomain, "lattice point (" + std::to_string(lc.u) + ", " +
                                            std::to_string(lc.v) + ") outside mesh domain");
  return forward_unchecked(lc);
}

Mat2 MeshTransform::jacobian(const LatticeCoord& lc) const {
  const double h = 1e-3;
  const Vec2 du = forward_unchecked({lc.u + h, lc.v}) - forward_unchecked({lc.u - h, lc.v});
  const Vec2 dv = forward_unchecked({lc.u, lc.v + h}) - forward_unchecked({lc.u, lc.v - h});
  Mat2 j;
  j.col(0) = du / (2 * h);
  j.col(1) = dv / (2 * h);
  return j;
}

LatticeCoord MeshTransform::inverse(const Vec2& xy, double tolerance_px) const {
  const Vec2 pu = lens_.undistort(xy);
  Vec2 lc = inverses_[idx(nx_ / 2, ny_ / 2)].apply(pu);
  // Walk to the node cell that contains the point.
  const Vec2 sp = spacing();
  for (int it = 0; it < 8; ++it) {
    const int k = std::clamp(static_cast<int>(std::lround((lc.x() - dmin_.x()) / sp.x())), 0, nx_ - 1);
    const int l = std::clamp(static_cast<int>(std::lround((lc.y() - dmin_.y()) / sp.y())), 0, ny_ - 1);
    const Vec2 next = inverses_[idx(k, l)].apply(pu);
    const bool done = (next - lc).norm() < 1e-9;
    lc = next;
    if (done) break;
  }
  Vec2 f = forward_unchecked(LatticeCoord::from(lc)) - xy;
  for (int it = 0; it < 50; ++it) {
    if (f.norm() < tolerance_px) {
      const LatticeCoord out = LatticeCoord::from(lc);
      if (!in_domain(out))
        throw Error(ErrorKind::OutOfDomain, "scan point maps outside mesh domain");
      return out;
    }
    const Mat2 j = jacobian(LatticeCoord::from(lc));
    const Vec2 step = j.fullPivLu().solve(-f);
    double alpha = 1.0;
    bool moved = false;
    for (int k = 0; k < 20; ++k) {
      const Vec2 cand = lc + alpha * step;
      const Vec2 fc = forward_unchecked(LatticeCoord::from(cand)) - xy;
      if (fc.norm() < f.norm()) {
        lc = cand;
        f = fc;
        moved = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!moved) break;
  }
  if (f.norm() < tolerance_px) {
    const LatticeCoord out = LatticeCoord::from(lc);
    if (!in_domain(out)) throw Error(ErrorKind::OutOfDomain, "scan point maps outside mesh domain");
    return out;
  }
  throw Error(ErrorKind::NonConvergence, "mesh inversion did not converge");
}

std::vector<PointPair> pairs_from_grid(const PatchGrid& pg, const ScreenSpec& spec,
                                       bool include_predicted) {
  std::vector<PointPair> out;
  const auto& b = pg.bounds();
  for (int j = b.v0; j < b.v0 + b.height; ++j)
    for (int i = b.u0; i < b.u0 + b.width; ++i)
      for (int s = 0; s < pg.sites_per_cell(); ++s) {
        const SiteRecord& r = pg.at(i, j, s);
        if (!r.valid || (r.weight <= 0 && !include_predicted)) continue;
        const Vec2 off = spec.site(static_cast<std::size_t>(s)).offset;
        out.push_back({Vec2(i + off.x(), j + off.y()), r.center, r.weight > 0 ? r.weight : 1.0});
      }
  return out;
}

MeshTransform build_mesh(const PatchGrid& pg, const ScreenSpec& spec, const LensModel& lens,
                         const MeshParams& params) {
  const auto& b = pg.bounds();
  if (b.width < 1 || b.height < 1) throw Error(ErrorKind::InsufficientData, "empty patch grid");
  if (static_cast<int>(spec.site_count()) != pg.sites_per_cell())
    throw Error(ErrorKind::InvalidArgument, "patch grid does not match screen spec");
  const Vec2 dmin(b.u0, b.v0), dmax(b.u0 + b.width, b.v0 + b.height);
  auto node_count = [&](int requested, int extent) {
    const int cap = params.min_spacing_cells > 0
                        ? static_cast<int>(std::floor(extent / params.min_spacing_cells)) + 1
                        : requested;
    return std::max(2, std::min(requested, cap));
  };
  const int nx = node_count(params.nx, b.width), ny = node_count(params.ny, b.height);
  MeshTransform mesh(nx, ny, dmin, dmax, lens);
  const Vec2 sp = mesh.spacing();
  const double sigma = params.weight_sigma > 0 ? params.weight_sigma : std::sqrt(sp.x() * sp.y());
  const double reach = params.support_sigmas * sigma;

  // Undistorted observation per site, computed once.
  const int ns = pg.sites_per_cell();
  std::vector<Vec2> undist(pg.records().size());
  for (std::size_t k = 0; k < undist.size(); ++k)
    undist[k] = lens.undistort(pg.records()[k].center);
  std::vector<Vec2> offsets(static_cast<std::size_t>(ns));
  for (int s = 0; s < ns; ++s) offsets[static_cast<std::size_t>(s)] = spec.site(static_cast<std::size_t>(s)).offset;

  std::vector<std::optional<Homography>> solved(static_cast<std::size_t>(nx) * ny);
  parallel_for(solved.size(), params.workers, [&](std::size_t node_index) {
    const int k = static_cast<int>(node_index % nx), l = static_cast<int>(node_index / nx);
    const Vec2 node = mesh.node_position(k, l);
    const int i0 = std::max(b.u0, static_cast<int>(std::floor(node.x() - reach)) - 1);
    const int i1 = std::min(b.u0 + b.width - 1, static_cast<int>(std::ceil(node.x() + reach)));
    const int j0 = std::max(b.v0, static_cast<int>(std::floor(node.y() - reach)) - 1);
    const int j1 = std::min(b.v0 + b.height - 1, static_cast<int>(std::ceil(node.y() + reach)));
    std::vector<PointPair> local;
    double mass = 0;
    for (int j = j0; j <= j1; ++j)
      for (int i = i0; i <= i1; ++i)
        for (int s = 0; s < ns; ++s) {
          const SiteRecord& r = pg.at(i, j, s);
          if (!r.valid || r.weight <= 0) continue;
          const Vec2 lat(i + offsets[static_cast<std::size_t>(s)].x(),
                         j + offsets[static_cast<std::size_t>(s)].y());
          const double d2 = (lat - node).squaredNorm();
          if (d2 > reach * reach) continue;
          const double w = r.weight * std::exp(-0.5 * d2 / (sigma * sigma));
          if (w < 1e-12) continue;
          const std::size_t rec = (static_cast<std::size_t>(j - b.v0) * b.width + (i - b.u0)) * ns +
                                  static_cast<std::size_t>(s);
          local.push_back({lat, undist[rec], w});
          mass += w;
        }
    if (static_cast<int>(local.size()) < std::max(4, params.min_support) || mass < 1.0) return;
    RansacParams rp = params.ransac;
    rp.seed = params.ransac.seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(node_index + 1));
    try {
      const RansacResult res = ransac_homography(local, rp);
      if (res.h.invertible()) solved[node_index] = res.h;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::InsufficientData && e.kind() != ErrorKind::IllConditioned) throw;
    }
  });
  for (int l = 0; l < ny; ++l)
    for (int k = 0; k < nx; ++k)
      if (const auto& h = solved[static_cast<std::size_t>(l) * nx + k]) mesh.set_node(k, l, *h, true);

  if (mesh.solved_count() < 4)
    throw Error(ErrorKind::InsufficientData, "fewer than 4 mesh nodes could be solved");

  // Unsolved nodes copy the nearest solved node (breadth-first over the node grid).
  std::vector<int> source(static_cast<std::size_t>(nx) * ny, -1);
  std::deque<std::pair<int, int>> q;
  for (int l = 0; l < ny; ++l)
    for (int k = 0; k < nx; ++k)
      if (mesh.node_solved(k, l)) {
        source[static_cast<std::size_t>(l) * nx + k] = l * nx + k;
        q.emplace_back(k, l);
      }
  while (!q.empty()) {
    const auto [k, l] = q.front();
    q.pop_front();
    const int src = source[static_cast<std::size_t>(l) * nx + k];
    const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (const auto& d : nb) {
      const int nk = k + d[0], nl = l + d[1];
      if (nk < 0 || nl < 0 || nk >= nx || nl >= ny) continue;
      auto& slot = source[static_cast<std::size_t>(nl) * nx + nk];
      if (slot >= 0) continue;
      slot = src;
      mesh.set_node(nk, nl, mesh.node(src % nx, src / nx), false);
      q.emplace_back(nk, nl);
    }
  }
  return mesh;
}

MeshTransform fit_screen_mesh(const PatchGrid& pg, const ScreenSpec& spec,
                              const MeshFitParams& params, MeshFitReport* report) {
  const std::vector<PointPair> pairs = pairs_from_grid(pg, spec);
  if (pairs.size() < 4) throw Error(ErrorKind::InsufficientData, "too few detected patches");
  const RansacResult global = ransac_homography(pairs, params.global_ransac);

  LensModel lens = LensModel::for_image(pg.image_width(), pg.image_height());
  Homography h = global.h;
  if (params.fit_lens) {
    std::vector<PointPair> inl;
    for (std::size_t k = 0; k < pairs.size(); ++k)
      if (global.inliers[k]) inl.push_back(pairs[k]);
    try {
      LensModel fitted = fit_lens(inl, h, lens, params.lens);
      if (fitted.injective_over(pg.image_width(), pg.image_height())) lens = fitted;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::IllConditioned && e.kind() != ErrorKind::InsufficientData) throw;
    }
  }
  MeshTransform mesh = build_mesh(pg, spec, lens, params.mesh);

  if (report) {
    report->global = h;
    report->global_inliers = global.inlier_count;
    report->pairs = pairs.size();
    report->lens = lens;
    report->solved_nodes = mesh.solved_count();
    double sum = 0, mx = 0;
    for (const auto& p : pairs) {
      const double e = (mesh.forward_unchecked(LatticeCoord::from(p.lattice)) - p.scan).norm();
      sum += e * e;
      mx = std::max(mx, e);
    }
    report->rms_residual_px = std::sqrt(sum / static_cast<double>(pairs.size()));
    report->max_residual_px = mx;
  }
  return mesh;
}

}  // namespace screenreg
