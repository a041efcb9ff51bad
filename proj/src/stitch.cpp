#include "screenreg/stitch.hpp"

#include "screenreg/parallel.hpp"

#include <Eigen/Dense>
#include <opencv2/core.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <numeric>

namespace screenreg {

namespace {

cv::Mat gray_of(const LinearImage& img) {
  cv::Mat m(img.height(), img.width(), CV_64F);
  const int ch = img.channels();
  for (int y = 0; y < img.height(); ++y) {
    double* row = m.ptr<double>(y);
    for (int x = 0; x < img.width(); ++x) {
      const float* p = img.pixel(x, y);
      double s = 0;
      for (int c = 0; c < ch; ++c) s += p[c];
      row[x] = s / ch;
    }
  }
  return m;
}

struct Overlap {
  int ax0, ay0, bx0, by0, w, h;
  bool empty() const { return w <= 0 || h <= 0; }
};

/// Integer overlap for b(x) = a(x + o).
Overlap overlap_of(const cv::Mat& a, const cv::Mat& b, int ox, int oy) {
  Overlap r;
  r.ax0 = std::max(0, ox);
  r.ay0 = std::max(0, oy);
  const int ax1 = std::min(a.cols, b.cols + ox), ay1 = std::min(a.rows, b.rows + oy);
  r.w = ax1 - r.ax0;
  r.h = ay1 - r.ay0;
  r.bx0 = r.ax0 - ox;
  r.by0 = r.ay0 - oy;
  return r;
}

/// Masks are CV_8U (nonzero = usable) or empty.
double ncc(const cv::Mat& a, const cv::Mat& b, const Overlap& o, double* rel_contrast = nullptr,
           const cv::Mat& ma = {}, const cv::Mat& mb = {}) {
  if (o.empty()) return -1;
  double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0, n = 0;
  for (int y = 0; y < o.h; ++y) {
    const double* pa = a.ptr<double>(o.ay0 + y) + o.ax0;
    const double* pb = b.ptr<double>(o.by0 + y) + o.bx0;
    const std::uint8_t* qa = ma.empty() ? nullptr : ma.ptr<std::uint8_t>(o.ay0 + y) + o.ax0;
    const std::uint8_t* qb = mb.empty() ? nullptr : mb.ptr<std::uint8_t>(o.by0 + y) + o.bx0;
    for (int x = 0; x < o.w; ++x) {
      if ((qa && !qa[x]) || (qb && !qb[x])) continue;
      sa += pa[x];
      sb += pb[x];
      saa += pa[x] * pa[x];
      sbb += pb[x] * pb[x];
      sab += pa[x] * pb[x];
      n += 1;
    }
  }
  if (n < 16) return -1;
  const double va = saa - sa * sa / n, vb = sbb - sb * sb / n;
  if (rel_contrast) {
    const double ma_ = std::abs(sa / n), mb_ = std::abs(sb / n);
    const double ca = std::sqrt(std::max(0.0, va) / n) / std::max(ma_, 1e-12);
    const double cb = std::sqrt(std::max(0.0, vb) / n) / std::max(mb_, 1e-12);
    *rel_contrast = std::min(ca, cb);
  }
  if (!(va > 0) || !(vb > 0)) return 0;
  return (sab - sa * sb / n) / std::sqrt(va * vb);
}

/// Usable pixels of the overlap.
double overlap_area(const Overlap& o, const cv::Mat& ma, const cv::Mat& mb) {
  if (o.empty()) return 0;
  if (ma.empty() && mb.empty()) return static_cast<double>(o.w) * o.h;
  double n = 0;
  for (int y = 0; y < o.h; ++y)
    for (int x = 0; x < o.w; ++x)
      if ((ma.empty() || ma.at<std::uint8_t>(o.ay0 + y, o.ax0 + x)) &&
          (mb.empty() || mb.at<std::uint8_t>(o.by0 + y, o.bx0 + x)))
        n += 1;
  return n;
}

cv::Mat mask_of(const std::vector<std::uint8_t>* valid, const LinearImage& img) {
  if (!valid) return {};
  if (valid->size() != img.pixel_count()) throw Error(ErrorKind::InvalidArgument, "mask size does not match image");
  cv::Mat m(img.height(), img.width(), CV_8U);
  std::memcpy(m.data, valid->data(), valid->size());
  return m;
}

/// Offset of the vertex of a parabola through (-1, m), (0, c), (1, p).
double parabola_peak(double m, double c, double p) {
  const double den = m - 2 * c + p;
  if (!(den < 0)) return 0;
  return std::clamp(0.5 * (m - p) / den, -0.5, 0.5);
}

double bilinear(const cv::Mat& m, double x, double y) {
  x = std::clamp(x, 0.0, m.cols - 1.0);
  y = std::clamp(y, 0.0, m.rows - 1.0);
  const int x0 = std::min(static_cast<int>(x), m.cols - 2 < 0 ? 0 : m.cols - 2);
  const int y0 = std::min(static_cast<int>(y), m.rows - 2 < 0 ? 0 : m.rows - 2);
  const int x1 = std::min(x0 + 1, m.cols - 1), y1 = std::min(y0 + 1, m.rows - 1);
  const double fx = x - x0, fy = y - y0;
  return (1 - fx) * (1 - fy) * m.at<double>(y0, x0) + fx * (1 - fy) * m.at<double>(y0, x1) +
         (1 - fx) * fy * m.at<double>(y1, x0) + fx * fy * m.at<double>(y1, x1);
}

/// Gauss-Newton translation refinement of normalized intensities.
bool refine_translation(const cv::Mat& a, const cv::Mat& b, const cv::Mat& ma, const cv::Mat& mb, Vec2& off) {
  const Overlap o = overlap_of(a, b, static_cast<int>(std::lround(off.x())), static_cast<int>(std::lround(off.y())));
  if (o.w < 8 || o.h < 8) return false;
  // Stay inside the overlap so samples of a remain interior.
  const int bx0 = o.bx0 + 2, by0 = o.by0 + 2, w = o.w - 4, h = o.h - 4;
  if (w < 4 || h < 4) return false;
  const int step = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(w) * h / 250000.0)));
  const Vec2 start = off;
  auto usable = [&](int x, int y) {
    if (!mb.empty() && !mb.at<std::uint8_t>(y, x)) return false;
    if (ma.empty()) return true;
    const int ax = x + static_cast<int>(std::lround(start.x())), ay = y + static_cast<int>(std::lround(start.y()));
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx)
        if (!ma.at<std::uint8_t>(ay + dy, ax + dx)) return false;
    return true;
  };
  std::vector<cv::Point> pts;
  for (int y = by0; y < by0 + h; y += step)
    for (int x = bx0; x < bx0 + w; x += step)
      if (usable(x, y)) pts.push_back({x, y});
  if (pts.size() < 64) return false;
  auto stats = [&](auto&& f, double& mean, double& sd) {
    double s = 0, s2 = 0;
    for (const auto& p : pts) {
      const double v = f(p.x, p.y);
      s += v;
      s2 += v * v;
    }
    const double n = static_cast<double>(pts.size());
    mean = s / n;
    sd = std::sqrt(std::max(1e-30, s2 / n - mean * mean));
  };
  double mbv, sb;
  stats([&](int x, int y) { return b.at<double>(y, x); }, mbv, sb);
  for (int it = 0; it < 10; ++it) {
    double mav, sa;
    stats([&](int x, int y) { return bilinear(a, x + off.x(), y + off.y()); }, mav, sa);
    Mat2 jtj = Mat2::Zero();
    Vec2 jtr = Vec2::Zero();
    for (const auto& p : pts) {
      const double ax = p.x + off.x(), ay = p.y + off.y();
      const double r = (bilinear(a, ax, ay) - mav) / sa - (b.at<double>(p.y, p.x) - mbv) / sb;
      const Vec2 g((bilinear(a, ax + 0.5, ay) - bilinear(a, ax - 0.5, ay)) / sa,
                   (bilinear(a, ax, ay + 0.5) - bilinear(a, ax, ay - 0.5)) / sa);
      jtj += g * g.transpose();
      jtr += g * r;
    }
    if (std::abs(jtj.determinant()) < 1e-12) return false;
    const Vec2 delta = -jtj.inverse() * jtr;
    off += delta;
    if ((off - start).norm() > 1.5) return false;
    if (delta.norm() < 1e-4) break;
  }
  return true;
}

/// Masked normalized cross-correlation for every integer offset, via six
/// FFT correlations. Returns local maxima whose overlap has at least
/// `min_area` usable pixels, best first.
std::vector<cv::Point> masked_ncc_peaks(const cv::Mat& a, const cv::Mat& b, const cv::Mat& ma, const cv::Mat& mb,
                                        double min_area, std::size_t keep) {
  const int pw = cv::getOptimalDFTSize(a.cols + b.cols), ph = cv::getOptimalDFTSize(a.rows + b.rows);
  auto spectrum = [&](const cv::Mat& m, const cv::Mat& mask, int power) {
    cv::Mat padded = cv::Mat::zeros(ph, pw, CV_64F);
    for (int y = 0; y < m.rows; ++y)
      for (int x = 0; x < m.cols; ++x) {
        if (!mask.empty() && !mask.at<std::uint8_t>(y, x)) continue;
        const double v = m.at<double>(y, x);
        padded.at<double>(y, x) = power == 0 ? 1.0 : power == 1 ? v : v * v;
      }
    cv::Mat f;
    cv::dft(padded, f, cv::DFT_COMPLEX_OUTPUT);
    return f;
  };
  auto correlate = [&](const cv::Mat& fa, const cv::Mat& fb) {
    cv::Mat cross, out;
    cv::mulSpectrums(fa, fb, cross, 0, true);
    cv::dft(cross, out, cv::DFT_INVERSE | cv::DFT_REAL_OUTPUT | cv::DFT_SCALE);
    return out;
  };
  const cv::Mat a0 = spectrum(a, ma, 0), a1 = spectrum(a, ma, 1), a2 = spectrum(a, ma, 2);
  const cv::Mat b0 = spectrum(b, mb, 0), b1 = spectrum(b, mb, 1), b2 = spectrum(b, mb, 2);
  const cv::Mat n = correlate(a0, b0), sa = correlate(a1, b0), sb = correlate(a0, b1);
  const cv::Mat saa = correlate(a2, b0), sbb = correlate(a0, b2), sab = correlate(a1, b1);
  cv::Mat score(ph, pw, CV_64F, cv::Scalar(-2.0));
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x) {
      const double cnt = std::round(n.at<double>(y, x));
      if (cnt < min_area) continue;
      const double va = saa.at<double>(y, x) - sa.at<double>(y, x) * sa.at<double>(y, x) / cnt;
      const double vb = sbb.at<double>(y, x) - sb.at<double>(y, x) * sb.at<double>(y, x) / cnt;
      const double eps = 1e-9 * cnt;
      if (!(va > eps) || !(vb > eps)) continue;
      score.at<double>(y, x) = (sab.at<double>(y, x) - sa.at<double>(y, x) * sb.at<double>(y, x) / cnt) / std::sqrt(va * vb);
    }
  struct Peak {
    double v;
    int x, y;
  };
  std::vector<Peak> peaks;
  for (int y = 0; y < ph; ++y)
    for (int x = 0; x < pw; ++x) {
      const double v = score.at<double>(y, x);
      if (v <= -1) continue;
      bool is_max = true;
      for (int dy = -1; dy <= 1 && is_max; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (!dx && !dy) continue;
          if (score.at<double>((y + dy + ph) % ph, (x + dx + pw) % pw) > v) {
            is_max = false;
            break;
          }
        }
      if (is_max) peaks.push_back({v, x, y});
    }
  keep = std::min(keep, peaks.size());
  std::partial_sort(peaks.begin(), peaks.begin() + static_cast<std::ptrdiff_t>(keep), peaks.end(),
                    [](const Peak& p, const Peak& q) { return p.v > q.v || (p.v == q.v && (p.y < q.y || (p.y == q.y && p.x < q.x))); });
  std::vector<cv::Point> out;
  for (std::size_t k = 0; k < keep; ++k)
    out.push_back({peaks[k].x > pw / 2 ? peaks[k].x - pw : peaks[k].x, peaks[k].y > ph / 2 ? peaks[k].y - ph : peaks[k].y});
  return out;
}

}  // namespace

MatchResult match_pair(const LinearImage& ia, const LinearImage& ib, const std::optional<Vec2>& hint,
                       double search_radius, const MatchParams& params,
                       const std::vector<std::uint8_t>* valid_a, const std::vector<std::uint8_t>* valid_b) {
  if (ia.empty() || ib.empty()) throw Error(ErrorKind::InvalidArgument, "match_pair needs non-empty images");
  const cv::Mat a = gray_of(ia), b = gray_of(ib);
  const cv::Mat ma = mask_of(valid_a, ia), mb = mask_of(valid_b, ib);
  const double usable_a = ma.empty() ? static_cast<double>(a.total()) : cv::countNonZero(ma);
  const double usable_b = mb.empty() ? static_cast<double>(b.total()) : cv::countNonZero(mb);
  const double min_area = std::max(16.0, params.min_overlap * std::min(usable_a, usable_b));

  std::vector<cv::Point> candidates;
  if (hint && search_radius < 1) {
    candidates.push_back({static_cast<int>(std::lround(hint->x())), static_cast<int>(std::lround(hint->y()))});
  } else {
    const int pw = cv::getOptimalDFTSize(a.cols + b.cols), ph = cv::getOptimalDFTSize(a.rows + b.rows);
    auto prepare = [&](const cv::Mat& m, const cv::Mat& mask) {
      cv::Mat padded = cv::Mat::zeros(ph, pw, CV_64F);
      const double mean = cv::mean(m, mask.empty() ? cv::noArray() : mask)[0];
      // Short cosine taper keeps image edges out of the spectrum without
      // suppressing the overlap, which always touches an edge.
      const int tx = std::clamp(m.cols / 16, 1, 8), ty = std::clamp(m.rows / 16, 1, 8);
      for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
          if (!mask.empty() && !mask.at<std::uint8_t>(y, x)) continue;
          double w = 1;
          const int dx = std::min(x, m.cols - 1 - x), dy = std::min(y, m.rows - 1 - y);
          if (dx < tx) w *= 0.5 - 0.5 * std::cos(M_PI * dx / tx);
          if (dy < ty) w *= 0.5 - 0.5 * std::cos(M_PI * dy / ty);
          padded.at<double>(y, x) = w * (m.at<double>(y, x) - mean);
        }
      cv::Mat f;
      cv::dft(padded, f, cv::DFT_COMPLEX_OUTPUT);
      return f;
    };
    const cv::Mat fa = prepare(a, ma), fb = prepare(b, mb);
    cv::Mat cross;
    cv::mulSpectrums(fa, fb, cross, 0, true);
    for (int y = 0; y < cross.rows; ++y)
      for (int x = 0; x < cross.cols; ++x) {
        auto& v = cross.at<cv::Vec2d>(y, x);
        const double mag = std::hypot(v[0], v[1]);
        if (mag > 1e-30) v /= mag;
      }
    cv::Mat corr;
    cv::dft(cross, corr, cv::DFT_INVERSE | cv::DFT_REAL_OUTPUT | cv::DFT_SCALE);
    struct Peak {
      double v;
      int x, y;
    };
    std::vector<Peak> peaks;
    for (int y = 0; y < corr.rows; ++y)
      for (int x = 0; x < corr.cols; ++x) {
        const double v = corr.at<double>(y, x);
        bool is_max = true;
        for (int dy = -1; dy <= 1 && is_max; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (!dx && !dy) continue;
            const int xx = (x + dx + corr.cols) % corr.cols, yy = (y + dy + corr.rows) % corr.rows;
            if (corr.at<double>(yy, xx) > v) {
              is_max = false;
              break;
            }
          }
        if (is_max) peaks.push_back({v, x, y});
      }
    const std::size_t keep = std::min<std::size_t>(16, peaks.size());
    std::partial_sort(peaks.begin(), peaks.begin() + static_cast<std::ptrdiff_t>(keep), peaks.end(),
                      [](const Peak& p, const Peak& q) { return p.v > q.v || (p.v == q.v && (p.y < q.y || (p.y == q.y && p.x < q.x))); });
    peaks.resize(keep);
    for (const auto& p : peaks) {
      const int ox = p.x > pw / 2 ? p.x - pw : p.x;
      const int oy = p.y > ph / 2 ? p.y - ph : p.y;
      if (hint && std::hypot(ox - hint->x(), oy - hint->y()) > search_radius) continue;
      candidates.push_back({ox, oy});
    }
    // Whitened peaks miss small overlaps of quasi-periodic content; the
    // exact masked NCC surface covers those.
    for (const auto& c : masked_ncc_peaks(a, b, ma, mb, min_area, 4)) {
      if (hint && std::hypot(c.x - hint->x(), c.y - hint->y()) > search_radius) continue;
      candidates.push_back(c);
    }
  }

  // Best candidate by overlap NCC, then a local integer search.
  double best = -2;
  cv::Point best_off;
  for (const auto& c : candidates) {
    if (overlap_area(overlap_of(a, b, c.x, c.y), ma, mb) < min_area) continue;
    for (int dy = -2; dy <= 2; ++dy)
      for (int dx = -2; dx <= 2; ++dx) {
        const Overlap od = overlap_of(a, b, c.x + dx, c.y + dy);
        if (overlap_area(od, ma, mb) < min_area) continue;
        const double s = ncc(a, b, od, nullptr, ma, mb);
        if (s > best) {
          best = s;
          best_off = {c.x + dx, c.y + dy};
        }
      }
  }
  if (best < -1) throw Error(ErrorKind::MatchFailure, "no candidate offset with sufficient overlap");
  double contrast = 0;
  const Overlap ob = overlap_of(a, b, best_off.x, best_off.y);
  const double score = ncc(a, b, ob, &contrast, ma, mb);
  if (contrast < params.min_contrast)
    throw Error(ErrorKind::MatchFailure, "overlap has too little texture to match");
  if (score < params.min_score)
    throw Error(ErrorKind::MatchFailure, "overlap correlation " + std::to_string(score) + " below threshold");

  auto score_at = [&](int x, int y) { return ncc(a, b, overlap_of(a, b, x, y), nullptr, ma, mb); };
  Vec2 off(best_off.x + parabola_peak(score_at(best_off.x - 1, best_off.y), score, score_at(best_off.x + 1, best_off.y)),
           best_off.y + parabola_peak(score_at(best_off.x, best_off.y - 1), score, score_at(best_off.x, best_off.y + 1)));
  Vec2 refined = off;
  if (refine_translation(a, b, ma, mb, refined)) off = refined;

  MatchResult res;
  res.offset = off;
  res.score = score;

  // Point pairs from a grid of patches inside the overlap.
  const int ps = params.patch_size, half = ps / 2;
  const int ix = static_cast<int>(std::lround(off.x())), iy = static_cast<int>(std::lround(off.y()));
  const Overlap o = overlap_of(a, b, ix, iy);
  const int margin = half + 3;
  auto all_valid = [](const cv::Mat& m, int x0, int y0, int w, int h) {
    if (m.empty()) return true;
    return cv::countNonZero(m(cv::Rect(x0, y0, w, h))) == w * h;
  };
  if (o.w > 2 * margin && o.h > 2 * margin) {
    for (int gy = 0; gy < params.patch_grid; ++gy)
      for (int gx = 0; gx < params.patch_grid; ++gx) {
        const double fx = (gx + 0.5) / params.patch_grid, fy = (gy + 0.5) / params.patch_grid;
        const int bx = o.bx0 + margin + static_cast<int>(fx * (o.w - 2 * margin));
        const int by = o.by0 + margin + static_cast<int>(fy * (o.h - 2 * margin));
        const Overlap p0{bx - half + ix, by - half + iy, bx - half, by - half, ps, ps};
        if (p0.ax0 < 1 || p0.ay0 < 1 || p0.ax0 + ps + 1 > a.cols || p0.ay0 + ps + 1 > a.rows) continue;
        if (!all_valid(mb, p0.bx0, p0.by0, ps, ps) || !all_valid(ma, p0.ax0 - 1, p0.ay0 - 1, ps + 2, ps + 2)) continue;
        auto patch_score = [&](int dx, int dy) {
          Overlap p = p0;
          p.ax0 += dx;
          p.ay0 += dy;
          return ncc(a, b, p);
        };
        double c_contrast = 0;
        ncc(a, b, p0, &c_contrast);
        if (c_contrast < params.min_contrast) continue;
        const double c0 = patch_score(0, 0);
        if (c0 < params.min_patch_score) continue;
        const double sx = parabola_peak(patch_score(-1, 0), c0, patch_score(1, 0));
        const double sy = parabola_peak(patch_score(0, -1), c0, patch_score(0, 1));
        MatchPoint mp;
        mp.b = Vec2(bx, by);
        mp.a = Vec2(bx + ix + sx, by + iy + sy);
        mp.score = c0;
        if ((mp.a - mp.b - off).norm() > 1.0) continue;
        res.points.push_back(mp);
      }
  }
  if (static_cast<int>(res.points.size()) < params.min_points)
    throw Error(ErrorKind::MatchFailure, "only " + std::to_string(res.points.size()) +
                                             " well-textured point pairs in the overlap");
  return res;
}

ControlPointSet map_points_to_scan(const std::vector<LatticePair>& points, int tile_a, int tile_b,
                                   const MeshTransform& mesh_a, const MeshTransform& mesh_b) {
  ControlPointSet out;
  out.reserve(points.size());
  for (const auto& p : points) {
    ControlPoint cp;
    cp.tile_a = tile_a;
    cp.tile_b = tile_b;
    cp.lattice_a = p.a;
    cp.lattice_b = p.b;
    cp.scan_a = mesh_a.forward(LatticeCoord::from(p.a));
    cp.scan_b = mesh_b.forward(LatticeCoord::from(p.b));
    out.push_back(cp);
  }
  return out;
}

LayoutResult solve_layout(int tiles, const std::vector<LayoutEdge>& edges, double snap_tolerance) {
  if (tiles < 1) throw Error(ErrorKind::InvalidArgument, "layout needs at least one tile");
  LayoutResult res;
  res.offsets.assign(static_cast<std::size_t>(tiles), Vec2::Zero());
  res.component.assign(static_cast<std::size_t>(tiles), -1);
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(tiles));
  for (const auto& e : edges) {
    if (e.a < 0 || e.b < 0 || e.a >= tiles || e.b >= tiles || e.a == e.b)
      throw Error(ErrorKind::InvalidArgument, "layout edge references an invalid tile");
    if (!(e.weight > 0)) continue;
    adj[static_cast<std::size_t>(e.a)].push_back(e.b);
    adj[static_cast<std::size_t>(e.b)].push_back(e.a);
  }
  for (int t = 0; t < tiles; ++t) {
    if (res.component[static_cast<std::size_t>(t)] >= 0) continue;
    const int c = res.components++;
    std::deque<int> q{t};
    res.component[static_cast<std::size_t>(t)] = c;
    while (!q.empty()) {
      const int u = q.front();
      q.pop_front();
      for (int v : adj[static_cast<std::size_t>(u)])
        if (res.component[static_cast<std::size_t>(v)] < 0) {
          res.component[static_cast<std::size_t>(v)] = c;
          q.push_back(v);
        }
    }
  }
  if (res.components > 1)
    res.warnings.push_back("tile graph has " + std::to_string(res.components) +
                           " components; each is placed independently");

  for (int c = 0; c < res.components; ++c) {
    std::vector<int> members;
    for (int t = 0; t < tiles; ++t)
      if (res.component[static_cast<std::size_t>(t)] == c) members.push_back(t);
    if (members.size() < 2) continue;
    // Unknowns: every member except the pinned first one.
    std::vector<int> var(static_cast<std::size_t>(tiles), -1);
    for (std::size_t k = 1; k < members.size(); ++k) var[static_cast<std::size_t>(members[k])] = static_cast<int>(k - 1);
    const int n = static_cast<int>(members.size()) - 1;
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n, 2);
    for (const auto& e : edges) {
      if (!(e.weight > 0) || res.component[static_cast<std::size_t>(e.a)] != c) continue;
      const int ia = var[static_cast<std::size_t>(e.a)], ib = var[static_cast<std::size_t>(e.b)];
      // Residual: x_b - x_a - offset.
      if (ib >= 0) {
        l(ib, ib) += e.weight;
        rhs.row(ib) += e.weight * e.offset.transpose();
      }
      if (ia >= 0) {
        l(ia, ia) += e.weight;
        rhs.row(ia) -= e.weight * e.offset.transpose();
      }
      if (ia >= 0 && ib >= 0) {
        l(ia, ib) -= e.weight;
        l(ib, ia) -= e.weight;
      }
    }
    const Eigen::MatrixXd x = l.ldlt().solve(rhs);
    for (std::size_t k = 1; k < members.size(); ++k)
      res.offsets[static_cast<std::size_t>(members[k])] = Vec2(x(static_cast<Eigen::Index>(k - 1), 0),
                                                                x(static_cast<Eigen::Index>(k - 1), 1));
  }
  if (snap_tolerance > 0)
    for (auto& o : res.offsets) {
      const Vec2 r(std::round(o.x()), std::round(o.y()));
      if ((o - r).cwiseAbs().maxCoeff() < snap_tolerance) o = r;
    }
  for (const auto& e : edges)
    res.edge_residuals.push_back(
        (res.offsets[static_cast<std::size_t>(e.b)] - res.offsets[static_cast<std::size_t>(e.a)] - e.offset).norm());
  return res;
}

GainResult estimate_gains(const std::vector<PlacedImage>& tiles) {
  const int n = static_cast<int>(tiles.size());
  GainResult res;
  res.gains.assign(tiles.size(), Vec3::Ones());
  if (n == 0) return res;
  for (const auto& t : tiles)
    if (!t.image || t.image->channels() != 3)
      throw Error(ErrorKind::InvalidArgument, "estimate_gains needs rgb tiles");
  struct Obs {
    int a, b;
    Vec3 log_ratio;  // log(mean_a / mean_b)
    double weight;
  };
  std::vector<Obs> obs;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const auto& ta = tiles[static_cast<std::size_t>(i)];
      const auto& tb = tiles[static_cast<std::size_t>(j)];
      const int ax = static_cast<int>(std::lround(ta.offset.x())), ay = static_cast<int>(std::lround(ta.offset.y()));
      const int bx = static_cast<int>(std::lround(tb.offset.x())), by = static_cast<int>(std::lround(tb.offset.y()));
      const int x0 = std::max(ax, bx), y0 = std::max(ay, by);
      const int x1 = std::min(ax + ta.image->width(), bx + tb.image->width());
      const int y1 = std::min(ay + ta.image->height(), by + tb.image->height());
      if (x1 <= x0 || y1 <= y0) continue;
      Vec3 sa = Vec3::Zero(), sb = Vec3::Zero();
      std::size_t count = 0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const std::size_t ka = static_cast<std::size_t>(y - ay) * ta.image->width() + (x - ax);
          const std::size_t kb = static_cast<std::size_t>(y - by) * tb.image->width() + (x - bx);
          if ((ta.valid && !(*ta.valid)[ka]) || (tb.valid && !(*tb.valid)[kb])) continue;
          const float* pa = ta.image->pixel(x - ax, y - ay);
          const float* pb = tb.image->pixel(x - bx, y - by);
          for (int c = 0; c < 3; ++c) {
            sa[c] += pa[c];
            sb[c] += pb[c];
          }
          ++count;
        }
      if (count < 16 || (sa.array() <= 0).any() || (sb.array() <= 0).any()) continue;
      obs.push_back({i, j, (sa.array() / sb.array()).log().matrix(), std::sqrt(static_cast<double>(count))});
    }
  if (obs.empty()) {
    if (n > 1) res.warnings.push_back("no overlap statistics; unit gains used");
    return res;
  }
  std::vector<LayoutEdge> edges;
  for (int c = 0; c < 3; ++c) {
    edges.clear();
    // log g_b - log g_a = log(mean_a / mean_b).
    for (const auto& o : obs) edges.push_back({o.a, o.b, Vec2(o.log_ratio[c], 0), o.weight});
    const LayoutResult lr = solve_layout(n, edges);
    for (int t = 0; t < n; ++t) res.gains[static_cast<std::size_t>(t)][c] = std::exp(lr.offsets[static_cast<std::size_t>(t)].x());
    if (c == 0)
      for (const auto& w : lr.warnings) res.warnings.push_back(w);
  }
  return res;
}

namespace {

inline void keys_weights(double t, double w[4]) {
  // a = -0.5
  const double t2 = t * t, t3 = t2 * t;
  w[0] = -0.5 * t3 + t2 - 0.5 * t;
  w[1] = 1.5 * t3 - 2.5 * t2 + 1.0;
  w[2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
  w[3] = 0.5 * t3 - 0.5 * t2;
}

}  // namespace

float sample_cubic(const LinearImage& img, double x, double y, int c) {
  const int ix = static_cast<int>(std::floor(x)), iy = static_cast<int>(std::floor(y));
  double wx[4], wy[4];
  keys_weights(x - ix, wx);
  keys_weights(y - iy, wy);
  double acc = 0;
  for (int j = 0; j < 4; ++j) {
    const int yy = std::clamp(iy - 1 + j, 0, img.height() - 1);
    double row = 0;
    for (int i = 0; i < 4; ++i) {
      const int xx = std::clamp(ix - 1 + i, 0, img.width() - 1);
      row += wx[i] * img.at(xx, yy, c);
    }
    acc += wy[j] * row;
  }
  return static_cast<float>(acc);
}

RenderedTile render_tile(const LinearImage& img, const MeshTransform& mesh, const Vec2& placement,
                         const Vec3& gain, const CanvasSpec& canvas, const RenderTileParams& params) {
  if (!(canvas.px_per_lattice > 0)) throw Error(ErrorKind::InvalidArgument, "canvas scale must be positive");
  const double s = canvas.px_per_lattice;
  const Vec2 lo = (mesh.domain_min() + placement - canvas.origin) * s;
  const Vec2 hi = (mesh.domain_max() + placement - canvas.origin) * s;
  RenderedTile out;
  out.x0 = std::clamp(static_cast<int>(std::floor(lo.x())), 0, canvas.width);
  out.y0 = std::clamp(static_cast<int>(std::floor(lo.y())), 0, canvas.height);
  const int x1 = std::clamp(static_cast<int>(std::ceil(hi.x())) + 1, 0, canvas.width);
  const int y1 = std::clamp(static_cast<int>(std::ceil(hi.y())) + 1, 0, canvas.height);
  const int w = std::max(1, x1 - out.x0), h = std::max(1, y1 - out.y0);
  const int ch = img.channels();
  out.image = LinearImage(w, h, ch);
  out.alpha = LinearImage(w, h, 1);
  const double feather = std::max(params.feather_px, 1e-9);
  parallel_for(static_cast<std::size_t>(h), params.workers, [&](std::size_t row) {
    const int y = static_cast<int>(row);
    for (int x = 0; x < w; ++x) {
      const Vec2 local = canvas.origin + Vec2(out.x0 + x, out.y0 + y) / s - placement;
      const double dd = std::min({local.x() - mesh.domain_min().x(), mesh.domain_max().x() - local.x(),
                                  local.y() - mesh.domain_min().y(), mesh.domain_max().y() - local.y()});
      if (dd <= 0) continue;
      const Vec2 xy = mesh.forward_unchecked(LatticeCoord::from(local));
      const double di = std::min({xy.x(), xy.y(), img.width() - 1.0 - xy.x(), img.height() - 1.0 - xy.y()});
      if (di <= 0) continue;
      out.alpha.at(x, y) = static_cast<float>(std::clamp(std::min(dd * s, di) / feather, 0.0, 1.0));
      for (int c = 0; c < ch; ++c)
        out.image.at(x, y, c) = static_cast<float>(gain[std::min(c, 2)] * sample_cubic(img, xy.x(), xy.y(), c));
    }
  });
  return out;
}

namespace {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t k = 0; k < n; ++k) {
    h ^= p[k];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

BlendResult blend(const std::vector<RenderedTile>& tiles, int width, int height) {
  if (width < 1 || height < 1) throw Error(ErrorKind::InvalidArgument, "blend canvas must be non-empty");
  int ch = 0;
  for (const auto& t : tiles) {
    if (ch && t.image.channels() != ch) throw Error(ErrorKind::InvalidArgument, "tiles differ in channel count");
    ch = t.image.channels();
  }
  if (!ch) ch = 3;
  // Canonical accumulation order makes the sum independent of input order.
  std::vector<std::size_t> order(tiles.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> keys(tiles.size());
  for (std::size_t k = 0; k < tiles.size(); ++k) {
    const auto& t = tiles[k];
    std::uint64_t h = fnv1a(t.image.data().data(), t.image.data().size() * sizeof(float));
    keys[k] = fnv1a(t.alpha.data().data(), t.alpha.data().size() * sizeof(float), h);
  }
  std::sort(order.begin(), order.end(), [&](std::size_t p, std::size_t q) {
    const auto& a = tiles[p];
    const auto& b = tiles[q];
    return std::tie(a.y0, a.x0, keys[p]) < std::tie(b.y0, b.x0, keys[q]);
  });

  const std::size_t n = static_cast<std::size_t>(width) * height;
  std::vector<double> acc(n * ch, 0.0), wsum(n, 0.0);
  std::vector<std::uint8_t> count(n, 0), uniform(n, 1);
  std::vector<float> first(n * ch, 0.0f);
  for (std::size_t k : order) {
    const auto& t = tiles[k];
    for (int y = 0; y < t.alpha.height(); ++y) {
      const int cy = t.y0 + y;
      if (cy < 0 || cy >= height) continue;
      for (int x = 0; x < t.alpha.width(); ++x) {
        const int cx = t.x0 + x;
        if (cx < 0 || cx >= width) continue;
        const float a = t.alpha.at(x, y);
        if (!(a > 0)) continue;
        const std::size_t p = static_cast<std::size_t>(cy) * width + cx;
        const float* v = t.image.pixel(x, y);
        if (count[p] == 0) {
          for (int c = 0; c < ch; ++c) first[p * ch + c] = v[c];
        } else {
          for (int c = 0; c < ch; ++c)
            if (first[p * ch + c] != v[c]) uniform[p] = 0;
        }
        count[p] = static_cast<std::uint8_t>(std::min(255, count[p] + 1));
        wsum[p] += a;
        for (int c = 0; c < ch; ++c) acc[p * ch + c] += static_cast<double>(a) * v[c];
      }
    }
  }
  BlendResult res;
  res.image = LinearImage(width, height, ch);
  res.coverage = LinearImage(width, height, 1);
  for (std::size_t p = 0; p < n; ++p) {
    res.coverage.data()[p] = static_cast<float>(wsum[p]);
    if (count[p] == 0) continue;
    for (int c = 0; c < ch; ++c)
      res.image.data()[p * ch + c] =
          uniform[p] ? first[p * ch + c] : static_cast<float>(acc[p * ch + c] / wsum[p]);
  }
  return res;
}

}  // namespace screenreg
