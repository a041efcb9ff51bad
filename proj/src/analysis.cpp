#include "screenreg/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <deque>
#include <limits>
#include <unordered_map>

namespace screenreg {

PatchGrid::PatchGrid(LatticeRect bounds, int sites_per_cell, int image_width, int image_height)
    : bounds_(bounds), sites_(sites_per_cell), image_w_(image_width), image_h_(image_height) {
  if (bounds.width < 0 || bounds.height < 0 || sites_per_cell < 1)
    throw Error(ErrorKind::InvalidArgument, "invalid patch grid shape");
  records_.resize(bounds.cell_count() * static_cast<std::size_t>(sites_per_cell));
}

std::size_t PatchGrid::valid_count() const {
  return static_cast<std::size_t>(
      std::count_if(records_.begin(), records_.end(), [](const SiteRecord& r) { return r.valid; }));
}

double coverage(const PatchGrid& pg) {
  std::size_t total = 0, valid = 0;
  for (const auto& r : pg.records()) {
    if (r.valid) {
      ++valid;
      ++total;
    } else if (pg.center_in_image(r.center)) {
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(valid) / static_cast<double>(total);
}

double area_coverage(const PatchGrid& pg, const LocalFrame& frame, const ScreenSpec& spec) {
  const double cell_area = frame.pitch() * frame.pitch();
  if (!(cell_area > 0) || pg.empty()) return 0.0;
  const double expected = static_cast<double>(pg.image_width()) * pg.image_height() / cell_area *
                          static_cast<double>(spec.site_count());
  return std::min(1.0, static_cast<double>(pg.valid_count()) / expected);
}

void validate_frame(const LocalFrame& frame, const ScreenSpec& spec) {
  const double cross = frame.a1.x() * frame.a2.y() - frame.a1.y() * frame.a2.x();
  const double pitch = spec.nominal_pitch_px();
  const double l1 = frame.a1.norm(), l2 = frame.a2.norm() / spec.aspect();
  if (!std::isfinite(cross) || std::abs(cross) < 1e-6 * frame.a1.squaredNorm() ||
      l1 < 0.25 * pitch || l1 > 4 * pitch || l2 < 0.25 * pitch || l2 > 4 * pitch)
    throw Error(ErrorKind::InvalidArgument, "degenerate local frame");
}

namespace {

struct Blob {
  double mass = 0;
  Vec2 centroid = Vec2::Zero();
  bool touches_edge = false;  // the piece reaches the image border, so it may be cut off
};

// Stray pixels of the wanted label (noise in the gaps, neighbours' fringes)
// would pull the centroid and make it depend on where the window sits, so
// only the largest 8-connected piece inside the window counts.
Blob measure_blob(const ClassMap& cm, Label want, const Vec2& center, double radius) {
  Blob b;
  const int x0 = std::max(0, static_cast<int>(std::floor(center.x() - radius)));
  const int x1 = std::min(cm.width - 1, static_cast<int>(std::ceil(center.x() + radius)));
  const int y0 = std::max(0, static_cast<int>(std::floor(center.y() - radius)));
  const int y1 = std::min(cm.height - 1, static_cast<int>(std::ceil(center.y() + radius)));
  if (x1 < x0 || y1 < y0) return b;
  const int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
  const double r2 = radius * radius;
  // 1 = wanted pixel inside the disc, 2 = already assigned to a piece.
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(bw) * bh, 0);
  for (int y = y0; y <= y1; ++y) {
    const double dy = y - center.y();
    const Label* row = cm.labels.data() + static_cast<std::size_t>(y) * cm.width;
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - center.x();
      if (dx * dx + dy * dy <= r2 && row[x] == want)
        mask[static_cast<std::size_t>(y - y0) * bw + (x - x0)] = 1;
    }
  }
  std::vector<int> stack;
  double best_d2 = 0;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (mask[start] != 1) continue;
    mask[start] = 2;
    stack.assign(1, static_cast<int>(start));
    double mass = 0, sx = 0, sy = 0;
    bool edge = false;
    while (!stack.empty()) {
      const int k = stack.back();
      stack.pop_back();
      const int lx = k % bw, ly = k / bw;
      mass += 1;
      sx += x0 + lx;
      sy += y0 + ly;
      edge = edge || x0 + lx == 0 || y0 + ly == 0 || x0 + lx == cm.width - 1 || y0 + ly == cm.height - 1;
      for (int ny = std::max(0, ly - 1); ny <= std::min(bh - 1, ly + 1); ++ny)
        for (int nx = std::max(0, lx - 1); nx <= std::min(bw - 1, lx + 1); ++nx) {
          const std::size_t n = static_cast<std::size_t>(ny) * bw + nx;
          if (mask[n] == 1) {
            mask[n] = 2;
            stack.push_back(static_cast<int>(n));
          }
        }
    }
    const Vec2 c(sx / mass, sy / mass);
    const double d2 = (c - center).squaredNorm();
    if (mass > b.mass || (mass == b.mass && d2 < best_d2)) {
      b.mass = mass;
      b.centroid = c;
      b.touches_edge = edge;
      best_d2 = d2;
    }
  }
  return b;
}

/// Pixel area of a site's patch under the given basis.
double patch_area(const ScreenSite& s, const Vec2& a1, const Vec2& a2) {
  return 4.0 * s.extent.x() * s.extent.y() * std::abs(a1.x() * a2.y() - a1.y() * a2.x());
}

/// True when the site's patch box lies inside the image.
bool patch_inside(const ScreenSite& s, const Vec2& center, const Vec2& a1, const Vec2& a2, int w,
                  int h) {
  const Vec2 hu = s.extent.x() * a1, hv = s.extent.y() * a2;
  const double ex = std::abs(hu.x()) + std::abs(hv.x());
  const double ey = std::abs(hu.y()) + std::abs(hv.y());
  return center.x() - ex >= -0.5 && center.y() - ey >= -0.5 && center.x() + ex <= w - 0.5 &&
         center.y() + ey <= h - 0.5;
}

struct SiteMeasurement {
  bool accepted = false;
  Vec2 center = Vec2::Zero();
  double weight = 0;
};

struct MeasureRule {
  double window_factor;
  double min_mass_ratio;
  double max_displacement;
};

SiteMeasurement measure_site(const ClassMap& cm, const ScreenSpec& spec, std::size_t site_index,
                             const Vec2& predicted, const Vec2& a1, const Vec2& a2,
                             const MeasureRule& rule) {
  SiteMeasurement m;
  const ScreenSite& s = spec.site(site_index);
  const double pitch = std::sqrt(std::abs(a1.x() * a2.y() - a1.y() * a2.x()));
  const double radius = rule.window_factor * spec.same_color_spacing(site_index) * a1.norm();
  const Blob b = measure_blob(cm, label_of(s.color), predicted, radius);
  const double area = patch_area(s, a1, a2);
  if (b.touches_edge || b.mass < rule.min_mass_ratio * area) return m;
  if ((b.centroid - predicted).norm() > rule.max_displacement * pitch) return m;
  m.accepted = true;
  m.center = b.centroid;
  m.weight = std::min(1.0, b.mass / area);
  return m;
}

/// Connected component of one label grown from a pixel, 4-connectivity,
/// restricted to a clip box. Gives up once the area exceeds max_area.
struct Component {
  double area = 0;
  Vec2 centroid = Vec2::Zero();
  bool overflow = false;
};

class ComponentFinder {
 public:
  ComponentFinder(const ClassMap& cm, int x0, int y0, int x1, int y1)
      : cm_(cm), x0_(x0), y0_(y0), w_(x1 - x0 + 1), h_(y1 - y0 + 1),
        seen_(static_cast<std::size_t>(w_) * h_, 0) {}

  bool seen(int x, int y) const { return seen_[idx(x, y)] != 0; }

  Component grow(int sx, int sy, double max_area) {
    Component c;
    const Label want = cm_.at(sx, sy);
    std::vector<std::pair<int, int>> stack{{sx, sy}};
    seen_[idx(sx, sy)] = 1;
    double cx = 0, cy = 0;
    while (!stack.empty()) {
      auto [x, y] = stack.back();
      stack.pop_back();
      c.area += 1;
      cx += x;
      cy += y;
      if (c.area > max_area) c.overflow = true;
      const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
      for (const auto& d : nb) {
        const int nx = x + d[0], ny = y + d[1];
        if (nx < x0_ || ny < y0_ || nx >= x0_ + w_ || ny >= y0_ + h_) continue;
        if (seen_[idx(nx, ny)] || cm_.at(nx, ny) != want) continue;
        seen_[idx(nx, ny)] = 1;
        stack.emplace_back(nx, ny);
      }
    }
    c.centroid = Vec2(cx / c.area, cy / c.area);
    return c;
  }

 private:
  std::size_t idx(int x, int y) const {
    return static_cast<std::size_t>(y - y0_) * w_ + (x - x0_);
  }
  const ClassMap& cm_;
  int x0_, y0_, w_, h_;
  std::vector<std::uint8_t> seen_;
};

double angle_of(const Vec2& v) { return std::atan2(v.y(), v.x()); }

/// Maps a1 onto a2 for the nominal screen shape (scale + rotation).
Mat2 a2_from_a1(const ScreenSpec& spec) {
  const double ang = spec.basis_angle();
  Mat2 rot;
  rot << std::cos(ang), -std::sin(ang), std::sin(ang), std::cos(ang);
  return spec.aspect() * rot;
}

}  // namespace

LocalFrame find_seed(const ClassMap& cm, const ScreenSpec& spec, const Vec2& start,
                     const SeedParams& params) {
  if (!cm.contains(static_cast<int>(std::lround(start.x())), static_cast<int>(std::lround(start.y()))))
    throw Error(ErrorKind::InvalidArgument, "seed start outside image");
  const double pitch = spec.nominal_pitch_px();
  Vec2 na1, na2;
  spec.nominal_pixel_basis(na1, na2);
  const ScreenSite& gs = spec.site(spec.seed_green_site());
  const ScreenSite& bs = spec.site(spec.seed_blue_site());
  const double g_area = patch_area(gs, na1, na2);
  const double b_area = patch_area(bs, na1, na2);
  const Vec2 delta = bs.offset - gs.offset;
  const double gb_dist = (delta.x() * na1 + delta.y() * na2).norm();

  // D = (du I + dv A) a1 where a2 = A a1.
  const Mat2 A = a2_from_a1(spec);
  const Mat2 to_a1 = (delta.x() * Mat2::Identity() + delta.y() * A).inverse();

  const double radius = params.search_radius_cells * pitch;
  const int x0 = std::max(0, static_cast<int>(start.x() - radius));
  const int y0 = std::max(0, static_cast<int>(start.y() - radius));
  const int x1 = std::min(cm.width - 1, static_cast<int>(start.x() + radius));
  const int y1 = std::min(cm.height - 1, static_cast<int>(start.y() + radius));

  std::vector<std::pair<double, std::pair<int, int>>> greens;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (cm.at(x, y) == Label::Green) {
        const double d2 = (Vec2(x, y) - start).squaredNorm();
        if (d2 <= radius * radius) greens.push_back({d2, {x, y}});
      }
  if (greens.empty()) throw Error(ErrorKind::NoSeed, "no green pixels near seed start");
  std::sort(greens.begin(), greens.end(), [](const auto& a, const auto& b) {
    return a.first < b.first || (a.first == b.first && a.second < b.second);
  });

  ComponentFinder gfind(cm, x0, y0, x1, y1);
  int tried = 0;
  bool any_green = false;
  for (const auto& [d2, xy] : greens) {
    if (gfind.seen(xy.first, xy.second)) continue;
    if (++tried > 400) break;
    const Component g = gfind.grow(xy.first, xy.second, params.max_area_ratio * g_area);
    if (g.overflow || g.area < params.min_area_ratio * g_area) continue;
    any_green = true;

    const double br = 1.6 * gb_dist + 1.0;
    const int bx0 = std::max(0, static_cast<int>(g.centroid.x() - br));
    const int by0 = std::max(0, static_cast<int>(g.centroid.y() - br));
    const int bx1 = std::min(cm.width - 1, static_cast<int>(g.centroid.x() + br));
    const int by1 = std::min(cm.height - 1, static_cast<int>(g.centroid.y() + br));
    ComponentFinder bfind(cm, bx0, by0, bx1, by1);

    std::optional<LocalFrame> best;
    double best_angle = std::numeric_limits<double>::infinity();
    for (int y = by0; y <= by1; ++y)
      for (int x = bx0; x <= bx1; ++x) {
        if (cm.at(x, y) != Label::Blue || bfind.seen(x, y)) continue;
        const Component b = bfind.grow(x, y, params.max_area_ratio * b_area);
        if (b.overflow || b.area < params.min_area_ratio * b_area) continue;
        const Vec2 D = b.centroid - g.centroid;
        const double dist = D.norm();
        if (dist < 0.6 * gb_dist || dist > 1.4 * gb_dist) continue;
        Vec2 a1 = to_a1 * D;
        // The supported screens are symmetric under a half turn about a
        // green patch; pick the orientation whose a1 points right.
        if (a1.x() < 0 || (a1.x() == 0 && a1.y() < 0)) a1 = -a1;
        const double ang = std::abs(angle_of(a1));
        if (ang < best_angle - 1e-9) {
          best_angle = ang;
          LocalFrame f;
          f.origin = g.centroid;
          f.a1 = a1;
          f.a2 = A * a1;
          best = f;
        }
      }
    if (best) {
      const double l = best->a1.norm();
      if (l >= 0.25 * pitch && l <= 4 * pitch) return *best;
    }
  }
  if (!any_green) throw Error(ErrorKind::NoSeed, "no plausible green patch near seed start");
  throw Error(ErrorKind::NoSeed, "no blue patch adjacent to any green patch near seed start");
}

LocalFrame refine_seed_grid(const ClassMap& cm, const ScreenSpec& spec, const LocalFrame& frame,
                            const RefineParams& params) {
  validate_frame(frame, spec);
  const MeasureRule rule{params.window_factor, params.min_mass_ratio, params.max_displacement};
  LocalFrame cur = frame;
  const int n = params.half_size;
  const int total = (2 * n + 1) * (2 * n + 1);

  for (int iter = 0; iter < params.max_iterations; ++iter) {
    Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
    Eigen::Vector3d atx = Eigen::Vector3d::Zero(), aty = Eigen::Vector3d::Zero();
    int found_cells = 0;
    for (int j = -n; j <= n; ++j)
      for (int i = -n; i <= n; ++i) {
        bool found = false;
        for (std::size_t s = 0; s < spec.site_count(); ++s) {
          const ScreenSite& site = spec.site(s);
          if (!site.measurable()) continue;
          const double cu = i + site.offset.x() - spec.site(spec.seed_green_site()).offset.x();
          const double cv = j + site.offset.y() - spec.site(spec.seed_green_site()).offset.y();
          const Vec2 pred = cur.predict(cu, cv);
          if (!patch_inside(site, pred, cur.a1, cur.a2, cm.width, cm.height)) continue;
          const SiteMeasurement m = measure_site(cm, spec, s, pred, cur.a1, cur.a2, rule);
          if (!m.accepted) continue;
          found = true;
          const Eigen::Vector3d row(1.0, cu, cv);
          ata += m.weight * row * row.transpose();
          atx += m.weight * row * m.center.x();
          aty += m.weight * row * m.center.y();
        }
        if (found) ++found_cells;
      }
    if (found_cells < params.quorum * total)
      throw Error(ErrorKind::RefineFailure,
                  "only " + std::to_string(found_cells) + " of " + std::to_string(total) +
                      " seed-grid cells located");
    Eigen::FullPivLU<Eigen::Matrix3d> lu(ata);
    if (!lu.isInvertible()) throw Error(ErrorKind::RefineFailure, "seed grid fit is singular");
    const Eigen::Vector3d px = lu.solve(atx), py = lu.solve(aty);
    LocalFrame next;
    next.origin = Vec2(px[0], py[0]);
    next.a1 = Vec2(px[1], py[1]);
    next.a2 = Vec2(px[2], py[2]);
    const double change = std::max({(next.origin - cur.origin).norm(),
                                    n * (next.a1 - cur.a1).norm(), n * (next.a2 - cur.a2).norm()});
    cur = next;
    validate_frame(cur, spec);
    if (change < params.tolerance_px) break;
  }
  return cur;
}

namespace {

std::uint64_t cell_key(int i, int j) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(i)) << 32) |
         static_cast<std::uint32_t>(j);
}

struct FloodCell {
  int i = 0;
  int j = 0;
  bool accepted = false;
  int attempts = 0;
  Vec2 anchor = Vec2::Zero();
  std::size_t first_site = 0;  // into the flat site arena
};

/// Local affine model: anchor(i, j) = origin + (i - ci) a1 + (j - cj) a2.
struct LocalFit {
  Vec2 origin;
  Vec2 a1;
  Vec2 a2;
  int ci;
  int cj;
  Vec2 predict(double cu, double cv) const { return origin + (cu - ci) * a1 + (cv - cj) * a2; }
};

class FloodState {
 public:
  FloodState(const ScreenSpec& spec) : spec_(spec) {}

  FloodCell* find(int i, int j) {
    auto it = index_.find(cell_key(i, j));
    return it == index_.end() ? nullptr : &cells_[it->second];
  }
  FloodCell& get(int i, int j) {
    auto [it, inserted] = index_.try_emplace(cell_key(i, j), cells_.size());
    if (inserted) {
      FloodCell c;
      c.i = i;
      c.j = j;
      c.first_site = sites_.size();
      sites_.resize(sites_.size() + spec_.site_count());
      cells_.push_back(c);
    }
    return cells_[it->second];
  }
  SiteRecord& site(const FloodCell& c, std::size_t s) { return sites_[c.first_site + s]; }
  const std::vector<FloodCell>& cells() const { return cells_; }

  /// Fits the local affine model over accepted cells near (ci, cj).
  bool fit_local(int ci, int cj, int want, LocalFit& fit) {
    Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
    Eigen::Vector3d atx = Eigen::Vector3d::Zero(), aty = Eigen::Vector3d::Zero();
    int count = 0;
    for (int r = 0; r <= 4 && count < want; ++r) {
      for (int dj = -r; dj <= r; ++dj)
        for (int di = -r; di <= r; ++di) {
          if (std::max(std::abs(di), std::abs(dj)) != r) continue;
          const FloodCell* c = find(ci + di, cj + dj);
          if (!c || !c->accepted) continue;
          const Eigen::Vector3d row(1.0, di, dj);
          ata += row * row.transpose();
          atx += row * c->anchor.x();
          aty += row * c->anchor.y();
          ++count;
        }
    }
    if (count < 3) return false;
    Eigen::FullPivLU<Eigen::Matrix3d> lu(ata);
    if (!lu.isInvertible() || std::abs(ata.determinant()) < 1e-6) return false;
    const Eigen::Vector3d px = lu.solve(atx), py = lu.solve(aty);
    fit.origin = Vec2(px[0], py[0]);
    fit.a1 = Vec2(px[1], py[1]);
    fit.a2 = Vec2(px[2], py[2]);
    fit.ci = ci;
    fit.cj = cj;
    return true;
  }

 private:
  const ScreenSpec& spec_;
  std::unordered_map<std::uint64_t, std::size_t> index_;
  std::vector<FloodCell> cells_;
  std::vector<SiteRecord> sites_;
};

/// Measures every measurable site of a cell against a prediction. Returns
/// true if at least one site was accepted; fills the cell's anchor.
bool measure_cell(const ClassMap& cm, const ScreenSpec& spec, FloodState& st, FloodCell& cell,
                  const Vec2& anchor_pred, const Vec2& a1, const Vec2& a2, const MeasureRule& rule) {
  const Vec2 g0 = spec.site(spec.seed_green_site()).offset;
  Vec2 anchor_sum = Vec2::Zero();
  int accepted = 0;
  for (std::size_t s = 0; s < spec.site_count(); ++s) {
    const ScreenSite& site = spec.site(s);
    if (!site.measurable()) continue;
    const Vec2 off = site.offset - g0;
    const Vec2 pred = anchor_pred + off.x() * a1 + off.y() * a2;
    SiteRecord& rec = st.site(cell, s);
    rec.center = pred;
    rec.valid = false;
    rec.weight = 0;
    // Cut-off patches are rejected from the measured piece itself; a test on
    // the prediction would depend on the path the fill took to get here.
    if (pred.x() < -0.5 || pred.y() < -0.5 || pred.x() > cm.width - 0.5 || pred.y() > cm.height - 0.5)
      continue;
    const SiteMeasurement m = measure_site(cm, spec, s, pred, a1, a2, rule);
    if (!m.accepted) continue;
    rec.center = m.center;
    rec.valid = true;
    rec.weight = static_cast<float>(m.weight);
    anchor_sum += m.center - off.x() * a1 - off.y() * a2;
    ++accepted;
  }
  if (accepted == 0) return false;
  cell.anchor = anchor_sum / accepted;
  return true;
}

}  // namespace

PatchGrid flood_fill(const ClassMap& cm, const ScreenSpec& spec, const LocalFrame& frame,
                     const FloodParams& params) {
  validate_frame(frame, spec);
  const MeasureRule rule{params.window_factor, params.min_mass_ratio, params.max_displacement};
  FloodState st(spec);
  const Vec2 g0 = spec.site(spec.seed_green_site()).offset;
  // Lattice index (0,0) is the seed cell. A cell's anchor is the pixel
  // position of its seed-green site.
  const Vec2 seed_anchor = frame.origin;

  std::deque<std::pair<int, int>> queue;
  {
    FloodCell& seed = st.get(0, 0);
    seed.attempts = 1;
    if (measure_cell(cm, spec, st, seed, seed_anchor, frame.a1, frame.a2, rule)) {
      seed.accepted = true;
      queue.emplace_back(0, 0);
    }
  }

  const double margin = frame.pitch();
  const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
  while (!queue.empty()) {
    const auto [ci, cj] = queue.front();
    queue.pop_front();
    LocalFit fit;
    if (!st.fit_local(ci, cj, params.local_neighbors + 1, fit)) {
      fit.origin = st.find(ci, cj)->anchor;
      fit.a1 = frame.a1;
      fit.a2 = frame.a2;
      fit.ci = ci;
      fit.cj = cj;
    }
    for (const auto& d : nb) {
      const int ni = ci + d[0], nj = cj + d[1];
      FloodCell* existing = st.find(ni, nj);
      if (existing && (existing->accepted || existing->attempts >= params.max_attempts_per_cell))
        continue;
      const Vec2 pred = fit.predict(ni, nj);
      if (pred.x() < -margin || pred.y() < -margin || pred.x() > cm.width - 1 + margin ||
          pred.y() > cm.height - 1 + margin)
        continue;
      FloodCell& cell = st.get(ni, nj);
      ++cell.attempts;
      if (measure_cell(cm, spec, st, cell, pred, fit.a1, fit.a2, rule)) {
        cell.accepted = true;
        queue.emplace_back(ni, nj);
      }
    }
  }

  // Assemble the dense grid.
  int u0 = std::numeric_limits<int>::max(), v0 = u0, u1 = std::numeric_limits<int>::min(), v1 = u1;
  for (const auto& c : st.cells()) {
    if (!c.accepted) continue;
    u0 = std::min(u0, c.i);
    v0 = std::min(v0, c.j);
    u1 = std::max(u1, c.i);
    v1 = std::max(v1, c.j);
  }
  const int nsites = static_cast<int>(spec.site_count());
  if (u0 > u1) {
    PatchGrid empty(LatticeRect{0, 0, 0, 0}, nsites, cm.width, cm.height);
    empty.seed_frame = frame;
    return empty;
  }
  PatchGrid pg(LatticeRect{u0, v0, u1 - u0 + 1, v1 - v0 + 1}, nsites, cm.width, cm.height);
  pg.seed_frame = frame;

  // Global affine model for cells never reached.
  Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
  Eigen::Vector3d atx = Eigen::Vector3d::Zero(), aty = Eigen::Vector3d::Zero();
  for (const auto& c : st.cells()) {
    if (!c.accepted) continue;
    const Eigen::Vector3d row(1.0, c.i, c.j);
    ata += row * row.transpose();
    atx += row * c.anchor.x();
    aty += row * c.anchor.y();
  }
  LocalFrame global = frame;
  {
    Eigen::FullPivLU<Eigen::Matrix3d> lu(ata);
    if (lu.isInvertible()) {
      const Eigen::Vector3d px = lu.solve(atx), py = lu.solve(aty);
      global.origin = Vec2(px[0], py[0]);
      global.a1 = Vec2(px[1], py[1]);
      global.a2 = Vec2(px[2], py[2]);
    } else {
      global.origin = seed_anchor;
    }
  }

  for (int j = v0; j <= v1; ++j)
    for (int i = u0; i <= u1; ++i) {
      FloodCell* c = st.find(i, j);
      if (c && c->accepted) {
        LocalFit fit;
        if (!st.fit_local(i, j, params.local_neighbors + 1, fit)) {
          fit.origin = c->anchor;
          fit.a1 = global.a1;
          fit.a2 = global.a2;
          fit.ci = i;
          fit.cj = j;
        }
        for (int s = 0; s < nsites; ++s) {
          const ScreenSite& site = spec.site(static_cast<std::size_t>(s));
          const Vec2 off = site.offset - g0;
          SiteRecord& out = pg.at(i, j, s);
          if (site.measurable()) {
            out = st.site(*c, static_cast<std::size_t>(s));
          } else {
            out.center = fit.predict(i + off.x(), j + off.y());
            out.valid = patch_inside(site, out.center, fit.a1, fit.a2, cm.width, cm.height);
            out.weight = 0;
          }
        }
      } else {
        for (int s = 0; s < nsites; ++s) {
          const Vec2 off = spec.site(static_cast<std::size_t>(s)).offset - g0;
          SiteRecord& out = pg.at(i, j, s);
          out.center = global.predict(i + off.x(), j + off.y());
          out.valid = false;
          out.weight = 0;
        }
      }
    }
  return pg;
}

std::vector<Vec2> retry_starts(int width, int height, int count) {
  auto halton = [](int index, int base) {
    double f = 1, r = 0;
    while (index > 0) {
      f /= base;
      r += f * (index % base);
      index /= base;
    }
    return r;
  };
  std::vector<Vec2> out;
  for (int k = 1; k <= count; ++k)
    out.emplace_back((0.1 + 0.8 * halton(k, 2)) * (width - 1),
                     (0.1 + 0.8 * halton(k, 3)) * (height - 1));
  return out;
}

namespace {

// Side lengths share the image's parity so a region centered on the image
// is symmetric, which keeps the profile (and everything after it) unchanged
// when the image is mirrored or turned by quarter turns.
Rect region_around(const LinearImage& img, const Vec2& c, double fraction) {
  const auto side = [&](int full) {
    int n = std::min(std::max(8, static_cast<int>(full * fraction)), full);
    if ((full - n) % 2 != 0) n += n < full ? 1 : -1;
    return n;
  };
  Rect r;
  r.width = side(img.width());
  r.height = side(img.height());
  r.x = std::clamp(static_cast<int>(std::lround(c.x() - (r.width - 1) / 2.0)), 0, img.width() - r.width);
  r.y = std::clamp(static_cast<int>(std::lround(c.y() - (r.height - 1) / 2.0)), 0, img.height() - r.height);
  return r;
}

}  // namespace

TileAnalysis analyze_tile(const LinearImage& img, const ScreenSpec& spec,
                          const AnalysisParams& params) {
  if (img.channels() != 3) throw Error(ErrorKind::InvalidArgument, "analysis needs an RGB image");
  const double pitch = spec.nominal_pitch_px();
  if (img.width() < 10 * pitch || img.height() < 10 * pitch)
    throw Error(ErrorKind::InvalidArgument, "image too small for 10x10 screen cells");

  std::vector<Vec2> starts{Vec2((img.width() - 1) / 2.0, (img.height() - 1) / 2.0)};
  for (const auto& s : retry_starts(img.width(), img.height(), params.max_attempts - 1))
    starts.push_back(s);

  TileAnalysis result;
  std::vector<AttemptReport> attempts;

  // Profile from the center; fall back to regions around retry starts.
  bool have_profile = false;
  for (const auto& s : starts) {
    try {
      result.profile = estimate_profile(img, region_around(img, s, params.profile_region),
                                        params.profile);
      have_profile = true;
      break;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::ProfileFailure) throw;
      attempts.push_back({s, std::string(to_string(e.kind())), e.what(), 0.0});
    }
  }
  if (!have_profile) {
    std::string why = "profile estimation failed in every sample region";
    Error err(ErrorKind::TileAnalysisFailure, why);
    throw err;
  }

  result.primaries = apply_profile(img, result.profile);
  const double radius = params.unsharp_radius > 0 ? params.unsharp_radius : pitch / 4.0;
  const ClassMap cm = classify(unsharp(result.primaries, radius, params.unsharp_amount),
                               params.threshold);

  bool have_grid = false;
  for (const auto& s : starts) {
    AttemptReport rep;
    rep.start = s;
    try {
      LocalFrame f = find_seed(cm, spec, s, params.seed);
      f = refine_seed_grid(cm, spec, f, params.refine);
      PatchGrid pg = flood_fill(cm, spec, f, params.flood);
      rep.coverage = area_coverage(pg, f, spec);
      rep.outcome = "ok";
      if (!have_grid || rep.coverage > result.area_coverage) {
        result.frame = f;
        result.grid = std::move(pg);
        result.area_coverage = rep.coverage;
        have_grid = true;
      }
      attempts.push_back(rep);
      if (rep.coverage >= params.min_area_coverage) break;
      attempts.back().outcome = "low-coverage";
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NoSeed && e.kind() != ErrorKind::RefineFailure &&
          e.kind() != ErrorKind::InvalidArgument)
        throw;
      rep.outcome = std::string(to_string(e.kind()));
      rep.detail = e.what();
      attempts.push_back(rep);
    }
  }
  result.attempts = attempts;
  if (!have_grid || result.grid.valid_count() == 0) {
    std::string why = "tile analysis failed:";
    for (const auto& a : attempts) why += " [" + a.outcome + ": " + a.detail + "]";
    throw Error(ErrorKind::TileAnalysisFailure, why);
  }
  return result;
}

}  // namespace screenreg
