#include "screenreg/synth.hpp"

#include "screenreg/profiling.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>
#include <vector>

namespace screenreg {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double unit_from(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

}  // namespace

Vec2 TruthMap::warp(const Vec2& p) const {
  Vec2 out = p;
  for (const auto& w : warps) out += w.amplitude * std::sin(kTwoPi * w.direction.dot(p) / w.period + w.phase);
  return out;
}

Vec2 TruthMap::forward(const Vec2& lattice) const {
  return lens.distort(post.apply(warp(origin + lattice.x() * a1 + lattice.y() * a2)));
}

Vec2 TruthMap::inverse(const Vec2& xy) const {
  const Vec2 q = post.inverse().apply(lens.undistort(xy));
  Vec2 p = q;
  bool converged = warps.empty();
  for (int it = 0; it < 200 && !converged; ++it) {
    const Vec2 next = q - (warp(p) - p);
    converged = (next - p).norm() < 1e-11;
    p = next;
  }
  if (!converged) throw Error(ErrorKind::NonConvergence, "truth warp inversion did not converge");
  Mat2 a;
  a.col(0) = a1;
  a.col(1) = a2;
  return a.inverse() * (p - origin);
}

void TruthMap::validate() const {
  double lipschitz = 0;
  for (const auto& w : warps) {
    if (!(w.period > 0)) throw Error(ErrorKind::InvalidArgument, "warp period must be positive");
    lipschitz += w.amplitude.norm() * w.direction.norm() * kTwoPi / w.period;
  }
  if (lipschitz >= 1.0) throw Error(ErrorKind::InvalidArgument, "warp is not injective");
  if (std::abs(a1.x() * a2.y() - a1.y() * a2.x()) < 1e-9)
    throw Error(ErrorKind::InvalidArgument, "degenerate lattice basis");
  if (!post.invertible()) throw Error(ErrorKind::InvalidArgument, "singular homography");
}

Vec3 IntensityPattern::rgb(const Vec2& p) const {
  switch (kind) {
    case PatternKind::Uniform:
      return Vec3::Constant(value);
    case PatternKind::Random: {
      Vec3 out;
      for (int c = 0; c < 3; ++c) out[c] = at(p, static_cast<PatchColor>(c), {});
      return out;
    }
    case PatternKind::Smooth: {
      Vec3 out;
      for (int c = 0; c < 3; ++c) {
        double acc = 0;
        for (int k = 0; k < 4; ++k) {
          const std::uint64_t h = splitmix(seed * 131 + static_cast<std::uint64_t>(c * 16 + k));
          const double period = 6.0 + 34.0 * unit_from(h);
          const double ang = kTwoPi * unit_from(splitmix(h + 1));
          const double phase = kTwoPi * unit_from(splitmix(h + 2));
          acc += std::sin(kTwoPi * (std::cos(ang) * p.x() + std::sin(ang) * p.y()) / period + phase);
        }
        out[c] = low + (high - low) * (0.5 + acc / 8.0);
      }
      return out;
    }
  }
  return Vec3::Zero();
}

double IntensityPattern::at(const Vec2& p, PatchColor c, CellIndex) const {
  if (kind == PatternKind::Random) {
    const auto qx = static_cast<std::uint64_t>(std::llround(p.x() * 8.0) + (1ll << 40));
    const auto qy = static_cast<std::uint64_t>(std::llround(p.y() * 8.0) + (1ll << 40));
    const std::uint64_t h = splitmix(splitmix(splitmix(seed) ^ qx) ^ (qy * 3 + static_cast<std::uint64_t>(c)));
    return low + (high - low) * unit_from(h);
  }
  return rgb(p)[static_cast<int>(c)];
}

bool MaskRegion::contains(const Vec2& p) const {
  if (circle) return (p - center).squaredNorm() <= radius * radius;
  return p.x() >= x && p.y() >= y && p.x() < x + width && p.y() < y + height;
}

TruthMap SynthScene::truth_map() const {
  TruthMap m;
  spec.nominal_pixel_basis(m.a1, m.a2);
  const double t = angle_deg * std::numbers::pi / 180.0;
  Mat2 rot;
  rot << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
  m.a1 = rot * m.a1;
  m.a2 = rot * m.a2;
  m.origin = origin_set ? origin : Vec2((width - 1) / 2.0, (height - 1) / 2.0);
  m.warps = warps;
  m.post = post;
  m.lens = LensModel::for_image(width, height);
  m.lens.k1 = k1;
  m.lens.k2 = k2;
  return m;
}

namespace {

LatticeRect lattice_bounds(const TruthMap& map, int width, int height) {
  double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
  const int steps = 16;
  for (int k = 0; k <= steps; ++k)
    for (int side = 0; side < 4; ++side) {
      const double t = static_cast<double>(k) / steps;
      Vec2 p;
      switch (side) {
        case 0: p = Vec2(t * width, 0); break;
        case 1: p = Vec2(t * width, height); break;
        case 2: p = Vec2(0, t * height); break;
        default: p = Vec2(width, t * height); break;
      }
      const Vec2 l = map.inverse(p - Vec2(0.5, 0.5));
      umin = std::min(umin, l.x());
      umax = std::max(umax, l.x());
      vmin = std::min(vmin, l.y());
      vmax = std::max(vmax, l.y());
    }
  LatticeRect r;
  r.u0 = static_cast<int>(std::floor(umin)) - 2;
  r.v0 = static_cast<int>(std::floor(vmin)) - 2;
  r.width = static_cast<int>(std::ceil(umax)) + 2 - r.u0;
  r.height = static_cast<int>(std::ceil(vmax)) + 2 - r.v0;
  return r;
}

/// Box-Muller normals from a per-pixel hashed stream.
double hashed_normal(std::uint64_t key, int k) {
  const std::uint64_t h1 = splitmix(key * 8 + static_cast<std::uint64_t>(2 * k));
  const std::uint64_t h2 = splitmix(key * 8 + static_cast<std::uint64_t>(2 * k + 1));
  const double u1 = std::max(unit_from(h1), 1e-300);
  const double u2 = unit_from(h2);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

// One sample per pixel stratum, with the sub-stratum positions permuted so
// all ss*ss samples have distinct x and distinct y. A regular grid resolves
// axis-aligned patch edges only to 1/ss of a pixel, which moves noise-free
// centroids by more than 0.1 px at ss = 4; a sheared grid fails the same way
// at the shear angle. The permutations are fixed, so renders stay reproducible.
std::vector<Vec2> multi_jitter(int ss) {
  std::mt19937 rng(static_cast<std::uint32_t>(ss));
  const auto shuffled = [&] {
    std::vector<int> p(static_cast<std::size_t>(ss));
    std::iota(p.begin(), p.end(), 0);
    for (int i = ss - 1; i > 0; --i)
      std::swap(p[static_cast<std::size_t>(i)], p[rng() % static_cast<std::uint32_t>(i + 1)]);
    return p;
  };
  const std::vector<int> px = shuffled(), py = shuffled();
  std::vector<Vec2> out;
  for (int sy = 0; sy < ss; ++sy)
    for (int sx = 0; sx < ss; ++sx)
      out.emplace_back((sx + (px[static_cast<std::size_t>((sy + 3 * sx) % ss)] + 0.5) / ss) / ss,
                       (sy + (py[static_cast<std::size_t>((sx + 5 * sy) % ss)] + 0.5) / ss) / ss);
  return out;
}

}  // namespace

SynthResult synth_render(const SynthScene& scene, const TruthMap& map, int width, int height,
                         const TruthMap* mask_map, double gain, std::uint64_t noise_salt) {
  if (width < 1 || height < 1) throw Error(ErrorKind::InvalidArgument, "synthetic image size must be positive");
  if (scene.spec.nominal_pitch_px() < 3) throw Error(ErrorKind::InvalidArgument, "synthetic pitch must be >= 3 px");
  if (scene.supersample < 1) throw Error(ErrorKind::InvalidArgument, "supersample must be >= 1");
  map.validate();
  const TruthMap& mmap = mask_map ? *mask_map : map;
  const ScreenSpec& spec = scene.spec;
  const int ns = static_cast<int>(spec.site_count());

  Mat3 mixing = scene.mixing;
  for (int c = 0; c < 3; ++c) {
    const double l1 = mixing.col(c).cwiseAbs().sum();
    if (!(l1 > 0)) throw Error(ErrorKind::InvalidArgument, "mixing matrix has a zero column");
    mixing.col(c) /= l1;
  }

  SynthResult res;
  res.map = map;
  const LatticeRect bounds = lattice_bounds(map, width, height);

  // Per-site intensity and mask state.
  const std::size_t nsites = bounds.cell_count() * static_cast<std::size_t>(ns);
  std::vector<float> xs(nsites);
  std::vector<std::uint8_t> state(nsites, 0);  // 0 normal, 1 gray
  auto sidx = [&](int i, int j, int s) {
    return (static_cast<std::size_t>(j - bounds.v0) * bounds.width + (i - bounds.u0)) * ns + s;
  };
  for (int j = bounds.v0; j < bounds.v0 + bounds.height; ++j)
    for (int i = bounds.u0; i < bounds.u0 + bounds.width; ++i)
      for (int s = 0; s < ns; ++s) {
        const ScreenSite& site = spec.site(static_cast<std::size_t>(s));
        const Vec2 lc(i + site.offset.x(), j + site.offset.y());
        double x = scene.pattern.at(lc, site.color, {i, j});
        if (!scene.masks.empty()) {
          const Vec2 c = mmap.forward(lc);
          for (const auto& m : scene.masks) {
            if (!m.contains(c)) continue;
            if (m.kind == MaskKind::Gray) state[sidx(i, j, s)] = 1;
            else x *= m.factor;
          }
        }
        xs[sidx(i, j, s)] = static_cast<float>(x);
      }

  // Inverse map on a coarse grid, bilinearly interpolated per subsample.
  const int g = 8;
  const int gx0 = -1, gy0 = -1;
  const int gnx = width / g + 3, gny = height / g + 3;
  std::vector<Vec2> inv(static_cast<std::size_t>(gnx) * gny);
  for (int b = 0; b < gny; ++b)
    for (int a = 0; a < gnx; ++a)
      inv[static_cast<std::size_t>(b) * gnx + a] = map.inverse(Vec2((gx0 + a) * g, (gy0 + b) * g));
  auto lattice_at = [&](double x, double y) {
    const double fx = x / g - gx0, fy = y / g - gy0;
    const int a = std::clamp(static_cast<int>(std::floor(fx)), 0, gnx - 2);
    const int b = std::clamp(static_cast<int>(std::floor(fy)), 0, gny - 2);
    const double tx = fx - a, ty = fy - b;
    const Vec2& p00 = inv[static_cast<std::size_t>(b) * gnx + a];
    const Vec2& p10 = inv[static_cast<std::size_t>(b) * gnx + a + 1];
    const Vec2& p01 = inv[static_cast<std::size_t>(b + 1) * gnx + a];
    const Vec2& p11 = inv[static_cast<std::size_t>(b + 1) * gnx + a + 1];
    return Vec2((1 - tx) * (1 - ty) * p00 + tx * (1 - ty) * p10 + (1 - tx) * ty * p01 + tx * ty * p11);
  };

  LinearImage img(width, height, 3);
  const int ss = scene.supersample;
  const double inv_ss = 1.0 / (ss * ss);
  const Vec3 gray_rgb = mixing * Vec3::Ones();
  double gray_level = 0.3;
  for (const auto& r : scene.masks)
    if (r.kind == MaskKind::Gray) {
      gray_level = r.gray;
      break;
    }
  const std::vector<Vec2> sub = multi_jitter(ss);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      Vec3 acc = Vec3::Zero();
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const Vec2 q = lattice_at(x + sub[sy * ss + sx].x() - 0.5, y + sub[sy * ss + sx].y() - 0.5);
          for (int s = 0; s < ns; ++s) {
            const ScreenSite& site = spec.site(static_cast<std::size_t>(s));
            const Vec2 d = q - site.offset;
            const double ci = std::round(d.x()), cj = std::round(d.y());
            if (std::abs(d.x() - ci) > site.extent.x() * scene.fill ||
                std::abs(d.y() - cj) > site.extent.y() * scene.fill)
              continue;
            const int i = static_cast<int>(ci), j = static_cast<int>(cj);
            if (!bounds.contains(i, j)) break;
            const std::size_t k = sidx(i, j, s);
            if (state[k] == 1) {
              acc += gray_rgb * gray_level;
            } else {
              acc += mixing.col(static_cast<int>(site.color)) * xs[k];
            }
            break;
          }
        }
      float* px = img.pixel(x, y);
      for (int c = 0; c < 3; ++c) px[c] = static_cast<float>(acc[c] * inv_ss * gain);
    }

  if (scene.blur_sigma > 0) img = gaussian_blur(img, scene.blur_sigma);
  const std::uint64_t base = splitmix(scene.noise_seed ^ splitmix(noise_salt + 0x51ed));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      float* px = img.pixel(x, y);
      const std::uint64_t key = base ^ splitmix(static_cast<std::uint64_t>(y) * 0x100000000ull + static_cast<std::uint64_t>(x));
      for (int c = 0; c < 3; ++c) {
        double v = px[c] + scene.black[c];
        if (scene.noise_sigma > 0) {
          const double sd = scene.shot_noise ? scene.noise_sigma * std::sqrt(std::max(0.0, v)) : scene.noise_sigma;
          v += sd * hashed_normal(key, c);
        }
        px[c] = static_cast<float>(std::max(0.0, v));
      }
    }
  res.image = std::move(img);

  // Ground truth.
  res.truth = PatchGrid(bounds, ns, width, height);
  res.truth_mosaic = MosaicImage(bounds, ns);
  auto inside = [&](const Vec2& p) {
    return p.x() >= -0.5 && p.y() >= -0.5 && p.x() <= width - 0.5 && p.y() <= height - 0.5;
  };
  for (int j = bounds.v0; j < bounds.v0 + bounds.height; ++j)
    for (int i = bounds.u0; i < bounds.u0 + bounds.width; ++i)
      for (int s = 0; s < ns; ++s) {
        const ScreenSite& site = spec.site(static_cast<std::size_t>(s));
        const Vec2 lc(i + site.offset.x(), j + site.offset.y());
        SiteRecord& r = res.truth.at(i, j, s);
        r.center = map.forward(lc);
        const Vec2 e = site.extent;
        const bool box_inside = inside(map.forward(lc + Vec2(-e.x(), -e.y()))) &&
                                inside(map.forward(lc + Vec2(e.x(), -e.y()))) &&
                                inside(map.forward(lc + Vec2(-e.x(), e.y()))) &&
                                inside(map.forward(lc + Vec2(e.x(), e.y())));
        r.valid = box_inside && state[sidx(i, j, s)] == 0;
        r.weight = r.valid ? 1.0f : 0.0f;
        if (r.valid) res.truth_mosaic.set(i, j, s, xs[sidx(i, j, s)]);
      }
  res.truth.seed_frame.origin = map.forward(Vec2::Zero());
  res.truth.seed_frame.a1 = map.a1;
  res.truth.seed_frame.a2 = map.a2;
  return res;
}

SynthResult synth_scan(const SynthScene& scene) {
  return synth_render(scene, scene.truth_map(), scene.width, scene.height);
}

namespace {

/// Tile-pixel position of canvas point p for a perturbed capture.
Mat3 capture_matrix(const Vec2& tile_origin, int tw, int th, const CapturePerturbation& pert) {
  const Vec2 c((tw - 1) / 2.0, (th - 1) / 2.0);
  const double t = pert.rotation_deg * std::numbers::pi / 180.0;
  Mat3 to_tile = Mat3::Identity();
  to_tile(0, 2) = -tile_origin.x();
  to_tile(1, 2) = -tile_origin.y();
  Mat3 center = Mat3::Identity();
  center(0, 2) = -c.x();
  center(1, 2) = -c.y();
  Mat3 rs = Mat3::Identity();
  rs(0, 0) = pert.scale * std::cos(t);
  rs(0, 1) = -pert.scale * std::sin(t);
  rs(1, 0) = pert.scale * std::sin(t);
  rs(1, 1) = pert.scale * std::cos(t);
  Mat3 back = Mat3::Identity();
  back(0, 2) = c.x() + pert.shift.x();
  back(1, 2) = c.y() + pert.shift.y();
  return back * rs * center * to_tile;
}

}  // namespace

std::vector<SynthTile> synth_tile_set(const SynthScene& scene, const TileSetSpec& tiles) {
  if (tiles.cols < 1 || tiles.rows < 1 || tiles.tile_width < 1 || tiles.tile_height < 1)
    throw Error(ErrorKind::InvalidArgument, "tile layout must be positive");
  if (!(tiles.overlap > 0.05 && tiles.overlap < 0.9))
    throw Error(ErrorKind::InvalidArgument, "tile overlap must be in (0.05, 0.9)");
  const std::size_t count = static_cast<std::size_t>(tiles.cols) * tiles.rows;
  if (!tiles.perturbations.empty() && tiles.perturbations.size() != count)
    throw Error(ErrorKind::InvalidArgument, "one perturbation per tile is required");
  const double sx = tiles.tile_width * (1.0 - tiles.overlap);
  const double sy = tiles.tile_height * (1.0 - tiles.overlap);
  SynthScene canvas_scene = scene;
  canvas_scene.width = static_cast<int>(std::ceil(sx * (tiles.cols - 1))) + tiles.tile_width;
  canvas_scene.height = static_cast<int>(std::ceil(sy * (tiles.rows - 1))) + tiles.tile_height;
  canvas_scene.k1 = canvas_scene.k2 = 0;
  const TruthMap canvas = canvas_scene.truth_map();

  std::vector<SynthTile> out;
  for (int r = 0; r < tiles.rows; ++r)
    for (int c = 0; c < tiles.cols; ++c) {
      const std::size_t k = static_cast<std::size_t>(r) * tiles.cols + c;
      const CapturePerturbation pert = tiles.perturbations.empty() ? CapturePerturbation{} : tiles.perturbations[k];
      SynthTile t;
      t.row = r;
      t.col = c;
      t.canvas_origin = Vec2(std::round(c * sx), std::round(r * sy));
      TruthMap map = canvas;
      map.post = Homography(capture_matrix(t.canvas_origin, tiles.tile_width, tiles.tile_height, pert) *
                            canvas.post.matrix());
      map.lens = LensModel::for_image(tiles.tile_width, tiles.tile_height);
      map.lens.k1 = scene.k1;
      map.lens.k2 = scene.k2;
      t.data = synth_render(scene, map, tiles.tile_width, tiles.tile_height, &canvas, pert.gain, k + 1);
      out.push_back(std::move(t));
    }
  return out;
}

TilePairResult synth_tile_pair(const SynthScene& scene, int tile_width, int tile_height,
                               double overlap_fraction, const CapturePerturbation& pa,
                               const CapturePerturbation& pb) {
  TileSetSpec spec;
  spec.cols = 2;
  spec.rows = 1;
  spec.tile_width = tile_width;
  spec.tile_height = tile_height;
  spec.overlap = overlap_fraction;
  spec.perturbations = {pa, pb};
  auto tiles = synth_tile_set(scene, spec);
  TilePairResult r;
  r.a = std::move(tiles[0]);
  r.b = std::move(tiles[1]);
  r.truth_offset_px = r.b.canvas_origin - r.a.canvas_origin;
  return r;
}

namespace {

struct PairHash {
  std::size_t operator()(const std::pair<long, long>& k) const {
    return std::hash<long>()(k.first * 1000003L) ^ std::hash<long>()(k.second);
  }
};

/// Spatial hash of one site index's truth centers.
class CenterIndex {
 public:
  CenterIndex(const PatchGrid& g, int site, double bucket) : g_(g), site_(site), bucket_(bucket) {
    const auto& b = g.bounds();
    for (int j = b.v0; j < b.v0 + b.height; ++j)
      for (int i = b.u0; i < b.u0 + b.width; ++i) {
        const Vec2& c = g.at(i, j, site).center;
        map_[key(c)].push_back({i, j});
      }
  }

  /// Nearest record within `radius`; false if none.
  bool nearest(const Vec2& p, double radius, CellIndex& out) const {
    const auto k = key(p);
    double best = radius * radius;
    bool found = false;
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        auto it = map_.find({k.first + dx, k.second + dy});
        if (it == map_.end()) continue;
        for (const auto& cell : it->second) {
          const double d2 = (g_.at(cell.i, cell.j, site_).center - p).squaredNorm();
          if (d2 <= best) {
            best = d2;
            out = cell;
            found = true;
          }
        }
      }
    return found;
  }

 private:
  std::pair<long, long> key(const Vec2& p) const {
    return {static_cast<long>(std::floor(p.x() / bucket_)), static_cast<long>(std::floor(p.y() / bucket_))};
  }
  const PatchGrid& g_;
  int site_;
  double bucket_;
  std::unordered_map<std::pair<long, long>, std::vector<CellIndex>, PairHash> map_;
};

double grid_pitch(const PatchGrid& g) {
  const auto& b = g.bounds();
  std::vector<double> d;
  for (int j = b.v0; j < b.v0 + b.height; j += std::max(1, b.height / 16))
    for (int i = b.u0; i + 1 < b.u0 + b.width; i += std::max(1, b.width / 16)) {
      const SiteRecord& p = g.at(i, j, 0);
      const SiteRecord& q = g.at(i + 1, j, 0);
      if (p.valid && q.valid) d.push_back((q.center - p.center).norm());
    }
  if (d.empty()) return g.seed_frame.pitch();
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  return d[d.size() / 2];
}

}  // namespace

GridComparison compare_grids(const PatchGrid& detected, const PatchGrid& truth) {
  GridComparison res;
  if (detected.sites_per_cell() != truth.sites_per_cell() || truth.empty()) return res;
  const int ns = truth.sites_per_cell();
  const double pitch = grid_pitch(truth);
  if (!(pitch > 0)) return res;
  // Same-site neighbors are a full cell apart, so half a pitch is unambiguous.
  const double radius = 0.45 * pitch;
  std::vector<CenterIndex> index;
  for (int s = 0; s < ns; ++s) index.emplace_back(truth, s, pitch);

  std::map<std::pair<int, int>, std::size_t> votes;
  const auto& db = detected.bounds();
  for (int j = db.v0; j < db.v0 + db.height; ++j)
    for (int i = db.u0; i < db.u0 + db.width; ++i)
      for (int s = 0; s < ns; ++s) {
        const SiteRecord& r = detected.at(i, j, s);
        if (!r.valid) continue;
        CellIndex t;
        if (index[static_cast<std::size_t>(s)].nearest(r.center, radius, t)) ++votes[{t.i - i, t.j - j}];
      }
  if (votes.empty()) return res;
  auto best = std::max_element(votes.begin(), votes.end(),
                               [](const auto& a, const auto& b) { return a.second < b.second; });
  res.aligned = true;
  res.shift = {best->first.first, best->first.second};

  double sum2 = 0;
  for (int j = db.v0; j < db.v0 + db.height; ++j)
    for (int i = db.u0; i < db.u0 + db.width; ++i)
      for (int s = 0; s < ns; ++s) {
        const SiteRecord& r = detected.at(i, j, s);
        if (!r.valid) continue;
        CellIndex t;
        if (index[static_cast<std::size_t>(s)].nearest(r.center, radius, t) &&
            (t.i != i + res.shift.i || t.j != j + res.shift.j))
          ++res.index_mismatches;
        const SiteRecord* tr = truth.find(i + res.shift.i, j + res.shift.j, s);
        if (!tr || !tr->valid) {
          ++res.false_positives;
          continue;
        }
        const double e = (r.center - tr->center).norm();
        sum2 += e * e;
        res.max_error_px = std::max(res.max_error_px, e);
        ++res.compared;
      }
  res.rms_error_px = res.compared ? std::sqrt(sum2 / static_cast<double>(res.compared)) : 0.0;

  std::size_t truth_valid = 0, hit = 0;
  const auto& tb = truth.bounds();
  for (int j = tb.v0; j < tb.v0 + tb.height; ++j)
    for (int i = tb.u0; i < tb.u0 + tb.width; ++i)
      for (int s = 0; s < ns; ++s) {
        if (!truth.at(i, j, s).valid) continue;
        ++truth_valid;
        const SiteRecord* d = detected.find(i - res.shift.i, j - res.shift.j, s);
        if (d && d->valid) ++hit;
      }
  res.coverage = truth_valid ? static_cast<double>(hit) / static_cast<double>(truth_valid) : 0.0;
  return res;
}

namespace {

using nlohmann::json;

json vec_json(const Vec2& v) { return json::array({v.x(), v.y()}); }
Vec2 json_vec(const json& j) {
  if (!j.is_array() || j.size() != 2) throw Error(ErrorKind::Format, "expected a 2-vector");
  return {j.at(0).get<double>(), j.at(1).get<double>()};
}
json mat_json(const Mat3& m) {
  json out = json::array();
  for (int r = 0; r < 3; ++r) out.push_back(json::array({m(r, 0), m(r, 1), m(r, 2)}));
  return out;
}
Mat3 json_mat(const json& j) {
  if (!j.is_array() || j.size() != 3) throw Error(ErrorKind::Format, "expected a 3x3 matrix");
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    if (!j.at(r).is_array() || j.at(r).size() != 3) throw Error(ErrorKind::Format, "expected a 3x3 matrix");
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

json warps_json(const std::vector<SinusoidalWarp>& ws) {
  json out = json::array();
  for (const auto& w : ws)
    out.push_back({{"amplitude", vec_json(w.amplitude)},
                   {"direction", vec_json(w.direction)},
                   {"period", w.period},
                   {"phase", w.phase}});
  return out;
}

std::vector<SinusoidalWarp> json_warps(const json& j) {
  std::vector<SinusoidalWarp> out;
  for (const auto& e : j) {
    SinusoidalWarp w;
    if (e.contains("amplitude")) w.amplitude = json_vec(e.at("amplitude"));
    if (e.contains("direction")) w.direction = json_vec(e.at("direction")).normalized();
    w.period = e.value("period", w.period);
    w.phase = e.value("phase", w.phase);
    if (!(w.period > 0)) throw Error(ErrorKind::InvalidArgument, "warp period must be positive");
    out.push_back(w);
  }
  if (out.size() > 3) throw Error(ErrorKind::InvalidArgument, "at most 3 warp fields are supported");
  return out;
}

const char* pattern_name(PatternKind k) {
  switch (k) {
    case PatternKind::Uniform: return "uniform";
    case PatternKind::Random: return "random";
    case PatternKind::Smooth: return "smooth";
  }
  return "uniform";
}

}  // namespace

SceneFile parse_scene(const std::string& text) {
  SceneFile f;
  SynthScene& s = f.scene;
  try {
    const json j = json::parse(text);
    if (j.contains("screen")) {
      const auto& sc = j.at("screen");
      s.spec = sc.is_string() ? presets::by_name(sc.get<std::string>()) : parse_screen_spec(sc.dump());
    }
    if (j.contains("pitch_px")) s.spec = s.spec.with_pitch(j.at("pitch_px").get<double>());
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.angle_deg = j.value("angle_deg", s.angle_deg);
    if (j.contains("origin")) {
      s.origin = json_vec(j.at("origin"));
      s.origin_set = true;
    }
    if (j.contains("warps")) s.warps = json_warps(j.at("warps"));
    if (j.contains("homography")) s.post = Homography(json_mat(j.at("homography")));
    if (j.contains("lens")) {
      s.k1 = j.at("lens").value("k1", 0.0);
      s.k2 = j.at("lens").value("k2", 0.0);
    }
    if (j.contains("pattern")) {
      const auto& p = j.at("pattern");
      const std::string kind = p.value("kind", "uniform");
      if (kind == "uniform") s.pattern.kind = PatternKind::Uniform;
      else if (kind == "random") s.pattern.kind = PatternKind::Random;
      else if (kind == "smooth") s.pattern.kind = PatternKind::Smooth;
      else throw Error(ErrorKind::InvalidArgument, "unknown pattern kind " + kind);
      s.pattern.value = p.value("value", s.pattern.value);
      s.pattern.low = p.value("low", s.pattern.low);
      s.pattern.high = p.value("high", s.pattern.high);
      s.pattern.seed = p.value("seed", s.pattern.seed);
    }
    if (j.contains("noise")) {
      const auto& n = j.at("noise");
      s.noise_sigma = n.value("sigma", 0.0);
      s.shot_noise = n.value("shot", false);
      s.noise_seed = n.value("seed", s.noise_seed);
    }
    if (j.contains("masks")) {
      for (const auto& m : j.at("masks")) {
        MaskRegion r;
        const std::string kind = m.value("kind", "gray");
        if (kind == "gray") r.kind = MaskKind::Gray;
        else if (kind == "dark") r.kind = MaskKind::Dark;
        else throw Error(ErrorKind::InvalidArgument, "unknown mask kind " + kind);
        if (m.contains("center")) {
          r.circle = true;
          r.center = json_vec(m.at("center"));
          r.radius = m.value("radius", 0.0);
        } else {
          const auto& rect = m.at("rect");
          if (!rect.is_array() || rect.size() != 4) throw Error(ErrorKind::Format, "mask rect needs 4 numbers");
          r.x = rect.at(0).get<double>();
          r.y = rect.at(1).get<double>();
          r.width = rect.at(2).get<double>();
          r.height = rect.at(3).get<double>();
        }
        r.gray = m.value("gray", r.gray);
        r.factor = m.value("factor", r.factor);
        s.masks.push_back(r);
      }
    }
    if (j.contains("mixing")) s.mixing = json_mat(j.at("mixing"));
    if (j.contains("black")) {
      const auto& b = j.at("black");
      if (!b.is_array() || b.size() != 3) throw Error(ErrorKind::Format, "black needs 3 numbers");
      s.black = Vec3(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>());
    }
    s.blur_sigma = j.value("blur", s.blur_sigma);
    s.supersample = j.value("supersample", s.supersample);
    s.fill = j.value("fill", s.fill);
    if (j.contains("tiles")) {
      f.has_tiles = true;
      const auto& t = j.at("tiles");
      f.tiles.cols = t.value("cols", f.tiles.cols);
      f.tiles.rows = t.value("rows", f.tiles.rows);
      f.tiles.tile_width = t.value("width", f.tiles.tile_width);
      f.tiles.tile_height = t.value("height", f.tiles.tile_height);
      f.tiles.overlap = t.value("overlap", f.tiles.overlap);
      if (t.contains("perturbations")) {
        for (const auto& p : t.at("perturbations")) {
          CapturePerturbation c;
          c.rotation_deg = p.value("rotation_deg", 0.0);
          c.scale = p.value("scale", 1.0);
          if (p.contains("shift")) c.shift = json_vec(p.at("shift"));
          c.gain = p.value("gain", 1.0);
          f.tiles.perturbations.push_back(c);
        }
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("scene file: ") + e.what());
  }
  if (s.width < 1 || s.height < 1) throw Error(ErrorKind::InvalidArgument, "scene size must be positive");
  if (s.supersample < 1) throw Error(ErrorKind::InvalidArgument, "supersample must be >= 1");
  if (!(s.fill > 0 && s.fill <= 1)) throw Error(ErrorKind::InvalidArgument, "fill must be in (0, 1]");
  return f;
}

SceneFile load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read scene file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scene(ss.str());
}

std::string scene_to_json(const SceneFile& f) {
  const SynthScene& s = f.scene;
  json j;
  j["screen"] = json::parse(screen_spec_to_json(s.spec));
  j["width"] = s.width;
  j["height"] = s.height;
  j["angle_deg"] = s.angle_deg;
  if (s.origin_set) j["origin"] = vec_json(s.origin);
  j["warps"] = warps_json(s.warps);
  j["homography"] = mat_json(s.post.matrix());
  j["lens"] = {{"k1", s.k1}, {"k2", s.k2}};
  j["pattern"] = {{"kind", pattern_name(s.pattern.kind)},
                  {"value", s.pattern.value},
                  {"low", s.pattern.low},
                  {"high", s.pattern.high},
                  {"seed", s.pattern.seed}};
  j["noise"] = {{"sigma", s.noise_sigma}, {"shot", s.shot_noise}, {"seed", s.noise_seed}};
  json masks = json::array();
  for (const auto& m : s.masks) {
    json e;
    e["kind"] = m.kind == MaskKind::Gray ? "gray" : "dark";
    if (m.circle) {
      e["center"] = vec_json(m.center);
      e["radius"] = m.radius;
    } else {
      e["rect"] = json::array({m.x, m.y, m.width, m.height});
    }
    e["gray"] = m.gray;
    e["factor"] = m.factor;
    masks.push_back(e);
  }
  j["masks"] = masks;
  j["mixing"] = mat_json(s.mixing);
  j["black"] = json::array({s.black.x(), s.black.y(), s.black.z()});
  j["blur"] = s.blur_sigma;
  j["supersample"] = s.supersample;
  j["fill"] = s.fill;
  if (f.has_tiles) {
    json t;
    t["cols"] = f.tiles.cols;
    t["rows"] = f.tiles.rows;
    t["width"] = f.tiles.tile_width;
    t["height"] = f.tiles.tile_height;
    t["overlap"] = f.tiles.overlap;
    json ps = json::array();
    for (const auto& p : f.tiles.perturbations)
      ps.push_back({{"rotation_deg", p.rotation_deg}, {"scale", p.scale}, {"shift", vec_json(p.shift)}, {"gain", p.gain}});
    t["perturbations"] = ps;
    j["tiles"] = t;
  }
  return j.dump(2);
}

std::string truth_map_to_json(const TruthMap& m) {
  json j;
  j["origin"] = vec_json(m.origin);
  j["a1"] = vec_json(m.a1);
  j["a2"] = vec_json(m.a2);
  j["warps"] = warps_json(m.warps);
  j["post"] = mat_json(m.post.matrix());
  j["lens"] = {{"center", vec_json(m.lens.center)},
               {"k1", m.lens.k1},
               {"k2", m.lens.k2},
               {"norm_radius", m.lens.norm_radius}};
  return j.dump(2);
}

TruthMap truth_map_from_json(const std::string& text) {
  TruthMap m;
  try {
    const json j = json::parse(text);
    m.origin = json_vec(j.at("origin"));
    m.a1 = json_vec(j.at("a1"));
    m.a2 = json_vec(j.at("a2"));
    m.warps = json_warps(j.at("warps"));
    m.post = Homography(json_mat(j.at("post")));
    const auto& l = j.at("lens");
    m.lens.center = json_vec(l.at("center"));
    m.lens.k1 = l.at("k1").get<double>();
    m.lens.k2 = l.at("k2").get<double>();
    m.lens.norm_radius = l.at("norm_radius").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, std::string("truth map: ") + e.what());
  }
  return m;
}

}  // namespace screenreg
