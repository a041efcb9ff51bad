#include "screenreg/mosaic.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>

namespace screenreg {

MosaicImage::MosaicImage(LatticeRect bounds, int sites_per_cell) : bounds_(bounds), sites_(sites_per_cell) {
  if (bounds.width < 0 || bounds.height < 0 || sites_per_cell < 1)
    throw Error(ErrorKind::InvalidArgument, "invalid mosaic dimensions");
  values_.assign(bounds.cell_count() * static_cast<std::size_t>(sites_per_cell), 0.0f);
  valid_.assign(values_.size(), 0);
}

void MosaicImage::set(int i, int j, int s, float x) {
  const std::size_t k = index(i, j, s);
  values_[k] = x;
  valid_[k] = 1;
}

void MosaicImage::clear(int i, int j, int s) {
  const std::size_t k = index(i, j, s);
  values_[k] = 0.0f;
  valid_[k] = 0;
}

std::size_t MosaicImage::valid_count() const {
  return static_cast<std::size_t>(std::count(valid_.begin(), valid_.end(), 1));
}

MosaicImage collect_profiled(const LinearImage& primaries, const MeshTransform& mesh,
                             const PatchGrid& pg, const ScreenSpec& spec,
                             const CollectParams& params) {
  if (primaries.channels() != 3) throw Error(ErrorKind::InvalidArgument, "collect needs a 3-channel image");
  const auto& b = pg.bounds();
  const int ns = pg.sites_per_cell();
  if (static_cast<int>(spec.site_count()) != ns)
    throw Error(ErrorKind::InvalidArgument, "patch grid does not match screen spec");
  MosaicImage m(b, ns);
  static constexpr double kTap[3] = {1.0, 2.0, 1.0};
  for (int j = b.v0; j < b.v0 + b.height; ++j)
    for (int i = b.u0; i < b.u0 + b.width; ++i)
      for (int s = 0; s < ns; ++s) {
        if (!pg.at(i, j, s).valid) continue;
        const ScreenSite& site = spec.site(static_cast<std::size_t>(s));
        const Vec2 lc(i + site.offset.x(), j + site.offset.y());
        const Vec2 step = params.kernel_factor * site.extent;
        const int ch = static_cast<int>(site.color);
        double acc = 0, wsum = 0;
        bool inside = true;
        for (int a = -1; a <= 1 && inside; ++a)
          for (int c = -1; c <= 1; ++c) {
            const Vec2 q = lc + Vec2(a * step.x(), c * step.y());
            const Vec2 xy = mesh.forward_unchecked(LatticeCoord::from(q));
            if (!pg.center_in_image(xy)) {
              inside = false;
              break;
            }
            const double w = kTap[a + 1] * kTap[c + 1];
            acc += w * primaries.sample_bilinear(xy.x(), xy.y(), ch);
            wsum += w;
          }
        if (!inside || !mesh.in_domain(LatticeCoord::from(lc))) continue;
        m.set(i, j, s, static_cast<float>(std::max(0.0, acc / wsum)));
      }
  return m;
}

MosaicImage collect(const LinearImage& img, const MatrixProfile& profile, const MeshTransform& mesh,
                    const PatchGrid& pg, const ScreenSpec& spec, const CollectParams& params) {
  return collect_profiled(apply_profile(img, profile), mesh, pg, spec, params);
}

double demosaic_scale(DemosaicMode mode) { return mode == DemosaicMode::SiteGrid ? 2.0 : 1.0; }

Vec2 demosaic_origin(const LatticeRect& bounds, DemosaicMode) { return Vec2(bounds.u0, bounds.v0); }

namespace {

struct SiteRef {
  Vec2 offset;
  int index;
};

/// Gaussian-weighted average of valid same-color sites within `radius` cells.
bool fill_value(const MosaicImage& m, const std::vector<SiteRef>& sites, const Vec2& p, double radius,
                double& out) {
  const auto& b = m.bounds();
  const double sigma = radius / 2.0;
  const int r = static_cast<int>(std::ceil(radius)) + 1;
  const int ci = static_cast<int>(std::floor(p.x())), cj = static_cast<int>(std::floor(p.y()));
  double acc = 0, wsum = 0;
  for (int j = std::max(b.v0, cj - r); j <= std::min(b.v0 + b.height - 1, cj + r); ++j)
    for (int i = std::max(b.u0, ci - r); i <= std::min(b.u0 + b.width - 1, ci + r); ++i)
      for (const auto& s : sites) {
        if (!m.valid(i, j, s.index)) continue;
        const double d2 = (Vec2(i, j) + s.offset - p).squaredNorm();
        if (d2 > radius * radius) continue;
        const double w = std::exp(-0.5 * d2 / (sigma * sigma));
        acc += w * m.value(i, j, s.index);
        wsum += w;
      }
  if (!(wsum > 0)) return false;
  out = acc / wsum;
  return true;
}

}  // namespace

DemosaicResult demosaic(const MosaicImage& m, const ScreenSpec& spec, const DemosaicParams& params) {
  const auto& b = m.bounds();
  if (static_cast<int>(spec.site_count()) != m.sites_per_cell())
    throw Error(ErrorKind::InvalidArgument, "mosaic does not match screen spec");
  if (b.width < 1 || b.height < 1) throw Error(ErrorKind::InvalidArgument, "empty mosaic");
  std::vector<SiteRef> by_color[3];
  for (std::size_t s = 0; s < spec.site_count(); ++s)
    by_color[static_cast<int>(spec.site(s).color)].push_back({spec.site(s).offset, static_cast<int>(s)});

  const double scale = demosaic_scale(params.mode);
  const int w = static_cast<int>(b.width * scale), h = static_cast<int>(b.height * scale);
  DemosaicResult res;
  res.rgb = LinearImage(w, h, 3);
  res.valid.assign(static_cast<std::size_t>(w) * h, 1);
  res.direct.assign(static_cast<std::size_t>(w) * h, 1);

  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Vec2 p = Vec2(b.u0, b.v0) + Vec2(x, y) / scale;
      float* px = res.rgb.pixel(x, y);
      for (int c = 0; c < 3; ++c) {
        const auto& sites = by_color[c];
        double full = 0, acc = 0, wsum = 0;
        if (params.mode == DemosaicMode::Cell) {
          const int i = b.u0 + x, j = b.v0 + y;
          for (const auto& s : sites) {
            full += 1;
            if (!m.valid(i, j, s.index)) continue;
            acc += m.value(i, j, s.index);
            wsum += 1;
          }
        } else {
          // Tent interpolation over the same-color sublattice.
          const int ci = static_cast<int>(std::floor(p.x())), cj = static_cast<int>(std::floor(p.y()));
          for (int j = cj - 1; j <= cj + 1; ++j)
            for (int i = ci - 1; i <= ci + 1; ++i)
              for (const auto& s : sites) {
                const Vec2 d = Vec2(i, j) + s.offset - p;
                const double wt = std::max(0.0, 1 - std::abs(d.x())) * std::max(0.0, 1 - std::abs(d.y()));
                if (wt <= 0) continue;
                full += wt;
                if (!b.contains(i, j) || !m.valid(i, j, s.index)) continue;
                acc += wt * m.value(i, j, s.index);
                wsum += wt;
              }
        }
        double v = 0;
        if (full > 0 && wsum == full) {
          v = acc / wsum;
        } else {
          ++res.filled;
          res.direct[static_cast<std::size_t>(y) * w + x] = 0;
          if (wsum > 0 && wsum >= 0.5 * full) {
            v = acc / wsum;
          } else {
            const Vec2 center = params.mode == DemosaicMode::Cell ? p + Vec2(0.25, 0.25) : p;
            if (!fill_value(m, sites, center, params.fill_radius_cells, v)) {
              v = 0;
              res.valid[static_cast<std::size_t>(y) * w + x] = 0;
            }
          }
        }
        px[c] = static_cast<float>(v);
      }
    }
  return res;
}

std::string RenderParams::to_json() const {
  nlohmann::json j;
  j["matrix"] = {{matrix(0, 0), matrix(0, 1), matrix(0, 2)},
                 {matrix(1, 0), matrix(1, 1), matrix(1, 2)},
                 {matrix(2, 0), matrix(2, 1), matrix(2, 2)}};
  j["gamma"] = gamma;
  j["gain"] = gain;
  j["auto_brighten"] = auto_brighten;
  j["bits"] = depth == SampleDepth::U8 ? 8 : 16;
  return j.dump(2);
}

RenderParams RenderParams::from_json(const std::string& text) {
  RenderParams p;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    if (j.contains("matrix")) {
      const auto& m = j.at("matrix");
      if (m.is_string()) {
        if (m.get<std::string>() == "dufay-nominal") p.matrix = nominal_dufay_render_matrix();
        else if (m.get<std::string>() == "identity") p.matrix = Mat3::Identity();
        else throw Error(ErrorKind::InvalidArgument, "unknown render matrix " + m.get<std::string>());
      } else {
        if (m.size() != 3) throw Error(ErrorKind::InvalidArgument, "render matrix must be 3x3");
        for (int r = 0; r < 3; ++r) {
          if (m.at(r).size() != 3) throw Error(ErrorKind::InvalidArgument, "render matrix must be 3x3");
          for (int c = 0; c < 3; ++c) p.matrix(r, c) = m.at(r).at(c).get<double>();
        }
      }
    }
    p.gamma = j.value("gamma", p.gamma);
    p.gain = j.value("gain", p.gain);
    p.auto_brighten = j.value("auto_brighten", p.auto_brighten);
    const int bits = j.value("bits", 16);
    if (bits != 8 && bits != 16) throw Error(ErrorKind::InvalidArgument, "bits must be 8 or 16");
    p.depth = bits == 8 ? SampleDepth::U8 : SampleDepth::U16;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("render parameters: ") + e.what());
  }
  if (!(p.gamma > 0) || !(p.gain > 0))
    throw Error(ErrorKind::InvalidArgument, "render gamma and gain must be positive");
  return p;
}

Mat3 nominal_dufay_render_matrix() {
  Mat3 m;
  m << 1.10, -0.05, -0.05,
       -0.05, 1.10, -0.05,
       -0.05, -0.10, 1.15;
  return m;
}

RenderResult color_render(const LinearImage& rgb, const RenderParams& params,
                          const std::vector<std::uint8_t>* valid) {
  if (rgb.channels() != 3) throw Error(ErrorKind::InvalidArgument, "color_render needs rgb input");
  if (std::abs(params.matrix.determinant()) < 1e-12)
    throw Error(ErrorKind::InvalidArgument, "render matrix is singular");
  const std::size_t n = rgb.pixel_count();
  std::vector<Vec3> mixed(n);
  for (std::size_t k = 0; k < n; ++k) {
    const float* p = rgb.data().data() + 3 * k;
    mixed[k] = params.matrix * Vec3(p[0], p[1], p[2]);
  }
  RenderResult out;
  out.gain_used = params.gain;
  if (params.auto_brighten) {
    std::vector<double> lum;
    lum.reserve(n);
    for (std::size_t k = 0; k < n; ++k)
      if (!valid || (*valid)[k]) lum.push_back(luminance(mixed[k].x(), mixed[k].y(), mixed[k].z()));
    if (!lum.empty()) {
      const std::size_t q = std::min(lum.size() - 1, static_cast<std::size_t>(std::floor(0.99 * (lum.size() - 1) + 0.5)));
      std::nth_element(lum.begin(), lum.begin() + static_cast<std::ptrdiff_t>(q), lum.end());
      if (lum[q] > 0) out.gain_used = 0.9 / lum[q];
    }
  }
  DisplayImage& d = out.image;
  d.width = rgb.width();
  d.height = rgb.height();
  d.channels = 3;
  d.depth = params.depth;
  d.data.resize(3 * n);
  const double code = d.max_code();
  for (std::size_t k = 0; k < n; ++k)
    for (int c = 0; c < 3; ++c) {
      double v = std::clamp(out.gain_used * mixed[k][c], 0.0, 1.0);
      if (params.gamma != 1.0) v = std::pow(v, 1.0 / params.gamma);
      d.data[3 * k + c] = static_cast<std::uint16_t>(std::lround(v * code));
    }
  return out;
}

}  // namespace screenreg
