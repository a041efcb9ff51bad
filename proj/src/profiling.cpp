#include "screenreg/profiling.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace screenreg {

Transfer Transfer::parse(const std::string& text) {
  if (text == "linear") return linear();
  if (text == "srgb") return srgb();
  std::string num = text;
  if (num.rfind("gamma:", 0) == 0) num = num.substr(6);
  try {
    std::size_t used = 0;
    const double g = std::stod(num, &used);
    if (used == num.size() && g > 0) return power(g);
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::InvalidArgument, "unsupported transfer description '" + text + "'");
}

namespace {

double srgb_decode(double v) {
  return v <= 0.04045 ? v / 12.92 : std::pow((v + 0.055) / 1.055, 2.4);
}

}  // namespace

LinearImage linearize(const LinearImage& raw, const Transfer& transfer) {
  LinearImage out = raw;
  auto& data = out.data();
  switch (transfer.kind) {
    case Transfer::Kind::Linear:
      break;
    case Transfer::Kind::Gamma:
      if (!(transfer.gamma > 0))
        throw Error(ErrorKind::InvalidArgument, "gamma must be positive");
      if (transfer.gamma != 1.0)
        for (auto& v : data) v = static_cast<float>(std::pow(std::max(0.0f, v), transfer.gamma));
      break;
    case Transfer::Kind::Srgb:
      for (auto& v : data) v = static_cast<float>(srgb_decode(std::clamp(v, 0.0f, 1.0f)));
      break;
    case Transfer::Kind::Lut: {
      const auto& lut = transfer.lut;
      if (lut.size() < 2) throw Error(ErrorKind::InvalidArgument, "transfer LUT needs >= 2 entries");
      if (!std::is_sorted(lut.begin(), lut.end()) || lut.front() < 0)
        throw Error(ErrorKind::InvalidArgument, "transfer LUT must be monotone and non-negative");
      const double n = static_cast<double>(lut.size() - 1);
      for (auto& v : data) {
        const double p = std::clamp(static_cast<double>(v), 0.0, 1.0) * n;
        const auto i = std::min(static_cast<std::size_t>(p), lut.size() - 2);
        const double f = p - static_cast<double>(i);
        v = static_cast<float>(lut[i] * (1 - f) + lut[i + 1] * f);
      }
      break;
    }
  }
  for (auto& v : data)
    if (!(v >= 0.0f) || !std::isfinite(v)) v = 0.0f;
  return out;
}

Rect center_region(const LinearImage& img, double fraction) {
  fraction = std::clamp(fraction, 0.0, 1.0);
  Rect r;
  r.width = std::max(1, static_cast<int>(img.width() * fraction));
  r.height = std::max(1, static_cast<int>(img.height() * fraction));
  r.x = (img.width() - r.width) / 2;
  r.y = (img.height() - r.height) / 2;
  return r;
}

Mat4 MatrixProfile::matrix() const {
  Mat4 m = Mat4::Identity();
  m.block<3, 1>(0, 0) = r;
  m.block<3, 1>(0, 1) = g;
  m.block<3, 1>(0, 2) = b;
  m.block<3, 1>(0, 3) = d;
  return m;
}

MatrixProfile MatrixProfile::from_matrix(const Mat4& m) {
  MatrixProfile p;
  p.r = m.block<3, 1>(0, 0);
  p.g = m.block<3, 1>(0, 1);
  p.b = m.block<3, 1>(0, 2);
  p.d = m.block<3, 1>(0, 3);
  return p;
}

Vec3 MatrixProfile::forward(const Vec3& x) const { return d + r * x[0] + g * x[1] + b * x[2]; }

std::string MatrixProfile::to_json() const {
  auto v3 = [](const Vec3& v) { return nlohmann::json::array({v[0], v[1], v[2]}); };
  nlohmann::json j;
  j["d"] = v3(d);
  j["r"] = v3(r);
  j["g"] = v3(g);
  j["b"] = v3(b);
  const Mat4 m = matrix();
  auto rows = nlohmann::json::array();
  for (int i = 0; i < 4; ++i) rows.push_back({m(i, 0), m(i, 1), m(i, 2), m(i, 3)});
  j["M"] = rows;
  return j.dump(2);
}

MatrixProfile MatrixProfile::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    auto v3 = [](const nlohmann::json& a) {
      return Vec3(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>());
    };
    MatrixProfile p;
    p.d = v3(j.at("d"));
    p.r = v3(j.at("r"));
    p.g = v3(j.at("g"));
    p.b = v3(j.at("b"));
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("profile: ") + e.what());
  }
}

namespace {

double angle_between(const Vec3& a, const Vec3& b) {
  const double c = a.normalized().dot(b.normalized());
  return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace

MatrixProfile estimate_profile(const LinearImage& img, const Rect& region,
                               const ProfileParams& params) {
  if (img.channels() != 3) throw Error(ErrorKind::InvalidArgument, "profile needs an RGB image");
  if (region.x < 0 || region.y < 0 || region.width < 1 || region.height < 1 ||
      region.x + region.width > img.width() || region.y + region.height > img.height())
    throw Error(ErrorKind::InvalidArgument, "profile region outside image");
  if (!(params.fraction > 0 && params.fraction <= 1))
    throw Error(ErrorKind::InvalidArgument, "profile fraction must be in (0,1]");

  const std::size_t n = static_cast<std::size_t>(region.width) * region.height;
  std::vector<Vec3> px;
  px.reserve(n);
  for (int y = region.y; y < region.y + region.height; ++y)
    for (int x = region.x; x < region.x + region.width; ++x) {
      const float* p = img.pixel(x, y);
      px.emplace_back(p[0], p[1], p[2]);
    }

  MatrixProfile prof;
  {
    // The dark percentile lies in the noise tail of the black cluster, so it
    // only anchors a window [lo, 2 c - lo] that is re-centered on its median
    // until it sits symmetrically on the cluster.
    std::vector<double> sums(n);
    for (std::size_t i = 0; i < n; ++i) sums[i] = px[i].sum();
    std::vector<double> sorted = sums;
    std::sort(sorted.begin(), sorted.end());
    const auto quantile = [&](double q) {
      return sorted[static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(n - 1))];
    };
    const double lo = quantile(params.dark_percentile);
    double center = quantile(2 * params.dark_percentile);
    for (int it = 0; it < 30; ++it) {
      const auto first = std::lower_bound(sorted.begin(), sorted.end(), lo);
      const auto last = std::upper_bound(sorted.begin(), sorted.end(), 2 * center - lo);
      if (last - first < 2) break;
      const double next = *(first + (last - first) / 2);
      const bool done = std::abs(next - center) <= 1e-9;
      center = next;
      if (done) break;
    }
    // A black cluster is one blob in rgb: no channel spreads more than the
    // sum does. The dimmest colored patches share a sum but not a color.
    // Without such a cluster fall back to the per-channel percentile.
    const double hi = 2 * center - lo;
    std::array<std::vector<double>, 3> ch;
    std::vector<double> win;
    for (std::size_t i = 0; i < n; ++i)
      if (sums[i] >= lo && sums[i] <= hi) {
        win.push_back(sums[i]);
        for (int c = 0; c < 3; ++c) ch[static_cast<std::size_t>(c)].push_back(px[i][c]);
      }
    const auto median = [](std::vector<double> v) {
      std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
      return v[v.size() / 2];
    };
    const auto mad = [&](const std::vector<double>& v) {
      const double m = median(v);
      std::vector<double> dev(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) dev[i] = std::abs(v[i] - m);
      return median(dev);
    };
    Vec3 pct;
    {
      std::vector<double> v(n);
      const auto k = static_cast<std::size_t>(params.dark_percentile * static_cast<double>(n - 1));
      for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < n; ++i) v[i] = px[i][c];
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
        pct[c] = v[k];
      }
    }
    // The cluster median may sit above the percentile by its noise tail,
    // which the sum window also spans; a dim colored patch sits far above.
    bool cluster = win.size() >= 2 && center - lo <= 0.1 * (quantile(0.5) - lo);
    Vec3 med = pct;
    if (cluster) {
      const double spread = mad(win);
      for (int c = 0; c < 3; ++c) {
        const auto& v = ch[static_cast<std::size_t>(c)];
        const double m = mad(v);
        med[c] = median(v);
        cluster = cluster && m <= spread + 1e-9 && med[c] - pct[c] <= (center - lo) + 3 * m + 1e-9;
      }
    }
    prof.d = cluster ? med : pct;
  }

  double mean_level = 0;
  for (const auto& p : px) mean_level += std::max(0.0, (p - prof.d).sum() / 3.0);
  mean_level /= static_cast<double>(n);
  if (!(mean_level > 0))
    throw Error(ErrorKind::ProfileFailure, "profile region is black");

  const auto take = std::max<std::size_t>(1, static_cast<std::size_t>(params.fraction * n));
  std::array<Vec3, 3> prim;
  std::vector<std::pair<double, std::size_t>> score(n);
  for (int c = 0; c < 3; ++c) {
    const int o1 = (c + 1) % 3, o2 = (c + 2) % 3;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 v = px[i] - prof.d;
      score[i] = {v[c] - 0.5 * (v[o1] + v[o2]), i};
    }
    std::nth_element(score.begin(), score.begin() + static_cast<std::ptrdiff_t>(take - 1),
                     score.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    Eigen::Matrix3d moment = Eigen::Matrix3d::Zero();
    double mean_score = 0;
    for (std::size_t k = 0; k < take; ++k) {
      const Vec3 v = px[score[k].second] - prof.d;
      moment += v * v.transpose();
      mean_score += score[k].first;
    }
    mean_score /= static_cast<double>(take);
    // Gray or noise-only regions yield no saturated cluster.
    if (!(mean_score > 0.1 * mean_level))
      throw Error(ErrorKind::ProfileFailure,
                  std::string("no saturated ") + "RGB"[c] + " pixels in profile region");
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(moment);
    Vec3 dir = es.eigenvectors().col(2);
    if (dir.sum() < 0) dir = -dir;
    const double l1 = dir.sum();
    if (!(l1 > 1e-9)) throw Error(ErrorKind::ProfileFailure, "primary direction degenerate");
    prim[c] = dir / l1;
  }
  prof.r = prim[0];
  prof.g = prim[1];
  prof.b = prim[2];

  const double min_angle = 5.0 * M_PI / 180.0;
  if (angle_between(prof.r, prof.g) < min_angle || angle_between(prof.g, prof.b) < min_angle ||
      angle_between(prof.r, prof.b) < min_angle)
    throw Error(ErrorKind::ProfileFailure, "profile primaries are nearly collinear");
  Eigen::Matrix3d basis;
  basis << prof.r.normalized(), prof.g.normalized(), prof.b.normalized();
  if (std::abs(basis.determinant()) < 0.02)
    throw Error(ErrorKind::ProfileFailure, "profile primaries are nearly coplanar");
  return prof;
}

LinearImage apply_profile(const LinearImage& img, const MatrixProfile& profile) {
  if (img.channels() != 3) throw Error(ErrorKind::InvalidArgument, "profile needs an RGB image");
  Eigen::Matrix3d m;
  m << profile.r, profile.g, profile.b;
  Eigen::FullPivLU<Eigen::Matrix3d> lu(m);
  if (!lu.isInvertible() || std::abs(m.determinant()) < 1e-12)
    throw Error(ErrorKind::InvalidArgument, "profile matrix is singular");
  const Eigen::Matrix3d inv = lu.inverse();
  LinearImage out(img.width(), img.height(), 3);
  const std::size_t n = img.pixel_count();
  const float* src = img.data().data();
  float* dst = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 v(src[3 * i] - profile.d[0], src[3 * i + 1] - profile.d[1],
                 src[3 * i + 2] - profile.d[2]);
    const Vec3 x = inv * v;
    dst[3 * i] = static_cast<float>(x[0]);
    dst[3 * i + 1] = static_cast<float>(x[1]);
    dst[3 * i + 2] = static_cast<float>(x[2]);
  }
  return out;
}

LinearImage gaussian_blur(const LinearImage& img, double sigma) {
  if (!(sigma > 0)) throw Error(ErrorKind::InvalidArgument, "blur sigma must be positive");
  const int half = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * half + 1);
  double sum = 0;
  for (int i = -half; i <= half; ++i) sum += k[i + half] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= sum;

  const int w = img.width(), h = img.height(), cn = img.channels();
  LinearImage tmp(w, h, cn), out(w, h, cn);
  std::vector<double> acc(cn);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int i = -half; i <= half; ++i) {
        const float* p = img.pixel(std::clamp(x + i, 0, w - 1), y);
        for (int c = 0; c < cn; ++c) acc[c] += k[i + half] * p[c];
      }
      for (int c = 0; c < cn; ++c) tmp.at(x, y, c) = static_cast<float>(acc[c]);
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int i = -half; i <= half; ++i) {
        const float* p = tmp.pixel(x, std::clamp(y + i, 0, h - 1));
        for (int c = 0; c < cn; ++c) acc[c] += k[i + half] * p[c];
      }
      for (int c = 0; c < cn; ++c) out.at(x, y, c) = static_cast<float>(acc[c]);
    }
  return out;
}

LinearImage unsharp(const LinearImage& img, double radius, double amount) {
  if (!(radius > 0)) throw Error(ErrorKind::InvalidArgument, "unsharp radius must be positive");
  if (amount == 0.0) return img;
  const LinearImage blurred = gaussian_blur(img, radius);
  LinearImage out = img;
  auto& o = out.data();
  const auto& b = blurred.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = o[i] + amount * (static_cast<double>(o[i]) - b[i]);
    o[i] = static_cast<float>(std::max(0.0, v));
  }
  return out;
}

ClassMap classify(const LinearImage& primaries, double threshold) {
  if (!(threshold > 0)) throw Error(ErrorKind::InvalidArgument, "threshold must be positive");
  if (primaries.channels() != 3)
    throw Error(ErrorKind::InvalidArgument, "classify needs a 3-channel image");
  ClassMap cm;
  cm.width = primaries.width();
  cm.height = primaries.height();
  cm.labels.resize(primaries.pixel_count());
  const float* p = primaries.data().data();
  for (std::size_t i = 0; i < cm.labels.size(); ++i) {
    const double r = p[3 * i], g = p[3 * i + 1], b = p[3 * i + 2];
    const bool is_r = r > std::abs(g + b) * threshold;
    const bool is_g = g > std::abs(r + b) * threshold;
    const bool is_b = b > std::abs(r + g) * threshold;
    const int fired = int(is_r) + int(is_g) + int(is_b);
    Label l = Label::None;
    if (fired == 1) l = is_r ? Label::Red : (is_g ? Label::Green : Label::Blue);
    cm.labels[i] = l;
  }
  return cm;
}

}  // namespace screenreg
