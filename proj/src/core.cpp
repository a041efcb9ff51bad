#include "screenreg/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace screenreg {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::OutOfRange: return "out-of-range";
    case ErrorKind::ProfileFailure: return "profile-failure";
    case ErrorKind::NoSeed: return "no-seed";
    case ErrorKind::RefineFailure: return "refine-failure";
    case ErrorKind::InsufficientData: return "insufficient-data";
    case ErrorKind::IllConditioned: return "ill-conditioned";
    case ErrorKind::NonConvergence: return "non-convergence";
    case ErrorKind::OutOfDomain: return "out-of-domain";
    case ErrorKind::MatchFailure: return "match-failure";
    case ErrorKind::TileAnalysisFailure: return "tile-analysis-failure";
    case ErrorKind::Io: return "io";
    case ErrorKind::Format: return "format";
  }
  return "unknown";
}

LinearImage::LinearImage(int width, int height, int channels, float fill)
    : width_(width), height_(height), channels_(channels) {
  if (width < 1 || height < 1)
    throw Error(ErrorKind::InvalidArgument, "image dimensions must be >= 1");
  if (channels != 1 && channels != 3)
    throw Error(ErrorKind::InvalidArgument, "image must have 1 or 3 channels");
  data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

float LinearImage::sample_bilinear(double x, double y, int c) const {
  x = std::clamp(x, 0.0, static_cast<double>(width_ - 1));
  y = std::clamp(y, 0.0, static_cast<double>(height_ - 1));
  const int x0 = std::min(static_cast<int>(x), width_ - 2 < 0 ? 0 : width_ - 2);
  const int y0 = std::min(static_cast<int>(y), height_ - 2 < 0 ? 0 : height_ - 2);
  const int x1 = std::min(x0 + 1, width_ - 1);
  const int y1 = std::min(y0 + 1, height_ - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = at(x0, y0, c) * (1 - fx) + at(x1, y0, c) * fx;
  const double bot = at(x0, y1, c) * (1 - fx) + at(x1, y1, c) * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

bool LinearImage::is_valid_linear() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](float v) { return std::isfinite(v) && v >= 0.0f; });
}

char color_letter(PatchColor c) {
  switch (c) {
    case PatchColor::Red: return 'R';
    case PatchColor::Green: return 'G';
    case PatchColor::Blue: return 'B';
  }
  return '?';
}

PatchColor color_from_letter(char c) {
  switch (c) {
    case 'R': case 'r': return PatchColor::Red;
    case 'G': case 'g': return PatchColor::Green;
    case 'B': case 'b': return PatchColor::Blue;
    default: break;
  }
  throw Error(ErrorKind::Format, std::string("unknown site color '") + c + "'");
}

std::string_view to_string(ScreenKind kind) {
  switch (kind) {
    case ScreenKind::Dufay: return "Dufay";
    case ScreenKind::PagetFinlay: return "PagetFinlay";
    case ScreenKind::Custom: return "Custom";
  }
  return "Custom";
}

ScreenKind screen_kind_from_string(std::string_view s) {
  if (s == "Dufay") return ScreenKind::Dufay;
  if (s == "PagetFinlay") return ScreenKind::PagetFinlay;
  if (s == "Custom") return ScreenKind::Custom;
  throw Error(ErrorKind::Format, "unknown screen kind '" + std::string(s) + "'");
}

ScreenSpec::ScreenSpec(ScreenKind kind, Vec2 e1_mm, Vec2 e2_mm, std::vector<ScreenSite> sites,
                       double nominal_pitch_px, std::string name)
    : kind_(kind), name_(std::move(name)), e1_(e1_mm), e2_(e2_mm), sites_(std::move(sites)),
      pitch_px_(nominal_pitch_px) {
  validate();
}

void ScreenSpec::validate() {
  const double cross = e1_.x() * e2_.y() - e1_.y() * e2_.x();
  if (!(std::abs(cross) > 1e-12 * e1_.squaredNorm() * e2_.squaredNorm()) ||
      e1_.squaredNorm() == 0.0 || e2_.squaredNorm() == 0.0)
    throw Error(ErrorKind::InvalidArgument, "screen basis vectors are linearly dependent");
  if (!(pitch_px_ > 0.0))
    throw Error(ErrorKind::InvalidArgument, "nominal_pitch_px must be positive");
  if (sites_.empty()) throw Error(ErrorKind::InvalidArgument, "screen has no sites");
  for (const auto& s : sites_) {
    if (s.offset.x() < 0 || s.offset.x() >= 1 || s.offset.y() < 0 || s.offset.y() >= 1)
      throw Error(ErrorKind::InvalidArgument, "site offset outside [0,1)^2");
    if (!(s.extent.x() > 0) || !(s.extent.y() > 0))
      throw Error(ErrorKind::InvalidArgument, "site extent must be positive");
  }
  bool found = false;
  for (std::size_t g = 0; g < sites_.size() && !found; ++g) {
    if (sites_[g].color != PatchColor::Green || !sites_[g].measurable()) continue;
    for (std::size_t b = 0; b < sites_.size(); ++b) {
      if (sites_[b].color == PatchColor::Blue && sites_[b].measurable() &&
          (sites_[b].offset - sites_[g].offset).norm() > 1e-9) {
        seed_green_ = g;
        seed_blue_ = b;
        found = true;
        break;
      }
    }
  }
  if (!found)
    throw Error(ErrorKind::InvalidArgument,
                "screen needs a green and a blue patch site at different offsets");
}

const ScreenSite& ScreenSpec::site(std::size_t idx) const {
  if (idx >= sites_.size())
    throw Error(ErrorKind::OutOfRange, "site index " + std::to_string(idx) + " out of range");
  return sites_[idx];
}

double ScreenSpec::basis_angle() const {
  return std::atan2(e1_.x() * e2_.y() - e1_.y() * e2_.x(), e1_.dot(e2_));
}

void ScreenSpec::nominal_pixel_basis(Vec2& a1, Vec2& a2) const {
  a1 = Vec2(pitch_px_, 0.0);
  const double ang = basis_angle();
  a2 = aspect() * pitch_px_ * Vec2(std::cos(ang), std::sin(ang));
}

double ScreenSpec::same_color_spacing(std::size_t site_index) const {
  const ScreenSite& s = site(site_index);
  Vec2 a1, a2;
  nominal_pixel_basis(a1, a2);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < sites_.size(); ++k) {
    if (sites_[k].color != s.color) continue;
    for (int di = -1; di <= 1; ++di)
      for (int dj = -1; dj <= 1; ++dj) {
        if (k == site_index && di == 0 && dj == 0) continue;
        const Vec2 d = sites_[k].offset + Vec2(di, dj) - s.offset;
        best = std::min(best, (d.x() * a1 + d.y() * a2).norm());
      }
  }
  return best / pitch_px_;
}

ScreenSpec ScreenSpec::with_pitch(double pitch_px) const {
  return ScreenSpec(kind_, e1_, e2_, sites_, pitch_px, name_);
}

PatchColor site_color_at(const ScreenSpec& spec, CellIndex /*cell*/, std::size_t site_index) {
  return spec.site(site_index).color;
}

Vec2 lattice_to_mm(const ScreenSpec& spec, const LatticeCoord& lc) {
  return lc.u * spec.e1() + lc.v * spec.e2();
}

namespace presets {

// One green and one blue square side by side, then a red line.
// 10 px cells at 4400 ppi put each patch at ~5 px.
ScreenSpec dufay() {
  const double cell_mm = 10.0 / (4400.0 / 25.4);
  return ScreenSpec(ScreenKind::Dufay, Vec2(cell_mm, 0), Vec2(0, cell_mm),
                    {{Vec2(0.0, 0.0), PatchColor::Green, Vec2(0.25, 0.25)},
                     {Vec2(0.5, 0.0), PatchColor::Blue, Vec2(0.25, 0.25)},
                     {Vec2(0.25, 0.5), PatchColor::Red, Vec2(0.5, 0.25)}},
                    10.0, "dufay");
}

ScreenSpec dufay_fine() {
  const double cell_mm = 8.5 / (4400.0 / 25.4);
  const double ang = 23.0 * M_PI / 180.0;
  const Vec2 e1 = cell_mm * Vec2(std::cos(ang), std::sin(ang));
  const Vec2 e2 = cell_mm * Vec2(-std::sin(ang), std::cos(ang));
  return ScreenSpec(ScreenKind::Dufay, e1, e2,
                    {{Vec2(0.0, 0.0), PatchColor::Green, Vec2(0.25, 0.25)},
                     {Vec2(0.5, 0.0), PatchColor::Blue, Vec2(0.25, 0.25)},
                     {Vec2(0.25, 0.5), PatchColor::Red, Vec2(0.5, 0.25)}},
                    8.5, "dufay-fine");
}

ScreenSpec paget_finlay() {
  const double cell_mm = 12.0 / (4400.0 / 25.4);
  return ScreenSpec(ScreenKind::PagetFinlay, Vec2(cell_mm, 0), Vec2(0, cell_mm),
                    {{Vec2(0.0, 0.0), PatchColor::Green, Vec2(0.25, 0.25)},
                     {Vec2(0.5, 0.0), PatchColor::Blue, Vec2(0.25, 0.25)},
                     {Vec2(0.0, 0.5), PatchColor::Blue, Vec2(0.25, 0.25)},
                     {Vec2(0.5, 0.5), PatchColor::Red, Vec2(0.25, 0.25)}},
                    12.0, "paget");
}

ScreenSpec by_name(std::string_view name) {
  if (name == "dufay") return dufay();
  if (name == "dufay-fine") return dufay_fine();
  if (name == "paget" || name == "finlay" || name == "paget-finlay") return paget_finlay();
  throw Error(ErrorKind::InvalidArgument, "unknown screen preset '" + std::string(name) + "'");
}

}  // namespace presets

namespace {

Vec2 vec_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 2) throw Error(ErrorKind::Format, "expected 2-vector");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

ScreenSpec parse_screen_spec(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("screen config: ") + e.what());
  }
  try {
    ScreenKind kind = ScreenKind::Custom;
    Vec2 e1(1, 0), e2(0, 1);
    std::vector<ScreenSite> sites;
    double pitch = 10.0;
    std::string name = "custom";
    if (j.contains("preset")) {
      ScreenSpec base = presets::by_name(j["preset"].get<std::string>());
      kind = base.kind();
      e1 = base.e1();
      e2 = base.e2();
      sites = base.sites();
      pitch = base.nominal_pitch_px();
      name = base.name();
    }
    if (j.contains("kind")) kind = screen_kind_from_string(j["kind"].get<std::string>());
    if (j.contains("name")) name = j["name"].get<std::string>();
    if (j.contains("e1")) e1 = vec_from_json(j["e1"]);
    if (j.contains("e2")) e2 = vec_from_json(j["e2"]);
    if (j.contains("nominal_pitch_px")) pitch = j["nominal_pitch_px"].get<double>();
    if (j.contains("sites")) {
      sites.clear();
      for (const auto& s : j["sites"]) {
        ScreenSite site;
        site.offset = vec_from_json(s.at("offset"));
        const auto color = s.at("color").get<std::string>();
        if (color.size() != 1) throw Error(ErrorKind::Format, "site color must be R, G or B");
        site.color = color_from_letter(color[0]);
        if (s.contains("extent")) site.extent = vec_from_json(s["extent"]);
        sites.push_back(site);
      }
    }
    return ScreenSpec(kind, e1, e2, std::move(sites), pitch, name);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("screen config: ") + e.what());
  }
}

ScreenSpec load_screen_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open screen config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_screen_spec(ss.str());
}

std::string screen_spec_to_json(const ScreenSpec& spec) {
  nlohmann::json j;
  j["name"] = spec.name();
  j["kind"] = std::string(to_string(spec.kind()));
  j["e1"] = {spec.e1().x(), spec.e1().y()};
  j["e2"] = {spec.e2().x(), spec.e2().y()};
  j["nominal_pitch_px"] = spec.nominal_pitch_px();
  auto sites = nlohmann::json::array();
  for (const auto& s : spec.sites()) {
    sites.push_back({{"offset", {s.offset.x(), s.offset.y()}},
                     {"color", std::string(1, color_letter(s.color))},
                     {"extent", {s.extent.x(), s.extent.y()}}});
  }
  j["sites"] = sites;
  return j.dump(2);
}

CapturePlan plan_capture(double plate_short_in, double plate_long_in, double ppi,
                         double short_axis_padding_in, double long_axis_padding_in) {
  if (!(plate_short_in > 0) || !(plate_long_in > 0) || !(ppi > 0) ||
      short_axis_padding_in < 0 || long_axis_padding_in < 0)
    throw Error(ErrorKind::InvalidArgument, "capture plan needs positive plate size and ppi");
  CapturePlan plan;
  plan.width_in = plate_short_in + 2.0 * short_axis_padding_in;
  plan.height_in = plate_long_in + 2.0 * long_axis_padding_in;
  plan.width_px = std::lround(plan.width_in * ppi);
  plan.height_px = std::lround(plan.height_in * ppi);
  return plan;
}

}  // namespace screenreg
