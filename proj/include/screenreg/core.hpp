#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace screenreg {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Failure categories. Callers that retry (seed search, profile sampling)
/// switch on the kind instead of parsing messages.
enum class ErrorKind {
  InvalidArgument,
  OutOfRange,
  ProfileFailure,
  NoSeed,
  RefineFailure,
  InsufficientData,
  IllConditioned,
  NonConvergence,
  OutOfDomain,
  MatchFailure,
  TileAnalysisFailure,
  Io,
  Format,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Linear-light floating point image, interleaved channels, row-major.
class LinearImage {
 public:
  LinearImage() = default;
  LinearImage(int width, int height, int channels, float fill = 0.0f);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t pixel_count() const noexcept {
    return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
  }

  float& at(int x, int y, int c = 0) {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  float at(int x, int y, int c = 0) const {
    return data_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
  }
  float* pixel(int x, int y) {
    return data_.data() + (static_cast<std::size_t>(y) * width_ + x) * channels_;
  }
  const float* pixel(int x, int y) const {
    return data_.data() + (static_cast<std::size_t>(y) * width_ + x) * channels_;
  }
  bool contains(int x, int y) const noexcept {
    return x >= 0 && y >= 0 && x < width_ && y < height_;
  }

  std::vector<float>& data() noexcept { return data_; }
  const std::vector<float>& data() const noexcept { return data_; }

  /// Bilinear sample with edge clamping; x, y in pixel-center coordinates.
  float sample_bilinear(double x, double y, int c) const;

  /// True when every sample is finite and non-negative.
  bool is_valid_linear() const;

 private:
  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
};

enum class PatchColor : std::uint8_t { Red = 0, Green = 1, Blue = 2 };

char color_letter(PatchColor c);
PatchColor color_from_letter(char c);

enum class ScreenKind { Dufay, PagetFinlay, Custom };

std::string_view to_string(ScreenKind kind);
ScreenKind screen_kind_from_string(std::string_view s);

/// One colored sample site inside the repeating unit cell.
struct ScreenSite {
  Vec2 offset = Vec2::Zero();  // fractional cell coordinates in [0,1)^2
  PatchColor color = PatchColor::Green;
  Vec2 extent = Vec2(0.25, 0.25);  // fractional half-widths of the patch

  /// A site is measured directly from the scan when it is a compact patch;
  /// line sites (spanning the cell along one axis) are positioned from the fit.
  bool measurable() const noexcept { return extent.x() < 0.5 && extent.y() < 0.5; }
};

/// Continuous lattice position; the integer part indexes the cell.
struct LatticeCoord {
  double u = 0.0;
  double v = 0.0;

  Vec2 vec() const { return {u, v}; }
  static LatticeCoord from(const Vec2& p) { return {p.x(), p.y()}; }
};

struct CellIndex {
  int i = 0;
  int j = 0;
  friend bool operator==(const CellIndex&, const CellIndex&) = default;
};

/// Parametric description of a regular color screen.
class ScreenSpec {
 public:
  ScreenSpec() = default;
  ScreenSpec(ScreenKind kind, Vec2 e1_mm, Vec2 e2_mm, std::vector<ScreenSite> sites,
             double nominal_pitch_px, std::string name = {});

  ScreenKind kind() const noexcept { return kind_; }
  const std::string& name() const noexcept { return name_; }
  const Vec2& e1() const noexcept { return e1_; }
  const Vec2& e2() const noexcept { return e2_; }
  const std::vector<ScreenSite>& sites() const noexcept { return sites_; }
  std::size_t site_count() const noexcept { return sites_.size(); }
  const ScreenSite& site(std::size_t idx) const;

  /// Pixels per |e1| at scan resolution.
  double nominal_pitch_px() const noexcept { return pitch_px_; }

  /// Index of the first green site and of the first blue site at a
  /// different offset; the pair that seeds geometry detection.
  std::size_t seed_green_site() const noexcept { return seed_green_; }
  std::size_t seed_blue_site() const noexcept { return seed_blue_; }

  /// |e2| / |e1| and the signed angle from e1 to e2.
  double aspect() const noexcept { return e2_.norm() / e1_.norm(); }
  double basis_angle() const;

  /// Nominal pixel-space cell basis for a screen whose e1 is aligned with +x.
  void nominal_pixel_basis(Vec2& a1, Vec2& a2) const;

  /// Spacing (fractional cell units) between a site and its nearest
  /// same-colored neighbor anywhere in the lattice.
  double same_color_spacing(std::size_t site_index) const;

  /// Returns a copy with a different pixel pitch.
  ScreenSpec with_pitch(double pitch_px) const;

 private:
  void validate();

  ScreenKind kind_ = ScreenKind::Custom;
  std::string name_;
  Vec2 e1_ = Vec2(1, 0);
  Vec2 e2_ = Vec2(0, 1);
  std::vector<ScreenSite> sites_;
  double pitch_px_ = 10.0;
  std::size_t seed_green_ = 0;
  std::size_t seed_blue_ = 0;
};

PatchColor site_color_at(const ScreenSpec& spec, CellIndex cell, std::size_t site_index);

/// u*e1 + v*e2 in screen millimeters.
Vec2 lattice_to_mm(const ScreenSpec& spec, const LatticeCoord& lc);

namespace presets {
/// Dufaycolor réseau, common variant. Dimensions are nominal.
ScreenSpec dufay();
/// Dufaycolor réseau, finer variant with rotated lines. Dimensions are nominal.
ScreenSpec dufay_fine();
/// Paget / Finlay checkerboard. Dimensions are nominal.
ScreenSpec paget_finlay();
/// Looks up a preset by name ("dufay", "dufay-fine", "paget", "finlay").
ScreenSpec by_name(std::string_view name);
}  // namespace presets

/// Loads a screen description (JSON). A "preset" key selects a built-in
/// screen whose fields are then overridden by any present keys.
ScreenSpec load_screen_spec(const std::filesystem::path& path);
ScreenSpec parse_screen_spec(std::string_view json_text);
std::string screen_spec_to_json(const ScreenSpec& spec);

/// Capture size planning for a plate at a given sampling density.
struct CapturePlan {
  double width_in = 0;
  double height_in = 0;
  long width_px = 0;
  long height_px = 0;
};

/// Plate dimensions in inches plus padding (added at both ends of each
/// axis) at the given ppi. Pixel counts are rounded to nearest.
CapturePlan plan_capture(double plate_short_in, double plate_long_in, double ppi,
                         double short_axis_padding_in, double long_axis_padding_in);

}  // namespace screenreg
