#pragma once

#include "screenreg/core.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace screenreg {

/// How encoded samples map to linear light.
struct Transfer {
  enum class Kind { Linear, Gamma, Srgb, Lut };
  Kind kind = Kind::Linear;
  double gamma = 1.0;
  std::vector<float> lut;  // uniform samples of the decode curve over [0,1]

  static Transfer linear() { return {}; }
  static Transfer power(double g) { return {Kind::Gamma, g, {}}; }
  static Transfer srgb() { return {Kind::Srgb, 1.0, {}}; }
  static Transfer table(std::vector<float> t) { return {Kind::Lut, 1.0, std::move(t)}; }

  /// Parses "linear", "srgb", "gamma:2.2" or a plain number (gamma).
  static Transfer parse(const std::string& text);
};

LinearImage linearize(const LinearImage& raw, const Transfer& transfer);

struct Rect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
};

/// Centered rectangle covering `fraction` of each image dimension.
Rect center_region(const LinearImage& img, double fraction);

/// Black point plus screen primaries as seen by the scanner.
struct MatrixProfile {
  Vec3 d = Vec3::Zero();
  Vec3 r = Vec3::UnitX();
  Vec3 g = Vec3::UnitY();
  Vec3 b = Vec3::UnitZ();

  /// Affine map from (x_r, x_g, x_b, 1) to (scan rgb, 1).
  Mat4 matrix() const;
  static MatrixProfile from_matrix(const Mat4& m);

  /// Scan rgb for given primary intensities.
  Vec3 forward(const Vec3& primaries) const;

  std::string to_json() const;
  static MatrixProfile from_json(const std::string& text);
};

struct ProfileParams {
  double fraction = 0.10;
  double dark_percentile = 0.01;
};

/// Estimates the matrix profile from a region expected to contain all
/// three patch colors. Primaries are unit L1 direction vectors, so the
/// profile-space value of a patch is its intensity in scanner units.
/// Throws ErrorKind::ProfileFailure on degenerate regions.
MatrixProfile estimate_profile(const LinearImage& img, const Rect& region,
                               const ProfileParams& params = {});

/// Converts scan rgb into screen-primary space (inverse of the profile).
LinearImage apply_profile(const LinearImage& img, const MatrixProfile& profile);

/// out = img + amount * (img - gaussian(img, sigma = radius)), clamped at 0.
LinearImage unsharp(const LinearImage& img, double radius, double amount);

LinearImage gaussian_blur(const LinearImage& img, double sigma);

enum class Label : std::uint8_t { Red = 0, Green = 1, Blue = 2, None = 3 };

inline Label label_of(PatchColor c) { return static_cast<Label>(static_cast<int>(c)); }

struct ClassMap {
  int width = 0;
  int height = 0;
  std::vector<Label> labels;

  Label at(int x, int y) const {
    return labels[static_cast<std::size_t>(y) * width + x];
  }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
};

/// A pixel is red when r > |g + b| * t, likewise for green and blue.
/// Pixels where no rule or more than one rule fires are None.
ClassMap classify(const LinearImage& primaries, double threshold = 1.5);

}  // namespace screenreg
