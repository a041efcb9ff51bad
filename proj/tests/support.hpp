#pragma once

#include "screenreg/analysis.hpp"
#include "screenreg/synth.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>

namespace screenreg::testing {

/// Clean Dufay scene of the given size, no warp, identity mixing.
inline SynthScene clean_scene(int width, int height, double angle_deg = 0, double pitch = 10) {
  SynthScene s;
  s.spec = presets::dufay().with_pitch(pitch);
  s.width = width;
  s.height = height;
  s.angle_deg = angle_deg;
  return s;
}

inline double deg(double rad) { return rad * 180.0 / std::numbers::pi; }

/// Unsigned angle between two directions, degrees.
inline double angle_between(const Vec2& a, const Vec2& b) {
  return deg(std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0)));
}
inline double angle_between(const Vec3& a, const Vec3& b) {
  return deg(std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0)));
}

inline double psnr(double mse, double peak = 1.0) { return 10.0 * std::log10(peak * peak / mse); }

/// Primaries image of a clean scene with identity mixing and no black level.
inline ClassMap class_map_of(const LinearImage& primaries, double t = 1.5) { return classify(primaries, t); }

/// Directory under the system temp path, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("screenreg_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace screenreg::testing
