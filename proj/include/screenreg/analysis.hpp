#pragma once

#include "screenreg/core.hpp"
#include "screenreg/profiling.hpp"

#include <optional>
#include <string>
#include <vector>

namespace screenreg {

/// Screen geometry near one point of the scan: the seed green patch center
/// and the pixel-space images of the lattice basis vectors.
struct LocalFrame {
  Vec2 origin = Vec2::Zero();
  Vec2 a1 = Vec2(10, 0);
  Vec2 a2 = Vec2(0, 10);

  double pitch() const { return std::sqrt(std::abs(a1.x() * a2.y() - a1.y() * a2.x())); }
  Vec2 predict(double cu, double cv) const { return origin + cu * a1 + cv * a2; }
};

/// Throws InvalidArgument if the frame is degenerate for the screen.
void validate_frame(const LocalFrame& frame, const ScreenSpec& spec);

struct LatticeRect {
  int u0 = 0;
  int v0 = 0;
  int width = 0;
  int height = 0;

  bool contains(int i, int j) const {
    return i >= u0 && j >= v0 && i < u0 + width && j < v0 + height;
  }
  std::size_t cell_count() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }
};

struct SiteRecord {
  Vec2 center = Vec2::Zero();
  bool valid = false;
  /// Detection confidence; zero for sites positioned from the fit rather
  /// than measured.
  float weight = 0.0f;
};

/// Lattice-indexed detected patch centers. Every site in the bounds
/// carries a center (measured or predicted); `valid` marks usable ones.
class PatchGrid {
 public:
  PatchGrid() = default;
  PatchGrid(LatticeRect bounds, int sites_per_cell, int image_width, int image_height);

  const LatticeRect& bounds() const noexcept { return bounds_; }
  int sites_per_cell() const noexcept { return sites_; }
  int image_width() const noexcept { return image_w_; }
  int image_height() const noexcept { return image_h_; }
  bool empty() const noexcept { return records_.empty(); }

  SiteRecord& at(int i, int j, int s) { return records_[index(i, j, s)]; }
  const SiteRecord& at(int i, int j, int s) const { return records_[index(i, j, s)]; }
  const SiteRecord* find(int i, int j, int s) const {
    return bounds_.contains(i, j) && s >= 0 && s < sites_ ? &records_[index(i, j, s)] : nullptr;
  }

  std::vector<SiteRecord>& records() noexcept { return records_; }
  const std::vector<SiteRecord>& records() const noexcept { return records_; }

  std::size_t valid_count() const;
  bool center_in_image(const Vec2& c) const {
    return c.x() >= -0.5 && c.y() >= -0.5 && c.x() <= image_w_ - 0.5 && c.y() <= image_h_ - 0.5;
  }

  LocalFrame seed_frame;

 private:
  std::size_t index(int i, int j, int s) const {
    return ((static_cast<std::size_t>(j - bounds_.v0) * bounds_.width) + (i - bounds_.u0)) *
               sites_ + s;
  }

  LatticeRect bounds_;
  int sites_ = 0;
  int image_w_ = 0;
  int image_h_ = 0;
  std::vector<SiteRecord> records_;
};

/// Valid sites over sites in the grid bounds whose centers fall inside the image.
double coverage(const PatchGrid& pg);

/// Valid sites over the number of sites the image area can hold.
double area_coverage(const PatchGrid& pg, const LocalFrame& frame, const ScreenSpec& spec);

struct SeedParams {
  double search_radius_cells = 8.0;
  double min_area_ratio = 0.3;
  double max_area_ratio = 2.5;
};

LocalFrame find_seed(const ClassMap& cm, const ScreenSpec& spec, const Vec2& start,
                     const SeedParams& params = {});

struct RefineParams {
  int half_size = 2;  // 5x5 cells
  double quorum = 0.6;
  double tolerance_px = 0.05;
  int max_iterations = 10;
  double window_factor = 0.6;
  double min_mass_ratio = 0.3;
  double max_displacement = 0.35;
};

LocalFrame refine_seed_grid(const ClassMap& cm, const ScreenSpec& spec, const LocalFrame& frame,
                            const RefineParams& params = {});

struct FloodParams {
  double window_factor = 0.6;
  double min_mass_ratio = 0.3;
  double max_displacement = 0.35;
  int local_neighbors = 24;
  int max_attempts_per_cell = 2;
};

PatchGrid flood_fill(const ClassMap& cm, const ScreenSpec& spec, const LocalFrame& frame,
                     const FloodParams& params = {});

struct AnalysisParams {
  double threshold = 1.5;
  double unsharp_radius = 0;  // 0: nominal pitch / 4
  double unsharp_amount = 1.0;
  ProfileParams profile;
  double profile_region = 0.25;
  SeedParams seed;
  RefineParams refine;
  FloodParams flood;
  int max_attempts = 9;  // first attempt at the center plus retries
  double min_area_coverage = 0.6;
};

struct AttemptReport {
  Vec2 start = Vec2::Zero();
  std::string outcome;  // "ok" or the failure kind
  std::string detail;
  double coverage = 0;
};

struct TileAnalysis {
  MatrixProfile profile;
  LocalFrame frame;
  PatchGrid grid;
  LinearImage primaries;  // profile-space image used for sampling
  std::vector<AttemptReport> attempts;
  double area_coverage = 0;
};

/// Start points used after the centered attempt (Halton 2,3 over the
/// central 80% of the image).
std::vector<Vec2> retry_starts(int width, int height, int count);

/// Profiling, seed detection, refinement and flood fill with retries.
/// Throws TileAnalysisFailure carrying per-attempt reasons when no attempt
/// reaches the coverage threshold and no usable grid was produced.
TileAnalysis analyze_tile(const LinearImage& img, const ScreenSpec& spec,
                          const AnalysisParams& params = {});

}  // namespace screenreg
