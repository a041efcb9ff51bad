#pragma once

#include "screenreg/analysis.hpp"
#include "screenreg/core.hpp"
#include "screenreg/homography.hpp"

#include <string>
#include <vector>

namespace screenreg {

/// Radial distortion about a fixed center:
///   distorted = c + (p - c) * (1 + k1 rho^2 + k2 rho^4), rho = |p - c| / norm_radius.
struct LensModel {
  Vec2 center = Vec2::Zero();
  double k1 = 0;
  double k2 = 0;
  double norm_radius = 1;

  bool is_identity() const { return k1 == 0 && k2 == 0; }
  double factor(double rho2) const { return 1.0 + k1 * rho2 + k2 * rho2 * rho2; }
  Vec2 distort(const Vec2& p) const;
  Vec2 undistort(const Vec2& q) const;

  /// Lens centered on an image of the given size, normalized by its half diagonal.
  static LensModel for_image(int width, int height);
  /// Whether the multiplier stays positive (and the map injective) out to the image corners.
  bool injective_over(int width, int height) const;
};

struct LensFitParams {
  int max_points = 4000;
  int iterations = 30;
};

/// Joint least-squares refinement of H and (k1, k2) with the lens center
/// fixed at `lens_frame.center`. Returns the lens; `h` is updated.
LensModel fit_lens(std::span<const PointPair> pairs, Homography& h, const LensModel& lens_frame,
                   const LensFitParams& params = {});

struct MeshParams {
  int nx = 100;
  int ny = 100;
  double weight_sigma = 0;      // lattice units; 0: node spacing
  double support_sigmas = 3.0;  // neighborhood radius for each node solve
  int min_support = 8;
  double min_spacing_cells = 2.0;  // node count is reduced on small grids
  int workers = 1;
  RansacParams ransac;
};

/// Grid of locally fitted lattice->scan homographies, blended bilinearly
/// and post-composed with a shared lens model.
class MeshTransform {
 public:
  MeshTransform() = default;
  MeshTransform(int nx, int ny, Vec2 domain_min, Vec2 domain_max, LensModel lens);

  /// Mesh whose every node carries the same homography.
  static MeshTransform uniform(const Homography& h, Vec2 domain_min, Vec2 domain_max, int nx,
                               int ny, const LensModel& lens = {});

  int nx() const noexcept { return nx_; }
  int ny() const noexcept { return ny_; }
  const Vec2& domain_min() const noexcept { return dmin_; }
  const Vec2& domain_max() const noexcept { return dmax_; }
  const LensModel& lens() const noexcept { return lens_; }
  Vec2 spacing() const;
  Vec2 node_position(int k, int l) const;

  const Homography& node(int k, int l) const { return nodes_[idx(k, l)]; }
  void set_node(int k, int l, const Homography& h, bool solved);
  bool node_solved(int k, int l) const { return solved_[idx(k, l)] != 0; }
  std::size_t solved_count() const;

  /// True inside the domain; `extrapolated` set when within one lattice
  /// unit outside it.
  bool in_domain(const LatticeCoord& lc, bool* extrapolated = nullptr) const;

  /// Throws OutOfDomain farther than one lattice unit outside the domain.
  Vec2 forward(const LatticeCoord& lc) const;
  /// No domain check.
  Vec2 forward_unchecked(const LatticeCoord& lc) const;
  /// Pre-lens (undistorted) forward map.
  Vec2 forward_undistorted(const LatticeCoord& lc) const;

  /// Damped Newton inversion; throws NonConvergence after 50 iterations.
  LatticeCoord inverse(const Vec2& xy, double tolerance_px = 1e-4) const;

  /// 2x2 Jacobian of the forward map (scan px per lattice unit).
  Mat2 jacobian(const LatticeCoord& lc) const;

  const std::vector<Homography>& nodes() const noexcept { return nodes_; }
  const std::vector<std::uint8_t>& solved_flags() const noexcept { return solved_; }

 private:
  std::size_t idx(int k, int l) const { return static_cast<std::size_t>(l) * nx_ + k; }
  int nx_ = 0;
  int ny_ = 0;
  Vec2 dmin_ = Vec2::Zero();
  Vec2 dmax_ = Vec2::Zero();
  LensModel lens_;
  std::vector<Homography> nodes_;
  std::vector<Homography> inverses_;
  std::vector<std::uint8_t> solved_;
};

/// Lattice-coordinate / scan-pixel pairs for every valid measured site.
std::vector<PointPair> pairs_from_grid(const PatchGrid& pg, const ScreenSpec& spec,
                                       bool include_predicted = false);

/// Per-node weighted RANSAC over nearby detected patches.
MeshTransform build_mesh(const PatchGrid& pg, const ScreenSpec& spec, const LensModel& lens,
                         const MeshParams& params = {});

struct MeshFitParams {
  RansacParams global_ransac;
  bool fit_lens = true;
  LensFitParams lens;
  MeshParams mesh;
};

struct MeshFitReport {
  Homography global;
  std::size_t global_inliers = 0;
  std::size_t pairs = 0;
  LensModel lens;
  double rms_residual_px = 0;
  double max_residual_px = 0;
  std::size_t solved_nodes = 0;
};

/// Global RANSAC homography, optional lens fit, then the local mesh.
MeshTransform fit_screen_mesh(const PatchGrid& pg, const ScreenSpec& spec,
                              const MeshFitParams& params, MeshFitReport* report = nullptr);

}  // namespace screenreg
