#pragma once

#include "screenreg/core.hpp"
#include "screenreg/mesh.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace screenreg {

struct MatchParams {
  double min_score = 0.6;        // NCC of the overlap at the final offset
  double min_overlap = 0.10;     // of the smaller image
  double min_contrast = 1e-3;    // overlap standard deviation, relative to its mean
  int patch_size = 24;
  int patch_grid = 5;            // patch_grid x patch_grid candidate patches
  double min_patch_score = 0.8;
  int min_points = 8;
};

struct MatchPoint {
  Vec2 a = Vec2::Zero();  // pixel in image a
  Vec2 b = Vec2::Zero();  // corresponding pixel in image b
  double score = 0;
};

/// Offset convention: b's origin in a's pixel coordinates, b(x) = a(x + offset).
struct MatchResult {
  Vec2 offset = Vec2::Zero();
  double score = 0;
  std::vector<MatchPoint> points;
};

/// Phase correlation for the coarse offset, then NCC refinement with a
/// quadratic peak fit. `hint` restricts the search to +-search_radius
/// pixels around an expected offset. Optional per-pixel masks (nonzero =
/// usable) exclude unfilled areas. Throws MatchFailure on low texture, low
/// score or too few point pairs.
MatchResult match_pair(const LinearImage& a, const LinearImage& b,
                       const std::optional<Vec2>& hint = std::nullopt, double search_radius = 0,
                       const MatchParams& params = {},
                       const std::vector<std::uint8_t>* valid_a = nullptr,
                       const std::vector<std::uint8_t>* valid_b = nullptr);

struct ControlPoint {
  int tile_a = 0;
  int tile_b = 0;
  Vec2 lattice_a = Vec2::Zero();
  Vec2 lattice_b = Vec2::Zero();
  Vec2 scan_a = Vec2::Zero();
  Vec2 scan_b = Vec2::Zero();

  friend bool operator==(const ControlPoint&, const ControlPoint&) = default;
};

using ControlPointSet = std::vector<ControlPoint>;

struct LatticePair {
  Vec2 a = Vec2::Zero();
  Vec2 b = Vec2::Zero();
};

/// Maps lattice pairs to scan pixels through each tile's mesh. Throws
/// OutOfDomain if a point lies outside either mesh.
ControlPointSet map_points_to_scan(const std::vector<LatticePair>& points, int tile_a, int tile_b,
                                   const MeshTransform& mesh_a, const MeshTransform& mesh_b);

struct LayoutEdge {
  int a = 0;
  int b = 0;
  Vec2 offset = Vec2::Zero();  // position of b minus position of a
  double weight = 1.0;
};

struct LayoutResult {
  std::vector<Vec2> offsets;
  std::vector<double> edge_residuals;  // |offset_b - offset_a - measured| per input edge
  std::vector<int> component;          // per tile
  int components = 0;
  std::vector<std::string> warnings;
};

/// Weighted least squares over the offset graph. Each connected component
/// is pinned at its lowest-index tile. With snap_tolerance > 0, offsets
/// within that distance of integers are rounded.
LayoutResult solve_layout(int tiles, const std::vector<LayoutEdge>& edges, double snap_tolerance = 0);

/// Image placed on a shared pixel canvas.
struct PlacedImage {
  const LinearImage* image = nullptr;
  Vec2 offset = Vec2::Zero();                       // canvas position of pixel (0,0)
  const std::vector<std::uint8_t>* valid = nullptr;  // optional per-pixel mask
};

struct GainResult {
  std::vector<Vec3> gains;
  std::vector<std::string> warnings;
};

/// Per-channel multiplicative gains in the log domain; tile 0 is the
/// reference with gain 1. Gains multiply a tile to match its neighbors.
GainResult estimate_gains(const std::vector<PlacedImage>& tiles);

/// Canvas: pixel (x, y) shows global lattice position origin + (x, y) / px_per_lattice.
struct CanvasSpec {
  Vec2 origin = Vec2::Zero();
  double px_per_lattice = 10.0;
  int width = 0;
  int height = 0;
};

struct RenderTileParams {
  double feather_px = 32.0;
  int workers = 1;
};

struct RenderedTile {
  LinearImage image;  // canvas sub-rectangle
  LinearImage alpha;  // single channel in [0,1]
  int x0 = 0;         // canvas position of the sub-rectangle
  int y0 = 0;
};

/// Separable cubic (Keys, a = -0.5) resampling of the scan through the
/// mesh. `placement` is the tile's lattice offset in the shared canvas.
RenderedTile render_tile(const LinearImage& img, const MeshTransform& mesh, const Vec2& placement,
                         const Vec3& gain, const CanvasSpec& canvas, const RenderTileParams& params = {});

struct BlendResult {
  LinearImage image;
  LinearImage coverage;  // summed alpha; zero where no tile contributes
};

/// Alpha-weighted average. Pixels covered by one tile pass through
/// unchanged; the result does not depend on tile order.
BlendResult blend(const std::vector<RenderedTile>& tiles, int width, int height);

/// Cubic sample with edge clamping.
float sample_cubic(const LinearImage& img, double x, double y, int c);

}  // namespace screenreg
