#pragma once

#include "screenreg/analysis.hpp"
#include "screenreg/core.hpp"
#include "screenreg/homography.hpp"
#include "screenreg/mesh.hpp"
#include "screenreg/mosaic.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace screenreg {

/// Displacement amplitude * sin(2 pi (direction . p) / period + phase), p in pixels.
struct SinusoidalWarp {
  Vec2 amplitude = Vec2(3, 0);
  Vec2 direction = Vec2(1, 0);  // unit wave vector
  double period = 500;
  double phase = 0;
};

/// Exact lattice -> pixel map: lens(H(W(origin + u a1 + v a2))).
struct TruthMap {
  Vec2 origin = Vec2::Zero();
  Vec2 a1 = Vec2(10, 0);
  Vec2 a2 = Vec2(0, 10);
  std::vector<SinusoidalWarp> warps;
  Homography post;  // applied after the warp
  LensModel lens;

  Vec2 warp(const Vec2& p) const;
  Vec2 forward(const Vec2& lattice) const;
  /// Throws NonConvergence if the warp cannot be inverted.
  Vec2 inverse(const Vec2& xy) const;
  /// Throws InvalidArgument when the warp is not injective.
  void validate() const;
};

enum class PatternKind { Uniform, Random, Smooth };

/// Per-site intensity as a function of lattice position and color.
struct IntensityPattern {
  PatternKind kind = PatternKind::Uniform;
  double value = 0.8;      // Uniform
  double low = 0.1;        // Random / Smooth range
  double high = 0.9;
  std::uint64_t seed = 1;

  Vec3 rgb(const Vec2& lattice) const;
  double at(const Vec2& lattice, PatchColor c, CellIndex cell) const;
};

enum class MaskKind { Gray, Dark };

/// Region in image pixels (of the rendered tile, or of the canvas for tile sets).
struct MaskRegion {
  MaskKind kind = MaskKind::Gray;
  bool circle = false;
  Vec2 center = Vec2::Zero();
  double radius = 0;
  double x = 0, y = 0, width = 0, height = 0;
  double gray = 0.3;    // Gray: rendered level
  double factor = 0.05; // Dark: intensity multiplier

  bool contains(const Vec2& p) const;
};

struct SynthScene {
  ScreenSpec spec = presets::dufay();
  int width = 2000;
  int height = 3000;
  double angle_deg = 0;          // direction of e1 in the image
  Vec2 origin = Vec2::Zero();    // pixel position of lattice (0,0) before warp; default image center
  bool origin_set = false;
  std::vector<SinusoidalWarp> warps;
  Homography post;
  double k1 = 0;
  double k2 = 0;
  IntensityPattern pattern;
  double noise_sigma = 0;
  bool shot_noise = false;
  std::uint64_t noise_seed = 7;
  std::vector<MaskRegion> masks;
  Mat3 mixing = Mat3::Identity();  // columns L1-normalized on use
  Vec3 black = Vec3::Zero();
  double blur_sigma = 0;
  int supersample = 4;
  double fill = 1.0;  // colored fraction of each site's extent; the remainder renders black

  /// Map from lattice to pixels for a scene rendered as a single image.
  TruthMap truth_map() const;
};

struct SynthResult {
  LinearImage image;
  PatchGrid truth;
  MosaicImage truth_mosaic;
  TruthMap map;
};

/// Renders `scene` through `map` into a width x height image. `mask_map`
/// places mask regions (identity for single scans; canvas for tile sets).
SynthResult synth_render(const SynthScene& scene, const TruthMap& map, int width, int height,
                         const TruthMap* mask_map = nullptr, double gain = 1.0,
                         std::uint64_t noise_salt = 0);

SynthResult synth_scan(const SynthScene& scene);

/// Per-tile capture perturbation.
struct CapturePerturbation {
  double rotation_deg = 0;
  double scale = 1.0;
  Vec2 shift = Vec2::Zero();
  double gain = 1.0;
};

struct TileSetSpec {
  int cols = 2;
  int rows = 2;
  int tile_width = 1000;
  int tile_height = 1000;
  double overlap = 0.3;
  std::vector<CapturePerturbation> perturbations;  // row-major, may be empty
};

struct SynthTile {
  int row = 0;
  int col = 0;
  Vec2 canvas_origin = Vec2::Zero();  // nominal tile origin in canvas pixels
  SynthResult data;
};

/// Renders overlapping tiles of one scene. The scene's width and height
/// are ignored; the canvas is sized from the tile layout.
std::vector<SynthTile> synth_tile_set(const SynthScene& scene, const TileSetSpec& tiles);

struct TilePairResult {
  SynthTile a;
  SynthTile b;
  Vec2 truth_offset_px = Vec2::Zero();  // canvas-pixel offset of b's origin relative to a
};

TilePairResult synth_tile_pair(const SynthScene& scene, int tile_width, int tile_height,
                               double overlap_fraction, const CapturePerturbation& pa,
                               const CapturePerturbation& pb);

struct GridComparison {
  bool aligned = false;
  CellIndex shift;  // truth index = detected index + shift
  double coverage = 0;       // truth-valid sites detected valid
  double rms_error_px = 0;
  double max_error_px = 0;
  std::size_t compared = 0;
  std::size_t index_mismatches = 0;
  std::size_t false_positives = 0;  // detected valid where truth is invalid or absent
};

GridComparison compare_grids(const PatchGrid& detected, const PatchGrid& truth);

/// Scene description file (JSON). Tile layout is optional.
struct SceneFile {
  SynthScene scene;
  bool has_tiles = false;
  TileSetSpec tiles;
};
SceneFile load_scene(const std::filesystem::path& path);
SceneFile parse_scene(const std::string& json_text);
std::string scene_to_json(const SceneFile& s);

/// TruthMap as JSON for verification sidecars.
std::string truth_map_to_json(const TruthMap& m);
TruthMap truth_map_from_json(const std::string& text);

}  // namespace screenreg
