#pragma once

#include "screenreg/analysis.hpp"
#include "screenreg/core.hpp"
#include "screenreg/mesh.hpp"
#include "screenreg/mosaic.hpp"
#include "screenreg/profiling.hpp"
#include "screenreg/stitch.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace screenreg {

inline constexpr int kReportSchema = 1;

struct TileInput {
  std::string name;
  std::filesystem::path path;
  int row = -1;  // grid position; -1 when unknown
  int col = -1;
};

struct StitchParams {
  MatchParams match;
  DemosaicMode match_mode = DemosaicMode::SiteGrid;
  double snap_tolerance = 0.25;  // lattice units; tile offsets are whole cells
  double px_per_lattice = 0;     // master resolution; 0: nominal pitch
  RenderTileParams render;
  bool estimate_gains = true;
  bool render_master = true;
  int max_failed_pairs = 0;      // grid-neighbor pairs allowed to fail
};

struct JobConfig {
  std::vector<TileInput> tiles;
  ScreenSpec spec = presets::dufay();
  Transfer transfer;
  AnalysisParams analysis;
  MeshFitParams mesh;
  CollectParams collect;
  DemosaicParams demosaic;
  RenderParams render;
  StitchParams stitch;
  std::filesystem::path output_dir = "out";
  std::filesystem::path truth_dir;  // verify only
  bool resume = false;
  std::uint64_t seed = 1;
  int workers = 1;

  /// Hash of everything that affects analysis results.
  std::uint64_t analysis_hash() const;
};

/// Relative tile paths resolve against `base_dir`. Throws InvalidArgument.
JobConfig parse_job_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
JobConfig load_job_config(const std::filesystem::path& path);
std::string job_config_to_json(const JobConfig& cfg);

/// Derives the RANSAC seeds from the job seed.
void apply_seed(JobConfig& cfg, std::uint64_t seed);

/// Analysis output of one tile, in memory.
struct TileResult {
  TileAnalysis analysis;
  MeshTransform mesh;
  MeshFitReport mesh_report;
  MosaicImage mosaic;
};

/// Profiling, analysis, mesh and collection for one linear scan.
TileResult process_tile(const LinearImage& linear, const JobConfig& cfg);

struct StitchTile {
  std::string name;
  int row = -1;
  int col = -1;
  const LinearImage* scan = nullptr;  // linear, black point removed; may be null without a master
  const MosaicImage* mosaic = nullptr;
  const MeshTransform* mesh = nullptr;
  int width = 0;   // scan size
  int height = 0;
};

struct PairReport {
  int a = 0;
  int b = 0;
  bool neighbor = false;  // adjacent in the declared grid
  bool ok = false;
  std::string error;
  Vec2 measured = Vec2::Zero();  // lattice offset of b relative to a before snapping
  double score = 0;
  std::size_t points = 0;
};

struct StitchOutcome {
  std::vector<PairReport> pairs;
  LayoutResult layout;          // placements in shared lattice units
  GainResult gains;
  ControlPointSet control_points;
  CanvasSpec canvas;
  BlendResult master;           // empty unless rendered
  std::vector<RenderedTile> rendered;
  std::size_t failed_neighbor_pairs = 0;
  bool connected = false;
};

/// Match, layout, control points and (optionally) gains, rendering and blend.
StitchOutcome stitch_tiles(const std::vector<StitchTile>& tiles, const ScreenSpec& spec,
                           const StitchParams& params, int workers);

/// Command entry points; return the process exit code (0, 1 or 2).
int cmd_analyze(const JobConfig& cfg);
int cmd_stitch(const JobConfig& cfg);
int cmd_render(const JobConfig& cfg);
/// Writes tiles, truth sidecars and a job config under `out_dir`.
int cmd_synth(const std::filesystem::path& scene_path, const std::filesystem::path& out_dir,
              std::uint64_t seed, int workers);
int cmd_verify(const JobConfig& cfg);

/// Per-tile output directory.
std::filesystem::path tile_dir(const JobConfig& cfg, const TileInput& t);

}  // namespace screenreg
