#include "screenreg/pipeline.hpp"

#include "screenreg/image_io.hpp"
#include "screenreg/parallel.hpp"
#include "screenreg/pto.hpp"
#include "screenreg/sidecar.hpp"
#include "screenreg/synth.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <mutex>
#include <set>

namespace screenreg {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::string transfer_to_string(const Transfer& t) {
  switch (t.kind) {
    case Transfer::Kind::Linear: return "linear";
    case Transfer::Kind::Srgb: return "srgb";
    case Transfer::Kind::Gamma: {
      json j = t.gamma;
      return "gamma:" + j.dump();
    }
    case Transfer::Kind::Lut: return "lut";
  }
  return "linear";
}

json vec_json(const Vec2& v) { return json::array({v.x(), v.y()}); }
json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

json ransac_json(const RansacParams& r) {
  return {{"iterations", r.iterations}, {"threshold_px", r.inlier_threshold_px},
          {"min_inliers", r.min_inliers}, {"confidence", r.confidence}};
}

void read_ransac(const json& j, RansacParams& r) {
  r.iterations = j.value("iterations", r.iterations);
  r.inlier_threshold_px = j.value("threshold_px", r.inlier_threshold_px);
  r.min_inliers = j.value("min_inliers", r.min_inliers);
  r.confidence = j.value("confidence", r.confidence);
}

json analysis_json(const JobConfig& c) {
  const AnalysisParams& a = c.analysis;
  const MeshFitParams& m = c.mesh;
  return {
      {"screen", json::parse(screen_spec_to_json(c.spec))},
      {"transfer", transfer_to_string(c.transfer)},
      {"analysis",
       {{"threshold", a.threshold},
        {"unsharp_radius", a.unsharp_radius},
        {"unsharp_amount", a.unsharp_amount},
        {"profile_region", a.profile_region},
        {"max_attempts", a.max_attempts},
        {"min_area_coverage", a.min_area_coverage}}},
      {"mesh",
       {{"nx", m.mesh.nx},
        {"ny", m.mesh.ny},
        {"min_support", m.mesh.min_support},
        {"support_sigmas", m.mesh.support_sigmas},
        {"min_spacing_cells", m.mesh.min_spacing_cells},
        {"fit_lens", m.fit_lens},
        {"ransac", ransac_json(m.mesh.ransac)},
        {"global_ransac", ransac_json(m.global_ransac)}}},
      {"collect", {{"kernel_factor", c.collect.kernel_factor}}},
      {"seed", c.seed},
  };
}

void require(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorKind::InvalidArgument, what);
}

void write_json(const fs::path& p, const json& j) { write_text_atomic(p, j.dump(2) + "\n"); }

json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, p.string() + ": " + e.what());
  }
}

LinearImage load_linear(const fs::path& p, const Transfer& t) {
  return linearize(read_image(p).samples, t);
}

/// Scan with the profile black point removed, for rendering.
LinearImage black_removed(const LinearImage& img, const Vec3& d) {
  LinearImage out = img;
  auto& v = out.data();
  const int ch = out.channels();
  for (std::size_t k = 0; k < v.size(); ++k)
    v[k] = std::max(0.0f, v[k] - static_cast<float>(d[static_cast<int>(k % ch) % 3]));
  return out;
}

std::string error_text(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e))
    return std::string(to_string(err->kind())) + ": " + err->what();
  return e.what();
}

float max_sample(const LinearImage& img) {
  float m = 0;
  for (float v : img.data()) m = std::max(m, v);
  return m;
}

}  // namespace

std::uint64_t JobConfig::analysis_hash() const {
  const std::string s = analysis_json(*this).dump();
  return fnv1a64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

void apply_seed(JobConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.mesh.global_ransac.seed = mix_seed(seed, 1);
  cfg.mesh.mesh.ransac.seed = mix_seed(seed, 2);
}

JobConfig parse_job_config(const std::string& text, const fs::path& base_dir) {
  JobConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, std::string("job config: ") + e.what());
  }
  try {
    if (j.contains("screen")) {
      const auto& s = j["screen"];
      c.spec = s.is_string() ? presets::by_name(s.get<std::string>()) : parse_screen_spec(s.dump());
    }
    if (j.contains("pitch_px")) c.spec = c.spec.with_pitch(j["pitch_px"].get<double>());
    if (j.contains("transfer")) c.transfer = Transfer::parse(j["transfer"].get<std::string>());

    for (const auto& t : j.value("tiles", json::array())) {
      TileInput ti;
      ti.path = t.at("path").get<std::string>();
      if (ti.path.is_relative() && !base_dir.empty()) ti.path = base_dir / ti.path;
      ti.name = t.value("name", ti.path.stem().string());
      ti.row = t.value("row", -1);
      ti.col = t.value("col", -1);
      c.tiles.push_back(std::move(ti));
    }

    if (j.contains("analysis")) {
      const auto& a = j["analysis"];
      c.analysis.threshold = a.value("threshold", c.analysis.threshold);
      c.analysis.unsharp_radius = a.value("unsharp_radius", c.analysis.unsharp_radius);
      c.analysis.unsharp_amount = a.value("unsharp_amount", c.analysis.unsharp_amount);
      c.analysis.profile_region = a.value("profile_region", c.analysis.profile_region);
      c.analysis.max_attempts = a.value("max_attempts", c.analysis.max_attempts);
      c.analysis.min_area_coverage = a.value("min_area_coverage", c.analysis.min_area_coverage);
    }
    if (j.contains("mesh")) {
      const auto& m = j["mesh"];
      c.mesh.mesh.nx = m.value("nx", c.mesh.mesh.nx);
      c.mesh.mesh.ny = m.value("ny", c.mesh.mesh.ny);
      c.mesh.mesh.min_support = m.value("min_support", c.mesh.mesh.min_support);
      c.mesh.mesh.support_sigmas = m.value("support_sigmas", c.mesh.mesh.support_sigmas);
      c.mesh.mesh.min_spacing_cells = m.value("min_spacing_cells", c.mesh.mesh.min_spacing_cells);
      c.mesh.fit_lens = m.value("fit_lens", c.mesh.fit_lens);
      if (m.contains("ransac")) read_ransac(m["ransac"], c.mesh.mesh.ransac);
      if (m.contains("global_ransac")) read_ransac(m["global_ransac"], c.mesh.global_ransac);
    }
    if (j.contains("collect")) c.collect.kernel_factor = j["collect"].value("kernel_factor", c.collect.kernel_factor);
    if (j.contains("demosaic")) {
      const auto& d = j["demosaic"];
      const std::string mode = d.value("mode", std::string("site-grid"));
      require(mode == "site-grid" || mode == "cell", "demosaic mode must be site-grid or cell");
      c.demosaic.mode = mode == "cell" ? DemosaicMode::Cell : DemosaicMode::SiteGrid;
      c.demosaic.fill_radius_cells = d.value("fill_radius_cells", c.demosaic.fill_radius_cells);
    }
    if (j.contains("render")) c.render = RenderParams::from_json(j["render"].dump());
    if (j.contains("stitch")) {
      const auto& s = j["stitch"];
      StitchParams& p = c.stitch;
      p.match.min_score = s.value("min_score", p.match.min_score);
      p.match.min_overlap = s.value("min_overlap", p.match.min_overlap);
      p.match.min_points = s.value("min_points", p.match.min_points);
      p.snap_tolerance = s.value("snap_tolerance", p.snap_tolerance);
      p.px_per_lattice = s.value("px_per_lattice", p.px_per_lattice);
      p.render.feather_px = s.value("feather_px", p.render.feather_px);
      p.estimate_gains = s.value("estimate_gains", p.estimate_gains);
      p.render_master = s.value("render_master", p.render_master);
      p.max_failed_pairs = s.value("max_failed_pairs", p.max_failed_pairs);
    }
    if (j.contains("output_dir")) {
      c.output_dir = j["output_dir"].get<std::string>();
      if (c.output_dir.is_relative() && !base_dir.empty()) c.output_dir = base_dir / c.output_dir;
    }
    if (j.contains("truth_dir")) {
      c.truth_dir = j["truth_dir"].get<std::string>();
      if (c.truth_dir.is_relative() && !base_dir.empty()) c.truth_dir = base_dir / c.truth_dir;
    }
    c.resume = j.value("resume", c.resume);
    c.workers = j.value("workers", c.workers);
    apply_seed(c, j.value("seed", c.seed));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, std::string("job config: ") + e.what());
  }

  require(c.analysis.threshold > 0, "analysis threshold must be positive");
  require(c.analysis.max_attempts >= 1, "max_attempts must be at least 1");
  require(c.mesh.mesh.nx >= 2 && c.mesh.mesh.ny >= 2, "mesh needs at least 2x2 nodes");
  require(c.mesh.mesh.ransac.inlier_threshold_px > 0 && c.mesh.global_ransac.inlier_threshold_px > 0,
          "RANSAC threshold must be positive");
  require(c.collect.kernel_factor >= 0 && c.collect.kernel_factor <= 1, "kernel_factor must be in [0,1]");
  require(c.stitch.snap_tolerance >= 0 && c.stitch.snap_tolerance < 0.5, "snap_tolerance must be in [0,0.5)");
  require(c.stitch.px_per_lattice >= 0, "px_per_lattice must not be negative");
  require(c.workers >= 1, "workers must be at least 1");
  std::set<std::string> names;
  for (const auto& t : c.tiles) require(names.insert(t.name).second, "duplicate tile name " + t.name);
  return c;
}

JobConfig load_job_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const Error& e) {
    throw Error(ErrorKind::InvalidArgument, e.what());
  }
  return parse_job_config(text, path.parent_path());
}

std::string job_config_to_json(const JobConfig& c) {
  json j = analysis_json(c);
  json tiles = json::array();
  for (const auto& t : c.tiles) {
    json tj = {{"name", t.name}, {"path", t.path.string()}};
    if (t.row >= 0) tj["row"] = t.row;
    if (t.col >= 0) tj["col"] = t.col;
    tiles.push_back(tj);
  }
  j["tiles"] = tiles;
  j["demosaic"] = {{"mode", c.demosaic.mode == DemosaicMode::Cell ? "cell" : "site-grid"},
                   {"fill_radius_cells", c.demosaic.fill_radius_cells}};
  j["render"] = json::parse(c.render.to_json());
  const StitchParams& s = c.stitch;
  j["stitch"] = {{"min_score", s.match.min_score},       {"min_overlap", s.match.min_overlap},
                 {"min_points", s.match.min_points},     {"snap_tolerance", s.snap_tolerance},
                 {"px_per_lattice", s.px_per_lattice},   {"feather_px", s.render.feather_px},
                 {"estimate_gains", s.estimate_gains},   {"render_master", s.render_master},
                 {"max_failed_pairs", s.max_failed_pairs}};
  j["output_dir"] = c.output_dir.string();
  if (!c.truth_dir.empty()) j["truth_dir"] = c.truth_dir.string();
  j["resume"] = c.resume;
  j["workers"] = c.workers;
  return j.dump(2);
}

fs::path tile_dir(const JobConfig& cfg, const TileInput& t) { return cfg.output_dir / "tiles" / t.name; }

TileResult process_tile(const LinearImage& linear, const JobConfig& cfg) {
  TileResult r;
  r.analysis = analyze_tile(linear, cfg.spec, cfg.analysis);
  r.mesh = fit_screen_mesh(r.analysis.grid, cfg.spec, cfg.mesh, &r.mesh_report);
  r.mosaic = collect_profiled(r.analysis.primaries, r.mesh, r.analysis.grid, cfg.spec, cfg.collect);
  return r;
}

StitchOutcome stitch_tiles(const std::vector<StitchTile>& tiles, const ScreenSpec& spec,
                           const StitchParams& params, int workers) {
  const int n = static_cast<int>(tiles.size());
  StitchOutcome out;
  if (n == 0) return out;
  for (const auto& t : tiles)
    if (!t.mosaic || !t.mesh) throw Error(ErrorKind::InvalidArgument, "stitch tile without mosaic or mesh");

  // Matching runs on demosaiced mosaics, which live in lattice space.
  const double ms = demosaic_scale(params.match_mode);
  std::vector<LinearImage> dem(tiles.size());
  std::vector<std::vector<std::uint8_t>> dem_mask(tiles.size());
  std::vector<Vec2> dem_origin(tiles.size());
  parallel_for(tiles.size(), workers, [&](std::size_t k) {
    DemosaicParams dp;
    dp.mode = params.match_mode;
    DemosaicResult d = demosaic(*tiles[k].mosaic, spec, dp);
    dem[k] = std::move(d.rgb);
    dem_mask[k] = std::move(d.direct);
    dem_origin[k] = demosaic_origin(tiles[k].mosaic->bounds(), params.match_mode);
  });

  const bool grid = std::all_of(tiles.begin(), tiles.end(), [](const StitchTile& t) { return t.row >= 0 && t.col >= 0; });
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b) {
      const auto& ta = tiles[static_cast<std::size_t>(a)];
      const auto& tb = tiles[static_cast<std::size_t>(b)];
      const bool adj = grid && std::abs(ta.row - tb.row) + std::abs(ta.col - tb.col) == 1;
      if (grid && !adj) continue;
      PairReport pr;
      pr.a = a;
      pr.b = b;
      pr.neighbor = adj;
      out.pairs.push_back(pr);
    }

  std::vector<MatchResult> matches(out.pairs.size());
  parallel_for(out.pairs.size(), workers, [&](std::size_t k) {
    PairReport& pr = out.pairs[k];
    const auto ia = static_cast<std::size_t>(pr.a), ib = static_cast<std::size_t>(pr.b);
    try {
      matches[k] = match_pair(dem[ia], dem[ib], std::nullopt, 0, params.match, &dem_mask[ia], &dem_mask[ib]);
      // Pixel x of b shows the same point as pixel x + offset of a.
      pr.measured = dem_origin[ia] - dem_origin[ib] + matches[k].offset / ms;
      pr.score = matches[k].score;
      pr.points = matches[k].points.size();
      pr.ok = true;
    } catch (const std::exception& e) {
      pr.error = error_text(e);
    }
  });

  std::vector<LayoutEdge> edges;
  for (const auto& pr : out.pairs) {
    if (pr.ok) edges.push_back({pr.a, pr.b, pr.measured, std::max(pr.score, 1e-3)});
    else if (pr.neighbor) ++out.failed_neighbor_pairs;
  }
  out.layout = solve_layout(n, edges, params.snap_tolerance);
  out.connected = out.layout.components == 1;
  const auto& P = out.layout.offsets;

  // Control points: lattice positions in a, and the same physical point in b
  // through the solved placement.
  for (std::size_t k = 0; k < out.pairs.size(); ++k) {
    const PairReport& pr = out.pairs[k];
    if (!pr.ok) continue;
    const auto ia = static_cast<std::size_t>(pr.a), ib = static_cast<std::size_t>(pr.b);
    const Vec2 delta = P[ib] - P[ia];
    std::vector<LatticePair> lp;
    for (const auto& mp : matches[k].points) {
      const Vec2 la = dem_origin[ia] + mp.a / ms;
      const Vec2 lb = la - delta;
      bool ok = true;
      for (int side = 0; side < 2 && ok; ++side) {
        const StitchTile& t = side == 0 ? tiles[ia] : tiles[ib];
        const Vec2 l = side == 0 ? la : lb;
        if (!t.mesh->in_domain(LatticeCoord::from(l))) {
          ok = false;
          break;
        }
        const Vec2 xy = t.mesh->forward_unchecked(LatticeCoord::from(l));
        ok = xy.x() >= 0 && xy.y() >= 0 && xy.x() <= t.width - 1 && xy.y() <= t.height - 1;
      }
      if (ok) lp.push_back({la, lb});
    }
    ControlPointSet cps = map_points_to_scan(lp, pr.a, pr.b, *tiles[ia].mesh, *tiles[ib].mesh);
    out.control_points.insert(out.control_points.end(), cps.begin(), cps.end());
  }
  sort_control_points(out.control_points);

  if (!params.render_master) return out;
  for (const auto& t : tiles)
    if (!t.scan) throw Error(ErrorKind::InvalidArgument, "master rendering needs the tile scans");

  double s = params.px_per_lattice;
  if (!(s > 0)) {
    double acc = 0;
    for (const auto& t : tiles) {
      const Vec2 mid = 0.5 * (t.mesh->domain_min() + t.mesh->domain_max());
      acc += std::sqrt(std::abs(t.mesh->jacobian(LatticeCoord::from(mid)).determinant()));
    }
    s = acc / n;
  }
  Vec2 lo = Vec2::Constant(std::numeric_limits<double>::infinity());
  Vec2 hi = -lo;
  for (int k = 0; k < n; ++k) {
    const auto& t = tiles[static_cast<std::size_t>(k)];
    lo = lo.cwiseMin(t.mesh->domain_min() + P[static_cast<std::size_t>(k)]);
    hi = hi.cwiseMax(t.mesh->domain_max() + P[static_cast<std::size_t>(k)]);
  }
  out.canvas.px_per_lattice = s;
  out.canvas.origin = lo;
  out.canvas.width = static_cast<int>(std::ceil((hi.x() - lo.x()) * s)) + 1;
  out.canvas.height = static_cast<int>(std::ceil((hi.y() - lo.y()) * s)) + 1;

  out.rendered.resize(tiles.size());
  RenderTileParams rp = params.render;
  rp.workers = n > 1 ? 1 : workers;
  parallel_for(tiles.size(), n > 1 ? workers : 1, [&](std::size_t k) {
    out.rendered[k] = render_tile(*tiles[k].scan, *tiles[k].mesh, P[k], Vec3::Ones(), out.canvas, rp);
  });

  out.gains.gains.assign(tiles.size(), Vec3::Ones());
  if (params.estimate_gains && n > 1) {
    std::vector<std::vector<std::uint8_t>> masks(tiles.size());
    std::vector<PlacedImage> placed;
    for (std::size_t k = 0; k < tiles.size(); ++k) {
      const auto& a = out.rendered[k].alpha.data();
      masks[k].resize(a.size());
      for (std::size_t q = 0; q < a.size(); ++q) masks[k][q] = a[q] >= 1.0f ? 1 : 0;
      placed.push_back({&out.rendered[k].image, Vec2(out.rendered[k].x0, out.rendered[k].y0), &masks[k]});
    }
    out.gains = estimate_gains(placed);
    for (std::size_t k = 0; k < tiles.size(); ++k) {
      auto& v = out.rendered[k].image.data();
      const int ch = out.rendered[k].image.channels();
      for (std::size_t q = 0; q < v.size(); ++q)
        v[q] = static_cast<float>(v[q] * out.gains.gains[k][static_cast<int>(q % ch) % 3]);
    }
  }
  out.master = blend(out.rendered, out.canvas.width, out.canvas.height);
  return out;
}

// ---------------------------------------------------------------------------
// analyze

namespace {

struct TileRun {
  std::string status = "failed";  // ok, skipped, failed
  std::string reason;
  json summary;
};

bool resumable(const JobConfig& cfg, const TileInput& t, std::uint64_t input_hash) {
  const fs::path dir = tile_dir(cfg, t);
  const fs::path st = dir / "status.json";
  if (!fs::exists(st)) return false;
  try {
    const json s = read_json(st);
    if (s.value("status", "") != "ok") return false;
    if (s.value("input_fnv1a", "") != hex64(input_hash)) return false;
    if (s.value("config_fnv1a", "") != hex64(cfg.analysis_hash())) return false;
  } catch (const Error&) {
    return false;
  }
  return sidecar_intact(dir / "grid.bin", SidecarKind::Grid) && sidecar_intact(dir / "mesh.bin", SidecarKind::Mesh) &&
         sidecar_intact(dir / "mosaic.bin", SidecarKind::Mosaic) && fs::exists(dir / "profile.json");
}

json attempts_json(const std::vector<AttemptReport>& attempts) {
  json a = json::array();
  for (const auto& r : attempts)
    a.push_back({{"start", vec_json(r.start)}, {"outcome", r.outcome}, {"detail", r.detail}, {"coverage", r.coverage}});
  return a;
}

TileRun analyze_one(const JobConfig& cfg, const TileInput& t) {
  TileRun run;
  const fs::path dir = tile_dir(cfg, t);
  std::uint64_t input_hash = 0;
  try {
    const auto bytes = read_file(t.path);
    input_hash = fnv1a64(bytes);
  } catch (const std::exception& e) {
    run.reason = error_text(e);
    return run;
  }
  if (cfg.resume && resumable(cfg, t, input_hash)) {
    run.status = "skipped";
    try {
      run.summary = read_json(dir / "status.json").value("summary", json::object());
    } catch (const Error&) {
    }
    return run;
  }
  fs::create_directories(dir);
  // A stale status must not survive a failed rerun.
  std::error_code ec;
  fs::remove(dir / "status.json", ec);
  json status = {{"schema", kReportSchema}, {"tile", t.name}, {"input", t.path.string()},
                 {"input_fnv1a", hex64(input_hash)}, {"config_fnv1a", hex64(cfg.analysis_hash())},
                 {"seed", cfg.seed}};
  try {
    const LinearImage lin = load_linear(t.path, cfg.transfer);
    TileResult r = process_tile(lin, cfg);
    write_text_atomic(dir / "profile.json", r.analysis.profile.to_json());
    write_grid(dir / "grid.bin", r.analysis.grid);
    write_text_atomic(dir / "grid.json", grid_summary_json(r.analysis.grid, r.analysis.area_coverage));
    write_mesh(dir / "mesh.bin", r.mesh);
    write_text_atomic(dir / "mesh.json", mesh_summary_json(r.mesh, r.mesh_report));
    write_mosaic(dir / "mosaic.bin", r.mosaic);
    const double scale = write_mosaic_tiff(dir / "mosaic.tif", r.mosaic);
    write_json(dir / "mosaic.json", {{"scale", scale},
                                     {"sites_per_cell", r.mosaic.sites_per_cell()},
                                     {"valid", r.mosaic.valid_count()}});
    run.summary = {{"area_coverage", r.analysis.area_coverage},
                   {"valid_sites", r.analysis.grid.valid_count()},
                   {"attempts", attempts_json(r.analysis.attempts)},
                   {"mesh_rms_px", r.mesh_report.rms_residual_px},
                   {"mesh_max_px", r.mesh_report.max_residual_px},
                   {"lens", {{"k1", r.mesh_report.lens.k1}, {"k2", r.mesh_report.lens.k2}}}};
    run.status = "ok";
  } catch (const std::exception& e) {
    run.reason = error_text(e);
  }
  status["status"] = run.status;
  if (!run.reason.empty()) status["reason"] = run.reason;
  status["summary"] = run.summary;
  try {
    write_json(dir / "status.json", status);
  } catch (const std::exception& e) {
    run.status = "failed";
    run.reason = error_text(e);
  }
  return run;
}

}  // namespace

int cmd_analyze(const JobConfig& cfg) {
  if (cfg.tiles.empty()) {
    std::cerr << "analyze: no tiles in config\n";
    return 2;
  }
  for (const auto& t : cfg.tiles)
    if (!fs::exists(t.path)) {
      std::cerr << "analyze: missing input " << t.path << "\n";
      return 2;
    }
  fs::create_directories(cfg.output_dir);
  // Tile-level parallelism; each tile then runs its own stages serially.
  JobConfig inner = cfg;
  const int tile_workers = std::min<int>(cfg.workers, static_cast<int>(cfg.tiles.size()));
  inner.mesh.mesh.workers = std::max(1, cfg.workers / std::max(1, tile_workers));
  std::vector<TileRun> runs(cfg.tiles.size());
  parallel_for(cfg.tiles.size(), tile_workers, [&](std::size_t k) { runs[k] = analyze_one(inner, cfg.tiles[k]); });

  json tiles = json::array();
  int failed = 0;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    json tj = {{"name", cfg.tiles[k].name}, {"status", runs[k].status}, {"summary", runs[k].summary}};
    if (!runs[k].reason.empty()) tj["reason"] = runs[k].reason;
    if (runs[k].status == "failed") {
      ++failed;
      std::cerr << "analyze: tile " << cfg.tiles[k].name << " failed: " << runs[k].reason << "\n";
    }
    tiles.push_back(tj);
  }
  write_json(cfg.output_dir / "analyze_report.json",
             {{"schema", kReportSchema}, {"command", "analyze"}, {"seed", cfg.seed},
              {"config_fnv1a", hex64(cfg.analysis_hash())}, {"failed", failed}, {"tiles", tiles}});
  return failed ? 1 : 0;
}

// ---------------------------------------------------------------------------
// stitch

namespace {

struct LoadedTile {
  const TileInput* input = nullptr;
  MatrixProfile profile;
  MeshTransform mesh;
  MosaicImage mosaic;
  LinearImage scan;
};

/// Loads analysis outputs; returns the missing stage on failure.
std::optional<std::string> load_tile(const JobConfig& cfg, const TileInput& t, bool with_scan, LoadedTile& out) {
  const fs::path dir = tile_dir(cfg, t);
  out.input = &t;
  try {
    if (!fs::exists(dir / "status.json") || read_json(dir / "status.json").value("status", "") != "ok")
      return "analysis (no successful analyze run)";
    if (!fs::exists(dir / "mesh.bin")) return "mesh sidecar (analyze)";
    if (!fs::exists(dir / "mosaic.bin")) return "mosaic sidecar (analyze)";
    out.profile = MatrixProfile::from_json(read_text(dir / "profile.json"));
    out.mesh = read_mesh(dir / "mesh.bin");
    out.mosaic = read_mosaic(dir / "mosaic.bin");
    if (with_scan) out.scan = black_removed(load_linear(t.path, cfg.transfer), out.profile.d);
  } catch (const std::exception& e) {
    return error_text(e);
  }
  return std::nullopt;
}

}  // namespace

int cmd_stitch(const JobConfig& cfg) {
  if (cfg.tiles.empty()) {
    std::cerr << "stitch: no tiles in config\n";
    return 2;
  }
  const fs::path sdir = cfg.output_dir / "stitch";
  fs::create_directories(sdir / "tiles");
  std::vector<LoadedTile> loaded(cfg.tiles.size());
  std::vector<std::optional<std::string>> missing(cfg.tiles.size());
  parallel_for(cfg.tiles.size(), cfg.workers, [&](std::size_t k) {
    missing[k] = load_tile(cfg, cfg.tiles[k], cfg.stitch.render_master, loaded[k]);
  });

  json report = {{"schema", kReportSchema}, {"command", "stitch"}, {"seed", cfg.seed}};
  json skipped = json::array();
  std::vector<std::size_t> used;
  for (std::size_t k = 0; k < loaded.size(); ++k) {
    if (missing[k]) {
      skipped.push_back({{"tile", cfg.tiles[k].name}, {"missing", *missing[k]}});
      std::cerr << "stitch: tile " << cfg.tiles[k].name << " unavailable: " << *missing[k] << "\n";
    } else {
      used.push_back(k);
    }
  }
  report["skipped_tiles"] = skipped;
  if (used.empty()) {
    write_json(sdir / "stitch_report.json", report);
    return 2;
  }

  std::vector<StitchTile> st;
  for (std::size_t k : used) {
    const LoadedTile& lt = loaded[k];
    int w = lt.scan.width(), h = lt.scan.height();
    if (lt.scan.empty()) {
      const auto hdr = read_image(lt.input->path).samples;
      w = hdr.width();
      h = hdr.height();
    }
    st.push_back({lt.input->name, lt.input->row, lt.input->col, cfg.stitch.render_master ? &lt.scan : nullptr,
                  &lt.mosaic, &lt.mesh, w, h});
  }
  StitchOutcome so;
  try {
    so = stitch_tiles(st, cfg.spec, cfg.stitch, cfg.workers);
  } catch (const std::exception& e) {
    report["error"] = error_text(e);
    write_json(sdir / "stitch_report.json", report);
    std::cerr << "stitch: " << error_text(e) << "\n";
    return 1;
  }

  json pairs = json::array();
  std::size_t edge = 0;
  for (const auto& pr : so.pairs) {
    json pj = {{"a", st[static_cast<std::size_t>(pr.a)].name}, {"b", st[static_cast<std::size_t>(pr.b)].name},
               {"ok", pr.ok}, {"neighbor", pr.neighbor}};
    if (pr.ok) {
      pj["measured_offset"] = vec_json(pr.measured);
      pj["score"] = pr.score;
      pj["points"] = pr.points;
      pj["residual"] = so.layout.edge_residuals[edge++];
    } else {
      pj["error"] = pr.error;
      if (pr.neighbor)
        std::cerr << "stitch: pair " << st[static_cast<std::size_t>(pr.a)].name << " / "
                  << st[static_cast<std::size_t>(pr.b)].name << " failed: " << pr.error << "\n";
    }
    pairs.push_back(pj);
  }
  report["pairs"] = pairs;
  json place = json::array();
  for (std::size_t k = 0; k < st.size(); ++k) {
    json pj = {{"tile", st[k].name}, {"offset", vec_json(so.layout.offsets[k])},
               {"component", so.layout.component[k]}};
    if (!so.gains.gains.empty()) pj["gain"] = vec_json(so.gains.gains[k]);
    place.push_back(pj);
  }
  report["placements"] = place;
  report["components"] = so.layout.components;
  json warnings = json::array();
  for (const auto& w : so.layout.warnings) warnings.push_back(w);
  for (const auto& w : so.gains.warnings) warnings.push_back(w);
  report["warnings"] = warnings;
  report["control_points"] = so.control_points.size();

  PtoProject pto;
  for (std::size_t k : used) {
    const auto& lt = loaded[k];
    pto.images.push_back({st[pto.images.size()].width, st[pto.images.size()].height, lt.input->path.string()});
  }
  pto.points = so.control_points;
  export_pto(pto, sdir / "control_points.pto");

  if (cfg.stitch.render_master && !so.master.image.empty()) {
    float scale = std::max(1.0f, max_sample(so.master.image));
    write_image(sdir / "master.tif", so.master.image, SampleDepth::U16, scale);
    for (std::size_t k = 0; k < so.rendered.size(); ++k) {
      write_image(sdir / "tiles" / (st[k].name + ".tif"), so.rendered[k].image, SampleDepth::U16, scale);
      write_image(sdir / "tiles" / (st[k].name + "_alpha.tif"), so.rendered[k].alpha, SampleDepth::U8, 1.0f);
    }
    std::size_t covered = 0;
    for (float a : so.master.coverage.data()) covered += a > 0 ? 1 : 0;
    json tiles_pos = json::array();
    for (std::size_t k = 0; k < so.rendered.size(); ++k)
      tiles_pos.push_back({{"tile", st[k].name}, {"x0", so.rendered[k].x0}, {"y0", so.rendered[k].y0}});
    report["master"] = {{"file", "master.tif"},
                        {"scale", scale},
                        {"width", so.canvas.width},
                        {"height", so.canvas.height},
                        {"origin", vec_json(so.canvas.origin)},
                        {"px_per_lattice", so.canvas.px_per_lattice},
                        {"coverage", static_cast<double>(covered) / static_cast<double>(so.master.coverage.pixel_count())},
                        {"tiles", tiles_pos}};
  }

  const bool fail_pairs = so.failed_neighbor_pairs > static_cast<std::size_t>(std::max(0, cfg.stitch.max_failed_pairs));
  if (!so.connected) std::cerr << "stitch: tile graph is disconnected (" << so.layout.components << " components)\n";
  report["status"] = (so.connected && !fail_pairs && skipped.empty()) ? "ok" : "partial";
  write_json(sdir / "stitch_report.json", report);
  return report["status"] == "ok" ? 0 : 1;
}

// ---------------------------------------------------------------------------
// render

int cmd_render(const JobConfig& cfg) {
  int rendered = 0, missing_count = 0;
  json tiles = json::array();
  for (const auto& t : cfg.tiles) {
    const fs::path dir = tile_dir(cfg, t);
    if (!fs::exists(dir / "mosaic.bin")) {
      std::cerr << "render: tile " << t.name << ": missing mosaic sidecar; run the analyze stage first\n";
      tiles.push_back({{"tile", t.name}, {"status", "missing"}, {"missing_stage", "analyze"}});
      ++missing_count;
      continue;
    }
    try {
      const MosaicImage m = read_mosaic(dir / "mosaic.bin");
      const DemosaicResult d = demosaic(m, cfg.spec, cfg.demosaic);
      const RenderResult r = color_render(d.rgb, cfg.render, &d.valid);
      write_display(dir / "render.tif", r.image);
      json params = json::parse(cfg.render.to_json());
      write_json(dir / "render.json", {{"schema", kReportSchema},
                                       {"params", params},
                                       {"gain_used", r.gain_used},
                                       {"mode", cfg.demosaic.mode == DemosaicMode::Cell ? "cell" : "site-grid"},
                                       {"filled", d.filled},
                                       {"origin", vec_json(demosaic_origin(m.bounds(), cfg.demosaic.mode))},
                                       {"scale", demosaic_scale(cfg.demosaic.mode)}});
      tiles.push_back({{"tile", t.name}, {"status", "ok"}, {"gain_used", r.gain_used}});
      ++rendered;
    } catch (const std::exception& e) {
      std::cerr << "render: tile " << t.name << ": " << error_text(e) << "\n";
      tiles.push_back({{"tile", t.name}, {"status", "failed"}, {"reason", error_text(e)}});
      ++missing_count;
    }
  }

  // The stitched master is in scan rgb; convert with the first tile's profile.
  json master = nullptr;
  const fs::path sdir = cfg.output_dir / "stitch";
  if (fs::exists(sdir / "master.tif") && fs::exists(sdir / "stitch_report.json") && !cfg.tiles.empty()) {
    try {
      const json rep = read_json(sdir / "stitch_report.json");
      const float scale = rep.at("master").at("scale").get<float>();
      LinearImage img = read_image(sdir / "master.tif").samples;
      for (float& v : img.data()) v *= scale;
      MatrixProfile p = MatrixProfile::from_json(read_text(tile_dir(cfg, cfg.tiles.front()) / "profile.json"));
      p.d = Vec3::Zero();  // black already removed before rendering tiles
      const LinearImage prim = apply_profile(img, p);
      const RenderResult r = color_render(prim, cfg.render);
      write_display(sdir / "master_render.tif", r.image);
      master = {{"file", "master_render.tif"}, {"gain_used", r.gain_used}};
      ++rendered;
    } catch (const std::exception& e) {
      std::cerr << "render: stitched master: " << error_text(e) << "\n";
      master = {{"error", error_text(e)}};
      ++missing_count;
    }
  }
  fs::create_directories(cfg.output_dir);
  write_json(cfg.output_dir / "render_report.json",
             {{"schema", kReportSchema}, {"command", "render"}, {"seed", cfg.seed},
              {"params", json::parse(cfg.render.to_json())}, {"tiles", tiles}, {"master", master}});
  if (rendered == 0) return 2;
  return missing_count ? 1 : 0;
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const fs::path& scene_path, const fs::path& out_dir, std::uint64_t seed, int workers) {
  (void)workers;
  SceneFile sf;
  try {
    sf = load_scene(scene_path);
  } catch (const Error& e) {
    std::cerr << "synth: " << e.what() << "\n";
    return 2;
  }
  sf.scene.noise_seed = seed;
  std::vector<SynthTile> tiles;
  try {
    if (sf.has_tiles) {
      tiles = synth_tile_set(sf.scene, sf.tiles);
    } else {
      SynthTile t;
      t.data = synth_scan(sf.scene);
      t.row = t.col = -1;
      tiles.push_back(std::move(t));
    }
  } catch (const Error& e) {
    std::cerr << "synth: " << e.what() << "\n";
    return 2;
  }
  fs::create_directories(out_dir / "tiles");
  fs::create_directories(out_dir / "truth");
  json job = {{"screen", json::parse(screen_spec_to_json(sf.scene.spec))},
              {"transfer", "linear"},
              {"output_dir", "out"},
              {"truth_dir", "truth"},
              {"seed", seed}};
  json tj = json::array();
  for (const auto& t : tiles) {
    const std::string name = t.row >= 0 ? "r" + std::to_string(t.row) + "c" + std::to_string(t.col) : "tile";
    const fs::path img = out_dir / "tiles" / (name + ".tif");
    write_image(img, t.data.image, SampleDepth::U16, 1.0f);
    const fs::path td = out_dir / "truth" / name;
    fs::create_directories(td);
    write_grid(td / "grid.bin", t.data.truth);
    write_mosaic(td / "mosaic.bin", t.data.truth_mosaic);
    write_text_atomic(td / "truth_map.json", truth_map_to_json(t.data.map));
    json entry = {{"name", name}, {"path", "tiles/" + name + ".tif"}};
    if (t.row >= 0) {
      entry["row"] = t.row;
      entry["col"] = t.col;
    }
    tj.push_back(entry);
  }
  job["tiles"] = tj;
  write_text_atomic(out_dir / "truth" / "screen.json", screen_spec_to_json(sf.scene.spec));
  write_text_atomic(out_dir / "scene.json", scene_to_json(sf));
  write_json(out_dir / "job.json", job);
  return 0;
}

// ---------------------------------------------------------------------------
// verify

int cmd_verify(const JobConfig& cfg) {
  if (cfg.truth_dir.empty()) {
    std::cerr << "verify: no truth directory\n";
    return 2;
  }
  try {
    if (fs::exists(cfg.truth_dir / "screen.json")) {
      const ScreenSpec truth_spec = parse_screen_spec(read_text(cfg.truth_dir / "screen.json"));
      if (screen_spec_to_json(truth_spec) != screen_spec_to_json(cfg.spec)) {
        std::cerr << "verify: screen description differs from the truth data\n";
        return 2;
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "verify: " << error_text(e) << "\n";
    return 2;
  }

  struct Thresholds {
    double min_coverage = 0.95;
    double max_mesh_rms = 0.25;
    double max_cp_mean = 0.25;
    double max_cp_max = 1.0;
  } th;

  bool pass = true;
  json tiles = json::array();
  std::vector<TruthMap> maps(cfg.tiles.size());
  std::vector<CellIndex> shifts(cfg.tiles.size());
  std::vector<bool> usable(cfg.tiles.size(), false);
  for (std::size_t k = 0; k < cfg.tiles.size(); ++k) {
    const auto& t = cfg.tiles[k];
    json tr = {{"tile", t.name}};
    try {
      const PatchGrid det = read_grid(tile_dir(cfg, t) / "grid.bin");
      const PatchGrid truth = read_grid(cfg.truth_dir / t.name / "grid.bin");
      maps[k] = truth_map_from_json(read_text(cfg.truth_dir / t.name / "truth_map.json"));
      const GridComparison gc = compare_grids(det, truth);
      shifts[k] = gc.shift;
      usable[k] = gc.aligned;
      tr["aligned"] = gc.aligned;
      tr["index_shift"] = {gc.shift.i, gc.shift.j};
      tr["coverage"] = gc.coverage;
      tr["center_rms_px"] = gc.rms_error_px;
      tr["center_max_px"] = gc.max_error_px;
      tr["index_mismatches"] = gc.index_mismatches;
      tr["false_positives"] = gc.false_positives;
      bool ok = gc.aligned && gc.coverage >= th.min_coverage && gc.index_mismatches == 0;

      const fs::path mp = tile_dir(cfg, t) / "mesh.bin";
      if (gc.aligned && fs::exists(mp)) {
        const MeshTransform mesh = read_mesh(mp);
        double se = 0, mx = 0;
        std::size_t cnt = 0;
        const auto& b = det.bounds();
        for (int j = b.v0; j < b.v0 + b.height; ++j)
          for (int i = b.u0; i < b.u0 + b.width; ++i)
            for (int s = 0; s < det.sites_per_cell(); ++s) {
              if (!det.at(i, j, s).valid) continue;
              const Vec2 l = Vec2(i, j) + cfg.spec.site(static_cast<std::size_t>(s)).offset;
              if (!mesh.in_domain(LatticeCoord::from(l))) continue;
              const Vec2 lt = l + Vec2(gc.shift.i, gc.shift.j);
              const double e = (mesh.forward(LatticeCoord::from(l)) - maps[k].forward(lt)).norm();
              se += e * e;
              mx = std::max(mx, e);
              ++cnt;
            }
        const double rms = cnt ? std::sqrt(se / static_cast<double>(cnt)) : 0.0;
        tr["mesh_rms_px"] = rms;
        tr["mesh_max_px"] = mx;
        ok = ok && cnt > 0 && rms < th.max_mesh_rms;
      }
      tr["pass"] = ok;
      pass = pass && ok;
    } catch (const std::exception& e) {
      tr["error"] = error_text(e);
      tr["pass"] = false;
      pass = false;
    }
    tiles.push_back(tr);
  }

  json stitch = nullptr;
  const fs::path pto_path = cfg.output_dir / "stitch" / "control_points.pto";
  if (fs::exists(pto_path)) {
    try {
      const PtoProject pto = load_pto(pto_path);
      // PTO image order follows the tiles that were stitched; match by file name.
      std::vector<int> tile_of(pto.images.size(), -1);
      for (std::size_t q = 0; q < pto.images.size(); ++q)
        for (std::size_t k = 0; k < cfg.tiles.size(); ++k)
          if (cfg.tiles[k].path.string() == pto.images[q].filename) tile_of[q] = static_cast<int>(k);
      double sum = 0, mx = 0;
      std::size_t cnt = 0, mism = 0;
      for (const auto& cp : pto.points) {
        const int ka = tile_of.at(static_cast<std::size_t>(cp.tile_a));
        const int kb = tile_of.at(static_cast<std::size_t>(cp.tile_b));
        if (ka < 0 || kb < 0 || !usable[static_cast<std::size_t>(ka)] || !usable[static_cast<std::size_t>(kb)]) continue;
        const TruthMap& ta = maps[static_cast<std::size_t>(ka)];
        const TruthMap& tb = maps[static_cast<std::size_t>(kb)];
        const Vec2 expect = tb.forward(ta.inverse(cp.scan_a));
        const double e = (cp.scan_b - expect).norm();
        sum += e;
        mx = std::max(mx, e);
        ++cnt;
        if (std::isfinite(cp.lattice_a.x()) && std::isfinite(cp.lattice_b.x())) {
          const CellIndex sa = shifts[static_cast<std::size_t>(ka)], sb = shifts[static_cast<std::size_t>(kb)];
          const Vec2 d = (cp.lattice_a + Vec2(sa.i, sa.j)) - (cp.lattice_b + Vec2(sb.i, sb.j));
          if (d.norm() > 0.5) ++mism;
        }
      }
      const double mean = cnt ? sum / static_cast<double>(cnt) : 0.0;
      const bool ok = cnt > 0 && mean < th.max_cp_mean && mx < th.max_cp_max && mism == 0;
      stitch = {{"control_points", cnt}, {"mean_px", mean}, {"max_px", mx}, {"index_mismatches", mism}, {"pass", ok}};
      pass = pass && ok;
    } catch (const std::exception& e) {
      stitch = {{"error", error_text(e)}, {"pass", false}};
      pass = false;
    }
  }
  fs::create_directories(cfg.output_dir);
  write_json(cfg.output_dir / "verify_report.json",
             {{"schema", kReportSchema},
              {"command", "verify"},
              {"seed", cfg.seed},
              {"thresholds",
               {{"min_coverage", th.min_coverage},
                {"max_mesh_rms_px", th.max_mesh_rms},
                {"max_cp_mean_px", th.max_cp_mean},
                {"max_cp_max_px", th.max_cp_max}}},
              {"tiles", tiles},
              {"stitch", stitch},
              {"pass", pass}});
  std::cout << (pass ? "PASS" : "FAIL") << "\n";
  return pass ? 0 : 1;
}

}  // namespace screenreg
