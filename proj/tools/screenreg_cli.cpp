#include "screenreg/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace {

constexpr int kExitInvalid = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  bool resume = false;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = true) {
  auto* opt = cmd->add_option("--config", c.config, "job configuration (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--seed", c.seed, "seed for every randomized stage");
  cmd->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--resume", c.resume, "skip tiles whose sidecars are current");
}

screenreg::JobConfig load(const Common& c) {
  screenreg::JobConfig cfg = screenreg::load_job_config(c.config);
  if (c.seed) screenreg::apply_seed(cfg, *c.seed);
  if (c.workers) cfg.workers = *c.workers;
  if (c.resume) cfg.resume = true;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Color screen registration, demosaicing and stitching"};
  app.require_subcommand(1);

  Common common;
  auto* analyze = app.add_subcommand("analyze", "profile, detect, mesh and collect every tile");
  add_common(analyze, common);
  auto* stitch = app.add_subcommand("stitch", "match tiles, solve the layout and blend a master");
  add_common(stitch, common);
  auto* render = app.add_subcommand("render", "demosaic and color-render analyzed tiles");
  add_common(render, common);

  auto* synth = app.add_subcommand("synth", "render a synthetic dataset with ground truth");
  Common synth_common;
  add_common(synth, synth_common, false);
  std::string scene, out_dir = "synth";
  synth->add_option("scene", scene, "scene description (JSON)")->required();
  synth->add_option("-o,--out", out_dir, "output directory");

  auto* verify = app.add_subcommand("verify", "compare analysis outputs with ground truth");
  add_common(verify, common);
  std::string truth;
  verify->add_option("--truth", truth, "truth directory written by synth");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInvalid;
  }

  try {
    if (*synth)
      return screenreg::cmd_synth(scene, out_dir, synth_common.seed.value_or(7), synth_common.workers.value_or(1));
    screenreg::JobConfig cfg = load(common);
    if (*analyze) return screenreg::cmd_analyze(cfg);
    if (*stitch) return screenreg::cmd_stitch(cfg);
    if (*render) return screenreg::cmd_render(cfg);
    if (*verify) {
      if (!truth.empty()) cfg.truth_dir = truth;
      return screenreg::cmd_verify(cfg);
    }
  } catch (const screenreg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == screenreg::ErrorKind::InvalidArgument || e.kind() == screenreg::ErrorKind::Format ? kExitInvalid : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kExitInvalid;
}
