// geoworld command-line driver.
//
//   geoworld synth          --config c.json --seed 1 --out run/ [--scenes N]
//   geoworld train          --config c.json --seed 1 --out run/ --stage 1|2 [--lambda L --ratio R --steps N --tag T]
//   geoworld gen-conditions --config c.json --seed 1 --out run/
//   geoworld infer          --config c.json --seed 1 --out run/ [--tag T] [--scene-seed S --trajectory orbit:20 --allow-overlap]
//   geoworld ablate         --config c.json --seed 1 --out run/ [--lambda L --steps N]
//
// Exit codes: 0 success, 2 validation error, 3 dependency error, 4 I/O error.

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "geoworld/harness.hpp"

namespace {

enum Exit { kOk = 0, kValidation = 2, kDependency = 3, kIo = 4 };

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "PipelineConfig JSON (defaults are used when omitted)");
  cmd->add_option("--seed", c.seed, "Run seed")->required();
  cmd->add_option("--out", c.out, "Output directory")->required();
  cmd->add_flag("-q,--quiet", c.quiet, "Suppress progress output");
}

geoworld::PipelineConfig load_config(const Common& c) {
  return c.config.empty() ? geoworld::PipelineConfig{} : geoworld::PipelineConfig::load(c.config);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"geoworld: geometry-conditioned novel-view video generation at desk scale"};
  app.require_subcommand(1);

  Common common;
  geoworld::Overrides ov;
  int stage = 0;
  int scenes = 0;
  std::uint64_t scene_seed = 0;
  std::string trajectory;
  bool allow_overlap = false;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset");
  add_common(synth, common);
  synth->add_option("--scenes", scenes, "Number of training scenes (default: config train_scenes)")->check(CLI::PositiveNumber);

  auto* train = app.add_subcommand("train", "Train stage 1 or stage 2");
  add_common(train, common);
  train->add_option("--stage", stage, "Stage to train (1 or 2)")->required();

  auto* gen = app.add_subcommand("gen-conditions", "Sample stage-1 outputs used as stage-2 conditions");
  add_common(gen, common);

  auto* infer = app.add_subcommand("infer", "Generate, reconstruct and evaluate held-out or custom scenes");
  add_common(infer, common);
  infer->add_option("--scene-seed", scene_seed, "Evaluate a custom scene instead of the held-out split");
  infer->add_option("--trajectory", trajectory, "kind[:magnitude[:lateral]] or a trajectory JSON file");
  infer->add_flag("--allow-overlap", allow_overlap, "Permit evaluating a training scene");

  auto* ablate = app.add_subcommand("ablate", "Run the adaptation ablation matrix");
  add_common(ablate, common);

  for (auto* cmd : {train, ablate}) {
    cmd->add_option_function<double>("--lambda", [&](double v) { ov.lambda = v; }, "Geometry alignment weight");
    cmd->add_option_function<int>("--steps", [&](int v) { ov.steps = v; }, "Override the number of training steps");
  }
  train->add_option_function<double>("--ratio", [&](double v) { ov.ratio = v; }, "Token discard ratio");
  train->add_option_function<bool>("--adapter", [&](bool v) { ov.use_adapter = v; }, "Use the geometry adapter (stage 2)");
  train->add_option_function<bool>("--weighting", [&](bool v) { ov.use_weighting = v; }, "Use token weighting and discard (stage 2)");
  for (auto* cmd : {train, infer}) cmd->add_option("--tag", ov.tag, "Name suffix for stage2-<tag>/infer-<tag>");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  const geoworld::Logger log = common.quiet ? geoworld::Logger{} : geoworld::stderr_logger();
  try {
    geoworld::PipelineConfig cfg = load_config(common);
    const std::filesystem::path out = common.out;
    if (synth->parsed()) {
      const auto rep = geoworld::cmd_synth(cfg, common.seed, out, scenes > 0 ? std::optional<int>(scenes) : std::nullopt, log);
      std::printf("synth: %zu pairs, manifest %s\n", rep.entries.size(), rep.manifest_hash.c_str());
    } else if (train->parsed()) {
      const auto rep = geoworld::cmd_train(cfg, stage, common.seed, out, ov, log);
      std::printf("train: stage %d, %zu steps, final L=%.6f -> %s\n", stage, rep.log.size(),
                  rep.log.empty() ? 0.0 : rep.log.back().terms.total, rep.dir.string().c_str());
    } else if (gen->parsed()) {
      const auto rep = geoworld::cmd_gen_conditions(cfg, common.seed, out, log);
      std::printf("gen-conditions: %zu videos\n", rep.videos.size());
    } else if (infer->parsed()) {
      geoworld::InferOptions opt;
      opt.tag = ov.tag;
      if (infer->count("--scene-seed")) opt.scene_seed = scene_seed;
      if (!trajectory.empty()) opt.trajectory = trajectory;
      opt.allow_overlap = allow_overlap;
      const auto rep = geoworld::cmd_infer(cfg, common.seed, out, opt, log);
      std::printf("infer: %zu scenes, PSNR %.3f dB, SSIM %.4f, L_geo %.6f -> %s\n", rep.scenes.size(), rep.mean_psnr, rep.mean_ssim,
                  rep.mean_l_geo, rep.dir.string().c_str());
    } else if (ablate->parsed()) {
      const auto rep = geoworld::cmd_ablate(cfg, common.seed, out, ov, log);
      std::printf("ablate: %zu rows -> %s\n", rep.rows.size(), rep.csv.string().c_str());
    }
    return kOk;
  } catch (const geoworld::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const geoworld::InvalidArgument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  } catch (const geoworld::DependencyError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kDependency;
  } catch (const geoworld::ConfigHashError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kDependency;
  } catch (const geoworld::IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const geoworld::FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIo;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kValidation;
  }
}
