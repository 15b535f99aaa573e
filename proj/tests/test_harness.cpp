#include <gtest/gtest.h>

#include <filesystem>

#include "geoworld/harness.hpp"

using namespace geoworld;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny() {
  PipelineConfig c;
  c.height = 16;
  c.width = 16;
  c.frames = 3;
  c.latent_frames = 2;
  c.geo_dim = 8;
  c.geo_layers = 2;
  c.model_dim = 8;
  c.blocks = 1;
  c.adapter_hidden = 8;
  c.predictor_hidden = 4;
  c.timesteps = 4;
  c.train_scenes = 4;
  c.heldout_scenes = 1;
  c.steps_stage1 = 3;
  c.steps_stage2 = 2;
  c.ablation_steps = 1;
  c.ablation_seeds = 1;
  c.eval_draws = 1;
  c.log_every = 0;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("geoworld_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string field_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ValidationError& e) {
    return e.field();
  }
  return "";
}

// Every regular file under root, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::read_file(e.path());
  return out;
}

void run_pipeline(const PipelineConfig& cfg, const fs::path& out) {
  cmd_synth(cfg, 11, out);
  cmd_train(cfg, 1, 11, out);
  cmd_gen_conditions(cfg, 11, out);
  cmd_train(cfg, 2, 11, out);
  cmd_infer(cfg, 11, out);
}

}  // namespace

TEST(Config, DefaultsValidate) { EXPECT_NO_THROW(PipelineConfig{}.validate()); }

TEST(Config, ValidationNamesTheField) {
  PipelineConfig c;
  c.height = 50;
  EXPECT_EQ(field_of([&] { c.validate(); }), "height");
  c = {};
  c.discard_ratio = 1.0;
  EXPECT_EQ(field_of([&] { c.validate(); }), "discard_ratio");
  c = {};
  c.latent_frames = 18;
  EXPECT_EQ(field_of([&] { c.validate(); }), "latent_frames");
  EXPECT_EQ(field_of([] { PipelineConfig::from_json(json{{"frobnicate", 1}}); }), "frobnicate");
  EXPECT_EQ(field_of([] { PipelineConfig::from_json(json{{"width", "wide"}}); }), "width");
}

TEST(Config, JsonRoundTrip) {
  PipelineConfig c = tiny();
  c.lambda = 0.35;
  const PipelineConfig d = PipelineConfig::from_json(c.to_json());
  EXPECT_EQ(d.to_json(), c.to_json());
}

TEST(Config, HashCoversStructureOnly) {
  PipelineConfig a, b;
  EXPECT_EQ(a.hash(), b.hash());
  b.lambda = 0.0;
  b.steps_stage1 = 1;
  EXPECT_EQ(a.hash(), b.hash());
  b.model_dim = 32;
  EXPECT_NE(a.hash(), b.hash());
  EXPECT_EQ(a.hash_hex().size(), 16u);
}

TEST(Config, OverridesApplyAndValidate) {
  PipelineConfig c;
  Overrides ov;
  ov.lambda = 0.0;
  ov.ratio = 0.7;
  ov.apply(c);
  EXPECT_EQ(c.lambda, 0.0);
  EXPECT_EQ(c.discard_ratio, 0.7);
  ov.ratio = 1.5;
  EXPECT_THROW(ov.apply(c), ValidationError);
}

TEST(Config, LoadRejectsMalformedFile) {
  const fs::path dir = scratch("badjson");
  io::write_file(dir / "c.json", "{ not json");
  EXPECT_EQ(field_of([&] { PipelineConfig::load(dir / "c.json"); }), "config");
  EXPECT_THROW(PipelineConfig::load(dir / "missing.json"), IoError);
}

TEST(Threads, EnvironmentVariable) {
  ::setenv("GEOWORLD_THREADS", "3", 1);
  EXPECT_EQ(worker_threads(), 3);
  ::unsetenv("GEOWORLD_THREADS");
  EXPECT_EQ(worker_threads(), 1);
}

TEST(Trajectory, SpecParsing) {
  const PipelineConfig c = tiny();
  const Trajectory t = parse_trajectory_spec("dolly:0.5", c);
  EXPECT_EQ(t.size(), 3u);
  EXPECT_NEAR(t.frames[2].pose.center()[2], 0.5, 1e-12);
  EXPECT_EQ(field_of([&] { parse_trajectory_spec("spiral:3", c); }), "trajectory");
  EXPECT_EQ(field_of([&] { parse_trajectory_spec("orbit:abc", c); }), "trajectory");
}

TEST(Trajectory, PerSceneTrajectoryIsDeterministic) {
  const PipelineConfig c = tiny();
  EXPECT_EQ(trajectory_to_json(scene_trajectory(c, 5)), trajectory_to_json(scene_trajectory(c, 5)));
  EXPECT_EQ(scene_trajectory(c, 5).size(), 3u);
}

TEST(Synth, DeterministicAndDisjointSplits) {
  const PipelineConfig c = tiny();
  const fs::path a = scratch("synth_a"), b = scratch("synth_b");
  const auto ra = cmd_synth(c, 4, a), rb = cmd_synth(c, 4, b);
  EXPECT_EQ(ra.manifest_hash, rb.manifest_hash);
  EXPECT_EQ(snapshot(a), snapshot(b));
  ASSERT_EQ(ra.entries.size(), 5u);
  for (const auto& e : ra.entries) {
    if (!e.heldout) continue;
    for (const auto& t : ra.entries) EXPECT_TRUE(t.heldout || t.scene_seed != e.scene_seed);
  }
  EXPECT_TRUE(fs::exists(a / "dataset" / "train_000" / "target.gwtn"));
  EXPECT_TRUE(fs::exists(a / "dataset" / "heldout_000" / "condition_000.png"));
  EXPECT_NE(cmd_synth(c, 5, scratch("synth_c")).manifest_hash, ra.manifest_hash);
}

TEST(Dependencies, StagesRequireTheirInputs) {
  const PipelineConfig c = tiny();
  const fs::path out = scratch("deps");
  EXPECT_THROW(cmd_train(c, 1, 1, out), DependencyError);
  cmd_synth(c, 1, out);
  EXPECT_THROW(cmd_train(c, 2, 1, out), DependencyError);
  EXPECT_THROW(cmd_gen_conditions(c, 1, out), DependencyError);
  EXPECT_THROW(cmd_infer(c, 1, out), DependencyError);
  EXPECT_THROW(cmd_ablate(c, 1, out), DependencyError);
  EXPECT_THROW(cmd_train(c, 3, 1, out), ValidationError);
}

TEST(Dependencies, ForeignConfigHashRejected) {
  const PipelineConfig c = tiny();
  const fs::path out = scratch("hash");
  cmd_synth(c, 1, out);
  cmd_train(c, 1, 1, out);
  PipelineConfig other = c;
  other.model_dim = 16;
  EXPECT_THROW(cmd_train(other, 1, 1, out), ConfigHashError);
  EXPECT_THROW(cmd_gen_conditions(other, 1, out), ConfigHashError);
}

TEST(Pipeline, EndToEndArtifactsAndSchemas) {
  const PipelineConfig c = tiny();
  const fs::path out = scratch("e2e");
  run_pipeline(c, out);
  const std::string ck = Layout::checkpoint_name(c);
  EXPECT_TRUE(fs::exists(out / "stage1" / ck));
  EXPECT_TRUE(fs::exists(out / "stage2" / ck));
  EXPECT_TRUE(fs::exists(out / "stage2" / "loss.csv"));
  EXPECT_TRUE(fs::exists(out / "conditions" / "heldout_000" / "views.gwtn"));
  const fs::path scene = out / "infer" / "heldout_000";
  for (const char* f : {"frame_00.png", "frame_02.png", "prediction.gwtn", "cloud.gwpc", "metrics.csv"}) EXPECT_TRUE(fs::exists(scene / f)) << f;
  const std::string summary = io::read_file(out / "infer" / "summary.csv");
  EXPECT_EQ(summary.substr(0, summary.find('\n')), "scene,psnr_db,ssim,sample_l_geo,condition_psnr_db");
  EXPECT_NE(summary.find("\neval_l_geo,"), std::string::npos);
  const std::string loss = io::read_file(out / "stage1" / "loss.csv");
  EXPECT_EQ(loss.substr(0, loss.find('\n')), "step,L,L_diff,L_geo");
  const json m = read_json(out / "stage2" / "manifest.json");
  EXPECT_EQ(m.at("lambda").get<double>(), c.lambda);
  EXPECT_EQ(decode_cloud(io::read_file(scene / "cloud.gwpc")).empty(), false);
}

TEST(Pipeline, IdenticalSeedsByteIdentical) {
  const PipelineConfig c = tiny();
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  run_pipeline(c, a);
  run_pipeline(c, b);
  const auto sa = snapshot(a), sb = snapshot(b);
  EXPECT_EQ(sa.size(), sb.size());
  for (const auto& [k, v] : sa) EXPECT_TRUE(sb.count(k) && sb.at(k) == v) << k;
}

TEST(Infer, LeakageGuard) {
  const PipelineConfig c = tiny();
  const fs::path out = scratch("leak");
  run_pipeline(c, out);
  const std::uint64_t train_seed = scene_seed_for(11, false, 0);
  InferOptions opt;
  opt.scene_seed = train_seed;
  EXPECT_EQ(field_of([&] { cmd_infer(c, 11, out, opt); }), "scene_seed");
  opt.allow_overlap = true;
  opt.trajectory = "pan:10:0.2";
  opt.write_artifacts = false;
  const auto rep = cmd_infer(c, 11, out, opt);
  ASSERT_EQ(rep.scenes.size(), 1u);
  EXPECT_GT(rep.mean_psnr, 0.0);
}

TEST(Ablate, MatrixSchema) {
  const PipelineConfig c = tiny();
  const fs::path out = scratch("ablate");
  cmd_synth(c, 2, out);
  cmd_train(c, 1, 2, out);
  cmd_gen_conditions(c, 2, out);
  const auto rep = cmd_ablate(c, 2, out);
  // 3 single-ratio variants plus the weighted variant at three ratios.
  ASSERT_EQ(rep.rows.size(), 6u);
  const std::string csv = io::read_file(rep.csv);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "config,ratio,seed,psnr_db,ssim,mean_l_geo");
  EXPECT_EQ(rep.rows[0].config, "base");
  for (double r : ablation_ratios()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "\n+GAL+weighting,%.1f,", r);
    EXPECT_NE(csv.find(buf), std::string::npos) << buf;
  }
}

TEST(Ablate, NeedsFourTrainingPairs) {
  PipelineConfig c = tiny();
  c.train_scenes = 3;
  const fs::path out = scratch("ablate_small");
  cmd_synth(c, 2, out);
  cmd_train(c, 1, 2, out);
  EXPECT_EQ(field_of([&] { cmd_ablate(c, 2, out); }), "train_scenes");
}
