#pragma once

// Pipeline orchestration behind the `geoworld` CLI: configuration, dataset
// synthesis, two-stage training, condition generation, inference with
// reconstruction and evaluation, and the ablation matrix.
//
// Directory layout under the output root:
//   dataset/manifest.json, dataset/<pair>/{scene,trajectory}.json,
//     condition.gwtn mask.gwtn target.gwtn depth.gwtn target_geo.gwgf manifest.json
//   stage1/checkpoint-<hash>.gwck loss.csv manifest.json
//   conditions/manifest.json, conditions/<pair>/{views.gwtn, geo.gwgf}
//   stage2[-tag]/checkpoint-<hash>.gwck loss.csv manifest.json
//   infer[-tag]/<pair>/frame_XX.png cloud.gwpc metrics.csv, infer[-tag]/summary.csv
//   ablation/ablation.csv
// <hash> is the structural config hash; every manifest repeats it and loaders
// reject artifacts produced under a different configuration.

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "geoworld/camera.hpp"
#include "geoworld/diffusion.hpp"
#include "geoworld/geoadapt.hpp"
#include "geoworld/geoencoder.hpp"
#include "geoworld/io.hpp"
#include "geoworld/pairing.hpp"
#include "geoworld/pointrender.hpp"
#include "geoworld/recon.hpp"
#include "geoworld/scene.hpp"

namespace geoworld {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct PipelineConfig {
  // Structure (hashed).
  int height = 48;
  int width = 80;
  int frames = 17;
  int latent_frames = 5;
  int patch = 8;
  int geo_dim = 32;
  int geo_layers = 4;
  std::uint64_t geo_seed = 7;
  int model_dim = 64;
  int blocks = 2;
  int adapter_hidden = 64;
  int predictor_hidden = 32;
  int timesteps = 100;
  int train_scenes = 8;
  int heldout_scenes = 4;
  int splat_radius = 1;

  // Training and evaluation knobs (not hashed).
  double lambda = 0.2;
  double discard_ratio = 0.5;
  bool use_adapter = true;
  bool use_weighting = true;
  double lr_stage1 = 5e-4;
  double lr_stage2 = 5e-4;
  double momentum = 0.9;
  double max_grad_norm = 0.0;
  int steps_stage1 = 700;
  int steps_stage2 = 200;
  int eval_draws = 4;
  int ablation_steps = 100;
  int ablation_seeds = 3;
  int log_every = 50;

  json structural_json() const {
    return json{{"height", height},         {"width", width},
                {"frames", frames},         {"latent_frames", latent_frames},
                {"patch", patch},           {"geo_dim", geo_dim},
                {"geo_layers", geo_layers}, {"geo_seed", geo_seed},
                {"model_dim", model_dim},   {"blocks", blocks},
                {"adapter_hidden", adapter_hidden}, {"predictor_hidden", predictor_hidden},
                {"timesteps", timesteps},   {"train_scenes", train_scenes},
                {"heldout_scenes", heldout_scenes}, {"splat_radius", splat_radius}};
  }

  json to_json() const {
    json j = structural_json();
    j["lambda"] = lambda;
    j["discard_ratio"] = discard_ratio;
    j["use_adapter"] = use_adapter;
    j["use_weighting"] = use_weighting;
    j["lr_stage1"] = lr_stage1;
    j["lr_stage2"] = lr_stage2;
    j["momentum"] = momentum;
    j["max_grad_norm"] = max_grad_norm;
    j["steps_stage1"] = steps_stage1;
    j["steps_stage2"] = steps_stage2;
    j["eval_draws"] = eval_draws;
    j["ablation_steps"] = ablation_steps;
    j["ablation_seeds"] = ablation_seeds;
    j["log_every"] = log_every;
    return j;
  }

  /// FNV-1a of the canonical (key-sorted, compact) structural JSON.
  std::uint64_t hash() const { return fnv1a64(structural_json().dump()); }
  std::string hash_hex() const { return io::hex64(hash()); }

  static PipelineConfig from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("config", "expected a JSON object");
    PipelineConfig c;
    const json known = c.to_json();
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() == "output_dir") continue;  // accepted for convenience; --out wins
      if (!known.contains(it.key())) throw ValidationError(it.key(), "unknown configuration field");
    }
    auto get = [&](const char* key, auto& field) {
      if (!j.contains(key)) return;
      try {
        field = j.at(key).get<std::decay_t<decltype(field)>>();
      } catch (const json::exception&) {
        throw ValidationError(key, "wrong type");
      }
    };
    get("height", c.height);
    get("width", c.width);
    get("frames", c.frames);
    get("latent_frames", c.latent_frames);
    get("patch", c.patch);
    get("geo_dim", c.geo_dim);
    get("geo_layers", c.geo_layers);
    get("geo_seed", c.geo_seed);
    get("model_dim", c.model_dim);
    get("blocks", c.blocks);
    get("adapter_hidden", c.adapter_hidden);
    get("predictor_hidden", c.predictor_hidden);
    get("timesteps", c.timesteps);
    get("train_scenes", c.train_scenes);
    get("heldout_scenes", c.heldout_scenes);
    get("splat_radius", c.splat_radius);
    get("lambda", c.lambda);
    get("discard_ratio", c.discard_ratio);
    get("use_adapter", c.use_adapter);
    get("use_weighting", c.use_weighting);
    get("lr_stage1", c.lr_stage1);
    get("lr_stage2", c.lr_stage2);
    get("momentum", c.momentum);
    get("max_grad_norm", c.max_grad_norm);
    get("steps_stage1", c.steps_stage1);
    get("steps_stage2", c.steps_stage2);
    get("eval_draws", c.eval_draws);
    get("ablation_steps", c.ablation_steps);
    get("ablation_seeds", c.ablation_seeds);
    get("log_every", c.log_every);
    c.validate();
    return c;
  }

  static PipelineConfig load(const fs::path& path) {
    const std::string text = io::read_file(path);
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ValidationError("config", path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  void validate() const {
    auto positive = [](const char* field, long v) {
      if (v < 1) throw ValidationError(field, "must be >= 1");
    };
    positive("height", height);
    positive("width", width);
    positive("frames", frames);
    positive("patch", patch);
    positive("geo_dim", geo_dim);
    positive("geo_layers", geo_layers);
    positive("model_dim", model_dim);
    positive("adapter_hidden", adapter_hidden);
    positive("predictor_hidden", predictor_hidden);
    positive("train_scenes", train_scenes);
    positive("eval_draws", eval_draws);
    positive("ablation_seeds", ablation_seeds);
    if (blocks < 0) throw ValidationError("blocks", "must be >= 0");
    if (heldout_scenes < 0) throw ValidationError("heldout_scenes", "must be >= 0");
    if (height % patch != 0) throw ValidationError("height", "must be divisible by patch (" + std::to_string(patch) + ")");
    if (width % patch != 0) throw ValidationError("width", "must be divisible by patch (" + std::to_string(patch) + ")");
    if (height < 8 || width < 8) throw ValidationError("height", "images must be at least 8x8");
    if (latent_frames < 1 || latent_frames > frames) throw ValidationError("latent_frames", "must satisfy 1 <= latent_frames <= frames");
    if (timesteps < 2) throw ValidationError("timesteps", "must be >= 2");
    if (!(lambda >= 0.0)) throw ValidationError("lambda", "must be >= 0");
    if (!(discard_ratio >= 0.0 && discard_ratio < 1.0)) throw ValidationError("discard_ratio", "must lie in [0, 1)");
    if (!(lr_stage1 > 0.0)) throw ValidationError("lr_stage1", "must be > 0");
    if (!(lr_stage2 > 0.0)) throw ValidationError("lr_stage2", "must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum", "must lie in [0, 1)");
    if (!(max_grad_norm >= 0.0)) throw ValidationError("max_grad_norm", "must be >= 0");
    if (steps_stage1 < 0 || steps_stage2 < 0 || ablation_steps < 0) throw ValidationError("steps_stage1", "step counts must be >= 0");
    if (splat_radius < 0) throw ValidationError("splat_radius", "must be >= 0");
    if (log_every < 0) throw ValidationError("log_every", "must be >= 0");
  }

  GeoEncoderConfig geo() const { return {geo_layers, geo_dim, patch, height, width, geo_seed}; }

  DenoiserConfig denoiser(ConditionMode mode, std::uint64_t seed) const {
    DenoiserConfig d;
    d.frames = frames;
    d.latent_frames = latent_frames;
    d.height = height;
    d.width = width;
    d.patch = patch;
    d.model_dim = model_dim;
    d.blocks = blocks;
    d.timesteps = timesteps;
    d.geo_dim = geo_dim;
    d.adapter_hidden = adapter_hidden;
    d.predictor_hidden = predictor_hidden;
    d.mode = mode;
    d.use_adapter = use_adapter;
    d.use_weighting = use_weighting;
    d.discard_ratio = discard_ratio;
    d.seed = seed;
    return d;
  }
};

/// Per-command settings that override the configuration file.
struct Overrides {
  std::optional<double> lambda;
  std::optional<double> ratio;
  std::optional<int> steps;
  std::optional<bool> use_adapter;
  std::optional<bool> use_weighting;
  std::string tag;  // names stage2-<tag> / infer-<tag> directories

  void apply(PipelineConfig& c) const {
    if (lambda) c.lambda = *lambda;
    if (ratio) c.discard_ratio = *ratio;
    if (use_adapter) c.use_adapter = *use_adapter;
    if (use_weighting) c.use_weighting = *use_weighting;
    c.validate();
  }
};

/// Number of worker threads from GEOWORLD_THREADS (default 1).
inline int worker_threads() {
  const char* v = std::getenv("GEOWORLD_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ValidationError("GEOWORLD_THREADS", "must be a positive integer");
  return static_cast<int>(std::min<long>(n, 256));
}

using Logger = std::function<void(const std::string&)>;

inline Logger stderr_logger() {
  return [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
}

// ---------------------------------------------------------------------------
// Paths and artifact helpers
// ---------------------------------------------------------------------------

struct Layout {
  fs::path root;

  fs::path dataset() const { return root / "dataset"; }
  fs::path pair(const std::string& name) const { return dataset() / name; }
  fs::path stage1() const { return root / "stage1"; }
  fs::path conditions() const { return root / "conditions"; }
  fs::path stage2(const std::string& tag = "") const { return root / (tag.empty() ? "stage2" : "stage2-" + tag); }
  fs::path infer(const std::string& tag = "") const { return root / (tag.empty() ? "infer" : "infer-" + tag); }
  fs::path ablation() const { return root / "ablation"; }
  static std::string checkpoint_name(const PipelineConfig& c) { return "checkpoint-" + c.hash_hex() + ".gwck"; }
};

inline void write_json(const fs::path& p, const json& j) { io::write_file(p, j.dump(2) + "\n"); }

inline json read_json(const fs::path& p) {
  const std::string text = io::read_file(p);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

inline void require(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw DependencyError(what + " missing (" + p.string() + ")");
}

inline void check_manifest_hash(const json& manifest, const PipelineConfig& cfg, const fs::path& where) {
  const std::string h = manifest.value("config_hash", std::string{});
  if (h != cfg.hash_hex()) {
    throw ConfigHashError(where.string() + " was produced with config hash " + h + ", current config hash is " + cfg.hash_hex());
  }
}

inline std::string pair_name(bool heldout, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d", heldout ? "heldout" : "train", i);
  return buf;
}

inline std::uint64_t scene_seed_for(std::uint64_t seed, bool heldout, int i) {
  return derive_seed(seed, (heldout ? "heldout/" : "train/") + std::to_string(i)) & 0xFFFFFFFFFFFFULL;
}

/// Trajectory for a scene: kind and motion drawn from the scene seed.
inline Trajectory scene_trajectory(const PipelineConfig& cfg, std::uint64_t scene_seed) {
  SeededRng rng(derive_seed(scene_seed, "trajectory"));
  MotionParams mp;
  mp.intrinsics = Intrinsics::centered(cfg.width, cfg.height);
  const auto kind = static_cast<TrajectoryKind>(rng.below(3));
  switch (kind) {
    case TrajectoryKind::Orbit: mp.magnitude = rng.uniform(12.0, 24.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0); break;
    case TrajectoryKind::Dolly: mp.magnitude = rng.uniform(0.6, 1.2); break;
    case TrajectoryKind::Pan:
      mp.magnitude = rng.uniform(8.0, 16.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
      mp.lateral = rng.uniform(-0.4, 0.4);
      break;
  }
  return make_trajectory(kind, cfg.frames, mp);
}

/// "orbit:20", "dolly:1.0", "pan:12:0.3", or a trajectory JSON file.
inline Trajectory parse_trajectory_spec(const std::string& spec, const PipelineConfig& cfg) {
  if (fs::exists(spec)) {
    Trajectory t = load_trajectory(spec);
    if (t.size() != static_cast<std::size_t>(cfg.frames)) throw ValidationError("trajectory", "frame count differs from config frames");
    return t;
  }
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= spec.size(); ++i)
    if (i == spec.size() || spec[i] == ':') {
      parts.push_back(spec.substr(start, i - start));
      start = i + 1;
    }
  MotionParams mp;
  mp.intrinsics = Intrinsics::centered(cfg.width, cfg.height);
  TrajectoryKind kind;
  try {
    kind = parse_trajectory_kind(parts.at(0));
    if (parts.size() > 1) mp.magnitude = std::stod(parts[1]);
    if (parts.size() > 2) mp.lateral = std::stod(parts[2]);
  } catch (const std::exception&) {
    throw ValidationError("trajectory", "expected kind[:magnitude[:lateral]] or a trajectory file, got '" + spec + "'");
  }
  return make_trajectory(kind, cfg.frames, mp);
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

struct DatasetEntry {
  std::string name;
  bool heldout = false;
  std::uint64_t scene_seed = 0;
};

struct LoadedPair {
  DatasetEntry entry;
  Trajectory trajectory;
  Tensor condition, mask, target, depth;
  GeoFeatures target_geo;
};

inline GeoFeatures encode_frame(const Tensor& video, std::size_t f, const GeoEncoderParams& gp) {
  const Tensor fr = frame_of(video, f);
  return encode(fr.reshaped({1, fr.dim(0), fr.dim(1), fr.dim(2)}), gp);
}

struct SynthReport {
  std::vector<DatasetEntry> entries;
  std::string manifest_hash;
};

inline SynthReport cmd_synth(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& out, std::optional<int> n_scenes = {},
                             const Logger& log = {}) {
  cfg.validate();
  const int n = n_scenes.value_or(cfg.train_scenes);
  if (n < 1) throw ValidationError("scenes", "must be >= 1");
  const Layout lay{out};
  const GeoEncoderParams gp = GeoEncoderParams::init(cfg.geo());
  const auto h = static_cast<std::size_t>(cfg.height), w = static_cast<std::size_t>(cfg.width);

  SynthReport rep;
  json pairs = json::array();
  for (int split = 0; split < 2; ++split) {
    const bool heldout = split == 1;
    const int count = heldout ? cfg.heldout_scenes : n;
    for (int i = 0; i < count; ++i) {
      DatasetEntry e{pair_name(heldout, i), heldout, scene_seed_for(seed, heldout, i)};
      const SyntheticScene scene = generate_scene(e.scene_seed);
      const Trajectory traj = scene_trajectory(cfg, e.scene_seed);
      const TrainingPair tp = build_training_pair(scene, traj, h, w, 0, cfg.splat_radius);
      const fs::path dir = lay.pair(e.name);
      json files;
      auto put = [&](const std::string& fname, const std::string& bytes) {
        io::write_file(dir / fname, bytes);
        files[fname] = io::hex64(io::hash_bytes(bytes));
      };
      put("scene.json", scene_to_json(scene).dump(2) + "\n");
      put("trajectory.json", trajectory_to_json(traj));
      put("condition.gwtn", io::encode_tensor(tp.condition_input));
      put("mask.gwtn", io::encode_tensor(tp.condition_mask));
      put("target.gwtn", io::encode_tensor(tp.target));
      put("depth.gwtn", io::encode_tensor(tp.target_depth));
      put("target_geo.gwgf", encode_features(encode(tp.target, gp)));
      put("condition_000.png", io::encode_png(frame_of(tp.condition_input, tp.frames() - 1)));
      put("target_000.png", io::encode_png(frame_of(tp.target, tp.frames() - 1)));
      const json pm{{"config_hash", cfg.hash_hex()}, {"name", e.name}, {"split", heldout ? "heldout" : "train"},
                    {"scene_seed", e.scene_seed},     {"reference_index", tp.reference_index}, {"files", files}};
      const std::string pm_text = pm.dump(2) + "\n";
      io::write_file(dir / "manifest.json", pm_text);
      pairs.push_back({{"name", e.name}, {"split", heldout ? "heldout" : "train"}, {"scene_seed", e.scene_seed},
                       {"manifest_hash", io::hex64(io::hash_bytes(pm_text))}});
      rep.entries.push_back(e);
      if (log) log("synth: " + e.name + " (scene seed " + std::to_string(e.scene_seed) + ")");
    }
  }
  const json manifest{{"config_hash", cfg.hash_hex()}, {"seed", seed}, {"config", cfg.to_json()}, {"pairs", pairs}};
  const std::string text = manifest.dump(2) + "\n";
  io::write_file(lay.dataset() / "manifest.json", text);
  rep.manifest_hash = io::hex64(io::hash_bytes(text));
  return rep;
}

struct Dataset {
  json manifest;
  std::uint64_t seed = 0;
  std::vector<DatasetEntry> entries;

  std::vector<DatasetEntry> split(bool heldout) const {
    std::vector<DatasetEntry> out;
    for (const auto& e : entries)
      if (e.heldout == heldout) out.push_back(e);
    return out;
  }
};

inline Dataset load_dataset(const PipelineConfig& cfg, const fs::path& out) {
  const Layout lay{out};
  require(lay.dataset() / "manifest.json", "dataset (run `geoworld synth` first)");
  Dataset d;
  d.manifest = read_json(lay.dataset() / "manifest.json");
  check_manifest_hash(d.manifest, cfg, lay.dataset());
  d.seed = d.manifest.at("seed").get<std::uint64_t>();
  for (const auto& p : d.manifest.at("pairs")) {
    d.entries.push_back({p.at("name").get<std::string>(), p.at("split").get<std::string>() == "heldout", p.at("scene_seed").get<std::uint64_t>()});
  }
  return d;
}

inline LoadedPair load_pair(const PipelineConfig& cfg, const fs::path& out, const DatasetEntry& e) {
  const fs::path dir = Layout{out}.pair(e.name);
  require(dir / "manifest.json", "dataset pair " + e.name);
  check_manifest_hash(read_json(dir / "manifest.json"), cfg, dir);
  LoadedPair p;
  p.entry = e;
  p.trajectory = load_trajectory((dir / "trajectory.json").string());
  p.condition = io::load_tensor(dir / "condition.gwtn");
  p.mask = io::load_tensor(dir / "mask.gwtn");
  p.target = io::load_tensor(dir / "target.gwtn");
  p.depth = io::load_tensor(dir / "depth.gwtn");
  p.target_geo = decode_features(io::read_file(dir / "target_geo.gwgf"), (dir / "target_geo.gwgf").string());
  return p;
}

inline Tensor flat_tokens(const GeoFeatures& g) { return g.tokens.reshaped({g.frames() * g.patches(), g.dim()}); }

/// Stage-1 example: partial renders in, single-frame geometry of the input image.
inline TrainSample stage1_sample(const LoadedPair& p, const GeoEncoderParams& gp) {
  return {p.target, p.condition, p.mask, encode_frame(p.target, 0, gp), flat_tokens(p.target_geo)};
}

/// Stage-2 example: completed stage-1 views in, full-frame geometry of those views.
inline TrainSample stage2_sample(const LoadedPair& p, const Tensor& views, const GeoFeatures& views_geo) {
  Tensor ones(p.mask.shape(), 1.0);
  return {p.target, views, std::move(ones), views_geo, flat_tokens(p.target_geo)};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline void save_stage(const fs::path& dir, const PipelineConfig& cfg, const DenoiserParams& prm, std::uint32_t stage, std::uint64_t step,
                       const std::vector<LossRecord>& log, json extra) {
  const std::string ck = encode_checkpoint(prm, cfg.hash(), stage, step);
  io::write_file(dir / Layout::checkpoint_name(cfg), ck);
  const std::string csv = loss_csv(log);
  io::write_file(dir / "loss.csv", csv);
  extra["config_hash"] = cfg.hash_hex();
  extra["stage"] = stage;
  extra["steps"] = step;
  extra["checkpoint"] = Layout::checkpoint_name(cfg);
  extra["checkpoint_hash"] = io::hex64(io::hash_bytes(ck));
  extra["loss_csv_hash"] = io::hex64(io::hash_bytes(csv));
  write_json(dir / "manifest.json", extra);
}

/// Finds the checkpoint for this config in dir; other configs' checkpoints are a hash error.
inline Checkpoint load_stage(const fs::path& dir, const PipelineConfig& cfg, const DenoiserConfig& dcfg, const std::string& what) {
  const fs::path p = dir / Layout::checkpoint_name(cfg);
  if (!fs::exists(p)) {
    if (fs::exists(dir))
      for (const auto& ent : fs::directory_iterator(dir))
        if (ent.path().extension() == ".gwck") {
          throw ConfigHashError(ent.path().string() + " belongs to a different configuration (expected " + p.filename().string() + ")");
        }
    throw DependencyError(what + " checkpoint missing (" + p.string() + ")");
  }
  return decode_checkpoint(io::read_file(p), dcfg, cfg.hash(), p.string());
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainReport {
  fs::path dir;
  std::vector<LossRecord> log;
  DenoiserParams params;
};

inline StepCallback progress(const Logger& log, const std::string& label, int every, int total) {
  if (!log || every <= 0) return {};
  return [=](const LossRecord& r) {
    if (r.step % static_cast<std::uint64_t>(every) == 0 || r.step == static_cast<std::uint64_t>(total)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s step %llu/%d  L=%.5f  L_diff=%.5f  L_geo=%.5f", label.c_str(),
                    static_cast<unsigned long long>(r.step), total, r.terms.total, r.terms.diff, r.terms.geo);
      log(buf);
    }
  };
}

inline std::vector<TrainSample> stage2_samples(const PipelineConfig& cfg, const fs::path& out, const std::vector<DatasetEntry>& entries) {
  const Layout lay{out};
  require(lay.conditions() / "manifest.json", "stage-1 outputs (run `geoworld gen-conditions` before stage 2)");
  check_manifest_hash(read_json(lay.conditions() / "manifest.json"), cfg, lay.conditions());
  std::vector<TrainSample> samples;
  for (const auto& e : entries) {
    const fs::path cdir = lay.conditions() / e.name;
    require(cdir / "views.gwtn", "stage-1 outputs for " + e.name + " (run `geoworld gen-conditions`)");
    const LoadedPair p = load_pair(cfg, out, e);
    samples.push_back(stage2_sample(p, io::load_tensor(cdir / "views.gwtn"),
                                    decode_features(io::read_file(cdir / "geo.gwgf"), (cdir / "geo.gwgf").string())));
  }
  return samples;
}

/// Stage-2 parameters: the stage-1 backbone with freshly initialized adapter.
inline DenoiserParams stage2_init(const PipelineConfig& cfg, const DenoiserParams& stage1, std::uint64_t seed) {
  DenoiserParams p = DenoiserParams::init(cfg.denoiser(ConditionMode::FullFrameGeo, derive_seed(seed, "init2")));
  copy_backbone(stage1, p);
  return p;
}

inline TrainReport train_stage2_in_memory(const PipelineConfig& cfg, const DenoiserParams& stage1, const std::vector<TrainSample>& samples,
                                          std::uint64_t seed, int steps, const Logger& log = {}, const std::string& label = "stage2") {
  const GeoEncoderParams gp = GeoEncoderParams::init(cfg.geo());
  TrainConfig tc{steps, cfg.lr_stage2, cfg.momentum, cfg.lambda, cfg.max_grad_norm, derive_seed(seed, "train2")};
  TrainReport rep;
  TrainState st = train(samples, tc, stage2_init(cfg, stage1, seed), gp, &rep.log, progress(log, label, cfg.log_every, steps));
  rep.params = std::move(st.params);
  return rep;
}

inline TrainReport cmd_train(const PipelineConfig& base, int stage, std::uint64_t seed, const fs::path& out, const Overrides& ov = {},
                             const Logger& log = {}) {
  PipelineConfig cfg = base;
  ov.apply(cfg);
  if (stage != 1 && stage != 2) throw ValidationError("stage", "must be 1 or 2");
  const Layout lay{out};
  const Dataset ds = load_dataset(cfg, out);
  const auto train_entries = ds.split(false);
  if (train_entries.empty()) throw ValidationError("train_scenes", "dataset has no training pairs");
  const GeoEncoderParams gp = GeoEncoderParams::init(cfg.geo());
  TrainReport rep;

  if (stage == 1) {
    std::vector<TrainSample> samples;
    for (const auto& e : train_entries) samples.push_back(stage1_sample(load_pair(cfg, out, e), gp));
    const int steps = ov.steps.value_or(cfg.steps_stage1);
    TrainConfig tc{steps, cfg.lr_stage1, cfg.momentum, 0.0, cfg.max_grad_norm, derive_seed(seed, "train1")};
    TrainState st = train(samples, tc, DenoiserParams::init(cfg.denoiser(ConditionMode::SingleFrameGeo, derive_seed(seed, "init1"))), gp,
                          &rep.log, progress(log, "stage1", cfg.log_every, steps));
    rep.dir = lay.stage1();
    rep.params = std::move(st.params);
    save_stage(rep.dir, cfg, rep.params, 1, st.step, rep.log, json{{"seed", seed}, {"lambda", 0.0}});
    return rep;
  }

  const Checkpoint s1 = load_stage(lay.stage1(), cfg, cfg.denoiser(ConditionMode::SingleFrameGeo, 0),
                                   "stage-1 (stage 2 requires a trained stage 1; run `geoworld train --stage 1`)");
  const auto samples = stage2_samples(cfg, out, train_entries);
  const int steps = ov.steps.value_or(cfg.steps_stage2);
  TrainReport r2 = train_stage2_in_memory(cfg, s1.params, samples, seed, steps, log);
  r2.dir = lay.stage2(ov.tag);
  save_stage(r2.dir, cfg, r2.params, 2, static_cast<std::uint64_t>(steps), r2.log,
             json{{"seed", seed},
                  {"lambda", cfg.lambda},
                  {"discard_ratio", cfg.discard_ratio},
                  {"use_adapter", cfg.use_adapter},
                  {"use_weighting", cfg.use_weighting}});
  return r2;
}

// ---------------------------------------------------------------------------
// Condition generation
// ---------------------------------------------------------------------------

struct GenReport {
  std::vector<std::string> videos;
};

inline std::uint64_t condition_seed(std::uint64_t seed, const std::string& name) { return derive_seed(seed, "condition/" + name); }

inline GenReport cmd_gen_conditions(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& out, const Logger& log = {}) {
  cfg.validate();
  const Layout lay{out};
  const Dataset ds = load_dataset(cfg, out);
  const Checkpoint s1 = load_stage(lay.stage1(), cfg, cfg.denoiser(ConditionMode::SingleFrameGeo, 0), "stage-1");
  const GeoEncoderParams gp = GeoEncoderParams::init(cfg.geo());
  GenReport rep;
  json files;
  for (const auto& e : ds.entries) {
    const LoadedPair p = load_pair(cfg, out, e);
    const TrainSample s = stage1_sample(p, gp);
    const Tensor views = sample(s.cond_views, s.cond_mask, s.geo, s1.params, condition_seed(seed, e.name));
    const GeoFeatures g = encode(views, gp);
    const std::string vb = io::encode_tensor(views), gb = encode_features(g);
    io::write_file(lay.conditions() / e.name / "views.gwtn", vb);
    io::write_file(lay.conditions() / e.name / "geo.gwgf", gb);
    io::write_file(lay.conditions() / e.name / "view_last.png", io::encode_png(frame_of(views, views.dim(0) - 1)));
    files[e.name] = {{"views", io::hex64(io::hash_bytes(vb))}, {"geo", io::hex64(io::hash_bytes(gb))}};
    rep.videos.push_back(e.name);
    if (log) log("gen-conditions: " + e.name + " (PSNR vs target " + std::to_string(psnr(views, p.target)) + " dB)");
  }
  write_json(lay.conditions() / "manifest.json", json{{"config_hash", cfg.hash_hex()}, {"seed", seed}, {"videos", files}});
  return rep;
}

// ---------------------------------------------------------------------------
// Evaluation and inference
// ---------------------------------------------------------------------------

/// Mean geometry-alignment term over samples and a fixed set of (t, eps)
/// draws; identical draws for every model evaluated with the same seed.
inline double mean_geometry_loss(const DenoiserParams& prm, const std::vector<TrainSample>& samples, const GeoEncoderParams& gp, int draws,
                                 std::uint64_t seed) {
  SeededRng rng(derive_seed(seed, "eval-geo"));
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& smp : samples)
    for (int k = 0; k < draws; ++k) {
      const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(prm.config.timesteps)));
      const Tensor eps = rng.normal_tensor(smp.target.shape());
      s += loss_at(prm, smp, gp, 0.0, t, eps, {false, false}).terms.geo;
      ++n;
    }
  return s / static_cast<double>(n);
}

struct SceneResult {
  std::string name;
  MetricReport metrics;
  double sample_l_geo = 0.0;  // G(prediction) vs G(target)
  double condition_psnr = 0.0;
};

struct InferReport {
  fs::path dir;
  std::vector<SceneResult> scenes;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double mean_l_geo = 0.0;         // objective's geometry term on held-out pairs
  double mean_sample_l_geo = 0.0;  // on sampled videos
};

struct InferOptions {
  std::string tag;                          // reads stage2-<tag>, writes infer-<tag>
  std::optional<std::uint64_t> scene_seed;  // custom scene instead of the held-out split
  std::optional<std::string> trajectory;
  bool allow_overlap = false;
  bool write_artifacts = true;
};

inline DenoiserConfig stage2_config_from_manifest(const PipelineConfig& cfg, const json& m) {
  PipelineConfig c = cfg;
  c.discard_ratio = m.value("discard_ratio", cfg.discard_ratio);
  c.use_adapter = m.value("use_adapter", cfg.use_adapter);
  c.use_weighting = m.value("use_weighting", cfg.use_weighting);
  return c.denoiser(ConditionMode::FullFrameGeo, 0);
}

/// Samples the stage-2 model for one prepared pair and scores it.
inline SceneResult run_scene(const std::string& name, const LoadedPair& p, const Tensor& views, const GeoFeatures& views_geo,
                             const DenoiserParams& s2, const GeoEncoderParams& gp, std::uint64_t seed, const fs::path* dir) {
  Tensor ones(p.mask.shape(), 1.0);
  const Tensor pred = sample(views, ones, views_geo, s2, derive_seed(seed, "infer/" + name));
  SceneResult r;
  r.name = name;
  r.metrics = evaluate(pred, p.target);
  r.sample_l_geo = geometry_loss(encode(pred, gp), p.target_geo);
  r.condition_psnr = psnr(views, p.target);
  if (dir) {
    for (std::size_t f = 0; f < pred.dim(0); ++f) {
      char fname[32];
      std::snprintf(fname, sizeof fname, "frame_%02zu.png", f);
      io::write_file(*dir / fname, io::encode_png(frame_of(pred, f)));
    }
    io::write_file(*dir / "prediction.gwtn", io::encode_tensor(pred));
    io::write_file(*dir / "cloud.gwpc", encode_cloud(reconstruct(pred, p.depth, p.trajectory)));
    io::write_file(*dir / "metrics.csv", metrics_csv(r.metrics));
  }
  return r;
}

inline std::string infer_summary_csv(const InferReport& r) {
  std::string out = "scene,psnr_db,ssim,sample_l_geo,condition_psnr_db\n";
  for (const auto& s : r.scenes) {
    out += s.name + "," + io::csv_double(s.metrics.mean_psnr) + "," + io::csv_double(s.metrics.mean_ssim) + "," +
           io::csv_double(s.sample_l_geo) + "," + io::csv_double(s.condition_psnr) + "\n";
  }
  out += "mean," + io::csv_double(r.mean_psnr) + "," + io::csv_double(r.mean_ssim) + "," + io::csv_double(r.mean_sample_l_geo) + ",\n";
  out += "eval_l_geo," + io::csv_double(r.mean_l_geo) + ",,,\n";
  return out;
}

/// Evaluates stage-2 parameters on the held-out split (conditions from gen-conditions).
inline InferReport evaluate_heldout(const PipelineConfig& cfg, const fs::path& out, const DenoiserParams& s2, std::uint64_t seed,
                                    const fs::path* write_dir, const Logger& log = {}) {
  const Dataset ds = load_dataset(cfg, out);
  const auto held = ds.split(true);
  if (held.empty()) throw ValidationError("heldout_scenes", "dataset has no held-out pairs");
  const GeoEncoderParams gp = GeoEncoderParams::init(cfg.geo());
  const auto samples = stage2_samples(cfg, out, held);
  InferReport rep;
  for (std::size_t i = 0; i < held.size(); ++i) {
    const LoadedPair p = load_pair(cfg, out, held[i]);
    fs::path dir;
    if (write_dir) dir = *write_dir / held[i].name;
    rep.scenes.push_back(run_scene(held[i].name, p, samples[i].cond_views, samples[i].geo, s2, gp, seed, write_dir ? &dir : nullptr));
    rep.mean_psnr += rep.scenes.back().metrics.mean_psnr;
    rep.mean_ssim += rep.scenes.back().metrics.mean_ssim;
    rep.mean_sample_l_geo += rep.scenes.back().sample_l_geo;
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "infer: %s  PSNR %.3f dB  SSIM %.4f  (condition %.3f dB)", held[i].name.c_str(),
                    rep.scenes.back().metrics.mean_psnr, rep.scenes.back().metrics.mean_ssim, rep.scenes.back().condition_psnr);
      log(buf);
    }
  }
  const double n = static_cast<double>(rep.scenes.size());
  rep.mean_psnr /= n;
  rep.mean_ssim /= n;
  rep.mean_sample_l_geo /= n;
  rep.mean_l_geo = mean_geometry_loss(s2, samples, gp, cfg.eval_draws, seed);
  return rep;
}

inline InferReport cmd_infer(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& out, const InferOptions& opt = {},
                             const Logger& log = {}) {
  cfg.validate();
  const Layout lay{out};
  const fs::path s2dir = lay.stage2(opt.tag);
  require(s2dir / "manifest.json", "stage-2 model (run `geoworld train --stage 2`)");
  const json m = read_json(s2dir / "manifest.json");
  check_manifest_hash(m, cfg, s2dir);
  const Checkpoint s2 = load_stage(s2dir, cfg, stage2_config_from_manifest(cfg, m), "stage-2");
  const fs::path dir = lay.infer(opt.tag);

  if (!opt.scene_seed) {
    InferReport rep = evaluate_heldout(cfg, out, s2.params, seed, opt.write_artifacts ? &dir : nullptr, log);
    rep.dir = dir;
    if (opt.write_artifacts) io::write_file(dir / "summary.csv", infer_summary_csv(rep));
    return rep;
  }

  // Custom scene: build the pair, complete it with stage 1, then run stage 2.
  const Dataset ds = load_dataset(cfg, out);
  for (const auto& e : ds.split(false)) {
    if (e.scene_seed == *opt.scene_seed && !opt.allow_overlap) {
      throw ValidationError("scene_seed", "scene seed " + std::to_string(*opt.scene_seed) + " is a training scene (" + e.name +
                                              "); pass --allow-overlap to evaluate it anyway");
    }
  }
  const SyntheticScene scene = generate_scene(*opt.scene_seed);
  const Trajectory traj = opt.trajectory ? parse_trajectory_spec(*opt.trajectory, cfg) : scene_trajectory(cfg, *opt.scene_seed);
  const auto h = static_cast<std::size_t>(cfg.height), w = static_cast<std::size_t>(cfg.width);
  const TrainingPair tp = build_training_pair(scene, traj, h, w, 0, cfg.splat_radius);
  const GeoEncoderParams gp = GeoEncoderParams::init(cfg.geo());
  LoadedPair p;
  p.entry = {"scene_" + std::to_string(*opt.scene_seed), false, *opt.scene_seed};
  p.trajectory = traj;
  p.condition = tp.condition_input;
  p.mask = tp.condition_mask;
  p.target = tp.target;
  p.depth = tp.target_depth;
  p.target_geo = encode(tp.target, gp);
  const Checkpoint s1 = load_stage(lay.stage1(), cfg, cfg.denoiser(ConditionMode::SingleFrameGeo, 0), "stage-1");
  const TrainSample s = stage1_sample(p, gp);
  const Tensor views = sample(s.cond_views, s.cond_mask, s.geo, s1.params, condition_seed(seed, p.entry.name));
  const GeoFeatures vg = encode(views, gp);
  const fs::path sdir = dir / p.entry.name;
  InferReport rep;
  rep.dir = dir;
  rep.scenes.push_back(run_scene(p.entry.name, p, views, vg, s2.params, gp, seed, opt.write_artifacts ? &sdir : nullptr));
  rep.mean_psnr = rep.scenes[0].metrics.mean_psnr;
  rep.mean_ssim = rep.scenes[0].metrics.mean_ssim;
  rep.mean_sample_l_geo = rep.scenes[0].sample_l_geo;
  rep.mean_l_geo = mean_geometry_loss(s2.params, {stage2_sample(p, views, vg)}, gp, cfg.eval_draws, seed);
  if (opt.write_artifacts) {
    io::write_file(sdir / "trajectory.json", trajectory_to_json(traj));
    io::write_file(dir / "summary.csv", infer_summary_csv(rep));
  }
  if (log) log("infer: " + p.entry.name + " PSNR " + std::to_string(rep.mean_psnr) + " dB");
  return rep;
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

struct AblationVariant {
  std::string name;
  bool gal = false;
  bool resize = false;
  bool weighting = false;
};

inline std::vector<AblationVariant> ablation_variants() {
  return {{"base", false, false, false}, {"+GAL", true, false, false}, {"+GAL+resize", true, true, false}, {"+GAL+weighting", true, true, true}};
}

inline const std::vector<double>& ablation_ratios() {
  static const std::vector<double> r{0.3, 0.5, 0.7};
  return r;
}

struct AblationRow {
  std::string config;
  double ratio = 0.0;  // 0 for variants that keep every token
  std::uint64_t seed = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double mean_l_geo = 0.0;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "config,ratio,seed,psnr_db,ssim,mean_l_geo\n";
  for (const auto& r : rows) {
    char ratio[16];
    std::snprintf(ratio, sizeof ratio, "%.1f", r.ratio);
    out += r.config + "," + ratio + "," + std::to_string(r.seed) + "," + io::csv_double(r.psnr_db) + "," + io::csv_double(r.ssim) + "," +
           io::csv_double(r.mean_l_geo) + "\n";
  }
  return out;
}

struct AblationReport {
  fs::path csv;
  std::vector<AblationRow> rows;
};

/// Trains every (variant, ratio, seed) cell from the stage-1 backbone and
/// evaluates it on the held-out split. Cells run on GEOWORLD_THREADS workers;
/// results are ordered by cell index so the report does not depend on timing.
inline AblationReport cmd_ablate(const PipelineConfig& cfg, std::uint64_t seed, const fs::path& out, const Overrides& ov = {},
                                 const Logger& log = {}) {
  cfg.validate();
  const Layout lay{out};
  const Dataset ds = load_dataset(cfg, out);
  const auto train_entries = ds.split(false);
  if (train_entries.size() < 4) throw ValidationError("train_scenes", "ablation needs at least 4 training pairs");
  const Checkpoint s1 = load_stage(lay.stage1(), cfg, cfg.denoiser(ConditionMode::SingleFrameGeo, 0), "stage-1");
  const auto samples = stage2_samples(cfg, out, train_entries);
  const int steps = ov.steps.value_or(cfg.ablation_steps);
  const double lambda = ov.lambda.value_or(cfg.lambda);

  struct Cell {
    AblationVariant v;
    double ratio;
    int k;
  };
  std::vector<Cell> cells;
  for (const auto& v : ablation_variants()) {
    const std::vector<double> ratios = v.weighting ? ablation_ratios() : std::vector<double>{0.0};
    for (double r : ratios)
      for (int k = 0; k < cfg.ablation_seeds; ++k) cells.push_back({v, r, k});
  }

  std::vector<AblationRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      try {
        const Cell& c = cells[i];
        PipelineConfig cc = cfg;
        cc.lambda = c.v.gal ? lambda : 0.0;
        cc.use_adapter = c.v.resize;
        cc.use_weighting = c.v.weighting;
        cc.discard_ratio = c.ratio;
        const std::uint64_t cell_seed = derive_seed(seed, "ablate/" + std::to_string(c.k));
        TrainReport tr = train_stage2_in_memory(cc, s1.params, samples, cell_seed, steps);
        char cell[64];
        std::snprintf(cell, sizeof cell, "%s-r%.1f-s%d", c.v.name.c_str(), c.ratio, c.k);
        io::write_file(lay.ablation() / cell / "loss.csv", loss_csv(tr.log));
        // Same evaluation seed for every cell so differences come from training only.
        const InferReport ev = evaluate_heldout(cc, out, tr.params, seed, nullptr);
        rows[i] = {c.v.name, c.ratio, cell_seed, ev.mean_psnr, ev.mean_ssim, ev.mean_l_geo};
        if (log) {
          std::lock_guard<std::mutex> lk(log_mu);
          char buf[200];
          std::snprintf(buf, sizeof buf, "ablate: %-15s ratio %.1f seed#%d  PSNR %.3f  SSIM %.4f  L_geo %.5f", c.v.name.c_str(), c.ratio, c.k,
                        ev.mean_psnr, ev.mean_ssim, ev.mean_l_geo);
          log(buf);
        }
      } catch (...) {
        std::lock_guard<std::mutex> lk(log_mu);
        if (!failure) failure = std::current_exception();
        next = cells.size();
      }
    }
  };
  const int nthreads = std::min<int>(worker_threads(), static_cast<int>(cells.size()));
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  AblationReport rep;
  rep.rows = std::move(rows);
  rep.csv = lay.ablation() / "ablation.csv";
  io::write_file(rep.csv, ablation_csv(rep.rows));
  return rep;
}

}  // namespace geoworld
