#pragma once

// Pixel-space video denoiser with geometry cross-attention, its training
// objective (noise regression plus geometry feature alignment of the one-step
// clean estimate) and ancestral sampling.
//
// Layout of one forward pass:
//   per-pixel inputs [x_t | condition views | mask] -> patch tokens (F frames)
//   -> learned temporal pooling to Fl latent frames, + position + timestep
//   -> blocks of {frame-local self-attention, cross-attention to the
//      geometry tokens of the same latent frame (relative position bias),
//      MLP}, pre-norm residual
//   -> nearest-frame unpooling back to F frames, + per-frame skip tokens
//   -> output projection, unpatchify, plus a per-channel scaled noise proxy.
// The output projection and the proxy scales start at zero, so an
// untrained model predicts zero noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "geoworld/autodiff.hpp"
#include "geoworld/geoadapt.hpp"
#include "geoworld/geoencoder.hpp"
#include "geoworld/io.hpp"
#include "geoworld/numerics.hpp"

namespace geoworld {

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas_bar;

  int steps() const { return static_cast<int>(betas.size()); }

  /// Linear betas from 1e-4 to 0.02, rescaled so that T steps destroy the
  /// signal about as much as the classic 1000-step schedule.
  static NoiseSchedule linear(int t_steps) {
    if (t_steps < 2) throw InvalidArgument("noise schedule needs at least 2 steps");
    const double scale = 1000.0 / static_cast<double>(t_steps);
    const double b0 = 1e-4 * scale, b1 = std::min(0.02 * scale, 0.999);
    NoiseSchedule s;
    double prod = 1.0;
    for (int t = 0; t < t_steps; ++t) {
      const double b = b0 + (b1 - b0) * static_cast<double>(t) / static_cast<double>(t_steps - 1);
      s.betas.push_back(b);
      prod *= 1.0 - b;
      s.alphas_bar.push_back(prod);
    }
    return s;
  }

  void check_step(int t) const {
    if (t < 0 || t >= steps()) throw InvalidArgument("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
  }
};

inline Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  sched.check_step(t);
  if (x0.shape() != eps.shape()) throw InvalidShape("forward_noise: noise shape differs from x0");
  const double a = std::sqrt(sched.alphas_bar[static_cast<std::size_t>(t)]);
  const double s = std::sqrt(1.0 - sched.alphas_bar[static_cast<std::size_t>(t)]);
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + s * eps[i];
  return out;
}

inline constexpr double kX0Min = -0.1;
inline constexpr double kX0Max = 1.1;

inline void check_alpha_bar(double ab) {
  if (!(ab > 1e-12)) throw DegenerateStep("predict_x0: alpha_bar too small to invert");
}

/// Unclamped clean-signal estimate.
inline Tensor predict_x0_raw(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
  sched.check_step(t);
  const double ab = sched.alphas_bar[static_cast<std::size_t>(t)];
  check_alpha_bar(ab);
  if (x_t.shape() != eps_hat.shape()) throw InvalidShape("predict_x0: shape mismatch");
  const double s = std::sqrt(1.0 - ab), inv = 1.0 / std::sqrt(ab);
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (x_t[i] - s * eps_hat[i]) * inv;
  return out;
}

inline Tensor predict_x0(const Tensor& x_t, const Tensor& eps_hat, int t, const NoiseSchedule& sched) {
  Tensor out = predict_x0_raw(x_t, eps_hat, t, sched);
  for (auto& v : out.data()) v = std::clamp(v, kX0Min, kX0Max);
  return out;
}

// ---------------------------------------------------------------------------
// Cross-attention with relative position bias
// ---------------------------------------------------------------------------

/// Learned bias over clamped (drow, dcol) offsets of a grid_h x grid_w token grid.
struct BiasTable {
  std::size_t grid_h = 1, grid_w = 1;

  std::size_t size() const { return (2 * grid_h - 1) * (2 * grid_w - 1); }

  std::size_t index(const GridCoord& q, const GridCoord& k) const {
    const long mh = static_cast<long>(grid_h) - 1, mw = static_cast<long>(grid_w) - 1;
    const long dr = std::clamp(static_cast<long>(q.row) - k.row, -mh, mh);
    const long dc = std::clamp(static_cast<long>(q.col) - k.col, -mw, mw);
    return static_cast<std::size_t>((dr + mh) * (2 * mw + 1) + (dc + mw));
  }
};

struct CrossAttention {
  Tensor output;  // [Pq, dv]
  Tensor probs;   // [Pq, Pk]
};

/// softmax(Q K^T / sqrt(d) + B) V for one frame, with B looked up from the
/// table by the original grid coordinates of each query and key.
inline CrossAttention cross_attend(const Tensor& queries, const Tensor& keys, const Tensor& values,
                                   const std::vector<GridCoord>& q_grid, const std::vector<GridCoord>& k_grid,
                                   const BiasTable& layout, const Tensor& table) {
  if (queries.rank() != 2 || keys.rank() != 2 || values.rank() != 2) throw InvalidShape("cross_attend expects rank-2 inputs");
  const std::size_t nq = queries.dim(0), nk = keys.dim(0), d = queries.dim(1);
  if (nk == 0) throw InvalidShape("cross_attend: empty key set");
  if (keys.dim(1) != d || values.dim(0) != nk) throw InvalidShape("cross_attend: key/value shape mismatch");
  if (q_grid.size() != nq || k_grid.size() != nk) throw InvalidShape("cross_attend: grid coordinates do not match token counts");
  if (table.size() != layout.size()) throw InvalidShape("cross_attend: bias table size mismatch");
  Tensor logits({nq, nk});
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < nq; ++i)
    for (std::size_t j = 0; j < nk; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += queries.at(i, c) * keys.at(j, c);
      logits.at(i, j) = s * scale + table[layout.index(q_grid[i], k_grid[j])];
    }
  CrossAttention out{Tensor({nq, values.dim(1)}), softmax_rows(logits)};
  ad::kernel::gemm_nn(out.probs.data().data(), values.data().data(), out.output.data().data(), nq, nk, values.dim(1));
  return out;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

enum class ConditionMode { SingleFrameGeo, FullFrameGeo };

inline const char* to_string(ConditionMode m) { return m == ConditionMode::SingleFrameGeo ? "single_frame_geo" : "full_frame_geo"; }

struct DenoiserConfig {
  int frames = 17;
  int latent_frames = 5;
  int height = 48;
  int width = 80;
  int patch = 8;
  int model_dim = 64;
  int blocks = 2;
  int timesteps = 100;
  int geo_dim = 32;
  int adapter_hidden = 64;
  int predictor_hidden = 32;
  ConditionMode mode = ConditionMode::SingleFrameGeo;
  bool use_adapter = true;    // resize + MLP adapter (full-frame mode)
  bool use_weighting = true;  // global weighting + discard (full-frame mode)
  double discard_ratio = 0.5;
  std::uint64_t seed = 1;

  std::size_t grid_h() const { return static_cast<std::size_t>(height / patch); }
  std::size_t grid_w() const { return static_cast<std::size_t>(width / patch); }
  std::size_t patches() const { return grid_h() * grid_w(); }

  void validate() const {
    if (frames < 1 || latent_frames < 1 || latent_frames > frames) throw InvalidArgument("denoiser: need 1 <= latent_frames <= frames");
    if (patch < 1 || height % patch || width % patch) throw InvalidArgument("denoiser: image not divisible by patch");
    if (model_dim < 1 || blocks < 0 || geo_dim < 1) throw InvalidArgument("denoiser: sizes must be positive");
    check_ratio(discard_ratio);
  }
};

struct DenoiserBlock {
  Tensor ln1_g, ln1_b, sq, sk, sv, so;
  Tensor ln2_g, ln2_b, cq, ck, cv, co;
  Tensor ln3_g, ln3_b, w1, b1, w2, b2;

  template <class Fn>
  void visit(Fn&& fn) {
    for (Tensor* t : {&ln1_g, &ln1_b, &sq, &sk, &sv, &so, &ln2_g, &ln2_b, &cq, &ck, &cv, &co, &ln3_g, &ln3_b, &w1, &b1, &w2, &b2}) fn(*t);
  }
};

struct DenoiserParams {
  DenoiserConfig config;
  Tensor w_in, b_in, temporal_pool, pos, frame_emb, temb;
  std::vector<DenoiserBlock> blocks;
  Tensor bias_table;
  Tensor geo_w, geo_b;  // shared linear map for raw geometry tokens
  AdapterParams adapter;
  Tensor ln_out_g, ln_out_b, w_out, b_out, skip;

  template <class Fn>
  void visit(Fn&& fn) {
    for (Tensor* t : {&w_in, &b_in, &temporal_pool, &pos, &frame_emb, &temb}) fn(*t);
    for (auto& b : blocks) b.visit(fn);
    fn(bias_table);
    fn(geo_w);
    fn(geo_b);
    adapter.visit(fn);
    for (Tensor* t : {&ln_out_g, &ln_out_b, &w_out, &b_out, &skip}) fn(*t);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    const_cast<DenoiserParams*>(this)->visit([&](Tensor& t) { fn(static_cast<const Tensor&>(t)); });
  }

  std::size_t tensor_count() const {
    std::size_t n = 0;
    visit([&](const Tensor&) { ++n; });
    return n;
  }

  BiasTable bias_layout() const { return {config.grid_h(), config.grid_w()}; }

  static DenoiserParams init(const DenoiserConfig& cfg) {
    cfg.validate();
    SeededRng rng(derive_seed(cfg.seed, "denoiser"));
    const auto d = static_cast<std::size_t>(cfg.model_dim);
    const auto p = static_cast<std::size_t>(cfg.patch);
    const auto f = static_cast<std::size_t>(cfg.frames), fl = static_cast<std::size_t>(cfg.latent_frames);
    const auto tt = static_cast<std::size_t>(cfg.timesteps);
    auto dense = [&](std::size_t in, std::size_t out) { return rng.normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in))); };
    auto ones = [](std::size_t n) { return Tensor({n}, 1.0); };

    DenoiserParams m;
    m.config = cfg;
    m.w_in = dense(7 * p * p, d);
    m.b_in = Tensor({d});
    m.temporal_pool = frame_pool_matrix(f, fl);
    m.pos = rng.normal_tensor({cfg.patches(), d}, 0.1);
    m.frame_emb = rng.normal_tensor({f, d}, 0.1);
    m.temb = Tensor({tt, d});
    for (std::size_t t = 0; t < tt; ++t)
      for (std::size_t i = 0; i < d / 2; ++i) {
        const double freq = std::pow(1000.0, -static_cast<double>(i) / static_cast<double>(std::max<std::size_t>(1, d / 2)));
        m.temb.at(t, 2 * i) = std::sin(static_cast<double>(t) * freq);
        m.temb.at(t, 2 * i + 1) = std::cos(static_cast<double>(t) * freq);
      }
    for (int b = 0; b < cfg.blocks; ++b) {
      DenoiserBlock blk;
      blk.ln1_g = ones(d);
      blk.ln1_b = Tensor({d});
      blk.sq = dense(d, d);
      blk.sk = dense(d, d);
      blk.sv = dense(d, d);
      blk.so = dense(d, d);
      blk.ln2_g = ones(d);
      blk.ln2_b = Tensor({d});
      blk.cq = dense(d, d);
      blk.ck = dense(d, d);
      blk.cv = dense(d, d);
      blk.co = Tensor({d, d});  // conditioning starts as a no-op
      blk.ln3_g = ones(d);
      blk.ln3_b = Tensor({d});
      blk.w1 = dense(d, 2 * d);
      blk.b1 = Tensor({2 * d});
      blk.w2 = dense(2 * d, d);
      blk.b2 = Tensor({d});
      m.blocks.push_back(std::move(blk));
    }
    m.bias_table = Tensor({m.bias_layout().size()});
    m.geo_w = dense(static_cast<std::size_t>(cfg.geo_dim), d);
    m.geo_b = Tensor({d});
    m.adapter = AdapterParams::init({cfg.geo_dim, cfg.adapter_hidden, cfg.model_dim, cfg.predictor_hidden}, derive_seed(cfg.seed, "adapter"));
    m.ln_out_g = ones(d);
    m.ln_out_b = Tensor({d});
    m.w_out = Tensor({d, 3 * p * p});
    m.b_out = Tensor({3 * p * p});
    m.skip = Tensor({3});
    return m;
  }
};

/// Copies every shared tensor of `from` into `to` (the adapter excepted),
/// used to start the full-frame model from the trained single-frame one.
inline void copy_backbone(const DenoiserParams& from, DenoiserParams& to) {
  std::vector<const Tensor*> src;
  const_cast<DenoiserParams&>(from).visit([&](Tensor& t) { src.push_back(&t); });
  std::vector<Tensor*> dst;
  to.visit([&](Tensor& t) { dst.push_back(&t); });
  if (src.size() != dst.size()) throw InvalidShape("copy_backbone: parameter layouts differ");
  std::vector<const Tensor*> skip_src;
  const_cast<DenoiserParams&>(from).adapter.visit([&](Tensor& t) { skip_src.push_back(&t); });
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (std::find(skip_src.begin(), skip_src.end(), src[i]) != skip_src.end()) continue;
    if (src[i]->shape() != dst[i]->shape()) throw InvalidShape("copy_backbone: parameter shapes differ");
    *dst[i] = *src[i];
  }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Geometry tokens ready for cross-attention: rows of `tokens` grouped by
/// latent frame as described by `segments` (key ranges), with grid coordinates.
struct CondGraph {
  ad::Var tokens;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;  // per latent frame [begin, end)
  std::vector<GridCoord> coords;                            // per token row
  std::vector<std::vector<std::size_t>> kept_index;         // per latent frame (full-frame mode)
  ad::Var weights;                                          // [N, 1] when weighting is on
};

inline void check_condition(const DenoiserConfig& cfg, const GeoFeatures& geo) {
  if (geo.tokens.rank() != 3 || geo.dim() != static_cast<std::size_t>(cfg.geo_dim)) {
    throw InvalidArgument("denoise: geometry tokens must be [F, P, " + std::to_string(cfg.geo_dim) + "]");
  }
  if (cfg.mode == ConditionMode::SingleFrameGeo && geo.frames() != 1) {
    throw InvalidArgument("denoise: single-frame mode expects geometry features of exactly one frame");
  }
  if (cfg.mode == ConditionMode::FullFrameGeo && geo.frames() < static_cast<std::size_t>(cfg.latent_frames)) {
    throw InvalidArgument("denoise: full-frame mode expects geometry features for every frame");
  }
}

/// Builds the cross-attention token set from geometry tokens `g` ([Fg*Pg, Dg] on the tape).
inline CondGraph condition_graph(ad::Var g, const GeoFeatures& meta, const DenoiserParams& prm, ad::ParamBinding& bind) {
  const auto& cfg = prm.config;
  check_condition(cfg, meta);
  const std::size_t fl = static_cast<std::size_t>(cfg.latent_frames);
  const std::size_t pg = meta.patches();
  CondGraph out;

  if (cfg.mode == ConditionMode::SingleFrameGeo) {
    out.tokens = ad::add_row(ad::matmul(g, bind(prm.geo_w)), bind(prm.geo_b));
    out.coords = meta.grid;
    for (std::size_t l = 0; l < fl; ++l) out.ranges.push_back({0, pg});
    return out;
  }

  ad::Var tok;
  std::size_t per_frame = 0;
  if (cfg.use_adapter) {
    const Tensor k = resize_matrix(meta.frames(), meta.grid_h, meta.grid_w, fl, cfg.grid_h(), cfg.grid_w());
    ad::Var resized = ad::matmul(bind.tape().constant(k), g);
    tok = adapt_var(resized, prm.adapter, bind);
    per_frame = cfg.patches();
    const auto grid = full_grid(cfg.grid_h(), cfg.grid_w());
    for (std::size_t l = 0; l < fl; ++l) out.coords.insert(out.coords.end(), grid.begin(), grid.end());
  } else {
    // Without resizing, each latent frame reads the geometry of the middle source frame of its pooling bucket.
    std::vector<std::size_t> rows;
    for (std::size_t l = 0; l < fl; ++l) {
      const auto [b, e] = pool_bucket(l, meta.frames(), fl);
      const std::size_t src = (b + e - 1) / 2;
      for (std::size_t i = 0; i < pg; ++i) rows.push_back(src * pg + i);
      out.coords.insert(out.coords.end(), meta.grid.begin(), meta.grid.end());
    }
    tok = ad::add_row(ad::matmul(ad::gather_rows(g, rows), bind(prm.geo_w)), bind(prm.geo_b));
    per_frame = pg;
  }

  const std::size_t dm = static_cast<std::size_t>(cfg.model_dim);
  if (!cfg.use_weighting) {
    out.tokens = tok;
    for (std::size_t l = 0; l < fl; ++l) {
      out.ranges.push_back({l * per_frame, (l + 1) * per_frame});
      std::vector<std::size_t> all(per_frame);
      std::iota(all.begin(), all.end(), 0);
      out.kept_index.push_back(std::move(all));
    }
    return out;
  }

  out.weights = global_weights_var(tok, prm.adapter, bind);
  const std::size_t n = fl * per_frame;
  std::vector<std::size_t> spread(n * dm);
  for (std::size_t i = 0; i < spread.size(); ++i) spread[i] = i / dm;
  ad::Var weighted = ad::mul(tok, ad::gather(out.weights, std::move(spread), {n, dm}));
  const Tensor& wv = ad::val(out.weights);
  std::vector<std::size_t> rows;
  std::vector<GridCoord> coords;
  for (std::size_t l = 0; l < fl; ++l) {
    const auto kept = kept_indices(wv.data().subspan(l * per_frame, per_frame), cfg.discard_ratio);
    const std::size_t begin = rows.size();
    for (std::size_t k : kept) {
      rows.push_back(l * per_frame + k);
      coords.push_back(out.coords[l * per_frame + k]);
    }
    out.ranges.push_back({begin, rows.size()});
    out.kept_index.push_back(kept);
  }
  out.tokens = ad::gather_rows(weighted, rows);
  out.coords = std::move(coords);
  return out;
}

/// Per-channel noise proxy: the noise that would explain x_t if the clean
/// video were the condition views (x_t itself where the mask is empty).
inline Tensor noise_proxy(const Tensor& x_t, const Tensor& cond, const Tensor& mask, double alpha_bar) {
  const std::size_t f = x_t.dim(0), h = x_t.dim(2), w = x_t.dim(3);
  const double sa = std::sqrt(alpha_bar), inv = 1.0 / std::sqrt(1.0 - alpha_bar);
  Tensor out(x_t.shape());
  for (std::size_t fr = 0; fr < f; ++fr)
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < h * w; ++i) {
        const std::size_t at = (fr * 3 + c) * h * w + i;
        const double m = mask[fr * h * w + i];
        const double x0 = m * cond[at] + (1.0 - m) * x_t[at];
        out[at] = (x_t[at] - sa * x0) * inv;
      }
  return out;
}

struct DenoiseInputs {
  const Tensor* cond_views = nullptr;  // [F,3,H,W]
  const Tensor* cond_mask = nullptr;   // [F,1,H,W]
  const GeoFeatures* geo = nullptr;
};

/// Records the denoiser on the tape; `x_t` is a flat [F,3,H,W] video and `g`
/// the geometry tokens [Fg*Pg, Dg]. Returns eps_hat with the shape of x_t.
inline ad::Var denoise_graph(ad::Var x_t, int t, const DenoiseInputs& in, ad::Var g, const DenoiserParams& prm, ad::ParamBinding& bind,
                             CondGraph* cond_out = nullptr) {
  const auto& cfg = prm.config;
  const std::size_t f = static_cast<std::size_t>(cfg.frames), fl = static_cast<std::size_t>(cfg.latent_frames);
  const std::size_t h = static_cast<std::size_t>(cfg.height), w = static_cast<std::size_t>(cfg.width);
  const std::size_t p = static_cast<std::size_t>(cfg.patch), np = cfg.patches();
  const std::size_t dm = static_cast<std::size_t>(cfg.model_dim);
  const Shape vshape{f, 3, h, w};
  if (ad::val(x_t).shape() != vshape || in.cond_views->shape() != vshape || in.cond_mask->shape() != Shape{f, 1, h, w}) {
    throw InvalidArgument("denoise: inputs must be [" + std::to_string(f) + ",3," + std::to_string(h) + "," + std::to_string(w) +
                          "] with a matching [F,1,H,W] mask, got " + shape_str(ad::val(x_t).shape()));
  }
  if (t < 0 || t >= cfg.timesteps) throw InvalidArgument("denoise: timestep out of range");
  ad::Tape& tape = *x_t.tape;

  // Input tokens.
  const std::size_t n = f * np;
  ad::Var px = ad::gather(x_t, patch_indices(f, 3, h, w, p), {n, 3 * p * p});
  ad::Var pc = tape.constant(ad::val(ad::gather(tape.constant(*in.cond_views), patch_indices(f, 3, h, w, p), {n, 3 * p * p})));
  ad::Var pm = tape.constant(ad::val(ad::gather(tape.constant(*in.cond_mask), patch_indices(f, 1, h, w, p), {n, p * p})));
  ad::Var e = ad::add_row(ad::matmul(ad::concat_cols({px, pc, pm}), bind(prm.w_in)), bind(prm.b_in));

  // Temporal pooling to latent frames.
  ad::Var hcur = ad::reshape(ad::matmul(bind(prm.temporal_pool), ad::reshape(e, {f, np * dm})), {fl * np, dm});
  std::vector<std::size_t> tile(fl * np);
  for (std::size_t i = 0; i < tile.size(); ++i) tile[i] = i % np;
  hcur = ad::add(hcur, ad::gather_rows(bind(prm.pos), tile));
  hcur = ad::add(hcur, ad::gather_rows(bind(prm.temb), std::vector<std::size_t>(fl * np, static_cast<std::size_t>(t))));

  // Conditioning tokens and attention layouts.
  CondGraph cond = condition_graph(g, *in.geo, prm, bind);
  std::vector<ad::AttentionSegment> self_segs, cross_segs;
  for (std::size_t l = 0; l < fl; ++l) {
    self_segs.push_back({l * np, (l + 1) * np, l * np, (l + 1) * np});
    cross_segs.push_back({l * np, (l + 1) * np, cond.ranges[l].first, cond.ranges[l].second});
  }
  const BiasTable layout = prm.bias_layout();
  const auto qgrid = full_grid(cfg.grid_h(), cfg.grid_w());
  std::vector<std::size_t> bias_idx;
  for (std::size_t l = 0; l < fl; ++l)
    for (std::size_t q = 0; q < np; ++q)
      for (std::size_t k = cond.ranges[l].first; k < cond.ranges[l].second; ++k) bias_idx.push_back(layout.index(qgrid[q], cond.coords[k]));
  const std::size_t nb = bias_idx.size();
  ad::Var bias = ad::gather(bind(prm.bias_table), std::move(bias_idx), {nb});
  const double scale = 1.0 / std::sqrt(static_cast<double>(dm));

  for (const auto& blk : prm.blocks) {
    ad::Var a = ad::layer_norm(hcur, bind(blk.ln1_g), bind(blk.ln1_b));
    ad::Var att = ad::attention(ad::matmul(a, bind(blk.sq)), ad::matmul(a, bind(blk.sk)), ad::matmul(a, bind(blk.sv)), self_segs, ad::Var{}, scale);
    hcur = ad::add(hcur, ad::matmul(att, bind(blk.so)));

    ad::Var c = ad::layer_norm(hcur, bind(blk.ln2_g), bind(blk.ln2_b));
    ad::Var xatt = ad::attention(ad::matmul(c, bind(blk.cq)), ad::matmul(cond.tokens, bind(blk.ck)), ad::matmul(cond.tokens, bind(blk.cv)),
                                 cross_segs, bias, scale);
    hcur = ad::add(hcur, ad::matmul(xatt, bind(blk.co)));

    ad::Var m = ad::layer_norm(hcur, bind(blk.ln3_g), bind(blk.ln3_b));
    ad::Var mlp = ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(m, bind(blk.w1)), bind(blk.b1))), bind(blk.w2)), bind(blk.b2));
    hcur = ad::add(hcur, mlp);
  }

  // Back to full frame rate.
  std::vector<std::size_t> unpool(n), frame_rows(n);
  for (std::size_t fr = 0; fr < f; ++fr) {
    std::size_t l = 0;
    while (pool_bucket(l, f, fl).second <= fr) ++l;
    for (std::size_t i = 0; i < np; ++i) {
      unpool[fr * np + i] = l * np + i;
      frame_rows[fr * np + i] = fr;
    }
  }
  ad::Var z = ad::add(ad::add(ad::gather_rows(hcur, unpool), e), ad::gather_rows(bind(prm.frame_emb), frame_rows));
  ad::Var o = ad::add_row(ad::matmul(ad::layer_norm(z, bind(prm.ln_out_g), bind(prm.ln_out_b)), bind(prm.w_out)), bind(prm.b_out));
  ad::Var pix = ad::gather(o, unpatch_indices(f, 3, h, w, p), vshape);

  // Scaled noise proxy.
  const double ab = NoiseSchedule::linear(cfg.timesteps).alphas_bar[static_cast<std::size_t>(t)];
  Tensor proxy = noise_proxy(ad::val(x_t), *in.cond_views, *in.cond_mask, ab);
  std::vector<std::size_t> chan(proxy.size());
  for (std::size_t i = 0; i < chan.size(); ++i) chan[i] = (i / (h * w)) % 3;
  ad::Var sk = ad::gather(bind(prm.skip), std::move(chan), vshape);
  ad::Var eps = ad::add(pix, ad::mul(sk, tape.constant(std::move(proxy))));
  if (cond_out) *cond_out = std::move(cond);
  return eps;
}

inline ad::Var geo_tokens_var(ad::Tape& tape, const GeoFeatures& geo) {
  return tape.constant(geo.tokens.reshaped({geo.frames() * geo.patches(), geo.dim()}));
}

inline Tensor denoise(const Tensor& x_t, int t, const Tensor& cond_views, const Tensor& cond_mask, const GeoFeatures& geo,
                      const DenoiserParams& prm) {
  ad::Tape tape;
  ad::ParamBinding bind(tape, false);
  ad::Var eps = denoise_graph(tape.constant(x_t), t, {&cond_views, &cond_mask, &geo}, geo_tokens_var(tape, geo), prm, bind);
  return ad::val(eps);
}

/// The token set the model cross-attends to (full-frame mode: c_geo per latent frame).
inline ConditionTokens condition_tokens(const GeoFeatures& geo, const DenoiserParams& prm) {
  ad::Tape tape;
  ad::ParamBinding bind(tape, false);
  CondGraph g = condition_graph(geo_tokens_var(tape, geo), geo, prm, bind);
  const Tensor& v = ad::val(g.tokens);
  const std::size_t d = v.dim(1);
  ConditionTokens out;
  for (std::size_t l = 0; l < g.ranges.size(); ++l) {
    const auto [b, e] = g.ranges[l];
    Tensor t({e - b, d});
    std::copy(v.data().begin() + static_cast<std::ptrdiff_t>(b * d), v.data().begin() + static_cast<std::ptrdiff_t>(e * d), t.data().begin());
    out.tokens.push_back(std::move(t));
    out.kept_grid.emplace_back(g.coords.begin() + static_cast<std::ptrdiff_t>(b), g.coords.begin() + static_cast<std::ptrdiff_t>(e));
    out.kept_index.push_back(l < g.kept_index.size() ? g.kept_index[l] : std::vector<std::size_t>{});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// One training example: the video to produce, what the model sees, and the
/// cached geometry features of the target.
struct TrainSample {
  Tensor target;       // [F,3,H,W]
  Tensor cond_views;   // [F,3,H,W]
  Tensor cond_mask;    // [F,1,H,W]
  GeoFeatures geo;     // condition geometry (one frame in single-frame mode)
  Tensor target_geo;   // G(target) tokens [F*P, D]
};

struct LossTerms {
  double total = 0.0;
  double diff = 0.0;
  double geo = 0.0;
};

struct LossResult {
  LossTerms terms;
  std::vector<Tensor> grads;      // denoiser gradients in visit order
  std::vector<Tensor> geo_grads;  // geometry-encoder gradients, when requested
};

struct LossOptions {
  bool gradients = true;
  /// Also differentiate with respect to the (frozen) geometry encoder;
  /// G(target) is then recomputed on the tape instead of read from the cache.
  bool geo_param_grads = false;
};

inline LossResult loss_at(const DenoiserParams& prm, const TrainSample& s, const GeoEncoderParams& geo_params, double lambda, int t,
                          const Tensor& eps, const LossOptions& opts = {}) {
  if (!(lambda >= 0.0)) throw InvalidArgument("lambda must be non-negative");
  const NoiseSchedule sched = NoiseSchedule::linear(prm.config.timesteps);
  sched.check_step(t);
  const double ab = sched.alphas_bar[static_cast<std::size_t>(t)];
  check_alpha_bar(ab);

  ad::Tape tape;
  ad::ParamBinding bind(tape, opts.gradients);
  ad::ParamBinding gbind(tape, opts.gradients && opts.geo_param_grads);
  const Tensor x_t = forward_noise(s.target, t, eps, sched);
  ad::Var xv = tape.constant(x_t);
  ad::Var eps_hat = denoise_graph(xv, t, {&s.cond_views, &s.cond_mask, &s.geo}, geo_tokens_var(tape, s.geo), prm, bind);
  ad::Var l_diff = ad::mse(eps_hat, eps);

  ad::Var x0 = ad::scale(ad::sub(xv, ad::scale(eps_hat, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
  x0 = ad::clamp(x0, kX0Min, kX0Max);
  const std::size_t f = s.target.dim(0);
  ad::Var g_pred = geo_forward(x0, f, geo_params, gbind);
  ad::Var l_geo;
  if (opts.geo_param_grads) {
    l_geo = ad::mse(g_pred, geo_forward(tape.constant(s.target), f, geo_params, gbind));
  } else {
    l_geo = ad::mse(g_pred, s.target_geo);
  }
  ad::Var total = ad::add(l_diff, ad::scale(l_geo, lambda));

  LossResult r;
  r.terms = {ad::val(total)[0], ad::val(l_diff)[0], ad::val(l_geo)[0]};
  if (opts.gradients) {
    tape.backward(total);
    prm.visit([&](const Tensor& p) { r.grads.push_back(bind.grad(p)); });
    if (opts.geo_param_grads) geo_params.visit([&](const Tensor& p) { r.geo_grads.push_back(gbind.grad(p)); });
  }
  return r;
}

/// Draws t and eps from rng, then evaluates the objective.
inline LossResult loss(const DenoiserParams& prm, const TrainSample& s, const GeoEncoderParams& geo_params, double lambda, SeededRng& rng,
                       const LossOptions& opts = {}) {
  const int t = static_cast<int>(rng.below(static_cast<std::uint64_t>(prm.config.timesteps)));
  const Tensor eps = rng.normal_tensor(s.target.shape());
  return loss_at(prm, s, geo_params, lambda, t, eps, opts);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  int steps = 100;
  double lr = 5e-4;
  double momentum = 0.9;
  double lambda = 0.0;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::uint64_t seed = 1;
};

struct LossRecord {
  std::uint64_t step = 0;
  LossTerms terms;
};

struct TrainState {
  DenoiserParams params;
  std::vector<Tensor> velocity;
  std::uint64_t step = 0;
  SeededRng rng;
  double lambda = 0.0;
};

using StepCallback = std::function<void(const LossRecord&)>;

inline TrainState train(const std::vector<TrainSample>& data, const TrainConfig& cfg, DenoiserParams init, const GeoEncoderParams& geo_params,
                        std::vector<LossRecord>* log = nullptr, const StepCallback& on_step = {}) {
  if (data.empty()) throw InvalidArgument("train: empty dataset");
  if (!(cfg.lambda >= 0.0)) throw InvalidArgument("train: lambda must be non-negative");
  TrainState st{std::move(init), {}, 0, SeededRng(derive_seed(cfg.seed, "train")), cfg.lambda};
  st.params.visit([&](const Tensor& p) { st.velocity.emplace_back(p.shape()); });

  for (int s = 0; s < cfg.steps; ++s) {
    const std::size_t idx = static_cast<std::size_t>(st.rng.below(data.size()));
    LossResult r = loss(st.params, data[idx], geo_params, st.lambda, st.rng);
    double scale = 1.0;
    if (cfg.max_grad_norm > 0.0) {
      double sq = 0.0;
      for (const auto& g : r.grads)
        for (double v : g.data()) sq += v * v;
      const double norm = std::sqrt(sq);
      if (norm > cfg.max_grad_norm) scale = cfg.max_grad_norm / norm;
    }
    std::size_t k = 0;
    st.params.visit([&](Tensor& p) {
      Tensor& v = st.velocity[k];
      const Tensor& g = r.grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = cfg.momentum * v[i] + scale * g[i];
        p[i] -= cfg.lr * v[i];
      }
      ++k;
    });
    ++st.step;
    LossRecord rec{st.step, r.terms};
    if (log) log->push_back(rec);
    if (on_step) on_step(rec);
  }
  return st;
}

inline std::string loss_csv(const std::vector<LossRecord>& log) {
  std::string out = "step,L,L_diff,L_geo\n";
  for (const auto& r : log) {
    out += std::to_string(r.step) + "," + io::csv_double(r.terms.total) + "," + io::csv_double(r.terms.diff) + "," +
           io::csv_double(r.terms.geo) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Ancestral sampling from pure noise using the clamped clean estimate at every step.
inline Tensor sample(const Tensor& cond_views, const Tensor& cond_mask, const GeoFeatures& geo, const DenoiserParams& prm, std::uint64_t seed) {
  const auto& cfg = prm.config;
  const NoiseSchedule sched = NoiseSchedule::linear(cfg.timesteps);
  SeededRng rng(derive_seed(seed, "sample"));
  const Shape shape{static_cast<std::size_t>(cfg.frames), 3, static_cast<std::size_t>(cfg.height), static_cast<std::size_t>(cfg.width)};
  Tensor x = rng.normal_tensor(shape);
  for (int t = cfg.timesteps - 1; t >= 0; --t) {
    const Tensor eps_hat = denoise(x, t, cond_views, cond_mask, geo, prm);
    const Tensor x0 = predict_x0(x, eps_hat, t, sched);
    if (t == 0) {
      x = x0;
      break;
    }
    const auto ti = static_cast<std::size_t>(t);
    const double ab = sched.alphas_bar[ti], ab_prev = sched.alphas_bar[ti - 1], beta = sched.betas[ti];
    const double c0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = c0 * x0[i] + ct * x[i] + sigma * rng.normal();
  }
  for (auto& v : x.data()) v = std::clamp(v, 0.0, 1.0);
  return x;
}

// ---------------------------------------------------------------------------
// Checkpoint: "GWCK", u64 config hash, u32 stage, u64 step, then
// length-prefixed f64 arrays in visit order.
// ---------------------------------------------------------------------------

inline std::string encode_checkpoint(const DenoiserParams& prm, std::uint64_t config_hash, std::uint32_t stage, std::uint64_t step) {
  io::ByteWriter w;
  w.magic("GWCK");
  w.u64(config_hash);
  w.u32(stage);
  w.u64(step);
  prm.visit([&](const Tensor& t) { w.array(t.data()); });
  return w.bytes();
}

struct Checkpoint {
  DenoiserParams params;
  std::uint64_t config_hash = 0;
  std::uint32_t stage = 0;
  std::uint64_t step = 0;
};

/// Restores parameters into the layout given by `cfg`; a differing config hash is rejected.
inline Checkpoint decode_checkpoint(std::string bytes, const DenoiserConfig& cfg, std::uint64_t expected_hash,
                                    const std::string& source = "<checkpoint>") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic("GWCK");
  Checkpoint ck;
  ck.config_hash = r.u64();
  if (ck.config_hash != expected_hash) {
    throw ConfigHashError(source + ": checkpoint config hash " + io::hex64(ck.config_hash) + " does not match " + io::hex64(expected_hash));
  }
  ck.stage = r.u32();
  ck.step = r.u64();
  ck.params = DenoiserParams::init(cfg);
  ck.params.visit([&](Tensor& t) {
    auto data = r.array();
    if (data.size() != t.size()) throw FormatError(source + ": parameter array size mismatch");
    t = Tensor(t.shape(), std::move(data));
  });
  if (!r.at_end()) throw FormatError(source + ": trailing bytes");
  return ck;
}

}  // namespace geoworld
