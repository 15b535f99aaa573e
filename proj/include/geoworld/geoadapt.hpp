#pragma once

// Geometry adaptation: geometry tokens are pooled/interpolated onto the
// denoiser's token grid, passed through an MLP adapter, weighted by an
// SE-style predictor that sees each token next to the mean of all tokens,
// and the lowest-weighted tokens of every frame are dropped.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "geoworld/autodiff.hpp"
#include "geoworld/geoencoder.hpp"
#include "geoworld/numerics.hpp"

namespace geoworld {

struct AdapterConfig {
  int geo_dim = 32;
  int hidden = 64;
  int model_dim = 64;
  int predictor_hidden = 32;
};

struct AdapterParams {
  AdapterConfig config;
  Tensor w1, b1, w2, b2;    // adapter: geo_dim -> hidden -> model_dim
  Tensor p1, pb1, p2, pb2;  // predictor: 2*model_dim -> predictor_hidden -> 1

  template <class Fn>
  void visit(Fn&& fn) {
    for (Tensor* t : {&w1, &b1, &w2, &b2, &p1, &pb1, &p2, &pb2}) fn(*t);
  }

  static AdapterParams init(const AdapterConfig& cfg, std::uint64_t seed) {
    if (cfg.geo_dim < 1 || cfg.hidden < 1 || cfg.model_dim < 1 || cfg.predictor_hidden < 1) {
      throw InvalidArgument("adapter: sizes must be positive");
    }
    SeededRng rng(derive_seed(seed, "adapter"));
    const auto dg = static_cast<std::size_t>(cfg.geo_dim), dh = static_cast<std::size_t>(cfg.hidden);
    const auto dm = static_cast<std::size_t>(cfg.model_dim), dp = static_cast<std::size_t>(cfg.predictor_hidden);
    auto dense = [&](std::size_t in, std::size_t out) { return rng.normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in))); };
    AdapterParams p;
    p.config = cfg;
    p.w1 = dense(dg, dh);
    p.b1 = Tensor({dh});
    p.w2 = dense(dh, dm);
    p.b2 = Tensor({dm});
    p.p1 = dense(2 * dm, dp);
    p.pb1 = Tensor({dp});
    p.p2 = dense(dp, 1);
    p.pb2 = Tensor({1});
    return p;
  }
};

struct ConditionTokens {
  std::vector<Tensor> tokens;                       // per frame [kept, D_model]
  std::vector<std::vector<GridCoord>> kept_grid;    // per frame, original coordinates
  std::vector<std::vector<std::size_t>> kept_index; // per frame, flat grid index (ascending)

  std::size_t frames() const { return tokens.size(); }
  std::size_t kept_count(std::size_t f) const { return kept_index.at(f).size(); }
};

// ---------------------------------------------------------------------------
// Resize
// ---------------------------------------------------------------------------

inline Tensor resize_features(const GeoFeatures& g, std::size_t target_f, std::size_t target_hp, std::size_t target_wp) {
  if (!g.is_rectangular()) throw InvalidShape("resize_features requires a full rectangular token grid");
  const std::size_t d = g.dim();
  const Tensor pooled = frame_mean_pool(g.tokens, target_f);
  Tensor out({target_f, target_hp * target_wp, d});
  for (std::size_t f = 0; f < target_f; ++f) {
    Tensor img({d, g.grid_h, g.grid_w});
    for (std::size_t p = 0; p < g.patches(); ++p)
      for (std::size_t c = 0; c < d; ++c) img[c * g.patches() + p] = pooled[(f * g.patches() + p) * d + c];
    const Tensor r = bilinear_resize(img, target_hp, target_wp);
    const std::size_t tp = target_hp * target_wp;
    for (std::size_t p = 0; p < tp; ++p)
      for (std::size_t c = 0; c < d; ++c) out[(f * tp + p) * d + c] = r[c * tp + p];
  }
  return out;
}

/// Dense [tF*tP, F*P] matrix M with resize_features(g) == M * g (rows are tokens).
inline Tensor resize_matrix(std::size_t f, std::size_t hp, std::size_t wp, std::size_t tf, std::size_t thp, std::size_t twp) {
  const Tensor a = frame_pool_matrix(f, tf);
  const Tensor b = bilinear_matrix(hp, wp, thp, twp);
  const std::size_t p = hp * wp, tp = thp * twp;
  Tensor m({tf * tp, f * p});
  for (std::size_t i = 0; i < tf; ++i)
    for (std::size_t k = 0; k < f; ++k) {
      const double av = a.at(i, k);
      if (av == 0.0) continue;
      for (std::size_t r = 0; r < tp; ++r)
        for (std::size_t c = 0; c < p; ++c) m.at(i * tp + r, k * p + c) = av * b.at(r, c);
    }
  return m;
}

// ---------------------------------------------------------------------------
// Adapter and predictor (tape versions are used inside the denoiser)
// ---------------------------------------------------------------------------

/// Rows of g are tokens [N, geo_dim]; returns [N, model_dim].
inline ad::Var adapt_var(ad::Var g, const AdapterParams& p, ad::ParamBinding& bind) {
  ad::Var h = ad::gelu(ad::add_row(ad::matmul(g, bind(p.w1)), bind(p.b1)));
  return ad::add_row(ad::matmul(h, bind(p.w2)), bind(p.b2));
}

/// Predictor logits [N, 1] for adapted tokens [N, model_dim].
inline ad::Var global_logits_var(ad::Var g_ada, const AdapterParams& p, ad::ParamBinding& bind) {
  const std::size_t n = ad::val(g_ada).dim(0);
  if (n == 0) throw InvalidShape("global_weights on zero tokens");
  Tensor avg({1, n});
  for (auto& v : avg.data()) v = 1.0 / static_cast<double>(n);
  ad::Var desc = ad::matmul(bind.tape().constant(std::move(avg)), g_ada);  // [1, D]
  ad::Var tiled = ad::gather_rows(desc, std::vector<std::size_t>(n, 0));
  ad::Var in = ad::concat_cols({g_ada, tiled});
  ad::Var h = ad::gelu(ad::add_row(ad::matmul(in, bind(p.p1)), bind(p.pb1)));
  return ad::add_row(ad::matmul(h, bind(p.p2)), bind(p.pb2));
}

inline ad::Var global_weights_var(ad::Var g_ada, const AdapterParams& p, ad::ParamBinding& bind) {
  return ad::sigmoid(global_logits_var(g_ada, p, bind));
}

inline void check_last_dim(const Tensor& t, std::size_t d, const char* what) {
  if (t.rank() < 1 || t.shape().back() != d) {
    throw InvalidShape(std::string(what) + ": last dimension must be " + std::to_string(d) + ", got " + shape_str(t.shape()));
  }
}

/// Per-token MLP; input [..., geo_dim] -> [..., model_dim].
inline Tensor adapt(const Tensor& g_resize, const AdapterParams& p) {
  check_last_dim(g_resize, static_cast<std::size_t>(p.config.geo_dim), "adapt");
  const std::size_t n = g_resize.size() / static_cast<std::size_t>(p.config.geo_dim);
  ad::Tape tape;
  ad::ParamBinding bind(tape, false);
  ad::Var out = adapt_var(tape.constant(g_resize.reshaped({n, static_cast<std::size_t>(p.config.geo_dim)})), p, bind);
  Shape s = g_resize.shape();
  s.back() = static_cast<std::size_t>(p.config.model_dim);
  return ad::val(out).reshaped(s);
}

/// Logits for g_ada [Fl, Pl, model_dim]; returns [Fl, Pl].
inline Tensor global_logits(const Tensor& g_ada, const AdapterParams& p) {
  check_last_dim(g_ada, static_cast<std::size_t>(p.config.model_dim), "global_weights");
  if (g_ada.rank() != 3 || g_ada.dim(1) < 1) throw InvalidShape("global_weights expects [Fl, Pl>=1, D]");
  const std::size_t fl = g_ada.dim(0), pl = g_ada.dim(1);
  ad::Tape tape;
  ad::ParamBinding bind(tape, false);
  ad::Var out = global_logits_var(tape.constant(g_ada.reshaped({fl * pl, g_ada.dim(2)})), p, bind);
  return ad::val(out).reshaped({fl, pl});
}

inline Tensor weights_from_logits(const Tensor& logits) {
  Tensor w(logits.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = ad::sigmoid_value(logits[i]);
  return w;
}

inline Tensor global_weights(const Tensor& g_ada, const AdapterParams& p) { return weights_from_logits(global_logits(g_ada, p)); }

// ---------------------------------------------------------------------------
// Selection
// ---------------------------------------------------------------------------

inline void check_ratio(double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw InvalidArgument("discard ratio must lie in [0, 1)");
}

/// floor(ratio * n), robust to ratios like 0.7 that are not exact in binary.
inline std::size_t discard_count(std::size_t n, double ratio) {
  check_ratio(ratio);
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

/// Indices kept after discarding the floor(ratio*n) smallest weights; ties
/// discard the lower index first. Returned in ascending index order.
inline std::vector<std::size_t> kept_indices(std::span<const double> weights, double ratio) {
  const std::size_t n = weights.size();
  const std::size_t drop = discard_count(n, ratio);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return weights[a] < weights[b]; });
  std::vector<std::size_t> kept(order.begin() + static_cast<std::ptrdiff_t>(drop), order.end());
  std::sort(kept.begin(), kept.end());
  return kept;
}

/// Multiplies every token by its weight and drops the lowest-weighted tokens
/// of each frame independently.
inline ConditionTokens select_tokens(const Tensor& g_ada, const Tensor& weights, double ratio, const std::vector<GridCoord>& grid) {
  check_ratio(ratio);
  if (g_ada.rank() != 3 || weights.rank() != 2 || weights.dim(0) != g_ada.dim(0) || weights.dim(1) != g_ada.dim(1)) {
    throw InvalidShape("select_tokens: weights must be [Fl, Pl] matching tokens [Fl, Pl, D]");
  }
  const std::size_t fl = g_ada.dim(0), pl = g_ada.dim(1), d = g_ada.dim(2);
  if (grid.size() != pl) throw InvalidShape("select_tokens: grid size must equal Pl");
  ConditionTokens out;
  for (std::size_t f = 0; f < fl; ++f) {
    const auto kept = kept_indices(weights.data().subspan(f * pl, pl), ratio);
    Tensor t({kept.size(), d});
    std::vector<GridCoord> coords;
    for (std::size_t k = 0; k < kept.size(); ++k) {
      const double w = weights[f * pl + kept[k]];
      for (std::size_t c = 0; c < d; ++c) t[k * d + c] = w * g_ada[(f * pl + kept[k]) * d + c];
      coords.push_back(grid[kept[k]]);
    }
    out.tokens.push_back(std::move(t));
    out.kept_grid.push_back(std::move(coords));
    out.kept_index.push_back(kept);
  }
  return out;
}

}  // namespace geoworld
