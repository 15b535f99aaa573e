#pragma once

// Miniature frozen geometry model: patch tokens refined by a pre-norm
// transformer whose layers alternate between attention inside each frame and
// attention across every token of the video.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "geoworld/autodiff.hpp"
#include "geoworld/io.hpp"
#include "geoworld/numerics.hpp"

namespace geoworld {

struct GridCoord {
  int row = 0;
  int col = 0;
  friend bool operator==(const GridCoord&, const GridCoord&) = default;
};

inline std::vector<GridCoord> full_grid(std::size_t hp, std::size_t wp) {
  std::vector<GridCoord> g;
  g.reserve(hp * wp);
  for (std::size_t r = 0; r < hp; ++r)
    for (std::size_t c = 0; c < wp; ++c) g.push_back({static_cast<int>(r), static_cast<int>(c)});
  return g;
}

struct GeoFeatures {
  Tensor tokens;  // [F, P, D]
  std::vector<GridCoord> grid;  // per patch, row-major
  std::size_t grid_h = 0, grid_w = 0;
  int patch_size = 0;

  std::size_t frames() const { return tokens.dim(0); }
  std::size_t patches() const { return tokens.dim(1); }
  std::size_t dim() const { return tokens.dim(2); }

  bool is_rectangular() const {
    return grid.size() == grid_h * grid_w && tokens.rank() == 3 && tokens.dim(1) == grid.size() && grid == full_grid(grid_h, grid_w);
  }

  friend bool operator==(const GeoFeatures&, const GeoFeatures&) = default;
};

// ---------------------------------------------------------------------------
// Patch tokenization
// ---------------------------------------------------------------------------

/// Flat gather indices turning a [F, C, H, W] video into [F*P, C*p*p] patch
/// rows. Rows are frame-major then row-major over the patch grid; columns
/// are channel, then in-patch row, then in-patch column.
inline std::vector<std::size_t> patch_indices(std::size_t frames, std::size_t channels, std::size_t h, std::size_t w, std::size_t p) {
  if (p == 0 || h % p != 0 || w % p != 0) {
    throw InvalidShape("image " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " + std::to_string(p));
  }
  const std::size_t hp = h / p, wp = w / p;
  std::vector<std::size_t> idx;
  idx.reserve(frames * channels * h * w);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t r = 0; r < hp; ++r)
      for (std::size_t c = 0; c < wp; ++c)
        for (std::size_t ch = 0; ch < channels; ++ch)
          for (std::size_t dy = 0; dy < p; ++dy)
            for (std::size_t dx = 0; dx < p; ++dx)
              idx.push_back(((f * channels + ch) * h + r * p + dy) * w + c * p + dx);
  return idx;
}

/// Inverse of patch_indices: flat position in the patch matrix for each video element.
inline std::vector<std::size_t> unpatch_indices(std::size_t frames, std::size_t channels, std::size_t h, std::size_t w, std::size_t p) {
  const auto fwd = patch_indices(frames, channels, h, w, p);
  std::vector<std::size_t> inv(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) inv[fwd[i]] = i;
  return inv;
}

/// Non-overlapping patches of a [F, 3, H, W] video projected to [F, P, D].
inline Tensor patchify(const Tensor& video, std::size_t patch, const Tensor& proj, const Tensor* bias = nullptr) {
  if (video.rank() != 4) throw InvalidShape("patchify expects [F,C,H,W]");
  const std::size_t f = video.dim(0), c = video.dim(1), h = video.dim(2), w = video.dim(3);
  const auto idx = patch_indices(f, c, h, w, patch);
  const std::size_t pd = c * patch * patch;
  if (proj.rank() != 2 || proj.dim(0) != pd) throw InvalidShape("patchify: projection must be [C*p*p, D]");
  ad::Tape tape;
  ad::Var x = ad::gather(tape.constant(video), idx, {f * (h / patch) * (w / patch), pd});
  ad::Var y = ad::matmul(x, tape.constant(proj));
  if (bias) y = ad::add_row(y, tape.constant(*bias));
  return ad::val(y).reshaped({f, (h / patch) * (w / patch), proj.dim(1)});
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct GeoEncoderConfig {
  int layers = 4;
  int dim = 32;
  int patch = 8;
  int height = 48;
  int width = 80;
  std::uint64_t seed = 7;

  std::size_t grid_h() const { return static_cast<std::size_t>(height / patch); }
  std::size_t grid_w() const { return static_cast<std::size_t>(width / patch); }
  std::size_t patches() const { return grid_h() * grid_w(); }

  friend bool operator==(const GeoEncoderConfig&, const GeoEncoderConfig&) = default;
};

struct GeoLayer {
  bool global = false;
  Tensor ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;

  template <class Fn>
  void visit(Fn&& fn) {
    for (Tensor* t : {&ln1_g, &ln1_b, &wq, &wk, &wv, &wo, &ln2_g, &ln2_b, &w1, &b1, &w2, &b2}) fn(*t);
  }
};

struct GeoEncoderParams {
  GeoEncoderConfig config;
  Tensor proj_w, proj_b, pos;
  std::vector<GeoLayer> layers;

  template <class Fn>
  void visit(Fn&& fn) {
    fn(proj_w);
    fn(proj_b);
    fn(pos);
    for (auto& l : layers) l.visit(fn);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    const_cast<GeoEncoderParams*>(this)->visit([&](Tensor& t) { fn(static_cast<const Tensor&>(t)); });
  }

  /// Seeded initialization; layer l (1-based) attends within frames when l is
  /// odd and across the whole video when l is even.
  static GeoEncoderParams init(const GeoEncoderConfig& cfg) {
    if (cfg.layers < 1 || cfg.dim < 1 || cfg.patch < 1) throw InvalidArgument("geometry encoder: sizes must be positive");
    if (cfg.height % cfg.patch || cfg.width % cfg.patch) throw InvalidShape("geometry encoder: image not divisible by patch");
    SeededRng rng(derive_seed(cfg.seed, "geoencoder"));
    const std::size_t d = static_cast<std::size_t>(cfg.dim);
    const std::size_t pd = 3 * static_cast<std::size_t>(cfg.patch * cfg.patch);
    auto dense = [&](std::size_t in, std::size_t out) { return rng.normal_tensor({in, out}, 1.0 / std::sqrt(static_cast<double>(in))); };
    GeoEncoderParams p;
    p.config = cfg;
    p.proj_w = dense(pd, d);
    p.proj_b = rng.normal_tensor({d}, 0.1);
    p.pos = rng.normal_tensor({cfg.patches(), d}, 0.5);
    for (int l = 1; l <= cfg.layers; ++l) {
      GeoLayer layer;
      layer.global = (l % 2 == 0);
      layer.ln1_g = Tensor({d}, 1.0);
      layer.ln1_b = Tensor({d});
      layer.wq = dense(d, d);
      layer.wk = dense(d, d);
      layer.wv = dense(d, d);
      layer.wo = dense(d, d);
      layer.ln2_g = Tensor({d}, 1.0);
      layer.ln2_b = Tensor({d});
      layer.w1 = dense(d, 2 * d);
      layer.b1 = Tensor({2 * d});
      layer.w2 = dense(2 * d, d);
      layer.b2 = Tensor({d});
      p.layers.push_back(std::move(layer));
    }
    return p;
  }
};

struct EncodeOptions {
  /// Replace the cross-frame layers with identity (used to isolate frame-wise behaviour).
  bool skip_global = false;
};

/// Encoder forward pass on a tape. `video` holds a flat [F, 3, H, W] video;
/// returns tokens [F*P, D].
inline ad::Var geo_forward(ad::Var video, std::size_t frames, const GeoEncoderParams& params, ad::ParamBinding& bind,
                           const EncodeOptions& opts = {}) {
  const auto& cfg = params.config;
  const std::size_t h = static_cast<std::size_t>(cfg.height), w = static_cast<std::size_t>(cfg.width);
  const std::size_t p = static_cast<std::size_t>(cfg.patch);
  const std::size_t np = cfg.patches();
  const std::size_t d = static_cast<std::size_t>(cfg.dim);
  if (ad::val(video).size() != frames * 3 * h * w) {
    throw InvalidShape("geometry encoder expects " + std::to_string(frames) + "x3x" + std::to_string(h) + "x" + std::to_string(w) +
                       " video, got " + shape_str(ad::val(video).shape()));
  }
  const std::size_t n = frames * np;
  ad::Var x = ad::gather(video, patch_indices(frames, 3, h, w, p), {n, 3 * p * p});
  ad::Var hcur = ad::add_row(ad::matmul(x, bind(params.proj_w)), bind(params.proj_b));
  std::vector<std::size_t> tile(n);
  for (std::size_t i = 0; i < n; ++i) tile[i] = i % np;
  hcur = ad::add(hcur, ad::gather_rows(bind(params.pos), tile));

  std::vector<ad::AttentionSegment> per_frame;
  for (std::size_t f = 0; f < frames; ++f) per_frame.push_back({f * np, (f + 1) * np, f * np, (f + 1) * np});
  const std::vector<ad::AttentionSegment> whole{{0, n, 0, n}};
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  for (const auto& layer : params.layers) {
    if (layer.global && opts.skip_global) continue;
    ad::Var a = ad::layer_norm(hcur, bind(layer.ln1_g), bind(layer.ln1_b));
    ad::Var q = ad::matmul(a, bind(layer.wq));
    ad::Var k = ad::matmul(a, bind(layer.wk));
    ad::Var v = ad::matmul(a, bind(layer.wv));
    ad::Var att = ad::attention(q, k, v, layer.global ? whole : per_frame, ad::Var{}, scale);
    hcur = ad::add(hcur, ad::matmul(att, bind(layer.wo)));
    ad::Var m = ad::layer_norm(hcur, bind(layer.ln2_g), bind(layer.ln2_b));
    ad::Var mlp = ad::add_row(ad::matmul(ad::gelu(ad::add_row(ad::matmul(m, bind(layer.w1)), bind(layer.b1))), bind(layer.w2)),
                              bind(layer.b2));
    hcur = ad::add(hcur, mlp);
  }
  return hcur;
}

inline void check_video(const Tensor& video, const GeoEncoderConfig& cfg) {
  if (video.rank() != 4 || video.dim(1) != 3 || video.dim(2) != static_cast<std::size_t>(cfg.height) ||
      video.dim(3) != static_cast<std::size_t>(cfg.width)) {
    throw InvalidShape("geometry encoder expects [F,3," + std::to_string(cfg.height) + "," + std::to_string(cfg.width) + "], got " +
                       shape_str(video.shape()));
  }
}

inline GeoFeatures encode(const Tensor& video, const GeoEncoderParams& params, const EncodeOptions& opts = {}) {
  check_video(video, params.config);
  ad::Tape tape;
  ad::ParamBinding bind(tape, false);
  ad::Var out = geo_forward(tape.constant(video), video.dim(0), params, bind, opts);
  const auto& cfg = params.config;
  return {ad::val(out).reshaped({video.dim(0), cfg.patches(), static_cast<std::size_t>(cfg.dim)}), full_grid(cfg.grid_h(), cfg.grid_w()),
          cfg.grid_h(), cfg.grid_w(), cfg.patch};
}

/// Vector-Jacobian product of encode with respect to the input video.
inline Tensor encode_grad(const Tensor& video, const GeoEncoderParams& params, const Tensor& upstream, const EncodeOptions& opts = {}) {
  check_video(video, params.config);
  const auto& cfg = params.config;
  if (upstream.size() != video.dim(0) * cfg.patches() * static_cast<std::size_t>(cfg.dim)) {
    throw InvalidShape("encode_grad: upstream must match the token shape");
  }
  ad::Tape tape;
  ad::ParamBinding bind(tape, false);
  ad::Var in = tape.leaf(video);
  ad::Var out = geo_forward(in, video.dim(0), params, bind, opts);
  tape.backward(out, &upstream);
  return tape.has_grad(in) ? tape.grad(in) : Tensor(video.shape());
}

/// Feature alignment loss: mean squared token difference.
inline double geometry_loss(const GeoFeatures& a, const GeoFeatures& b) {
  if (a.tokens.shape() != b.tokens.shape()) throw InvalidShape("geometry_loss: token shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.tokens.size(); ++i) {
    const double d = a.tokens[i] - b.tokens[i];
    s += d * d;
  }
  return s / static_cast<double>(a.tokens.size());
}

// ---------------------------------------------------------------------------
// Checkpoint: "GWGE", u32 L, u32 D, u32 patch, u64 seed, u32 H, u32 W, then
// length-prefixed f64 arrays in declaration order.
// ---------------------------------------------------------------------------

inline std::string encode_geo_params(const GeoEncoderParams& p) {
  io::ByteWriter w;
  w.magic("GWGE");
  w.u32(static_cast<std::uint32_t>(p.config.layers));
  w.u32(static_cast<std::uint32_t>(p.config.dim));
  w.u32(static_cast<std::uint32_t>(p.config.patch));
  w.u64(p.config.seed);
  w.u32(static_cast<std::uint32_t>(p.config.height));
  w.u32(static_cast<std::uint32_t>(p.config.width));
  p.visit([&](const Tensor& t) { w.array(t.data()); });
  return w.bytes();
}

inline GeoEncoderParams decode_geo_params(std::string bytes, const std::string& source = "<geoencoder>") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic("GWGE");
  GeoEncoderConfig cfg;
  cfg.layers = static_cast<int>(r.u32());
  cfg.dim = static_cast<int>(r.u32());
  cfg.patch = static_cast<int>(r.u32());
  cfg.seed = r.u64();
  cfg.height = static_cast<int>(r.u32());
  cfg.width = static_cast<int>(r.u32());
  GeoEncoderParams p = GeoEncoderParams::init(cfg);
  p.visit([&](Tensor& t) {
    auto data = r.array();
    if (data.size() != t.size()) throw FormatError(source + ": parameter array size mismatch");
    t = Tensor(t.shape(), std::move(data));
  });
  if (!r.at_end()) throw FormatError(source + ": trailing bytes");
  return p;
}

// Cached features: "GWGF", u32 F, u32 P, u32 D, u32 grid_h, u32 grid_w, u32 patch, f64 tokens.
inline std::string encode_features(const GeoFeatures& g) {
  io::ByteWriter w;
  w.magic("GWGF");
  w.u32(static_cast<std::uint32_t>(g.frames()));
  w.u32(static_cast<std::uint32_t>(g.patches()));
  w.u32(static_cast<std::uint32_t>(g.dim()));
  w.u32(static_cast<std::uint32_t>(g.grid_h));
  w.u32(static_cast<std::uint32_t>(g.grid_w));
  w.u32(static_cast<std::uint32_t>(g.patch_size));
  w.f64s(g.tokens.data());
  return w.bytes();
}

inline GeoFeatures decode_features(std::string bytes, const std::string& source = "<features>") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic("GWGF");
  const std::size_t f = r.u32(), np = r.u32(), d = r.u32();
  GeoFeatures g;
  g.grid_h = r.u32();
  g.grid_w = r.u32();
  g.patch_size = static_cast<int>(r.u32());
  if (g.grid_h * g.grid_w != np) throw FormatError(source + ": grid does not match patch count");
  g.tokens = Tensor({f, np, d}, r.f64s(f * np * d));
  g.grid = full_grid(g.grid_h, g.grid_w);
  if (!r.at_end()) throw FormatError(source + ": trailing bytes");
  return g;
}

}  // namespace geoworld
