#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "geoworld/diffusion.hpp"
#include "geoworld/recon.hpp"

using namespace geoworld;

namespace {

DenoiserConfig toy_config(ConditionMode mode = ConditionMode::FullFrameGeo) {
  DenoiserConfig c;
  c.frames = 2;
  c.latent_frames = 2;
  c.height = 16;
  c.width = 16;
  c.patch = 8;
  c.model_dim = 8;
  c.blocks = 2;
  c.geo_dim = 8;
  c.adapter_hidden = 8;
  c.predictor_hidden = 4;
  c.mode = mode;
  c.discard_ratio = 0.5;
  c.seed = 5;
  return c;
}

GeoEncoderParams toy_geo() { return GeoEncoderParams::init({2, 8, 8, 16, 16, 7}); }

Tensor video(std::size_t f, std::uint64_t seed) {
  SeededRng rng(seed);
  Tensor v({f, 3, 16, 16});
  for (auto& x : v.data()) x = rng.uniform();
  return v;
}

// Perturbs every parameter so zero-initialized paths carry signal.
DenoiserParams perturbed(const DenoiserConfig& cfg, double sd = 0.2) {
  DenoiserParams p = DenoiserParams::init(cfg);
  SeededRng rng(77);
  p.visit([&](Tensor& t) {
    for (auto& v : t.data()) v += sd * rng.normal();
  });
  return p;
}

TrainSample toy_sample(const DenoiserConfig& cfg, const GeoEncoderParams& gp, std::uint64_t seed) {
  TrainSample s;
  s.target = video(2, seed);
  s.cond_views = video(2, seed + 1);
  s.cond_mask = Tensor({2, 1, 16, 16}, 1.0);
  for (std::size_t i = 0; i < 256; i += 3) s.cond_mask[i] = 0.0;
  const GeoFeatures g = encode(s.cond_views, gp);
  s.geo = cfg.mode == ConditionMode::SingleFrameGeo ? GeoFeatures{frame_of(g.tokens, 0).reshaped({1, 4, 8}), g.grid, 2, 2, 8} : g;
  s.target_geo = encode(s.target, gp).tokens.reshaped({8, 8});
  return s;
}

std::vector<GridCoord> coords(std::initializer_list<std::pair<int, int>> rc) {
  std::vector<GridCoord> out;
  for (auto [r, c] : rc) out.push_back({r, c});
  return out;
}

}  // namespace

TEST(Schedule, LinearEndpointsScaledToStepCount) {
  const auto s = NoiseSchedule::linear(100);
  EXPECT_NEAR(s.betas.front(), 1e-3, 1e-15);
  EXPECT_NEAR(s.betas.back(), 0.2, 1e-15);
  for (std::size_t t = 1; t < s.alphas_bar.size(); ++t) EXPECT_LT(s.alphas_bar[t], s.alphas_bar[t - 1]);
  EXPECT_THROW(NoiseSchedule::linear(1), InvalidArgument);
}

TEST(ForwardNoise, Limits) {
  NoiseSchedule s;
  s.betas = {0.0, 1.0};
  s.alphas_bar = {1.0, 0.0};
  const Tensor x0 = video(1, 1), eps = video(1, 2);
  EXPECT_EQ(forward_noise(x0, 0, eps, s), x0);
  EXPECT_EQ(forward_noise(x0, 1, eps, s), eps);
}

TEST(ForwardNoise, ClosedForm) {
  const auto s = NoiseSchedule::linear(100);
  double ab = 1.0;
  for (int t = 0; t <= 10; ++t) ab *= 1.0 - (1e-3 + (0.2 - 1e-3) * t / 99.0);
  const Tensor out = forward_noise(Tensor({1}, {0.7}), 10, Tensor({1}, {-1.3}), s);
  EXPECT_NEAR(out[0], std::sqrt(ab) * 0.7 + std::sqrt(1 - ab) * -1.3, 1e-14);
  EXPECT_THROW(forward_noise(Tensor({1}), 100, Tensor({1}), s), InvalidArgument);
}

TEST(PredictX0, InvertsForwardNoise) {
  const auto s = NoiseSchedule::linear(100);
  const Tensor x0 = video(1, 3), eps = video(1, 4);
  for (int t : {0, 10, 50, 99}) EXPECT_LT(max_abs_diff(predict_x0_raw(forward_noise(x0, t, eps, s), eps, t, s), x0), 1e-9);
}

TEST(PredictX0, FirstStepNearIdentity) {
  const auto s = NoiseSchedule::linear(100);
  const Tensor x = video(1, 5);
  EXPECT_LT(max_abs_diff(predict_x0_raw(x, Tensor(x.shape()), 0, s), x), 1e-3);
}

TEST(PredictX0, DirectFormulaAndClamp) {
  const auto s = NoiseSchedule::linear(100);
  const double ab = s.alphas_bar[40];
  const Tensor x({2}, {0.4, 3.0}), e({2}, {-0.2, -1.0});
  const Tensor raw = predict_x0_raw(x, e, 40, s);
  EXPECT_NEAR(raw[0], (0.4 + 0.2 * std::sqrt(1 - ab)) / std::sqrt(ab), 1e-14);
  EXPECT_EQ(predict_x0(x, e, 40, s)[1], kX0Max);
}

TEST(PredictX0, DegenerateAlphaBar) {
  NoiseSchedule s;
  s.betas = {1.0};
  s.alphas_bar = {0.0};
  EXPECT_THROW(predict_x0_raw(Tensor({1}), Tensor({1}), 0, s), DegenerateStep);
}

TEST(CrossAttend, SingleKeyReturnsValue) {
  SeededRng rng(1);
  const BiasTable layout{2, 2};
  const Tensor table = rng.normal_tensor({layout.size()});
  const Tensor v = rng.normal_tensor({1, 3});
  const auto r = cross_attend(rng.normal_tensor({4, 5}), rng.normal_tensor({1, 5}), v, full_grid(2, 2), coords({{1, 0}}), layout, table);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(r.output.at(i, c), v.at(0, c));
}

TEST(CrossAttend, ZeroQueryZeroBiasAveragesValues) {
  SeededRng rng(2);
  const BiasTable layout{2, 2};
  const Tensor v = rng.normal_tensor({4, 2});
  const auto r = cross_attend(Tensor({2, 3}), rng.normal_tensor({4, 3}), v, coords({{0, 0}, {1, 1}}), full_grid(2, 2), layout,
                              Tensor({layout.size()}));
  for (std::size_t c = 0; c < 2; ++c) {
    const double mean = (v.at(0, c) + v.at(1, c) + v.at(2, c) + v.at(3, c)) / 4.0;
    EXPECT_NEAR(r.output.at(0, c), mean, 1e-15);
  }
}

TEST(CrossAttend, HandEvaluatedTwoByThree) {
  const BiasTable layout{2, 2};  // offsets in [-1, 1]^2 -> 9 entries
  Tensor table({9});
  for (std::size_t i = 0; i < 9; ++i) table[i] = 0.1 * static_cast<double>(i) - 0.4;
  const Tensor q({2, 2}, {1.0, 0.0, 0.5, -1.0});
  const Tensor k({3, 2}, {1.0, 1.0, -1.0, 0.5, 0.0, 2.0});
  const Tensor v({3, 1}, {1.0, 2.0, 4.0});
  const auto qg = coords({{0, 0}, {1, 1}}), kg = coords({{0, 1}, {1, 0}, {1, 1}});
  const auto r = cross_attend(q, k, v, qg, kg, layout, table);
  for (std::size_t i = 0; i < 2; ++i) {
    double e[3], s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      const int dr = qg[i].row - kg[j].row, dc = qg[i].col - kg[j].col;
      const double b = table[static_cast<std::size_t>((dr + 1) * 3 + (dc + 1))];
      e[j] = std::exp((q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1)) / std::sqrt(2.0) + b);
      s += e[j];
    }
    EXPECT_NEAR(r.output[i], (e[0] * 1 + e[1] * 2 + e[2] * 4) / s, 1e-14);
    EXPECT_NEAR(r.probs.at(i, 0) + r.probs.at(i, 1) + r.probs.at(i, 2), 1.0, 1e-15);
  }
}

TEST(CrossAttend, StorageOrderOfKeysDoesNotMatter) {
  SeededRng rng(3);
  const BiasTable layout{3, 4};
  const Tensor table = rng.normal_tensor({layout.size()});
  const Tensor q = rng.normal_tensor({12, 4}), k = rng.normal_tensor({5, 4}), v = rng.normal_tensor({5, 3});
  const auto kg = coords({{0, 1}, {2, 3}, {1, 1}, {2, 0}, {0, 3}});
  const auto a = cross_attend(q, k, v, full_grid(3, 4), kg, layout, table);
  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor k2({5, 4}), v2({5, 3});
  std::vector<GridCoord> kg2;
  for (std::size_t j = 0; j < 5; ++j) {
    for (std::size_t c = 0; c < 4; ++c) k2.at(j, c) = k.at(perm[j], c);
    for (std::size_t c = 0; c < 3; ++c) v2.at(j, c) = v.at(perm[j], c);
    kg2.push_back(kg[perm[j]]);
  }
  const auto b = cross_attend(q, k2, v2, full_grid(3, 4), kg2, layout, table);
  EXPECT_LT(max_abs_diff(a.output, b.output), 1e-14);
}

TEST(CrossAttend, BiasIndexClampsOffsets) {
  const BiasTable layout{2, 3};
  EXPECT_EQ(layout.size(), 15u);
  EXPECT_EQ(layout.index({0, 0}, {0, 0}), 7u);
  EXPECT_EQ(layout.index({0, 0}, {5, 9}), layout.index({0, 0}, {1, 2}));
}

TEST(Denoise, ZeroInitOutputIsZero) {
  for (auto mode : {ConditionMode::SingleFrameGeo, ConditionMode::FullFrameGeo}) {
    const auto cfg = toy_config(mode);
    const auto prm = DenoiserParams::init(cfg);
    const auto s = toy_sample(cfg, toy_geo(), 1);
    const Tensor eps = denoise(video(2, 9), 30, s.cond_views, s.cond_mask, s.geo, prm);
    for (double v : eps.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Denoise, Deterministic) {
  const auto cfg = toy_config();
  const auto prm = perturbed(cfg);
  const auto s = toy_sample(cfg, toy_geo(), 2);
  const Tensor x = video(2, 10);
  EXPECT_EQ(denoise(x, 20, s.cond_views, s.cond_mask, s.geo, prm), denoise(x, 20, s.cond_views, s.cond_mask, s.geo, prm));
}

TEST(Denoise, RejectsWrongShapes) {
  const auto cfg = toy_config();
  const auto prm = DenoiserParams::init(cfg);
  const auto s = toy_sample(cfg, toy_geo(), 2);
  EXPECT_THROW(denoise(video(1, 1), 20, s.cond_views, s.cond_mask, s.geo, prm), InvalidArgument);
  EXPECT_THROW(denoise(video(2, 1), 100, s.cond_views, s.cond_mask, s.geo, prm), InvalidArgument);
}

TEST(Denoise, ConditionTokensKeepHalfPerFrame) {
  auto cfg = toy_config();
  cfg.frames = 2;
  const auto prm = perturbed(cfg);
  const auto s = toy_sample(cfg, toy_geo(), 3);
  const auto ct = condition_tokens(s.geo, prm);
  ASSERT_EQ(ct.frames(), 2u);
  for (std::size_t f = 0; f < 2; ++f) EXPECT_EQ(ct.kept_count(f), 2u);
}

TEST(Denoise, ParameterGradientsMatchFiniteDifferences) {
  const auto cfg = toy_config();
  const auto gp = toy_geo();
  DenoiserParams prm = perturbed(cfg);
  const auto s = toy_sample(cfg, gp, 4);
  SeededRng rng(5);
  const Tensor eps = rng.normal_tensor(s.target.shape());
  const auto r = loss_at(prm, s, gp, 0.2, 37, eps);
  auto value = [&]() { return loss_at(prm, s, gp, 0.2, 37, eps, {false, false}).terms.total; };
  std::vector<Tensor*> params;
  prm.visit([&](Tensor& t) { params.push_back(&t); });
  const double h = 1e-5;
  int checked = 0;
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& t = *params[k];
    for (std::size_t i = 0; i < t.size(); i += std::max<std::size_t>(1, t.size() / 3)) {
      const double x0 = t[i];
      t[i] = x0 + h;
      const double fp = value();
      t[i] = x0 - h;
      const double fm = value();
      t[i] = x0;
      const double num = (fp - fm) / (2 * h);
      const double a = r.grads[k][i];
      const double scale = std::max(std::abs(a), std::abs(num));
      if (scale >= 1e-4) {
        worst = std::max(worst, std::abs(a - num) / scale);
        ++checked;
      } else {
        EXPECT_LT(std::abs(a - num), 1e-9);
      }
    }
  }
  EXPECT_GT(checked, 30);
  EXPECT_LT(worst, 1e-5);
}

TEST(Loss, LambdaZeroIsDiffusionLoss) {
  const auto cfg = toy_config();
  const auto gp = toy_geo();
  const auto prm = perturbed(cfg);
  const auto s = toy_sample(cfg, gp, 6);
  SeededRng rng(7);
  const Tensor eps = rng.normal_tensor(s.target.shape());
  const auto r = loss_at(prm, s, gp, 0.0, 12, eps, {false, false});
  EXPECT_EQ(r.terms.total, r.terms.diff);
  EXPECT_GT(r.terms.geo, 0.0);
}

TEST(Loss, CompositionMatchesIndependentTerms) {
  const auto cfg = toy_config();
  const auto gp = toy_geo();
  const auto prm = perturbed(cfg);
  const auto s = toy_sample(cfg, gp, 8);
  SeededRng rng(9);
  const Tensor eps = rng.normal_tensor(s.target.shape());
  const int t = 25;
  const auto r = loss_at(prm, s, gp, 0.2, t, eps, {false, false});
  // Independent evaluation from the public pieces.
  const auto sched = NoiseSchedule::linear(cfg.timesteps);
  const Tensor x_t = forward_noise(s.target, t, eps, sched);
  const Tensor eps_hat = denoise(x_t, t, s.cond_views, s.cond_mask, s.geo, prm);
  double diff = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) diff += (eps_hat[i] - eps[i]) * (eps_hat[i] - eps[i]);
  diff /= static_cast<double>(eps.size());
  const GeoFeatures gpred = encode(predict_x0(x_t, eps_hat, t, sched), gp);
  const GeoFeatures gtarget = encode(s.target, gp);
  const double geo = geometry_loss(gpred, gtarget);
  EXPECT_NEAR(r.terms.diff, diff, 1e-12);
  EXPECT_NEAR(r.terms.geo, geo, 1e-12);
  EXPECT_NEAR(r.terms.total, diff + 0.2 * geo, 1e-12);
}

TEST(Loss, NegativeLambdaRejected) {
  const auto cfg = toy_config();
  const auto gp = toy_geo();
  const auto s = toy_sample(cfg, gp, 1);
  EXPECT_THROW(loss_at(DenoiserParams::init(cfg), s, gp, -0.1, 3, Tensor(s.target.shape())), InvalidArgument);
}

TEST(Train, OverfitsSinglePair) {
  const auto cfg = toy_config();
  const auto gp = toy_geo();
  const auto s = toy_sample(cfg, gp, 10);
  const DenoiserParams init = DenoiserParams::init(cfg);
  // Fixed evaluation draws so the comparison does not depend on the sampled timestep.
  auto eval = [&](const DenoiserParams& p) {
    SeededRng rng(11);
    double total = 0.0;
    for (int k = 0; k < 8; ++k) {
      const int t = static_cast<int>(rng.below(100));
      total += loss_at(p, s, gp, 0.0, t, rng.normal_tensor(s.target.shape()), {false, false}).terms.total;
    }
    return total;
  };
  std::vector<LossRecord> log;
  const auto st = train({s}, {50, 1e-3, 0.9, 0.0, 0.0, 3}, init, gp, &log);
  ASSERT_EQ(log.size(), 50u);
  EXPECT_LT(eval(st.params), eval(init));
}

TEST(Train, IdenticalSeedsIdenticalCheckpoints) {
  const auto cfg = toy_config();
  const auto gp = toy_geo();
  const auto s = toy_sample(cfg, gp, 12);
  const TrainConfig tc{5, 1e-3, 0.9, 0.2, 1.0, 4};
  const auto a = train({s}, tc, DenoiserParams::init(cfg), gp), b = train({s}, tc, DenoiserParams::init(cfg), gp);
  EXPECT_EQ(encode_checkpoint(a.params, 1, 2, a.step), encode_checkpoint(b.params, 1, 2, b.step));
  TrainConfig other = tc;
  other.seed = 5;
  const auto c = train({s}, other, DenoiserParams::init(cfg), gp);
  EXPECT_NE(encode_checkpoint(a.params, 1, 2, a.step), encode_checkpoint(c.params, 1, 2, c.step));
}

TEST(Train, LossCsvSchema) {
  const std::string csv = loss_csv({{1, {1.5, 1.0, 2.5}}});
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,L,L_diff,L_geo");
}

TEST(Sample, DeterministicWithShape) {
  auto cfg = toy_config();
  cfg.timesteps = 10;
  const auto prm = perturbed(cfg, 0.05);
  const auto s = toy_sample(cfg, toy_geo(), 13);
  const Tensor a = sample(s.cond_views, s.cond_mask, s.geo, prm, 3), b = sample(s.cond_views, s.cond_mask, s.geo, prm, 3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.shape(), (Shape{2, 3, 16, 16}));
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_NE(sample(s.cond_views, s.cond_mask, s.geo, prm, 4), a);
}

TEST(Sample, OverfitModelReproducesTarget) {
  auto cfg = toy_config();
  cfg.frames = 1;
  cfg.latent_frames = 1;
  const auto gp = toy_geo();
  TrainSample s;
  s.target = video(1, 20);
  s.cond_views = s.target;  // fully observed condition
  s.cond_mask = Tensor({1, 1, 16, 16}, 1.0);
  s.geo = encode(s.target, gp);
  s.target_geo = s.geo.tokens.reshaped({4, 8});
  const auto st = train({s}, {300, 1e-3, 0.9, 0.0, 0.0, 6}, DenoiserParams::init(cfg), gp);
  const Tensor out = sample(s.cond_views, s.cond_mask, s.geo, st.params, 1);
  EXPECT_GT(psnr(out, s.target), 25.0);
}

TEST(Checkpoint, RoundTripAndHashCheck) {
  const auto cfg = toy_config();
  const auto prm = perturbed(cfg);
  const std::string bytes = encode_checkpoint(prm, 0xABCD, 2, 17);
  const Checkpoint ck = decode_checkpoint(bytes, cfg, 0xABCD);
  EXPECT_EQ(ck.stage, 2u);
  EXPECT_EQ(ck.step, 17u);
  EXPECT_EQ(encode_checkpoint(ck.params, 0xABCD, 2, 17), bytes);
  EXPECT_THROW(decode_checkpoint(bytes, cfg, 0xABCE), ConfigHashError);
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 1), cfg, 0xABCD), FormatError);
  auto bigger = cfg;
  bigger.model_dim = 16;
  EXPECT_THROW(decode_checkpoint(bytes, bigger, 0xABCD), FormatError);
}

TEST(Backbone, CopySkipsAdapter) {
  const auto cfg1 = toy_config(ConditionMode::SingleFrameGeo);
  auto cfg2 = toy_config();
  cfg2.seed = 99;
  const auto a = perturbed(cfg1);
  DenoiserParams b = DenoiserParams::init(cfg2);
  const AdapterParams before = b.adapter;
  copy_backbone(a, b);
  EXPECT_EQ(b.w_in, a.w_in);
  EXPECT_EQ(b.blocks[1].co, a.blocks[1].co);
  EXPECT_EQ(b.adapter.w1, before.w1);
}
