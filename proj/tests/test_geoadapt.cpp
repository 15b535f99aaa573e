#include <gtest/gtest.h>

#include "geoworld/geoadapt.hpp"

using namespace geoworld;
namespace ad = geoworld::ad;

namespace {

GeoFeatures features(const Tensor& tokens, std::size_t gh, std::size_t gw) { return {tokens, full_grid(gh, gw), gh, gw, 8}; }

AdapterParams small_adapter(std::uint64_t seed = 3) { return AdapterParams::init({4, 6, 5, 3}, seed); }

}  // namespace

TEST(Resize, SameSizeIsIdentity) {
  SeededRng rng(1);
  const Tensor t = rng.normal_tensor({3, 6, 4});
  EXPECT_EQ(resize_features(features(t, 2, 3), 3, 2, 3), t);
}

TEST(Resize, ConstantFieldStaysConstant) {
  const Tensor out = resize_features(features(Tensor({17, 60, 4}, 0.25), 6, 10), 5, 3, 5);
  EXPECT_EQ(out.shape(), (Shape{5, 15, 4}));
  for (double v : out.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Resize, FrameBucketsFollowPooling) {
  Tensor t({17, 1, 1});
  for (std::size_t f = 0; f < 17; ++f) t[f] = static_cast<double>(f);
  const Tensor out = resize_features(features(t, 1, 1), 5, 1, 1);
  const double expect[] = {1.0, 4.0, 7.5, 11.0, 14.5};  // means of [0,3) [3,6) [6,10) [10,13) [13,17)
  for (int i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(out[i], expect[i]);
}

TEST(Resize, MatrixFormMatchesDirect) {
  SeededRng rng(2);
  const Tensor t = rng.normal_tensor({5, 6, 3});
  const Tensor direct = resize_features(features(t, 2, 3), 2, 3, 2);
  const Tensor m = resize_matrix(5, 2, 3, 2, 3, 2);
  for (std::size_t r = 0; r < 12; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 30; ++k) s += m.at(r, k) * t[k * 3 + c];
      EXPECT_NEAR(s, direct[r * 3 + c], 1e-14);
    }
}

TEST(Adapt, ZeroWeightsZeroOutput) {
  AdapterParams p = small_adapter();
  p.visit([](Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); });
  SeededRng rng(4);
  const Tensor out = adapt(rng.normal_tensor({2, 3, 4}), p);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Adapt, SingleTokenHandEvaluation) {
  const AdapterParams p = small_adapter();
  const Tensor x({1, 4}, {0.3, -0.7, 1.1, 0.2});
  const Tensor out = adapt(x, p);
  for (std::size_t o = 0; o < 5; ++o) {
    double y = p.b2[o];
    for (std::size_t j = 0; j < 6; ++j) {
      double h = p.b1[j];
      for (std::size_t i = 0; i < 4; ++i) h += x[i] * p.w1.at(i, j);
      const double g = 0.5 * h * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (h + 0.044715 * h * h * h)));
      y += g * p.w2.at(j, o);
    }
    EXPECT_NEAR(out[o], y, 1e-14);
  }
}

TEST(Adapt, ParameterGradientsMatchFiniteDifferences) {
  AdapterParams p = small_adapter();
  p.visit([&](Tensor& t) {
    SeededRng rng(static_cast<std::uint64_t>(t.size()) + 17);
    for (auto& v : t.data()) v += 0.1 * rng.normal();  // nonzero biases
  });
  SeededRng rng(5);
  const Tensor x = rng.normal_tensor({3, 4});
  const Tensor wout = rng.normal_tensor({3, 1});
  auto objective = [&](const AdapterParams& q, ad::ParamBinding& bind) {
    ad::Var a = adapt_var(bind.tape().constant(x), q, bind);
    ad::Var w = global_weights_var(a, q, bind);
    return ad::add(ad::sum(ad::mul(a, a)), ad::sum(ad::mul(w, bind.tape().constant(wout))));
  };
  ad::Tape tape;
  ad::ParamBinding bind(tape, true);
  tape.backward(objective(p, bind));
  std::vector<Tensor> grads;
  p.visit([&](Tensor& t) { grads.push_back(bind.grad(t)); });
  auto value = [&]() {
    ad::Tape t2;
    ad::ParamBinding b2(t2, false);
    return ad::val(objective(p, b2))[0];
  };
  std::size_t k = 0;
  double worst = 0.0;
  const double h = 1e-6;
  p.visit([&](Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x0 = t[i];
      t[i] = x0 + h;
      const double fp = value();
      t[i] = x0 - h;
      const double fm = value();
      t[i] = x0;
      const double num = (fp - fm) / (2 * h);
      const double scale = std::max(std::abs(num), std::abs(grads[k][i]));
      if (scale > 1e-4) worst = std::max(worst, std::abs(num - grads[k][i]) / scale);
      EXPECT_NEAR(grads[k][i], num, 1e-8);
    }
    ++k;
  });
  EXPECT_LT(worst, 1e-6);
}

TEST(GlobalWeights, IdenticalTokensIdenticalWeights) {
  const AdapterParams p = small_adapter();
  Tensor t({2, 4, 5});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.1 * static_cast<double>(i % 5);
  const Tensor w = global_weights(t, p);
  for (double v : w.data()) EXPECT_EQ(v, w[0]);
}

TEST(GlobalWeights, ZeroPredictorGivesHalf) {
  AdapterParams p = small_adapter();
  for (Tensor* t : {&p.p1, &p.pb1, &p.p2, &p.pb2}) std::fill(t->data().begin(), t->data().end(), 0.0);
  SeededRng rng(6);
  const Tensor w = global_weights(rng.normal_tensor({2, 3, 5}), p);
  for (double v : w.data()) EXPECT_EQ(v, 0.5);
}

TEST(GlobalWeights, ThreeTokenHandEvaluation) {
  const AdapterParams p = small_adapter(8);
  SeededRng rng(9);
  const Tensor g = rng.normal_tensor({1, 3, 5});
  const Tensor w = global_weights(g, p);
  double mean[5] = {};
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t c = 0; c < 5; ++c) mean[c] += g[k * 5 + c] / 3.0;
  for (std::size_t k = 0; k < 3; ++k) {
    double in[10];
    for (std::size_t c = 0; c < 5; ++c) {
      in[c] = g[k * 5 + c];
      in[5 + c] = mean[c];
    }
    double logit = p.pb2[0];
    for (std::size_t j = 0; j < 3; ++j) {
      double h = p.pb1[j];
      for (std::size_t i = 0; i < 10; ++i) h += in[i] * p.p1.at(i, j);
      logit += ad::gelu_value(h) * p.p2.at(j, 0);
    }
    EXPECT_NEAR(w[k], 1.0 / (1.0 + std::exp(-logit)), 1e-14);
    EXPECT_GT(w[k], 0.0);
    EXPECT_LT(w[k], 1.0);
  }
}

TEST(Select, HalfOfSixtyKeepsThirty) {
  SeededRng rng(10);
  const Tensor g = rng.normal_tensor({5, 60, 4});
  Tensor w({5, 60});
  for (auto& v : w.data()) v = rng.uniform();
  const auto ct = select_tokens(g, w, 0.5, full_grid(6, 10));
  ASSERT_EQ(ct.frames(), 5u);
  for (std::size_t f = 0; f < 5; ++f) EXPECT_EQ(ct.kept_count(f), 30u);
}

TEST(Select, RatioZeroKeepsAllScaled) {
  SeededRng rng(11);
  const Tensor g = rng.normal_tensor({1, 4, 3});
  const Tensor w({1, 4}, {0.2, 0.4, 0.6, 0.8});
  const auto ct = select_tokens(g, w, 0.0, full_grid(2, 2));
  ASSERT_EQ(ct.kept_count(0), 4u);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(ct.tokens[0][k * 3 + c], w[k] * g[k * 3 + c]);
}

TEST(Select, TieBreaksTowardLowerIndex) {
  const std::vector<double> w{0.9, 0.1, 0.5, 0.5};
  EXPECT_EQ(kept_indices(w, 0.5), (std::vector<std::size_t>{0, 3}));
  Tensor g({1, 4, 1}, 1.0);
  const auto ct = select_tokens(g, Tensor({1, 4}, w), 0.5, full_grid(2, 2));
  EXPECT_EQ(ct.kept_index[0], (std::vector<std::size_t>{0, 3}));
  EXPECT_EQ(ct.kept_grid[0][1], (GridCoord{1, 1}));
}

TEST(Select, DiscardCountIsFloor) {
  EXPECT_EQ(discard_count(10, 0.7), 7u);
  EXPECT_EQ(discard_count(10, 0.3), 3u);
  EXPECT_EQ(discard_count(3, 0.5), 1u);
  EXPECT_EQ(discard_count(1, 0.7), 0u);
  EXPECT_THROW(discard_count(4, 1.0), InvalidArgument);
  EXPECT_THROW(discard_count(4, -0.1), InvalidArgument);
}

TEST(Select, ShapeMismatchRejected) {
  EXPECT_THROW(select_tokens(Tensor({1, 4, 2}), Tensor({1, 3}), 0.5, full_grid(2, 2)), InvalidShape);
  EXPECT_THROW(select_tokens(Tensor({1, 4, 2}), Tensor({1, 4}), 0.5, full_grid(1, 3)), InvalidShape);
}
