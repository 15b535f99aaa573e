#include <gtest/gtest.h>

#include <set>

#include "geoworld/numerics.hpp"

using namespace geoworld;

TEST(Softmax, SymmetricRow) {
  const Tensor s = softmax_rows(Tensor({1, 2}, {0.0, 0.0}));
  EXPECT_EQ(s[0], 0.5);
  EXPECT_EQ(s[1], 0.5);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Tensor s = softmax_rows(Tensor({1, 3}, {1000.0, 1000.0, 1000.0}));
  for (double v : s.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, MatchesHighPrecisionValues) {
  // e^{x-3} / sum, evaluated with 40 significant digits.
  const double expect[] = {0.0900305731703804579980221, 0.2447284710547976524729596, 0.6652409557748218895290183};
  const Tensor s = softmax_rows(Tensor({1, 3}, {1.0, 2.0, 3.0}));
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[i], expect[i], 4e-16);
}

TEST(Softmax, RowsAreIndependent) {
  const Tensor s = softmax_rows(Tensor({2, 2}, {0.0, 0.0, 5.0, -5.0}));
  EXPECT_EQ(s[0], 0.5);
  EXPECT_NEAR(s[2] + s[3], 1.0, 1e-15);
  EXPECT_GT(s[2], s[3]);
}

TEST(Softmax, EmptyThrows) { EXPECT_THROW(softmax_rows(Tensor({0, 3})), InvalidShape); }

TEST(Bilinear, ConstantFieldStaysConstant) {
  const Tensor out = bilinear_resize(Tensor({1, 4, 4}, 5.0), 3, 5);
  EXPECT_EQ(out.shape(), (Shape{1, 3, 5}));
  for (double v : out.data()) EXPECT_NEAR(v, 5.0, 1e-15);
}

TEST(Bilinear, IdentitySizeIsBitwise) {
  SeededRng rng(3);
  const Tensor t = rng.normal_tensor({2, 3, 4});
  EXPECT_EQ(bilinear_resize(t, 3, 4), t);
}

TEST(Bilinear, TwoByTwoToFourByFour) {
  // Half-pixel centers: sample coordinates -0.25, 0.25, 0.75, 1.25 clamp to
  // 0, 0.25, 0.75, 1; the input is linear (col + 2 row) so the result is too.
  const Tensor out = bilinear_resize(Tensor({1, 2, 2}, {0, 1, 2, 3}), 4, 4);
  const double s[] = {0.0, 0.25, 0.75, 1.0};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) EXPECT_NEAR(out[y * 4 + x], s[x] + 2 * s[y], 1e-15) << y << "," << x;
}

TEST(Bilinear, MatrixMatchesResize) {
  SeededRng rng(5);
  const Tensor t = rng.normal_tensor({1, 3, 5});
  const Tensor r = bilinear_resize(t, 6, 4);
  const Tensor m = bilinear_matrix(3, 5, 6, 4);
  for (std::size_t i = 0; i < 24; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 15; ++j) s += m.at(i, j) * t[j];
    EXPECT_NEAR(s, r[i], 1e-14);
  }
}

TEST(FramePool, DirectAverage) {
  const Tensor out = frame_mean_pool(Tensor({4, 1}, {1, 2, 3, 4}), 2);
  EXPECT_EQ(out[0], 1.5);
  EXPECT_EQ(out[1], 3.5);
}

TEST(FramePool, SameCountIsIdentity) {
  SeededRng rng(1);
  const Tensor t = rng.normal_tensor({3, 2, 2});
  EXPECT_EQ(frame_mean_pool(t, 3), t);
}

TEST(FramePool, SeventeenToFiveBuckets) {
  const std::pair<std::size_t, std::size_t> expect[] = {{0, 3}, {3, 6}, {6, 10}, {10, 13}, {13, 17}};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(pool_bucket(i, 17, 5), expect[i]);
  Tensor t({17, 1});
  for (std::size_t i = 0; i < 17; ++i) t[i] = static_cast<double>(i);
  const Tensor out = frame_mean_pool(t, 5);
  EXPECT_DOUBLE_EQ(out[0], 1.0);
  EXPECT_DOUBLE_EQ(out[2], 7.5);
  EXPECT_DOUBLE_EQ(out[4], 14.5);
  const Tensor m = frame_pool_matrix(17, 5);
  for (std::size_t i = 0; i < 5; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 17; ++k) s += m.at(i, k) * t[k];
    EXPECT_NEAR(s, out[i], 1e-14);
  }
}

TEST(FramePool, RejectsBadCounts) {
  EXPECT_THROW(frame_mean_pool(Tensor({2, 1}), 3), InvalidShape);
  EXPECT_THROW(frame_mean_pool(Tensor({2, 1}), 0), InvalidShape);
}

TEST(Rng, DeterministicAndSeedSensitive) {
  SeededRng a(9), b(9), c(10);
  for (int i = 0; i < 10; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    EXPECT_NE(x, c.next_u64());
  }
}

TEST(Rng, NormalMoments) {
  SeededRng rng(11);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Rng, DerivedSeedsDiffer) {
  std::set<std::uint64_t> seen;
  for (const char* name : {"train", "sample", "eval", "adapter"}) seen.insert(derive_seed(1, name));
  seen.insert(derive_seed(2, "train"));
  EXPECT_EQ(seen.size(), 5u);
  EXPECT_EQ(derive_seed(1, "train"), derive_seed(1, "train"));
}

TEST(Tensor, ShapeChecks) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), InvalidShape);
  EXPECT_THROW(Tensor({2, 3}).reshaped({4}), InvalidShape);
  EXPECT_EQ(Tensor({2, 3}).reshaped({3, 2}).shape(), (Shape{3, 2}));
}
