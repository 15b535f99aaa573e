#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "geoworld/errors.hpp"

namespace geoworld {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major array of doubles. Shape and data length always agree.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw InvalidShape("tensor shape " + shape_str(shape_) + " does not match " +
                         std::to_string(data_.size()) + " elements");
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw InvalidShape("dimension index out of range");
    return shape_[i];
  }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& vec() noexcept { return data_; }
  const std::vector<double>& vec() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessor; callers are responsible for rank.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_.back() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_.back() + c]; }

  Tensor reshaped(Shape s) const& {
    Tensor t = *this;
    return std::move(t).reshaped(std::move(s));
  }
  Tensor reshaped(Shape s) && {
    if (shape_size(s) != data_.size()) {
      throw InvalidShape("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    }
    shape_ = std::move(s);
    return std::move(*this);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw InvalidShape("max_abs_diff size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Deterministic randomness
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64_mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Counter-based splitmix64 stream. Draw i (0-based) is
/// mix(seed + (i + 1) * 0x9E3779B97F4A7C15), which is exactly the reference
/// splitmix64 sequence for the given seed.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return splitmix64_mix(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Uses rejection to stay unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InvalidArgument("below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller; each call consumes two uniforms.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  Tensor normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = stddev * normal();
    return t;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

/// Seed for an independent sub-stream identified by name.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  return splitmix64_mix(seed ^ splitmix64_mix(fnv1a64(name)));
}

// ---------------------------------------------------------------------------
// Elementary operations
// ---------------------------------------------------------------------------

/// Row-wise softmax over the last dimension, with max subtraction.
inline Tensor softmax_rows(const Tensor& m) {
  if (m.empty() || m.rank() == 0 || m.shape().back() == 0) {
    throw InvalidShape("softmax_rows on empty tensor");
  }
  const std::size_t cols = m.shape().back();
  const std::size_t rows = m.size() / cols;
  Tensor out(m.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = m.data().data() + r * cols;
    double* o = out.data().data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = std::exp(in[c] - mx);
      sum += o[c];
    }
    const double inv = 1.0 / sum;
    for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
  }
  return out;
}

/// Two-tap linear interpolation stencil for one axis, align-corners-false:
/// source coordinate (dst + 0.5) * in / out - 0.5, clamped to [0, in - 1].
struct LinearTap {
  std::size_t i0;
  std::size_t i1;
  double w1;  // weight of i1; i0 receives 1 - w1
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out) {
  if (in == 0 || out == 0) throw InvalidShape("linear_taps with zero size");
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

/// Bilinear resize of a [C, H, W] tensor.
inline Tensor bilinear_resize(const Tensor& t, std::size_t out_h, std::size_t out_w) {
  if (t.rank() != 3) throw InvalidShape("bilinear_resize expects [C,H,W], got " + shape_str(t.shape()));
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (h == 0 || w == 0 || out_h == 0 || out_w == 0) throw InvalidShape("bilinear_resize with zero dimension");
  if (h == out_h && w == out_w) return t;
  const auto ty = linear_taps(h, out_h);
  const auto tx = linear_taps(w, out_w);
  Tensor out({c, out_h, out_w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = t.data().data() + ch * h * w;
    double* dst = out.data().data() + ch * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t x = 0; x < out_w; ++x) {
        const auto& b = tx[x];
        const double top = (1.0 - b.w1) * src[a.i0 * w + b.i0] + b.w1 * src[a.i0 * w + b.i1];
        const double bot = (1.0 - b.w1) * src[a.i1 * w + b.i0] + b.w1 * src[a.i1 * w + b.i1];
        dst[y * out_w + x] = (1.0 - a.w1) * top + a.w1 * bot;
      }
    }
  }
  return out;
}

/// Bucket [begin, end) of source frames averaged into output frame i.
inline std::pair<std::size_t, std::size_t> pool_bucket(std::size_t i, std::size_t in_frames, std::size_t out_frames) {
  return {i * in_frames / out_frames, (i + 1) * in_frames / out_frames};
}

/// Adaptive mean pooling over the leading (frame) axis.
inline Tensor frame_mean_pool(const Tensor& t, std::size_t out_frames) {
  if (t.rank() == 0 || t.dim(0) == 0) throw InvalidShape("frame_mean_pool on empty tensor");
  const std::size_t f = t.dim(0);
  if (out_frames < 1 || out_frames > f) {
    throw InvalidShape("frame_mean_pool: output frames " + std::to_string(out_frames) + " not in [1, " +
                       std::to_string(f) + "]");
  }
  if (out_frames == f) return t;
  const std::size_t stride = t.size() / f;
  Shape s = t.shape();
  s[0] = out_frames;
  Tensor out(s);
  for (std::size_t i = 0; i < out_frames; ++i) {
    const auto [b, e] = pool_bucket(i, f, out_frames);
    const double inv = 1.0 / static_cast<double>(e - b);
    double* dst = out.data().data() + i * stride;
    for (std::size_t k = b; k < e; ++k) {
      const double* src = t.data().data() + k * stride;
      for (std::size_t j = 0; j < stride; ++j) dst[j] += src[j];
    }
    for (std::size_t j = 0; j < stride; ++j) dst[j] *= inv;
  }
  return out;
}

/// Dense [out_frames, in_frames] matrix realizing frame_mean_pool.
inline Tensor frame_pool_matrix(std::size_t in_frames, std::size_t out_frames) {
  if (out_frames < 1 || out_frames > in_frames) throw InvalidShape("frame_pool_matrix: bad frame counts");
  Tensor m({out_frames, in_frames});
  for (std::size_t i = 0; i < out_frames; ++i) {
    const auto [b, e] = pool_bucket(i, in_frames, out_frames);
    for (std::size_t k = b; k < e; ++k) m.at(i, k) = 1.0 / static_cast<double>(e - b);
  }
  return m;
}

/// Dense [out_h*out_w, in_h*in_w] matrix realizing bilinear_resize on one channel.
inline Tensor bilinear_matrix(std::size_t in_h, std::size_t in_w, std::size_t out_h, std::size_t out_w) {
  const auto ty = linear_taps(in_h, out_h);
  const auto tx = linear_taps(in_w, out_w);
  Tensor m({out_h * out_w, in_h * in_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t row = y * out_w + x;
      const auto& a = ty[y];
      const auto& b = tx[x];
      m.at(row, a.i0 * in_w + b.i0) += (1.0 - a.w1) * (1.0 - b.w1);
      m.at(row, a.i0 * in_w + b.i1) += (1.0 - a.w1) * b.w1;
      m.at(row, a.i1 * in_w + b.i0) += a.w1 * (1.0 - b.w1);
      m.at(row, a.i1 * in_w + b.i1) += a.w1 * b.w1;
    }
  }
  return m;
}

}  // namespace geoworld
