#pragma once

// Point-cloud reconstruction from generated views and the image metrics used
// to score them.

#include <cmath>
#include <string>
#include <vector>

#include "geoworld/camera.hpp"
#include "geoworld/io.hpp"
#include "geoworld/pointrender.hpp"
#include "geoworld/scene.hpp"

namespace geoworld {

/// Lifts every frame with its depth map and fuses the clouds in frame order.
inline PointCloud reconstruct(const Tensor& video, const Tensor& depths, const Trajectory& traj) {
  if (video.rank() != 4 || video.dim(1) != 3 || depths.rank() != 3 || depths.dim(0) != video.dim(0) ||
      depths.dim(1) != video.dim(2) || depths.dim(2) != video.dim(3) || traj.size() != video.dim(0)) {
    throw InvalidShape("reconstruct: video [F,3,H,W], depths [F,H,W] and trajectory length must agree");
  }
  const std::size_t h = video.dim(2), w = video.dim(3);
  std::vector<PointCloud> clouds;
  for (std::size_t f = 0; f < video.dim(0); ++f) {
    Tensor depth({h, w});
    std::copy_n(depths.data().begin() + static_cast<std::ptrdiff_t>(f * h * w), h * w, depth.data().begin());
    clouds.push_back(lift(RenderedFrame{frame_of(video, f), std::move(depth), traj.frames[f]}));
  }
  return fuse(clouds);
}

inline constexpr double kPsnrCap = 99.0;

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) throw InvalidShape(std::string(what) + ": shapes differ (" + shape_str(a.shape()) + " vs " + shape_str(b.shape()) + ")");
}

inline double psnr_from_mse(double mse) { return mse == 0.0 ? kPsnrCap : std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse)); }

inline double psnr(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "psnr");
  if (a.empty()) throw InvalidShape("psnr: empty image");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return psnr_from_mse(s / static_cast<double>(a.size()));
}

/// PSNR over the pixels where mask [H,W] is nonzero, for [3,H,W] images.
inline double psnr_masked(const Tensor& a, const Tensor& b, const Tensor& mask) {
  check_same_shape(a, b, "psnr_masked");
  const std::size_t hw = mask.size();
  if (a.size() != 3 * hw) throw InvalidShape("psnr_masked: mask must be [H,W] for [3,H,W] images");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < hw; ++i) {
      if (mask[i] == 0.0) continue;
      const double d = a[c * hw + i] - b[c * hw + i];
      s += d * d;
      ++n;
    }
  if (n == 0) throw InvalidShape("psnr_masked: empty mask");
  return psnr_from_mse(s / static_cast<double>(n));
}

inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

inline std::vector<double> gaussian_window(int size = kSsimWindow, double sigma = kSsimSigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  double s = 0.0;
  for (int i = 0; i < size; ++i) {
    const double x = i - (size - 1) / 2.0;
    g[static_cast<std::size_t>(i)] = std::exp(-x * x / (2 * sigma * sigma));
    s += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= s;
  return g;
}

/// Mean SSIM over channels and all window positions that fit inside the image
/// ([C,H,W] inputs, dynamic range 1).
inline double ssim(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "ssim");
  if (a.rank() != 3) throw InvalidShape("ssim expects [C,H,W]");
  const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
  const auto win = static_cast<std::size_t>(kSsimWindow);
  if (h < win || w < win) throw InvalidShape("ssim: image smaller than the 11x11 window");
  const auto g = gaussian_window();
  const std::size_t oh = h - win + 1, ow = w - win + 1;

  // Separable filtering: rows first, then columns.
  auto filter = [&](const std::vector<double>& img) {
    std::vector<double> tmp(h * ow), out(oh * ow);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < win; ++k) s += g[k] * img[y * w + x + k];
        tmp[y * ow + x] = s;
      }
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t x = 0; x < ow; ++x) {
        double s = 0.0;
        for (std::size_t k = 0; k < win; ++k) s += g[k] * tmp[(y + k) * ow + x];
        out[y * ow + x] = s;
      }
    return out;
  };

  double total = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
    for (std::size_t i = 0; i < h * w; ++i) {
      x[i] = a[ch * h * w + i];
      y[i] = b[ch * h * w + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = filter(x), my = filter(y), sxx = filter(xx), syy = filter(yy), sxy = filter(xy);
    for (std::size_t i = 0; i < oh * ow; ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cov = sxy[i] - mx[i] * my[i];
      const double num = (2 * mx[i] * my[i] + kSsimC1) * (2 * cov + kSsimC2);
      const double den = (mx[i] * mx[i] + my[i] * my[i] + kSsimC1) * (vx + vy + kSsimC2);
      total += num / den;
    }
  }
  return total / static_cast<double>(c * oh * ow);
}

struct MetricReport {
  std::vector<double> psnr_db;
  std::vector<double> ssim;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;

  std::size_t frames() const { return psnr_db.size(); }
};

inline MetricReport evaluate(const Tensor& predicted, const Tensor& target) {
  check_same_shape(predicted, target, "evaluate");
  if (predicted.rank() != 4 || predicted.dim(0) == 0) throw InvalidShape("evaluate expects [F,C,H,W] videos");
  MetricReport r;
  for (std::size_t f = 0; f < predicted.dim(0); ++f) {
    const Tensor a = frame_of(predicted, f), b = frame_of(target, f);
    r.psnr_db.push_back(psnr(a, b));
    r.ssim.push_back(ssim(a, b));
    r.mean_psnr += r.psnr_db.back();
    r.mean_ssim += r.ssim.back();
  }
  r.mean_psnr /= static_cast<double>(r.frames());
  r.mean_ssim /= static_cast<double>(r.frames());
  return r;
}

inline std::string metrics_csv(const MetricReport& r) {
  std::string out = "frame,psnr_db,ssim\n";
  for (std::size_t f = 0; f < r.frames(); ++f) out += std::to_string(f) + "," + io::csv_double(r.psnr_db[f]) + "," + io::csv_double(r.ssim[f]) + "\n";
  out += "mean," + io::csv_double(r.mean_psnr) + "," + io::csv_double(r.mean_ssim) + "\n";
  return out;
}

}  // namespace geoworld
