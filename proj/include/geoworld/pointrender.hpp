#pragma once

// Colored point clouds: lifting depth maps, splat rendering and fusion.
//
// Splat rendering resolves each pixel in two passes. The center pass considers
// only points whose projection rounds to that pixel; the fill pass then covers
// pixels the center pass left empty with square splats of side 2*radius+1.
// Within a pass, samples lying on the pixel's ray (d below 1e-6) come first;
// otherwise the winner minimizes depth * (1 + d), where d is the distance in
// pixels between the projection and the pixel center, with ties going to the
// lower point index. A point re-rendered into the camera it was lifted from
// therefore always reclaims its own pixel, even when another view's sample of
// a nearer surface lands beside it across a silhouette.

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "geoworld/camera.hpp"
#include "geoworld/io.hpp"
#include "geoworld/scene.hpp"

namespace geoworld {

struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<Vec3> colors;
  std::vector<std::uint32_t> source_frame;

  std::size_t size() const { return positions.size(); }
  bool empty() const { return positions.empty(); }

  void push(const Vec3& p, const Vec3& c, std::uint32_t src) {
    positions.push_back(p);
    colors.push_back(c);
    source_frame.push_back(src);
  }

  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

/// One point per pixel with positive depth.
inline PointCloud lift(const RenderedFrame& frame) {
  const std::size_t h = frame.depth.dim(0), w = frame.depth.dim(1);
  PointCloud cloud;
  for (std::size_t v = 0; v < h; ++v)
    for (std::size_t u = 0; u < w; ++u) {
      const double d = frame.depth.at(v, u);
      if (!(d > 0)) continue;
      const Vec3 p = backproject(static_cast<double>(u), static_cast<double>(v), d, frame.cam);
      const Vec3 c{frame.color[(0 * h + v) * w + u], frame.color[(1 * h + v) * w + u], frame.color[(2 * h + v) * w + u]};
      cloud.push(p, c, static_cast<std::uint32_t>(frame.cam.frame_index));
    }
  return cloud;
}

/// Ranking key used by splat_render; lower wins.
inline double splat_score(double depth, double du, double dv) { return depth * (1.0 + std::sqrt(du * du + dv * dv)); }

/// Projections this close to a pixel center lie on that pixel's ray. Such a
/// sample is an observation of the ray itself, so it outranks every off-ray
/// sample (which can only be a neighbouring surface bleeding across an edge).
inline constexpr double kOnRayTolerance = 1e-6;

struct SplatKey {
  bool off_ray = true;
  double score = std::numeric_limits<double>::infinity();

  friend bool operator<(const SplatKey& a, const SplatKey& b) {
    return a.off_ray != b.off_ray ? !a.off_ray : a.score < b.score;
  }
};

inline SplatKey splat_key(double depth, double du, double dv) {
  return {std::abs(du) >= kOnRayTolerance || std::abs(dv) >= kOnRayTolerance, splat_score(depth, du, dv)};
}

inline RenderedFrame splat_render(const PointCloud& cloud, const CameraFrame& cam, std::size_t h, std::size_t w, int radius) {
  if (radius < 0) throw InvalidArgument("splat radius must be non-negative");
  RenderedFrame out{Tensor({3, h, w}), Tensor({h, w}), cam};

  struct Proj {
    double u, v, depth;
    long px, py;
    bool valid;
  };
  std::vector<Proj> proj(cloud.size());
  const auto& k = cam.intrinsics;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 q = cam.pose.apply(cloud.positions[i]);
    if (q[2] <= kMinDepth) {  // behind the camera: skipped
      proj[i].valid = false;
      continue;
    }
    const double u = k.fx * q[0] / q[2] + k.cx;
    const double v = k.fy * q[1] / q[2] + k.cy;
    proj[i] = {u, v, q[2], static_cast<long>(std::floor(u + 0.5)), static_cast<long>(std::floor(v + 0.5)), std::isfinite(u) && std::isfinite(v)};
  }

  std::vector<SplatKey> best(h * w);
  std::vector<long> owner(h * w, -1);
  auto offer = [&](long x, long y, std::size_t i) {
    const std::size_t pix = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
    const SplatKey s = splat_key(proj[i].depth, proj[i].u - static_cast<double>(x), proj[i].v - static_cast<double>(y));
    if (s < best[pix]) {  // strict: earlier index keeps ties
      best[pix] = s;
      owner[pix] = static_cast<long>(i);
    }
  };

  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = proj[i];
    if (!p.valid || p.px < 0 || p.py < 0 || p.px >= static_cast<long>(w) || p.py >= static_cast<long>(h)) continue;
    offer(p.px, p.py, i);
  }
  if (radius > 0) {
    std::vector<bool> centered(h * w);
    for (std::size_t pix = 0; pix < h * w; ++pix) centered[pix] = owner[pix] >= 0;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto& p = proj[i];
      if (!p.valid) continue;
      for (long y = std::max(0L, p.py - radius); y <= std::min(static_cast<long>(h) - 1, p.py + radius); ++y)
        for (long x = std::max(0L, p.px - radius); x <= std::min(static_cast<long>(w) - 1, p.px + radius); ++x) {
          if (centered[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)]) continue;
          offer(x, y, i);
        }
    }
  }

  for (std::size_t pix = 0; pix < h * w; ++pix) {
    if (owner[pix] < 0) continue;
    const auto i = static_cast<std::size_t>(owner[pix]);
    out.depth[pix] = proj[i].depth;
    for (std::size_t c = 0; c < 3; ++c) out.color[c * h * w + pix] = cloud.colors[i][c];
  }
  return out;
}

/// Concatenation in input order.
inline PointCloud fuse(const std::vector<PointCloud>& clouds) {
  PointCloud out;
  for (const auto& c : clouds) {
    out.positions.insert(out.positions.end(), c.positions.begin(), c.positions.end());
    out.colors.insert(out.colors.end(), c.colors.begin(), c.colors.end());
    out.source_frame.insert(out.source_frame.end(), c.source_frame.begin(), c.source_frame.end());
  }
  return out;
}

// "GWPC", u32 N, then N x (3 f64 position, 3 f64 color, u32 source frame).
inline std::string encode_cloud(const PointCloud& c) {
  io::ByteWriter w;
  w.magic("GWPC");
  w.u32(static_cast<std::uint32_t>(c.size()));
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (double v : c.positions[i]) w.f64(v);
    for (double v : c.colors[i]) w.f64(v);
    w.u32(c.source_frame[i]);
  }
  return w.bytes();
}

inline PointCloud decode_cloud(std::string bytes, const std::string& source = "<cloud>") {
  io::ByteReader r(std::move(bytes), source);
  r.expect_magic("GWPC");
  const std::uint32_t n = r.u32();
  PointCloud c;
  for (std::uint32_t i = 0; i < n; ++i) {
    Vec3 p{}, col{};
    for (auto& v : p) v = r.f64();
    for (auto& v : col) v = r.f64();
    c.push(p, col, r.u32());
  }
  if (!r.at_end()) throw FormatError(source + ": trailing bytes");
  return c;
}

}  // namespace geoworld
