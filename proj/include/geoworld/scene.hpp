#pragma once

// Procedural room-like scenes made of textured axis-aligned rectangles and
// spheres, with an exact ray-cast ground-truth renderer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "geoworld/camera.hpp"
#include "geoworld/errors.hpp"
#include "geoworld/numerics.hpp"
#include "json.hpp"

namespace geoworld {

enum class PrimitiveType { Rect, Sphere };

enum class Texture : int { Checker = 0, Gradient = 1, Stripes = 2 };

struct Primitive {
  PrimitiveType type = PrimitiveType::Sphere;
  Vec3 center{0, 0, 0};
  // Rect: axis of the plane normal (0, 1, 2) and half extents along the two
  // remaining axes in increasing order. Sphere: radius.
  int axis = 2;
  double half_u = 0.5, half_v = 0.5;
  double radius = 0.5;
  Texture texture = Texture::Checker;
  double texture_scale = 0.25;
  Vec3 color{0.8, 0.8, 0.8};
  Vec3 color2{0.2, 0.2, 0.2};

  friend bool operator==(const Primitive&, const Primitive&) = default;
};

struct Bounds {
  Vec3 min{-2.5, -1.6, 0.0};
  Vec3 max{2.5, 1.6, 7.0};

  bool contains(const Vec3& p, double slack = 1e-9) const {
    for (int i = 0; i < 3; ++i)
      if (p[i] < min[i] - slack || p[i] > max[i] + slack) return false;
    return true;
  }
  friend bool operator==(const Bounds&, const Bounds&) = default;
};

struct SyntheticScene {
  std::vector<Primitive> primitives;
  Bounds bounds;
  std::uint64_t seed = 0;

  friend bool operator==(const SyntheticScene&, const SyntheticScene&) = default;
};

struct RenderedFrame {
  Tensor color;  // [3, H, W] in [0, 1]
  Tensor depth;  // [H, W], 0 marks no hit
  CameraFrame cam;
};

/// Frames x channels x height x width.
using VideoTensor = Tensor;

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

inline Vec3 random_color(SeededRng& rng) { return {rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9)}; }

inline Primitive textured(Primitive p, SeededRng& rng) {
  p.texture = static_cast<Texture>(rng.below(3));
  p.texture_scale = rng.uniform(0.15, 0.45);
  p.color = random_color(rng);
  p.color2 = {0.35 * p.color[0] + 0.05, 0.35 * p.color[1] + 0.05, 0.35 * p.color[2] + 0.05};
  return p;
}

/// A back wall, a floor and 2-8 free-standing objects, all inside the bounds.
inline SyntheticScene generate_scene(std::uint64_t seed) {
  SeededRng rng(derive_seed(seed, "scene"));
  SyntheticScene s;
  s.seed = seed;
  const double back_z = rng.uniform(5.0, 6.5);
  const double floor_y = 1.4;

  Primitive wall;
  wall.type = PrimitiveType::Rect;
  wall.axis = 2;
  wall.center = {0.0, 0.0, back_z};
  wall.half_u = 2.4;
  wall.half_v = 1.5;
  s.primitives.push_back(textured(wall, rng));

  Primitive floor;
  floor.type = PrimitiveType::Rect;
  floor.axis = 1;
  floor.center = {0.0, floor_y, (0.5 + back_z) * 0.5};
  floor.half_u = 2.4;                     // x
  floor.half_v = (back_z - 0.5) * 0.5;  // z
  s.primitives.push_back(textured(floor, rng));

  const int objects = 2 + static_cast<int>(rng.below(7));
  for (int i = 0; i < objects; ++i) {
    Primitive p;
    if (rng.uniform() < 0.55) {
      p.type = PrimitiveType::Sphere;
      p.radius = rng.uniform(0.3, 0.7);
      p.center = {rng.uniform(-1.6, 1.6), rng.uniform(-0.6, floor_y - p.radius), rng.uniform(2.4, back_z - 1.0)};
    } else {
      p.type = PrimitiveType::Rect;
      p.axis = rng.uniform() < 0.7 ? 2 : 0;
      p.half_u = rng.uniform(0.25, 0.7);
      p.half_v = rng.uniform(0.25, 0.7);
      const double half_y = p.axis == 2 ? p.half_v : p.half_u;
      p.center = {rng.uniform(-1.6, 1.6), rng.uniform(-0.8, floor_y - half_y), rng.uniform(2.2, back_z - 0.8)};
    }
    s.primitives.push_back(textured(p, rng));
  }
  return s;
}

/// Centroid of a primitive (sphere center, rectangle center).
inline Vec3 centroid(const Primitive& p) { return p.center; }

// ---------------------------------------------------------------------------
// Ray casting
// ---------------------------------------------------------------------------

inline std::pair<int, int> rect_axes(int axis) {
  if (axis == 0) return {1, 2};
  if (axis == 1) return {0, 2};
  return {0, 1};
}

/// Ray parameter of the nearest intersection with s > eps, if any.
inline std::optional<double> intersect(const Primitive& p, const Ray& ray, double eps = 1e-9) {
  if (p.type == PrimitiveType::Rect) {
    const int k = p.axis;
    if (std::abs(ray.direction[k]) < 1e-15) return std::nullopt;
    const double s = (p.center[k] - ray.origin[k]) / ray.direction[k];
    if (s <= eps) return std::nullopt;
    const auto [a, b] = rect_axes(k);
    const double ha = ray.origin[a] + s * ray.direction[a] - p.center[a];
    const double hb = ray.origin[b] + s * ray.direction[b] - p.center[b];
    if (std::abs(ha) > p.half_u || std::abs(hb) > p.half_v) return std::nullopt;
    return s;
  }
  const Vec3 oc = ray.origin - p.center;
  const double a = dot(ray.direction, ray.direction);
  const double b = 2.0 * dot(oc, ray.direction);
  const double c = dot(oc, oc) - p.radius * p.radius;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0) return std::nullopt;
  const double sq = std::sqrt(disc);
  // Numerically stable roots.
  const double qv = -0.5 * (b + std::copysign(sq, b));
  double s0 = qv / a, s1 = c / qv;
  if (qv == 0.0) s0 = s1 = -b / (2.0 * a);
  if (s0 > s1) std::swap(s0, s1);
  if (s0 > eps) return s0;
  if (s1 > eps) return s1;
  return std::nullopt;
}

/// Distance from a point to the primitive's surface.
inline double surface_distance(const Primitive& p, const Vec3& x) {
  if (p.type == PrimitiveType::Sphere) return std::abs(norm(x - p.center) - p.radius);
  const auto [a, b] = rect_axes(p.axis);
  const double dn = x[p.axis] - p.center[p.axis];
  const double da = std::max(0.0, std::abs(x[a] - p.center[a]) - p.half_u);
  const double db = std::max(0.0, std::abs(x[b] - p.center[b]) - p.half_v);
  return std::sqrt(dn * dn + da * da + db * db);
}

inline Vec3 mix(const Vec3& a, const Vec3& b, double t) { return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t}; }

/// View-independent surface color at world point x on primitive p.
inline Vec3 shade(const Primitive& p, const Vec3& x) {
  double cu, cv, extent_u;
  if (p.type == PrimitiveType::Rect) {
    const auto [a, b] = rect_axes(p.axis);
    cu = x[a] - p.center[a] + p.half_u;
    cv = x[b] - p.center[b] + p.half_v;
    extent_u = 2.0 * p.half_u;
  } else {
    const Vec3 n = (1.0 / p.radius) * (x - p.center);
    cu = (std::atan2(n[0], -n[2]) + M_PI) * p.radius;
    cv = (std::acos(std::clamp(n[1], -1.0, 1.0))) * p.radius;
    extent_u = 2.0 * M_PI * p.radius;
  }
  switch (p.texture) {
    case Texture::Checker: {
      const long k = static_cast<long>(std::floor(cu / p.texture_scale)) + static_cast<long>(std::floor(cv / p.texture_scale));
      return (k & 1) ? p.color2 : p.color;
    }
    case Texture::Gradient:
      return mix(p.color, p.color2, std::clamp(cu / extent_u, 0.0, 1.0));
    case Texture::Stripes: {
      const long k = static_cast<long>(std::floor(cv / p.texture_scale));
      return (k & 1) ? p.color2 : p.color;
    }
  }
  return p.color;
}

/// Fixed image-space vertical gradient used where no primitive is hit.
inline Vec3 background_color(std::size_t row, std::size_t height) {
  const double y = height > 1 ? static_cast<double>(row) / static_cast<double>(height - 1) : 0.0;
  return {0.62 - 0.30 * y, 0.72 - 0.30 * y, 0.92 - 0.25 * y};
}

struct Hit {
  double s = std::numeric_limits<double>::infinity();
  int primitive = -1;
};

inline Hit cast(const SyntheticScene& scene, const Ray& ray) {
  Hit best;
  for (std::size_t i = 0; i < scene.primitives.size(); ++i) {
    if (auto s = intersect(scene.primitives[i], ray); s && *s < best.s) {
      best.s = *s;
      best.primitive = static_cast<int>(i);
    }
  }
  return best;
}

inline RenderedFrame render_frame(const SyntheticScene& scene, const CameraFrame& cam, std::size_t h, std::size_t w) {
  RenderedFrame f{Tensor({3, h, w}), Tensor({h, w}), cam};
  for (std::size_t v = 0; v < h; ++v) {
    const Vec3 bg = background_color(v, h);
    for (std::size_t u = 0; u < w; ++u) {
      const Ray ray = pixel_ray(static_cast<double>(u), static_cast<double>(v), cam);
      const Hit hit = cast(scene, ray);
      Vec3 c = bg;
      if (hit.primitive >= 0) {
        const Vec3 x = ray.origin + hit.s * ray.direction;
        c = shade(scene.primitives[static_cast<std::size_t>(hit.primitive)], x);
        f.depth.at(v, u) = hit.s;
      }
      for (std::size_t ch = 0; ch < 3; ++ch) f.color[(ch * h + v) * w + u] = c[ch];
    }
  }
  return f;
}

/// Ground-truth color and z-depth for every trajectory frame.
inline std::vector<RenderedFrame> render_gt(const SyntheticScene& scene, const Trajectory& traj, std::size_t h, std::size_t w) {
  if (h < 8 || w < 8) throw InvalidArgument("render_gt requires H, W >= 8");
  traj.validate();
  std::vector<RenderedFrame> out;
  out.reserve(traj.size());
  for (const auto& cam : traj.frames) {
    if (cam.intrinsics.width != static_cast<int>(w) || cam.intrinsics.height != static_cast<int>(h)) {
      throw InvalidArgument("render_gt: trajectory intrinsics do not match the requested image size");
    }
    out.push_back(render_frame(scene, cam, h, w));
  }
  return out;
}

/// Stacks per-frame colors into a [F, 3, H, W] video.
inline VideoTensor stack_colors(const std::vector<RenderedFrame>& frames) {
  if (frames.empty()) throw InvalidShape("stack_colors: no frames");
  const auto& s = frames[0].color.shape();
  VideoTensor v({frames.size(), s[0], s[1], s[2]});
  const std::size_t n = frames[0].color.size();
  for (std::size_t f = 0; f < frames.size(); ++f)
    std::copy(frames[f].color.data().begin(), frames[f].color.data().end(), v.data().begin() + static_cast<long>(f * n));
  return v;
}

inline Tensor stack_depths(const std::vector<RenderedFrame>& frames) {
  if (frames.empty()) throw InvalidShape("stack_depths: no frames");
  const auto& s = frames[0].depth.shape();
  Tensor v({frames.size(), s[0], s[1]});
  const std::size_t n = frames[0].depth.size();
  for (std::size_t f = 0; f < frames.size(); ++f)
    std::copy(frames[f].depth.data().begin(), frames[f].depth.data().end(), v.data().begin() + static_cast<long>(f * n));
  return v;
}

/// Frame f of a [F, ...] tensor.
inline Tensor frame_of(const Tensor& video, std::size_t f) {
  Shape s(video.shape().begin() + 1, video.shape().end());
  const std::size_t n = shape_size(s);
  if (f >= video.dim(0)) throw InvalidShape("frame index out of range");
  return Tensor(s, std::vector<double>(video.data().begin() + static_cast<long>(f * n),
                                       video.data().begin() + static_cast<long>((f + 1) * n)));
}

// ---------------------------------------------------------------------------
// Scene JSON
// ---------------------------------------------------------------------------

inline nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v[0], v[1], v[2]}); }

inline Vec3 json_vec(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

inline nlohmann::json scene_to_json(const SyntheticScene& s) {
  nlohmann::json j;
  j["seed"] = s.seed;
  j["bounds"] = {{"min", vec_json(s.bounds.min)}, {"max", vec_json(s.bounds.max)}};
  auto& prims = j["primitives"] = nlohmann::json::array();
  for (const auto& p : s.primitives) {
    nlohmann::json e;
    e["type"] = p.type == PrimitiveType::Rect ? "rect" : "sphere";
    e["center"] = vec_json(p.center);
    if (p.type == PrimitiveType::Rect) {
      e["axis"] = p.axis;
      e["size"] = {p.half_u, p.half_v};
    } else {
      e["radius"] = p.radius;
    }
    e["texture"] = static_cast<int>(p.texture);
    e["texture_scale"] = p.texture_scale;
    e["color"] = vec_json(p.color);
    e["color2"] = vec_json(p.color2);
    prims.push_back(e);
  }
  return j;
}

inline SyntheticScene scene_from_json(const nlohmann::json& j) {
  try {
    SyntheticScene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.bounds.min = json_vec(j.at("bounds").at("min"));
    s.bounds.max = json_vec(j.at("bounds").at("max"));
    for (const auto& e : j.at("primitives")) {
      Primitive p;
      const auto type = e.at("type").get<std::string>();
      if (type == "rect") {
        p.type = PrimitiveType::Rect;
        p.axis = e.at("axis").get<int>();
        p.half_u = e.at("size").at(0).get<double>();
        p.half_v = e.at("size").at(1).get<double>();
      } else if (type == "sphere") {
        p.type = PrimitiveType::Sphere;
        p.radius = e.at("radius").get<double>();
      } else {
        throw FormatError("scene: unknown primitive type '" + type + "'");
      }
      p.center = json_vec(e.at("center"));
      p.texture = static_cast<Texture>(e.at("texture").get<int>());
      p.texture_scale = e.at("texture_scale").get<double>();
      p.color = json_vec(e.at("color"));
      p.color2 = json_vec(e.at("color2"));
      s.primitives.push_back(p);
    }
    if (s.primitives.empty()) throw FormatError("scene: no primitives");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scene schema error: ") + e.what());
  }
}

}  // namespace geoworld
