#pragma once

// Pinhole camera model. Conventions: world-to-camera rigid poses, camera +z
// looks forward, +x right, +y down; image origin is the top-left pixel and
// pixel centers sit at integer coordinates.

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "geoworld/errors.hpp"
#include "json.hpp"

namespace geoworld {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

inline Vec3 mul(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Vec3 mul_transposed(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2], m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
          m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

inline Mat3 mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
  return c;
}

inline Mat3 transpose(const Mat3& a) { return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]}; }

inline Mat3 identity3() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline double det(const Mat3& m) {
  return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6]);
}

/// Rotation about +y by `radians`.
inline Mat3 yaw_matrix(double radians) {
  const double c = std::cos(radians), s = std::sin(radians);
  return {c, 0, s, 0, 1, 0, -s, 0, c};
}

/// Rotation about +x by `radians`.
inline Mat3 pitch_matrix(double radians) {
  const double c = std::cos(radians), s = std::sin(radians);
  return {1, 0, 0, 0, c, -s, 0, s, c};
}

inline double orthonormality_error(const Mat3& r) {
  const Mat3 rtr = mul(transpose(r), r);
  const Mat3 id = identity3();
  double e = 0.0;
  for (int i = 0; i < 9; ++i) e = std::max(e, std::abs(rtr[i] - id[i]));
  return std::max(e, std::abs(det(r) - 1.0));
}

struct Intrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  int width = 1, height = 1;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw InvalidArgument("intrinsics: focal lengths must be positive");
    if (width < 1 || height < 1) throw InvalidArgument("intrinsics: image size must be positive");
    if (!(cx >= 0 && cx < width && cy >= 0 && cy < height)) throw InvalidArgument("intrinsics: principal point outside image");
  }

  /// Default camera for a w x h image: principal point at the center, focal = 0.8 * w.
  static Intrinsics centered(int w, int h, double focal_scale = 0.8) {
    return {focal_scale * w, focal_scale * w, (w - 1) * 0.5, (h - 1) * 0.5, w, h};
  }

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

/// World-to-camera rigid transform: q = R p + t.
struct Pose {
  Mat3 rotation = identity3();
  Vec3 translation{0, 0, 0};

  static constexpr double kTolerance = 1e-10;

  void validate() const {
    if (orthonormality_error(rotation) > kTolerance) throw InvalidArgument("pose rotation is not orthonormal with det +1");
  }

  Vec3 apply(const Vec3& p) const { return mul(rotation, p) + translation; }
  Vec3 apply_inverse(const Vec3& q) const { return mul_transposed(rotation, q - translation); }
  Vec3 center() const { return -1.0 * mul_transposed(rotation, translation); }

  /// Pose of (this after other): first other, then this.
  Pose compose(const Pose& other) const {
    return {mul(rotation, other.rotation), mul(rotation, other.translation) + translation};
  }

  friend bool operator==(const Pose&, const Pose&) = default;
};

struct CameraFrame {
  Intrinsics intrinsics;
  Pose pose;
  int frame_index = 0;

  friend bool operator==(const CameraFrame&, const CameraFrame&) = default;
};

struct Trajectory {
  std::vector<CameraFrame> frames;

  std::size_t size() const { return frames.size(); }
  const CameraFrame& operator[](std::size_t i) const { return frames[i]; }

  void validate() const {
    if (frames.empty()) throw InvalidArgument("trajectory has no frames");
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (frames[i].frame_index != static_cast<int>(i)) throw InvalidArgument("trajectory frame indices must be 0..F-1 in order");
      frames[i].intrinsics.validate();
      frames[i].pose.validate();
    }
  }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct Projection {
  double u, v, depth;
};

inline constexpr double kMinDepth = 1e-9;

inline Projection project(const Vec3& p_world, const CameraFrame& cam) {
  const Vec3 q = cam.pose.apply(p_world);
  if (q[2] <= kMinDepth) throw BehindCamera("point is behind the camera (z = " + std::to_string(q[2]) + ")");
  const auto& k = cam.intrinsics;
  return {k.fx * q[0] / q[2] + k.cx, k.fy * q[1] / q[2] + k.cy, q[2]};
}

inline Vec3 backproject(double u, double v, double depth, const CameraFrame& cam) {
  if (!(depth > 0)) throw InvalidDepth("back-projection requires positive depth");
  const auto& k = cam.intrinsics;
  const Vec3 q{(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth};
  return cam.pose.apply_inverse(q);
}

/// Unit-free ray through pixel (u, v): origin is the camera center and the
/// direction has camera-space z component 1, so a hit at parameter s has depth s.
struct Ray {
  Vec3 origin;
  Vec3 direction;
};

inline Ray pixel_ray(double u, double v, const CameraFrame& cam) {
  const auto& k = cam.intrinsics;
  const Vec3 d_cam{(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0};
  return {cam.pose.center(), mul_transposed(cam.pose.rotation, d_cam)};
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

enum class TrajectoryKind { Orbit, Dolly, Pan };

inline TrajectoryKind parse_trajectory_kind(const std::string& s) {
  if (s == "orbit") return TrajectoryKind::Orbit;
  if (s == "dolly") return TrajectoryKind::Dolly;
  if (s == "pan") return TrajectoryKind::Pan;
  throw InvalidArgument("unknown trajectory kind '" + s + "'");
}

inline const char* to_string(TrajectoryKind k) {
  switch (k) {
    case TrajectoryKind::Orbit: return "orbit";
    case TrajectoryKind::Dolly: return "dolly";
    case TrajectoryKind::Pan: return "pan";
  }
  return "?";
}

struct MotionParams {
  /// Orbit and pan: total yaw in degrees. Dolly: total forward travel in scene units.
  double magnitude = 0.0;
  /// Orbit pivot distance ahead of the reference camera.
  double orbit_radius = 3.0;
  /// Pan: lateral travel (scene units, +x) applied alongside the yaw.
  double lateral = 0.0;
  Intrinsics intrinsics = Intrinsics::centered(80, 48);
  Pose reference{};
};

/// Frame 0 is the reference camera; frame i applies fraction i/(F-1) of the
/// motion, expressed in the reference camera's coordinates.
inline Trajectory make_trajectory(TrajectoryKind kind, int frames, const MotionParams& params) {
  if (frames < 1) throw InvalidArgument("trajectory needs at least one frame");
  if (!std::isfinite(params.magnitude) || !std::isfinite(params.orbit_radius) || !std::isfinite(params.lateral)) {
    throw InvalidArgument("trajectory magnitudes must be finite");
  }
  params.intrinsics.validate();
  params.reference.validate();
  const Mat3 ref_c2w = transpose(params.reference.rotation);
  const Vec3 ref_center = params.reference.center();
  Trajectory traj;
  traj.frames.reserve(static_cast<std::size_t>(frames));
  for (int i = 0; i < frames; ++i) {
    const double a = frames == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(frames - 1);
    Mat3 rot = identity3();  // camera-to-reference rotation
    Vec3 center{0, 0, 0};    // camera center in reference coordinates
    switch (kind) {
      case TrajectoryKind::Orbit: {
        rot = yaw_matrix(a * params.magnitude * M_PI / 180.0);
        const Vec3 pivot{0, 0, params.orbit_radius};
        center = pivot + mul(rot, Vec3{0, 0, -params.orbit_radius});
        break;
      }
      case TrajectoryKind::Dolly:
        center = {0, 0, a * params.magnitude};
        break;
      case TrajectoryKind::Pan:
        rot = yaw_matrix(a * params.magnitude * M_PI / 180.0);
        center = {a * params.lateral, 0, 0};
        break;
    }
    CameraFrame cam;
    cam.intrinsics = params.intrinsics;
    cam.frame_index = i;
    if (i == 0) {
      cam.pose = params.reference;
    } else {
      const Mat3 c2w = mul(ref_c2w, rot);
      const Vec3 c = mul(ref_c2w, center) + ref_center;
      cam.pose.rotation = transpose(c2w);
      cam.pose.translation = -1.0 * mul(cam.pose.rotation, c);
    }
    traj.frames.push_back(cam);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trajectory_to_json(const Trajectory& t) {
  std::ostringstream os;
  os << "{\"frames\":[\n";
  for (std::size_t i = 0; i < t.frames.size(); ++i) {
    const auto& f = t.frames[i];
    const auto& k = f.intrinsics;
    os << "{\"index\":" << f.frame_index << ",\"intrinsics\":{\"fx\":" << format_double(k.fx)
       << ",\"fy\":" << format_double(k.fy) << ",\"cx\":" << format_double(k.cx) << ",\"cy\":" << format_double(k.cy)
       << ",\"width\":" << k.width << ",\"height\":" << k.height << "},\"rotation\":[";
    for (int j = 0; j < 9; ++j) os << (j ? "," : "") << format_double(f.pose.rotation[j]);
    os << "],\"translation\":[";
    for (int j = 0; j < 3; ++j) os << (j ? "," : "") << format_double(f.pose.translation[j]);
    os << "]}" << (i + 1 < t.frames.size() ? "," : "") << "\n";
  }
  os << "]}\n";
  return os.str();
}

inline long line_of_offset(const std::string& text, std::size_t offset) {
  long line = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

inline Trajectory trajectory_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("trajectory parse error: ") + e.what(), line_of_offset(text, e.byte));
  }
  Trajectory t;
  try {
    const auto& frames = j.at("frames");
    if (!frames.is_array() || frames.empty()) throw FormatError("trajectory: empty frame list");
    for (const auto& f : frames) {
      CameraFrame cam;
      cam.frame_index = f.at("index").get<int>();
      const auto& k = f.at("intrinsics");
      cam.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(), k.at("cx").get<double>(),
                        k.at("cy").get<double>(), k.at("width").get<int>(), k.at("height").get<int>()};
      const auto& r = f.at("rotation");
      const auto& tr = f.at("translation");
      if (r.size() != 9 || tr.size() != 3) throw FormatError("trajectory: rotation needs 9 and translation 3 values");
      for (int i = 0; i < 9; ++i) cam.pose.rotation[i] = r.at(i).get<double>();
      for (int i = 0; i < 3; ++i) cam.pose.translation[i] = tr.at(i).get<double>();
      t.frames.push_back(cam);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("trajectory schema error: ") + e.what());
  }
  for (std::size_t i = 0; i < t.frames.size(); ++i) {
    try {
      if (t.frames[i].frame_index != static_cast<int>(i)) throw InvalidArgument("frame indices must be 0..F-1 in order");
      t.frames[i].intrinsics.validate();
      t.frames[i].pose.validate();
    } catch (const InvalidArgument& e) {
      // Report the line holding the i-th "index" key.
      std::size_t pos = 0;
      for (std::size_t k = 0; k <= i && pos != std::string::npos; ++k) {
        pos = text.find("\"index\"", k == 0 ? 0 : pos + 1);
      }
      throw FormatError("trajectory frame " + std::to_string(i) + ": " + e.what(),
                        pos == std::string::npos ? -1 : line_of_offset(text, pos));
    }
  }
  return t;
}

inline void save_trajectory(const Trajectory& t, const std::string& path) {
  t.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << trajectory_to_json(t);
  if (!out) throw IoError("write failed for " + path);
}

inline Trajectory load_trajectory(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return trajectory_from_json(ss.str());
}

}  // namespace geoworld
