#include <gtest/gtest.h>

#include "geoworld/pairing.hpp"
#include "geoworld/recon.hpp"
#include "geoworld/scene.hpp"

using namespace geoworld;

namespace {

Trajectory still(int frames, int w, int h) {
  MotionParams mp;
  mp.intrinsics = Intrinsics::centered(w, h);
  return make_trajectory(TrajectoryKind::Dolly, frames, mp);
}

}  // namespace

TEST(Scene, Deterministic) { EXPECT_EQ(generate_scene(5), generate_scene(5)); }

TEST(Scene, SeedSensitive) {
  const auto a = generate_scene(0), b = generate_scene(1);
  EXPECT_NE(a.primitives, b.primitives);
}

TEST(Scene, CentroidsInsideBounds) {
  for (std::uint64_t seed : {42ULL, 0ULL, 7ULL, 123456ULL}) {
    const auto s = generate_scene(seed);
    for (const auto& p : s.primitives) EXPECT_TRUE(s.bounds.contains(centroid(p))) << seed;
  }
}

TEST(Scene, JsonRoundTrip) {
  const auto s = generate_scene(9);
  EXPECT_EQ(scene_from_json(nlohmann::json::parse(scene_to_json(s).dump())), s);
}

TEST(Render, SphereOnAxisDepth) {
  SyntheticScene s;
  Primitive p;
  p.type = PrimitiveType::Sphere;
  p.center = {0, 0, 3};
  p.radius = 1.0;
  s.primitives.push_back(p);
  // 9x9 image: the principal point (4, 4) is a pixel center.
  const auto frames = render_gt(s, still(1, 9, 9), 9, 9);
  EXPECT_NEAR(frames[0].depth.at(4, 4), 2.0, 1e-9);
  EXPECT_EQ(frames[0].depth.at(0, 0), 0.0);
}

TEST(Render, StillTrajectoryGivesIdenticalFrames) {
  const auto frames = render_gt(generate_scene(3), still(4, 16, 12), 12, 16);
  for (const auto& f : frames) {
    EXPECT_EQ(f.color, frames[0].color);
    EXPECT_EQ(f.depth, frames[0].depth);
  }
}

TEST(Render, BitIdenticalReRender) {
  MotionParams mp;
  mp.magnitude = 15;
  mp.intrinsics = Intrinsics::centered(20, 12);
  const auto t = make_trajectory(TrajectoryKind::Orbit, 3, mp);
  const auto a = render_gt(generate_scene(4), t, 12, 20), b = render_gt(generate_scene(4), t, 12, 20);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].color, b[i].color);
}

TEST(Render, ColorsInUnitRange) {
  const auto f = render_gt(generate_scene(8), still(1, 32, 24), 24, 32)[0];
  for (double v : f.color.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Render, RejectsTinyImagesAndMismatchedIntrinsics) {
  EXPECT_THROW(render_gt(generate_scene(1), still(1, 4, 4), 4, 4), InvalidArgument);
  EXPECT_THROW(render_gt(generate_scene(1), still(1, 16, 16), 12, 16), InvalidArgument);
}

TEST(Pair, ReferenceFrameReproducesGroundTruth) {
  MotionParams mp;
  mp.magnitude = 20;
  mp.intrinsics = Intrinsics::centered(80, 48);
  const auto scene = generate_scene(11);
  const auto pair = build_training_pair(scene, make_trajectory(TrajectoryKind::Orbit, 17, mp), 48, 80, 0);
  EXPECT_EQ(pair.condition_input.dim(0), 17u);
  EXPECT_EQ(pair.target.dim(0), 17u);
  const Tensor mask = frame_of(pair.target_depth, 0);
  Tensor hit(mask.shape());
  for (std::size_t i = 0; i < hit.size(); ++i) hit[i] = mask[i] > 0 ? 1.0 : 0.0;
  EXPECT_GT(psnr_masked(frame_of(pair.condition_input, 0), frame_of(pair.target, 0), hit), 40.0);
}

TEST(Pair, StillTrajectoryRepeatsConditionFrame) {
  const auto pair = build_training_pair(generate_scene(12), still(17, 80, 48), 48, 80, 0);
  const Tensor first = frame_of(pair.condition_input, 0);
  for (std::size_t f = 1; f < 17; ++f) EXPECT_EQ(frame_of(pair.condition_input, f), first);
}

TEST(Pair, MaskMarksWrittenPixels) {
  MotionParams mp;
  mp.magnitude = 1.0;
  mp.intrinsics = Intrinsics::centered(32, 24);
  const auto pair = build_training_pair(generate_scene(13), make_trajectory(TrajectoryKind::Dolly, 3, mp), 24, 32, 0);
  EXPECT_EQ(pair.condition_mask.shape(), (Shape{3, 1, 24, 32}));
  for (double v : pair.condition_mask.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  EXPECT_THROW(build_training_pair(generate_scene(13), make_trajectory(TrajectoryKind::Dolly, 3, mp), 24, 32, 3), InvalidArgument);
}
