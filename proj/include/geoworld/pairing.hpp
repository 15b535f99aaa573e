#pragma once

#include "geoworld/camera.hpp"
#include "geoworld/pointrender.hpp"
#include "geoworld/scene.hpp"

namespace geoworld {

/// Partial renders of one lifted view alongside the ground-truth video they
/// should be completed into.
struct TrainingPair {
  VideoTensor condition_input;  // [F, 3, H, W]
  Tensor condition_mask;        // [F, 1, H, W]; 1 where the partial render wrote a pixel
  VideoTensor target;           // [F, 3, H, W]
  Tensor target_depth;          // [F, H, W]
  Trajectory trajectory;
  int reference_index = 0;

  std::size_t frames() const { return target.dim(0); }
};

inline constexpr int kDefaultSplatRadius = 1;

/// Lifts the reference frame's ground truth and re-renders it along the trajectory.
inline TrainingPair build_training_pair(const SyntheticScene& scene, const Trajectory& traj, std::size_t h, std::size_t w,
                                        int reference_index, int radius = kDefaultSplatRadius) {
  if (reference_index < 0 || static_cast<std::size_t>(reference_index) >= traj.size()) {
    throw InvalidArgument("reference index outside the trajectory");
  }
  const auto gt = render_gt(scene, traj, h, w);
  const PointCloud cloud = lift(gt[static_cast<std::size_t>(reference_index)]);
  std::vector<RenderedFrame> partial;
  partial.reserve(traj.size());
  for (const auto& cam : traj.frames) partial.push_back(splat_render(cloud, cam, h, w, radius));

  TrainingPair pair;
  pair.condition_input = stack_colors(partial);
  pair.condition_mask = Tensor({traj.size(), 1, h, w});
  for (std::size_t f = 0; f < partial.size(); ++f)
    for (std::size_t i = 0; i < h * w; ++i) pair.condition_mask[f * h * w + i] = partial[f].depth[i] > 0 ? 1.0 : 0.0;
  pair.target = stack_colors(gt);
  pair.target_depth = stack_depths(gt);
  pair.trajectory = traj;
  pair.reference_index = reference_index;
  return pair;
}

}  // namespace geoworld
