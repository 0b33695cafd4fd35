#pragma once

#include "lerf/common.hpp"
#include "lerf/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lerf {

// Camera convention: right-handed, the camera looks down -z with +y up.
// Poses are stored camera-to-world. Pixel (u, v) covers [u, u+1) x [v, v+1);
// its center is at (u + 0.5, v + 0.5).

struct CameraIntrinsics {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const;
  /// Single focal length used for frustum scaling.
  double focal() const { return std::sqrt(fx * fy); }
  int min_side() const { return width < height ? width : height; }
};

struct CameraPose {
  Mat4 camera_to_world = Mat4::Identity();

  Mat3 rotation() const { return camera_to_world.topLeftCorner<3, 3>(); }
  Vec3 center() const { return camera_to_world.topRightCorner<3, 1>(); }
};

struct Frame {
  Image image;
  CameraPose pose;
  CameraIntrinsics intrinsics;
  int frame_id = 0;
  std::string file_path;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = -Vec3::UnitZ();
  int u = 0, v = 0;
  int frame_id = 0;
};

struct SceneDataset {
  std::vector<Frame> frames;
  /// Meters per dataset unit.
  double scene_scale = 1.0;

  const Frame& frame_by_id(int id) const;
};

/// Loads a transforms.json manifest and its PNG images. Rotations are projected
/// to the nearest orthonormal matrix; reflections and singular blocks are rejected.
SceneDataset load_dataset(const std::filesystem::path& manifest_path);

/// Loads only the manifest (poses and intrinsics); images are left empty.
SceneDataset load_manifest(const std::filesystem::path& manifest_path);

/// Writes a manifest plus one PNG per frame next to it, using each frame's file_path.
void write_dataset(const std::filesystem::path& manifest_path, const SceneDataset& dataset);

/// Nearest rotation to `m` (polar factor). Throws if `m` is singular or has det <= 0.
Mat3 orthonormalize(const Mat3& m);

Ray generate_ray(const CameraPose& pose, const CameraIntrinsics& intrinsics, int u, int v);
inline Ray generate_ray(const Frame& frame, int u, int v) {
  Ray r = generate_ray(frame.pose, frame.intrinsics, u, v);
  r.frame_id = frame.frame_id;
  return r;
}

/// Projects a world point into pixel-index coordinates (the inverse of generate_ray,
/// so the center of pixel (u,v) maps to (u,v)). Returns nullopt for points at or behind
/// the camera plane.
std::optional<Vec2> project(const CameraPose& pose, const CameraIntrinsics& intrinsics, const Vec3& point);

/// Scene contraction into the ball of radius 2: identity inside the unit ball,
/// (2 - 1/|x|) x/|x| outside.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, 3, 1> contract(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (!x.allFinite()) throw Error("contract: non-finite input");
  const Scalar norm = x.stableNorm();
  if (norm <= Scalar(1)) return x;
  // Keep the radius strictly below 2 even when 1/|x| underflows relative to 2.
  const Scalar cap = Scalar(2) * (Scalar(1) - Scalar(4) * std::numeric_limits<Scalar>::epsilon());
  const Scalar radius = std::min(Scalar(2) - Scalar(1) / norm, cap);
  return radius * (x / norm);
}

}  // namespace lerf
