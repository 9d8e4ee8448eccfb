#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "invflow/codec.hpp"
#include "invflow/geometry.hpp"

namespace invflow {

// Analytic primitive. Unused fields stay at their defaults for other types.
struct Shape {
  enum class Type { kSphere, kPlane, kBox };
  Type type = Type::kSphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();  // sphere/box; plane point
  double radius = 1.0;                               // sphere
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ(); // plane
  Eigen::Vector3d half_extents = Eigen::Vector3d::Ones();  // box
  Eigen::Matrix3d orientation = Eigen::Matrix3d::Identity();  // box
  double albedo = 0.8;

  static Shape Sphere(const Eigen::Vector3d& center, double radius,
                      double albedo);
  static Shape Plane(const Eigen::Vector3d& point, const Eigen::Vector3d& normal,
                     double albedo);
  static Shape Box(const Eigen::Vector3d& center,
                   const Eigen::Vector3d& half_extents,
                   const Eigen::Matrix3d& orientation, double albedo);
};

struct ViewSpec {
  RigidPose pose;                  // world -> camera
  Eigen::Vector3d light_pos = Eigen::Vector3d::Zero();  // world units
};

struct SceneSpec {
  std::vector<Shape> shapes;
  Intrinsics K;
  std::array<ViewSpec, 2> views;
  int width = 0, height = 0;
  bool light_falloff = false;  // optional 1/r^2 attenuation

  void Validate() const;  // throws kDegenerateInput / kCalibration
};

struct RenderedPair {
  SceneView view0, view1;
  FlowField gt_flow;       // 0 -> 1, masked to co-visible pixels
  FlowField gt_flow_back;  // 1 -> 0
  RigidPose gt_pose;       // relative pose, V1 = R V0 + t
};

// Camera pose at `position` looking at `target`, x right, y down, z forward.
RigidPose LookAtPose(const Eigen::Vector3d& position,
                     const Eigen::Vector3d& target,
                     const Eigen::Vector3d& up = Eigen::Vector3d::UnitZ());

// Ray-cast render of one view: depth is Euclidean ray length, normals are
// camera-frame and camera-facing, image is Lambertian + 8-bit quantization.
SceneView RenderView(const SceneSpec& spec, int view_index);

// Both views plus ground-truth flow (z-buffer co-visibility) and pose.
RenderedPair RenderPair(const SceneSpec& spec);

// Reproducible random scene: ground plane, a sphere and a box, orbiting
// cameras whose relative rotation angle lands in [min_rot_deg, max_rot_deg].
// With consistent_light the point light stays fixed between the views;
// otherwise it swings to a distinctly different direction.
SceneSpec StandardScene(uint64_t seed, double min_rot_deg, double max_rot_deg,
                        bool consistent_light, int resolution);

// Like StandardScene but scatters many small spheres and boxes of varied
// albedo over the ground plane. The dense silhouette, depth, and albedo
// edges give patch matching two-dimensional structure everywhere, which the
// three-shape scene lacks.
SceneSpec ClutteredScene(uint64_t seed, double min_rot_deg, double max_rot_deg,
                         bool consistent_light, int resolution);

}  // namespace invflow
