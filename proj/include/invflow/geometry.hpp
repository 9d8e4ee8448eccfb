#pragma once

#include <utility>

#include <Eigen/Core>

#include "invflow/maps.hpp"

namespace invflow {

// Pinhole intrinsics. Pixel (x, y) back-projects along K^-1 (x, y, 1)^T.
struct Intrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;

  Eigen::Matrix3d Matrix() const;
  // Accepts an upper-triangular K; throws kCalibration if fx or fy <= 0.
  static Intrinsics FromMatrix(const Eigen::Matrix3d& K);
};

// Camera pose: maps world points into the camera frame, x_cam = R x_world + t.
struct RigidPose {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  Eigen::Matrix4d Homogeneous() const;
  RigidPose Inverse() const;
  bool IsValidRotation(double tol = 1e-9) const;
};

// Rotations about x, y, z; the composite rotation is Rx(theta)*Ry(rho)*Rz(phi).
struct EulerAngles {
  double theta = 0.0;
  double rho = 0.0;
  double phi = 0.0;
};

// Lifts ray-length depth to camera-frame positions:
// V(x,y) = unit(K^-1 (x,y,1)^T) * D(x,y). Depth is Euclidean distance along
// the ray, not the z coordinate.
VertexMap DepthToVertices(const DepthMap& depth, const Intrinsics& intrinsics);

// Cross product of central differences on the vertex grid, unit-normalized
// and flipped so that n . V < 0 (facing the camera). A pixel needs all four
// axis neighbors and itself valid; otherwise it is masked.
NormalMap NormalsFromVertices(const VertexMap& vertices);

// Re-expresses camera-frame data in the world frame:
// V -> -R^T t + R^T V, N -> R^T N.
std::pair<VertexMap, NormalMap> WorldTransform(const RigidPose& pose,
                                               const VertexMap& vertices,
                                               const NormalMap& normals);

// Pose taking frame-0 camera coordinates to frame-1: R01 = R1 R0^T,
// t01 = t1 - R1 R0^T t0, so V1 = R01 V0 + t01.
RigidPose RelativePose(const RigidPose& pose0, const RigidPose& pose1);

// Per valid pixel, R V + t.
VertexMap ApplyPose(const RigidPose& pose, const VertexMap& vertices);

// Applies a correction on top of a base pose: R^ = Rc R, t^ = Rc t + tc.
RigidPose ComposeCorrection(const RigidPose& correction, const RigidPose& base);

Eigen::Matrix3d EulerToRotation(const EulerAngles& angles);

// Inverse of EulerToRotation on the |rho| < pi/2 branch.
// Throws kGimbalLock when |R(0,2)| = 1 within 1e-9.
EulerAngles RotationToEuler(const Eigen::Matrix3d& R);

// Rotation angle in [0, pi] via atan2(|u|, trace - 1) where u is the
// unnormalized axis read off the antisymmetric part. Stable near 0 and pi.
double RotationAngle(const Eigen::Matrix3d& R);

}  // namespace invflow
