#include "invflow/geometry.hpp"

#include <cmath>

#include <Eigen/Geometry>

#include "invflow/error.hpp"

namespace invflow {

Eigen::Matrix3d Intrinsics::Matrix() const {
  Eigen::Matrix3d K;
  K << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return K;
}

Intrinsics Intrinsics::FromMatrix(const Eigen::Matrix3d& K) {
  Intrinsics in{K(0, 0), K(1, 1), K(0, 2), K(1, 2)};
  if (!(in.fx > 0.0) || !(in.fy > 0.0))
    throw Error(ErrorCategory::kCalibration, "intrinsics need fx > 0, fy > 0");
  return in;
}

Eigen::Matrix4d RigidPose::Homogeneous() const {
  Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
  T.topLeftCorner<3, 3>() = R;
  T.topRightCorner<3, 1>() = t;
  return T;
}

RigidPose RigidPose::Inverse() const {
  return {R.transpose(), -(R.transpose() * t)};
}

bool RigidPose::IsValidRotation(double tol) const {
  const double ortho =
      (R.transpose() * R - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return ortho < tol && std::abs(R.determinant() - 1.0) < tol;
}

VertexMap DepthToVertices(const DepthMap& depth, const Intrinsics& intrinsics) {
  if (!(intrinsics.fx > 0.0) || !(intrinsics.fy > 0.0))
    throw Error(ErrorCategory::kCalibration, "intrinsics need fx > 0, fy > 0");
  const int w = depth.Width(), h = depth.Height();
  VertexMap out{Vec3Map(w, h, Eigen::Vector3d::Zero()), depth.mask};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!depth.mask.At(x, y)) continue;
      Eigen::Vector3d ray((x - intrinsics.cx) / intrinsics.fx,
                          (y - intrinsics.cy) / intrinsics.fy, 1.0);
      out.values.At(x, y) = ray / ray.norm() * depth.values.At(x, y);
    }
  }
  return out;
}

NormalMap NormalsFromVertices(const VertexMap& vertices) {
  const int w = vertices.Width(), h = vertices.Height();
  NormalMap out{Vec3Map(w, h, Eigen::Vector3d::Zero()), Mask(w, h, 0)};
  for (int y = 1; y + 1 < h; ++y) {
    for (int x = 1; x + 1 < w; ++x) {
      if (!vertices.mask.At(x, y) || !vertices.mask.At(x - 1, y) ||
          !vertices.mask.At(x + 1, y) || !vertices.mask.At(x, y - 1) ||
          !vertices.mask.At(x, y + 1))
        continue;
      const Eigen::Vector3d du =
          vertices.values.At(x + 1, y) - vertices.values.At(x - 1, y);
      const Eigen::Vector3d dv =
          vertices.values.At(x, y + 1) - vertices.values.At(x, y - 1);
      Eigen::Vector3d n = du.cross(dv);
      const double len = n.norm();
      if (len < 1e-15) continue;  // flat cross product, leave masked
      n /= len;
      if (n.dot(vertices.values.At(x, y)) > 0.0) n = -n;
      out.values.At(x, y) = n;
      out.mask.At(x, y) = 1;
    }
  }
  return out;
}

std::pair<VertexMap, NormalMap> WorldTransform(const RigidPose& pose,
                                               const VertexMap& vertices,
                                               const NormalMap& normals) {
  const Eigen::Matrix3d Rt = pose.R.transpose();
  const Eigen::Vector3d origin = -(Rt * pose.t);
  VertexMap v_out{Vec3Map(vertices.Width(), vertices.Height(),
                          Eigen::Vector3d::Zero()),
                  vertices.mask};
  for (int y = 0; y < vertices.Height(); ++y)
    for (int x = 0; x < vertices.Width(); ++x)
      if (vertices.mask.At(x, y))
        v_out.values.At(x, y) = origin + Rt * vertices.values.At(x, y);
  NormalMap n_out{Vec3Map(normals.Width(), normals.Height(),
                          Eigen::Vector3d::Zero()),
                  normals.mask};
  for (int y = 0; y < normals.Height(); ++y)
    for (int x = 0; x < normals.Width(); ++x)
      if (normals.mask.At(x, y))
        n_out.values.At(x, y) = Rt * normals.values.At(x, y);
  return {std::move(v_out), std::move(n_out)};
}

RigidPose RelativePose(const RigidPose& pose0, const RigidPose& pose1) {
  const Eigen::Matrix3d R01 = pose1.R * pose0.R.transpose();
  return {R01, pose1.t - R01 * pose0.t};
}

VertexMap ApplyPose(const RigidPose& pose, const VertexMap& vertices) {
  VertexMap out{Vec3Map(vertices.Width(), vertices.Height(),
                        Eigen::Vector3d::Zero()),
                vertices.mask};
  for (int y = 0; y < vertices.Height(); ++y)
    for (int x = 0; x < vertices.Width(); ++x)
      if (vertices.mask.At(x, y))
        out.values.At(x, y) = pose.R * vertices.values.At(x, y) + pose.t;
  return out;
}

RigidPose ComposeCorrection(const RigidPose& correction, const RigidPose& base) {
  return {correction.R * base.R, correction.R * base.t + correction.t};
}

Eigen::Matrix3d EulerToRotation(const EulerAngles& angles) {
  const double ct = std::cos(angles.theta), st = std::sin(angles.theta);
  const double cr = std::cos(angles.rho), sr = std::sin(angles.rho);
  const double cp = std::cos(angles.phi), sp = std::sin(angles.phi);
  Eigen::Matrix3d Rx, Ry, Rz;
  Rx << 1, 0, 0, 0, ct, -st, 0, st, ct;
  Ry << cr, 0, sr, 0, 1, 0, -sr, 0, cr;
  Rz << cp, -sp, 0, sp, cp, 0, 0, 0, 1;
  return Rx * Ry * Rz;
}

EulerAngles RotationToEuler(const Eigen::Matrix3d& R) {
  if (std::abs(std::abs(R(0, 2)) - 1.0) < 1e-9)
    throw Error(ErrorCategory::kGimbalLock,
                "Euler extraction undefined at |rho| = pi/2");
  EulerAngles a;
  a.theta = std::atan2(-R(1, 2), R(2, 2));
  a.rho = std::atan2(R(0, 2), std::sqrt(R(1, 2) * R(1, 2) + R(2, 2) * R(2, 2)));
  a.phi = std::atan2(-R(0, 1), R(0, 0));
  return a;
}

double RotationAngle(const Eigen::Matrix3d& R) {
  const Eigen::Vector3d u(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0),
                          R(1, 0) - R(0, 1));
  return std::atan2(u.norm(), R.trace() - 1.0);
}

}  // namespace invflow
