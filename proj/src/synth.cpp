#include "invflow/synth.hpp"

#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Geometry>

#include "invflow/error.hpp"

namespace invflow {

namespace {

// Co-visibility gates for ground-truth flow. The z tolerance is the format's
// stated reprojection bound; the twist/spread gates drop bilinear taps that
// straddle depth discontinuities, where interpolated vertices are meaningless.
constexpr double kZBufferTol = 1e-3;
constexpr double kTapTwistTol = 1e-3;
constexpr double kTapSpreadTol = 0.05;

struct Hit {
  double s = std::numeric_limits<double>::infinity();
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();  // world, outward-ish
  double albedo = 0.0;
  bool Valid() const { return std::isfinite(s); }
};

// Nearest intersection of the world-space ray origin + s*dir (unit dir).
Hit CastRay(const std::vector<Shape>& shapes, const Eigen::Vector3d& origin,
            const Eigen::Vector3d& dir) {
  constexpr double kMinT = 1e-9;
  Hit best;
  for (const Shape& shape : shapes) {
    switch (shape.type) {
      case Shape::Type::kSphere: {
        const Eigen::Vector3d oc = shape.center - origin;
        const double b = dir.dot(oc);
        const double disc = b * b - oc.squaredNorm() + shape.radius * shape.radius;
        if (disc < 0.0) break;
        const double root = std::sqrt(disc);
        double s = b - root;
        if (s <= kMinT) s = b + root;
        if (s <= kMinT || s >= best.s) break;
        best.s = s;
        best.normal = (origin + s * dir - shape.center) / shape.radius;
        best.albedo = shape.albedo;
        break;
      }
      case Shape::Type::kPlane: {
        const double denom = dir.dot(shape.normal);
        if (std::abs(denom) < 1e-12) break;
        const double s = (shape.center - origin).dot(shape.normal) / denom;
        if (s <= kMinT || s >= best.s) break;
        best.s = s;
        best.normal = denom < 0.0 ? shape.normal : -shape.normal;
        best.albedo = shape.albedo;
        break;
      }
      case Shape::Type::kBox: {
        const Eigen::Vector3d o = shape.orientation.transpose() * (origin - shape.center);
        const Eigen::Vector3d d = shape.orientation.transpose() * dir;
        double s_near = -std::numeric_limits<double>::infinity();
        double s_far = std::numeric_limits<double>::infinity();
        int near_axis = -1;
        double near_sign = 1.0;
        bool miss = false;
        for (int a = 0; a < 3 && !miss; ++a) {
          const double e = shape.half_extents[a];
          if (std::abs(d[a]) < 1e-12) {
            miss = std::abs(o[a]) > e;
            continue;
          }
          double t0 = (-e - o[a]) / d[a];
          double t1 = (e - o[a]) / d[a];
          double sign = -1.0;
          if (t0 > t1) {
            std::swap(t0, t1);
            sign = 1.0;
          }
          if (t0 > s_near) {
            s_near = t0;
            near_axis = a;
            near_sign = sign;
          }
          s_far = std::min(s_far, t1);
          miss = s_near > s_far;
        }
        if (miss || near_axis < 0 || s_near <= kMinT || s_near >= best.s) break;
        Eigen::Vector3d n_local = Eigen::Vector3d::Zero();
        n_local[near_axis] = near_sign;
        best.s = s_near;
        best.normal = shape.orientation * n_local;
        best.albedo = shape.albedo;
        break;
      }
    }
  }
  return best;
}

double Shade(const SceneSpec& spec, const Eigen::Vector3d& point,
             const Eigen::Vector3d& normal_world,
             const Eigen::Vector3d& light_pos, double albedo) {
  const Eigen::Vector3d to_light = light_pos - point;
  const double dist2 = to_light.squaredNorm();
  if (dist2 < 1e-18) return 0.0;
  double value = albedo * std::max(0.0, normal_world.dot(to_light) / std::sqrt(dist2));
  if (spec.light_falloff) value /= dist2;
  return std::min(value, 1.0);
}

double Bilinear(const ScalarMap& map, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double ax = x - x0, ay = y - y0;
  return (1 - ay) * ((1 - ax) * map.At(x0, y0) + ax * map.At(x0 + 1, y0)) +
         ay * ((1 - ax) * map.At(x0, y0 + 1) + ax * map.At(x0 + 1, y0 + 1));
}

// Forward flow from `a` to `b` with the co-visibility gates above.
FlowField GroundTruthFlow(const SceneSpec& spec, const SceneView& a,
                          const SceneView& b, const RigidPose& rel) {
  const int w = spec.width, h = spec.height;
  FlowField flow{Vec2Map(w, h, Eigen::Vector2d::Zero()), Mask(w, h, 0)};
  const VertexMap va = DepthToVertices(a.depth, spec.K);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!a.depth.mask.At(x, y)) continue;
      const Eigen::Vector3d p1 = rel.R * va.values.At(x, y) + rel.t;
      if (p1.z() < 1e-6) continue;
      const double u = spec.K.fx * p1.x() / p1.z() + spec.K.cx;
      const double v = spec.K.fy * p1.y() / p1.z() + spec.K.cy;
      const int u0 = static_cast<int>(std::floor(u));
      const int v0 = static_cast<int>(std::floor(v));
      if (u0 < 0 || u0 + 1 >= w || v0 < 0 || v0 + 1 >= h) continue;
      if (!b.depth.mask.At(u0, v0) || !b.depth.mask.At(u0 + 1, v0) ||
          !b.depth.mask.At(u0, v0 + 1) || !b.depth.mask.At(u0 + 1, v0 + 1))
        continue;
      const double d00 = b.depth.values.At(u0, v0);
      const double d10 = b.depth.values.At(u0 + 1, v0);
      const double d01 = b.depth.values.At(u0, v0 + 1);
      const double d11 = b.depth.values.At(u0 + 1, v0 + 1);
      if (std::abs(d00 + d11 - d10 - d01) > kTapTwistTol) continue;
      if (std::max({d00, d10, d01, d11}) - std::min({d00, d10, d01, d11}) >
          kTapSpreadTol)
        continue;
      if (std::abs(Bilinear(b.depth.values, u, v) - p1.norm()) > kZBufferTol)
        continue;
      flow.values.At(x, y) = Eigen::Vector2d(u - x, v - y);
      flow.mask.At(x, y) = 1;
    }
  }
  return flow;
}

}  // namespace

Shape Shape::Sphere(const Eigen::Vector3d& center, double radius,
                    double albedo) {
  Shape s;
  s.type = Type::kSphere;
  s.center = center;
  s.radius = radius;
  s.albedo = albedo;
  return s;
}

Shape Shape::Plane(const Eigen::Vector3d& point, const Eigen::Vector3d& normal,
                   double albedo) {
  Shape s;
  s.type = Type::kPlane;
  s.center = point;
  s.normal = normal.normalized();
  s.albedo = albedo;
  return s;
}

Shape Shape::Box(const Eigen::Vector3d& center,
                 const Eigen::Vector3d& half_extents,
                 const Eigen::Matrix3d& orientation, double albedo) {
  Shape s;
  s.type = Type::kBox;
  s.center = center;
  s.half_extents = half_extents;
  s.orientation = orientation;
  s.albedo = albedo;
  return s;
}

void SceneSpec::Validate() const {
  if (shapes.empty())
    throw Error(ErrorCategory::kDegenerateInput, "scene needs at least one shape");
  if (width <= 0 || height <= 0)
    throw Error(ErrorCategory::kDegenerateInput, "scene needs positive resolution");
  if (!(K.fx > 0.0) || !(K.fy > 0.0))
    throw Error(ErrorCategory::kCalibration, "scene intrinsics need fx, fy > 0");
}

RigidPose LookAtPose(const Eigen::Vector3d& position,
                     const Eigen::Vector3d& target, const Eigen::Vector3d& up) {
  const Eigen::Vector3d forward = (target - position).normalized();
  Eigen::Vector3d right = forward.cross(up);
  if (right.norm() < 1e-9)
    throw Error(ErrorCategory::kDegenerateInput, "look direction parallel to up");
  right.normalize();
  const Eigen::Vector3d down = forward.cross(right).normalized();
  RigidPose pose;
  pose.R.row(0) = right;
  pose.R.row(1) = down;
  pose.R.row(2) = forward;
  pose.t = -(pose.R * position);
  return pose;
}

SceneView RenderView(const SceneSpec& spec, int view_index) {
  spec.Validate();
  const ViewSpec& vs = spec.views.at(view_index);
  const Eigen::Matrix3d R_wc = vs.pose.R.transpose();  // camera -> world
  const Eigen::Vector3d origin = -(R_wc * vs.pose.t);
  const int w = spec.width, h = spec.height;

  SceneView view;
  view.image = ScalarMap(w, h, 0.0);
  view.depth = DepthMap{ScalarMap(w, h, 0.0), Mask(w, h, 0)};
  view.normals = NormalMap{Vec3Map(w, h, Eigen::Vector3d::Zero()), Mask(w, h, 0)};
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Eigen::Vector3d d_cam((x - spec.K.cx) / spec.K.fx,
                            (y - spec.K.cy) / spec.K.fy, 1.0);
      d_cam.normalize();
      const Eigen::Vector3d d_world = R_wc * d_cam;
      const Hit hit = CastRay(spec.shapes, origin, d_world);
      if (!hit.Valid()) continue;
      // Keep the normal on the camera's side; co-visible points then carry
      // the same world normal in both views.
      Eigen::Vector3d n_world = hit.normal;
      if (n_world.dot(d_world) > 0.0) n_world = -n_world;
      const Eigen::Vector3d point = origin + hit.s * d_world;
      const double shade =
          Shade(spec, point, n_world, vs.light_pos, hit.albedo);
      view.image.At(x, y) = std::round(shade * 255.0) / 255.0;
      view.depth.values.At(x, y) = hit.s;
      view.depth.mask.At(x, y) = 1;
      view.normals.values.At(x, y) = vs.pose.R * n_world;
      view.normals.mask.At(x, y) = 1;
      lo = any ? std::min(lo, hit.s) : hit.s;
      hi = any ? std::max(hi, hit.s) : hit.s;
      any = true;
    }
  }
  if (!any)
    throw Error(ErrorCategory::kDegenerateInput,
                "no shape is visible from view " + std::to_string(view_index));
  if (hi <= lo) hi = lo + std::max(std::abs(lo), 1.0) * 1e-9;
  view.meta.K = spec.K;
  view.meta.R = vs.pose.R;
  view.meta.t = vs.pose.t;
  view.meta.min_depth = lo;
  view.meta.max_depth = hi;
  view.meta.light_pos = vs.light_pos;
  return view;
}

RenderedPair RenderPair(const SceneSpec& spec) {
  RenderedPair pair;
  pair.view0 = RenderView(spec, 0);
  pair.view1 = RenderView(spec, 1);
  pair.gt_pose = RelativePose(RigidPose{spec.views[0].pose.R, spec.views[0].pose.t},
                              RigidPose{spec.views[1].pose.R, spec.views[1].pose.t});
  pair.gt_flow = GroundTruthFlow(spec, pair.view0, pair.view1, pair.gt_pose);
  pair.gt_flow_back =
      GroundTruthFlow(spec, pair.view1, pair.view0, pair.gt_pose.Inverse());
  pair.view0.flow = pair.gt_flow;
  pair.view1.flow = pair.gt_flow_back;
  return pair;
}

SceneSpec StandardScene(uint64_t seed, double min_rot_deg, double max_rot_deg,
                        bool consistent_light, int resolution) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  SceneSpec spec;
  spec.width = resolution;
  spec.height = resolution;
  spec.K = Intrinsics{0.95 * resolution, 0.95 * resolution,
                      (resolution - 1) / 2.0, (resolution - 1) / 2.0};

  const Eigen::Vector3d target(uniform(-0.05, 0.05), uniform(-0.05, 0.05),
                               uniform(0.3, 0.4));
  spec.shapes.push_back(Shape::Plane(Eigen::Vector3d::Zero(),
                                     Eigen::Vector3d::UnitZ(),
                                     uniform(0.55, 0.7)));
  const double sphere_r = uniform(0.32, 0.42);
  spec.shapes.push_back(Shape::Sphere(
      Eigen::Vector3d(uniform(0.25, 0.45), uniform(-0.1, 0.2), sphere_r),
      sphere_r, uniform(0.85, 0.98)));
  const double yaw = uniform(0.0, 1.2);
  const Eigen::Matrix3d box_R =
      Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix();
  const Eigen::Vector3d box_half(uniform(0.2, 0.3), uniform(0.16, 0.26),
                                 uniform(0.22, 0.34));
  spec.shapes.push_back(Shape::Box(
      Eigen::Vector3d(uniform(-0.55, -0.3), uniform(-0.15, 0.15), box_half.z()),
      box_half, box_R, uniform(0.7, 0.85)));

  const double azimuth = uniform(0.0, 2.0 * std::numbers::pi);
  const double elevation = uniform(0.45, 0.8);  // radians above horizon
  const double distance = uniform(2.3, 2.7);
  const Eigen::Vector3d offset(distance * std::cos(elevation) * std::cos(azimuth),
                               distance * std::cos(elevation) * std::sin(azimuth),
                               distance * std::sin(elevation));
  spec.views[0].pose = LookAtPose(target + offset, target);

  // Move the second camera by a world rotation about an axis through the
  // look-at target; the relative pose rotation angle then equals the sampled
  // angle exactly and the camera keeps framing the scene.
  const double angle =
      uniform(min_rot_deg, max_rot_deg) * std::numbers::pi / 180.0;
  Eigen::Vector3d axis(uniform(-0.35, 0.35), uniform(-0.35, 0.35), 1.0);
  axis.normalize();
  const Eigen::Matrix3d orbit = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  const Eigen::Vector3d position1 = target + orbit * offset;
  // Same construction for the orientation: world-rotate the whole camera.
  spec.views[1].pose.R = spec.views[0].pose.R * orbit.transpose();
  spec.views[1].pose.t = -(spec.views[1].pose.R * position1);

  const double light_az = uniform(0.0, 2.0 * std::numbers::pi);
  const Eigen::Vector3d light0 =
      target + Eigen::Vector3d(2.2 * std::cos(light_az), 2.2 * std::sin(light_az),
                               uniform(1.8, 2.4));
  spec.views[0].light_pos = light0;
  if (consistent_light) {
    spec.views[1].light_pos = light0;
  } else {
    const double swing = light_az + uniform(2.0, 4.3);  // 115..246 degrees away
    spec.views[1].light_pos =
        target + Eigen::Vector3d(2.2 * std::cos(swing), 2.2 * std::sin(swing),
                                 uniform(1.8, 2.4));
  }
  return spec;
}

SceneSpec ClutteredScene(uint64_t seed, double min_rot_deg, double max_rot_deg,
                         bool consistent_light, int resolution) {
  std::mt19937_64 rng(seed * 0xd1342543de82ef95ULL + 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  SceneSpec spec;
  spec.width = resolution;
  spec.height = resolution;
  spec.K = Intrinsics{0.95 * resolution, 0.95 * resolution,
                      (resolution - 1) / 2.0, (resolution - 1) / 2.0};

  spec.shapes.push_back(Shape::Plane(Eigen::Vector3d::Zero(),
                                     Eigen::Vector3d::UnitZ(),
                                     uniform(0.4, 0.5)));
  for (int i = 0; i < 26; ++i) {
    const Eigen::Vector2d at(uniform(-0.55, 0.55), uniform(-0.55, 0.55));
    const double albedo = uniform(0.25, 0.95);
    if (i % 2 == 0) {
      const double r = uniform(0.05, 0.12);
      spec.shapes.push_back(Shape::Sphere(
          Eigen::Vector3d(at.x(), at.y(), r * uniform(0.7, 1.0)), r, albedo));
    } else {
      const Eigen::Vector3d half(uniform(0.04, 0.1), uniform(0.04, 0.1),
                                 uniform(0.04, 0.1));
      Eigen::Vector3d axis(uniform(-1.0, 1.0), uniform(-1.0, 1.0),
                           uniform(-1.0, 1.0));
      if (axis.norm() < 1e-6) axis = Eigen::Vector3d::UnitZ();
      axis.normalize();
      const Eigen::Matrix3d R =
          Eigen::AngleAxisd(uniform(0.0, std::numbers::pi), axis)
              .toRotationMatrix();
      spec.shapes.push_back(Shape::Box(
          Eigen::Vector3d(at.x(), at.y(), 0.8 * half.norm()), half, R, albedo));
    }
  }

  const Eigen::Vector3d target(uniform(-0.05, 0.05), uniform(-0.05, 0.05),
                               uniform(0.1, 0.2));
  const double azimuth = uniform(0.0, 2.0 * std::numbers::pi);
  const double elevation = uniform(0.5, 0.85);
  const double distance = uniform(1.7, 2.1);
  const Eigen::Vector3d offset(distance * std::cos(elevation) * std::cos(azimuth),
                               distance * std::cos(elevation) * std::sin(azimuth),
                               distance * std::sin(elevation));
  spec.views[0].pose = LookAtPose(target + offset, target);

  const double angle =
      uniform(min_rot_deg, max_rot_deg) * std::numbers::pi / 180.0;
  Eigen::Vector3d axis(uniform(-0.35, 0.35), uniform(-0.35, 0.35), 1.0);
  axis.normalize();
  const Eigen::Matrix3d orbit = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
  const Eigen::Vector3d position1 = target + orbit * offset;
  spec.views[1].pose.R = spec.views[0].pose.R * orbit.transpose();
  spec.views[1].pose.t = -(spec.views[1].pose.R * position1);

  const double light_az = uniform(0.0, 2.0 * std::numbers::pi);
  const Eigen::Vector3d light0 =
      target + Eigen::Vector3d(2.2 * std::cos(light_az), 2.2 * std::sin(light_az),
                               uniform(1.8, 2.4));
  spec.views[0].light_pos = light0;
  if (consistent_light) {
    spec.views[1].light_pos = light0;
  } else {
    const double swing = light_az + uniform(2.0, 4.3);
    spec.views[1].light_pos =
        target + Eigen::Vector3d(2.2 * std::cos(swing), 2.2 * std::sin(swing),
                                 uniform(1.8, 2.4));
  }
  return spec;
}

}  // namespace invflow
