#include "invflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <type_traits>
#include <vector>

#include <Eigen/Geometry>
#include <Eigen/SVD>

#include "invflow/error.hpp"
#include "invflow/geometry.hpp"
#include "invflow/sparse_filter.hpp"
#include "parallel.hpp"

namespace invflow {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Eigen's default constructor leaves coefficients uninitialized, so T{} is
// not a usable zero for generic grid code.
template <typename T>
T ZeroValue() {
  if constexpr (std::is_arithmetic_v<T>)
    return T(0);
  else
    return T::Zero();
}

// Bilinear taps for a target coordinate known to lie in [0,w-1]x[0,h-1].
struct Taps {
  int x[4], y[4];
  double w[4];
};

Taps BilinearTaps(double tx, double ty) {
  const int x0 = static_cast<int>(std::floor(tx));
  const int y0 = static_cast<int>(std::floor(ty));
  const double ax = tx - x0;
  const double ay = ty - y0;
  Taps t;
  t.x[0] = x0;     t.y[0] = y0;     t.w[0] = (1.0 - ax) * (1.0 - ay);
  t.x[1] = x0 + 1; t.y[1] = y0;     t.w[1] = ax * (1.0 - ay);
  t.x[2] = x0;     t.y[2] = y0 + 1; t.w[2] = (1.0 - ax) * ay;
  t.x[3] = x0 + 1; t.y[3] = y0 + 1; t.w[3] = ax * ay;
  return t;
}

bool InUnitBox(double tx, double ty, int w, int h) {
  return tx >= 0.0 && tx <= w - 1.0 && ty >= 0.0 && ty <= h - 1.0;
}

// Unweighted median of values[0..n); n <= 9. Even counts average the two
// middle elements.
double SmallMedian(double* values, int n) {
  std::sort(values, values + n);
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

// Per-axis weights of the (2g+1)-tap patch kernel: the g-fold convolution of
// {1, 1, 1}. Growth 1 is the plain 3x3 box; larger growths widen the window
// with a triangle-shaped falloff.
std::vector<double> PatchTaps(int growth) {
  std::vector<double> taps = {1.0, 1.0, 1.0};
  for (int g = 1; g < growth; ++g) {
    std::vector<double> next(taps.size() + 2, 0.0);
    for (size_t i = 0; i < taps.size(); ++i)
      for (int k = 0; k < 3; ++k) next[i + k] += taps[i];
    taps.swap(next);
  }
  return taps;
}

// Separable weighted window sum with zero padding beyond the frame.
void PatchSum(const std::vector<double>& in, int w, int h,
              const std::vector<double>& taps, std::vector<double>& row_tmp,
              std::vector<double>& out) {
  const int r = (static_cast<int>(taps.size()) - 1) / 2;
  for (int y = 0; y < h; ++y) {
    const double* src = in.data() + static_cast<size_t>(y) * w;
    double* dst = row_tmp.data() + static_cast<size_t>(y) * w;
    for (int x = 0; x < w; ++x) {
      const int lo = std::max(-r, -x), hi = std::min(r, w - 1 - x);
      double s = 0.0;
      for (int k = lo; k <= hi; ++k) s += taps[k + r] * src[x + k];
      dst[x] = s;
    }
  }
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) {
      const int lo = std::max(-r, -y), hi = std::min(r, h - 1 - y);
      double s = 0.0;
      for (int k = lo; k <= hi; ++k)
        s += taps[k + r] * row_tmp[static_cast<size_t>(y + k) * w + x];
      out[static_cast<size_t>(y) * w + x] = s;
    }
  }
}

FeatureGroup DownsampleGroup(const FeatureGroup& group, bool renormalize) {
  FeatureGroup out;
  if (!group.Present()) return out;
  out.channel_count = group.channel_count;
  out.weight = group.weight;
  out.scale = group.scale;
  Filtered<double> down[3];
  for (int c = 0; c < group.channel_count; ++c)
    down[c] = SparseDownsample(group.channels[c], group.confidence);
  out.confidence = down[0].confidence;
  for (int c = 0; c < group.channel_count; ++c)
    out.channels[c] = std::move(down[c].values);
  if (renormalize) {
    const int w = out.confidence.Width(), h = out.confidence.Height();
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double nx = out.channels[0].At(x, y);
        const double ny = out.channels[1].At(x, y);
        const double nz = out.channels[2].At(x, y);
        const double len = std::sqrt(nx * nx + ny * ny + nz * nz);
        if (len > 1e-12) {
          out.channels[0].At(x, y) = nx / len;
          out.channels[1].At(x, y) = ny / len;
          out.channels[2].At(x, y) = nz / len;
        } else {
          out.channels[0].At(x, y) = 0.0;
          out.channels[1].At(x, y) = 0.0;
          out.channels[2].At(x, y) = 0.0;
          out.confidence.At(x, y) = 0.0;
        }
      }
    }
  }
  return out;
}

FeatureStack DownsampleStack(const FeatureStack& stack) {
  FeatureStack out;
  out.image = DownsampleGroup(stack.image, false);
  out.normal = DownsampleGroup(stack.normal, true);
  out.vertex = DownsampleGroup(stack.vertex, false);
  const FeatureGroup* any = out.image.Present()    ? &out.image
                            : out.normal.Present() ? &out.normal
                                                   : &out.vertex;
  out.width = any->confidence.Width();
  out.height = any->confidence.Height();
  return out;
}

int LevelDim(int dim, int level) {
  for (int l = 0; l < level; ++l) dim = (dim + 1) / 2;
  return dim;
}

// Squared-difference residual planes for one displacement of the intensity
// group, aggregated into patch masses and residual sums.
void SeparableIntensityCost(const FeatureGroup& ref, const FeatureGroup& warped,
                            int dx, int dy, int w, int h,
                            const std::vector<double>& taps,
                            std::vector<double>& w_plane,
                            std::vector<double>& r_plane,
                            std::vector<double>& row_tmp,
                            std::vector<double>& w_box,
                            std::vector<double>& r_box) {
  for (int y = 0; y < h; ++y) {
    const int wy = y + dy;
    const bool row_in = wy >= 0 && wy < h;
    double* wp = w_plane.data() + static_cast<size_t>(y) * w;
    double* rp = r_plane.data() + static_cast<size_t>(y) * w;
    for (int x = 0; x < w; ++x) {
      const int wx = x + dx;
      double wgt = 0.0;
      if (row_in && wx >= 0 && wx < w)
        wgt = ref.confidence.At(x, y) * warped.confidence.At(wx, wy);
      wp[x] = wgt;
      if (wgt > 0.0) {
        const double d = ref.channels[0].At(x, y) - warped.channels[0].At(wx, wy);
        rp[x] = d * d * wgt;
      } else {
        rp[x] = 0.0;
      }
    }
  }
  PatchSum(w_plane, w, h, taps, row_tmp, w_box);
  PatchSum(r_plane, w, h, taps, row_tmp, r_box);
}

// Geometric channels are matched through pairwise in-patch descriptors
// rather than raw values: the angle between neighboring normals and the
// distance between neighboring vertices are preserved by any rigid motion
// between the views, so a true correspondence scores ~0 at arbitrary
// rotation. Raw values would carry a rotation-dependent floor at the true
// match, which at wide baselines favors wrong candidates that happen to
// cancel the rotation.
constexpr int kPairOffsets[4][2] = {{1, 0}, {0, 1}, {1, 1}, {-1, 1}};

// Per-pixel descriptor channels with their own confidences (a channel needs
// both of its taps).
struct DescriptorSet {
  int width = 0, height = 0;
  std::array<std::vector<double>, 4> value;
  std::array<std::vector<double>, 4> weight;
};

DescriptorSet BuildDescriptors(const FeatureGroup& g, bool angular, int w,
                               int h) {
  DescriptorSet d;
  d.width = w;
  d.height = h;
  const size_t n = static_cast<size_t>(w) * h;
  for (int k = 0; k < 4; ++k) {
    d.value[k].assign(n, 0.0);
    d.weight[k].assign(n, 0.0);
    const int ox = kPairOffsets[k][0], oy = kPairOffsets[k][1];
    for (int y = 0; y < h; ++y) {
      const int ny = y + oy;
      if (ny < 0 || ny >= h) continue;
      for (int x = 0; x < w; ++x) {
        const int nx = x + ox;
        if (nx < 0 || nx >= w) continue;
        const double c = g.confidence.At(x, y) * g.confidence.At(nx, ny);
        if (c <= 0.0) continue;
        const size_t i = static_cast<size_t>(y) * w + x;
        if (angular) {
          double dot = 0.0;
          for (int ch = 0; ch < 3; ++ch)
            dot += g.channels[ch].At(x, y) * g.channels[ch].At(nx, ny);
          d.value[k][i] = dot;
        } else {
          double sq = 0.0;
          for (int ch = 0; ch < 3; ++ch) {
            const double diff = g.channels[ch].At(nx, ny) - g.channels[ch].At(x, y);
            sq += diff * diff;
          }
          d.value[k][i] = std::sqrt(sq);
        }
        d.weight[k][i] = c;
      }
    }
  }
  return d;
}

// Residual planes for one displacement of one descriptor set, all four
// channels folded into a single weighted plane before aggregation.
void SeparableDescriptorCost(const DescriptorSet& ref, const DescriptorSet& warped,
                             int dx, int dy, int w, int h,
                             const std::vector<double>& taps,
                             std::vector<double>& w_plane,
                             std::vector<double>& r_plane,
                             std::vector<double>& row_tmp,
                             std::vector<double>& w_box,
                             std::vector<double>& r_box) {
  std::fill(w_plane.begin(), w_plane.end(), 0.0);
  std::fill(r_plane.begin(), r_plane.end(), 0.0);
  for (int k = 0; k < 4; ++k) {
    for (int y = 0; y < h; ++y) {
      const int wy = y + dy;
      if (wy < 0 || wy >= h) continue;
      const size_t ref_row = static_cast<size_t>(y) * w;
      const size_t wrp_row = static_cast<size_t>(wy) * w;
      double* wp = w_plane.data() + ref_row;
      double* rp = r_plane.data() + ref_row;
      for (int x = 0; x < w; ++x) {
        const int wx = x + dx;
        if (wx < 0 || wx >= w) continue;
        const double wgt = ref.weight[k][ref_row + x] * warped.weight[k][wrp_row + wx];
        if (wgt <= 0.0) continue;
        const double diff = ref.value[k][ref_row + x] - warped.value[k][wrp_row + wx];
        wp[x] += wgt;
        rp[x] += diff * diff * wgt;
      }
    }
  }
  PatchSum(w_plane, w, h, taps, row_tmp, w_box);
  PatchSum(r_plane, w, h, taps, row_tmp, r_box);
}

}  // namespace

void FlowConfig::Validate() const {
  if (levels < 1) throw Error(ErrorCategory::kConfig, "levels must be >= 1");
  if (search_radius < 1)
    throw Error(ErrorCategory::kConfig, "search radius must be >= 1");
  for (double gw : group_weights)
    if (!(gw >= 0.0) || !std::isfinite(gw))
      throw Error(ErrorCategory::kConfig, "group weights must be finite and >= 0");
  if (group_weights[0] <= 0.0 && group_weights[1] <= 0.0 &&
      group_weights[2] <= 0.0)
    throw Error(ErrorCategory::kConfig, "at least one group weight must be > 0");
  if (!(fb_threshold > 0.0))
    throw Error(ErrorCategory::kConfig, "forward-backward threshold must be > 0");
}

CostVolume::CostVolume(int width, int height, int radius)
    : width_(width), height_(height), radius_(radius) {
  if (width < 1 || height < 1 || radius < 1)
    throw Error(ErrorCategory::kDegenerateInput, "cost volume dimensions must be positive");
  costs_.assign(static_cast<size_t>(width) * height * Span() * Span(), kInf);
}

FeatureStack BuildStack(const SceneView& view) {
  const int w = view.Width(), h = view.Height();
  if (w < 1 || h < 1)
    throw Error(ErrorCategory::kDegenerateInput, "view has no pixels");

  FeatureStack stack;
  stack.width = w;
  stack.height = h;

  // Intensity, standardized over the full frame so the matcher sees the
  // same contrast scale regardless of exposure. A constant image carries no
  // signal and becomes all zeros rather than dividing by ~0.
  {
    double mean = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) mean += view.image.At(x, y);
    mean /= static_cast<double>(w) * h;
    double var = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double d = view.image.At(x, y) - mean;
        var += d * d;
      }
    var /= static_cast<double>(w) * h;
    const double stddev = std::sqrt(var);

    FeatureGroup& g = stack.image;
    g.channel_count = 1;
    g.weight = 1.0;
    g.channels[0] = ScalarMap(w, h, 0.0);
    g.confidence = ConfidenceMap(w, h, 1.0);
    if (stddev > 1e-12)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          g.channels[0].At(x, y) = (view.image.At(x, y) - mean) / stddev;
  }

  if (view.normals.values.SameSize(w, h)) {
    bool any = false;
    for (int y = 0; y < h && !any; ++y)
      for (int x = 0; x < w && !any; ++x) any = view.normals.mask.At(x, y) != 0;
    if (any) {
      FeatureGroup& g = stack.normal;
      g.channel_count = 3;
      g.weight = 1.0;
      for (int c = 0; c < 3; ++c) g.channels[c] = ScalarMap(w, h, 0.0);
      g.confidence = MaskToConfidence(view.normals.mask);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const Eigen::Vector3d& n = view.normals.values.At(x, y);
          g.channels[0].At(x, y) = n.x();
          g.channels[1].At(x, y) = n.y();
          g.channels[2].At(x, y) = n.z();
        }
    }
  }

  if (view.depth.values.SameSize(w, h)) {
    bool any = false;
    for (int y = 0; y < h && !any; ++y)
      for (int x = 0; x < w && !any; ++x) any = view.depth.mask.At(x, y) != 0;
    if (any) {
      const VertexMap vertices = DepthToVertices(view.depth, view.meta.K);
      // Center on the valid centroid, then scale by a robust extent (the
      // 0.9 quantile of max-abs coordinates) so clouds of any metric size
      // produce comparable residuals.
      Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
      int count = 0;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (vertices.mask.At(x, y)) {
            centroid += vertices.values.At(x, y);
            ++count;
          }
      centroid /= count;
      std::vector<double> extents;
      extents.reserve(count);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (vertices.mask.At(x, y)) {
            const Eigen::Vector3d c = vertices.values.At(x, y) - centroid;
            extents.push_back(c.cwiseAbs().maxCoeff());
          }
      std::sort(extents.begin(), extents.end());
      const double extent = extents[static_cast<size_t>(0.9 * (count - 1))];
      const double scale = extent > 1e-12 ? 1.0 / extent : 1.0;

      FeatureGroup& g = stack.vertex;
      g.channel_count = 3;
      g.weight = 1.0;
      g.scale = extent > 1e-12 ? extent : 1.0;
      for (int c = 0; c < 3; ++c) g.channels[c] = ScalarMap(w, h, 0.0);
      g.confidence = MaskToConfidence(vertices.mask);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (vertices.mask.At(x, y)) {
            const Eigen::Vector3d v = (vertices.values.At(x, y) - centroid) * scale;
            g.channels[0].At(x, y) = v.x();
            g.channels[1].At(x, y) = v.y();
            g.channels[2].At(x, y) = v.z();
          }
    }
  }

  return stack;
}

template <typename T>
void Warp(const Grid<T>& values, const Mask& mask, const FlowField& flow,
          Grid<T>& out_values, Mask& out_mask) {
  const int w = values.Width(), h = values.Height();
  if (!mask.SameSize(w, h) || !flow.values.SameSize(w, h))
    throw Error(ErrorCategory::kDegenerateInput, "warp inputs disagree in size");
  out_values = Grid<T>(w, h, ZeroValue<T>());
  out_mask = Mask(w, h, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!flow.mask.At(x, y)) continue;
      const Eigen::Vector2d& f = flow.values.At(x, y);
      const double tx = x + f.x(), ty = y + f.y();
      if (!InUnitBox(tx, ty, w, h)) continue;
      const Taps taps = BilinearTaps(tx, ty);
      T acc = ZeroValue<T>();
      bool ok = true;
      for (int i = 0; i < 4 && ok; ++i) {
        if (taps.w[i] <= 0.0) continue;
        if (!mask.At(taps.x[i], taps.y[i]))
          ok = false;
        else
          acc += taps.w[i] * values.At(taps.x[i], taps.y[i]);
      }
      if (!ok) continue;
      out_values.At(x, y) = acc;
      out_mask.At(x, y) = 1;
    }
  }
}

template void Warp(const Grid<double>&, const Mask&, const FlowField&,
                   Grid<double>&, Mask&);
template void Warp(const Grid<Eigen::Vector2d>&, const Mask&, const FlowField&,
                   Grid<Eigen::Vector2d>&, Mask&);
template void Warp(const Grid<Eigen::Vector3d>&, const Mask&, const FlowField&,
                   Grid<Eigen::Vector3d>&, Mask&);

ScalarMap WarpScalar(const ScalarMap& values, const Mask& mask,
                     const FlowField& flow, Mask& out_mask) {
  ScalarMap out;
  Warp(values, mask, flow, out, out_mask);
  return out;
}

Vec2Map WarpVec2(const Vec2Map& values, const Mask& mask, const FlowField& flow,
                 Mask& out_mask) {
  Vec2Map out;
  Warp(values, mask, flow, out, out_mask);
  return out;
}

Vec3Map WarpVec3(const Vec3Map& values, const Mask& mask, const FlowField& flow,
                 Mask& out_mask) {
  Vec3Map out;
  Warp(values, mask, flow, out, out_mask);
  return out;
}

FeatureStack WarpStack(const FeatureStack& stack, const FlowField& flow) {
  const int w = stack.width, h = stack.height;
  if (!flow.values.SameSize(w, h))
    throw Error(ErrorCategory::kDegenerateInput, "flow and stack disagree in size");
  FeatureStack out;
  out.width = w;
  out.height = h;
  const FeatureGroup* groups[3] = {&stack.image, &stack.normal, &stack.vertex};
  FeatureGroup* outs[3] = {&out.image, &out.normal, &out.vertex};
  for (int gi = 0; gi < 3; ++gi) {
    const FeatureGroup& g = *groups[gi];
    if (!g.Present()) continue;
    FeatureGroup& o = *outs[gi];
    o.channel_count = g.channel_count;
    o.weight = g.weight;
    o.scale = g.scale;
    o.confidence = ConfidenceMap(w, h, 0.0);
    for (int c = 0; c < g.channel_count; ++c) o.channels[c] = ScalarMap(w, h, 0.0);
    const bool renormalize = gi == 1;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (!flow.mask.At(x, y)) continue;
        const Eigen::Vector2d& f = flow.values.At(x, y);
        const double tx = x + f.x(), ty = y + f.y();
        if (!InUnitBox(tx, ty, w, h)) continue;
        const Taps taps = BilinearTaps(tx, ty);
        // Normalized interpolation: low-confidence taps contribute little and
        // fully masked neighborhoods stay masked.
        double mass = 0.0;
        double ch[3] = {0.0, 0.0, 0.0};
        for (int i = 0; i < 4; ++i) {
          if (taps.w[i] <= 0.0) continue;
          const double wc = taps.w[i] * g.confidence.At(taps.x[i], taps.y[i]);
          if (wc <= 0.0) continue;
          mass += wc;
          for (int c = 0; c < g.channel_count; ++c)
            ch[c] += wc * g.channels[c].At(taps.x[i], taps.y[i]);
        }
        if (mass <= 0.0) continue;
        o.confidence.At(x, y) = mass;
        if (renormalize) {
          const double len =
              std::sqrt(ch[0] * ch[0] + ch[1] * ch[1] + ch[2] * ch[2]);
          if (len > 1e-12) {
            for (int c = 0; c < 3; ++c) o.channels[c].At(x, y) = ch[c] / len;
          } else {
            o.confidence.At(x, y) = 0.0;
          }
        } else {
          for (int c = 0; c < g.channel_count; ++c)
            o.channels[c].At(x, y) = ch[c] / mass;
        }
      }
    }
  }
  return out;
}

CostVolume ComputeCostVolume(const FeatureStack& ref, const FeatureStack& warped,
                             int radius, int patch_growth) {
  const int w = ref.width, h = ref.height;
  if (warped.width != w || warped.height != h)
    throw Error(ErrorCategory::kDegenerateInput, "stacks disagree in size");
  if (patch_growth < 1)
    throw Error(ErrorCategory::kDegenerateInput, "patch growth must be >= 1");
  const std::vector<double> taps = PatchTaps(patch_growth);
  CostVolume volume(w, h, radius);
  const int span = volume.Span();

  const bool use_image = ref.image.Present() && warped.image.Present();
  const bool use_normal = ref.normal.Present() && warped.normal.Present();
  const bool use_vertex = ref.vertex.Present() && warped.vertex.Present();

  DescriptorSet ref_normal, warped_normal, ref_vertex, warped_vertex;
  if (use_normal) {
    ref_normal = BuildDescriptors(ref.normal, true, w, h);
    warped_normal = BuildDescriptors(warped.normal, true, w, h);
  }
  if (use_vertex) {
    ref_vertex = BuildDescriptors(ref.vertex, false, w, h);
    warped_vertex = BuildDescriptors(warped.vertex, false, w, h);
  }

  ParallelFor(0, span * span, [&](int di) {
    const int dy = di / span - radius;
    const int dx = di % span - radius;
    const size_t n = static_cast<size_t>(w) * h;
    std::vector<double> num(n, 0.0), wsum(n, 0.0);
    std::vector<uint8_t> ok(n, 1);
    std::vector<double> w_plane(n), r_plane(n), row_tmp(n), w_box(n), r_box(n);

    // A candidate is feasible only where every participating group has valid
    // patch mass. Dropping a group from the sum instead would delete that
    // group's appearance-change floor and pull the argmin toward mask
    // boundaries, where groups conveniently fall silent.
    auto fold = [&](double weight) {
      for (size_t i = 0; i < n; ++i)
        if (w_box[i] > 0.0) {
          num[i] += weight * (r_box[i] / w_box[i]);
          wsum[i] += weight;
        } else {
          ok[i] = 0;
        }
    };
    if (use_image) {
      SeparableIntensityCost(ref.image, warped.image, dx, dy, w, h, taps,
                             w_plane, r_plane, row_tmp, w_box, r_box);
      fold(ref.image.weight);
    }
    if (use_normal) {
      SeparableDescriptorCost(ref_normal, warped_normal, dx, dy, w, h, taps,
                              w_plane, r_plane, row_tmp, w_box, r_box);
      fold(ref.normal.weight);
    }
    if (use_vertex) {
      SeparableDescriptorCost(ref_vertex, warped_vertex, dx, dy, w, h, taps,
                              w_plane, r_plane, row_tmp, w_box, r_box);
      fold(ref.vertex.weight);
    }

    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const size_t i = static_cast<size_t>(y) * w + x;
        if (ok[i] && wsum[i] > 0.0) volume.At(x, y, dx, dy) = num[i] / wsum[i];
      }
  });
  return volume;
}

FlowField UpsampleFlow(const FlowField& flow, int target_width,
                       int target_height) {
  const int sw = flow.Width(), sh = flow.Height();
  if (sw < 1 || sh < 1 || (target_width + 1) / 2 != sw ||
      (target_height + 1) / 2 != sh)
    throw Error(ErrorCategory::kDegenerateInput,
                "upsample target is not the double resolution");
  const double rx = static_cast<double>(target_width) / sw;
  const double ry = static_cast<double>(target_height) / sh;
  FlowField out;
  out.values = Vec2Map(target_width, target_height, Eigen::Vector2d::Zero());
  out.mask = Mask(target_width, target_height, 0);
  for (int y = 0; y < target_height; ++y) {
    const double ys = std::clamp((y + 0.5) / ry - 0.5, 0.0, sh - 1.0);
    for (int x = 0; x < target_width; ++x) {
      const double xs = std::clamp((x + 0.5) / rx - 0.5, 0.0, sw - 1.0);
      const Taps taps = BilinearTaps(xs, ys);
      Eigen::Vector2d acc = Eigen::Vector2d::Zero();
      bool ok = true;
      for (int i = 0; i < 4 && ok; ++i) {
        if (taps.w[i] <= 0.0) continue;
        if (!flow.mask.At(taps.x[i], taps.y[i]))
          ok = false;
        else
          acc += taps.w[i] * flow.values.At(taps.x[i], taps.y[i]);
      }
      if (!ok) continue;
      out.values.At(x, y) = Eigen::Vector2d(acc.x() * rx, acc.y() * ry);
      out.mask.At(x, y) = 1;
    }
  }
  return out;
}

namespace {

// Winner-take-all displacement with lexicographic tie-breaking on
// (cost, |d|^2, dy, dx), refined per axis by a parabolic fit when the
// winner sits strictly inside the search window. `cells` keeps the integer
// winner so the caller can evaluate the initial flow at the matched cell.
void ArgminSubpixel(const CostVolume& volume, bool subpixel, Vec2Map& inc,
                    Grid<Eigen::Vector2i>& cells, Mask& valid) {
  const int w = volume.Width(), h = volume.Height(), r = volume.Radius();
  inc = Vec2Map(w, h, Eigen::Vector2d::Zero());
  cells = Grid<Eigen::Vector2i>(w, h, Eigen::Vector2i::Zero());
  valid = Mask(w, h, 0);
  ParallelFor(0, h, [&](int y) {
    for (int x = 0; x < w; ++x) {
      double best = kInf;
      int bdx = 0, bdy = 0, bnorm = 0;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const double c = volume.At(x, y, dx, dy);
          const int nd = dx * dx + dy * dy;
          if (c < best || (c == best && nd < bnorm)) {
            best = c;
            bdx = dx;
            bdy = dy;
            bnorm = nd;
          }
        }
      if (!std::isfinite(best)) continue;
      double fx = bdx, fy = bdy;
      // A cost this small is an exact match up to rounding; the parabola
      // through an exact zero with asymmetric neighbors predicts a negative
      // minimum and would only inject noise.
      if (subpixel && best > 1e-12) {
        if (bdx > -r && bdx < r) {
          const double cm = volume.At(x, y, bdx - 1, bdy);
          const double cp = volume.At(x, y, bdx + 1, bdy);
          const double denom = cm - 2.0 * best + cp;
          if (std::isfinite(cm) && std::isfinite(cp) && denom > 0.0)
            fx += std::clamp(0.5 * (cm - cp) / denom, -0.5, 0.5);
        }
        if (bdy > -r && bdy < r) {
          const double cm = volume.At(x, y, bdx, bdy - 1);
          const double cp = volume.At(x, y, bdx, bdy + 1);
          const double denom = cm - 2.0 * best + cp;
          if (std::isfinite(cm) && std::isfinite(cp) && denom > 0.0)
            fy += std::clamp(0.5 * (cm - cp) / denom, -0.5, 0.5);
        }
      }
      inc.At(x, y) = Eigen::Vector2d(fx, fy);
      cells.At(x, y) = Eigen::Vector2i(bdx, bdy);
      valid.At(x, y) = 1;
    }
  });
}

// Mask-aware 3x3 component-wise median, the usual outlier scrub for
// winner-take-all increments.
void MedianFilterIncrement(Vec2Map& inc, const Mask& valid) {
  const int w = inc.Width(), h = inc.Height();
  Vec2Map out(w, h, Eigen::Vector2d::Zero());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!valid.At(x, y)) continue;
      double xs[9], ys[9];
      int count = 0;
      for (int v = -1; v <= 1; ++v)
        for (int u = -1; u <= 1; ++u) {
          const int nx = x + u, ny = y + v;
          if (nx < 0 || nx >= w || ny < 0 || ny >= h) continue;
          if (!valid.At(nx, ny)) continue;
          xs[count] = inc.At(nx, ny).x();
          ys[count] = inc.At(nx, ny).y();
          ++count;
        }
      out.At(x, y) = Eigen::Vector2d(SmallMedian(xs, count), SmallMedian(ys, count));
    }
  }
  inc = std::move(out);
}

// Regular grid subsample of the valid vertices, roughly `target` points.
std::vector<Eigen::Vector3d> SubsampleVertices(const VertexMap& map,
                                               int target) {
  const int w = map.Width(), h = map.Height();
  int valid = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) valid += map.mask.At(x, y) != 0;
  const int stride = std::max(
      1, static_cast<int>(std::lround(std::sqrt(double(valid) / target))));
  std::vector<Eigen::Vector3d> pts;
  for (int y = 0; y < h; y += stride)
    for (int x = 0; x < w; x += stride)
      if (map.mask.At(x, y)) pts.push_back(map.values.At(x, y));
  return pts;
}

// Least-squares rigid motion with dst[i] ~ R * src[i] + t, via SVD of the
// cross-covariance with the usual reflection fix.
RigidPose FitRigid(const std::vector<Eigen::Vector3d>& src,
                   const std::vector<Eigen::Vector3d>& dst) {
  const double n = static_cast<double>(src.size());
  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    cs += src[i];
    cd += dst[i];
  }
  cs /= n;
  cd /= n;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (size_t i = 0; i < src.size(); ++i)
    cov += (dst[i] - cd) * (src[i] - cs).transpose();
  const Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d s = Eigen::Matrix3d::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0)
    s(2, 2) = -1.0;
  RigidPose pose;
  pose.R = svd.matrixU() * s * svd.matrixV().transpose();
  pose.t = cd - pose.R * cs;
  return pose;
}

// Point-to-point ICP keeping the closest `keep_fraction` of the matches each
// round, so the fit tracks the overlapping part of the clouds instead of
// being dragged by points only one view sees.
double TrimmedIcp(const std::vector<Eigen::Vector3d>& a,
                  const std::vector<Eigen::Vector3d>& b, int iterations,
                  double keep_fraction, RigidPose* pose) {
  const size_t keep = std::max<size_t>(
      8, static_cast<size_t>(keep_fraction * static_cast<double>(a.size())));
  std::vector<double> d2(a.size());
  std::vector<int> nn(a.size());
  std::vector<Eigen::Vector3d> src, dst;
  std::vector<double> sorted;
  double rms = kInf;
  for (int it = 0; it < iterations; ++it) {
    for (size_t i = 0; i < a.size(); ++i) {
      const Eigen::Vector3d q = pose->R * a[i] + pose->t;
      double best = kInf;
      int match = -1;
      for (size_t j = 0; j < b.size(); ++j) {
        const double d = (b[j] - q).squaredNorm();
        if (d < best) {
          best = d;
          match = static_cast<int>(j);
        }
      }
      d2[i] = best;
      nn[i] = match;
    }
    sorted = d2;
    std::nth_element(sorted.begin(), sorted.begin() + (keep - 1), sorted.end());
    const double cut = sorted[keep - 1];
    src.clear();
    dst.clear();
    double sum = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
      if (d2[i] <= cut) {
        src.push_back(a[i]);
        dst.push_back(b[nn[i]]);
        sum += d2[i];
      }
    if (src.size() < 4) return kInf;
    rms = std::sqrt(sum / static_cast<double>(src.size()));
    *pose = FitRigid(src, dst);
  }
  return rms;
}

struct OrientedCloud {
  std::vector<Eigen::Vector3d> p, n;
};

OrientedCloud SubsampleOriented(const VertexMap& verts, const NormalMap& norms,
                                int target) {
  const int w = verts.Width(), h = verts.Height();
  int valid = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      valid += verts.mask.At(x, y) && norms.mask.At(x, y);
  const int stride = std::max(
      1, static_cast<int>(std::lround(std::sqrt(double(valid) / target))));
  OrientedCloud cloud;
  for (int y = 0; y < h; y += stride)
    for (int x = 0; x < w; x += stride)
      if (verts.mask.At(x, y) && norms.mask.At(x, y)) {
        cloud.p.push_back(verts.values.At(x, y));
        cloud.n.push_back(norms.values.At(x, y));
      }
  return cloud;
}

// Fraction of every `step`-th probe point whose nearest neighbor in `target`
// lands within `tau` after applying the pose. Counting inliers separates a
// true alignment from one that merely snaps a subset of look-alike surfaces
// onto each other, which trimmed residuals alone cannot do.
double InlierFraction(const std::vector<Eigen::Vector3d>& probe,
                      const std::vector<Eigen::Vector3d>& target,
                      const RigidPose& pose, double tau, size_t step) {
  const double tau2 = tau * tau;
  int total = 0, good = 0;
  for (size_t i = 0; i < probe.size(); i += step) {
    const Eigen::Vector3d q = pose.R * probe[i] + pose.t;
    double best = kInf;
    for (const Eigen::Vector3d& t : target)
      best = std::min(best, (t - q).squaredNorm());
    ++total;
    good += best <= tau2;
  }
  return total > 0 ? static_cast<double>(good) / total : 0.0;
}

// Right-handed frame with z along the normal and x along the in-plane part
// of the baseline; fails when the baseline is parallel to the normal.
bool MakeFrame(const Eigen::Vector3d& normal, const Eigen::Vector3d& baseline,
               Eigen::Matrix3d* frame) {
  const Eigen::Vector3d z = normal.normalized();
  Eigen::Vector3d x = baseline - z * z.dot(baseline);
  const double len = x.norm();
  if (len < 1e-8) return false;
  x /= len;
  frame->col(0) = x;
  frame->col(1) = z.cross(x);
  frame->col(2) = z;
  return true;
}

// Unique rigid motion mapping one oriented point pair onto another.
bool PairPose(const Eigen::Vector3d& p0, const Eigen::Vector3d& n0,
              const Eigen::Vector3d& q0, const Eigen::Vector3d& p1,
              const Eigen::Vector3d& n1, const Eigen::Vector3d& q1,
              RigidPose* out) {
  Eigen::Matrix3d f0, f1;
  if (!MakeFrame(n0, q0 - p0, &f0) || !MakeFrame(n1, q1 - p1, &f1))
    return false;
  out->R = f1 * f0.transpose();
  out->t = p1 - out->R * p0;
  return true;
}

// Rigid motion taking view-0 vertices onto view-1 vertices. An oriented
// point pair has four rigid invariants (baseline length, the two
// normal-to-baseline cosines, the normal-to-normal cosine), and a matched
// pair determines the motion completely. Candidate matches for a few dozen
// sampled bases are screened by those invariants, scored by inlier count,
// and the best few polished with trimmed ICP. Scoring uses only cloud
// geometry, so illumination cannot bias the result.
std::optional<RigidPose> AlignClouds(const VertexMap& v0, const NormalMap& n0,
                                     const VertexMap& v1,
                                     const NormalMap& n1) {
  const OrientedCloud thin0 = SubsampleOriented(v0, n0, 384);
  const OrientedCloud thin1 = SubsampleOriented(v1, n1, 384);
  if (thin0.p.size() < 48 || thin1.p.size() < 48) return std::nullopt;

  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (const Eigen::Vector3d& p : thin1.p) centroid += p;
  centroid /= static_cast<double>(thin1.p.size());
  std::vector<double> radii;
  radii.reserve(thin1.p.size());
  for (const Eigen::Vector3d& p : thin1.p)
    radii.push_back((p - centroid).norm());
  std::sort(radii.begin(), radii.end());
  const double extent = std::max(radii[radii.size() * 9 / 10], 1e-9);

  // Pair table for the target cloud. Short baselines carry little signal
  // and bloat the table, so they are dropped.
  struct PairEntry {
    float d, c1, c2, c3;
    int u, v;
  };
  const double min_baseline = 0.35 * extent;
  std::vector<PairEntry> pairs;
  for (size_t u = 0; u < thin1.p.size(); ++u)
    for (size_t v = u + 1; v < thin1.p.size(); ++v) {
      const Eigen::Vector3d base = thin1.p[v] - thin1.p[u];
      const double d = base.norm();
      if (d < min_baseline) continue;
      const Eigen::Vector3d dir = base / d;
      pairs.push_back({static_cast<float>(d),
                       static_cast<float>(thin1.n[u].dot(dir)),
                       static_cast<float>(thin1.n[v].dot(dir)),
                       static_cast<float>(thin1.n[u].dot(thin1.n[v])),
                       static_cast<int>(u), static_cast<int>(v)});
    }
  if (pairs.empty()) return std::nullopt;

  const double eps_d = 0.06 * extent;
  const double eps_c = 0.15;
  const double tau_quick = 0.06 * extent;
  std::mt19937 rng(0x2545f491u);

  struct Candidate {
    RigidPose pose;
    double score = -1.0;
  };
  // The finalist list spans distinct pose basins: a near-duplicate replaces
  // its kin only when it scores better. Without this, one well-sampled wrong
  // basin can flood the list and starve the true pose of a polish slot.
  std::vector<Candidate> finalists;
  auto offer = [&finalists, extent](const Candidate& c) {
    for (Candidate& f : finalists) {
      if (RotationAngle(c.pose.R * f.pose.R.transpose()) < 0.17 &&
          (c.pose.t - f.pose.t).norm() < 0.2 * extent) {
        if (c.score > f.score) f = c;
        return;
      }
    }
    finalists.push_back(c);
    std::sort(finalists.begin(), finalists.end(),
              [](const Candidate& a, const Candidate& b) {
                return a.score > b.score;
              });
    if (finalists.size() > 16) finalists.resize(16);
  };

  const int bases = 160;
  for (int base_i = 0; base_i < bases; ++base_i) {
    // A usable base spans a decent baseline and admits a frame.
    int i = -1, j = -1;
    double d0 = 0.0;
    Eigen::Vector3d dir;
    for (int tries = 0; tries < 64; ++tries) {
      const int a = static_cast<int>(rng() % thin0.p.size());
      const int b = static_cast<int>(rng() % thin0.p.size());
      if (a == b) continue;
      const Eigen::Vector3d diff = thin0.p[b] - thin0.p[a];
      const double d = diff.norm();
      if (d < min_baseline) continue;
      const Eigen::Vector3d u = diff / d;
      if (std::abs(thin0.n[a].dot(u)) > 0.95) continue;
      i = a;
      j = b;
      d0 = d;
      dir = u;
      break;
    }
    if (i < 0) continue;
    const double b1 = thin0.n[i].dot(dir);
    const double b2 = thin0.n[j].dot(dir);
    const double b3 = thin0.n[i].dot(thin0.n[j]);

    // Invariant-consistent target pairs, both orientations; cap the number
    // of pose evaluations per base by keeping the closest fits.
    struct Match {
      double dev;
      int u, v;
    };
    std::vector<Match> matches;
    for (const PairEntry& e : pairs) {
      if (std::abs(e.d - d0) > eps_d) continue;
      if (std::abs(e.c3 - b3) > eps_c) continue;
      const double fwd = std::abs(e.c1 - b1) + std::abs(e.c2 - b2);
      if (std::abs(e.c1 - b1) <= eps_c && std::abs(e.c2 - b2) <= eps_c)
        matches.push_back({fwd + std::abs(e.d - d0), e.u, e.v});
      // Reversed assignment flips the baseline direction.
      const double r1 = -e.c2, r2 = -e.c1;
      if (std::abs(r1 - b1) <= eps_c && std::abs(r2 - b2) <= eps_c)
        matches.push_back({std::abs(r1 - b1) + std::abs(r2 - b2) +
                               std::abs(e.d - d0),
                           e.v, e.u});
    }
    if (matches.size() > 48) {
      std::nth_element(matches.begin(), matches.begin() + 48, matches.end(),
                       [](const Match& a, const Match& b) {
                         return a.dev < b.dev;
                       });
      matches.resize(48);
    }
    for (const Match& m : matches) {
      Candidate c;
      if (!PairPose(thin0.p[i], thin0.n[i], thin0.p[j], thin1.p[m.u],
                    thin1.n[m.u], thin1.p[m.v], &c.pose))
        continue;
      c.score = InlierFraction(thin0.p, thin1.p, c.pose, tau_quick, 8);
      if (finalists.size() < 12 || c.score > finalists.back().score) offer(c);
    }
  }

  // The no-motion hypothesis costs nothing and covers the small-baseline
  // case where pair sampling is wasteful.
  {
    Candidate c;
    c.pose.R = Eigen::Matrix3d::Identity();
    c.pose.t = Eigen::Vector3d::Zero();
    c.score = InlierFraction(thin0.p, thin1.p, c.pose, tau_quick, 8);
    offer(c);
  }
  if (finalists.empty()) return std::nullopt;

  const std::vector<Eigen::Vector3d> mid0 = SubsampleVertices(v0, 900);
  const std::vector<Eigen::Vector3d> mid1 = SubsampleVertices(v1, 900);
  Candidate best;
  for (Candidate c : finalists) {
    if (!std::isfinite(TrimmedIcp(mid0, mid1, 10, 0.7, &c.pose))) continue;
    c.score = InlierFraction(mid0, mid1, c.pose, 0.035 * extent, 3);
    if (c.score > best.score) best = c;
  }
  if (best.score < 0.0) return std::nullopt;
  return best.pose;
}

// Analytic flow induced by a rigid pose: each valid vertex is carried into
// the other camera and reprojected. Pixels without depth, behind the camera,
// or landing outside the frame carry no prior.
FlowField PriorFlow(const VertexMap& verts, const RigidPose& pose,
                    const Intrinsics& k) {
  const int w = verts.Width(), h = verts.Height();
  FlowField out;
  out.values = Vec2Map(w, h, Eigen::Vector2d::Zero());
  out.mask = Mask(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!verts.mask.At(x, y)) continue;
      const Eigen::Vector3d moved = pose.R * verts.values.At(x, y) + pose.t;
      if (moved.z() <= 1e-9) continue;
      const double px = k.fx * moved.x() / moved.z() + k.cx;
      const double py = k.fy * moved.y() / moved.z() + k.cy;
      if (!InUnitBox(px, py, w, h)) continue;
      out.values.At(x, y) = Eigen::Vector2d(px - x, py - y);
      out.mask.At(x, y) = 1;
    }
  return out;
}

struct PyramidRun {
  std::vector<FlowField> fields;  // coarsest first, all dense masks
};

// One direction of one level: warp, match, fold the winner into the initial
// flow. `matched` marks pixels whose value came from a feasible argmin rather
// than carrying the init through.
struct LevelRefine {
  Vec2Map values;
  Mask matched;
};

LevelRefine RefineLevel(const FeatureStack& ref, const FeatureStack& other,
                        const FlowField& init, const FlowConfig& config,
                        int patch_growth) {
  const FeatureStack warped = WarpStack(other, init);
  const CostVolume volume =
      ComputeCostVolume(ref, warped, config.search_radius, patch_growth);
  Vec2Map inc;
  Grid<Eigen::Vector2i> cells;
  LevelRefine out;
  ArgminSubpixel(volume, config.subpixel, inc, cells, out.matched);
  // The warped stack at q was sampled through init(q), so a winning
  // displacement d at p matches the other view at q + init(q) with q = p + d;
  // the refined flow is d + init(p + d), with the matched cell clamped
  // because patch costs can stay finite one pixel past the frame edge.
  out.values = Vec2Map(ref.width, ref.height, Eigen::Vector2d::Zero());
  for (int y = 0; y < ref.height; ++y)
    for (int x = 0; x < ref.width; ++x) {
      Eigen::Vector2d f = init.values.At(x, y);
      if (out.matched.At(x, y)) {
        const Eigen::Vector2i c = cells.At(x, y);
        const int mx = std::clamp(x + c.x(), 0, ref.width - 1);
        const int my = std::clamp(y + c.y(), 0, ref.height - 1);
        f = inc.At(x, y) + init.values.At(mx, my);
      }
      out.values.At(x, y) = f;
    }
  return out;
}

// Pixels of `fwd` whose refinement round-trips through `bwd` to within the
// threshold: fwd(p) + bwd(p + fwd(p)) should vanish when both directions
// found the same correspondence.
Mask CrossCheck(const LevelRefine& fwd, const LevelRefine& bwd,
                double threshold) {
  const int w = fwd.values.Width(), h = fwd.values.Height();
  FlowField lookup;
  lookup.values = fwd.values;
  lookup.mask = fwd.matched;
  Mask warp_ok;
  const Vec2Map bwd_at_target =
      WarpVec2(bwd.values, bwd.matched, lookup, warp_ok);
  Mask keep(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!warp_ok.At(x, y)) continue;
      if ((fwd.values.At(x, y) + bwd_at_target.At(x, y)).norm() <= threshold)
        keep.At(x, y) = 1;
    }
  return keep;
}

// Both directions marched level-locked so each level can cross-check its
// matches against the opposite direction. Smooth low-texture regions produce
// near-flat cost surfaces whose argmin is noise; once such an increment
// enters the field, every upsampling doubles it and finer levels cannot pull
// it back (the search radius is fixed). A level therefore keeps a refinement
// only where the two directions agree on it; everywhere else the initial
// flow carries through, preserving the coarse structure that direct search
// got right. The median filter runs on the folded field rather than on raw
// increments: increments are relative to a spatially varying reference, so
// filtering them mixes incompatible values wherever the init is not smooth.
std::array<PyramidRun, 2> RunPyramids(const std::vector<FeatureStack>& pyr0,
                                      const std::vector<FeatureStack>& pyr1,
                                      const FlowConfig& config,
                                      const std::array<FlowField, 2>& seed) {
  const int levels = static_cast<int>(pyr0.size());
  // With a seed, every level restarts from the downsampled seed instead of
  // chaining on the previous level, so a bad match at one level cannot
  // compound through upsampling; the chain only fills pixels the seed does
  // not cover. The final field is then the finest-level refinement of the
  // seed, bounded by one search radius.
  std::array<FlowPyramid, 2> seed_pyr;
  for (int d = 0; d < 2; ++d)
    if (!seed[d].values.Empty())
      seed_pyr[d] = MakeFlowPyramid(seed[d], levels);
  std::array<PyramidRun, 2> runs;
  std::array<FlowField, 2> current;
  for (int li = levels - 1; li >= 0; --li) {
    const FeatureStack& s0 = pyr0[li];
    const FeatureStack& s1 = pyr1[li];
    std::array<FlowField, 2> init;
    for (int d = 0; d < 2; ++d) {
      if (li == levels - 1) {
        init[d].values = Vec2Map(s0.width, s0.height, Eigen::Vector2d::Zero());
        init[d].mask = FullMask(s0.width, s0.height);
      } else {
        init[d] = UpsampleFlow(current[d], s0.width, s0.height);
      }
      if (!seed_pyr[d].fields.empty()) {
        const FlowField& sl = seed_pyr[d].Level(li);
        for (int y = 0; y < s0.height; ++y)
          for (int x = 0; x < s0.width; ++x)
            if (sl.mask.At(x, y))
              init[d].values.At(x, y) = sl.values.At(x, y);
      }
    }
    // Wider aggregation at coarse levels gives the matcher neighborhood
    // context where downsampled texture turns locally flat; the finest level
    // keeps the tight 3x3 patch for localization.
    const int patch_growth = li + 1;
    const LevelRefine fwd = RefineLevel(s0, s1, init[0], config, patch_growth);
    const LevelRefine bwd = RefineLevel(s1, s0, init[1], config, patch_growth);
    const std::array<Mask, 2> keep = {CrossCheck(fwd, bwd, config.fb_threshold),
                                      CrossCheck(bwd, fwd, config.fb_threshold)};
    for (int d = 0; d < 2; ++d) {
      const LevelRefine& refined = d == 0 ? fwd : bwd;
      current[d].values = Vec2Map(s0.width, s0.height, Eigen::Vector2d::Zero());
      current[d].mask = FullMask(s0.width, s0.height);
      for (int y = 0; y < s0.height; ++y)
        for (int x = 0; x < s0.width; ++x)
          current[d].values.At(x, y) = keep[d].At(x, y)
                                           ? refined.values.At(x, y)
                                           : init[d].values.At(x, y);
      MedianFilterIncrement(current[d].values, current[d].mask);
      runs[d].fields.push_back(current[d]);
    }
  }
  return runs;
}

std::vector<FeatureStack> StackPyramid(FeatureStack base, int levels) {
  std::vector<FeatureStack> pyr;
  pyr.push_back(std::move(base));
  for (int l = 1; l < levels; ++l) pyr.push_back(DownsampleStack(pyr.back()));
  return pyr;
}

void ApplyGroupWeights(FeatureStack& stack, const std::array<double, 3>& weights) {
  stack.image.weight *= weights[0];
  stack.normal.weight *= weights[1];
  stack.vertex.weight *= weights[2];
  if (!stack.image.Present() && !stack.normal.Present() && !stack.vertex.Present())
    throw Error(ErrorCategory::kDegenerateInput, "no usable feature group");
}

// Each view normalizes vertices by its own robust extent, which generally
// differs between the views. Pairwise vertex distances are only comparable
// in a shared unit, so both stacks are rescaled to the mean extent.
void HarmonizeVertexScale(FeatureStack& a, FeatureStack& b) {
  if (!a.vertex.Present() || !b.vertex.Present()) return;
  const double common = 0.5 * (a.vertex.scale + b.vertex.scale);
  for (FeatureStack* s : {&a, &b}) {
    FeatureGroup& g = s->vertex;
    const double factor = g.scale / common;
    if (factor != 1.0)
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s->height; ++y)
          for (int x = 0; x < s->width; ++x) g.channels[c].At(x, y) *= factor;
    g.scale = common;
  }
}

}  // namespace

FlowPyramid EstimateFlow(const SceneView& view0, const SceneView& view1,
                         const FlowConfig& config) {
  config.Validate();
  if (view0.Width() != view1.Width() || view0.Height() != view1.Height())
    throw Error(ErrorCategory::kDegenerateInput, "views disagree in size");

  FeatureStack stack0 = BuildStack(view0);
  FeatureStack stack1 = BuildStack(view1);
  ApplyGroupWeights(stack0, config.group_weights);
  ApplyGroupWeights(stack1, config.group_weights);
  HarmonizeVertexScale(stack0, stack1);

  int levels = config.levels;
  const int w = stack0.width, h = stack0.height;
  while (levels > 1 &&
         std::min(LevelDim(w, levels - 1), LevelDim(h, levels - 1)) < 4)
    --levels;

  const std::vector<FeatureStack> pyr0 = StackPyramid(std::move(stack0), levels);
  const std::vector<FeatureStack> pyr1 = StackPyramid(std::move(stack1), levels);

  // The rigid prior only participates when the vertex cue does, so image-only
  // configurations still measure what intensity can do on its own.
  std::array<FlowField, 2> seed;
  if (config.rigid_init && config.group_weights[2] > 0.0 &&
      view0.depth.values.SameSize(w, h) &&
      view1.depth.values.SameSize(w, h)) {
    const VertexMap verts0 = DepthToVertices(view0.depth, view0.meta.K);
    const VertexMap verts1 = DepthToVertices(view1.depth, view1.meta.K);
    const NormalMap norms0 = NormalsFromVertices(verts0);
    const NormalMap norms1 = NormalsFromVertices(verts1);
    if (const std::optional<RigidPose> prior =
            AlignClouds(verts0, norms0, verts1, norms1)) {
      seed[0] = PriorFlow(verts0, *prior, view1.meta.K);
      seed[1] = PriorFlow(verts1, prior->Inverse(), view0.meta.K);
    }
  }

  std::array<PyramidRun, 2> runs = RunPyramids(pyr0, pyr1, config, seed);
  PyramidRun& forward = runs[0];
  const PyramidRun& backward = runs[1];

  // Forward-backward gate on the finest level: keep pixels that round-trip
  // to within the threshold.
  FlowField& fine = forward.fields.back();
  const FlowField& back = backward.fields.back();
  Mask warp_ok;
  const Vec2Map warped_back = WarpVec2(back.values, back.mask, fine, warp_ok);
  Mask gated(w, h, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!warp_ok.At(x, y)) continue;
      const Eigen::Vector2d round_trip =
          fine.values.At(x, y) + warped_back.At(x, y);
      if (round_trip.norm() <= config.fb_threshold) gated.At(x, y) = 1;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (!gated.At(x, y)) fine.values.At(x, y).setZero();
  fine.mask = std::move(gated);

  FlowPyramid out;
  out.fields = std::move(forward.fields);
  return out;
}

FlowPyramid MakeFlowPyramid(const FlowField& finest, int levels) {
  if (levels < 1)
    throw Error(ErrorCategory::kDegenerateInput, "pyramid needs at least one level");
  std::vector<FlowField> fine_first;
  fine_first.push_back(finest);
  for (int l = 1; l < levels; ++l) {
    const FlowField& prev = fine_first.back();
    const Filtered<Eigen::Vector2d> down =
        SparseDownsample(prev.values, MaskToConfidence(prev.mask));
    FlowField next;
    next.values = Vec2Map(down.values.Width(), down.values.Height(),
                          Eigen::Vector2d::Zero());
    next.mask = Mask(down.values.Width(), down.values.Height(), 0);
    for (int y = 0; y < next.values.Height(); ++y)
      for (int x = 0; x < next.values.Width(); ++x)
        if (down.confidence.At(x, y) > 0.0) {
          next.values.At(x, y) = 0.5 * down.values.At(x, y);
          next.mask.At(x, y) = 1;
        }
    fine_first.push_back(std::move(next));
  }
  FlowPyramid out;
  out.fields.assign(fine_first.rbegin(), fine_first.rend());
  return out;
}

}  // namespace invflow
