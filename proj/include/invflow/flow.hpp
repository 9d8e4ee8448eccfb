#pragma once

#include <array>
#include <vector>

#include "invflow/codec.hpp"
#include "invflow/maps.hpp"

namespace invflow {

// One modality group: up to three channels sharing a confidence map.
// weight 0 means the group carries no information. `scale` records the
// divisor applied during normalization (vertex extent), so consumers that
// need both views in one unit system can reconcile them.
struct FeatureGroup {
  int channel_count = 0;
  std::array<ScalarMap, 3> channels;
  ConfidenceMap confidence;
  double weight = 0.0;
  double scale = 1.0;
  bool Present() const { return channel_count > 0 && weight > 0.0; }
};

// Fused per-pixel features: normalized intensity (1 channel), camera-frame
// normals (3), normalized vertices (3).
struct FeatureStack {
  FeatureGroup image, normal, vertex;
  int width = 0, height = 0;
};

struct FlowConfig {
  int levels = 5;
  int search_radius = 4;
  // image, normal, vertex
  std::array<double, 3> group_weights = {1.0, 1.0, 1.0};
  double fb_threshold = 1.5;  // forward-backward gate, pixels
  bool subpixel = true;
  // Seed the coarsest level with the flow induced by a rigid alignment of
  // the two vertex clouds. Only active when depth is available and the
  // vertex group participates; the local search alone cannot recover
  // wide-baseline motion, the prior hands it the right neighborhood.
  bool rigid_init = true;

  void Validate() const;  // throws kConfig
};

// Coarsest level first; Level(0) is the finest field.
struct FlowPyramid {
  std::vector<FlowField> fields;
  int LevelCount() const { return static_cast<int>(fields.size()); }
  const FlowField& Level(int level) const {
    return fields[fields.size() - 1 - level];
  }
  FlowField& Level(int level) { return fields[fields.size() - 1 - level]; }
};

// Per-pixel matching cost over displacements in [-radius, radius]^2,
// stored densely; +inf marks pixels/displacements with no valid samples.
class CostVolume {
 public:
  CostVolume(int width, int height, int radius);
  int Width() const { return width_; }
  int Height() const { return height_; }
  int Radius() const { return radius_; }
  int Span() const { return 2 * radius_ + 1; }
  double& At(int x, int y, int dx, int dy) {
    return costs_[Index(x, y, dx, dy)];
  }
  double At(int x, int y, int dx, int dy) const {
    return costs_[Index(x, y, dx, dy)];
  }

 private:
  size_t Index(int x, int y, int dx, int dy) const {
    const size_t pixel = static_cast<size_t>(y) * width_ + x;
    return (pixel * Span() + (dy + radius_)) * Span() + (dx + radius_);
  }
  int width_, height_, radius_;
  std::vector<double> costs_;
};

// Normalized per-view features. The image channel is standardized over the
// full frame; vertices are centered on their valid centroid and scaled by a
// robust extent. Group weights reflect presence (1 or 0).
FeatureStack BuildStack(const SceneView& view);

// Bilinear lookup at (x + Fx, y + Fy). A pixel is masked when its flow is
// masked, the target leaves the image, or any source tap with nonzero
// bilinear weight is masked.
template <typename T>
void Warp(const Grid<T>& values, const Mask& mask, const FlowField& flow,
          Grid<T>& out_values, Mask& out_mask);

ScalarMap WarpScalar(const ScalarMap& values, const Mask& mask,
                     const FlowField& flow, Mask& out_mask);
Vec2Map WarpVec2(const Vec2Map& values, const Mask& mask, const FlowField& flow,
                 Mask& out_mask);
Vec3Map WarpVec3(const Vec3Map& values, const Mask& mask, const FlowField& flow,
                 Mask& out_mask);

// Warps every channel and confidence of a stack by one flow field.
FeatureStack WarpStack(const FeatureStack& stack, const FlowField& flow);

// cost(x,y,d) = weighted mean over present groups of the confidence-weighted
// 3x3 patch mean of the group residual. The image residual is the squared
// intensity difference. The geometric residuals compare pairwise in-patch
// descriptors, which any rigid motion between the views leaves unchanged:
// angles between neighboring normals and distances between neighboring
// vertices. A displacement is +inf where any participating group has no
// valid samples. patch_growth widens the 3x3 patch to (2g+1)^2 with
// triangle-shaped per-axis weights (the g-fold convolution of {1,1,1}),
// trading localization for context.
CostVolume ComputeCostVolume(const FeatureStack& ref, const FeatureStack& warped,
                             int radius, int patch_growth = 1);

// Doubles resolution (exact target dims given), scaling values by the
// per-axis resolution ratio; masked conservatively.
FlowField UpsampleFlow(const FlowField& flow, int target_width,
                       int target_height);

// Coarse-to-fine estimation over the fused stack. The finest level carries
// the forward-backward validity mask; coarser levels are dense.
FlowPyramid EstimateFlow(const SceneView& view0, const SceneView& view1,
                         const FlowConfig& config);

// Reference pyramid for a known flow field: repeated confidence-aware
// downsampling with halved values, for level-wise comparisons.
FlowPyramid MakeFlowPyramid(const FlowField& finest, int levels);

}  // namespace invflow
