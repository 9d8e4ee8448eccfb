#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>

#include <Eigen/Core>

#include "invflow/geometry.hpp"
#include "invflow/maps.hpp"

namespace invflow {

struct Rgb8;
struct Rgb16;
using Gray8Raster = Grid<uint8_t>;
using Gray16Raster = Grid<uint16_t>;

struct FlowRanges {
  double min_x = 0.0, max_x = 0.0;
  double min_y = 0.0, max_y = 0.0;
};

// Per-view metadata (data0.json / data1.json). R, t is the absolute camera
// pose; flow ranges are present only when the view carries a flow raster.
struct SceneMeta {
  Intrinsics K;
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();
  double min_depth = 0.0;
  double max_depth = 1.0;
  std::optional<FlowRanges> flow_ranges;
  Eigen::Vector3d light_pos = Eigen::Vector3d::Zero();
};

// One decoded view. image holds gray values in [0,1]; depth is ray length.
// After LoadScenePair, depth and normal masks are identical and the flow
// mask (when flow exists) is a subset of them.
struct SceneView {
  ScalarMap image;
  DepthMap depth;
  NormalMap normals;
  std::optional<FlowField> flow;
  SceneMeta meta;
  int Width() const { return image.Width(); }
  int Height() const { return image.Height(); }
};

ScalarMap DecodeImage(const Gray8Raster& raster);
Gray8Raster EncodeImage(const ScalarMap& image);

// Raw 0 is the mask; valid pixels decode to raw*(max-min)/65535 + min.
DepthMap DecodeDepth(const Gray16Raster& raster, double min_depth,
                     double max_depth);

struct DepthEncoding {
  Gray16Raster raster;
  double min_depth = 0.0, max_depth = 0.0;
};
// Picks the range from the valid pixels (widening a constant map by a tiny
// epsilon so min < max holds) and quantizes valid pixels to 1..65535.
DepthEncoding EncodeDepth(const DepthMap& depth);
Gray16Raster EncodeDepthWithRange(const DepthMap& depth, double min_depth,
                                  double max_depth);

// Tangent-space bytes: n = (2r/255-1, 2g/255-1, 1-2b/255), renormalized.
// An all-zero pixel is masked.
NormalMap DecodeNormals(const Grid<Rgb8>& raster);
Grid<Rgb8> EncodeNormals(const NormalMap& normals);

// Channels are (flowX, flowY, zeros), scaled like depth; a zero raw value in
// either flow channel masks the pixel.
FlowField DecodeFlow(const Grid<Rgb16>& raster, const SceneMeta& meta);

struct FlowEncoding {
  Grid<Rgb16> raster;
  FlowRanges ranges;
};
FlowEncoding EncodeFlow(const FlowField& flow);
Grid<Rgb16> EncodeFlowWithRanges(const FlowField& flow,
                                 const FlowRanges& ranges);

SceneMeta ParseSceneMeta(const std::string& json_text);
std::string SceneMetaToJson(const SceneMeta& meta);

// Directory layout: image{i}.png, depth{i}.png, normal{i}.png, data{i}.json,
// optional flow{i}.png, for i in {0,1}.
SceneView LoadSceneView(const std::filesystem::path& dir, int index);
std::pair<SceneView, SceneView> LoadScenePair(const std::filesystem::path& dir);
void WriteSceneView(const std::filesystem::path& dir, int index,
                    const SceneView& view);
void WriteScenePair(const std::filesystem::path& dir, const SceneView& view0,
                    const SceneView& view1);

}  // namespace invflow
