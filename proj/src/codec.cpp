#include "invflow/codec.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "invflow/error.hpp"
#include "png_io.hpp"

namespace invflow {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

uint16_t Quantize16(double value, double lo, double step) {
  if (step <= 0.0) return 1;
  const double q = std::round((value - lo) / step);
  return static_cast<uint16_t>(std::clamp(q, 1.0, 65535.0));
}

Eigen::Matrix3d Mat3FromJson(const json& j, const std::string& name) {
  Eigen::Matrix3d m;
  if (j.is_array() && j.size() == 9 && j[0].is_number()) {
    for (int i = 0; i < 9; ++i) m(i / 3, i % 3) = j[i].get<double>();
    return m;
  }
  if (j.is_array() && j.size() == 3 && j[0].is_array() && j[0].size() == 3) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m(r, c) = j[r][c].get<double>();
    return m;
  }
  throw Error(ErrorCategory::kMetadata,
              name + " must be a 9-array or 3x3 nested array");
}

Eigen::Vector3d Vec3FromJson(const json& j, const std::string& name) {
  if (!j.is_array() || j.size() != 3)
    throw Error(ErrorCategory::kMetadata, name + " must be a 3-array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json Mat3ToJson(const Eigen::Matrix3d& m) {
  json out = json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out.push_back(m(r, c));
  return out;
}

json Vec3ToJson(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

double RequireNumber(const json& j, const std::string& key) {
  if (!j.contains(key) || !j.at(key).is_number())
    throw Error(ErrorCategory::kMetadata, "missing numeric field " + key);
  return j.at(key).get<double>();
}

}  // namespace

ScalarMap DecodeImage(const Gray8Raster& raster) {
  ScalarMap out(raster.Width(), raster.Height());
  for (int y = 0; y < raster.Height(); ++y)
    for (int x = 0; x < raster.Width(); ++x)
      out.At(x, y) = raster.At(x, y) / 255.0;
  return out;
}

Gray8Raster EncodeImage(const ScalarMap& image) {
  Gray8Raster out(image.Width(), image.Height());
  for (int y = 0; y < image.Height(); ++y)
    for (int x = 0; x < image.Width(); ++x)
      out.At(x, y) = static_cast<uint8_t>(
          std::lround(std::clamp(image.At(x, y), 0.0, 1.0) * 255.0));
  return out;
}

DepthMap DecodeDepth(const Gray16Raster& raster, double min_depth,
                     double max_depth) {
  if (!(min_depth < max_depth))
    throw Error(ErrorCategory::kMetadata, "depth range needs min < max");
  const double step = (max_depth - min_depth) / 65535.0;
  DepthMap out{ScalarMap(raster.Width(), raster.Height(), 0.0),
               Mask(raster.Width(), raster.Height(), 0)};
  for (int y = 0; y < raster.Height(); ++y)
    for (int x = 0; x < raster.Width(); ++x) {
      const uint16_t raw = raster.At(x, y);
      if (raw == 0) continue;
      out.values.At(x, y) = raw * step + min_depth;
      out.mask.At(x, y) = 1;
    }
  return out;
}

DepthEncoding EncodeDepth(const DepthMap& depth) {
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (int y = 0; y < depth.Height(); ++y)
    for (int x = 0; x < depth.Width(); ++x) {
      if (!depth.mask.At(x, y)) continue;
      const double v = depth.values.At(x, y);
      lo = any ? std::min(lo, v) : v;
      hi = any ? std::max(hi, v) : v;
      any = true;
    }
  if (!any)
    throw Error(ErrorCategory::kDegenerateInput, "depth map has no valid pixel");
  if (hi <= lo) hi = lo + std::max(std::abs(lo), 1.0) * 1e-9;
  return {EncodeDepthWithRange(depth, lo, hi), lo, hi};
}

Gray16Raster EncodeDepthWithRange(const DepthMap& depth, double min_depth,
                                  double max_depth) {
  if (!(min_depth < max_depth))
    throw Error(ErrorCategory::kMetadata, "depth range needs min < max");
  const double step = (max_depth - min_depth) / 65535.0;
  Gray16Raster out(depth.Width(), depth.Height(), 0);
  for (int y = 0; y < depth.Height(); ++y)
    for (int x = 0; x < depth.Width(); ++x)
      if (depth.mask.At(x, y))
        out.At(x, y) = Quantize16(depth.values.At(x, y), min_depth, step);
  return out;
}

NormalMap DecodeNormals(const Grid<Rgb8>& raster) {
  NormalMap out{Vec3Map(raster.Width(), raster.Height(), Eigen::Vector3d::Zero()),
                Mask(raster.Width(), raster.Height(), 0)};
  for (int y = 0; y < raster.Height(); ++y)
    for (int x = 0; x < raster.Width(); ++x) {
      const Rgb8 px = raster.At(x, y);
      if (px.r == 0 && px.g == 0 && px.b == 0) continue;
      Eigen::Vector3d n(2.0 * px.r / 255.0 - 1.0, 2.0 * px.g / 255.0 - 1.0,
                        1.0 - 2.0 * px.b / 255.0);
      const double len = n.norm();
      if (len < 1e-6) continue;
      out.values.At(x, y) = n / len;
      out.mask.At(x, y) = 1;
    }
  return out;
}

Grid<Rgb8> EncodeNormals(const NormalMap& normals) {
  Grid<Rgb8> out(normals.Width(), normals.Height(), Rgb8{});
  auto byte = [](double v) {
    return static_cast<uint8_t>(std::clamp(std::lround(v * 127.5), 0L, 255L));
  };
  for (int y = 0; y < normals.Height(); ++y)
    for (int x = 0; x < normals.Width(); ++x) {
      if (!normals.mask.At(x, y)) continue;
      const Eigen::Vector3d& n = normals.values.At(x, y);
      out.At(x, y) = {byte(n.x() + 1.0), byte(n.y() + 1.0), byte(1.0 - n.z())};
    }
  return out;
}

FlowField DecodeFlow(const Grid<Rgb16>& raster, const SceneMeta& meta) {
  if (!meta.flow_ranges)
    throw Error(ErrorCategory::kMetadata, "flow raster without flow ranges");
  const FlowRanges& r = *meta.flow_ranges;
  const double step_x = (r.max_x - r.min_x) / 65535.0;
  const double step_y = (r.max_y - r.min_y) / 65535.0;
  FlowField out{Vec2Map(raster.Width(), raster.Height(), Eigen::Vector2d::Zero()),
                Mask(raster.Width(), raster.Height(), 0)};
  for (int y = 0; y < raster.Height(); ++y)
    for (int x = 0; x < raster.Width(); ++x) {
      const Rgb16 px = raster.At(x, y);
      if (px.r == 0 || px.g == 0) continue;
      out.values.At(x, y) =
          Eigen::Vector2d(px.r * step_x + r.min_x, px.g * step_y + r.min_y);
      out.mask.At(x, y) = 1;
    }
  return out;
}

FlowEncoding EncodeFlow(const FlowField& flow) {
  FlowRanges ranges;
  bool any = false;
  for (int y = 0; y < flow.Height(); ++y)
    for (int x = 0; x < flow.Width(); ++x) {
      if (!flow.mask.At(x, y)) continue;
      const Eigen::Vector2d& f = flow.values.At(x, y);
      if (!any) {
        ranges = {f.x(), f.x(), f.y(), f.y()};
        any = true;
      } else {
        ranges.min_x = std::min(ranges.min_x, f.x());
        ranges.max_x = std::max(ranges.max_x, f.x());
        ranges.min_y = std::min(ranges.min_y, f.y());
        ranges.max_y = std::max(ranges.max_y, f.y());
      }
    }
  return {EncodeFlowWithRanges(flow, ranges), ranges};
}

Grid<Rgb16> EncodeFlowWithRanges(const FlowField& flow,
                                 const FlowRanges& ranges) {
  const double step_x = (ranges.max_x - ranges.min_x) / 65535.0;
  const double step_y = (ranges.max_y - ranges.min_y) / 65535.0;
  Grid<Rgb16> out(flow.Width(), flow.Height(), Rgb16{});
  for (int y = 0; y < flow.Height(); ++y)
    for (int x = 0; x < flow.Width(); ++x) {
      if (!flow.mask.At(x, y)) continue;
      const Eigen::Vector2d& f = flow.values.At(x, y);
      out.At(x, y) = {Quantize16(f.x(), ranges.min_x, step_x),
                      Quantize16(f.y(), ranges.min_y, step_y), 0};
    }
  return out;
}

SceneMeta ParseSceneMeta(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::kFormat, std::string("bad JSON: ") + e.what());
  }
  SceneMeta meta;
  try {
    if (!j.contains("K") || !j.contains("R") || !j.contains("t"))
      throw Error(ErrorCategory::kMetadata, "metadata needs K, R, t");
    meta.K = Intrinsics::FromMatrix(Mat3FromJson(j.at("K"), "K"));
    meta.R = Mat3FromJson(j.at("R"), "R");
    meta.t = Vec3FromJson(j.at("t"), "t");
    meta.min_depth = RequireNumber(j, "minDepth");
    meta.max_depth = RequireNumber(j, "maxDepth");
    if (j.contains("lightPos"))
      meta.light_pos = Vec3FromJson(j.at("lightPos"), "lightPos");
    const bool has_any_flow_key =
        j.contains("minFlowX") || j.contains("maxFlowX") ||
        j.contains("minFlowY") || j.contains("maxFlowY");
    if (has_any_flow_key) {
      FlowRanges r;
      r.min_x = RequireNumber(j, "minFlowX");
      r.max_x = RequireNumber(j, "maxFlowX");
      r.min_y = RequireNumber(j, "minFlowY");
      r.max_y = RequireNumber(j, "maxFlowY");
      if (r.max_x < r.min_x || r.max_y < r.min_y)
        throw Error(ErrorCategory::kMetadata, "flow ranges out of order");
      meta.flow_ranges = r;
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCategory::kMetadata,
                std::string("bad metadata value: ") + e.what());
  }
  if (!(meta.min_depth < meta.max_depth))
    throw Error(ErrorCategory::kMetadata, "depth range needs min < max");
  return meta;
}

std::string SceneMetaToJson(const SceneMeta& meta) {
  ordered_json j;
  j["K"] = Mat3ToJson(meta.K.Matrix());
  j["R"] = Mat3ToJson(meta.R);
  j["t"] = Vec3ToJson(meta.t);
  j["minDepth"] = meta.min_depth;
  j["maxDepth"] = meta.max_depth;
  if (meta.flow_ranges) {
    j["minFlowX"] = meta.flow_ranges->min_x;
    j["maxFlowX"] = meta.flow_ranges->max_x;
    j["minFlowY"] = meta.flow_ranges->min_y;
    j["maxFlowY"] = meta.flow_ranges->max_y;
  }
  j["lightPos"] = Vec3ToJson(meta.light_pos);
  return j.dump(2) + "\n";
}

namespace {

std::string ReadTextFile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in)
    throw Error(ErrorCategory::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void OrientNormalsTowardCamera(NormalMap& normals, const Intrinsics& K) {
  for (int y = 0; y < normals.Height(); ++y)
    for (int x = 0; x < normals.Width(); ++x) {
      if (!normals.mask.At(x, y)) continue;
      const Eigen::Vector3d ray((x - K.cx) / K.fx, (y - K.cy) / K.fy, 1.0);
      if (normals.values.At(x, y).dot(ray) > 0.0)
        normals.values.At(x, y) = -normals.values.At(x, y);
    }
}

}  // namespace

SceneView LoadSceneView(const std::filesystem::path& dir, int index) {
  const std::string i = std::to_string(index);
  SceneView view;
  view.meta = ParseSceneMeta(ReadTextFile(dir / ("data" + i + ".json")));
  view.image = DecodeImage(ReadGray8Png(dir / ("image" + i + ".png")));
  view.depth = DecodeDepth(ReadGray16Png(dir / ("depth" + i + ".png")),
                           view.meta.min_depth, view.meta.max_depth);
  view.normals = DecodeNormals(ReadRgb8Png(dir / ("normal" + i + ".png")));
  OrientNormalsTowardCamera(view.normals, view.meta.K);
  const auto flow_path = dir / ("flow" + i + ".png");
  if (std::filesystem::exists(flow_path))
    view.flow = DecodeFlow(ReadRgb16Png(flow_path), view.meta);

  const int w = view.image.Width(), h = view.image.Height();
  if (!view.depth.values.SameSize(w, h) || !view.normals.values.SameSize(w, h) ||
      (view.flow && !view.flow->values.SameSize(w, h)))
    throw Error(ErrorCategory::kMetadata,
                "raster dimensions disagree in " + dir.string());

  // Intersect masks: depth and normals share one validity core; flow cannot
  // claim pixels outside it.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const bool core = view.depth.mask.At(x, y) && view.normals.mask.At(x, y);
      if (!core) {
        view.depth.mask.At(x, y) = 0;
        view.depth.values.At(x, y) = 0.0;
        view.normals.mask.At(x, y) = 0;
        view.normals.values.At(x, y).setZero();
        if (view.flow) {
          view.flow->mask.At(x, y) = 0;
          view.flow->values.At(x, y).setZero();
        }
      }
    }
  return view;
}

std::pair<SceneView, SceneView> LoadScenePair(
    const std::filesystem::path& dir) {
  return {LoadSceneView(dir, 0), LoadSceneView(dir, 1)};
}

void WriteSceneView(const std::filesystem::path& dir, int index,
                    const SceneView& view) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw Error(ErrorCategory::kIo, "cannot create " + dir.string());
  const std::string i = std::to_string(index);
  SceneMeta meta = view.meta;
  WritePng(dir / ("image" + i + ".png"), EncodeImage(view.image));
  WritePng(dir / ("depth" + i + ".png"),
           EncodeDepthWithRange(view.depth, meta.min_depth, meta.max_depth));
  WritePng(dir / ("normal" + i + ".png"), EncodeNormals(view.normals));
  if (view.flow) {
    if (meta.flow_ranges) {
      WritePng(dir / ("flow" + i + ".png"),
               EncodeFlowWithRanges(*view.flow, *meta.flow_ranges));
    } else {
      FlowEncoding enc = EncodeFlow(*view.flow);
      meta.flow_ranges = enc.ranges;
      WritePng(dir / ("flow" + i + ".png"), enc.raster);
    }
  }
  std::ofstream out(dir / ("data" + i + ".json"));
  if (!out)
    throw Error(ErrorCategory::kIo, "cannot write metadata in " + dir.string());
  out << SceneMetaToJson(meta);
}

void WriteScenePair(const std::filesystem::path& dir, const SceneView& view0,
                    const SceneView& view1) {
  WriteSceneView(dir, 0, view0);
  WriteSceneView(dir, 1, view1);
}

}  // namespace invflow
