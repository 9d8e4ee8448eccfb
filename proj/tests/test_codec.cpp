#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "invflow/codec.hpp"
#include "invflow/error.hpp"
#include "invflow/geometry.hpp"
#include "../src/png_io.hpp"

using namespace invflow;
namespace fs = std::filesystem;

namespace {

fs::path FreshDir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> FileBytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SceneMeta TestMeta(bool with_flow) {
  SceneMeta meta;
  meta.K = Intrinsics{60.0, 60.0, 7.5, 5.5};
  meta.R = EulerToRotation({0.1, -0.2, 0.3});
  meta.t = Eigen::Vector3d(0.4, -0.1, 0.2);
  meta.min_depth = 1.0;
  meta.max_depth = 4.0;
  meta.light_pos = Eigen::Vector3d(1.0, 2.0, -0.5);
  if (with_flow) meta.flow_ranges = FlowRanges{-3.0, 5.0, -2.0, 2.0};
  return meta;
}

// A small consistent view: tilted plane depth, normals from the vertices.
SceneView TestView(int w, int h, bool with_flow) {
  SceneView view;
  view.meta = TestMeta(with_flow);
  view.image = ScalarMap(w, h, 0.0);
  DepthMap depth{ScalarMap(w, h, 0.0), Mask(w, h, 1)};
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      view.image.At(x, y) = (x * 31 % 256) / 255.0;
      depth.values.At(x, y) = 2.0 + 0.01 * x + 0.02 * y;
    }
  depth.mask.At(1, 1) = 0;
  depth.values.At(1, 1) = 0.0;
  view.depth = depth;
  view.normals = NormalsFromVertices(DepthToVertices(depth, view.meta.K));
  // Keep depth only where normals survived so the pair is already consistent.
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (!view.normals.mask.At(x, y)) {
        view.depth.mask.At(x, y) = 0;
        view.depth.values.At(x, y) = 0.0;
      }
  if (with_flow) {
    FlowField flow{Vec2Map(w, h, Eigen::Vector2d::Zero()), view.depth.mask};
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (flow.mask.At(x, y))
          flow.values.At(x, y) = Eigen::Vector2d(-3.0 + 0.3 * x, 2.0 - 0.2 * y);
    view.flow = flow;
  }
  return view;
}

}  // namespace

TEST_CASE("depth decoding maps raw extremes and masks zeros") {
  Gray16Raster raw(2, 1, 0);
  raw.At(0, 0) = 65535;
  const DepthMap d = DecodeDepth(raw, 1.0, 4.0);
  CHECK(d.values.At(0, 0) == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(d.mask.At(0, 0) == 1);
  CHECK(d.mask.At(1, 0) == 0);
  CHECK(d.values.At(1, 0) == 0.0);
  CHECK_THROWS_AS(DecodeDepth(raw, 2.0, 2.0), Error);
}

TEST_CASE("depth encode/decode round trip stays within one step") {
  std::mt19937_64 rng(201);
  std::uniform_real_distribution<double> u(0.5, 7.5);
  DepthMap d{ScalarMap(16, 16, 0.0), Mask(16, 16, 0)};
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      if ((x * 7 + y * 13) % 5 != 0) {
        d.values.At(x, y) = u(rng);
        d.mask.At(x, y) = 1;
      }
  const DepthEncoding enc = EncodeDepth(d);
  const double step = (enc.max_depth - enc.min_depth) / 65535.0;
  const DepthMap back = DecodeDepth(enc.raster, enc.min_depth, enc.max_depth);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      CHECK(back.mask.At(x, y) == d.mask.At(x, y));
      if (d.mask.At(x, y))
        CHECK(std::abs(back.values.At(x, y) - d.values.At(x, y)) <=
              step * (1 + 1e-9));
      else
        CHECK(back.values.At(x, y) == 0.0);
    }
}

TEST_CASE("depth encode handles constants and singletons") {
  DepthMap constant{ScalarMap(4, 4, 3.25), Mask(4, 4, 1)};
  const DepthEncoding enc = EncodeDepth(constant);
  CHECK(enc.max_depth > enc.min_depth);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) CHECK(enc.raster.At(x, y) == enc.raster.At(0, 0));
  const DepthMap back = DecodeDepth(enc.raster, enc.min_depth, enc.max_depth);
  CHECK(back.values.At(2, 2) == doctest::Approx(3.25).epsilon(1e-9));

  DepthMap single{ScalarMap(3, 3, 0.0), Mask(3, 3, 0)};
  single.values.At(1, 2) = 2.0;
  single.mask.At(1, 2) = 1;
  const DepthEncoding senc = EncodeDepth(single);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x)
      CHECK((senc.raster.At(x, y) != 0) == (x == 1 && y == 2));

  DepthMap empty{ScalarMap(3, 3, 0.0), Mask(3, 3, 0)};
  CHECK_THROWS_AS(EncodeDepth(empty), Error);
}

TEST_CASE("normal decoding applies the tangent formula and masks zeros") {
  Grid<Rgb8> raw(2, 1, Rgb8{});
  raw.At(0, 0) = {255, 255, 0};
  const NormalMap n = DecodeNormals(raw);
  CHECK(n.mask.At(0, 0) == 1);
  CHECK((n.values.At(0, 0) - Eigen::Vector3d(1, 1, 1).normalized()).norm() <
        1e-12);
  CHECK(n.mask.At(1, 0) == 0);
}

TEST_CASE("normal encode/decode round trip is within half a degree") {
  std::mt19937_64 rng(202);
  std::normal_distribution<double> g(0.0, 1.0);
  NormalMap n{Vec3Map(16, 16, Eigen::Vector3d::Zero()), Mask(16, 16, 1)};
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      n.values.At(x, y) = Eigen::Vector3d(g(rng), g(rng), g(rng)).normalized();
  const NormalMap back = DecodeNormals(EncodeNormals(n));
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      REQUIRE(back.mask.At(x, y) == 1);
      const double c =
          std::clamp(back.values.At(x, y).dot(n.values.At(x, y)), -1.0, 1.0);
      CHECK(std::acos(c) < 0.5 * std::numbers::pi / 180.0);
    }
}

TEST_CASE("flow decoding maps extremes, masks zeros, and round trips") {
  SceneMeta meta = TestMeta(true);
  Grid<Rgb16> raw(2, 1, Rgb16{});
  raw.At(0, 0) = {65535, 65535, 0};
  const FlowField f = DecodeFlow(raw, meta);
  CHECK(f.values.At(0, 0).x() == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(f.values.At(0, 0).y() == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(f.mask.At(1, 0) == 0);

  std::mt19937_64 rng(203);
  std::uniform_real_distribution<double> u(-9.0, 9.0);
  FlowField flow{Vec2Map(12, 10, Eigen::Vector2d::Zero()), Mask(12, 10, 0)};
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 12; ++x)
      if ((x + y) % 3 != 0) {
        flow.values.At(x, y) = Eigen::Vector2d(u(rng), u(rng));
        flow.mask.At(x, y) = 1;
      }
  const FlowEncoding enc = EncodeFlow(flow);
  SceneMeta meta2 = TestMeta(false);
  meta2.flow_ranges = enc.ranges;
  const FlowField back = DecodeFlow(enc.raster, meta2);
  const double step_x = (enc.ranges.max_x - enc.ranges.min_x) / 65535.0;
  const double step_y = (enc.ranges.max_y - enc.ranges.min_y) / 65535.0;
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 12; ++x) {
      CHECK(back.mask.At(x, y) == flow.mask.At(x, y));
      if (flow.mask.At(x, y)) {
        CHECK(std::abs(back.values.At(x, y).x() - flow.values.At(x, y).x()) <=
              step_x * (1 + 1e-9));
        CHECK(std::abs(back.values.At(x, y).y() - flow.values.At(x, y).y()) <=
              step_y * (1 + 1e-9));
      }
    }

  SceneMeta no_ranges = TestMeta(false);
  CHECK_THROWS_AS(DecodeFlow(raw, no_ranges), Error);
}

TEST_CASE("image encode/decode is exact at 8-bit resolution") {
  Gray8Raster raw(16, 1, 0);
  for (int x = 0; x < 16; ++x) raw.At(x, 0) = static_cast<uint8_t>(x * 17);
  const Gray8Raster back = EncodeImage(DecodeImage(raw));
  for (int x = 0; x < 16; ++x) CHECK(back.At(x, 0) == raw.At(x, 0));
}

TEST_CASE("metadata JSON round trips and accepts both matrix shapes") {
  const SceneMeta meta = TestMeta(true);
  const SceneMeta back = ParseSceneMeta(SceneMetaToJson(meta));
  CHECK((back.K.Matrix() - meta.K.Matrix()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.R - meta.R).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.t - meta.t).cwiseAbs().maxCoeff() == 0.0);
  CHECK(back.min_depth == meta.min_depth);
  CHECK(back.max_depth == meta.max_depth);
  REQUIRE(back.flow_ranges.has_value());
  CHECK(back.flow_ranges->max_x == meta.flow_ranges->max_x);
  CHECK((back.light_pos - meta.light_pos).cwiseAbs().maxCoeff() == 0.0);

  const std::string nested = R"({
    "K": [[60, 0, 7.5], [0, 60, 5.5], [0, 0, 1]],
    "R": [[1,0,0],[0,1,0],[0,0,1]],
    "t": [0, 0, 0],
    "minDepth": 1.0, "maxDepth": 2.0,
    "lightPos": [0, 0, 0],
    "extraField": "ignored"
  })";
  const SceneMeta m2 = ParseSceneMeta(nested);
  CHECK(m2.K.fx == 60.0);
  CHECK(m2.K.cy == 5.5);
  CHECK(!m2.flow_ranges.has_value());
}

TEST_CASE("metadata errors are categorized") {
  auto category_of = [](const std::string& text) {
    try {
      ParseSceneMeta(text);
    } catch (const Error& e) {
      return e.Category();
    }
    return ErrorCategory::kIo;  // not reached in these cases
  };
  CHECK(category_of("{ not json") == ErrorCategory::kFormat);
  CHECK(category_of(R"({"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0],"minDepth":0,"maxDepth":1})") ==
        ErrorCategory::kMetadata);
  CHECK(category_of(
            R"({"K":[60,0,0,0,60,0,0,0,1],"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0],"minDepth":2,"maxDepth":1})") ==
        ErrorCategory::kMetadata);
  const std::string bad_flow =
      R"({"K":[60,0,0,0,60,0,0,0,1],"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0],
          "minDepth":1,"maxDepth":2,"minFlowX":3,"maxFlowX":1,"minFlowY":0,"maxFlowY":0})";
  CHECK(category_of(bad_flow) == ErrorCategory::kMetadata);
  const std::string bad_k =
      R"({"K":[0,0,0,0,0,0,0,0,1],"R":[1,0,0,0,1,0,0,0,1],"t":[0,0,0],"minDepth":1,"maxDepth":2})";
  CHECK(category_of(bad_k) == ErrorCategory::kCalibration);
}

TEST_CASE("PNG rasters survive write/read in every supported layout") {
  const fs::path dir = FreshDir("invflow_codec_png");
  std::mt19937_64 rng(204);
  Gray8Raster g8(9, 7);
  Gray16Raster g16(9, 7);
  Grid<Rgb8> c8(9, 7, Rgb8{});
  Grid<Rgb16> c16(9, 7, Rgb16{});
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x) {
      g8.At(x, y) = static_cast<uint8_t>(rng());
      g16.At(x, y) = static_cast<uint16_t>(rng());
      c8.At(x, y) = {static_cast<uint8_t>(rng()), static_cast<uint8_t>(rng()),
                     static_cast<uint8_t>(rng())};
      c16.At(x, y) = {static_cast<uint16_t>(rng()),
                      static_cast<uint16_t>(rng()),
                      static_cast<uint16_t>(rng())};
    }
  WritePng(dir / "g8.png", g8);
  WritePng(dir / "g16.png", g16);
  WritePng(dir / "c8.png", c8);
  WritePng(dir / "c16.png", c16);
  const Gray8Raster rg8 = ReadGray8Png(dir / "g8.png");
  const Gray16Raster rg16 = ReadGray16Png(dir / "g16.png");
  const Grid<Rgb8> rc8 = ReadRgb8Png(dir / "c8.png");
  const Grid<Rgb16> rc16 = ReadRgb16Png(dir / "c16.png");
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 9; ++x) {
      CHECK(rg8.At(x, y) == g8.At(x, y));
      CHECK(rg16.At(x, y) == g16.At(x, y));
      CHECK(rc8.At(x, y) == c8.At(x, y));
      CHECK(rc16.At(x, y) == c16.At(x, y));
    }
  CHECK_THROWS_AS(ReadGray8Png(dir / "missing.png"), Error);
  CHECK_THROWS_AS(ReadRgb8Png(dir / "g8.png"), Error);  // wrong layout
  std::ofstream(dir / "junk.png") << "not a png";
  CHECK_THROWS_AS(ReadGray8Png(dir / "junk.png"), Error);
}

TEST_CASE("scene views round trip through a directory") {
  const fs::path dir = FreshDir("invflow_codec_scene");
  const SceneView v0 = TestView(16, 12, true);
  const SceneView v1 = TestView(16, 12, false);
  WriteScenePair(dir, v0, v1);
  const auto [r0, r1] = LoadScenePair(dir);

  REQUIRE(r0.flow.has_value());
  CHECK(!r1.flow.has_value());
  const double dstep = (v0.meta.max_depth - v0.meta.min_depth) / 65535.0;
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 16; ++x) {
      CHECK(r0.depth.mask.At(x, y) == v0.depth.mask.At(x, y));
      CHECK(r0.normals.mask.At(x, y) == v0.normals.mask.At(x, y));
      if (v0.depth.mask.At(x, y)) {
        CHECK(std::abs(r0.depth.values.At(x, y) - v0.depth.values.At(x, y)) <=
              dstep);
        CHECK(r0.normals.values.At(x, y).dot(v0.normals.values.At(x, y)) >
              std::cos(0.5 * std::numbers::pi / 180.0));
      }
      CHECK(r0.image.At(x, y) == doctest::Approx(v0.image.At(x, y)).epsilon(1e-12));
    }

  // Re-writing the loaded pair reproduces image/depth/flow byte-for-byte;
  // normals may wobble one quantization bit because decode renormalizes.
  const fs::path dir2 = FreshDir("invflow_codec_scene2");
  WriteScenePair(dir2, r0, r1);
  for (const std::string name : {"image0.png", "depth0.png", "flow0.png",
                                 "image1.png", "depth1.png"}) {
    CAPTURE(name);
    CHECK(FileBytes(dir / name) == FileBytes(dir2 / name));
  }
  const SceneView r2 = LoadSceneView(dir2, 0);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 16; ++x) {
      CHECK(r2.normals.mask.At(x, y) == r0.normals.mask.At(x, y));
      if (r0.normals.mask.At(x, y))
        CHECK(r2.normals.values.At(x, y).dot(r0.normals.values.At(x, y)) >
              std::cos(0.5 * std::numbers::pi / 180.0));
    }
}

TEST_CASE("loading intersects depth and normal masks") {
  const fs::path dir = FreshDir("invflow_codec_masks");
  SceneView v = TestView(10, 10, false);
  // Give depth a pixel that normals lack; the loader must drop it.
  v.depth.mask.At(0, 0) = 1;
  v.depth.values.At(0, 0) = 2.0;
  REQUIRE(v.normals.mask.At(0, 0) == 0);
  WriteSceneView(dir, 0, v);
  WriteSceneView(dir, 1, v);
  const SceneView r = LoadSceneView(dir, 0);
  CHECK(r.depth.mask.At(0, 0) == 0);
  CHECK(r.depth.values.At(0, 0) == 0.0);
}

TEST_CASE("loading flips normals to face the camera") {
  const fs::path dir = FreshDir("invflow_codec_orient");
  SceneView v = TestView(10, 10, false);
  // Flip one stored normal away from the camera before writing.
  int fx = -1, fy = -1;
  for (int y = 0; y < 10 && fx < 0; ++y)
    for (int x = 0; x < 10 && fx < 0; ++x)
      if (v.normals.mask.At(x, y)) {
        fx = x;
        fy = y;
      }
  REQUIRE(fx >= 0);
  const Eigen::Vector3d facing = v.normals.values.At(fx, fy);
  v.normals.values.At(fx, fy) = -facing;
  WriteSceneView(dir, 0, v);
  WriteSceneView(dir, 1, v);
  const SceneView r = LoadSceneView(dir, 0);
  CHECK(r.normals.values.At(fx, fy).dot(facing) > 0.99);
}

TEST_CASE("missing scene files raise io errors") {
  const fs::path dir = FreshDir("invflow_codec_missing");
  CHECK_THROWS_AS(LoadScenePair(dir), Error);
  try {
    LoadScenePair(dir);
  } catch (const Error& e) {
    CHECK(e.Category() == ErrorCategory::kIo);
  }
}
