#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

namespace invflow {

// Dense row-major 2D grid. (x, y) indexes column x of row y.
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<size_t>(width) * height, fill) {}

  int Width() const { return width_; }
  int Height() const { return height_; }
  size_t Size() const { return data_.size(); }
  bool Empty() const { return data_.empty(); }

  T& At(int x, int y) { return data_[static_cast<size_t>(y) * width_ + x]; }
  const T& At(int x, int y) const {
    return data_[static_cast<size_t>(y) * width_ + x];
  }
  bool Contains(int x, int y) const {
    return x >= 0 && x < width_ && y >= 0 && y < height_;
  }
  bool SameSize(int width, int height) const {
    return width_ == width && height_ == height;
  }

  T* Data() { return data_.data(); }
  const T* Data() const { return data_.data(); }
  T* Row(int y) { return data_.data() + static_cast<size_t>(y) * width_; }
  const T* Row(int y) const {
    return data_.data() + static_cast<size_t>(y) * width_;
  }

  void Fill(const T& value) { data_.assign(data_.size(), value); }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

using Mask = Grid<uint8_t>;  // 1 = valid, 0 = invalid
using ScalarMap = Grid<double>;
using Vec2Map = Grid<Eigen::Vector2d>;
using Vec3Map = Grid<Eigen::Vector3d>;

// Per-pixel weights in [0, 1]; 0 means "no information".
using ConfidenceMap = Grid<double>;

// Semi-dense maps pair values with a validity mask. Invalid pixels carry
// zero values so that masked data can never leak into sums.
struct DepthMap {
  ScalarMap values;
  Mask mask;
  int Width() const { return values.Width(); }
  int Height() const { return values.Height(); }
};

struct VertexMap {
  Vec3Map values;
  Mask mask;
  int Width() const { return values.Width(); }
  int Height() const { return values.Height(); }
};

struct NormalMap {
  Vec3Map values;
  Mask mask;
  int Width() const { return values.Width(); }
  int Height() const { return values.Height(); }
};

// Optical flow in pixels; value (fx, fy) maps (x, y) to (x+fx, y+fy).
struct FlowField {
  Vec2Map values;
  Mask mask;
  int Width() const { return values.Width(); }
  int Height() const { return values.Height(); }
};

inline Mask FullMask(int width, int height) { return Mask(width, height, 1); }

inline ConfidenceMap MaskToConfidence(const Mask& mask) {
  ConfidenceMap out(mask.Width(), mask.Height());
  for (int y = 0; y < mask.Height(); ++y)
    for (int x = 0; x < mask.Width(); ++x)
      out.At(x, y) = mask.At(x, y) ? 1.0 : 0.0;
  return out;
}

}  // namespace invflow
