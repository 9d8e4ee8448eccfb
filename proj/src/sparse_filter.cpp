#include "invflow/sparse_filter.hpp"

#include <cmath>

#include "invflow/error.hpp"

namespace invflow {

namespace {

template <typename T>
T ZeroValue() {
  if constexpr (std::is_arithmetic_v<T>)
    return T{};
  else
    return T::Zero();
}

}  // namespace

Kernel Kernel::Box(int size) {
  Kernel k{Grid<double>(size, size, 1.0)};
  k.Validate();
  return k;
}

Kernel Kernel::Binomial5() {
  const double w[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
  Kernel k{Grid<double>(5, 5)};
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) k.weights.At(x, y) = w[x] * w[y];
  return k;
}

void Kernel::Validate() const {
  if (weights.Empty() || weights.Width() % 2 == 0 || weights.Height() % 2 == 0)
    throw Error(ErrorCategory::kDegenerateInput, "kernel must be odd-sized");
  bool any = false;
  for (int y = 0; y < weights.Height(); ++y)
    for (int x = 0; x < weights.Width(); ++x) {
      const double v = weights.At(x, y);
      if (!std::isfinite(v) || v < 0.0)
        throw Error(ErrorCategory::kDegenerateInput,
                    "kernel weights must be finite and nonnegative");
      any = any || v > 0.0;
    }
  if (!any)
    throw Error(ErrorCategory::kDegenerateInput, "kernel has no nonzero weight");
}

template <typename T>
Filtered<T> NormalizedConvolve(const Grid<T>& signal, const Kernel& kernel,
                               const ConfidenceMap& confidence) {
  kernel.Validate();
  if (!signal.SameSize(confidence.Width(), confidence.Height()))
    throw Error(ErrorCategory::kDegenerateInput,
                "signal and confidence dimensions differ");
  const int w = signal.Width(), h = signal.Height();
  const int rx = kernel.weights.Width() / 2, ry = kernel.weights.Height() / 2;
  Filtered<T> out{Grid<T>(w, h, ZeroValue<T>()), ConfidenceMap(w, h, 0.0)};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      T acc = ZeroValue<T>();
      double mass = 0.0;     // K * W
      double inbound = 0.0;  // K * 1 over in-bounds taps
      for (int dy = -ry; dy <= ry; ++dy) {
        const int sy = y + dy;
        if (sy < 0 || sy >= h) continue;
        for (int dx = -rx; dx <= rx; ++dx) {
          const int sx = x + dx;
          if (sx < 0 || sx >= w) continue;
          const double kw = kernel.weights.At(dx + rx, dy + ry);
          inbound += kw;
          const double cw = kw * confidence.At(sx, sy);
          if (cw == 0.0) continue;
          mass += cw;
          acc += cw * signal.At(sx, sy);
        }
      }
      if (mass > 0.0) {
        out.values.At(x, y) = acc / mass;
        out.confidence.At(x, y) = mass / inbound;
      }
    }
  }
  return out;
}

template <typename T>
Filtered<T> SparseDownsample(const Grid<T>& map,
                             const ConfidenceMap& confidence) {
  if (map.Width() < 2 || map.Height() < 2)
    throw Error(ErrorCategory::kDegenerateInput,
                "downsample needs dimensions >= 2");
  const Filtered<T> smooth =
      NormalizedConvolve(map, Kernel::Binomial5(), confidence);
  const int ow = (map.Width() + 1) / 2, oh = (map.Height() + 1) / 2;
  Filtered<T> out{Grid<T>(ow, oh, ZeroValue<T>()), ConfidenceMap(ow, oh, 0.0)};
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      out.values.At(x, y) = smooth.values.At(2 * x, 2 * y);
      out.confidence.At(x, y) = smooth.confidence.At(2 * x, 2 * y);
    }
  return out;
}

template Filtered<double> NormalizedConvolve(const Grid<double>&, const Kernel&,
                                             const ConfidenceMap&);
template Filtered<Eigen::Vector2d> NormalizedConvolve(
    const Grid<Eigen::Vector2d>&, const Kernel&, const ConfidenceMap&);
template Filtered<Eigen::Vector3d> NormalizedConvolve(
    const Grid<Eigen::Vector3d>&, const Kernel&, const ConfidenceMap&);
template Filtered<double> SparseDownsample(const Grid<double>&,
                                           const ConfidenceMap&);
template Filtered<Eigen::Vector2d> SparseDownsample(const Grid<Eigen::Vector2d>&,
                                                    const ConfidenceMap&);
template Filtered<Eigen::Vector3d> SparseDownsample(const Grid<Eigen::Vector3d>&,
                                                    const ConfidenceMap&);

}  // namespace invflow
