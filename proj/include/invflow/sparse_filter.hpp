#pragma once

#include "invflow/maps.hpp"

namespace invflow {

// Odd-sized nonnegative filter kernel with at least one positive weight.
struct Kernel {
  Grid<double> weights;

  static Kernel Box(int size);
  // 5x5 outer product of (1,4,6,4,1)/16, the pyramid low-pass filter.
  static Kernel Binomial5();

  void Validate() const;  // throws kDegenerateInput on violation
  int Radius() const { return weights.Width() / 2; }
};

template <typename T>
struct Filtered {
  Grid<T> values;
  ConfidenceMap confidence;
};

// Confidence-weighted smoothing: values = (K * (W . A)) / (K * W), with W
// zero-padded outside the image. Pixels where the weighted kernel mass
// vanishes are masked (confidence 0, value zero). The updated confidence is
// the weighted kernel mass over the in-bounds kernel mass, so a fully
// confident map stays at confidence 1 everywhere, borders included.
template <typename T>
Filtered<T> NormalizedConvolve(const Grid<T>& signal, const Kernel& kernel,
                               const ConfidenceMap& confidence);

// Low-pass (5-tap binomial) normalized convolution followed by factor-2
// decimation of even rows/columns; output is ceil(w/2) x ceil(h/2).
template <typename T>
Filtered<T> SparseDownsample(const Grid<T>& map,
                             const ConfidenceMap& confidence);

extern template Filtered<double> NormalizedConvolve(const Grid<double>&,
                                                    const Kernel&,
                                                    const ConfidenceMap&);
extern template Filtered<Eigen::Vector2d> NormalizedConvolve(
    const Grid<Eigen::Vector2d>&, const Kernel&, const ConfidenceMap&);
extern template Filtered<Eigen::Vector3d> NormalizedConvolve(
    const Grid<Eigen::Vector3d>&, const Kernel&, const ConfidenceMap&);
extern template Filtered<double> SparseDownsample(const Grid<double>&,
                                                  const ConfidenceMap&);
extern template Filtered<Eigen::Vector2d> SparseDownsample(
    const Grid<Eigen::Vector2d>&, const ConfidenceMap&);
extern template Filtered<Eigen::Vector3d> SparseDownsample(
    const Grid<Eigen::Vector3d>&, const ConfidenceMap&);

}  // namespace invflow
