#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "invflow/error.hpp"
#include "invflow/sparse_filter.hpp"

using namespace invflow;

namespace {

// Independent reference: direct weighted sums per output pixel.
struct BruteResult {
  ScalarMap values;
  ConfidenceMap confidence;
};

BruteResult BruteNormalizedConvolve(const ScalarMap& a, const Kernel& k,
                                    const ConfidenceMap& w) {
  const int width = a.Width(), height = a.Height();
  const int rx = k.weights.Width() / 2, ry = k.weights.Height() / 2;
  BruteResult out{ScalarMap(width, height, 0.0),
                  ConfidenceMap(width, height, 0.0)};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double num = 0.0, den = 0.0, ktotal = 0.0;
      for (int ky = 0; ky < k.weights.Height(); ++ky)
        for (int kx = 0; kx < k.weights.Width(); ++kx) {
          const int sx = x + kx - rx, sy = y + ky - ry;
          if (sx < 0 || sx >= width || sy < 0 || sy >= height) continue;
          const double kw = k.weights.At(kx, ky);
          ktotal += kw;
          num += kw * w.At(sx, sy) * a.At(sx, sy);
          den += kw * w.At(sx, sy);
        }
      if (den > 0.0) {
        out.values.At(x, y) = num / den;
        out.confidence.At(x, y) = den / ktotal;
      }
    }
  return out;
}

bool CloseRel(double a, double b, double tol = 1e-12) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

ConfidenceMap RandomConfidence(int w, int h, std::mt19937_64& rng,
                               double keep_prob) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ConfidenceMap c(w, h, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (u(rng) < keep_prob) c.At(x, y) = u(rng);
  return c;
}

}  // namespace

TEST_CASE("full confidence reduces to renormalized smoothing") {
  std::mt19937_64 rng(101);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  ScalarMap a(11, 9, 0.0);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 11; ++x) a.At(x, y) = u(rng);
  const ConfidenceMap w(11, 9, 1.0);
  const Kernel k = Kernel::Binomial5();
  const auto out = NormalizedConvolve(a, k, w);
  // Interior pixels see the full kernel, so this is (K*A)/(sum K) literally.
  double ksum = 0.0;
  for (int ky = 0; ky < 5; ++ky)
    for (int kx = 0; kx < 5; ++kx) ksum += k.weights.At(kx, ky);
  for (int y = 2; y < 7; ++y)
    for (int x = 2; x < 9; ++x) {
      double conv = 0.0;
      for (int ky = 0; ky < 5; ++ky)
        for (int kx = 0; kx < 5; ++kx)
          conv += k.weights.At(kx, ky) * a.At(x + kx - 2, y + ky - 2);
      CHECK(CloseRel(out.values.At(x, y), conv / ksum));
    }
  // Everywhere (borders included) it matches the reference with W = 1.
  const auto ref = BruteNormalizedConvolve(a, k, w);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 11; ++x) {
      CHECK(CloseRel(out.values.At(x, y), ref.values.At(x, y)));
      CHECK(out.confidence.At(x, y) == 1.0);
    }
}

TEST_CASE("a single valid sample propagates its value across the footprint") {
  ScalarMap a(7, 7, 0.0);
  ConfidenceMap w(7, 7, 0.0);
  a.At(3, 3) = 2.5;
  w.At(3, 3) = 1.0;
  const auto out = NormalizedConvolve(a, Kernel::Box(3), w);
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 7; ++x) {
      const bool inside = std::abs(x - 3) <= 1 && std::abs(y - 3) <= 1;
      if (inside) {
        CHECK(out.values.At(x, y) == 2.5);
        CHECK(out.confidence.At(x, y) > 0.0);
      } else {
        CHECK(out.confidence.At(x, y) == 0.0);
        CHECK(out.values.At(x, y) == 0.0);
      }
    }
}

TEST_CASE("random sparse signals match the brute-force reference") {
  std::mt19937_64 rng(103);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (const double keep : {0.1, 0.4, 0.9}) {
    ScalarMap a(16, 16, 0.0);
    ConfidenceMap w = RandomConfidence(16, 16, rng, keep);
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x)
        if (w.At(x, y) > 0.0) a.At(x, y) = u(rng);
    for (const Kernel& k : {Kernel::Box(3), Kernel::Binomial5()}) {
      const auto out = NormalizedConvolve(a, k, w);
      const auto ref = BruteNormalizedConvolve(a, k, w);
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          CHECK(CloseRel(out.values.At(x, y), ref.values.At(x, y)));
          CHECK(CloseRel(out.confidence.At(x, y), ref.confidence.At(x, y)));
        }
    }
  }
}

TEST_CASE("confidence stays in range and masks exactly the starved pixels") {
  std::mt19937_64 rng(104);
  ScalarMap a(16, 16, 0.0);
  ConfidenceMap w = RandomConfidence(16, 16, rng, 0.15);
  const Kernel k = Kernel::Box(3);
  const auto out = NormalizedConvolve(a, k, w);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      CHECK(out.confidence.At(x, y) <= 1.0);
      CHECK(out.confidence.At(x, y) >= 0.0);
      double mass = 0.0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          if (w.Contains(x + dx, y + dy)) mass += w.At(x + dx, y + dy);
      CHECK((out.confidence.At(x, y) == 0.0) == (mass == 0.0));
    }
}

TEST_CASE("constant signals are fixed points wherever output is unmasked") {
  std::mt19937_64 rng(105);
  ScalarMap a(12, 12, 0.0);
  ConfidenceMap w = RandomConfidence(12, 12, rng, 0.3);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x)
      if (w.At(x, y) > 0.0) a.At(x, y) = 7.25;
  const auto out = NormalizedConvolve(a, Kernel::Binomial5(), w);
  for (int y = 0; y < 12; ++y)
    for (int x = 0; x < 12; ++x)
      if (out.confidence.At(x, y) > 0.0)
        CHECK(CloseRel(out.values.At(x, y), 7.25));
}

TEST_CASE("filtering is linear in the signal for fixed confidence") {
  std::mt19937_64 rng(106);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  ScalarMap a(10, 10, 0.0), b(10, 10, 0.0), mix(10, 10, 0.0);
  ConfidenceMap w = RandomConfidence(10, 10, rng, 0.5);
  const double s = 1.7, t = -0.6;
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x) {
      a.At(x, y) = u(rng);
      b.At(x, y) = u(rng);
      mix.At(x, y) = s * a.At(x, y) + t * b.At(x, y);
    }
  const Kernel k = Kernel::Box(5);
  const auto fa = NormalizedConvolve(a, k, w);
  const auto fb = NormalizedConvolve(b, k, w);
  const auto fm = NormalizedConvolve(mix, k, w);
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 10; ++x)
      CHECK(CloseRel(fm.values.At(x, y),
                     s * fa.values.At(x, y) + t * fb.values.At(x, y)));
}

TEST_CASE("vector maps filter channel-wise") {
  std::mt19937_64 rng(107);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  Vec3Map v(9, 8, Eigen::Vector3d::Zero());
  ScalarMap ch[3] = {ScalarMap(9, 8, 0.0), ScalarMap(9, 8, 0.0),
                     ScalarMap(9, 8, 0.0)};
  ConfidenceMap w = RandomConfidence(9, 8, rng, 0.6);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 9; ++x)
      for (int c = 0; c < 3; ++c) {
        const double val = u(rng);
        v.At(x, y)[c] = val;
        ch[c].At(x, y) = val;
      }
  const auto fv = NormalizedConvolve(v, Kernel::Binomial5(), w);
  for (int c = 0; c < 3; ++c) {
    const auto fs = NormalizedConvolve(ch[c], Kernel::Binomial5(), w);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 9; ++x) {
        CHECK(fv.values.At(x, y)[c] == fs.values.At(x, y));
        CHECK(fv.confidence.At(x, y) == fs.confidence.At(x, y));
      }
  }
}

TEST_CASE("downsampling a fully valid constant keeps value and confidence") {
  ScalarMap a(10, 8, 3.5);
  const auto out = SparseDownsample(a, ConfidenceMap(10, 8, 1.0));
  REQUIRE(out.values.Width() == 5);
  REQUIRE(out.values.Height() == 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      CHECK(CloseRel(out.values.At(x, y), 3.5));
      CHECK(out.confidence.At(x, y) == 1.0);
    }
}

TEST_CASE("downsampling a fully masked map stays masked") {
  const auto out = SparseDownsample(ScalarMap(9, 9, 0.0),
                                    ConfidenceMap(9, 9, 0.0));
  REQUIRE(out.values.Width() == 5);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      CHECK(out.confidence.At(x, y) == 0.0);
      CHECK(out.values.At(x, y) == 0.0);
    }
}

TEST_CASE("checkerboard-masked ramp downsample matches the reference") {
  const int n = 16;
  ScalarMap a(n, n, 0.0);
  ConfidenceMap w(n, n, 0.0);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      if ((x + y) % 2 == 0) {
        a.At(x, y) = 0.25 * x - 0.5 * y + 1.0;
        w.At(x, y) = 1.0;
      }
  const auto out = SparseDownsample(a, w);
  const auto ref = BruteNormalizedConvolve(a, Kernel::Binomial5(), w);
  for (int y = 0; y < (n + 1) / 2; ++y)
    for (int x = 0; x < (n + 1) / 2; ++x) {
      CHECK(CloseRel(out.values.At(x, y), ref.values.At(2 * x, 2 * y)));
      CHECK(CloseRel(out.confidence.At(x, y), ref.confidence.At(2 * x, 2 * y)));
    }
}

TEST_CASE("kernel validation rejects malformed kernels") {
  Kernel even{Grid<double>(4, 4, 1.0)};
  CHECK_THROWS_AS(even.Validate(), Error);
  Kernel zero{Grid<double>(3, 3, 0.0)};
  CHECK_THROWS_AS(zero.Validate(), Error);
  Kernel negative{Grid<double>(3, 3, 1.0)};
  negative.weights.At(1, 1) = -0.1;
  CHECK_THROWS_AS(negative.Validate(), Error);
  ScalarMap a(4, 4, 0.0);
  CHECK_THROWS_AS(NormalizedConvolve(a, Kernel::Box(3), ConfidenceMap(3, 4, 1.0)),
                  Error);
  CHECK_THROWS_AS(SparseDownsample(ScalarMap(1, 5, 0.0), ConfidenceMap(1, 5, 1.0)),
                  Error);
}
