#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "qis/fidelity.hpp"
#include "qis/grid.hpp"

namespace qis::gen {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

inline ScalarField random_field(Rng& rng, int h, int w, double lo, double hi) {
  ScalarField f(h, w);
  for (double& v : f) v = uniform(rng, lo, hi);
  return f;
}

inline BinaryMask random_mask(Rng& rng, int h, int w, double p_one) {
  BinaryMask m(h, w);
  std::bernoulli_distribution b(p_one);
  for (auto& v : m) v = b(rng) ? 1 : 0;
  return m;
}

// Identity plus a few random low-frequency sinusoids; large amplitudes fold.
inline DeformationField smooth_random_field(Rng& rng, int pixel_rows, int pixel_cols, double amplitude) {
  DeformationField psi = identity_field(pixel_rows, pixel_cols);
  for (int mode = 0; mode < 4; ++mode) {
    const double kx = uniform(rng, 0.02, 0.15);
    const double ky = uniform(rng, 0.02, 0.15);
    const double ph = uniform(rng, 0.0, 6.3);
    const double ax = uniform(rng, -amplitude, amplitude);
    const double ay = uniform(rng, -amplitude, amplitude);
    for (int i = 0; i <= pixel_rows; ++i) {
      for (int j = 0; j <= pixel_cols; ++j) {
        const double s = std::sin(kx * j + ky * i + ph);
        psi(i, j).x += ax * s;
        psi(i, j).y += ay * std::cos(ky * j - kx * i + ph);
      }
    }
  }
  return psi;
}

inline RegionStats random_stats(Rng& rng) {
  RegionStats s;
  s.p0 = uniform(rng, 0.0, 255.0);
  s.p1 = uniform(rng, 0.0, 255.0);
  s.p2 = uniform(rng, 0.0, 255.0);
  s.a0 = uniform_int(rng, 1, 4000);
  s.a1 = uniform_int(rng, 1, 4000);
  s.a2 = uniform_int(rng, 1, 4000);
  return s;
}

// Three-value image with exactly the given integer areas, painted in a
// shuffled pixel order so the regions are scattered.
struct ThreeValueImage {
  ScalarField image;
  BinaryMask omega1;
  BinaryMask omega2;
};

inline ThreeValueImage synthesize_three_value(Rng& rng, int h, int w, double p0, double p1, double p2,
                                              std::size_t a1, std::size_t a2) {
  ThreeValueImage t{ScalarField(h, w, p0), BinaryMask(h, w, 0), BinaryMask(h, w, 0)};
  std::vector<std::size_t> order(t.image.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < a1 + a2; ++k) {
    const std::size_t i = order[k];
    if (k < a1) {
      t.image[i] = p1;
      t.omega1[i] = 1;
    } else {
      t.image[i] = p2;
      t.omega2[i] = 1;
    }
  }
  return t;
}

inline BinaryMask mask_union(const BinaryMask& a, const BinaryMask& b) {
  BinaryMask out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (a[i] || b[i]) ? 1 : 0;
  return out;
}

inline double relative_error(double a, double b) { return std::abs(a - b) / std::max({1e-300, std::abs(a), std::abs(b)}); }

}  // namespace qis::gen
