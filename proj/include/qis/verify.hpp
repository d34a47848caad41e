#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qis/fidelity.hpp"
#include "qis/grid.hpp"
#include "qis/solver.hpp"
#include "qis/synthetic.hpp"

// Property suites shared by `qis verify`, the unit tests and the acceptance
// gate. Each suite derives its per-trial streams from one seed.
namespace qis::verify {

struct SuiteReport {
  std::string name;
  int trials = 0;
  int passed = 0;
  int skipped = 0;       // tied or degenerate draws, excluded from trials
  double worst = 0.0;    // suite-specific error measure, larger is worse
  std::vector<std::string> failures;

  explicit SuiteReport(std::string n) : name(std::move(n)) {}

  bool ok() const noexcept { return trials > 0 && passed == trials; }

  void record(bool pass, const std::string& what) {
    ++trials;
    if (pass) {
      ++passed;
    } else if (failures.size() < 10) {
      failures.push_back(what);
    }
  }

  std::string summary() const {
    std::ostringstream os;
    os << name << ": " << passed << "/" << trials << " pass";
    if (skipped) os << " (" << skipped << " skipped)";
    os << ", worst " << worst;
    return os.str();
  }
};

using Rng = std::mt19937_64;

inline Rng trial_rng(std::uint64_t seed, std::uint64_t trial) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial)};
  return Rng(seq);
}

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline RegionStats random_stats(Rng& rng) {
  std::uniform_int_distribution<int> area(1, 4000);
  return {uniform(rng, 0.0, 255.0), uniform(rng, 0.0, 255.0), uniform(rng, 0.0, 255.0),
          double(area(rng)),        double(area(rng)),        double(area(rng))};
}

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({1e-300, std::abs(a), std::abs(b)});
}

// Random blob image: Omega1 a union of disks, Omega2 a union of rectangles
// outside Omega1, everything else Omega0.
struct BlobImage {
  ScalarField image;
  BinaryMask omega1;
  BinaryMask omega2;
  RegionStats stats;
};

inline BlobImage random_blob_image(Rng& rng, int size) {
  for (;;) {
    BlobImage b;
    b.omega1 = BinaryMask(size, size, 0);
    b.omega2 = BinaryMask(size, size, 0);
    const int disks = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int k = 0; k < disks; ++k) {
      const BinaryMask d = synthetic::disk(size, size, uniform(rng, 0, size), uniform(rng, 0, size),
                                           uniform(rng, 0.05 * size, 0.25 * size));
      b.omega1 = synthetic::mask_or(b.omega1, d);
    }
    const int rects = std::uniform_int_distribution<int>(1, 3)(rng);
    for (int k = 0; k < rects; ++k) {
      const int x0 = static_cast<int>(uniform(rng, 0, size - 4));
      const int y0 = static_cast<int>(uniform(rng, 0, size - 4));
      const BinaryMask r = synthetic::rectangle(size, size, x0, y0, x0 + static_cast<int>(uniform(rng, 3, size / 2.0)),
                                                y0 + static_cast<int>(uniform(rng, 3, size / 2.0)));
      b.omega2 = synthetic::mask_or(b.omega2, r);
    }
    b.omega2 = synthetic::mask_minus(b.omega2, b.omega1);
    b.stats = {uniform(rng, 0.0, 255.0), uniform(rng, 0.0, 255.0), uniform(rng, 0.0, 255.0), 0, 0, 0};
    b.image = ScalarField(size, size, b.stats.p0);
    for (std::size_t i = 0; i < b.image.size(); ++i) {
      if (b.omega1[i]) {
        b.image[i] = b.stats.p1;
        b.stats.a1 += 1;
      } else if (b.omega2[i]) {
        b.image[i] = b.stats.p2;
        b.stats.a2 += 1;
      } else {
        b.stats.a0 += 1;
      }
    }
    if (b.stats.a0 > 0 && b.stats.a1 > 0 && b.stats.a2 > 0) return b;
  }
}

// Pixel sums on synthesized images against the closed-form energies.
inline SuiteReport closed_form_agreement(std::uint64_t seed, int trials = 20, int size = 64) {
  SuiteReport rep("closed-form energies");
  for (int t = 0; t < trials; ++t) {
    Rng rng = trial_rng(seed, static_cast<std::uint64_t>(t));
    const BlobImage b = random_blob_image(rng, size);
    const CanonicalEnergies e = canonical_energies(b.stats);
    const double e1 = pixelwise_energy(b.image, b.omega1).energy;
    const double e2 = pixelwise_energy(b.image, b.omega2).energy;
    const double eu = pixelwise_energy(b.image, synthetic::mask_or(b.omega1, b.omega2)).energy;
    const double err = std::max({relative_error(e1, e.e_omega1), relative_error(e2, e.e_omega2),
                                 relative_error(eu, e.e_union)});
    rep.worst = std::max(rep.worst, err);
    rep.record(err <= 1e-9, "trial " + std::to_string(t) + ": relative error " + std::to_string(err));
  }
  return rep;
}

// predict_minimizer against the brute-force argmin, ties excluded.
inline SuiteReport selector(std::uint64_t seed, int trials = 1000) {
  SuiteReport rep("minimizer selector");
  Rng rng = trial_rng(seed, 0);
  for (int t = 0; t < trials; ++t) {
    const RegionStats s = random_stats(rng);
    const auto truth = oracle::strict_argmin(canonical_energies(s));
    if (!truth) {
      ++rep.skipped;
      continue;
    }
    const Minimizer got = predict_minimizer(s);
    rep.record(got == *truth, std::string("predicted ") + to_string(got) + ", brute force " + to_string(*truth));
  }
  return rep;
}

// r at the midpoint and at the quarter points of the interval must make the
// intended region set the strict minimizer of the shifted energies.
inline SuiteReport r_soundness(std::uint64_t seed, int trials = 500) {
  SuiteReport rep("click-weight soundness");
  Rng rng = trial_rng(seed, 1);
  for (Polarity pol : {Polarity::positive, Polarity::negative}) {
    const Minimizer want = pol == Polarity::positive ? Minimizer::union_ : Minimizer::omega1;
    int done = 0;
    while (done < trials) {
      const RegionStats s = random_stats(rng);
      if (s.p0 == s.p1) continue;
      const RRange range = pol == Polarity::positive ? r_positive(s) : r_negative(s);
      if (!(range.hi > range.lo)) {
        ++rep.skipped;
        continue;
      }
      ++done;
      const double w = range.hi - range.lo;
      bool pass = true;
      for (double r : {range.mid, range.lo + 0.25 * w, range.lo + 0.75 * w}) {
        const auto got = oracle::strict_argmin(canonical_energies(s.shifted(r)));
        pass = pass && got && *got == want;
      }
      rep.record(pass, std::string(to_string(pol)) + " click: shifted argmin differs");
    }
  }
  return rep;
}

// Mixed sub-region energy: the grid minimum over (B1, B2) sits on a corner,
// and dF/dB1 decreases along B1.
inline SuiteReport corner_property(std::uint64_t seed, int trials = 50, int resolution = 33) {
  SuiteReport rep("corner property");
  Rng rng = trial_rng(seed, 2);
  for (int t = 0; t < trials; ++t) {
    const RegionStats s = random_stats(rng);
    bool pass = true;
    double worst = 0.0;
    for (int k0 = 0; k0 < 5; ++k0) {
      const double b0 = s.a0 * k0 / 4.0;
      double grid_min = std::numeric_limits<double>::infinity();
      for (int i = 0; i < resolution; ++i) {
        for (int j = 0; j < resolution; ++j) {
          const double b1 = s.a1 * i / (resolution - 1);
          const double b2 = s.a2 * j / (resolution - 1);
          grid_min = std::min(grid_min, oracle::mixed_subset_energy(s, b0, b1, b2));
        }
      }
      double corner_min = std::numeric_limits<double>::infinity();
      for (double b1 : {0.0, s.a1}) {
        for (double b2 : {0.0, s.a2}) corner_min = std::min(corner_min, oracle::mixed_subset_energy(s, b0, b1, b2));
      }
      const double gap = (corner_min - grid_min) / std::max(1.0, std::abs(corner_min));
      worst = std::max(worst, gap);
      pass = pass && gap <= 1e-12;

      for (int j = 0; j < resolution; j += 8) {
        const double b2 = s.a2 * j / (resolution - 1);
        double prev_slope = std::numeric_limits<double>::infinity();
        const double h = s.a1 / (resolution - 1);
        for (int i = 0; i + 1 < resolution; ++i) {
          const double f0 = oracle::mixed_subset_energy(s, b0, h * i, b2);
          const double f1 = oracle::mixed_subset_energy(s, b0, h * (i + 1), b2);
          const double slope = (f1 - f0) / h;
          const double tol = 1e-9 * std::max(1.0, std::abs(slope));
          pass = pass && slope <= prev_slope + tol;
          prev_slope = slope;
        }
      }
    }
    rep.worst = std::max(rep.worst, worst);
    rep.record(pass, "trial " + std::to_string(t));
  }
  return rep;
}

inline std::vector<SuiteReport> theorems(std::uint64_t seed, int trials) {
  return {closed_form_agreement(seed, std::max(1, std::min(trials, 20))), selector(seed, std::max(trials, 1)),
          r_soundness(seed, std::max(trials, 1)), corner_property(seed, std::max(1, std::min(trials, 50)))};
}

// Random small registration problem around a mildly perturbed identity.
struct GradientProblem {
  ScalarField image;
  ScalarField smoothed;
  DeformationField psi;
  double c1 = 0.0;
  double c2 = 0.0;
};

inline GradientProblem random_gradient_problem(Rng& rng, int size) {
  GradientProblem g;
  g.image = ScalarField(size, size);
  for (double& v : g.image) v = uniform(rng, 0.0, 255.0);
  const BinaryMask templ = synthetic::disk(size, size, uniform(rng, 0.35, 0.65) * size,
                                           uniform(rng, 0.35, 0.65) * size, uniform(rng, 0.2, 0.35) * size);
  g.smoothed = gaussian_smooth(to_scalar(templ), 1.0);
  g.c1 = uniform(rng, 120.0, 255.0);
  g.c2 = uniform(rng, 0.0, 120.0);
  g.psi = identity_field(size, size);
  for (Vec2& p : g.psi) p = p + Vec2{uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2)};
  return g;
}

// Relative error ||g - g_fd|| / ||g_fd|| with central differences.
inline double gradient_error(const GradientProblem& g, const EnergyParams& params, double h = 1e-5) {
  const RegistrationObjective obj(g.image, g.smoothed, g.c1, g.c2, params);
  const NodalVector grad = obj.evaluate(g.psi).gradient;
  double diff2 = 0.0, ref2 = 0.0;
  DeformationField work = g.psi;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (int comp = 0; comp < 2; ++comp) {
      double& v = comp == 0 ? work[k].x : work[k].y;
      const double keep = v;
      v = keep + h;
      const double fp = obj.value(work);
      v = keep - h;
      const double fm = obj.value(work);
      v = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double d = grad[2 * k + static_cast<std::size_t>(comp)] - fd;
      diff2 += d * d;
      ref2 += fd * fd;
    }
  }
  return std::sqrt(diff2) / std::max(1e-300, std::sqrt(ref2));
}

inline std::vector<SuiteReport> gradients(std::uint64_t seed, int trials) {
  SuiteReport rep("objective gradient");
  for (int t = 0; t < trials; ++t) {
    Rng rng = trial_rng(seed, 100 + static_cast<std::uint64_t>(t));
    const GradientProblem g = random_gradient_problem(rng, 16);
    const double err = gradient_error(g, EnergyParams{});
    rep.worst = std::max(rep.worst, err);
    rep.record(err < 1e-5, "trial " + std::to_string(t) + ": relative error " + std::to_string(err));
  }
  return {rep};
}

// Organ-like synthetic shapes: a blob, a noisy blob and a ring whose template
// carries the hole.
struct TopologyCase {
  std::string name;
  ScalarField image;
  BinaryMask templ;
};

inline std::vector<TopologyCase> topology_cases(std::uint64_t seed, int size = 96) {
  using namespace synthetic;
  const double c = size / 2.0;
  std::vector<TopologyCase> out;
  const BinaryMask organ = ellipse(size, size, c + 3, c - 2, 0.3 * size, 0.22 * size);
  out.push_back({"organ", paint(size, size, 40.0, {{organ, 190.0}}),
                 disk(size, size, c - 4, c + 3, 0.17 * size)});
  ScalarField noisy = out.back().image;
  add_gaussian_noise(noisy, 20.0, seed);
  out.push_back({"noisy_organ", noisy, out.back().templ});
  const BinaryMask ring = mask_minus(disk(size, size, c, c, 0.33 * size), disk(size, size, c + 2, c - 1, 0.14 * size));
  const BinaryMask ring_templ = mask_minus(disk(size, size, c, c, 0.28 * size), disk(size, size, c, c, 0.18 * size));
  out.push_back({"ring", paint(size, size, 30.0, {{ring, 200.0}}), ring_templ});
  return out;
}

inline std::vector<SuiteReport> topology(std::uint64_t seed, int trials) {
  SuiteReport rep("solver topology");
  const auto cases = topology_cases(seed);
  for (int t = 0; t < std::max(1, trials); ++t) {
    const TopologyCase& tc = cases[static_cast<std::size_t>(t) % cases.size()];
    const ScalarField img = rescale_intensity(tc.image);
    const MultilevelResult res =
        multilevel_solve(img, tc.templ, identity_field(img.height(), img.width()), EnergyParams{}, 4);
    const Topology want = topology_of(tc.templ);
    const Topology got = topology_of(segmentation_mask(tc.templ, res.psi));
    rep.worst = std::max(rep.worst, double(std::abs(got.euler_characteristic() - want.euler_characteristic())));
    rep.record(got == want && min_det(res.psi) >= EnergyParams{}.det_floor,
               tc.name + ": components " + std::to_string(got.components) + ", holes " + std::to_string(got.holes));
  }
  return {rep};
}

inline bool is_suite(const std::string& name) {
  return name == "theorems" || name == "gradients" || name == "topology";
}

inline std::vector<SuiteReport> run_suite(const std::string& name, std::uint64_t seed, int trials) {
  if (name == "theorems") return theorems(seed, trials);
  if (name == "gradients") return gradients(seed, trials);
  if (name == "topology") return topology(seed, trials);
  throw Error(ErrorCode::invalid_argument, "unknown suite \"" + name + "\"");
}

}  // namespace qis::verify
