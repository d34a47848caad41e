#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>

#include "qis/clickmap.hpp"
#include "qis/error.hpp"
#include "qis/grid.hpp"

namespace qis {

// Three-value abstraction: background Omega0, kept foreground Omega1, and the
// region Omega2 a click is about, with mean intensities p_i and pixel areas
// a_i.
struct RegionStats {
  double p0 = 0.0;
  double p1 = 0.0;
  double p2 = 0.0;
  double a0 = 0.0;
  double a1 = 0.0;
  double a2 = 0.0;

  RegionStats shifted(double r) const {
    RegionStats s = *this;
    s.p2 += r;
    return s;
  }
  RegionStats negated() const { return {-p0, -p1, -p2, a0, a1, a2}; }
};

struct CanonicalEnergies {
  double e_omega1 = 0.0;  // G = Omega1
  double e_omega2 = 0.0;  // G = Omega2
  double e_union = 0.0;   // G = Omega1 u Omega2
};

enum class Minimizer { omega1, omega2, union_ };

inline const char* to_string(Minimizer m) {
  switch (m) {
    case Minimizer::omega1: return "Omega1";
    case Minimizer::omega2: return "Omega2";
    case Minimizer::union_: return "Union";
  }
  return "?";
}

struct RRange {
  double lo = 0.0;
  double hi = 0.0;
  double mid = 0.0;

  bool nonempty() const noexcept { return lo <= hi; }
  bool contains(double r) const noexcept { return lo <= r && r <= hi; }
};

struct PixelwiseEnergy {
  double c1 = 0.0;
  double c2 = 0.0;
  double energy = 0.0;
};

// E(c1, c2, G) with the optimal constants (region means).
inline PixelwiseEnergy pixelwise_energy(const ScalarField& img, const BinaryMask& fg) {
  require_same_shape(img, fg, "pixelwise_energy");
  double s_in = 0.0;
  double s_out = 0.0;
  std::size_t n_in = 0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (fg[i]) {
      s_in += img[i];
      ++n_in;
    } else {
      s_out += img[i];
    }
  }
  const std::size_t n_out = img.size() - n_in;
  if (n_in == 0 || n_out == 0) throw Error(ErrorCode::empty_region, "foreground or background is empty");
  PixelwiseEnergy out;
  out.c1 = s_in / static_cast<double>(n_in);
  out.c2 = s_out / static_cast<double>(n_out);
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double d = img[i] - (fg[i] ? out.c1 : out.c2);
    out.energy += d * d;
  }
  return out;
}

inline CanonicalEnergies canonical_energies(const RegionStats& s) {
  auto sq = [](double v) { return v * v; };
  return {sq(s.p0 - s.p2) * s.a2 * s.a0 / (s.a2 + s.a0), sq(s.p0 - s.p1) * s.a1 * s.a0 / (s.a1 + s.a0),
          sq(s.p1 - s.p2) * s.a1 * s.a2 / (s.a1 + s.a2)};
}

// Argmin of the three candidate energies; ties resolve Union, then Omega1,
// then Omega2.
inline Minimizer predict_minimizer(const RegionStats& s) {
  const CanonicalEnergies e = canonical_energies(s);
  if (e.e_union <= e.e_omega1 && e.e_union <= e.e_omega2) return Minimizer::union_;
  if (e.e_omega1 <= e.e_omega2) return Minimizer::omega1;
  return Minimizer::omega2;
}

namespace detail {

inline void require_theorem_stats(const RegionStats& s) {
  if (!(s.a0 > 0.0 && s.a1 > 0.0 && s.a2 > 0.0)) {
    throw Error(ErrorCode::empty_region, "all three regions need positive area");
  }
  if (s.p0 == s.p1) throw Error(ErrorCode::degenerate_contrast, "background and foreground means coincide");
}

inline RRange ordered_range(double first, double second, bool p0_above_p1) {
  RRange r;
  if (p0_above_p1) {
    r.lo = first;
    r.hi = second;
  } else {
    r.lo = second;
    r.hi = first;
  }
  r.mid = 0.5 * (r.lo + r.hi);
  return r;
}

}  // namespace detail

// Admissible shift r of Omega2 (positive click) making Omega1 u Omega2 the
// minimizer.
inline RRange r_positive(const RegionStats& s) {
  detail::require_theorem_stats(s);
  const double A = std::sqrt(s.a1 * (s.a2 + s.a0) / (s.a0 * (s.a1 + s.a2)));
  const double B = std::sqrt(s.a2 * (s.a1 + s.a0) / (s.a0 * (s.a1 + s.a2)));
  const double qx = ((s.p1 - s.p2) * B - (s.p0 - s.p1)) / B;
  const double ry = ((s.p1 - s.p2) * A + (s.p0 - s.p2)) / (A + 1.0);
  return detail::ordered_range(qx, ry, s.p0 > s.p1);
}

// Admissible shift r of Omega2 (negative click) making Omega1 alone the
// minimizer.
inline RRange r_negative(const RegionStats& s) {
  detail::require_theorem_stats(s);
  const double C = std::sqrt(s.a0 * (s.a2 + s.a1) / (s.a1 * (s.a0 + s.a2)));
  const double E = std::sqrt(s.a2 * (s.a0 + s.a1) / (s.a1 * (s.a0 + s.a2)));
  const double ly = ((s.p0 - s.p2) * C + (s.p1 - s.p2)) / (C + 1.0);
  const double py = ((s.p0 - s.p2) * E + (s.p0 - s.p1)) / E;
  return detail::ordered_range(ly, py, s.p0 > s.p1);
}

// Partition for a click on the current foreground fg:
//   positive: Omega2 = clicks \ fg, Omega1 = fg, Omega0 = the rest
//   negative: Omega2 = clicks n fg, Omega1 = fg \ Omega2, Omega0 = ~fg
inline RegionStats estimate_region_stats(const ScalarField& img, const BinaryMask& fg, const ClickMap& clicks) {
  require_same_shape(img, fg, "estimate_region_stats");
  require_same_shape(img, clicks.mask, "estimate_region_stats");
  std::array<double, 3> sum{};
  std::array<double, 3> area{};
  const bool positive = clicks.polarity == Polarity::positive;
  for (std::size_t i = 0; i < img.size(); ++i) {
    const bool in_fg = fg[i] != 0;
    const bool in_click = clicks.mask[i] != 0;
    int region = 0;
    if (positive) {
      region = in_fg ? 1 : (in_click ? 2 : 0);
    } else {
      region = in_fg ? (in_click ? 2 : 1) : 0;
    }
    sum[static_cast<std::size_t>(region)] += img[i];
    area[static_cast<std::size_t>(region)] += 1.0;
  }
  for (int k = 0; k < 3; ++k) {
    if (area[static_cast<std::size_t>(k)] == 0.0) {
      throw Error(ErrorCode::empty_region, "region Omega" + std::to_string(k) + " is empty; the click has no effect");
    }
  }
  return {sum[0] / area[0], sum[1] / area[1], sum[2] / area[2], area[0], area[1], area[2]};
}

struct ClickWeight {
  double r = 0.0;
  RRange range;
  bool fallback = false;  // theorem interval empty or inverted
};

// Midpoint of the theorem interval. When the interval is empty the shift
// moves Omega2's mean onto the attracting region's mean instead.
inline ClickWeight choose_click_weight(const RegionStats& s, Polarity polarity) {
  ClickWeight w;
  w.range = polarity == Polarity::positive ? r_positive(s) : r_negative(s);
  if (w.range.nonempty() && std::isfinite(w.range.mid)) {
    w.r = w.range.mid;
  } else {
    w.fallback = true;
    w.r = polarity == Polarity::positive ? s.p1 - s.p2 : s.p0 - s.p2;
  }
  return w;
}

namespace oracle {

// E(G = D0 u D1 u D2) for sub-regions D_i of Omega_i with |D_i| = a_i - B_i,
// in the pairwise-difference form. An empty side contributes zero.
inline double mixed_subset_energy(const RegionStats& s, double b0, double b1, double b2) {
  const double d0 = s.a0 - b0;
  const double d1 = s.a1 - b1;
  const double d2 = s.a2 - b2;
  const double d01 = (s.p0 - s.p1) * (s.p0 - s.p1);
  const double d02 = (s.p0 - s.p2) * (s.p0 - s.p2);
  const double d12 = (s.p1 - s.p2) * (s.p1 - s.p2);
  auto side = [&](double x0, double x1, double x2) {
    const double total = x0 + x1 + x2;
    if (total <= 0.0) return 0.0;
    return (d12 * x1 * x2 + d01 * x0 * x1 + d02 * x0 * x2) / total;
  };
  return side(d0, d1, d2) + side(b0, b1, b2);
}

// Brute-force argmin of the candidate energies, with no tie rule.
inline std::optional<Minimizer> strict_argmin(const CanonicalEnergies& e, double rel_tie = 1e-12) {
  const std::array<double, 3> v{e.e_omega1, e.e_omega2, e.e_union};
  int best = 0;
  for (int i = 1; i < 3; ++i) {
    if (v[static_cast<std::size_t>(i)] < v[static_cast<std::size_t>(best)]) best = i;
  }
  for (int i = 0; i < 3; ++i) {
    if (i == best) continue;
    const double gap = v[static_cast<std::size_t>(i)] - v[static_cast<std::size_t>(best)];
    if (gap <= rel_tie * std::max(1.0, std::abs(v[static_cast<std::size_t>(best)]))) return std::nullopt;
  }
  constexpr std::array<Minimizer, 3> kinds{Minimizer::omega1, Minimizer::omega2, Minimizer::union_};
  return kinds[static_cast<std::size_t>(best)];
}

}  // namespace oracle

}  // namespace qis
