#pragma once

#include <complex>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "qis/error.hpp"
#include "qis/grid.hpp"

namespace qis {

// 2x2 Jacobian of f = (f1, f2) on one cell:
//   [ a b ]   [ df1/dx1 df1/dx2 ]
//   [ c d ] = [ df2/dx1 df2/dx2 ]
struct CellJacobian {
  double a = 1.0;
  double b = 0.0;
  double c = 0.0;
  double d = 1.0;
  double det = 1.0;
  double frob2 = 2.0;
};

using JacobianField = Grid<CellJacobian>;
using ComplexField = Grid<std::complex<double>>;

inline CellJacobian make_jacobian(double a, double b, double c, double d) {
  return {a, b, c, d, a * d - b * c, a * a + b * b + c * c + d * d};
}

// Partials at the cell center: the mean of the two opposing edge
// differences, unit grid spacing.
inline CellJacobian cell_jacobian(const DeformationField& psi, int r, int c) {
  const Vec2& p00 = psi(r, c);
  const Vec2& p01 = psi(r, c + 1);
  const Vec2& p10 = psi(r + 1, c);
  const Vec2& p11 = psi(r + 1, c + 1);
  const double a = 0.5 * ((p01.x - p00.x) + (p11.x - p10.x));
  const double b = 0.5 * ((p10.x - p00.x) + (p11.x - p01.x));
  const double cc = 0.5 * ((p01.y - p00.y) + (p11.y - p10.y));
  const double d = 0.5 * ((p10.y - p00.y) + (p11.y - p01.y));
  return make_jacobian(a, b, cc, d);
}

inline JacobianField jacobian_field(const DeformationField& psi) {
  JacobianField out(psi.height() - 1, psi.width() - 1);
  for (int r = 0; r < out.height(); ++r) {
    for (int c = 0; c < out.width(); ++c) out(r, c) = cell_jacobian(psi, r, c);
  }
  return out;
}

inline double min_det(const DeformationField& psi) {
  double m = std::numeric_limits<double>::infinity();
  for (int r = 0; r + 1 < psi.height(); ++r) {
    for (int c = 0; c + 1 < psi.width(); ++c) m = std::min(m, cell_jacobian(psi, r, c).det);
  }
  return m;
}

// mu = f_zbar / f_z with f_z = ((a + d) + i(c - b)) / 2 and
// f_zbar = ((a - d) + i(c + b)) / 2.
inline std::complex<double> beltrami(const CellJacobian& j) {
  const double denom = j.frob2 + 2.0 * j.det;
  if (!(denom > 0.0)) {
    throw Error(ErrorCode::non_positive_denominator, "Beltrami quotient has non-positive denominator");
  }
  const std::complex<double> fz(0.5 * (j.a + j.d), 0.5 * (j.c - j.b));
  const std::complex<double> fzbar(0.5 * (j.a - j.d), 0.5 * (j.c + j.b));
  return fzbar / fz;
}

// |mu|^2 = (|grad f|_F^2 - 2 det) / (|grad f|_F^2 + 2 det)
inline double beltrami_abs2(const CellJacobian& j) {
  const double denom = j.frob2 + 2.0 * j.det;
  if (!(denom > 0.0)) {
    throw Error(ErrorCode::non_positive_denominator, "Beltrami quotient has non-positive denominator");
  }
  return (j.frob2 - 2.0 * j.det) / denom;
}

inline ComplexField beltrami_field(const JacobianField& jac) {
  ComplexField out(jac.height(), jac.width());
  for (std::size_t i = 0; i < jac.size(); ++i) out[i] = beltrami(jac[i]);
  return out;
}

inline double max_abs_mu(const DeformationField& psi) {
  double m = 0.0;
  for (int r = 0; r + 1 < psi.height(); ++r) {
    for (int c = 0; c + 1 < psi.width(); ++c) {
      const CellJacobian j = cell_jacobian(psi, r, c);
      const double denom = j.frob2 + 2.0 * j.det;
      if (!(denom > 0.0)) return std::numeric_limits<double>::infinity();
      m = std::max(m, std::sqrt(std::max(0.0, (j.frob2 - 2.0 * j.det) / denom)));
    }
  }
  return m;
}

inline double dilatation(double abs_mu) {
  if (!(abs_mu < 1.0)) {
    throw Error(ErrorCode::degenerate_dilatation, "dilatation undefined for |mu| >= 1");
  }
  return (1.0 + abs_mu) / (1.0 - abs_mu);
}

// K = (1 + |mu|) / (1 - |mu|) per cell.
inline ScalarField dilatation_field(const ComplexField& mu) {
  ScalarField out(mu.height(), mu.width());
  for (std::size_t i = 0; i < mu.size(); ++i) out[i] = dilatation(std::abs(mu[i]));
  return out;
}

// Direction of maximal magnification, arg(mu) / 2.
inline double magnification_angle(std::complex<double> mu) { return 0.5 * std::arg(mu); }

struct PenaltyValue {
  double value = 0.0;
  double derivative = 0.0;
};

// 1 / (v - 1)^2 on [0, 1).
inline PenaltyValue beltrami_penalty(double v) {
  if (!(v >= 0.0 && v < 1.0)) {
    throw Error(ErrorCode::domain_error, "Beltrami penalty defined on [0, 1) only");
  }
  const double q = 1.0 - v;
  return {1.0 / (q * q), 2.0 / (q * q * q)};
}

namespace detail {

inline void append_u32_le(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xffu));
}

inline void append_f32_le(std::string& out, float f) {
  std::uint32_t bits = 0;
  std::memcpy(&bits, &f, sizeof bits);
  append_u32_le(out, bits);
}

// 16-byte header: 8-byte magic (zero padded), u32 height, u32 width.
inline std::string grid_header(const char* magic, std::uint32_t height, std::uint32_t width) {
  std::string out(8, '\0');
  std::memcpy(out.data(), magic, std::min<std::size_t>(std::strlen(magic), 7));
  append_u32_le(out, height);
  append_u32_le(out, width);
  return out;
}

}  // namespace detail

// "QISMU" dump: header, then the |mu| plane, then the K plane, float32 LE,
// row-major. Folded cells are written as |mu| = 1 and K = +inf.
inline std::string encode_mu_dump(const DeformationField& psi) {
  const auto h = static_cast<std::uint32_t>(psi.height() - 1);
  const auto w = static_cast<std::uint32_t>(psi.width() - 1);
  std::string out = detail::grid_header("QISMU", h, w);
  std::vector<float> mu_plane;
  std::vector<float> k_plane;
  mu_plane.reserve(std::size_t(h) * w);
  k_plane.reserve(std::size_t(h) * w);
  for (std::uint32_t r = 0; r < h; ++r) {
    for (std::uint32_t c = 0; c < w; ++c) {
      const CellJacobian j = cell_jacobian(psi, int(r), int(c));
      const double denom = j.frob2 + 2.0 * j.det;
      if (j.det > 0.0 && denom > 0.0) {
        const double m = std::sqrt(std::max(0.0, (j.frob2 - 2.0 * j.det) / denom));
        mu_plane.push_back(static_cast<float>(m));
        k_plane.push_back(static_cast<float>((1.0 + m) / (1.0 - m)));
      } else {
        mu_plane.push_back(1.0f);
        k_plane.push_back(std::numeric_limits<float>::infinity());
      }
    }
  }
  for (float v : mu_plane) detail::append_f32_le(out, v);
  for (float v : k_plane) detail::append_f32_le(out, v);
  return out;
}

// "QISPSI" dump: header with node dimensions, then the x plane and the y
// plane of node positions, float32 LE.
inline std::string encode_deformation_dump(const DeformationField& psi) {
  std::string out = detail::grid_header("QISPSI", static_cast<std::uint32_t>(psi.height()),
                                        static_cast<std::uint32_t>(psi.width()));
  for (const Vec2& p : psi) detail::append_f32_le(out, static_cast<float>(p.x));
  for (const Vec2& p : psi) detail::append_f32_le(out, static_cast<float>(p.y));
  return out;
}

}  // namespace qis
