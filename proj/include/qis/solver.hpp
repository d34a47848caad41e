#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "qis/error.hpp"
#include "qis/grid.hpp"
#include "qis/qcmath.hpp"

namespace qis {

struct EnergyParams {
  double alpha1 = 0.001;  // Laplacian smoothness weight
  double alpha2 = 100.0;  // Beltrami distortion weight
  int max_gn = 50;
  int max_ad = 10;
  double tol_f = 1e-4;
  double tol_step = 1e-3;
  double tol_grad = 1e-3;
  double det_floor = 1e-6;
  double template_sigma = 1.0;  // smoothing of the template inside the objective only
  int cg_max_iterations = 50;
  double cg_relative_tolerance = 1e-2;
  double armijo_c = 1e-4;
  int armijo_max_halvings = 20;
  // Levenberg shift of the Gauss-Newton matrix, relative to its mean diagonal.
  double gn_damping = 1e-3;

  void validate() const {
    if (!(alpha1 >= 0.0 && alpha2 >= 0.0)) throw Error(ErrorCode::invalid_argument, "alpha1 and alpha2 must be >= 0");
    if (max_gn < 1 || max_ad < 1) throw Error(ErrorCode::invalid_argument, "iteration caps must be >= 1");
    if (!(tol_f > 0.0 && tol_step > 0.0 && tol_grad > 0.0)) {
      throw Error(ErrorCode::invalid_argument, "tolerances must be > 0");
    }
    if (!(det_floor > 0.0)) throw Error(ErrorCode::invalid_argument, "det_floor must be > 0");
  }
};

struct TraceRecord {
  int level = 0;
  int ad = 0;
  int gn = 0;
  double F = 0.0;
  double min_det = 0.0;
  double max_mu = 0.0;
};

// Context shared by one solve: trace sink and an optional wall-clock budget.
struct SolveContext {
  int level = 0;
  int ad = 0;
  std::function<void(const TraceRecord&)> trace;
  std::optional<std::chrono::steady_clock::time_point> deadline;

  bool expired() const { return deadline && std::chrono::steady_clock::now() > *deadline; }
};

// Unknowns are node positions interleaved as (x, y) per node, raster order.
using NodalVector = std::vector<double>;

inline NodalVector flatten(const DeformationField& psi) {
  NodalVector v(2 * psi.size());
  for (std::size_t k = 0; k < psi.size(); ++k) {
    v[2 * k] = psi[k].x;
    v[2 * k + 1] = psi[k].y;
  }
  return v;
}

inline DeformationField add_scaled(const DeformationField& psi, double t, const NodalVector& p) {
  DeformationField out = psi;
  for (std::size_t k = 0; k < out.size(); ++k) {
    out[k].x += t * p[2 * k];
    out[k].y += t * p[2 * k + 1];
  }
  return out;
}

inline double dot(const NodalVector& a, const NodalVector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const NodalVector& a) { return std::sqrt(dot(a, a)); }

inline double field_norm(const DeformationField& psi) {
  double s = 0.0;
  for (const Vec2& p : psi) s += p.x * p.x + p.y * p.y;
  return std::sqrt(s);
}

inline double field_distance(const DeformationField& a, const DeformationField& b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const Vec2 d = a[k] - b[k];
    s += d.x * d.x + d.y * d.y;
  }
  return std::sqrt(s);
}

namespace detail {

// 5-point Laplacian on a scalar nodal grid with replicated-edge neighbours.
// The operator is symmetric, so it is also its own transpose.
inline void neumann_laplacian(const double* in, std::size_t stride, double* out, int rows, int cols) {
  auto at = [&](int r, int c) { return in[(static_cast<std::size_t>(r) * cols + c) * stride]; };
  for (int i = 0; i < rows; ++i) {
    const int up = std::max(i - 1, 0);
    const int down = std::min(i + 1, rows - 1);
    double* o = out + static_cast<std::size_t>(i) * cols;
    const double* mid = in + static_cast<std::size_t>(i) * cols * stride;
    const double* above = in + static_cast<std::size_t>(up) * cols * stride;
    const double* below = in + static_cast<std::size_t>(down) * cols * stride;
    for (int j = 1; j + 1 < cols; ++j) {
      const std::size_t k = j * stride;
      o[j] = above[k] + below[k] + mid[k - stride] + mid[k + stride] - 4.0 * mid[k];
    }
    for (int j : {0, cols - 1}) {
      const int left = std::max(j - 1, 0);
      const int right = std::min(j + 1, cols - 1);
      o[j] = at(up, j) + at(down, j) + at(i, left) + at(i, right) - 4.0 * at(i, j);
    }
  }
}

// diag(L^T L) for the operator above.
inline std::vector<double> neumann_laplacian_normal_diagonal(int rows, int cols) {
  std::vector<double> diag(static_cast<std::size_t>(rows) * cols, 0.0);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      const int nb[4][2] = {{std::max(i - 1, 0), j}, {std::min(i + 1, rows - 1), j}, {i, std::max(j - 1, 0)},
                            {i, std::min(j + 1, cols - 1)}};
      // Row (i, j) coefficients, merged per distinct column.
      std::pair<int, double> coef[5] = {{i * cols + j, -4.0}};
      int n = 1;
      for (auto& q : nb) {
        const int col = q[0] * cols + q[1];
        bool merged = false;
        for (int m = 0; m < n; ++m) {
          if (coef[m].first == col) {
            coef[m].second += 1.0;
            merged = true;
          }
        }
        if (!merged) coef[n++] = {col, 1.0};
      }
      for (int m = 0; m < n; ++m) diag[static_cast<std::size_t>(coef[m].first)] += coef[m].second * coef[m].second;
    }
  }
  return diag;
}

// Node-stencil weights of the cell partials: d/dx1 (a, c) and d/dx2 (b, d)
// with respect to corners 00, 01, 10, 11.
inline constexpr double kDx1[4] = {-0.5, 0.5, -0.5, 0.5};
inline constexpr double kDx2[4] = {-0.5, -0.5, 0.5, 0.5};

struct BeltramiCell {
  double value = 0.0;      // penalty 1 / (1 - |mu|^2)^2
  double w[2] = {0, 0};    // (Re mu, Im mu)
  double jw[2][4] = {};    // d(Re mu, Im mu) / d(a, b, c, d)
  double g1 = 0.0;         // penalty'(|mu|^2)
  double g2 = 0.0;         // penalty''(|mu|^2)
};

inline BeltramiCell beltrami_cell(const CellJacobian& j) {
  BeltramiCell out;
  const double P = j.a - j.d;
  const double Q = j.b + j.c;
  const double S = j.a + j.d;
  const double T = j.c - j.b;
  const double M = S * S + T * T;
  const double wr = (P * S + Q * T) / M;
  const double wi = (Q * S - P * T) / M;
  const double s = wr * wr + wi * wi;
  const double q = 1.0 - s;
  out.value = 1.0 / (q * q);
  out.g1 = 2.0 / (q * q * q);
  out.g2 = 6.0 / (q * q * q * q);
  out.w[0] = wr;
  out.w[1] = wi;
  const double rP = S / M, rQ = T / M, rS = (P - 2.0 * wr * S) / M, rT = (Q - 2.0 * wr * T) / M;
  const double iP = -T / M, iQ = S / M, iS = (Q - 2.0 * wi * S) / M, iT = (-P - 2.0 * wi * T) / M;
  out.jw[0][0] = rP + rS;
  out.jw[0][1] = rQ - rT;
  out.jw[0][2] = rQ + rT;
  out.jw[0][3] = -rP + rS;
  out.jw[1][0] = iP + iS;
  out.jw[1][1] = iQ - iT;
  out.jw[1][2] = iQ + iT;
  out.jw[1][3] = -iP + iS;
  return out;
}

}  // namespace detail

// Generalized Gauss-Newton matrix of the registration objective, applied
// matrix-free:
//   fidelity:  sum_p grad J_p^T grad J_p
//   smoothing: 2 alpha1 L^T L on both components
//   Beltrami:  alpha2 sum_cells Jmu^T (Hessian of the convex outer penalty) Jmu
// plus a Levenberg shift, gn_damping times the mean diagonal, that keeps it
// strictly positive definite and damps the near-null conformal modes.
class GaussNewtonOperator {
 public:
  GaussNewtonOperator() = default;

  std::size_t size() const noexcept { return diag_.size(); }
  const std::vector<double>& diagonal() const noexcept { return diag_; }
  double shift() const noexcept { return shift_; }

  void apply(const NodalVector& u, NodalVector& out) const {
    out.assign(u.size(), 0.0);
    const int nc = cols_ + 1;
    auto node = [nc](int r, int c) { return static_cast<std::size_t>(r) * nc + c; };

    for (int r = 0; r < rows_; ++r) {
      for (int c = 0; c < cols_; ++c) {
        const std::size_t n[4] = {node(r, c), node(r, c + 1), node(r + 1, c), node(r + 1, c + 1)};
        const std::size_t cell = static_cast<std::size_t>(r) * cols_ + c;

        const double wx = 0.25 * fid_w_[2 * cell];
        const double wy = 0.25 * fid_w_[2 * cell + 1];
        if (wx != 0.0 || wy != 0.0) {
          double t = 0.0;
          for (int k = 0; k < 4; ++k) t += wx * u[2 * n[k]] + wy * u[2 * n[k] + 1];
          for (int k = 0; k < 4; ++k) {
            out[2 * n[k]] += wx * t;
            out[2 * n[k] + 1] += wy * t;
          }
        }

        if (alpha2_ > 0.0) {
          double dj[4] = {0, 0, 0, 0};  // (a, b, c, d)
          for (int k = 0; k < 4; ++k) {
            const double ux = u[2 * n[k]];
            const double uy = u[2 * n[k] + 1];
            dj[0] += detail::kDx1[k] * ux;
            dj[1] += detail::kDx2[k] * ux;
            dj[2] += detail::kDx1[k] * uy;
            dj[3] += detail::kDx2[k] * uy;
          }
          const double* jw = &bel_jw_[8 * cell];
          const double* hw = &bel_h_[3 * cell];
          const double dw0 = jw[0] * dj[0] + jw[1] * dj[1] + jw[2] * dj[2] + jw[3] * dj[3];
          const double dw1 = jw[4] * dj[0] + jw[5] * dj[1] + jw[6] * dj[2] + jw[7] * dj[3];
          const double y0 = hw[0] * dw0 + hw[1] * dw1;
          const double y1 = hw[1] * dw0 + hw[2] * dw1;
          double back[4];
          for (int m = 0; m < 4; ++m) back[m] = jw[m] * y0 + jw[4 + m] * y1;
          for (int k = 0; k < 4; ++k) {
            out[2 * n[k]] += detail::kDx1[k] * back[0] + detail::kDx2[k] * back[1];
            out[2 * n[k] + 1] += detail::kDx1[k] * back[2] + detail::kDx2[k] * back[3];
          }
        }
      }
    }

    if (alpha1_ > 0.0) {
      const std::size_t nodes = u.size() / 2;
      std::vector<double>& lu = scratch_[0];
      std::vector<double>& llu = scratch_[1];
      lu.resize(nodes);
      llu.resize(nodes);
      for (int comp = 0; comp < 2; ++comp) {
        detail::neumann_laplacian(u.data() + comp, 2, lu.data(), rows_ + 1, cols_ + 1);
        detail::neumann_laplacian(lu.data(), 1, llu.data(), rows_ + 1, cols_ + 1);
        for (std::size_t k = 0; k < nodes; ++k) out[2 * k + comp] += 2.0 * alpha1_ * llu[k];
      }
    }

    for (std::size_t i = 0; i < u.size(); ++i) out[i] += shift_ * u[i];
  }

 private:
  friend class RegistrationObjective;

  int rows_ = 0;
  int cols_ = 0;
  double alpha1_ = 0.0;
  double alpha2_ = 0.0;
  double shift_ = 0.0;
  std::vector<double> fid_w_;   // per pixel: (c1 - c2) * grad of smoothed template at the mapped center
  std::vector<double> bel_jw_;  // per cell: 2x4
  std::vector<double> bel_h_;   // per cell: symmetric 2x2 (xx, xy, yy), scaled by alpha2
  std::vector<double> diag_;
  mutable std::vector<double> scratch_[2];  // Laplacian buffers; apply() is not reentrant
};

struct EnergyTerms {
  double fidelity = 0.0;
  double smoothness = 0.0;
  double beltrami = 0.0;

  double total() const noexcept { return fidelity + smoothness + beltrami; }
};

struct ObjectiveEval {
  double value = 0.0;
  EnergyTerms terms;
  NodalVector gradient;
  GaussNewtonOperator gn;
};

// Discrete registration energy for fixed constants (c1, c2):
//   1/2 sum (I - c1 X - c2 (1 - X))^2 + alpha1 sum |Lap u|^2
//     + alpha2 sum_cells 1 / (1 - |mu|^2)^2
// where X is the smoothed template sampled at the mapped pixel centers and u
// is the displacement psi - id.
class RegistrationObjective {
 public:
  RegistrationObjective(const ScalarField& image, const ScalarField& smoothed_template, double c1, double c2,
                        const EnergyParams& params)
      : image_(&image), template_(&smoothed_template), c1_(c1), c2_(c2), params_(params) {
    require_same_shape(image, smoothed_template, "RegistrationObjective");
    require_image_shape(image.height(), image.width());
  }
  // Holds references; temporaries would dangle.
  RegistrationObjective(ScalarField&&, const ScalarField&, double, double, const EnergyParams&) = delete;
  RegistrationObjective(const ScalarField&, ScalarField&&, double, double, const EnergyParams&) = delete;

  double c1() const noexcept { return c1_; }
  double c2() const noexcept { return c2_; }

  // Energy value, or +inf when a cell is folded (det <= 0).
  double value(const DeformationField& psi) const {
    EnergyTerms t;
    if (!accumulate(psi, t, nullptr, nullptr)) return std::numeric_limits<double>::infinity();
    return t.total();
  }

  EnergyTerms terms(const DeformationField& psi) const {
    EnergyTerms t;
    if (!accumulate(psi, t, nullptr, nullptr)) {
      throw Error(ErrorCode::orientation_violation, "deformation has a cell with det <= 0");
    }
    return t;
  }

  ObjectiveEval evaluate(const DeformationField& psi) const {
    ObjectiveEval e;
    e.gradient.assign(2 * psi.size(), 0.0);
    if (!accumulate(psi, e.terms, &e.gradient, &e.gn)) {
      throw Error(ErrorCode::orientation_violation, "deformation has a cell with det <= 0");
    }
    e.value = e.terms.total();
    return e;
  }

 private:
  bool accumulate(const DeformationField& psi, EnergyTerms& t, NodalVector* grad, GaussNewtonOperator* gn) const {
    const int rows = image_->height();
    const int cols = image_->width();
    require_compatible(psi, rows, cols);
    const int nc = cols + 1;
    const double dc = c1_ - c2_;
    const double a1 = params_.alpha1;
    const double a2 = params_.alpha2;
    auto node = [nc](int r, int c) { return static_cast<std::size_t>(r) * nc + c; };

    if (gn) {
      gn->rows_ = rows;
      gn->cols_ = cols;
      gn->alpha1_ = a1;
      gn->alpha2_ = a2;
      gn->fid_w_.assign(2 * image_->size(), 0.0);
      gn->bel_jw_.assign(a2 > 0.0 ? 8 * image_->size() : 0, 0.0);
      gn->bel_h_.assign(a2 > 0.0 ? 3 * image_->size() : 0, 0.0);
      gn->diag_.assign(2 * psi.size(), 0.0);
    }

    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        const std::size_t cell = static_cast<std::size_t>(r) * cols + c;
        const std::size_t n[4] = {node(r, c), node(r, c + 1), node(r + 1, c), node(r + 1, c + 1)};
        const CellJacobian jac = cell_jacobian(psi, r, c);
        if (!(jac.det > 0.0)) return false;

        const Vec2 pos = mapped_pixel_center(psi, r, c);
        const SampleWithGradient s = sample_bilinear_with_gradient(*template_, pos.x, pos.y);
        const double res = (*image_)(r, c) - (c2_ + dc * s.value);
        t.fidelity += 0.5 * res * res;
        if (grad) {
          const double gx = -res * dc * s.dx * 0.25;
          const double gy = -res * dc * s.dy * 0.25;
          for (std::size_t k : n) {
            (*grad)[2 * k] += gx;
            (*grad)[2 * k + 1] += gy;
          }
        }
        if (gn) {
          const double wx = dc * s.dx;
          const double wy = dc * s.dy;
          gn->fid_w_[2 * cell] = wx;
          gn->fid_w_[2 * cell + 1] = wy;
          for (std::size_t k : n) {
            gn->diag_[2 * k] += 0.0625 * wx * wx;
            gn->diag_[2 * k + 1] += 0.0625 * wy * wy;
          }
        }

        if (a2 > 0.0) {
          const detail::BeltramiCell b = detail::beltrami_cell(jac);
          t.beltrami += a2 * b.value;
          if (grad || gn) {
            const double gw0 = a2 * 2.0 * b.g1 * b.w[0];
            const double gw1 = a2 * 2.0 * b.g1 * b.w[1];
            double gj[4];
            for (int m = 0; m < 4; ++m) gj[m] = b.jw[0][m] * gw0 + b.jw[1][m] * gw1;
            if (grad) {
              for (int k = 0; k < 4; ++k) {
                (*grad)[2 * n[k]] += detail::kDx1[k] * gj[0] + detail::kDx2[k] * gj[1];
                (*grad)[2 * n[k] + 1] += detail::kDx1[k] * gj[2] + detail::kDx2[k] * gj[3];
              }
            }
            if (gn) {
              // Hessian of w -> penalty(|w|^2): 2 g1 I + 4 g2 w w^T.
              const double hxx = a2 * (2.0 * b.g1 + 4.0 * b.g2 * b.w[0] * b.w[0]);
              const double hxy = a2 * (4.0 * b.g2 * b.w[0] * b.w[1]);
              const double hyy = a2 * (2.0 * b.g1 + 4.0 * b.g2 * b.w[1] * b.w[1]);
              double* jw = &gn->bel_jw_[8 * cell];
              for (int m = 0; m < 4; ++m) {
                jw[m] = b.jw[0][m];
                jw[4 + m] = b.jw[1][m];
              }
              double* hw = &gn->bel_h_[3 * cell];
              hw[0] = hxx;
              hw[1] = hxy;
              hw[2] = hyy;
              auto quad = [&](double da, double db, double dcc, double dd) {
                const double v0 = jw[0] * da + jw[1] * db + jw[2] * dcc + jw[3] * dd;
                const double v1 = jw[4] * da + jw[5] * db + jw[6] * dcc + jw[7] * dd;
                return hxx * v0 * v0 + 2.0 * hxy * v0 * v1 + hyy * v1 * v1;
              };
              for (int k = 0; k < 4; ++k) {
                gn->diag_[2 * n[k]] += quad(detail::kDx1[k], detail::kDx2[k], 0.0, 0.0);
                gn->diag_[2 * n[k] + 1] += quad(0.0, 0.0, detail::kDx1[k], detail::kDx2[k]);
              }
            }
          }
        }
      }
    }

    if (a1 > 0.0 || gn) {
      const int nrows = rows + 1;
      const std::size_t nodes = psi.size();
      std::vector<double> disp(nodes), lu(nodes), llu(nodes);
      for (int comp = 0; comp < 2; ++comp) {
        for (int i = 0; i < nrows; ++i) {
          for (int j = 0; j < nc; ++j) {
            const Vec2& p = psi(i, j);
            disp[node(i, j)] = comp == 0 ? p.x - j : p.y - i;
          }
        }
        if (a1 > 0.0) {
          detail::neumann_laplacian(disp.data(), 1, lu.data(), nrows, nc);
          for (double v : lu) t.smoothness += a1 * v * v;
          if (grad) {
            detail::neumann_laplacian(lu.data(), 1, llu.data(), nrows, nc);
            for (std::size_t k = 0; k < nodes; ++k) (*grad)[2 * k + comp] += 2.0 * a1 * llu[k];
          }
        }
      }
      if (gn) {
        if (a1 > 0.0) {
          const std::vector<double> ld = detail::neumann_laplacian_normal_diagonal(nrows, nc);
          for (std::size_t k = 0; k < nodes; ++k) {
            gn->diag_[2 * k] += 2.0 * a1 * ld[k];
            gn->diag_[2 * k + 1] += 2.0 * a1 * ld[k];
          }
        }
        double mean = 0.0;
        for (double v : gn->diag_) mean += v;
        mean /= static_cast<double>(gn->diag_.size());
        gn->shift_ = params_.gn_damping * std::max(1.0, mean);
        for (double& v : gn->diag_) v += gn->shift_;
      }
    }
    return true;
  }

  const ScalarField* image_;
  const ScalarField* template_;
  double c1_;
  double c2_;
  EnergyParams params_;
};

// Jacobi-preconditioned conjugate gradients for Hx = b, started from zero.
template <class Operator>
NodalVector preconditioned_cg(const Operator& op, const NodalVector& b, double rel_tol, int max_iter,
                              int* iterations = nullptr) {
  const std::size_t n = b.size();
  NodalVector x(n, 0.0), r = b, z(n), p(n), hp(n), inv(n);
  const auto& diag = op.diagonal();
  for (std::size_t i = 0; i < n; ++i) inv[i] = diag[i] > 0.0 ? 1.0 / diag[i] : 1.0;
  const double b_norm = norm(b);
  int it = 0;
  if (b_norm > 0.0) {
    double rz = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = inv[i] * r[i];
      rz += r[i] * z[i];
    }
    p = z;
    for (it = 1; it <= max_iter; ++it) {
      op.apply(p, hp);
      const double php = dot(p, hp);
      if (!(php > 0.0)) break;
      const double alpha = rz / php;
      double rr = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        x[i] += alpha * p[i];
        r[i] -= alpha * hp[i];
        rr += r[i] * r[i];
      }
      if (std::sqrt(rr) <= rel_tol * b_norm) break;
      double rz_next = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        z[i] = inv[i] * r[i];
        rz_next += r[i] * z[i];
      }
      const double beta = rz_next / rz;
      rz = rz_next;
      for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
    }
    it = std::min(it, max_iter);
  }
  if (iterations) *iterations = it;
  return x;
}

struct GaussNewtonResult {
  DeformationField psi;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  bool line_search_failed = false;
  bool deadline_hit = false;
  std::vector<double> energies;  // F at the start and after every accepted step
};

// Generalized Gauss-Newton with Armijo backtracking; a trial step is only
// admissible when every cell keeps det >= det_floor.
//
// Problem requirements:
//   evaluate(psi) -> ObjectiveEval-like {value, gradient, gn}
//   value(psi)    -> double (+inf when infeasible)
template <class Problem>
GaussNewtonResult gauss_newton_solve(const Problem& problem, DeformationField psi0, const EnergyParams& params,
                                     const SolveContext& ctx = {}) {
  params.validate();
  if (!(min_det(psi0) > 0.0)) {
    throw Error(ErrorCode::orientation_violation, "initial deformation is not orientation preserving");
  }
  GaussNewtonResult out;
  out.psi = std::move(psi0);
  auto eval = problem.evaluate(out.psi);
  out.value = eval.value;
  out.energies.push_back(eval.value);

  for (int l = 1; l <= params.max_gn; ++l) {
    out.iterations = l;
    NodalVector rhs = eval.gradient;
    for (double& v : rhs) v = -v;
    NodalVector step = preconditioned_cg(eval.gn, rhs, params.cg_relative_tolerance, params.cg_max_iterations);
    double slope = dot(eval.gradient, step);
    if (slope > 0.0) {
      // Not a descent direction (CG breakdown); fall back to preconditioned steepest descent.
      const auto& diag = eval.gn.diagonal();
      for (std::size_t i = 0; i < step.size(); ++i) step[i] = rhs[i] / diag[i];
      slope = dot(eval.gradient, step);
    }

    double t = 1.0;
    bool accepted = false;
    DeformationField trial;
    double trial_value = 0.0;
    for (int h = 0; h <= params.armijo_max_halvings; ++h, t *= 0.5) {
      trial = add_scaled(out.psi, t, step);
      if (min_det(trial) < params.det_floor) continue;
      trial_value = problem.value(trial);
      if (trial_value <= eval.value + params.armijo_c * t * slope) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      out.line_search_failed = true;
      break;
    }

    const double decrease = eval.value - trial_value;
    const double step_norm = t * norm(step);
    out.psi = std::move(trial);
    eval = problem.evaluate(out.psi);
    out.value = eval.value;
    out.energies.push_back(eval.value);
    if (ctx.trace) {
      ctx.trace({ctx.level, ctx.ad, l, eval.value, min_det(out.psi), max_abs_mu(out.psi)});
    }

    const double scale = 1.0 + std::abs(eval.value);
    if (std::abs(decrease) <= params.tol_f * scale && step_norm <= params.tol_step * (1.0 + field_norm(out.psi)) &&
        norm(eval.gradient) <= params.tol_grad * scale) {
      out.converged = true;
      break;
    }
    if (ctx.expired()) {
      out.deadline_hit = true;
      break;
    }
  }
  return out;
}

struct Constants {
  double c1 = 0.0;
  double c2 = 0.0;
};

// Means of I over G = {warped template >= 0.5} and its complement.
inline Constants update_constants(const ScalarField& image, const DeformationField& psi, const BinaryMask& templ) {
  require_same_shape(image, templ, "update_constants");
  const BinaryMask g = threshold_mask(warp_indicator(templ, psi), 0.5);
  double s_in = 0.0, s_out = 0.0;
  std::size_t n_in = 0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (g[i]) {
      s_in += image[i];
      ++n_in;
    } else {
      s_out += image[i];
    }
  }
  const std::size_t n_out = image.size() - n_in;
  if (n_in == 0 || n_out == 0) throw Error(ErrorCode::empty_region, "warped template is empty or covers the image");
  return {s_in / static_cast<double>(n_in), s_out / static_cast<double>(n_out)};
}

namespace detail {

// Least-squares constants for the smoothed indicator; the exact minimizer of
// the objective over (c1, c2) at fixed psi.
inline std::optional<Constants> soft_constants(const ScalarField& image, const ScalarField& smoothed,
                                               const DeformationField& psi) {
  const ScalarField s = warp_field(smoothed, psi);
  double ss = 0, sc = 0, cc = 0, is = 0, ic = 0;
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double a = s[i];
    const double b = 1.0 - a;
    ss += a * a;
    sc += a * b;
    cc += b * b;
    is += image[i] * a;
    ic += image[i] * b;
  }
  const double det = ss * cc - sc * sc;
  if (!(std::abs(det) > 1e-12 * std::max(1.0, ss * cc))) return std::nullopt;
  return Constants{(is * cc - ic * sc) / det, (ss * ic - sc * is) / det};
}

}  // namespace detail

struct AlternatingResult {
  Constants constants;
  DeformationField psi;
  double energy = 0.0;
  std::vector<double> outer_energies;
  int outer_rounds = 0;
  int gn_iterations = 0;
  bool line_search_failed = false;
  bool deadline_hit = false;
};

// Alternates the closed-form constants with a Gauss-Newton solve for psi.
inline AlternatingResult alternating_direction_solve(const ScalarField& image, const BinaryMask& templ,
                                                     const DeformationField& psi_init, const EnergyParams& params,
                                                     SolveContext ctx = {}) {
  params.validate();
  require_same_shape(image, templ, "alternating_direction_solve");
  require_compatible(psi_init, image.height(), image.width());
  const ScalarField smoothed = gaussian_smooth(to_scalar(templ), params.template_sigma);

  AlternatingResult out;
  out.psi = psi_init;
  Constants c = update_constants(image, out.psi, templ);
  bool have_energy = false;
  double energy = 0.0;

  for (int k = 1; k <= params.max_ad; ++k) {
    out.outer_rounds = k;
    Constants next = update_constants(image, out.psi, templ);
    if (have_energy) {
      const double with_next = RegistrationObjective(image, smoothed, next.c1, next.c2, params).value(out.psi);
      if (with_next > energy) {
        // The thresholded means can raise the smoothed energy; the
        // least-squares constants cannot.
        next = c;
        if (auto soft = detail::soft_constants(image, smoothed, out.psi)) {
          if (RegistrationObjective(image, smoothed, soft->c1, soft->c2, params).value(out.psi) <= energy) next = *soft;
        }
      }
    }
    const double dc = std::hypot(next.c1 - c.c1, next.c2 - c.c2);
    c = next;

    RegistrationObjective objective(image, smoothed, c.c1, c.c2, params);
    ctx.ad = k;
    GaussNewtonResult gn = gauss_newton_solve(objective, out.psi, params, ctx);
    out.gn_iterations += gn.iterations;
    out.line_search_failed = out.line_search_failed || gn.line_search_failed;
    const double moved = field_distance(gn.psi, out.psi);
    out.psi = std::move(gn.psi);
    energy = gn.value;
    have_energy = true;
    out.outer_energies.push_back(energy);

    if (gn.deadline_hit || ctx.expired()) {
      out.deadline_hit = true;
      break;
    }
    if (dc <= params.tol_step * (1.0 + std::hypot(c.c1, c.c2)) &&
        moved <= params.tol_step * (1.0 + field_norm(out.psi))) {
      break;
    }
  }
  out.constants = c;
  out.energy = energy;
  return out;
}

// Smooths the displacement around cells with det < floor: marked nodes are
// relaxed towards the mean displacement of their 4-neighbours (Gauss-Seidel).
// A harmonic patch with a folded border stays folded, so the neighbourhood
// widens each round. Returns true once valid.
inline bool repair_locally(DeformationField& psi, double det_floor, int rounds = 40) {
  const int rows = pixel_rows_of(psi);
  const int cols = pixel_cols_of(psi);
  std::vector<std::pair<int, int>> nodes;
  for (int round = 0; round < rounds; ++round) {
    const int reach = 1 + round;
    const JacobianField jac = jacobian_field(psi);
    Grid<std::uint8_t> mark(rows + 1, cols + 1, 0);
    bool any = false;
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) {
        if (jac(r, c).det >= det_floor) continue;
        any = true;
        for (int i = std::max(0, r - reach); i <= std::min(rows, r + 1 + reach); ++i) {
          for (int j = std::max(0, c - reach); j <= std::min(cols, c + 1 + reach); ++j) mark(i, j) = 1;
        }
      }
    }
    if (!any) return true;
    nodes.clear();
    for (int i = 0; i <= rows; ++i) {
      for (int j = 0; j <= cols; ++j) {
        if (mark(i, j)) nodes.emplace_back(i, j);
      }
    }
    auto disp = [&](int i, int j) { return psi(i, j) - Vec2{double(j), double(i)}; };
    for (int sweep = 0; sweep < 4 * reach; ++sweep) {
      for (const auto& [i, j] : nodes) {
        Vec2 sum{0.0, 0.0};
        int n = 0;
        if (i > 0) sum = sum + disp(i - 1, j), ++n;
        if (i < rows) sum = sum + disp(i + 1, j), ++n;
        if (j > 0) sum = sum + disp(i, j - 1), ++n;
        if (j < cols) sum = sum + disp(i, j + 1), ++n;
        psi(i, j) = Vec2{double(j), double(i)} + (1.0 / n) * sum;
      }
    }
  }
  return min_det(psi) >= det_floor;
}

// Repairs folded cells locally; if that fails, halves the whole
// displacement until every cell has det >= floor.
inline DeformationField damp_to_valid(DeformationField psi, double det_floor) {
  const int rows = pixel_rows_of(psi);
  const int cols = pixel_cols_of(psi);
  if (min_det(psi) >= det_floor || repair_locally(psi, det_floor)) return psi;
  for (int attempt = 0; attempt < 64 && min_det(psi) < det_floor; ++attempt) {
    for (int i = 0; i <= rows; ++i) {
      for (int j = 0; j <= cols; ++j) {
        Vec2& p = psi(i, j);
        p.x = j + 0.5 * (p.x - j);
        p.y = i + 0.5 * (p.y - i);
      }
    }
  }
  if (min_det(psi) < det_floor) return identity_field(rows, cols);
  return psi;
}

// Coarse-to-fine transfer: bilinear interpolation of the displacement with
// coordinates scaled by 2.
inline DeformationField prolongate(const DeformationField& coarse, int fine_rows, int fine_cols) {
  DeformationField fine(fine_rows + 1, fine_cols + 1);
  const int ch = coarse.height();
  const int cw = coarse.width();
  for (int i = 0; i <= fine_rows; ++i) {
    for (int j = 0; j <= fine_cols; ++j) {
      const double y = std::min(0.5 * i, double(ch - 1));
      const double x = std::min(0.5 * j, double(cw - 1));
      const int i0 = std::min(static_cast<int>(y), ch - 2);
      const int j0 = std::min(static_cast<int>(x), cw - 2);
      const double fy = y - i0;
      const double fx = x - j0;
      auto disp = [&](int r, int c) { return coarse(r, c) - Vec2{double(c), double(r)}; };
      const Vec2 u = (1 - fy) * ((1 - fx) * disp(i0, j0) + fx * disp(i0, j0 + 1)) +
                     fy * ((1 - fx) * disp(i0 + 1, j0) + fx * disp(i0 + 1, j0 + 1));
      fine(i, j) = Vec2{double(j), double(i)} + 2.0 * u;
    }
  }
  return fine;
}

// Fine-to-coarse transfer by node injection with coordinates scaled by 1/2.
inline DeformationField restrict_field(const DeformationField& fine, int coarse_rows, int coarse_cols) {
  DeformationField coarse(coarse_rows + 1, coarse_cols + 1);
  for (int i = 0; i <= coarse_rows; ++i) {
    for (int j = 0; j <= coarse_cols; ++j) {
      const int fi = std::min(2 * i, fine.height() - 1);
      const int fj = std::min(2 * j, fine.width() - 1);
      const Vec2 u = fine(fi, fj) - Vec2{double(fj), double(fi)};
      coarse(i, j) = Vec2{double(j), double(i)} + 0.5 * u;
    }
  }
  return coarse;
}

struct MultilevelResult {
  Constants constants;
  DeformationField psi;
  double energy = 0.0;
  int levels_used = 0;
  std::vector<AlternatingResult> per_level;  // coarsest first
  bool line_search_failed = false;
  bool deadline_hit = false;
};

inline constexpr int kCoarsestMinDimension = 64;

// Coarsens by 2x2 averaging while the smaller side exceeds 64 pixels and
// fewer than `levels` levels exist, solves coarsest first, and prolongates
// each solution as the next level's initial guess.
inline MultilevelResult multilevel_solve(const ScalarField& image, const BinaryMask& templ,
                                         const DeformationField& psi_init, const EnergyParams& params, int levels,
                                         SolveContext ctx = {}) {
  if (levels < 1) throw Error(ErrorCode::invalid_argument, "levels must be >= 1");
  require_same_shape(image, templ, "multilevel_solve");
  require_compatible(psi_init, image.height(), image.width());

  std::vector<ScalarField> images{image};
  std::vector<BinaryMask> masks{templ};
  while (static_cast<int>(images.size()) < levels &&
         std::min(images.back().height(), images.back().width()) > kCoarsestMinDimension) {
    images.push_back(downsample2(images.back()));
    masks.push_back(downsample2(masks.back()));
  }
  const int coarsest = static_cast<int>(images.size()) - 1;

  DeformationField psi = psi_init;
  for (int lev = 1; lev <= coarsest; ++lev) {
    psi = restrict_field(psi, images[static_cast<std::size_t>(lev)].height(),
                         images[static_cast<std::size_t>(lev)].width());
  }
  psi = damp_to_valid(std::move(psi), params.det_floor);

  MultilevelResult out;
  out.levels_used = coarsest + 1;
  for (int lev = coarsest; lev >= 0; --lev) {
    const auto ul = static_cast<std::size_t>(lev);
    ctx.level = lev;
    AlternatingResult res = alternating_direction_solve(images[ul], masks[ul], psi, params, ctx);
    out.line_search_failed = out.line_search_failed || res.line_search_failed;
    out.deadline_hit = out.deadline_hit || res.deadline_hit;
    if (lev > 0) {
      psi = prolongate(res.psi, images[ul - 1].height(), images[ul - 1].width());
      psi = damp_to_valid(std::move(psi), params.det_floor);
    } else {
      out.constants = res.constants;
      out.psi = res.psi;
      out.energy = res.energy;
    }
    out.per_level.push_back(std::move(res));
  }
  return out;
}

// Final mask: the raw template warped by psi, thresholded at 0.5.
inline BinaryMask segmentation_mask(const BinaryMask& templ, const DeformationField& psi) {
  return threshold_mask(warp_indicator(templ, psi), 0.5);
}

}  // namespace qis
