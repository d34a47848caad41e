#include <gtest/gtest.h>

#include <chrono>

#include "qis/solver.hpp"
#include "qis/synthetic.hpp"
#include "qis/verify.hpp"
#include "support.hpp"

using namespace qis;
using qis::gen::Rng;

namespace {

// F(x) = 1/2 (x - t)^T (I + L^T L) (x - t) on node coordinates. Its residual
// is linear, so the Gauss-Newton matrix is the exact Hessian.
class QuadraticToy {
 public:
  struct Op {
    int rows = 0;
    int cols = 0;
    std::vector<double> diag;

    const std::vector<double>& diagonal() const { return diag; }
    void apply(const NodalVector& u, NodalVector& out) const {
      out = u;
      const std::size_t nodes = u.size() / 2;
      std::vector<double> lu(nodes), llu(nodes);
      for (int comp = 0; comp < 2; ++comp) {
        detail::neumann_laplacian(u.data() + comp, 2, lu.data(), rows, cols);
        detail::neumann_laplacian(lu.data(), 1, llu.data(), rows, cols);
        for (std::size_t k = 0; k < nodes; ++k) out[2 * k + comp] += llu[k];
      }
    }
  };
  struct Eval {
    double value = 0.0;
    NodalVector gradient;
    Op gn;
  };

  explicit QuadraticToy(DeformationField target) : target_(std::move(target)) {
    op_.rows = target_.height();
    op_.cols = target_.width();
    const auto ld = detail::neumann_laplacian_normal_diagonal(op_.rows, op_.cols);
    op_.diag.resize(2 * ld.size());
    for (std::size_t k = 0; k < ld.size(); ++k) op_.diag[2 * k] = op_.diag[2 * k + 1] = 1.0 + ld[k];
  }

  Eval evaluate(const DeformationField& psi) const {
    Eval e;
    e.gn = op_;
    NodalVector r = flatten(psi);
    const NodalVector t = flatten(target_);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= t[i];
    op_.apply(r, e.gradient);
    e.value = 0.5 * dot(r, e.gradient);
    return e;
  }
  double value(const DeformationField& psi) const { return evaluate(psi).value; }

 private:
  DeformationField target_;
  Op op_;
};

EnergyParams exact_cg() {
  EnergyParams p;
  p.cg_relative_tolerance = 1e-15;
  p.cg_max_iterations = 2000;
  return p;
}

ScalarField rescaled(const ScalarField& img) { return rescale_intensity(img); }

}  // namespace

TEST(Objective, IdentityOnConstantImage) {
  const ScalarField img(12, 10, 80.0);
  const BinaryMask d = synthetic::disk(12, 10, 5, 6, 3);
  EnergyParams p;
  const ScalarField sm = gaussian_smooth(to_scalar(d), 1.0);
  const RegistrationObjective obj(img, sm, 80.0, 80.0, p);
  const EnergyTerms t = obj.terms(identity_field(12, 10));
  EXPECT_EQ(t.fidelity, 0.0);
  EXPECT_EQ(t.smoothness, 0.0);
  EXPECT_DOUBLE_EQ(t.beltrami, p.alpha2 * 120.0);
}

TEST(Objective, ExactFitWithoutRegularization) {
  BinaryMask d(8, 8, 0);
  ScalarField img(8, 8, 30.0);
  for (int r = 0; r < 8; ++r) {
    for (int c = 0; c < 4; ++c) {
      d(r, c) = 1;
      img(r, c) = 170.0;
    }
  }
  EnergyParams p;
  p.alpha1 = 0.0;
  p.alpha2 = 0.0;
  // The raw indicator stands in for the smoothed template here.
  const ScalarField raw = to_scalar(d);
  const RegistrationObjective obj(img, raw, 170.0, 30.0, p);
  EXPECT_EQ(obj.value(identity_field(8, 8)), 0.0);
}

TEST(Objective, FoldedFieldIsInfeasible) {
  const ScalarField img(6, 6, 1.0);
  const RegistrationObjective obj(img, img, 1.0, 0.0, EnergyParams{});
  DeformationField psi = identity_field(6, 6);
  psi(3, 3) = {5.5, 5.5};
  EXPECT_TRUE(std::isinf(obj.value(psi)));
  EXPECT_THROW(obj.evaluate(psi), Error);
}

TEST(Objective, GradientMatchesCentralDifferences) {
  for (const auto& rep : verify::gradients(21, 3)) EXPECT_TRUE(rep.ok()) << rep.summary();
}

TEST(Objective, GradientMatchesOnDeformedFields) {
  Rng rng(22);
  for (int t = 0; t < 3; ++t) {
    verify::GradientProblem g = verify::random_gradient_problem(rng, 16);
    g.psi = gen::smooth_random_field(rng, 16, 16, 0.6);
    ASSERT_GT(min_det(g.psi), 0.0);
    EnergyParams p;
    p.alpha1 = 0.5;
    EXPECT_LT(verify::gradient_error(g, p), 1e-5);
  }
}

TEST(GaussNewtonMatrix, SymmetricAndPositiveDefinite) {
  Rng rng(23);
  for (int t = 0; t < 5; ++t) {
    verify::GradientProblem g = verify::random_gradient_problem(rng, 14);
    g.psi = gen::smooth_random_field(rng, 14, 14, 0.5);
    const ObjectiveEval e = RegistrationObjective(g.image, g.smoothed, g.c1, g.c2, EnergyParams{}).evaluate(g.psi);
    NodalVector u(e.gradient.size()), v(e.gradient.size()), hu, hv;
    for (double& x : u) x = gen::uniform(rng, -1, 1);
    for (double& x : v) x = gen::uniform(rng, -1, 1);
    e.gn.apply(u, hu);
    e.gn.apply(v, hv);
    EXPECT_LE(std::abs(dot(hu, v) - dot(u, hv)), 1e-10 * std::max(1.0, std::abs(dot(hu, v))));
    EXPECT_GT(dot(hu, u), 0.0);
  }
}

TEST(GaussNewtonMatrix, DiagonalMatchesUnitProbes) {
  Rng rng(24);
  verify::GradientProblem g = verify::random_gradient_problem(rng, 6);
  const ObjectiveEval e = RegistrationObjective(g.image, g.smoothed, g.c1, g.c2, EnergyParams{}).evaluate(g.psi);
  NodalVector unit(e.gradient.size(), 0.0), col;
  for (std::size_t i = 0; i < unit.size(); ++i) {
    unit[i] = 1.0;
    e.gn.apply(unit, col);
    EXPECT_NEAR(col[i], e.gn.diagonal()[i], 1e-9 * std::max(1.0, col[i]));
    unit[i] = 0.0;
  }
}

TEST(PreconditionedCg, SolvesSpdSystem) {
  QuadraticToy toy(identity_field(5, 7));
  const auto e = toy.evaluate(identity_field(5, 7));
  Rng rng(25);
  NodalVector b(e.gradient.size());
  for (double& x : b) x = gen::uniform(rng, -1, 1);
  int its = 0;
  const NodalVector x = preconditioned_cg(e.gn, b, 1e-12, 500, &its);
  NodalVector hx;
  e.gn.apply(x, hx);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(hx[i], b[i], 1e-10);
  EXPECT_LE(its, 500);
  EXPECT_EQ(norm(preconditioned_cg(e.gn, NodalVector(b.size(), 0.0), 1e-2, 50)), 0.0);
}

TEST(GaussNewton, LinearResidualConvergesInOneStep) {
  Rng rng(26);
  DeformationField target = gen::smooth_random_field(rng, 10, 12, 0.4);
  QuadraticToy toy(target);
  const GaussNewtonResult res = gauss_newton_solve(toy, identity_field(10, 12), exact_cg());
  ASSERT_GE(res.energies.size(), 2u);
  EXPECT_LE(res.energies[1], 1e-20 * std::max(1.0, res.energies[0]));
  EXPECT_LE(field_distance(res.psi, target), 1e-10);
  EXPECT_TRUE(res.converged);
}

TEST(GaussNewton, OptimalStartReturnsAfterOneIteration) {
  const DeformationField target = identity_field(6, 6);
  QuadraticToy toy(target);
  const GaussNewtonResult res = gauss_newton_solve(toy, target, exact_cg());
  EXPECT_EQ(res.iterations, 1);
  EXPECT_TRUE(res.converged);
  EXPECT_EQ(res.psi, target);
}

TEST(GaussNewton, RejectsFoldedStart) {
  QuadraticToy toy(identity_field(4, 4));
  DeformationField bad = identity_field(4, 4);
  bad(2, 2) = {4.0, 4.0};
  EXPECT_THROW(gauss_newton_solve(toy, bad, EnergyParams{}), Error);
}

TEST(GaussNewton, DescentAndOrientationAlongCircleTrajectory) {
  const synthetic::Scenario sc = synthetic::circle(64);
  const ScalarField img = rescaled(sc.image);
  const EnergyParams p;
  const Constants c = update_constants(img, identity_field(64, 64), sc.templ);
  const ScalarField smoothed = gaussian_smooth(to_scalar(sc.templ), 1.0);
  const RegistrationObjective obj(img, smoothed, c.c1, c.c2, p);
  std::vector<TraceRecord> trace;
  SolveContext ctx;
  ctx.trace = [&](const TraceRecord& t) { trace.push_back(t); };
  const GaussNewtonResult res = gauss_newton_solve(obj, identity_field(64, 64), p, ctx);
  ASSERT_GT(res.energies.size(), 2u);
  for (std::size_t k = 1; k < res.energies.size(); ++k) EXPECT_LE(res.energies[k], res.energies[k - 1]);
  ASSERT_EQ(trace.size(), res.energies.size() - 1);
  for (const TraceRecord& t : trace) {
    EXPECT_GE(t.min_det, p.det_floor);
    EXPECT_LT(t.max_mu, 1.0);
  }
  EXPECT_GE(min_det(res.psi), p.det_floor);
}

TEST(GaussNewton, ExpiredDeadlineStopsEarly) {
  const synthetic::Scenario sc = synthetic::circle(64);
  const ScalarField img = rescaled(sc.image);
  const ScalarField sm = gaussian_smooth(to_scalar(sc.templ), 1.0);
  const RegistrationObjective obj(img, sm, 255.0, 0.0, EnergyParams{});
  SolveContext ctx;
  ctx.deadline = std::chrono::steady_clock::now() - std::chrono::seconds(1);
  const GaussNewtonResult res = gauss_newton_solve(obj, identity_field(64, 64), EnergyParams{}, ctx);
  EXPECT_TRUE(res.deadline_hit);
  EXPECT_EQ(res.iterations, 1);
}

TEST(UpdateConstants, Examples) {
  EXPECT_EQ(update_constants(ScalarField(6, 6, 7.0), identity_field(6, 6), synthetic::disk(6, 6, 3, 3, 2)).c1, 7.0);
  const BinaryMask d = synthetic::disk(20, 20, 10, 10, 5);
  const ScalarField img = synthetic::paint(20, 20, 50.0, {{d, 200.0}});
  const Constants c = update_constants(img, identity_field(20, 20), d);
  EXPECT_EQ(c.c1, 200.0);
  EXPECT_EQ(c.c2, 50.0);
  EXPECT_THROW(update_constants(img, identity_field(20, 20), BinaryMask(20, 20, 0)), Error);
}

TEST(UpdateConstants, MatchesPixelwiseOptimalConstants) {
  Rng rng(27);
  for (int t = 0; t < 10; ++t) {
    // Omega2 already shifted from 200 to 165.
    const auto tv = gen::synthesize_three_value(rng, 24, 24, 10, 90, 165, 150, 60);
    const BinaryMask g = gen::mask_union(tv.omega1, tv.omega2);
    const Constants c = update_constants(tv.image, identity_field(24, 24), g);
    const PixelwiseEnergy pe = pixelwise_energy(tv.image, g);
    EXPECT_NEAR(c.c1, pe.c1, 1e-12);
    EXPECT_NEAR(c.c2, pe.c2, 1e-12);
    EXPECT_NEAR(c.c1, (150 * 90.0 + 60 * 165.0) / 210.0, 1e-9);
  }
}

TEST(AlternatingDirection, CircleFromIdentity) {
  const synthetic::Scenario sc = synthetic::circle(64);
  const ScalarField img = rescaled(sc.image);
  const AlternatingResult res = alternating_direction_solve(img, sc.templ, identity_field(64, 64), EnergyParams{});
  EXPECT_GE(dice(segmentation_mask(sc.templ, res.psi), sc.truth), 0.95);
  for (std::size_t k = 1; k < res.outer_energies.size(); ++k) {
    EXPECT_LE(res.outer_energies[k], res.outer_energies[k - 1] * (1 + 1e-12));
  }
  EXPECT_EQ(topology_of(segmentation_mask(sc.templ, res.psi)), topology_of(sc.templ));

  const AlternatingResult again = alternating_direction_solve(img, sc.templ, res.psi, EnergyParams{});
  EXPECT_EQ(again.outer_rounds, 1);
  EXPECT_LE(field_distance(again.psi, res.psi), EnergyParams{}.tol_step * (1 + field_norm(res.psi)));
}

TEST(Multilevel, SingleLevelIsAlternatingDirection) {
  const synthetic::Scenario sc = synthetic::circle(48);
  const ScalarField img = rescaled(sc.image);
  const MultilevelResult ml = multilevel_solve(img, sc.templ, identity_field(48, 48), EnergyParams{}, 1);
  const AlternatingResult ad = alternating_direction_solve(img, sc.templ, identity_field(48, 48), EnergyParams{});
  EXPECT_EQ(ml.levels_used, 1);
  EXPECT_EQ(ml.psi, ad.psi);
  EXPECT_EQ(ml.energy, ad.energy);
}

TEST(Multilevel, PyramidStopsAtSixtyFour) {
  const synthetic::Scenario sc = synthetic::circle(256);
  const ScalarField img = rescaled(sc.image);
  const MultilevelResult ml = multilevel_solve(img, sc.templ, identity_field(256, 256), EnergyParams{}, 8);
  EXPECT_EQ(ml.levels_used, 3);  // 256, 128, 64
  for (const AlternatingResult& lev : ml.per_level) EXPECT_GE(min_det(lev.psi), EnergyParams{}.det_floor);
  EXPECT_GE(dice(segmentation_mask(sc.templ, ml.psi), sc.truth), 0.95);
}

TEST(Multilevel, NotWorseThanSingleLevelAndFaster) {
  const synthetic::Scenario sc = synthetic::circle(512);
  const ScalarField img = rescaled(sc.image);
  const EnergyParams p;
  auto t0 = std::chrono::steady_clock::now();
  const MultilevelResult ml = multilevel_solve(img, sc.templ, identity_field(512, 512), p, 4);
  auto t1 = std::chrono::steady_clock::now();
  const MultilevelResult single = multilevel_solve(img, sc.templ, identity_field(512, 512), p, 1);
  auto t2 = std::chrono::steady_clock::now();
  EXPECT_LE(ml.energy, 1.05 * single.energy);
  EXPECT_LT(t1 - t0, t2 - t1);
}

TEST(Transfer, IdentityIsPreserved) {
  EXPECT_EQ(prolongate(identity_field(8, 10), 16, 20), identity_field(16, 20));
  EXPECT_EQ(restrict_field(identity_field(16, 20), 8, 10), identity_field(8, 10));
  const DeformationField shifted = translation_field(8, 8, {1.0, -0.5});
  EXPECT_EQ(prolongate(shifted, 16, 16), translation_field(16, 16, {2.0, -1.0}));
}

TEST(Transfer, ProlongatedFieldsAreOrientationValid) {
  Rng rng(28);
  for (int t = 0; t < 20; ++t) {
    const DeformationField coarse = gen::smooth_random_field(rng, 16, 16, t < 10 ? 0.8 : 6.0);
    const DeformationField fine = damp_to_valid(prolongate(coarse, 33, 31), 1e-6);
    EXPECT_GE(min_det(fine), 1e-6);
  }
}

TEST(Transfer, LocalRepairLeavesDistantNodesAlone) {
  DeformationField psi = identity_field(64, 64);
  for (int i = 0; i <= 64; ++i) {
    for (int j = 0; j <= 64; ++j) psi(i, j).x += 0.1 * std::sin(0.2 * i);
  }
  DeformationField folded = psi;
  folded(30, 30) = {33.0, 30.0};  // crosses its right neighbour
  ASSERT_LT(min_det(folded), 0.0);
  const DeformationField fixed = damp_to_valid(folded, 1e-6);
  EXPECT_GE(min_det(fixed), 1e-6);
  EXPECT_EQ(fixed(5, 5), psi(5, 5));
  EXPECT_EQ(fixed(60, 10), psi(60, 10));
}

TEST(Topology, SolverOutputsKeepTemplateTopology) {
  for (const auto& rep : verify::topology(29, 3)) EXPECT_TRUE(rep.ok()) << rep.summary();
}

TEST(Params, Validation) {
  EnergyParams p;
  EXPECT_NO_THROW(p.validate());
  p.alpha1 = -1;
  EXPECT_THROW(p.validate(), Error);
  p = {};
  p.max_gn = 0;
  EXPECT_THROW(p.validate(), Error);
  p = {};
  p.det_floor = 0;
  EXPECT_THROW(p.validate(), Error);
  EXPECT_THROW(multilevel_solve(ScalarField(4, 4), BinaryMask(4, 4), identity_field(4, 4), EnergyParams{}, 0), Error);
}
