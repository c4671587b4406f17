#include <gtest/gtest.h>

#include <cmath>

#include "streamlab.hpp"

using namespace streamlab;

namespace {

constexpr double kPi = 3.14159265358979323846;

OperatorsPtr disk_ops(const std::string& name, lab::Params p, Resolution r) {
  auto H = preset(name, p);
  auto g = build_grid(H->domain, r);
  return build_operators(g, H, build_projector(g, H));
}

}  // namespace

TEST(Projection, IdempotentAndOrthogonal) {
  auto o = disk_ops("perturbed", {{"eps", 0.1}}, {32, 64});
  std::mt19937_64 rng(3);
  std::normal_distribution<double> N;
  Eigen::VectorXd f(o->grid->size());
  for (auto& v : f) v = N(rng);
  const Eigen::VectorXd p = o->P->P0(f), q = o->P->Pperp(f);
  EXPECT_LT(o->l2(o->P->P0(p) - p), 1e-12 * o->l2(f));
  const double a = o->l2(f), b = o->l2(p), c = o->l2(q);
  EXPECT_NEAR(a * a, b * b + c * c, 1e-10 * a * a);
}

TEST(Projection, AngularModesHaveZeroAverage) {
  auto o = disk_ops("rotation", {}, {24, 48});
  auto f = sample(o->grid, [](Vec2 p) { return p.x * (1 - p.x * p.x - p.y * p.y); });
  EXPECT_LT(o->l2(o->P->P0(f.values)), 1e-12 * o->l2(f.values));
}

TEST(Evolve, HeatModeRate) {
  auto H = preset("zero");
  auto g = build_grid(H->domain, {64, 64});
  auto o = build_operators(g, H);
  const double nu = 1e-2;
  auto f = sample(g, [](Vec2 p) { return std::sin(2 * kPi * p.x); });
  StepPolicy pol;
  pol.samples = 200;
  pol.keep_fields = false;
  const Trajectory tr = solve({Kind::full, o, nu, Method::automatic}, f, 20.0, pol);
  const lab::RateFit r = lab::fit_decay_rate(energy_series(tr));
  ASSERT_TRUE(r.ok());
  EXPECT_NEAR(*r.rate, 4 * kPi * kPi * nu, 0.01 * 4 * kPi * kPi * nu);
}

TEST(Evolve, ModalAgreesWithExplicit) {
  auto o = disk_ops("radial_m2", {}, {16, 32});
  lab::InitialDataOptions d;
  d.kmax = 4;
  const ScalarField f = lab::broad_initial_data(*o, d);
  StepPolicy pol;
  pol.samples = 4;
  const Trajectory a = solve({Kind::model_perp, o, 1e-2, Method::modal}, f, 0.5, pol);
  const Trajectory b = solve({Kind::model_perp, o, 1e-2, Method::explicit_rk3}, f, 0.5, pol);
  EXPECT_LT(o->l2(a.fields.back() - b.fields.back()), 1e-6);
}

TEST(Evolve, TorusMassConserved) {
  auto H = preset("cellular");
  auto g = build_grid(H->domain, {32, 32});
  const ActionAngleChart c = build_chart(H);
  auto o = build_operators(g, H, build_projector(g, H, &c));
  auto f = sample(g, [](Vec2 p) { return 1.0 + std::cos(p.x) * std::sin(2 * p.y); });
  StepPolicy pol;
  pol.samples = 2;
  const Trajectory tr = solve({Kind::full, o, 1e-2, Method::explicit_rk3}, f, 0.5, pol);
  EXPECT_NEAR(tr.mass.back(), tr.mass.front(), 1e-12 * std::abs(tr.mass.front()));
}

TEST(Evolve, EnergyNonincreasing) {
  auto o = disk_ops("perturbed", {{"eps", 0.1}}, {16, 32});
  const ScalarField f = lab::broad_initial_data(*o);
  StepPolicy pol;
  pol.samples = 8;
  pol.keep_fields = false;
  const Trajectory tr = solve({Kind::full, o, 1e-3, Method::automatic}, f, 2.0, pol);
  for (size_t i = 1; i < tr.l2.size(); ++i) EXPECT_LE(tr.l2[i], tr.l2[i - 1] * (1 + 1e-12));
}

TEST(Evolve, RejectsNegativeDiffusivity) {
  auto o = disk_ops("radial_m2", {}, {16, 32});
  EXPECT_THROW(solve({Kind::full, o, -1.0, Method::automatic}, ScalarField(o->grid), 1.0), Error);
}

TEST(Spectral, RigidRotationAbscissaIsDiffusiveGap) {
  // L_perp is normal for rigid rotation, so Psi equals nu times the lowest Dirichlet eigenvalue
  // among nonzero angular modes, the first zero of J1 squared.
  const double j11 = 3.831705970207512;
  const double nu = 1e-2;
  auto op = assemble_Lperp(disk_ops("rotation", {}, {32, 64}), nu);
  const AbscissaResult r = pseudo_abscissa(*op);
  EXPECT_NEAR(r.psi, nu * j11 * j11, 0.02 * nu * j11 * j11);
}

TEST(Spectral, AccretiveAndWeiBound) {
  auto o = disk_ops("radial_m2", {}, {16, 32});
  auto op = assemble_Lperp(o, 1e-3);
  EXPECT_LT(accretivity_check(*op).max_residual, 1e-10);
  const double psi = pseudo_abscissa(*op).psi;
  const WeiReport w = wei_bound_check(*op, psi, random_perp_fields(*o, 4, 1), {1.0 / psi, 2.0 / psi});
  EXPECT_LE(w.max_ratio, 1.0);
}
