#include <gtest/gtest.h>

#include <cmath>

#include "streamlab.hpp"

using namespace streamlab;

namespace {

constexpr double kPi = 3.14159265358979323846;

}  // namespace

TEST(DomainGrid, TorusLaplacianMatchesDiscreteSymbol) {
  auto g = build_grid(DomainSpec::torus(1.0), {48, 48});
  const int kx = 3, ky = 2;
  auto f = sample(g, [&](Vec2 p) { return std::sin(2 * kPi * kx * p.x) * std::cos(2 * kPi * ky * p.y); });
  const ScalarField lf = laplacian(f);
  const double sx = (2 - 2 * std::cos(2 * kPi * kx * g->d1)) / (g->d1 * g->d1);
  const double sy = (2 - 2 * std::cos(2 * kPi * ky * g->d2)) / (g->d2 * g->d2);
  const double err = (lf.values + (sx + sy) * f.values).cwiseAbs().maxCoeff();
  EXPECT_LT(err, 1e-9 * (sx + sy));
}

TEST(DomainGrid, DiskDirichletGroundState) {
  // First zero of J0 squared.
  const double j01 = 2.404825557695773;
  auto g = build_grid(DomainSpec::disk(1.0), {64, 64});
  EXPECT_NEAR(smallest_diffusion_eigenvalue(*g), j01 * j01, 0.01 * j01 * j01);
}

TEST(DomainGrid, TorusSpectralGap) {
  auto g = build_grid(DomainSpec::torus(1.0), {32, 32});
  EXPECT_NEAR(smallest_diffusion_eigenvalue(*g), 4 * kPi * kPi, 0.01 * 4 * kPi * kPi);
}

TEST(DomainGrid, WeightsIntegrateArea) {
  auto d = build_grid(DomainSpec::disk(1.0), {20, 40});
  EXPECT_NEAR(d->weights.sum(), kPi, 1e-12);
  auto t = build_grid(DomainSpec::torus(2.0), {16, 16});
  EXPECT_NEAR(t->weights.sum(), 4.0, 1e-12);
}

TEST(DomainGrid, RejectsBadDomain) {
  EXPECT_THROW(build_grid(DomainSpec::disk(-1.0), {8, 8}), Error);
  EXPECT_THROW(build_grid(DomainSpec::torus(1.0), {0, 8}), Error);
}

TEST(Ode, HarmonicOscillatorReturnsAfterOnePeriod) {
  auto rhs = [](double, const State<2>& y) { return State<2>{y[1], -y[0]}; };
  DormandPrince<2, decltype(rhs)> dp(rhs, {});
  const State<2> y = integrate_to(dp, State<2>{1.0, 0.0}, 0.0, 2 * kPi);
  EXPECT_NEAR(y[0], 1.0, 1e-9);
  EXPECT_NEAR(y[1], 0.0, 1e-9);
}

TEST(Ode, RejectsLooseTolerance) {
  FlowIntegratorConfig c;
  c.rtol = 1e-2;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Hamiltonian, PresetNamesAndParameters) {
  EXPECT_THROW(preset("no_such_flow"), Error);
  EXPECT_THROW(preset("perturbed", {{"eps", 0.3}}), Error);
  EXPECT_THROW(preset("radial_m1", {{"a", -1.0}}), Error);
  auto H = preset("radial_m2");
  const Vec2 p{0.3, 0.4};
  EXPECT_NEAR(H->H(p), 0.5 * 0.25 + 0.25 * 0.0625, 1e-14);
}

TEST(Hamiltonian, ScaleMultipliesH) {
  auto a = preset("cellular"), b = preset("cellular", {{"scale", 3.0}});
  const Vec2 p{0.7, 1.1};
  EXPECT_NEAR(b->H(p), 3 * a->H(p), 1e-14);
}

TEST(Chart, RigidRotationPeriod) {
  const ActionAngleChart c = build_chart(preset("rotation"));
  for (double T : c.T) EXPECT_NEAR(T, 2 * kPi, 1e-8);
}

TEST(Chart, RadialPeriodMatchesAngularVelocity) {
  // H = r^2/2 + r^4/4 = h^2 turns at angular speed 1 + r^2 = sqrt(1 + 4h^2).
  const ActionAngleChart c = build_chart(preset("radial_m2"));
  for (int j = 0; j < c.n_h; ++j) {
    const double expect = 2 * kPi / std::sqrt(1 + 4 * c.h[j] * c.h[j]);
    EXPECT_NEAR(c.T[j], expect, 1e-7 * expect);
  }
}

TEST(Chart, InvertRoundTrip) {
  const ActionAngleChart c = build_chart(preset("perturbed", {{"eps", 0.1}}));
  for (double th : {0.1, 0.45, 0.8})
    for (double hf : {0.3, 0.6, 0.9}) {
      const double hh = hf * c.h_max();
      auto [t2, h2] = c.invert(c.map(th, hh));
      EXPECT_NEAR(t2, th, 1e-7);
      EXPECT_NEAR(h2, hh, 1e-7);
    }
}

TEST(Chart, LevelIdentity) {
  const ActionAngleChart c = build_chart(preset("perturbed", {{"eps", 0.05}}));
  for (int j = 0; j < c.n_h; j += 7)
    for (int i = 0; i < c.n_theta; i += 13) EXPECT_NEAR(c.H->H(c.phi[c.idx(i, j)]), c.q(c.h[j]) + c.h0, 1e-9);
}

TEST(Classes, OrderOfVanishing) {
  EXPECT_EQ(estimate_m(build_chart(preset("radial_m2"))).m, 2);
  EXPECT_EQ(estimate_m(build_chart(preset("radial_m1"))).m, 1);
  EXPECT_TRUE(estimate_m(build_chart(preset("rotation"))).infinite());
}

TEST(ThinSets, IntervalAlgebra) {
  EXPECT_TRUE(overlaps({0, 1}, {0.5, 2}));
  EXPECT_FALSE(overlaps({0, 1}, {1, 2}));
  const auto m = merge_intervals({{2, 3}, {0, 1}, {0.5, 1.5}});
  ASSERT_EQ(m.size(), 2u);
  EXPECT_DOUBLE_EQ(m[0].hi, 1.5);
  EXPECT_DOUBLE_EQ(distance_to(m, 1.75), 0.25);
}
