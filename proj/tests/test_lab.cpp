#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "streamlab.hpp"

using namespace streamlab;
using namespace streamlab::lab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("streamlab_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Config parse_text(const std::string& s) {
  std::istringstream is(s);
  return Config::parse(is);
}

}  // namespace

TEST(Fit, ExactExponential) {
  std::vector<double> t, g;
  for (int i = 0; i <= 400; ++i) {
    t.push_back(0.05 * i);
    g.push_back(std::exp(-0.3 * t.back()));
  }
  const RateFit r = fit_decay_rate(t, g);
  ASSERT_TRUE(r.ok());
  EXPECT_NEAR(*r.rate, 0.3, 1e-6);
  EXPECT_NEAR(r.r2, 1.0, 1e-12);
  EXPECT_LE(std::exp(-0.3 * r.t_start), 0.5);
  EXPECT_GT(std::exp(-0.3 * (r.t_start - 0.05)), 0.5);
}

TEST(Fit, InsufficientDecayFlagged) {
  std::vector<double> t{0, 1, 2, 3}, g{1, 0.9, 0.8, 0.7};
  const RateFit r = fit_decay_rate(t, g);
  EXPECT_FALSE(r.ok());
  EXPECT_EQ(r.flag, "insufficient_decay");
}

TEST(Fit, LineAndPowerLaw) {
  const LinearFit f = linear_fit({1, 2, 3, 4}, {3, 5, 7, 9});
  EXPECT_NEAR(f.slope, 2.0, 1e-14);
  EXPECT_NEAR(f.intercept, 1.0, 1e-14);
  EXPECT_NEAR(f.half_width, 0.0, 1e-12);
  std::vector<double> nu{1e-3, 3e-4, 1e-4, 3e-5}, rate;
  for (double v : nu) rate.push_back(2.0 * std::pow(v, 0.5));
  const ScalingFit s = scaling_fit(nu, rate);
  EXPECT_NEAR(s.alpha, 0.5, 1e-12);
  EXPECT_NEAR(s.prefactor, 2.0, 1e-10);
  EXPECT_NEAR(t_quantile_975(2), 4.303, 1e-12);
}

TEST(Fit, NoisyLineHasPositiveHalfWidth) {
  const LinearFit f = linear_fit({0, 1, 2, 3, 4}, {0.1, 0.9, 2.1, 2.9, 4.1});
  EXPECT_GT(f.half_width, 0.0);
  EXPECT_GT(f.r2, 0.99);
  EXPECT_LE(f.r2, 1.0);
}

TEST(Config, SectionsCommentsAndLists) {
  const Config c = parse_text("# top\n[run]\nnu = 1e-3, 3e-4  # trailing\n[grid]\nn1 = 32\n");
  EXPECT_EQ(c.list("run.nu"), (std::vector<double>{1e-3, 3e-4}));
  EXPECT_EQ(c.integer("grid.n1", 0), 32);
  EXPECT_FALSE(c.has("grid.n2"));
  EXPECT_THROW(c.num("run.missing"), Error);
  EXPECT_THROW(parse_text("[run\n"), Error);
  EXPECT_THROW(parse_text("novalue\n"), Error);
}

TEST(Config, OverridesByBareOrFullName) {
  Config c = parse_text("[run]\nnu = 1\n[flow]\neps = 0.1\n[grid]\nn1 = 8\n[extra]\nn1 = 9\n");
  c.override_value("eps", "0.05");
  EXPECT_DOUBLE_EQ(c.num("flow.eps"), 0.05);
  c.override_value("run.samples", "12");
  EXPECT_EQ(c.integer("run.samples", 0), 12);
  EXPECT_THROW(c.override_value("n1", "4"), Error);
  EXPECT_THROW(c.override_value("bogus", "4"), Error);
}

TEST(Config, RenderIsCanonical) {
  const Config a = parse_text("[b]\ny = 2\n[a]\nx = 1\n");
  const Config b = parse_text("[a]\nx = 1\n[b]\ny = 2\n");
  EXPECT_EQ(a.render(), b.render());
  EXPECT_EQ(a.render(), "[a]\nx = 1\n[b]\ny = 2\n");
}

TEST(Spec, ValidationNamesTheField) {
  const fs::path d = scratch_dir("spec");
  const std::string base = "[experiment]\nkind = decay_scaling\noutput = " + d.string() + "\n[grid]\nn1 = 8\n";
  try {
    make_spec(parse_text(base + "[flow]\npreset = nonsense\n[run]\nnu = 1e-3\n"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("flow.preset"), std::string::npos);
    EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
  }
  EXPECT_THROW(make_spec(parse_text(base + "[flow]\npreset = radial_m2\n[run]\nnu = 1e-3, 1e-3\n")), Error);
  EXPECT_THROW(make_spec(parse_text(base + "[flow]\npreset = radial_m2\n[run]\nnu = -1\n")), Error);
  EXPECT_THROW(make_spec(parse_text("[experiment]\nkind = other\noutput = " + d.string() + "\n")), Error);
}

TEST(Cli, InvalidPresetExitsWithUsageCode) {
  const fs::path d = scratch_dir("cli");
  std::ofstream(d / "bad.cfg") << "[experiment]\nkind = decay_scaling\noutput = " << (d / "out").string()
                               << "\n[flow]\npreset = nonsense\n[grid]\nn1 = 8\n[run]\nnu = 1e-3\n";
  const std::string cmd =
      std::string(STREAMLAB_CLI) + " study " + (d / "bad.cfg").string() + " > " + (d / "log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
  EXPECT_NE(slurp(d / "log").find("flow.preset"), std::string::npos);
}

TEST(Run, DecayScalingWritesDeterministicFiles) {
  auto spec_in = [](const fs::path& out) {
    return make_spec(parse_text("[experiment]\nkind = decay_scaling\nseed = 3\noutput = " + out.string() +
                                "\n[flow]\npreset = radial_m2\n[grid]\nn1 = 16\nn2 = 32\n[run]\n"
                                "nu = 1e-2, 3e-3, 1e-3, 3e-4\nsamples = 100\n"));
  };
  const fs::path a = scratch_dir("det_a"), b = scratch_dir("det_b");
  const RunOutcome ra = run(spec_in(a)), rb = run(spec_in(b));
  EXPECT_EQ(ra.exit_code, exit_pass) << ra.summary;
  for (const char* f : {"rates.csv", "exponent.txt", "energy.csv", "plot.gp", "report.txt"})
    EXPECT_TRUE(fs::exists(a / f)) << f;
  for (const char* f : {"rates.csv", "exponent.txt", "energy.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  const std::string rep = slurp(a / "report.txt");
  EXPECT_NE(rep.find(version_string), std::string::npos);
  EXPECT_NE(rep.find("preset = radial_m2"), std::string::npos);
}

TEST(Run, ToleranceFailureGivesExitOne) {
  const fs::path d = scratch_dir("tol");
  const ExperimentSpec s = make_spec(parse_text(
      "[experiment]\nkind = decay_scaling\noutput = " + d.string() +
      "\n[flow]\npreset = zero\n[grid]\nn1 = 16\n[run]\nnu = 1e-1, 3e-2, 1e-2, 3e-3\ntarget = 3\ntolerance = 0.01\n"));
  EXPECT_EQ(run(s).exit_code, exit_acceptance);
}

TEST(Experiments, HalvingAtZeroTimeIsOne) {
  const HalvingReport r = halving_time_check("radial_m2", {}, 1e-3, 0.0, {16, 32});
  EXPECT_DOUBLE_EQ(r.factor, 1.0);
  EXPECT_FALSE(r.halved);
}

TEST(Experiments, HalvingFactorDecreasesWithTime) {
  double prev = 1.0;
  for (double C : {2.0, 4.0, 8.0}) {
    const double f = halving_time_check("radial_m2", {}, 1e-3, C, {16, 32}).factor;
    EXPECT_LT(f, prev);
    prev = f;
  }
}

TEST(Experiments, NuListNeedsSpread) {
  EXPECT_THROW(validate_nu_list({1e-3, 8e-4, 6e-4, 4e-4}, 1.5), Error);
  EXPECT_THROW(validate_nu_list({1e-3, 1e-5}, 1.5), Error);
  EXPECT_NO_THROW(validate_nu_list({1e-3, 3e-4, 1e-4, 3e-5}, 1.5));
}

TEST(Experiments, InitialDataIsUnitAndMeanFree) {
  auto H = preset("perturbed", {{"eps", 0.1}});
  auto g = build_grid(H->domain, {16, 32});
  auto o = build_operators(g, H, build_projector(g, H));
  const ScalarField f = broad_initial_data(*o);
  EXPECT_NEAR(o->l2(f.values), 1.0, 1e-12);
  EXPECT_LT(o->l2(o->P->P0(f.values)), 1e-10);
}

TEST(Experiments, SmoothingKeepsConstants) {
  auto g = build_grid(DomainSpec::torus(1.0), {16, 16});
  const Eigen::VectorXd one = Eigen::VectorXd::Ones(g->size());
  EXPECT_LT((smooth3x3(*g, one) - one).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Experiments, RadialHomogenizationDecouples) {
  const HomogenizationReport r = homogenization_check("radial_m2", {}, 1e-3, 0.5, {16, 32}, 200.0, 32);
  EXPECT_LT(r.sup_rho0_eta, 1e-6);
  EXPECT_NEAR(r.t_start, 1.0 / r.lambda_nu, 1e-12 / r.lambda_nu);
  EXPECT_LE(r.t_end, 200.0);
}
