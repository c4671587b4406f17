#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <future>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "streamlab/evolve.hpp"
#include "streamlab/hamiltonian_classes.hpp"
#include "streamlab/lab/fit.hpp"
#include "streamlab/spectral.hpp"

namespace streamlab::lab {

using Params = std::map<std::string, double>;

/// Runs fn(i) for i < n on up to `jobs` threads; results keep their index order.
template <class F>
auto parallel_map(int n, int jobs, F&& fn) -> std::vector<decltype(fn(0))> {
  using R = decltype(fn(0));
  if (jobs <= 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::optional<R>> slots(n);
  for (int start = 0; start < n; start += jobs) {
    std::vector<std::future<R>> fut;
    for (int i = start; i < std::min(n, start + jobs); ++i) fut.push_back(std::async(std::launch::async, fn, i));
    for (int i = start; i < std::min(n, start + jobs); ++i) slots[i] = fut[i - start].get();
  }
  std::vector<R> out;
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

struct InitialDataOptions {
  int kmax = 8;
  std::uint64_t seed = 7;
  /// Remove the streamline average, or the domain mean when P0 is the identity.
  bool mean_free = true;
};

/// sum_{k=1..kmax} a_k s^min(k,2) (1 - s^2) cos(k phi + b_k) in polar coordinates (s, phi) about
/// the elliptic point, s scaled to the disk radius or a quarter of the torus side; unit L2 norm.
inline ScalarField broad_initial_data(const Operators& o, const InitialDataOptions& opt = {}) {
  if (opt.kmax < 1) throw invalid("kmax must be at least 1");
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<double> a(opt.kmax + 1), b(opt.kmax + 1);
  for (int k = 1; k <= opt.kmax; ++k) {
    a[k] = (0.5 + 0.5 * U(rng)) * (U(rng) < 0.5 ? -1.0 : 1.0);
    b[k] = two_pi * U(rng);
  }
  const Grid& g = *o.grid;
  const Vec2 x0 = o.H->x0;
  const double R = g.polar() ? g.domain.size - norm(x0) : g.domain.size / 4;
  ScalarField f = sample(o.grid, [&](Vec2 p) {
    const Vec2 d = g.displacement(p, x0);
    const double s = norm(d) / R;
    if (s >= 1) return 0.0;
    const double ph = std::atan2(d.y, d.x);
    double v = 0;
    for (int k = 1; k <= opt.kmax; ++k) v += a[k] * std::pow(s, std::min(k, 2)) * (1 - s * s) * std::cos(k * ph + b[k]);
    return v;
  });
  if (opt.mean_free) {
    if (o.P->identity)
      f.values.array() -= g.weights.dot(f.values) / g.weights.sum();
    else
      f = o.P->Pperp(f);
  }
  const double n = o.l2(f.values);
  if (!(n > 0)) throw numerical("initial data vanished after projection");
  f.values /= n;
  return f;
}

struct DecayOptions {
  WindowPolicy window{};
  /// First chunk length; 0 picks 10 / sqrt(nu).
  double t_guess = 0.0;
  int samples_per_chunk = 400;
  int max_chunks = 10;
  /// Wall-clock cap per run in seconds (0: none).
  double budget = 0.0;
  Method method = Method::automatic;
};

struct DecayRun {
  double nu = 0.0;
  Kind kind = Kind::model_perp;
  Method method = Method::automatic;
  RateFit fit;
  /// -d log||g||/dt over the last tenth of the record.
  double tail_rate = 0.0;
  double t_final = 0.0;
  double final_ratio = 1.0;
  long steps = 0;
  bool truncated = false;
  EnergySeries series;
};

/// Evolves until ||g|| drops below window.lower ||g(0)||, continuing in chunks, and fits the rate.
inline DecayRun run_decay(OperatorsPtr ops, Kind kind, double nu, const ScalarField& f, const DecayOptions& opt = {}) {
  if (!(nu > 0)) throw invalid("decay runs need a positive diffusivity");
  DecayRun run;
  run.nu = nu;
  run.kind = kind;
  EvolutionProblem prob{kind, ops, nu, opt.method};
  run.method = choose_method(prob);
  prob.method = run.method;
  const auto start = std::chrono::steady_clock::now();
  double T = opt.t_guess > 0 ? opt.t_guess : 10.0 / std::sqrt(nu);
  ScalarField cur = f;
  const double g0 = ops->l2(f.values);
  double t0 = 0.0;
  run.series.t = {0.0};
  run.series.l2 = {g0};
  run.series.h1 = {ops->h1(f.values)};
  for (int chunk = 0; chunk < opt.max_chunks; ++chunk) {
    StepPolicy pol;
    pol.sample_times = {T};
    pol.keep_fields = true;
    if (run.method == Method::modal) pol.dt = T / opt.samples_per_chunk;
    if (opt.budget > 0) {
      const double used = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      pol.budget = std::max(1.0, opt.budget - used);
    }
    const Trajectory tr = solve(prob, cur, T, pol);
    for (size_t i = 1; i < tr.t.size(); ++i) {
      run.series.t.push_back(t0 + tr.t[i]);
      run.series.l2.push_back(tr.l2[i]);
      run.series.h1.push_back(tr.h1[i]);
    }
    run.steps += static_cast<long>(tr.t.size()) - 1;
    t0 += tr.t.back();
    cur = ScalarField(ops->grid, tr.fields.back());
    if (tr.truncated) {
      run.truncated = true;
      break;
    }
    if (run.series.l2.back() <= opt.window.lower * g0) break;
    T *= 2;
  }
  run.t_final = t0;
  run.final_ratio = run.series.l2.back() / g0;
  run.fit = fit_decay_rate(run.series.t, run.series.l2, opt.window);
  const size_t n = run.series.t.size();
  const size_t i0 = n - std::max<size_t>(2, n / 10);
  if (n > 2 && run.series.l2[i0] > 0 && run.series.l2.back() > 0)
    run.tail_rate = -std::log(run.series.l2.back() / run.series.l2[i0]) / (run.series.t.back() - run.series.t[i0]);
  if (run.truncated && !run.fit.ok()) run.fit.flag = "budget_exceeded";
  return run;
}

inline void validate_nu_list(const std::vector<double>& nus, double min_decades) {
  if (nus.size() < 4) throw invalid("nu list needs at least 4 values");
  for (double v : nus)
    if (!(v > 0)) throw invalid("nu values must be positive");
  std::vector<double> s = nus;
  std::sort(s.begin(), s.end());
  if (std::adjacent_find(s.begin(), s.end()) != s.end()) throw invalid("nu values must be distinct");
  if (std::log10(s.back() / s.front()) < min_decades - 1e-12)
    throw invalid("nu values must span at least " + std::to_string(min_decades) + " decades");
}

struct DecayStudyOptions {
  DecayOptions decay{};
  InitialDataOptions data{};
  int jobs = 0;
};

struct DecayStudy {
  std::string preset;
  std::string grid;
  Kind kind = Kind::model_perp;
  std::vector<DecayRun> runs;
  std::optional<ScalingFit> scaling;
  /// m/(m+2) for flows with an elliptic cell, 1 for u = 0.
  std::optional<double> target;
  int m = 0;
  bool complete = false;
  std::string error;
};

/// Model decay rates per nu and the exponent of rate against nu. With u = 0 the projection is
/// the identity and the full (heat) equation is run instead.
inline DecayStudy decay_scaling_study(const std::string& name, const Params& params, const std::vector<double>& nus,
                                      Resolution res, const DecayStudyOptions& opt = {}) {
  validate_nu_list(nus, 1.5);
  DecayStudy st;
  st.preset = name;
  auto H = preset(name, params);
  auto grid = build_grid(H->domain, res);
  std::optional<ActionAngleChart> chart;
  if (!grid->polar() && H->has_elliptic_cell) chart = build_chart(H);
  auto ops = build_operators(grid, H, build_projector(grid, H, chart ? &*chart : nullptr));
  st.grid = grid->describe();
  st.kind = ops->P->identity ? Kind::full : Kind::model_perp;
  if (ops->P->identity) {
    st.target = 1.0;
  } else {
    const ActionAngleChart c = chart ? *chart : build_chart(H);
    const OrderEstimate m = estimate_m(c);
    st.m = m.m;
    if (!m.infinite()) st.target = static_cast<double>(m.m) / (m.m + 2);
  }
  const ScalarField f = broad_initial_data(*ops, opt.data);
  const int n = static_cast<int>(nus.size());
  auto runs = parallel_map(n, opt.jobs, [&](int i) -> std::pair<std::optional<DecayRun>, std::string> {
    try {
      return {run_decay(ops, st.kind, nus[i], f, opt.decay), ""};
    } catch (const std::exception& e) {
      return {std::nullopt, e.what()};
    }
  });
  std::vector<double> x, y;
  for (int i = 0; i < n; ++i) {
    if (!runs[i].first) {
      st.error = "nu=" + std::to_string(nus[i]) + ": " + runs[i].second;
      return st;
    }
    st.runs.push_back(*runs[i].first);
    const DecayRun& r = st.runs.back();
    if (!r.fit.ok()) {
      st.error = "nu=" + std::to_string(nus[i]) + ": rate fit failed (" + r.fit.flag + ")";
      return st;
    }
    x.push_back(nus[i]);
    y.push_back(*r.fit.rate);
  }
  st.scaling = scaling_fit(x, y);
  st.complete = true;
  return st;
}

struct HalvingReport {
  double nu = 0.0, C_star = 0.0;
  int m = 0;
  double T_nu = 0.0;
  double factor = 1.0;
  bool halved = false;
  Method method = Method::automatic;
};

/// ||P_perp rho(T_nu)|| / ||rho_in|| for the full equation with P0-free data, T_nu = C* nu^{-m/(m+2)}.
inline HalvingReport halving_time_check(const std::string& name, const Params& params, double nu, double C_star,
                                        Resolution res, int m = 0, double budget = 0.0,
                                        const InitialDataOptions& data = {}) {
  if (!(nu > 0)) throw invalid("nu must be positive");
  if (C_star < 0) throw invalid("C_* must be nonnegative");
  auto H = preset(name, params);
  if (!H->has_elliptic_cell) throw invalid("halving check needs streamline cells");
  auto grid = build_grid(H->domain, res);
  const ActionAngleChart chart = build_chart(H);
  auto ops = build_operators(grid, H, build_projector(grid, H, grid->polar() ? nullptr : &chart));
  HalvingReport r;
  r.nu = nu;
  r.C_star = C_star;
  r.m = m > 0 ? m : estimate_m(chart).m;
  if (r.m <= 0) throw invalid("order m is infinite; pass m explicitly");
  r.T_nu = C_star * std::pow(nu, -static_cast<double>(r.m) / (r.m + 2));
  const ScalarField f = broad_initial_data(*ops, data);
  if (r.T_nu == 0.0) {
    r.factor = 1.0;
    return r;
  }
  EvolutionProblem prob{Kind::full, ops, nu, Method::automatic};
  StepPolicy pol;
  pol.sample_times = {r.T_nu};
  pol.budget = budget;
  r.method = choose_method(prob);
  if (r.method == Method::modal) pol.dt = r.T_nu / 200;
  const Trajectory tr = solve(prob, f, r.T_nu, pol);
  if (tr.truncated) throw numerical("T_nu exceeds the run budget");
  r.factor = ops->l2(ops->P->Pperp(tr.fields.back())) / ops->l2(f.values);
  r.halved = r.factor <= 0.5;
  return r;
}

/// One pass of the 3x3 binomial stencil on a torus grid.
inline Eigen::VectorXd smooth3x3(const Grid& g, const Eigen::VectorXd& v) {
  if (g.polar()) throw invalid("smoothing stencil needs a torus grid");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(v.size());
  static const double wgt[3] = {0.25, 0.5, 0.25};
  for (int i = 0; i < g.n1; ++i)
    for (int j = 0; j < g.n2; ++j) {
      double s = 0;
      for (int a = -1; a <= 1; ++a)
        for (int b = -1; b <= 1; ++b) s += wgt[a + 1] * wgt[b + 1] * v[g.index(g.wrap1(i + a), g.wrap2(j + b))];
      out[g.index(i, j)] = s;
    }
  return out;
}

inline double weighted_l1(const Grid& g, const Eigen::VectorXd& v) { return g.weights.dot(v.cwiseAbs()); }

struct CellularReport {
  double delta = 0.0, gamma = 0.0, nu = 0.0;
  int resolution = 0;
  double cells_across_delta = 0.0;
  /// ||P0 rho_in|| / ||rho_in|| before and after the discrete re-projection.
  double p0_in_raw = 0.0, p0_in = 0.0;
  double l1_in = 0.0, l1_p0_final = 0.0;
  double ratio = 0.0;
  int nodes_minus = 0, nodes_plus = 0;
  Method method = Method::automatic;
};

/// Time-1 flow windows on the band H in [delta^2, 4 delta^2] of the cell [0,pi]^2: the negative
/// part starts on the diagonal next to the hyperbolic corner, the positive part on the line
/// y = pi/2 next to the cell edge x = 0. Both windows cover flow time 1 on every streamline, so
/// the streamline averages cancel.
inline CellularReport reproduce_example_cellular(double delta, double gamma, int resolution, double spacing = 0.0,
                                                 double budget = 0.0) {
  if (!(gamma > 0 && gamma < 0.25)) throw invalid("gamma must lie in (0, 1/4)");
  if (!(delta > 0 && delta < 0.25)) throw invalid("delta must lie in (0, 1/4)");
  CellularReport r;
  r.delta = delta;
  r.gamma = gamma;
  r.resolution = resolution;
  r.nu = std::pow(delta, 2 + gamma);
  auto H = preset("cellular");
  auto grid = build_grid(H->domain, {resolution, resolution});
  r.cells_across_delta = delta / grid->d1;
  if (r.cells_across_delta < 6) throw invalid("band under-resolved: fewer than 6 cells across delta");
  ChartOptions copt;
  copt.h_max = std::sqrt(1.0 - 0.25 * delta * delta);
  const ActionAngleChart chart = build_chart(H, copt);
  auto ops = build_operators(grid, H, build_projector(grid, H, &chart, spacing));
  const Grid& g = *grid;

  FlowIntegratorConfig fc;
  fc.atol = fc.rtol = 1e-9;
  fc.event_tol = 1e-10;
  auto back = [&H](double, const State<2>& y) {
    const Vec2 gr = H->grad({y[0], y[1]});
    return State<2>{gr.y, -gr.x};
  };
  DormandPrince<2, decltype(back)> dp(back, fc);
  const double lo = delta * delta, hi = 4 * delta * delta;
  Eigen::VectorXd minus = Eigen::VectorXd::Zero(g.size()), plus = minus;
  for (int n = 0; n < g.size(); ++n) {
    const Vec2 p = g.nodes[n];
    if (p.x <= 0 || p.x >= pi || p.y <= 0 || p.y >= pi) continue;
    const double h = H->H(p);
    if (h < lo || h > hi) continue;
    if (p.x < p.y && p.x < pi / 2) {
      auto hit = integrate_until_event(
          dp, detail::to_state(p), 1.0, [](const State<2>& y) { return y[0] - y[1]; },
          [](const State<2>& y) { return y[0] < pi / 2; });
      if (hit) {
        minus[n] = -1.0;
        ++r.nodes_minus;
      }
    }
    if (p.y > pi / 2 && p.x < pi / 2) {
      auto hit = integrate_until_event(
          dp, detail::to_state(p), 1.0, [](const State<2>& y) { return pi / 2 - y[1]; },
          [](const State<2>& y) { return y[0] < pi / 2; });
      if (hit) {
        plus[n] = 1.0;
        ++r.nodes_plus;
      }
    }
  }
  if (r.nodes_minus == 0 || r.nodes_plus == 0) throw numerical("band windows contain no grid nodes");
  minus = smooth3x3(g, minus);
  Eigen::VectorXd rho = plus + minus;
  const auto& P = *ops->P;
  r.p0_in_raw = ops->l2(P.P0(rho)) / ops->l2(rho);
  rho = P.Pperp(rho);
  r.p0_in = ops->l2(P.P0(rho)) / ops->l2(rho);
  r.l1_in = weighted_l1(g, rho);

  EvolutionProblem prob{Kind::full, ops, r.nu, Method::automatic};
  r.method = choose_method(prob);
  StepPolicy pol;
  pol.sample_times = {1.0};
  pol.budget = budget;
  const Trajectory tr = solve(prob, ScalarField(grid, rho), 1.0, pol);
  if (tr.truncated) throw numerical("cellular run exceeded its budget");
  r.l1_p0_final = weighted_l1(g, P.P0(tr.fields.back()));
  r.ratio = r.l1_p0_final / r.l1_in;
  return r;
}

struct EllipticReport {
  double nu = 0.0, delta = 0.0, t = 0.0;
  int resolution = 0;
  double cells_across_delta = 0.0;
  double theta_bar = 0.0;
  double p0_in_raw = 0.0, p0_in = 0.0;
  double ratio = 0.0;
  /// exp(-16).
  double floor = std::exp(-16.0);
  int nodes_plus = 0, nodes_minus = 0;
};

/// rho_in = 1 on h in [5 delta, 6 delta], theta in [0, 1/20) minus 1 on the same band for theta in
/// [theta_bar, theta_bar + 1/20) with Phi(theta_bar, delta) = (0, 3 delta); delta = nu^2, t = nu^3.
inline EllipticReport reproduce_example_elliptic(double nu, int resolution, double spacing = 0.0, double budget = 0.0) {
  if (!(nu > 0 && nu < 0.125)) throw invalid("nu must lie in (0, 1/8)");
  EllipticReport r;
  r.nu = nu;
  r.delta = nu * nu;
  r.t = nu * nu * nu;
  r.resolution = resolution;
  auto H = preset("ellipse_localized");
  auto grid = build_grid(H->domain, {resolution, resolution});
  r.cells_across_delta = r.delta / grid->d1;
  if (r.cells_across_delta < 8) throw invalid("resolution guard: fewer than 8 cells across delta");
  const ActionAngleChart chart = build_chart(H);
  if (6 * r.delta > chart.h_max()) throw invalid("band lies outside the chart");
  auto ops = build_operators(grid, H, build_projector(grid, H, &chart, spacing));
  const Grid& g = *grid;
  r.theta_bar = chart.invert({0.0, 3 * r.delta}).first;
  Eigen::VectorXd rho = Eigen::VectorXd::Zero(g.size());
  auto in_window = [](double th, double a) {
    double d = th - a;
    d -= std::floor(d);
    return d < 1.0 / 20;
  };
  for (int n = 0; n < g.size(); ++n) {
    const Vec2 p = g.nodes[n];
    const double h = H->level_of(p);
    if (h < 5 * r.delta || h > 6 * r.delta || !chart.covers(p)) continue;
    const double th = chart.invert(p).first;
    if (in_window(th, 0.0)) {
      rho[n] += 1.0;
      ++r.nodes_plus;
    }
    if (in_window(th, r.theta_bar)) {
      rho[n] -= 1.0;
      ++r.nodes_minus;
    }
  }
  if (r.nodes_plus == 0 || r.nodes_minus == 0) throw numerical("band windows contain no grid nodes");
  const auto& P = *ops->P;
  r.p0_in_raw = ops->l2(P.P0(rho)) / ops->l2(rho);
  rho = P.Pperp(rho);
  r.p0_in = ops->l2(P.P0(rho)) / ops->l2(rho);
  StepPolicy pol;
  pol.sample_times = {r.t};
  pol.budget = budget;
  const Trajectory tr = solve({Kind::full, ops, nu, Method::automatic}, ScalarField(grid, rho), r.t, pol);
  if (tr.truncated) throw numerical("elliptic run exceeded its budget");
  r.ratio = ops->l2(P.P0(tr.fields.back())) / ops->l2(rho);
  return r;
}

struct HomogenizationReport {
  double nu = 0.0, alpha = 0.0;
  int m = 0;
  double lambda_nu = 0.0;
  double t_start = 0.0, t_end = 0.0;
  /// sup over [1/lambda_nu, t_end] of ||rho - eta|| / ||rho_in||.
  double sup_rho_eta = 0.0;
  /// sup over [0, t_end] of ||P0 rho - eta|| / ||rho_in||.
  double sup_rho0_eta = 0.0;
  /// max{nu^(alpha/2), nu^(1/(m+2))}.
  double reference = 0.0;
  std::vector<double> t, rho_eta, rho0_eta;
};

/// Full rho against the model eta = exp(-t L0) P0 rho_in, both sampled on a common grid of times.
inline HomogenizationReport homogenization_check(const std::string& name, const Params& params, double nu, double alpha,
                                                 Resolution res, double t_budget, int samples = 64,
                                                 const InitialDataOptions& data = {}, double dt = 0.0) {
  if (!(nu > 0)) throw invalid("nu must be positive");
  if (!(alpha > 0 && alpha < 1)) throw invalid("alpha must lie in (0, 1)");
  auto H = preset(name, params);
  if (!H->has_elliptic_cell) throw invalid("homogenization check needs streamline cells");
  auto grid = build_grid(H->domain, res);
  const ActionAngleChart chart = build_chart(H);
  auto ops = build_operators(grid, H, build_projector(grid, H, grid->polar() ? nullptr : &chart));
  HomogenizationReport r;
  r.nu = nu;
  r.alpha = alpha;
  r.m = estimate_m(chart).m;
  if (r.m <= 0) throw invalid("order m is infinite");
  r.lambda_nu = std::pow(nu, static_cast<double>(r.m) / (r.m + 2));
  r.t_start = 1.0 / r.lambda_nu;
  r.t_end = std::min(1.0 / nu, t_budget);
  if (r.t_end < r.t_start) throw invalid("time budget ends before 1/lambda_nu");
  r.reference = std::max(std::pow(nu, alpha / 2), std::pow(nu, 1.0 / (r.m + 2)));
  InitialDataOptions d = data;
  d.mean_free = false;
  const ScalarField f = broad_initial_data(*ops, d);
  StepPolicy pol;
  for (int i = 1; i <= samples; ++i) pol.sample_times.push_back(r.t_end * i / samples);
  pol.dt = dt;
  const Trajectory full = solve({Kind::full, ops, nu, Method::automatic}, f, r.t_end, pol);
  const Trajectory eta =
      solve({Kind::model_zero, ops, nu, Method::automatic}, ops->P->P0(f), r.t_end, pol);
  const double n0 = ops->l2(f.values);
  for (size_t i = 0; i < full.sample_t.size(); ++i) {
    const double a = ops->l2(full.fields[i] - eta.fields[i]) / n0;
    const double b = ops->l2(ops->P->P0(full.fields[i]) - eta.fields[i]) / n0;
    r.t.push_back(full.sample_t[i]);
    r.rho_eta.push_back(a);
    r.rho0_eta.push_back(b);
    r.sup_rho0_eta = std::max(r.sup_rho0_eta, b);
    if (full.sample_t[i] >= r.t_start * (1 - 1e-12)) r.sup_rho_eta = std::max(r.sup_rho_eta, a);
  }
  return r;
}

struct GcorrReport {
  std::string preset;
  Params params;
  double nu = 0.0, t_end = 0.0;
  /// sup_t ||rho - P0 rho - g|| / ||rho_in||.
  double sup = 0.0;
  double p0_share = 0.0;
  std::vector<std::pair<double, double>> series;
};

/// Full run and model_perp run from the same data; the data keep their streamline average so the
/// commutator forcing acts.
inline GcorrReport gcorr_smallness(const std::string& name, const Params& params, double nu, double t_end,
                                   Resolution res, int samples = 32, const InitialDataOptions& data = {},
                                   double dt = 0.0) {
  auto H = preset(name, params);
  if (!H->has_elliptic_cell) throw invalid("g_corr needs streamline cells");
  auto grid = build_grid(H->domain, res);
  std::optional<ActionAngleChart> chart;
  if (!grid->polar()) chart = build_chart(H);
  auto ops = build_operators(grid, H, build_projector(grid, H, chart ? &*chart : nullptr));
  InitialDataOptions d = data;
  d.mean_free = false;
  const ScalarField f = broad_initial_data(*ops, d);
  GcorrReport r;
  r.preset = name;
  r.params = params;
  r.nu = nu;
  r.t_end = t_end;
  const double n0 = ops->l2(f.values);
  r.p0_share = ops->l2(ops->P->P0(f.values)) / n0;
  StepPolicy pol;
  pol.samples = samples;
  pol.dt = dt;
  const Trajectory full = solve({Kind::full, ops, nu, Method::automatic}, f, t_end, pol);
  const Trajectory model = solve({Kind::model_perp, ops, nu, Method::automatic}, ops->P->Pperp(f), t_end, pol);
  r.series = g_corr_series(full, model, *ops);
  for (auto& [t, v] : r.series) {
    v /= n0;
    r.sup = std::max(r.sup, v);
  }
  return r;
}

struct ClassRow {
  double eps = 0.0;
  double eps_unif = 0.0, eps_trans = 0.0;
};

struct ClassMembership {
  std::vector<ClassRow> rows;
  LinearFit unif, trans;
  double radial_unif = 0.0, radial_trans = 0.0;
};

/// eps_unif and eps_trans of perturbed(eps) against eps, plus the radial reference.
inline ClassMembership class_membership(const std::vector<double>& eps, const ChartOptions& copt = {}, int jobs = 0) {
  if (eps.size() < 2) throw invalid("class membership needs at least two eps values");
  ClassMembership out;
  auto rows = parallel_map(static_cast<int>(eps.size()), jobs, [&](int i) {
    auto H = preset("perturbed", {{"eps", eps[i]}});
    const ClassP p = check_class_P(*H, build_chart(H, copt));
    return ClassRow{eps[i], p.eps_unif, p.eps_trans};
  });
  std::vector<double> x, yu, yt;
  for (auto& r : rows) {
    out.rows.push_back(r);
    x.push_back(r.eps);
    yu.push_back(r.eps_unif);
    yt.push_back(r.eps_trans);
  }
  out.unif = linear_fit(x, yu);
  out.trans = linear_fit(x, yt);
  auto H0 = preset("radial_m2");
  const ClassP p0 = check_class_P(*H0, build_chart(H0, copt));
  out.radial_unif = p0.eps_unif;
  out.radial_trans = p0.eps_trans;
  return out;
}

struct AbscissaRow {
  double nu = 0.0;
  AbscissaResult result;
};

struct AbscissaStudy {
  std::string preset;
  OperatorRoute route = OperatorRoute::automatic;
  std::vector<AbscissaRow> rows;
  LinearFit slope;
  std::optional<double> target;
  std::optional<WeiReport> wei;
};

struct AbscissaStudyOptions {
  AbscissaOptions sweep{};
  OperatorRoute route = OperatorRoute::automatic;
  int wei_fields = 20;
  int wei_times = 10;
  /// Wei times are spread over (0, wei_span / Psi]; 0 fields skips the check.
  double wei_span = 4.0;
  unsigned seed = 11;
  int jobs = 0;
};

/// Psi(L_perp) per nu, the slope of log Psi against log nu, and the semigroup bound at the
/// smallest nu.
inline AbscissaStudy abscissa_scaling(const std::string& name, const Params& params, const std::vector<double>& nus,
                                      Resolution res, const AbscissaStudyOptions& opt = {}) {
  if (nus.size() < 2) throw invalid("abscissa scaling needs at least two nu values");
  for (double v : nus)
    if (!(v > 0)) throw invalid("nu values must be positive");
  auto H = preset(name, params);
  auto grid = build_grid(H->domain, res);
  const ActionAngleChart chart = build_chart(H);
  auto ops = build_operators(grid, H, build_projector(grid, H, grid->polar() ? nullptr : &chart));
  AbscissaStudy st;
  st.preset = name;
  const OrderEstimate m = estimate_m(chart);
  if (!m.infinite()) st.target = static_cast<double>(m.m) / (m.m + 2);
  auto rows = parallel_map(static_cast<int>(nus.size()), opt.jobs, [&](int i) {
    auto D = assemble_Lperp(ops, nus[i], opt.route);
    return std::make_pair(AbscissaRow{nus[i], pseudo_abscissa(*D, opt.sweep)}, D->route);
  });
  std::vector<double> x, y;
  for (auto& [row, route] : rows) {
    st.rows.push_back(row);
    st.route = route;
    if (!(row.result.psi > 0)) throw numerical("pseudospectral abscissa vanished");
    x.push_back(std::log(row.nu));
    y.push_back(std::log(row.result.psi));
  }
  st.slope = linear_fit(x, y);
  if (opt.wei_fields > 0) {
    size_t k = std::min_element(nus.begin(), nus.end()) - nus.begin();
    auto D = assemble_Lperp(ops, nus[k], opt.route);
    const double psi = st.rows[k].result.psi;
    std::vector<double> times;
    for (int i = 1; i <= opt.wei_times; ++i) times.push_back(opt.wei_span / psi * i / opt.wei_times);
    st.wei = wei_bound_check(*D, psi, random_perp_fields(*ops, opt.wei_fields, opt.seed), times);
  }
  return st;
}

struct ExpansionReport {
  double eps = 0.0, nu = 0.0, t_end = 0.0;
  int depth = 0;
  double C_P = 0.0, c0 = 0.0;
  /// max_t ||rho_iota^(n)(t)|| / (e^{-c0 nu t} sqrt(8/(1-eps))^n ||rho_in||), per level.
  std::vector<double> ratio_perp, ratio_zero;
  /// Largest ||rho_0^(2j)|| and ||rho_perp^(2j+1)|| relative to ||rho_in|| when P0 rho_in = 0.
  std::optional<double> parity_residual;
};

/// Expansion levels for perturbed(eps) checked against their exponential bounds; with
/// mean_free data the levels that must vanish by parity are measured as well.
inline ExpansionReport expansion_bounds(double eps, double nu, int depth, double t_end, Resolution res,
                                        bool mean_free = false, const InitialDataOptions& data = {},
                                        double dt = 0.0) {
  auto H = preset("perturbed", {{"eps", eps}});
  auto grid = build_grid(H->domain, res);
  auto ops = build_operators(grid, H);
  ExpansionReport r;
  r.eps = eps;
  r.nu = nu;
  r.t_end = t_end;
  r.depth = depth;
  const double lam1 = smallest_diffusion_eigenvalue(*grid);
  r.C_P = 1.0 / lam1;
  r.c0 = 1.0 / (2.0 * r.C_P);
  InitialDataOptions d = data;
  d.mean_free = mean_free;
  const ScalarField f = broad_initial_data(*ops, d);
  StepPolicy pol;
  pol.keep_fields = false;
  pol.dt = dt;
  const ExpansionResult ex = solve_expansion(ops, f, nu, eps, depth, t_end, pol);
  const double growth = std::sqrt(8.0 / (1.0 - eps));
  auto worst = [&](const Trajectory& tr, int n) {
    double w = 0;
    for (size_t i = 0; i < tr.t.size(); ++i)
      w = std::max(w, tr.l2[i] / (std::exp(-r.c0 * nu * tr.t[i]) * std::pow(growth, n) * ex.rho_in_norm));
    return w;
  };
  double parity = 0;
  for (int n = 0; n <= depth; ++n) {
    r.ratio_perp.push_back(worst(ex.perp[n], n));
    r.ratio_zero.push_back(worst(ex.zero[n], n));
    const Trajectory& vanish = n % 2 == 0 ? ex.zero[n] : ex.perp[n];
    for (double v : vanish.l2) parity = std::max(parity, v / ex.rho_in_norm);
  }
  if (mean_free) r.parity_residual = parity;
  return r;
}

}  // namespace streamlab::lab
