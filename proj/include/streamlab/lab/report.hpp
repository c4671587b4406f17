#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "streamlab/lab/config.hpp"
#include "streamlab/lab/experiments.hpp"

namespace streamlab::lab {

enum ExitCode : int { exit_pass = 0, exit_acceptance = 1, exit_usage = 2, exit_numerical = 3 };

struct RunOutcome {
  int exit_code = exit_pass;
  std::vector<std::string> files;
  std::string summary;
};

namespace detail {

class Csv {
 public:
  Csv(const std::string& path, const std::string& header) : os_(path) {
    if (!os_) throw invalid("cannot write '" + path + "'");
    os_ << header << "\n";
    os_ << std::setprecision(12);
  }
  template <class... T>
  void row(const T&... v) {
    bool first = true;
    ((os_ << (first ? "" : ",") << v, first = false), ...);
    os_ << "\n";
  }

 private:
  std::ofstream os_;
};

inline std::string fmt(double v, int digits = 6) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

inline const char* route_name(OperatorRoute r) {
  return r == OperatorRoute::dense ? "dense" : r == OperatorRoute::modal ? "modal" : "auto";
}

inline std::string res_tag(Resolution r) { return std::to_string(r.n1) + "x" + std::to_string(r.n2); }

struct Writer {
  std::filesystem::path dir;
  RunOutcome* out;
  std::string path(const std::string& name) {
    const std::string p = (dir / name).string();
    out->files.push_back(p);
    return p;
  }
  void text(const std::string& name, const std::string& body) {
    std::ofstream os(path(name));
    if (!os) throw invalid("cannot write '" + name + "'");
    os << body;
  }
};

inline WindowPolicy window_from(const Config& c) {
  return {c.num("run.window_upper", 0.5), c.num("run.window_lower", 0.01)};
}

inline void check_tolerance(const Config& c, std::optional<double> target, double value, const std::string& what,
                            std::ostringstream& rep, int& code) {
  if (!c.has("run.tolerance")) return;
  const double tol = c.num("run.tolerance");
  const double t = c.has("run.target") ? c.num("run.target") : target.value_or(std::nan(""));
  if (std::isnan(t)) throw invalid("run.tolerance: no target known; set run.target");
  const bool ok = std::abs(value - t) <= tol;
  rep << "check " << what << ": |" << fmt(value) << " - " << fmt(t) << "| <= " << fmt(tol) << " -> "
      << (ok ? "PASS" : "FAIL") << "\n";
  if (!ok) code = exit_acceptance;
}

inline int run_decay_scaling(const ExperimentSpec& s, Writer& w, std::ostringstream& rep) {
  const Config& c = s.config;
  DecayStudyOptions opt;
  opt.decay.window = window_from(c);
  opt.decay.samples_per_chunk = static_cast<int>(c.integer("run.samples", 400));
  opt.decay.budget = c.num("run.budget", 0.0);
  opt.decay.t_guess = c.num("run.t_guess", 0.0);
  opt.decay.method = parse_method(c.str("run.method", "auto"));
  opt.data.kmax = static_cast<int>(c.integer("run.kmax", 8));
  opt.jobs = s.jobs;
  Csv rates(w.path("rates.csv"), "seed,n1,n2,nu,rate,r2,t_start,t_end,tail_rate,steps,method");
  Csv energy(w.path("energy.csv"), "seed,n1,n2,nu,t,l2");
  std::ostringstream ex;
  int code = exit_pass;
  for (auto res : s.resolutions)
    for (auto seed : s.seeds) {
      opt.data.seed = seed;
      const DecayStudy st = decay_scaling_study(s.preset, s.params, s.nus, res, opt);
      for (const DecayRun& r : st.runs) {
        rates.row(seed, res.n1, res.n2, r.nu, r.fit.rate.value_or(std::nan("")), r.fit.r2, r.fit.t_start, r.fit.t_end,
                  r.tail_rate, r.steps, to_string(r.method));
        for (size_t i = 0; i < r.series.t.size(); ++i) energy.row(seed, res.n1, res.n2, r.nu, r.series.t[i], r.series.l2[i]);
      }
      rep << "grid " << st.grid << " seed " << seed << " kind " << to_string(st.kind) << "\n";
      if (!st.complete) {
        rep << "partial: " << st.error << "\n";
        ex << res_tag(res) << " seed=" << seed << " incomplete: " << st.error << "\n";
        code = exit_numerical;
        continue;
      }
      const ScalingFit& f = *st.scaling;
      ex << res_tag(res) << " seed=" << seed << " alpha=" << fmt(f.alpha, 8) << " half_width=" << fmt(f.half_width, 4)
         << " r2=" << fmt(f.r2, 6);
      if (st.target) ex << " target=" << fmt(*st.target);
      ex << "\n";
      rep << "alpha = " << fmt(f.alpha) << " +- " << fmt(f.half_width, 3) << " (95%), r2 = " << fmt(f.r2) << "\n";
      if (code != exit_numerical) check_tolerance(c, st.target, f.alpha, "alpha", rep, code);
    }
  w.text("exponent.txt", ex.str());
  w.text("plot.gp",
         "set logscale y\nset datafile separator ','\nset xlabel 't'\nset ylabel '||g||'\n"
         "plot 'energy.csv' using 5:6 every ::1 with lines title 'energy'\n"
         "set logscale xy\nset xlabel 'nu'\nset ylabel 'rate'\n"
         "plot 'rates.csv' using 4:5 every ::1 with linespoints title 'fitted rate'\n");
  return code;
}

inline int run_abscissa_scaling(const ExperimentSpec& s, Writer& w, std::ostringstream& rep) {
  const Config& c = s.config;
  AbscissaStudyOptions opt;
  opt.route = c.str("run.route", "auto") == "dense" ? OperatorRoute::dense
              : c.str("run.route", "auto") == "modal" ? OperatorRoute::modal
                                                      : OperatorRoute::automatic;
  opt.wei_fields = static_cast<int>(c.integer("run.wei_fields", 20));
  opt.wei_times = static_cast<int>(c.integer("run.wei_times", 10));
  opt.seed = static_cast<unsigned>(s.seeds.front());
  opt.jobs = s.jobs;
  Csv tab(w.path("abscissa.csv"), "n1,n2,nu,psi,lambda,mode,lipschitz_ok,refined");
  Csv sweep(w.path("sweep.csv"), "n1,n2,nu,lambda,sigma");
  int code = exit_pass;
  for (auto res : s.resolutions) {
    const AbscissaStudy st = abscissa_scaling(s.preset, s.params, s.nus, res, opt);
    for (auto& row : st.rows) {
      const auto& r = row.result;
      tab.row(res.n1, res.n2, row.nu, r.psi, r.argmin, r.mode, r.lipschitz_ok ? 1 : 0, r.refined ? 1 : 0);
      for (size_t i = 0; i < r.lambdas.size(); ++i) sweep.row(res.n1, res.n2, row.nu, r.lambdas[i], r.sigmas[i]);
      for (auto& fl : r.flags) rep << "flag nu=" << row.nu << ": " << fl << "\n";
    }
    rep << "grid " << res_tag(res) << " route " << route_name(st.route) << "\n";
    rep << "slope log Psi / log nu = " << fmt(st.slope.slope) << " +- " << fmt(st.slope.half_width, 3) << "\n";
    check_tolerance(c, st.target, st.slope.slope, "slope", rep, code);
    if (st.wei) {
      const double lim = c.num("run.wei_limit", 1.001);
      rep << "wei max ratio = " << fmt(st.wei->max_ratio) << " (limit " << lim << ")\n";
      if (st.wei->max_ratio > lim) code = exit_acceptance;
    }
  }
  w.text("plot.gp",
         "set logscale xy\nset datafile separator ','\nset xlabel 'nu'\nset ylabel 'Psi'\n"
         "plot 'abscissa.csv' using 3:4 every ::1 with linespoints title 'Psi'\n");
  return code;
}

inline int run_class_membership(const ExperimentSpec& s, Writer& w, std::ostringstream& rep) {
  const Config& c = s.config;
  const std::vector<double> eps = c.has("run.eps") ? c.list("run.eps") : std::vector<double>{0.02, 0.05, 0.1};
  ChartOptions co;
  co.n_theta = static_cast<int>(c.integer("run.n_theta", co.n_theta));
  co.n_h = static_cast<int>(c.integer("run.n_h", co.n_h));
  const ClassMembership m = class_membership(eps, co, s.jobs);
  Csv tab(w.path("class.csv"), "eps,eps_unif,eps_trans");
  for (auto& r : m.rows) tab.row(r.eps, r.eps_unif, r.eps_trans);
  rep << "eps_unif ~ " << fmt(m.unif.slope) << " eps + " << fmt(m.unif.intercept) << ", r2 = " << fmt(m.unif.r2) << "\n";
  rep << "eps_trans ~ " << fmt(m.trans.slope) << " eps + " << fmt(m.trans.intercept) << ", r2 = " << fmt(m.trans.r2)
      << "\n";
  rep << "radial: eps_unif = " << fmt(m.radial_unif) << ", eps_trans = " << fmt(m.radial_trans) << "\n";
  int code = exit_pass;
  if (c.has("run.min_r2") && std::min(m.unif.r2, m.trans.r2) < c.num("run.min_r2")) code = exit_acceptance;
  w.text("plot.gp",
         "set datafile separator ','\nset xlabel 'eps'\n"
         "plot 'class.csv' using 1:2 every ::1 with linespoints title 'eps_unif', "
         "'' using 1:3 every ::1 with linespoints title 'eps_trans'\n");
  return code;
}

inline int run_example_cellular(const ExperimentSpec& s, Writer& w, std::ostringstream& rep) {
  const Config& c = s.config;
  const std::vector<double> deltas = c.has("run.delta") ? c.list("run.delta") : std::vector<double>{0.05, 0.03};
  const double gamma = c.num("run.gamma", 0.2);
  const double spacing = c.num("run.spacing", 0.0);
  Csv tab(w.path("cellular.csv"), "delta,gamma,nu,n,cells_across_delta,p0_in,l1_in,l1_p0_final,ratio");
  int code = exit_pass;
  for (auto res : s.resolutions) {
    std::vector<double> ratios;
    for (double d : deltas) {
      const CellularReport r = reproduce_example_cellular(d, gamma, res.n1, spacing, c.num("run.budget", 0.0));
      tab.row(r.delta, r.gamma, r.nu, r.resolution, r.cells_across_delta, r.p0_in, r.l1_in, r.l1_p0_final, r.ratio);
      rep << "delta " << d << ": nu = " << fmt(r.nu) << ", r = " << fmt(r.ratio) << ", P0 rho_in residual "
          << fmt(r.p0_in, 3) << "\n";
      if (r.p0_in > 1e-8) code = exit_acceptance;
      ratios.push_back(r.ratio);
    }
    if (c.has("run.floor") && ratios.front() < c.num("run.floor")) code = exit_acceptance;
    if (c.flag("run.check_trend", false))
      for (size_t i = 1; i < deltas.size(); ++i) {
        const bool up = (deltas[i] < deltas[i - 1]) == (ratios[i] > ratios[i - 1]);
        rep << "trend " << deltas[i - 1] << " -> " << deltas[i] << ": " << (up ? "PASS" : "FAIL") << "\n";
        if (!up) code = exit_acceptance;
      }
  }
  w.text("plot.gp",
         "set datafile separator ','\nset xlabel 'delta'\nset ylabel 'L1 ratio'\n"
         "plot 'cellular.csv' using 1:9 every ::1 with linespoints title 'r'\n");
  return code;
}

inline int run_example_elliptic(const ExperimentSpec& s, Writer& w, std::ostringstream& rep) {
  const Config& c = s.config;
  Csv tab(w.path("elliptic.csv"), "nu,delta,t,n,p0_in,ratio,floor");
  int code = exit_pass;
  for (auto res : s.resolutions)
    for (double nu : s.nus) {
      const EllipticReport r = reproduce_example_elliptic(nu, res.n1, c.num("run.spacing", 0.0), c.num("run.budget", 0.0));
      tab.row(r.nu, r.delta, r.t, r.resolution, r.p0_in, r.ratio, r.floor);
      rep << "nu " << nu << ": ratio = " << fmt(r.ratio) << " (floor " << fmt(r.floor) << "), P0 rho_in residual "
          << fmt(r.p0_in, 3) << "\n";
      if (r.ratio < r.floor || r.p0_in > 1e-8) code = exit_acceptance;
    }
  w.text("plot.gp",
         "set logscale y\nset datafile separator ','\nset xlabel 'nu'\n"
         "plot 'elliptic.csv' using 1:6 every ::1 with linespoints title 'ratio', '' using 1:7 every ::1 with lines "
         "title 'floor'\n");
  return code;
}

inline int run_homogenization(const ExperimentSpec& s, Writer& w, std::ostringstream& rep) {
  const Config& c = s.config;
  Csv tab(w.path("homog.csv"), "n1,n2,nu,t,rho_eta,rho0_eta");
  Csv sum(w.path("homog_summary.csv"), "n1,n2,nu,lambda_nu,t_start,t_end,sup_rho_eta,sup_rho0_eta,reference");
  for (auto res : s.resolutions)
    for (double nu : s.nus) {
      InitialDataOptions d;
      d.seed = s.seeds.front();
      const HomogenizationReport r = homogenization_check(
          s.preset, s.params, nu, c.num("run.alpha", 0.5), res, c.num("run.t_budget", 1.0 / nu),
          static_cast<int>(c.integer("run.samples", 64)), d, c.num("run.dt", 0.0));
      for (size_t i = 0; i < r.t.size(); ++i) tab.row(res.n1, res.n2, nu, r.t[i], r.rho_eta[i], r.rho0_eta[i]);
      sum.row(res.n1, res.n2, nu, r.lambda_nu, r.t_start, r.t_end, r.sup_rho_eta, r.sup_rho0_eta, r.reference);
      rep << "nu " << nu << ": sup ||rho - eta|| = " << fmt(r.sup_rho_eta) << " on [" << fmt(r.t_start) << ", "
          << fmt(r.t_end) << "], sup ||rho0 - eta|| = " << fmt(r.sup_rho0_eta) << "\n";
    }
  w.text("plot.gp",
         "set datafile separator ','\nset xlabel 't'\n"
         "plot 'homog.csv' using 4:5 every ::1 with lines title 'rho - eta', '' using 4:6 every ::1 with lines title "
         "'rho0 - eta'\n");
  return exit_pass;
}

inline int run_gcorr(const ExperimentSpec& s, Writer& w, std::ostringstream& rep) {
  const Config& c = s.config;
  std::vector<double> eps;
  if (c.has("run.eps")) eps = c.list("run.eps");
  Csv tab(w.path("gcorr.csv"), "eps,nu,t,gcorr");
  Csv sum(w.path("gcorr_summary.csv"), "eps,nu,sup,p0_share");
  std::vector<std::pair<double, double>> sups;
  for (auto res : s.resolutions)
    for (double nu : s.nus) {
      const std::vector<double> list = eps.empty() ? std::vector<double>{std::nan("")} : eps;
      for (double e : list) {
        Params p = s.params;
        if (!std::isnan(e)) p["eps"] = e;
        InitialDataOptions d;
        d.seed = s.seeds.front();
        const GcorrReport r = gcorr_smallness(s.preset, p, nu, c.num("run.t_end", 10.0), res,
                                              static_cast<int>(c.integer("run.samples", 32)), d, c.num("run.dt", 0.0));
        for (auto& [t, v] : r.series) tab.row(e, nu, t, v);
        sum.row(e, nu, r.sup, r.p0_share);
        rep << "eps " << e << " nu " << nu << ": sup ||g_corr|| / ||rho_in|| = " << fmt(r.sup) << "\n";
        sups.push_back({e, r.sup});
      }
    }
  if (sups.size() >= 2 && !std::isnan(sups[0].first)) {
    const double obs = sups[1].second / sups[0].second, lin = sups[1].first / sups[0].first;
    rep << "scaling ratio observed/linear = " << fmt(obs / lin) << "\n";
  }
  w.text("plot.gp",
         "set logscale y\nset datafile separator ','\nset xlabel 't'\n"
         "plot 'gcorr.csv' using 3:4 every ::1 with lines title 'g_corr'\n");
  return exit_pass;
}

}  // namespace detail

/// Dispatches one experiment, writing CSVs, report.txt and plot.gp into the output directory.
/// Exceptions are turned into exit codes; a report is written in every case.
inline RunOutcome run(const ExperimentSpec& s) {
  RunOutcome out;
  detail::Writer w{s.output, &out};
  std::ostringstream rep;
  rep << version_string << "\n";
  rep << "experiment " << s.kind << "\n\n[resolved configuration]\n" << s.config.render() << "\n[results]\n";
  const auto start = std::chrono::steady_clock::now();
  try {
    if (s.kind == "decay_scaling") out.exit_code = detail::run_decay_scaling(s, w, rep);
    else if (s.kind == "abscissa_scaling") out.exit_code = detail::run_abscissa_scaling(s, w, rep);
    else if (s.kind == "class_membership") out.exit_code = detail::run_class_membership(s, w, rep);
    else if (s.kind == "example_cellular") out.exit_code = detail::run_example_cellular(s, w, rep);
    else if (s.kind == "example_elliptic") out.exit_code = detail::run_example_elliptic(s, w, rep);
    else if (s.kind == "homogenization") out.exit_code = detail::run_homogenization(s, w, rep);
    else if (s.kind == "gcorr_smallness") out.exit_code = detail::run_gcorr(s, w, rep);
    else throw invalid("experiment.kind: unknown experiment '" + s.kind + "'");
  } catch (const Error& e) {
    rep << "error: " << e.what() << "\n";
    out.exit_code = e.kind() == ErrorKind::numerical ? exit_numerical : exit_usage;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rep << "\nstatus " << out.exit_code << "\nwall_seconds " << detail::fmt(secs, 4) << "\n";
  out.summary = rep.str();
  w.text("report.txt", out.summary);
  return out;
}

}  // namespace streamlab::lab
