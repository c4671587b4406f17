#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "streamlab.hpp"

using namespace streamlab;
namespace fs = std::filesystem;

namespace {

std::map<std::string, double> parse_params(const std::vector<std::string>& kv) {
  std::map<std::string, double> out;
  for (auto& s : kv) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw invalid("--param expects key=value, got '" + s + "'");
    try {
      out[s.substr(0, eq)] = std::stod(s.substr(eq + 1));
    } catch (const std::exception&) {
      throw invalid("--param " + s + ": value is not a number");
    }
  }
  return out;
}

// Leftover "--key value" or "--key=value" pairs become configuration overrides.
void apply_overrides(lab::Config& c, const std::vector<std::string>& rest) {
  for (size_t i = 0; i < rest.size(); ++i) {
    const std::string& a = rest[i];
    if (a.rfind("--", 0) != 0) throw invalid("unexpected argument '" + a + "'");
    std::string key = a.substr(2), value;
    if (auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.erase(eq);
    } else {
      if (i + 1 >= rest.size()) throw invalid("flag --" + key + " needs a value");
      value = rest[++i];
    }
    c.override_value(key, value);
  }
}

lab::Config load_or_empty(const std::string& path) { return path.empty() ? lab::Config{} : lab::Config::load(path); }

int run_experiment(lab::Config c) {
  const lab::ExperimentSpec spec = lab::make_spec(c);
  const lab::RunOutcome out = lab::run(spec);
  std::cout << out.summary;
  for (auto& f : out.files) std::cout << "wrote " << f << "\n";
  return out.exit_code;
}

struct GridArgs {
  std::string name = "radial_m2";
  std::vector<std::string> params;
  int n1 = 64, n2 = 128;
  double spacing = 0.0;

  void add(CLI::App* app) {
    app->add_option("--preset", name, "flow preset");
    app->add_option("--param", params, "preset parameter key=value (repeatable)");
    app->add_option("--n1", n1, "radial or x cells");
    app->add_option("--n2", n2, "angular or y cells");
    app->add_option("--spacing", spacing, "projector level spacing multiplier (0 = default)");
  }

  OperatorsPtr operators() const {
    auto H = preset(name, parse_params(params));
    auto grid = build_grid(H->domain, {n1, n2});
    std::optional<ActionAngleChart> chart;
    if (H->has_elliptic_cell && !grid->polar()) chart = build_chart(H);
    return build_operators(grid, H, build_projector(grid, H, chart ? &*chart : nullptr, spacing));
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Passive scalar advection-diffusion lab"};
  app.set_version_flag("--version", std::string(version_string));
  app.require_subcommand(1);

  auto* chart_cmd = app.add_subcommand("chart", "build an action-angle chart and write its table");
  std::string c_preset = "radial_m2", c_out;
  std::vector<std::string> c_params;
  ChartOptions copt;
  chart_cmd->add_option("--preset", c_preset, "flow preset");
  chart_cmd->add_option("--param", c_params, "preset parameter key=value (repeatable)");
  chart_cmd->add_option("--n-theta", copt.n_theta, "angular samples");
  chart_cmd->add_option("--n-h", copt.n_h, "levels");
  chart_cmd->add_option("--h-max", copt.h_max, "outermost level (0 = preset default)");
  chart_cmd->add_option("--out", c_out, "chart table path (default stdout)");

  auto* evolve_cmd = app.add_subcommand("evolve", "integrate one equation and write the norm history");
  GridArgs e_grid;
  e_grid.add(evolve_cmd);
  std::string e_kind = "full", e_method = "auto", e_out;
  double e_nu = 1e-3, e_t = 10.0, e_dt = 0.0, e_budget = 0.0;
  int e_samples = 64, e_kmax = 8;
  std::uint64_t e_seed = 7;
  bool e_keep_mean = false;
  evolve_cmd->add_option("--kind", e_kind, "full | model_perp | model_zero | coupled_split");
  evolve_cmd->add_option("--method", e_method, "auto | explicit | cn | modal");
  evolve_cmd->add_option("--nu", e_nu, "diffusivity");
  evolve_cmd->add_option("--t", e_t, "final time");
  evolve_cmd->add_option("--dt", e_dt, "step (0 = method default)");
  evolve_cmd->add_option("--samples", e_samples, "stored samples");
  evolve_cmd->add_option("--budget", e_budget, "wall-clock cap in seconds");
  evolve_cmd->add_option("--kmax", e_kmax, "highest angular mode of the initial data");
  evolve_cmd->add_option("--seed", e_seed, "initial data seed");
  evolve_cmd->add_flag("--keep-mean", e_keep_mean, "keep the streamline average of the initial data");
  evolve_cmd->add_option("--out", e_out, "CSV path (default stdout)");

  auto* ps_cmd = app.add_subcommand("pseudospec", "pseudospectral abscissa of L_perp at one nu");
  GridArgs p_grid;
  p_grid.n1 = 32;
  p_grid.n2 = 64;
  p_grid.add(ps_cmd);
  double p_nu = 1e-3;
  std::string p_route = "auto", p_out;
  ps_cmd->add_option("--nu", p_nu, "diffusivity");
  ps_cmd->add_option("--route", p_route, "auto | dense | modal");
  ps_cmd->add_option("--out", p_out, "sweep CSV path");

  std::string cfg_path;
  auto* study_cmd = app.add_subcommand("study", "run an experiment described by a config file");
  study_cmd->add_option("config", cfg_path, "config file")->required()->check(CLI::ExistingFile);
  study_cmd->allow_extras();

  std::string x_cfg;
  auto shorthand = [&](const char* name, const char* help) {
    auto* s = app.add_subcommand(name, help);
    s->add_option("config", x_cfg, "optional config file");
    s->allow_extras();
    return s;
  };
  auto* cell_cmd = shorthand("example-cellular", "cellular flow counterexample");
  auto* ell_cmd = shorthand("example-elliptic", "elliptic cell counterexample");
  auto* homog_cmd = shorthand("homog", "homogenization check");

  std::string r_dir;
  auto* report_cmd = app.add_subcommand("report", "print the report of a finished run");
  report_cmd->add_option("dir", r_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : lab::exit_usage;
  }

  try {
    if (*chart_cmd) {
      auto H = preset(c_preset, parse_params(c_params));
      const ActionAngleChart c = build_chart(H, copt);
      std::ofstream file;
      if (!c_out.empty()) {
        file.open(c_out);
        if (!file) throw invalid("cannot write '" + c_out + "'");
      }
      std::ostream& os = c_out.empty() ? std::cout : file;
      write_chart_table(c, os);
      std::cerr << "jacobian_residual " << c.jacobian_residual << "\n";
      return lab::exit_pass;
    }
    if (*evolve_cmd) {
      auto ops = e_grid.operators();
      lab::InitialDataOptions d;
      d.kmax = e_kmax;
      d.seed = e_seed;
      d.mean_free = !e_keep_mean;
      const ScalarField f = lab::broad_initial_data(*ops, d);
      StepPolicy pol;
      pol.dt = e_dt;
      pol.samples = e_samples;
      pol.budget = e_budget;
      pol.keep_fields = false;
      const Trajectory tr = solve({parse_kind(e_kind), ops, e_nu, parse_method(e_method)}, f, e_t, pol);
      std::ofstream file;
      if (!e_out.empty()) {
        file.open(e_out);
        if (!file) throw invalid("cannot write '" + e_out + "'");
      }
      tr.write_csv(e_out.empty() ? std::cout : file);
      std::cerr << "method " << to_string(tr.method) << " steps " << tr.t.size() - 1
                << (tr.truncated ? " truncated" : "") << "\n";
      return tr.truncated ? lab::exit_numerical : lab::exit_pass;
    }
    if (*ps_cmd) {
      const OperatorRoute route = p_route == "dense"   ? OperatorRoute::dense
                                  : p_route == "modal" ? OperatorRoute::modal
                                  : p_route == "auto"  ? OperatorRoute::automatic
                                                       : throw invalid("--route: expected auto, dense or modal");
      auto op = assemble_Lperp(p_grid.operators(), p_nu, route);
      const AbscissaResult r = pseudo_abscissa(*op);
      std::cout << std::setprecision(10) << "psi " << r.psi << "\nargmin " << r.argmin << "\nmode " << r.mode
                << "\nlipschitz_ok " << r.lipschitz_ok << "\n";
      for (auto& fl : r.flags) std::cout << "flag " << fl << "\n";
      if (!p_out.empty()) {
        std::ofstream os(p_out);
        if (!os) throw invalid("cannot write '" + p_out + "'");
        r.write_csv(os);
      }
      return lab::exit_pass;
    }
    if (*study_cmd) {
      lab::Config c = lab::Config::load(cfg_path);
      apply_overrides(c, study_cmd->remaining());
      return run_experiment(c);
    }
    for (auto [cmd, kind] : {std::pair{cell_cmd, "example_cellular"}, std::pair{ell_cmd, "example_elliptic"},
                             std::pair{homog_cmd, "homogenization"}}) {
      if (!*cmd) continue;
      lab::Config c = load_or_empty(x_cfg);
      c.set("experiment.kind", kind);
      if (!c.has("experiment.output")) c.set("experiment.output", std::string("out/") + kind);
      if (std::string(kind) == "example_cellular" && !c.has("grid.n1")) c.set("grid.n1", "1536");
      if (std::string(kind) == "example_elliptic") {
        if (!c.has("grid.n1")) c.set("grid.n1", "1024");
        if (!c.has("run.nu")) c.set("run.nu", "0.1");
      }
      apply_overrides(c, cmd->remaining());
      return run_experiment(c);
    }
    if (*report_cmd) {
      std::ifstream is(fs::path(r_dir) / "report.txt");
      if (!is) throw invalid("no report.txt in '" + r_dir + "'");
      std::cout << is.rdbuf();
      for (auto& e : fs::directory_iterator(r_dir))
        if (e.path().extension() == ".csv") {
          std::ifstream cs(e.path());
          std::string header;
          std::getline(cs, header);
          std::cout << e.path().filename().string() << ": " << header << "\n";
        }
      return lab::exit_pass;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::numerical ? lab::exit_numerical : lab::exit_usage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return lab::exit_numerical;
  }
  return lab::exit_usage;
}
