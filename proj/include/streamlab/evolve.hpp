#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseLU>
#include <chrono>
#include <functional>
#include <unsupported/Eigen/MatrixFunctions>

#include "streamlab/projection.hpp"

namespace streamlab {

enum class Kind { full, model_perp, model_zero, coupled_split };

enum class Method { automatic, explicit_rk3, crank_nicolson, modal };

inline const char* to_string(Kind k) {
  switch (k) {
    case Kind::full: return "full";
    case Kind::model_perp: return "model_perp";
    case Kind::model_zero: return "model_zero";
    case Kind::coupled_split: return "coupled_split";
  }
  return "?";
}

inline const char* to_string(Method m) {
  switch (m) {
    case Method::automatic: return "auto";
    case Method::explicit_rk3: return "explicit_rk3";
    case Method::crank_nicolson: return "crank_nicolson";
    case Method::modal: return "modal";
  }
  return "?";
}

inline Kind parse_kind(const std::string& s) {
  if (s == "full") return Kind::full;
  if (s == "model_perp") return Kind::model_perp;
  if (s == "model_zero") return Kind::model_zero;
  if (s == "coupled_split") return Kind::coupled_split;
  throw invalid("unknown evolution kind '" + s + "'");
}

inline Method parse_method(const std::string& s) {
  if (s == "auto") return Method::automatic;
  if (s == "explicit_rk3" || s == "rk3") return Method::explicit_rk3;
  if (s == "crank_nicolson" || s == "cn") return Method::crank_nicolson;
  if (s == "modal") return Method::modal;
  throw invalid("unknown time stepping method '" + s + "'");
}

/// Discrete operators shared by every kind: A (skew advection), L (Laplacian), W, P0.
struct Operators {
  GridPtr grid;
  HamiltonianPtr H;
  ProjectorPtr P;
  SparseMatrix A, L;
  double max_speed = 0.0;

  const Eigen::VectorXd& w() const { return grid->weights; }
  double l2(const Eigen::VectorXd& f) const { return weighted_norm(w(), f); }
  double h1(const Eigen::VectorXd& f) const { return grad_norm(L, w(), f); }
  double mass(const Eigen::VectorXd& f) const { return w().dot(f); }
  /// u.grad f - nu Lap f
  Eigen::VectorXd S(const Eigen::VectorXd& f, double nu) const { return A * f - nu * (L * f); }
};

using OperatorsPtr = std::shared_ptr<const Operators>;

inline OperatorsPtr build_operators(GridPtr grid, HamiltonianPtr H, ProjectorPtr P = nullptr) {
  auto o = std::make_shared<Operators>();
  o->grid = grid;
  o->H = H;
  o->P = P ? P : build_projector(grid, H);
  o->A = advection_matrix(*grid, *H);
  o->L = laplacian_matrix(*grid);
  for (const auto& p : grid->nodes) o->max_speed = std::max(o->max_speed, norm(H->grad(p)));
  return o;
}

struct EvolutionProblem {
  Kind kind = Kind::full;
  OperatorsPtr ops;
  double nu = 0.0;
  Method method = Method::automatic;
};

struct StepPolicy {
  /// 0 selects the method default: CFL limits for explicit stepping, 2 d1 / max|u| for
  /// Crank-Nicolson, the sample spacing for modal propagation.
  double dt = 0.0;
  double cfl_adv = 0.5;
  double cfl_diff = 0.9;
  /// Output times; empty gives 64 uniform samples on (0, t_end].
  std::vector<double> sample_times;
  int samples = 64;
  bool keep_fields = true;
  /// Wall-clock cap in seconds; the trajectory is truncated when exceeded. 0 disables.
  double budget = 0.0;
  long max_steps = 50000000;
};

struct Trajectory {
  Kind kind = Kind::full;
  Method method = Method::automatic;
  double nu = 0.0;
  /// Norm record at t = 0 and after every step.
  std::vector<double> t, l2, h1, mass;
  std::vector<double> dt;
  /// Fields at sample times (t = 0 included).
  std::vector<double> sample_t;
  std::vector<Eigen::VectorXd> fields;
  /// Largest ||P0 g|| / ||g|| seen before re-projection (model_perp) or ||P_perp eta|| / ||eta||
  /// (model_zero).
  double constraint_drift = 0.0;
  bool truncated = false;

  double l2_at(double tt) const {
    auto it = std::lower_bound(t.begin(), t.end(), tt - 1e-12 * std::max(1.0, tt));
    if (it == t.end()) throw invalid("time outside the trajectory");
    return l2[it - t.begin()];
  }

  void write_csv(std::ostream& os) const {
    os << "t,l2,h1,mass\n";
    os.precision(12);
    for (size_t i = 0; i < t.size(); ++i) os << t[i] << "," << l2[i] << "," << h1[i] << "," << mass[i] << "\n";
  }
};

namespace detail {

inline std::vector<double> resolve_samples(const StepPolicy& pol, double t_end) {
  std::vector<double> s = pol.sample_times;
  if (s.empty())
    for (int i = 1; i <= pol.samples; ++i) s.push_back(t_end * i / pol.samples);
  std::sort(s.begin(), s.end());
  s.erase(std::remove_if(s.begin(), s.end(), [&](double x) { return x <= 0 || x > t_end * (1 + 1e-12); }), s.end());
  s.erase(std::unique(s.begin(), s.end()), s.end());
  if (s.empty() || s.back() < t_end * (1 - 1e-12)) s.push_back(t_end);
  return s;
}

/// Fixed-step driver: advances `step(y, t, h)` and lands exactly on every sample time.
template <class Step, class Record>
void march(double /*t_end*/, double dt, const StepPolicy& pol, const std::vector<double>& samples, Step&& step,
           Record&& record, Trajectory& tr) {
  const auto start = std::chrono::steady_clock::now();
  double t = 0.0;
  long steps = 0;
  for (double ts : samples) {
    while (t < ts * (1 - 1e-13)) {
      double h = ts - t;
      if (h > dt * (1 + 1e-9)) h = dt;
      step(t, h);
      t = (h == ts - t) ? ts : t + h;
      tr.dt.push_back(h);
      record(t, false);
      if (++steps > pol.max_steps) throw numerical("step limit exceeded");
      if (pol.budget > 0 &&
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() > pol.budget) {
        tr.truncated = true;
        record(t, true);
        return;
      }
    }
    record(ts, true);
  }
}

}  // namespace detail

/// Rotationally symmetric flows on polar grids decouple into angular Fourier modes. Each mode
/// block of S = A - nu L is read off the assembled matrices, so the modal propagator is the exact
/// exponential of the same discrete operator.
class ModalPropagator {
 public:
  ModalPropagator(const Operators& ops, double nu, Kind kind) : ops_(ops), kind_(kind) {
    const Grid& g = *ops.grid;
    if (!g.polar()) throw invalid("modal propagation needs a polar grid");
    if (!ops.H->rotationally_symmetric) throw invalid("modal propagation needs a rotationally symmetric flow");
    n1_ = g.n1;
    n2_ = g.n2;
    blocks_.resize(n2_ / 2 + 1);
    const SparseMatrix S = ops.A - nu * ops.L;
    for (int k = 0; k <= n2_ / 2; ++k) {
      Eigen::MatrixXcd B = Eigen::MatrixXcd::Zero(n1_, n1_);
      for (int color = 0; color < 3; ++color) {
        Eigen::VectorXd re = Eigen::VectorXd::Zero(g.size()), im = re;
        for (int i = color; i < n1_; i += 3)
          for (int j = 0; j < n2_; ++j) {
            re[g.index(i, j)] = std::cos(k * g.angle(j));
            im[g.index(i, j)] = std::sin(k * g.angle(j));
          }
        const Eigen::VectorXd sr = S * re, si = S * im;
        for (int ip = 0; ip < n1_; ++ip)
          for (int i = std::max(0, ip - 1); i <= std::min(n1_ - 1, ip + 1); ++i)
            if (i % 3 == color) B(ip, i) = cplx(sr[g.index(ip, 0)], si[g.index(ip, 0)]);
      }
      blocks_[k] = B;
    }
  }

  bool active(int k) const {
    if (kind_ == Kind::model_perp) return k != 0;
    if (kind_ == Kind::model_zero) return k == 0;
    return true;
  }

  /// Selects the step; exponentials are formed lazily for the modes that carry data.
  void set_step(double dt) {
    auto& p = cache_[std::llround(dt * 1e15)];
    if (p.empty()) p.resize(blocks_.size());
    prop_ = &p;
    dt_ = dt;
  }

  Eigen::MatrixXcd forward(const Eigen::VectorXd& f) const {
    Eigen::FFT<double> fft;
    Eigen::MatrixXcd F(n1_, n2_ / 2 + 1);
    std::vector<double> in(n2_);
    std::vector<cplx> out;
    for (int i = 0; i < n1_; ++i) {
      for (int j = 0; j < n2_; ++j) in[j] = f[i * n2_ + j];
      fft.fwd(out, in);
      for (int k = 0; k <= n2_ / 2; ++k) F(i, k) = out[k];
    }
    return F;
  }

  Eigen::VectorXd inverse(const Eigen::MatrixXcd& F) const {
    Eigen::FFT<double> fft;
    Eigen::VectorXd f(n1_ * n2_);
    std::vector<cplx> in(n2_), out;
    for (int i = 0; i < n1_; ++i) {
      for (int k = 0; k <= n2_ / 2; ++k) in[k] = F(i, k);
      for (int k = n2_ / 2 + 1; k < n2_; ++k) in[k] = std::conj(F(i, n2_ - k));
      fft.inv(out, in);
      for (int j = 0; j < n2_; ++j) f[i * n2_ + j] = out[j].real();
    }
    return f;
  }

  void advance(Eigen::MatrixXcd& F) {
    const double floor = 1e-28 * F.squaredNorm();
    for (int k = 0; k <= n2_ / 2; ++k) {
      if (!active(k)) continue;
      if (F.col(k).squaredNorm() <= floor) {
        F.col(k).setZero();
        continue;
      }
      auto& E = (*prop_)[k];
      if (E.size() == 0) E = (-dt_ * blocks_[k]).exp();
      F.col(k) = E * F.col(k);
    }
  }

  const Eigen::MatrixXcd& block(int k) const { return blocks_.at(k); }

 private:
  const Operators& ops_;
  Kind kind_;
  int n1_ = 0, n2_ = 0;
  std::vector<Eigen::MatrixXcd> blocks_;
  std::map<long long, std::vector<Eigen::MatrixXcd>> cache_;
  std::vector<Eigen::MatrixXcd>* prop_ = nullptr;
  double dt_ = 0.0;
};

/// Crank-Nicolson solvers for the three operators
///   full:       S = A - nu L
///   model_perp: P_perp S P_perp (Woodbury correction around I + dt/2 S)
///   model_zero: -nu P0 L P0, solved on the level coefficients.
class CrankNicolson {
 public:
  CrankNicolson(const Operators& ops, double nu, double dt) : ops_(ops), nu_(nu), dt_(dt) {
    const int n = ops.grid->size();
    Eigen::SparseMatrix<double> I(n, n);
    I.setIdentity();
    Eigen::SparseMatrix<double> M = I + (0.5 * dt) * Eigen::SparseMatrix<double>(ops.A - nu * ops.L);
    lu_.analyzePattern(M);
    lu_.factorize(M);
    if (lu_.info() != Eigen::Success) throw numerical("Crank-Nicolson factorisation failed");
  }

  double dt() const { return dt_; }

  /// (I + dt/2 S) y+ = (I - dt/2 S) y + dt/2 (F0 + F1)
  Eigen::VectorXd full(const Eigen::VectorXd& y, const Eigen::VectorXd* F = nullptr) const {
    Eigen::VectorXd rhs = y - 0.5 * dt_ * ops_.S(y, nu_);
    if (F) rhs += 0.5 * dt_ * *F;
    return lu_.solve(rhs);
  }

  Eigen::VectorXd perp(const Eigen::VectorXd& y, const Eigen::VectorXd* F = nullptr) {
    prepare_perp();
    const auto& P = *ops_.P;
    Eigen::VectorXd rhs = y - 0.5 * dt_ * P.Pperp(ops_.S(P.Pperp(y), nu_));
    if (F) rhs += 0.5 * dt_ * *F;
    const Eigen::VectorXd x0 = lu_.solve(rhs);
    const Eigen::VectorXd corr = Z_ * cap_.solve(apply_Vt(x0));
    return x0 + 0.5 * dt_ * corr;
  }

  /// Level coefficients c+ for eta = B c; `Fc` is B^T W (F0 + F1).
  Eigen::VectorXd zero(const Eigen::VectorXd& c, const Eigen::VectorXd* Fc = nullptr) {
    prepare_zero();
    Eigen::VectorXd rhs = ops_.P->G * c + 0.5 * dt_ * nu_ * (K_ * c);
    if (Fc) rhs += 0.5 * dt_ * *Fc;
    return zlu_.solve(rhs);
  }

 private:
  Eigen::VectorXd apply_Q(const Eigen::VectorXd& x) const { return ops_.P->coefficients(x); }

  /// V^T x = [Q S x - Q S B Q x ; Q x] with Q = G^-1 B^T W.
  Eigen::VectorXd apply_Vt(const Eigen::VectorXd& x) const {
    const int r = ops_.P->basis_size();
    Eigen::VectorXd out(2 * r);
    const Eigen::VectorXd qx = apply_Q(x);
    out.head(r) = apply_Q(ops_.S(x, nu_)) - QSB_ * qx;
    out.tail(r) = qx;
    return out;
  }

  void prepare_perp() {
    if (perp_ready_) return;
    const auto& P = *ops_.P;
    if (P.identity) throw invalid("model_perp is empty for flows without streamline cells");
    const int r = P.basis_size();
    const int n = ops_.grid->size();
    Eigen::MatrixXd U(n, 2 * r);
    const Eigen::MatrixXd B = Eigen::MatrixXd(P.B);
    U.leftCols(r) = B;
    for (int c = 0; c < r; ++c) U.col(r + c) = ops_.S(B.col(c), nu_);
    QSB_.resize(r, r);
    for (int c = 0; c < r; ++c) QSB_.col(c) = apply_Q(U.col(r + c));
    Z_.resize(n, 2 * r);
    for (int c = 0; c < 2 * r; ++c) Z_.col(c) = lu_.solve(U.col(c));
    Eigen::MatrixXd C = Eigen::MatrixXd::Identity(2 * r, 2 * r);
    for (int c = 0; c < 2 * r; ++c) C.col(c) -= 0.5 * dt_ * apply_Vt(Z_.col(c));
    cap_.compute(C);
    perp_ready_ = true;
  }

  void prepare_zero() {
    if (zero_ready_) return;
    const auto& P = *ops_.P;
    if (P.identity) throw invalid("model_zero needs streamline cells");
    const Eigen::MatrixXd B = Eigen::MatrixXd(P.B);
    K_ = B.transpose() * ops_.w().asDiagonal() * (ops_.L * B);
    K_ = 0.5 * (K_ + K_.transpose()).eval();
    const Eigen::MatrixXd G = Eigen::MatrixXd(P.G);
    zlu_.compute(G - 0.5 * dt_ * nu_ * K_);
    zero_ready_ = true;
  }

  const Operators& ops_;
  double nu_, dt_;
  Eigen::SparseLU<Eigen::SparseMatrix<double>, Eigen::COLAMDOrdering<int>> lu_;
  bool perp_ready_ = false, zero_ready_ = false;
  Eigen::MatrixXd Z_, QSB_, K_;
  Eigen::PartialPivLU<Eigen::MatrixXd> cap_, zlu_;

 public:
  const Eigen::MatrixXd& level_stiffness() {
    prepare_zero();
    return K_;
  }
};

inline Method choose_method(const EvolutionProblem& p) {
  if (p.method != Method::automatic) return p.method;
  const auto& o = *p.ops;
  if (o.grid->polar() && o.H->rotationally_symmetric && p.kind != Kind::coupled_split) return Method::modal;
  if (!o.grid->polar()) return Method::explicit_rk3;
  return Method::crank_nicolson;
}

inline double explicit_dt(const Operators& o, double nu, const StepPolicy& pol) {
  const double dx = o.grid->min_spacing();
  double dt = std::numeric_limits<double>::infinity();
  if (o.max_speed > 0) dt = pol.cfl_adv * dx / o.max_speed;
  if (nu > 0) dt = std::min(dt, pol.cfl_diff * dx * dx / (4.0 * nu));
  if (!std::isfinite(dt)) throw invalid("no time scale: zero velocity and zero diffusivity");
  return dt;
}

/// Evolves f_in to t_end. Energy is checked after every unforced step: growth beyond 1e-9
/// relative aborts the run.
inline Trajectory solve(const EvolutionProblem& prob, const ScalarField& f_in, double t_end, const StepPolicy& pol = {}) {
  if (!prob.ops) throw invalid("evolution problem has no operators");
  const Operators& o = *prob.ops;
  if (f_in.grid != o.grid && f_in.size() != o.grid->size()) throw invalid("initial field lives on another grid");
  if (!(t_end > 0)) throw invalid("t_end must be positive");
  if (prob.nu < 0) throw invalid("diffusivity must be nonnegative");
  if (prob.nu == 0 && prob.kind != Kind::full) throw invalid("nu = 0 is only allowed for kind full");
  const auto& P = *o.P;
  const double n_in = o.l2(f_in.values);
  if (prob.kind == Kind::model_perp && o.l2(P.P0(f_in.values)) > 1e-8 * std::max(n_in, 1e-300))
    throw invalid("model_perp needs initial data with vanishing streamline average");
  if (prob.kind == Kind::model_zero && o.l2(P.Pperp(f_in.values)) > 1e-8 * std::max(n_in, 1e-300))
    throw invalid("model_zero needs initial data constant on streamlines");

  Trajectory tr;
  tr.kind = prob.kind;
  tr.nu = prob.nu;
  tr.method = choose_method(prob);
  const auto samples = detail::resolve_samples(pol, t_end);

  Eigen::VectorXd y = f_in.values;
  double last_l2 = n_in;
  auto record = [&](double t, bool sample) {
    if (!sample) {
      const double e = o.l2(y);
      if (e > last_l2 * (1 + 1e-9) + 1e-300) throw numerical("energy increased during a step: unstable time step");
      last_l2 = e;
      tr.t.push_back(t);
      tr.l2.push_back(e);
      tr.h1.push_back(o.h1(y));
      tr.mass.push_back(o.mass(y));
    } else if (pol.keep_fields) {
      if (tr.sample_t.empty() || tr.sample_t.back() < t) {
        tr.sample_t.push_back(t);
        tr.fields.push_back(y);
      }
    } else if (tr.sample_t.empty() || tr.sample_t.back() < t) {
      tr.sample_t.push_back(t);
    }
  };
  tr.t.push_back(0.0);
  tr.l2.push_back(n_in);
  tr.h1.push_back(o.h1(y));
  tr.mass.push_back(o.mass(y));
  record(0.0, true);

  const double nu = prob.nu;
  switch (tr.method) {
    case Method::modal: {
      if (prob.kind == Kind::coupled_split) throw invalid("coupled_split is not available with modal propagation");
      ModalPropagator M(o, nu, prob.kind);
      double dt = pol.dt > 0 ? pol.dt : samples.front();
      for (size_t i = 1; i < samples.size(); ++i) dt = std::min(dt, samples[i] - samples[i - 1]);
      Eigen::MatrixXcd F = M.forward(y);
      detail::march(
          t_end, dt, pol, samples,
          [&](double, double h) {
            M.set_step(h);
            M.advance(F);
            y = M.inverse(F);
          },
          record, tr);
      break;
    }
    case Method::crank_nicolson: {
      const double dt = pol.dt > 0 ? pol.dt : 2.0 * o.grid->d1 / std::max(o.max_speed, 1e-12);
      std::map<long long, std::unique_ptr<CrankNicolson>> cache;
      auto solver = [&](double h) -> CrankNicolson& {
        const long long key = std::llround(h * 1e15);
        auto& s = cache[key];
        if (!s) s = std::make_unique<CrankNicolson>(o, nu, h);
        return *s;
      };
      Eigen::VectorXd c;
      Eigen::VectorXd yp, y0;
      if (prob.kind == Kind::model_zero) c = P.coefficients(y);
      if (prob.kind == Kind::coupled_split) {
        y0 = P.P0(y);
        yp = y - y0;
      }
      detail::march(
          t_end, dt, pol, samples,
          [&](double, double h) {
            auto& cn = solver(h);
            switch (prob.kind) {
              case Kind::full: y = cn.full(y); break;
              case Kind::model_perp: {
                y = cn.perp(y);
                const double drift = o.l2(P.P0(y)) / std::max(o.l2(y), 1e-300);
                tr.constraint_drift = std::max(tr.constraint_drift, drift);
                y = P.Pperp(y);
                break;
              }
              case Kind::model_zero: {
                c = cn.zero(c);
                y = P.expand(c);
                break;
              }
              case Kind::coupled_split: {
                const Eigen::VectorXd s = yp + y0;
                const Eigen::VectorXd s1 = cn.full(s);
                const Eigen::VectorXd Ss = o.S(s, nu) + o.S(s1, nu);
                const Eigen::VectorXd p0 = P.P0(Ss);
                yp -= 0.5 * h * (Ss - p0);
                y0 -= 0.5 * h * p0;
                y = yp + y0;
                break;
              }
            }
          },
          record, tr);
      break;
    }
    case Method::explicit_rk3: {
      const double dt = pol.dt > 0 ? pol.dt : explicit_dt(o, nu, pol);
      std::function<Eigen::VectorXd(const Eigen::VectorXd&)> rhs;
      switch (prob.kind) {
        case Kind::full:
        case Kind::coupled_split: rhs = [&](const Eigen::VectorXd& v) { return Eigen::VectorXd(-o.S(v, nu)); }; break;
        case Kind::model_perp:
          rhs = [&](const Eigen::VectorXd& v) { return Eigen::VectorXd(-P.Pperp(o.S(P.Pperp(v), nu))); };
          break;
        case Kind::model_zero:
          rhs = [&](const Eigen::VectorXd& v) { return Eigen::VectorXd(nu * P.P0(o.L * P.P0(v))); };
          break;
      }
      detail::march(
          t_end, dt, pol, samples,
          [&](double, double h) {
            const Eigen::VectorXd y1 = y + h * rhs(y);
            const Eigen::VectorXd y2 = 0.75 * y + 0.25 * (y1 + h * rhs(y1));
            y = y / 3.0 + (2.0 / 3.0) * (y2 + h * rhs(y2));
            if (prob.kind == Kind::model_perp) {
              tr.constraint_drift = std::max(tr.constraint_drift, o.l2(P.P0(y)) / std::max(o.l2(y), 1e-300));
              y = P.Pperp(y);
            } else if (prob.kind == Kind::model_zero) {
              tr.constraint_drift = std::max(tr.constraint_drift, o.l2(P.Pperp(y)) / std::max(o.l2(y), 1e-300));
              y = P.P0(y);
            }
          },
          record, tr);
      break;
    }
    case Method::automatic: break;
  }
  return tr;
}

/// (t, ||f||, ||grad f||) from the per-step record.
struct EnergySeries {
  std::vector<double> t, l2, h1;
};

inline EnergySeries energy_series(const Trajectory& tr) { return {tr.t, tr.l2, tr.h1}; }

/// ||rho - P0 rho - g|| at the common sample times of a full run and a model_perp run.
inline std::vector<std::pair<double, double>> g_corr_series(const Trajectory& full, const Trajectory& model,
                                                            const Operators& ops) {
  if (full.kind != Kind::full || model.kind != Kind::model_perp) throw invalid("g_corr needs a full and a model_perp run");
  if (full.sample_t.size() != model.sample_t.size() || full.fields.size() != full.sample_t.size() ||
      model.fields.size() != model.sample_t.size())
    throw invalid("sample times of the two runs do not match");
  std::vector<std::pair<double, double>> out;
  for (size_t i = 0; i < full.sample_t.size(); ++i) {
    if (std::abs(full.sample_t[i] - model.sample_t[i]) > 1e-12 * std::max(1.0, full.sample_t[i]))
      throw invalid("sample times of the two runs do not match");
    const Eigen::VectorXd& rho = full.fields[i];
    out.push_back({full.sample_t[i], ops.l2(ops.P->Pperp(rho) - model.fields[i])});
  }
  return out;
}

struct ExpansionResult {
  double eps = 0.0;
  int depth = 0;
  /// perp[n] and zero[n] hold rho_perp^(n) and rho_0^(n).
  std::vector<Trajectory> perp, zero;
  double rho_in_norm = 0.0;
};

/// Cascade g = rho_perp^(0), eta = rho_0^(0) and the forced levels n = 1..N, all advanced together
/// with Crank-Nicolson; level n takes its forcing (nu/eps) P Lap rho^(n-1) at both ends of the step.
inline ExpansionResult solve_expansion(OperatorsPtr ops, const ScalarField& rho_in, double nu, double eps, int N,
                                       double t_end, StepPolicy pol = {}) {
  if (!(eps > 0 && eps < 0.25)) throw invalid("eps must lie in (0, 1/4)");
  if (!(eps * std::sqrt(8.0 / (1.0 - eps)) < 1.0)) throw invalid("series condition eps sqrt(8/(1-eps)) < 1 fails");
  if (N < 0 || N > 6) throw invalid("expansion depth must lie in [0, 6]");
  if (!(nu > 0)) throw invalid("diffusivity must be positive");
  const Operators& o = *ops;
  const auto& P = *o.P;
  if (P.identity) throw invalid("expansion needs streamline cells");
  ExpansionResult res;
  res.eps = eps;
  res.depth = N;
  res.rho_in_norm = o.l2(rho_in.values);
  const int levels = N + 1;
  std::vector<Eigen::VectorXd> yp(levels, Eigen::VectorXd::Zero(rho_in.size()));
  std::vector<Eigen::VectorXd> c0(levels, Eigen::VectorXd::Zero(P.basis_size()));
  yp[0] = P.Pperp(rho_in.values);
  c0[0] = P.coefficients(rho_in.values);
  res.perp.resize(levels);
  res.zero.resize(levels);
  auto push = [&](double t, bool sample) {
    for (int n = 0; n < levels; ++n) {
      const Eigen::VectorXd z = P.expand(c0[n]);
      for (auto* pr : {&res.perp[n], &res.zero[n]}) {
        const Eigen::VectorXd& v = pr == &res.perp[n] ? yp[n] : z;
        if (!sample) {
          pr->t.push_back(t);
          pr->l2.push_back(o.l2(v));
          pr->h1.push_back(o.h1(v));
          pr->mass.push_back(o.mass(v));
        } else if (pr->sample_t.empty() || pr->sample_t.back() < t) {
          pr->sample_t.push_back(t);
          if (pol.keep_fields) pr->fields.push_back(v);
        }
      }
    }
  };
  for (int n = 0; n < levels; ++n) {
    res.perp[n].kind = Kind::model_perp;
    res.zero[n].kind = Kind::model_zero;
    res.perp[n].method = res.zero[n].method = Method::crank_nicolson;
    res.perp[n].nu = res.zero[n].nu = nu;
  }
  push(0.0, false);
  push(0.0, true);
  const double dt = pol.dt > 0 ? pol.dt : 2.0 * o.grid->d1 / std::max(o.max_speed, 1e-12);
  std::map<long long, std::unique_ptr<CrankNicolson>> cache;
  const double fscale = nu / eps;
  Trajectory dummy;
  detail::march(
      t_end, dt, pol, detail::resolve_samples(pol, t_end),
      [&](double, double h) {
        auto& s = cache[std::llround(h * 1e15)];
        if (!s) s = std::make_unique<CrankNicolson>(o, nu, h);
        std::vector<Eigen::VectorXd> old_p = yp, old_z(levels);
        for (int n = 0; n < levels; ++n) old_z[n] = P.expand(c0[n]);
        for (int n = 0; n < levels; ++n) {
          if (n == 0) {
            yp[0] = P.Pperp(s->perp(yp[0]));
            c0[0] = s->zero(c0[0]);
            continue;
          }
          const Eigen::VectorXd znew = P.expand(c0[n - 1]);
          const Eigen::VectorXd Fp = fscale * P.Pperp(o.L * (old_z[n - 1] + znew));
          yp[n] = P.Pperp(s->perp(yp[n], &Fp));
          const Eigen::VectorXd Fz = fscale * (P.BtW * (o.L * (old_p[n - 1] + yp[n - 1])));
          c0[n] = s->zero(c0[n], &Fz);
        }
      },
      [&](double t, bool sample) { push(t, sample); }, dummy);
  for (int n = 0; n < levels; ++n) res.perp[n].dt = res.zero[n].dt = dummy.dt;
  return res;
}

}  // namespace streamlab
