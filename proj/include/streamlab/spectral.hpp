#pragma once

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <numeric>

#include "streamlab/evolve.hpp"
#include "streamlab/hamiltonian_classes.hpp"

namespace streamlab {

enum class OperatorRoute { automatic, dense, modal };

/// L_perp = P_perp (u.grad - nu Lap) P_perp on the discrete P_perp-range. The dense route stores
/// the matrix in a weighted-orthonormal basis of the range; the modal route (rotationally
/// symmetric flows on polar grids) stores one ring-space block per angular mode k >= 1, scaled by
/// the square roots of the ring weights so the blocks act in the Euclidean product.
class DiscreteOperator {
 public:
  OperatorsPtr ops;
  double nu = 0.0;
  OperatorRoute route = OperatorRoute::dense;
  int dim = 0;
  Eigen::MatrixXd M;
  std::vector<Eigen::MatrixXcd> blocks;
  /// ||A + A^T|| / ||A|| and ||D - D^T|| / ||D|| for the advection and diffusion parts.
  double skew_residual = 0.0, symmetry_residual = 0.0;
  /// Largest diffusion eigenvalue times nu, the sanity cap for the abscissa.
  double diffusion_cap = 0.0;

  Eigen::VectorXd apply(const Eigen::VectorXd& f) const {
    const auto& P = *ops->P;
    return P.Pperp(ops->S(P.Pperp(f), nu));
  }

  /// Imaginary extent of the numerical range of each block (or of M).
  std::vector<std::pair<double, double>> imaginary_ranges() const {
    std::vector<std::pair<double, double>> out;
    auto range = [](const Eigen::MatrixXcd& B) {
      const Eigen::MatrixXcd Hm = (B - B.adjoint()) / cplx(0.0, 2.0);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(Hm, Eigen::EigenvaluesOnly);
      return std::make_pair(es.eigenvalues().minCoeff(), es.eigenvalues().maxCoeff());
    };
    if (route == OperatorRoute::modal)
      for (const auto& B : blocks) out.push_back(range(B));
    else
      out.push_back(range(M.cast<cplx>()));
    return out;
  }
};

using DiscreteOperatorPtr = std::shared_ptr<const DiscreteOperator>;

inline DiscreteOperatorPtr assemble_Lperp(OperatorsPtr ops, double nu, OperatorRoute route = OperatorRoute::automatic,
                                          int dense_cap = 4096) {
  if (nu < 0) throw invalid("diffusivity must be nonnegative");
  const auto& o = *ops;
  const auto& P = *o.P;
  if (P.identity) throw invalid("L_perp needs streamline cells");
  auto D = std::make_shared<DiscreteOperator>();
  D->ops = ops;
  D->nu = nu;
  const Grid& g = *o.grid;
  if (route == OperatorRoute::automatic)
    route = (g.polar() && o.H->rotationally_symmetric) ? OperatorRoute::modal : OperatorRoute::dense;
  D->route = route;
  const Eigen::VectorXd sw = o.w().cwiseSqrt(), isw = sw.cwiseInverse();

  if (route == OperatorRoute::modal) {
    ModalPropagator adv(o, 0.0, Kind::full), dif(o, 1.0, Kind::full);
    Eigen::VectorXd rw(g.n1);
    for (int i = 0; i < g.n1; ++i) rw[i] = std::sqrt(o.w()[g.index(i, 0)]);
    const Eigen::MatrixXd Ds = rw.asDiagonal(), Di = rw.cwiseInverse().asDiagonal();
    double askew = 0, anorm = 0, dsym = 0, dnorm = 0;
    for (int k = 1; k <= g.n2 / 2; ++k) {
      const Eigen::MatrixXcd Ak = Ds * adv.block(k) * Di;
      const Eigen::MatrixXcd Lk = Ds * (dif.block(k) - adv.block(k)) * Di;
      askew = std::max(askew, (Ak + Ak.adjoint()).norm());
      anorm = std::max(anorm, Ak.norm());
      dsym = std::max(dsym, (Lk - Lk.adjoint()).norm());
      dnorm = std::max(dnorm, Lk.norm());
      D->blocks.push_back(Ak + nu * Lk);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(0.5 * (Lk + Lk.adjoint()), Eigen::EigenvaluesOnly);
      D->diffusion_cap = std::max(D->diffusion_cap, nu * es.eigenvalues().maxCoeff());
    }
    D->skew_residual = anorm > 0 ? askew / anorm : 0.0;
    D->symmetry_residual = dnorm > 0 ? dsym / dnorm : 0.0;
    D->dim = g.n1 * (g.n2 - 1);
    return D;
  }

  const int n = g.size(), r = P.basis_size();
  if (n - r > dense_cap) throw invalid("range dimension exceeds the dense cap");
  // Weighted-orthonormal complement of the level functions.
  Eigen::MatrixXd Y = sw.asDiagonal() * Eigen::MatrixXd(P.B);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(Y);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd C = Q.rightCols(n - r);
  Q.resize(0, 0);
  const Eigen::MatrixXd A = sw.asDiagonal() * Eigen::MatrixXd(Eigen::SparseMatrix<double>(o.A)) * isw.asDiagonal();
  const Eigen::MatrixXd L = -(sw.asDiagonal() * Eigen::MatrixXd(Eigen::SparseMatrix<double>(o.L)) * isw.asDiagonal());
  D->skew_residual = (A + A.transpose()).norm() / std::max(A.norm(), 1e-300);
  D->symmetry_residual = (L - L.transpose()).norm() / std::max(L.norm(), 1e-300);
  const Eigen::MatrixXd Ls = 0.5 * (L + L.transpose());
  D->M = C.transpose() * (A + nu * Ls) * C;
  D->dim = n - r;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Ls, Eigen::EigenvaluesOnly);
  D->diffusion_cap = nu * es.eigenvalues().maxCoeff();
  return D;
}

/// Smallest singular value of a complex upper Hessenberg matrix H - i lambda by inverse iteration
/// on (A A^H)^-1 with an O(n^2) pivoted Hessenberg LU per shift.
class HessenbergSigma {
 public:
  explicit HessenbergSigma(const Eigen::MatrixXd& M) {
    Eigen::HessenbergDecomposition<Eigen::MatrixXd> hd(M);
    H_ = hd.matrixH();
    n_ = static_cast<int>(M.rows());
  }

  double operator()(double lambda, int max_it = 400, double tol = 1e-10) {
    factor(lambda);
    if (v_.size() != n_) {
      std::mt19937_64 rng(11);
      std::normal_distribution<double> nd;
      v_.resize(n_);
      for (int i = 0; i < n_; ++i) v_[i] = cplx(nd(rng), nd(rng));
      v_.normalize();
    }
    double prev = std::numeric_limits<double>::infinity(), s = prev;
    for (int it = 0; it < max_it; ++it) {
      Eigen::VectorXcd x = v_;
      solve(x);
      s = 1.0 / x.norm();
      solve_adjoint(x);
      v_ = x / x.norm();
      if (std::abs(prev - s) <= tol * s) break;
      prev = s;
    }
    return s;
  }

 private:
  void factor(double lambda) {
    U_ = H_.cast<cplx>();
    for (int i = 0; i < n_; ++i) U_(i, i) -= cplx(0.0, lambda);
    m_.assign(n_, 0.0);
    swap_.assign(n_, 0);
    for (int k = 0; k + 1 < n_; ++k) {
      if (std::abs(U_(k + 1, k)) > std::abs(U_(k, k))) {
        U_.row(k).tail(n_ - k).swap(U_.row(k + 1).tail(n_ - k));
        swap_[k] = 1;
      }
      const cplx piv = U_(k, k);
      const cplx m = piv == cplx(0.0) ? cplx(0.0) : U_(k + 1, k) / piv;
      m_[k] = m;
      U_.row(k + 1).tail(n_ - k) -= m * U_.row(k).tail(n_ - k);
    }
    for (int i = 0; i < n_; ++i)
      if (U_(i, i) == cplx(0.0)) U_(i, i) = cplx(1e-300);
  }
  void solve(Eigen::VectorXcd& b) const {
    for (int k = 0; k + 1 < n_; ++k) {
      if (swap_[k]) std::swap(b[k], b[k + 1]);
      b[k + 1] -= m_[k] * b[k];
    }
    U_.triangularView<Eigen::Upper>().solveInPlace(b);
  }
  void solve_adjoint(Eigen::VectorXcd& b) const {
    U_.adjoint().triangularView<Eigen::Lower>().solveInPlace(b);
    for (int k = n_ - 2; k >= 0; --k) {
      b[k] -= std::conj(m_[k]) * b[k + 1];
      if (swap_[k]) std::swap(b[k], b[k + 1]);
    }
  }

  Eigen::MatrixXd H_;
  int n_ = 0;
  Eigen::MatrixXcd U_;
  std::vector<cplx> m_;
  std::vector<char> swap_;
  Eigen::VectorXcd v_;
};

inline double sigma_min_dense(const Eigen::MatrixXcd& A) {
  Eigen::BDCSVD<Eigen::MatrixXcd> svd(A);
  return svd.singularValues().minCoeff();
}

struct AbscissaOptions {
  int coarse = 64;
  int rounds = 3;
  int refine = 8;
  /// Golden-section iterations after the last round.
  int golden = 40;
};

struct AbscissaResult {
  double nu = 0.0;
  double psi = 0.0;
  double argmin = 0.0;
  /// Angular mode of the minimiser on the modal route (0 on the dense route).
  int mode = 0;
  std::vector<double> lambdas, sigmas;
  bool lipschitz_ok = true;
  bool refined = true;
  std::vector<std::string> flags;

  void write_csv(std::ostream& os) const {
    os.precision(12);
    os << "lambda,sigma_min\n";
    for (size_t i = 0; i < lambdas.size(); ++i) os << lambdas[i] << "," << sigmas[i] << "\n";
  }
};

namespace detail {

/// Coarse sweep plus refinement rounds and a golden-section polish of sigma(lambda) on [a, b].
template <class Sigma>
void sweep(Sigma&& sigma, double a, double b, const AbscissaOptions& opt, AbscissaResult& res, int mode) {
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < opt.coarse; ++i) {
    const double l = opt.coarse == 1 ? 0.5 * (a + b) : a + (b - a) * i / (opt.coarse - 1);
    pts.push_back({l, sigma(l)});
  }
  double spacing = opt.coarse > 1 ? (b - a) / (opt.coarse - 1) : (b - a);
  for (int round = 0; round < opt.rounds; ++round) {
    std::sort(pts.begin(), pts.end());
    std::vector<size_t> order(pts.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) { return pts[x].second < pts[y].second; });
    const double c = pts[order[0]].first;
    const double lo = std::max(a, c - spacing), hi = std::min(b, c + spacing);
    for (int i = 0; i < opt.refine; ++i) {
      const double l = lo + (hi - lo) * (i + 0.5) / opt.refine;
      pts.push_back({l, sigma(l)});
    }
    spacing = (hi - lo) / opt.refine;
  }
  std::sort(pts.begin(), pts.end());
  // Lipschitz check: sigma_min(op - i lambda) is 1-Lipschitz in lambda.
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    const double dl = pts[i + 1].first - pts[i].first, ds = std::abs(pts[i + 1].second - pts[i].second);
    if (ds > dl * (1 + 1e-6) + 1e-9 * std::max(1.0, pts[i].second)) res.lipschitz_ok = false;
  }
  auto best = std::min_element(pts.begin(), pts.end(), [](auto& x, auto& y) { return x.second < y.second; });
  double lo = std::max(a, best->first - spacing), hi = std::min(b, best->first + spacing);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
  double f1 = sigma(x1), f2 = sigma(x2);
  int it = 0;
  for (; it < opt.golden && hi - lo > 1e-12 * std::max(1.0, std::abs(lo)); ++it) {
    if (f1 < f2) {
      hi = x2; x2 = x1; f2 = f1; x1 = hi - gr * (hi - lo); f1 = sigma(x1);
    } else {
      lo = x1; x1 = x2; f1 = f2; x2 = lo + gr * (hi - lo); f2 = sigma(x2);
    }
  }
  double psi = best->second, arg = best->first;
  if (f1 < psi) { psi = f1; arg = x1; }
  if (f2 < psi) { psi = f2; arg = x2; }
  for (const auto& [l, s] : pts) {
    res.lambdas.push_back(l);
    res.sigmas.push_back(s);
  }
  if (psi < res.psi) {
    res.psi = psi;
    res.argmin = arg;
    res.mode = mode;
  }
}

}  // namespace detail

/// Psi = inf_lambda sigma_min(L_perp - i lambda). The operator is real, so sigma(-lambda) =
/// sigma(lambda) and only the imaginary extent of the numerical range needs sweeping; outside it
/// sigma_min grows at least like the distance to the range.
inline AbscissaResult pseudo_abscissa(const DiscreteOperator& op, const AbscissaOptions& opt = {}) {
  AbscissaResult res;
  res.nu = op.nu;
  res.psi = std::numeric_limits<double>::infinity();
  const auto ranges = op.imaginary_ranges();
  if (op.route == OperatorRoute::modal) {
    for (size_t b = 0; b < op.blocks.size(); ++b) {
      const Eigen::MatrixXcd& B = op.blocks[b];
      const int n = static_cast<int>(B.rows());
      const Eigen::MatrixXcd I = Eigen::MatrixXcd::Identity(n, n);
      auto sigma = [&](double l) { return sigma_min_dense(B - cplx(0.0, l) * I); };
      const auto [lo, hi] = ranges[b];
      const double pad = 1e-3 * std::max(1.0, hi - lo);
      AbscissaResult part;
      part.psi = std::numeric_limits<double>::infinity();
      detail::sweep(sigma, lo - pad, hi + pad, opt, part, static_cast<int>(b) + 1);
      res.lipschitz_ok = res.lipschitz_ok && part.lipschitz_ok;
      if (part.psi < res.psi) {
        res.psi = part.psi;
        res.argmin = part.argmin;
        res.mode = part.mode;
        res.lambdas = part.lambdas;
        res.sigmas = part.sigmas;
      }
    }
  } else {
    HessenbergSigma hs(op.M);
    const auto [lo, hi] = ranges.front();
    const double a = std::max(0.0, lo), b = std::max(a + 1e-12, hi);
    auto sigma = [&](double l) { return hs(l); };
    detail::sweep(sigma, a, b * (1 + 1e-3), opt, res, 0);
  }
  if (!res.lipschitz_ok) res.flags.push_back("lipschitz_violation");
  if (res.psi > op.diffusion_cap * (1 + 1e-9) + 1e-12) res.flags.push_back("above_diffusion_cap");
  if (res.psi < 0) res.psi = 0;
  return res;
}

/// Random P0-free fields with unit norm, built from smooth Gaussian bumps.
inline std::vector<Eigen::VectorXd> random_perp_fields(const Operators& o, int count, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::vector<Eigen::VectorXd> out;
  const Grid& g = *o.grid;
  const double scale = g.polar() ? g.domain.size : g.domain.size / 2;
  Vec2 c0 = g.polar() ? Vec2{} : g.domain.origin + Vec2{g.domain.size / 2, g.domain.size / 2};
  while (static_cast<int>(out.size()) < count) {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(g.size());
    for (int b = 0; b < 4; ++b) {
      const Vec2 c = c0 + Vec2{U(rng), U(rng)} * (0.6 * scale);
      const double s = (0.15 + 0.2 * (U(rng) + 1)) * scale, a = U(rng);
      for (int n = 0; n < g.size(); ++n) {
        const Vec2 d = g.displacement(g.nodes[n], c);
        f[n] += a * std::exp(-dot(d, d) / (s * s));
      }
    }
    if (g.polar() && g.domain.boundary == Boundary::dirichlet)
      for (int n = 0; n < g.size(); ++n) {
        const double r = norm(g.nodes[n]) / g.domain.size;
        f[n] *= 1 - r * r;
      }
    f = o.P->Pperp(f);
    const double nf = o.l2(f);
    if (nf > 0) out.push_back(f / nf);
  }
  return out;
}

struct AccretivityReport {
  double max_residual = 0.0;
  /// Largest |Re<L f, f>| / ||L f|| ||f|| when nu = 0.
  double max_real_part = 0.0;
};

/// Re<L_perp f, f> against nu ||grad f||^2 over random P0-free fields.
inline AccretivityReport accretivity_check(const DiscreteOperator& op, int samples = 50, unsigned seed = 5) {
  AccretivityReport r;
  const auto& o = *op.ops;
  for (const auto& f : random_perp_fields(o, samples, seed)) {
    const Eigen::VectorXd Lf = op.apply(f);
    const double re = o.w().dot(Lf.cwiseProduct(f));
    const double g2 = std::pow(o.h1(f), 2);
    r.max_residual = std::max(r.max_residual, std::abs(re - op.nu * g2) / std::max(op.nu * g2, 1e-300));
    r.max_real_part = std::max(r.max_real_part, std::abs(re) / std::max(o.l2(Lf) * o.l2(f), 1e-300));
  }
  if (op.nu == 0) r.max_residual = r.max_real_part;
  return r;
}

struct WeiReport {
  double psi = 0.0;
  double max_ratio = 0.0;
  std::vector<double> times;
};

/// ||e^{-t L_perp} f|| / (e^{-t Psi + pi/2} ||f||) over sample fields and times, with the semigroup
/// from the evolution solver on the same discretisation.
inline WeiReport wei_bound_check(const DiscreteOperator& op, double psi, const std::vector<Eigen::VectorXd>& fields,
                                 const std::vector<double>& times, StepPolicy pol = {}) {
  WeiReport r;
  r.psi = psi;
  r.times = times;
  const auto& o = *op.ops;
  pol.sample_times = times;
  pol.keep_fields = false;
  const double t_end = *std::max_element(times.begin(), times.end());
  for (const auto& f : fields) {
    const Trajectory tr = solve({Kind::model_perp, op.ops, op.nu, Method::automatic}, ScalarField(o.grid, f),
                                t_end, pol);
    const double n0 = o.l2(f);
    r.max_ratio = std::max(r.max_ratio, std::exp(-pi / 2));
    for (double t : times) r.max_ratio = std::max(r.max_ratio, tr.l2_at(t) / (std::exp(-t * psi + pi / 2) * n0));
  }
  return r;
}

/// Smooth function given in chart coordinates: sum over modes k of (a_k(h) cos 2 pi k theta +
/// b_k(h) sin 2 pi k theta) with polynomial profiles in s = (h - h_ref) / h_scale.
struct ChartFunction {
  struct Mode {
    int k = 0;
    std::vector<double> a, b;
  };
  std::vector<Mode> modes;
  double h_ref = 0.0, h_scale = 1.0;

  static double poly(const std::vector<double>& c, double s, double& d) {
    double v = 0.0;
    d = 0.0;
    for (size_t i = c.size(); i-- > 0;) {
      d = d * s + v;
      v = v * s + c[i];
    }
    return v;
  }

  /// value, d/dtheta, d/dh
  std::array<double, 3> eval(double th, double hh) const {
    const double s = (hh - h_ref) / h_scale;
    std::array<double, 3> out{0, 0, 0};
    for (const auto& m : modes) {
      double da, db;
      const double A = poly(m.a, s, da), B = poly(m.b, s, db);
      const double c = std::cos(two_pi * m.k * th), sn = std::sin(two_pi * m.k * th);
      out[0] += A * c + B * sn;
      out[1] += two_pi * m.k * (-A * sn + B * c);
      out[2] += (da * c + db * sn) / h_scale;
    }
    return out;
  }

  bool mean_free() const {
    return std::all_of(modes.begin(), modes.end(), [](const Mode& m) { return m.k != 0; });
  }

  static ChartFunction random(std::mt19937_64& rng, int kmax, bool mean_free, double h_ref, double h_scale) {
    std::normal_distribution<double> N;
    ChartFunction f;
    f.h_ref = h_ref;
    f.h_scale = h_scale;
    for (int k = mean_free ? 1 : 0; k <= kmax; ++k) {
      Mode m;
      m.k = k;
      for (int i = 0; i < 3; ++i) {
        m.a.push_back(N(rng) / (1 + k));
        m.b.push_back(k == 0 ? 0.0 : N(rng) / (1 + k));
      }
      f.modes.push_back(m);
    }
    return f;
  }
};

struct StreamRect {
  double theta = 0.0, h = 0.0, eta = 1.0, gamma = 0.0;
};

struct PoincareResult {
  double lhs = 0.0, rhs = 0.0;
  bool holds = true;
  double slack() const { return rhs > 0 ? lhs / rhs : (lhs > 0 ? std::numeric_limits<double>::infinity() : 0.0); }
};

namespace detail {

struct RectNorms {
  double f2 = 0.0, g2 = 0.0;
  double sup_dphi_dh = 0.0, sup_T_grad = 0.0, sup_log_qT = 0.0;
};

/// Norms over Phi(Q) by Gauss-Legendre in h and midpoint cells in theta with exact chart slices.
inline RectNorms rect_norms(const ActionAngleChart& c, const ChartFunction& f, double th0, double eta, double ha,
                            double hb, int n_theta, int n_gauss) {
  static const double gx[8] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290, -0.1834346424956498,
                               0.1834346424956498,  0.5255324099163290,  0.7966664774136267,  0.9602898564975363};
  static const double gw[8] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873, 0.3626837833783620,
                               0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763};
  RectNorms r;
  const int panels = std::max(1, n_gauss / 8);
  const double ph = (hb - ha) / panels;
  const double d = 1.0 / n_theta;
  for (int p = 0; p < panels; ++p)
    for (int q = 0; q < 8; ++q) {
      const double hh = ha + ph * (p + 0.5 * (gx[q] + 1));
      const double wh = 0.5 * ph * gw[q];
      const LevelSlice s = c.slice(hh, n_theta, true);
      const double dq = c.dq(hh), T = s.T;
      const double Om = 1.0 / T;
      r.sup_log_qT = std::max(r.sup_log_qT, std::abs(1.0 / hh - c.omega_prime(hh) / Om));
      for (int i = 0; i < n_theta; ++i) {
        const double th = i * d;
        // Overlap of the cell [th - d/2, th + d/2] with the periodic window |theta - th0| < eta.
        double wt = 1.0;
        if (eta < 0.5) {
          double off = th - th0;
          off -= std::round(off);
          wt = std::clamp((std::min(off + 0.5 * d, eta) - std::max(off - 0.5 * d, -eta)) / d, 0.0, 1.0);
        }
        if (wt <= 0) continue;
        const auto v = f.eval(th, hh);
        const Vec2 g = chart_gradient(*c.H, s.phi[i], s.dphi_dh[i], dq, T, v[1], v[2]);
        const double meas = wh * wt * d * std::abs(dq) * T;
        r.f2 += meas * v[0] * v[0];
        r.g2 += meas * dot(g, g);
        r.sup_dphi_dh = std::max(r.sup_dphi_dh, norm(s.dphi_dh[i]));
        r.sup_T_grad = std::max(r.sup_T_grad, norm(s.dphi_dtheta[i]));
      }
    }
  return r;
}

}  // namespace detail

struct PoincareOptions {
  int n_theta = 1024;
  int n_gauss = 32;
  double tolerance = 0.05;
};

/// Variant 1: thin in h with factor K; variant 2: thin in theta with factor N; variant 3: full
/// annulus for P0-free f.
inline PoincareResult poincare_check(const ActionAngleChart& c, const ChartFunction& f, const StreamRect& Q,
                                     int variant, int factor = 0, const PoincareOptions& opt = {}) {
  PoincareResult res;
  if (variant == 3) {
    if (!f.mean_free()) throw invalid("variant 3 needs P0 f = 0");
    if (Q.eta != 1.0) throw invalid("variant 3 needs eta = 1");
  } else if (variant != 1 && variant != 2) {
    throw invalid("Poincare variant must be 1, 2 or 3");
  } else if (factor < 2) {
    throw invalid("K and N must be at least 2");
  }
  const double K = variant == 1 ? factor : 1;
  const double N = variant == 2 ? factor : 1;
  const double ha = Q.h - K * Q.gamma, hb = Q.h + K * Q.gamma;
  if (ha < c.h_min() || hb > c.h_max()) throw invalid("rectangle exits the chart coverage");
  if (variant == 2 && N * Q.eta > 0.5) throw invalid("N eta exceeds half the angle period");
  const double eta_big = variant == 3 ? 1.0 : N * Q.eta;
  const auto inner = detail::rect_norms(c, f, Q.theta, variant == 3 ? 1.0 : Q.eta, Q.h - Q.gamma, Q.h + Q.gamma,
                                        opt.n_theta, opt.n_gauss);
  const auto outer = variant == 3 ? inner
                                  : detail::rect_norms(c, f, Q.theta, eta_big, ha, hb, opt.n_theta, opt.n_gauss * 2);
  const double F = std::sqrt(outer.f2), G = std::sqrt(outer.g2);
  if (variant == 1) {
    res.lhs = inner.f2;
    res.rhs = 8.0 / K * outer.f2 + 4 * Q.gamma * F * G * outer.sup_dphi_dh + 2 * Q.gamma * outer.f2 * outer.sup_log_qT;
  } else if (variant == 2) {
    res.lhs = inner.f2;
    res.rhs = 8.0 / N * outer.f2 + 4 * Q.eta * F * G * outer.sup_T_grad;
  } else {
    res.lhs = std::sqrt(inner.f2);
    res.rhs = std::sqrt(inner.g2) * inner.sup_T_grad;
  }
  res.holds = res.lhs <= res.rhs * (1 + opt.tolerance);
  return res;
}

/// max |<grad f0, grad b>| / (||grad f0|| ||grad b||) over pairs of a level function f0 = F(h)
/// and a mean-free chart function b, by quadrature over the chart annulus.
inline double commutator_constant(const ActionAngleChart& c,
                                  const std::vector<std::pair<ChartFunction, ChartFunction>>& pairs,
                                  int n_theta = 256, int n_gauss = 64) {
  static const double gx[4] = {-0.8611363115940526, -0.3399810435848563, 0.3399810435848563, 0.8611363115940526};
  static const double gw[4] = {0.3478548451374538, 0.6521451548625461, 0.6521451548625461, 0.3478548451374538};
  std::vector<LevelSlice> slices;
  std::vector<double> hs, ws;
  const int panels = std::max(1, n_gauss / 4);
  const double ph = (c.h_max() - c.h_min()) / panels;
  for (int p = 0; p < panels; ++p)
    for (int q = 0; q < 4; ++q) {
      const double hh = c.h_min() + ph * (p + 0.5 * (gx[q] + 1));
      hs.push_back(hh);
      ws.push_back(0.5 * ph * gw[q]);
      slices.push_back(c.slice(hh, n_theta, true));
    }
  double best = 0.0;
  for (const auto& [f0, b] : pairs) {
    if (!b.mean_free()) throw invalid("b must have vanishing streamline average");
    if (std::any_of(f0.modes.begin(), f0.modes.end(), [](auto& m) { return m.k != 0; }))
      throw invalid("f0 must be a function of the level only");
    double J = 0, n0 = 0, nb = 0;
    for (size_t l = 0; l < hs.size(); ++l) {
      const auto& s = slices[l];
      const double dq = c.dq(hs[l]);
      for (int i = 0; i < n_theta; ++i) {
        const double th = static_cast<double>(i) / n_theta;
        const auto a = f0.eval(th, hs[l]), v = b.eval(th, hs[l]);
        const Vec2 ga = chart_gradient(*c.H, s.phi[i], s.dphi_dh[i], dq, s.T, a[1], a[2]);
        const Vec2 gb = chart_gradient(*c.H, s.phi[i], s.dphi_dh[i], dq, s.T, v[1], v[2]);
        const double m = ws[l] * std::abs(dq) * s.T / n_theta;
        J += m * dot(ga, gb);
        n0 += m * dot(ga, ga);
        nb += m * dot(gb, gb);
      }
    }
    if (n0 <= 0 || nb <= 0) continue;
    best = std::max(best, std::abs(J) / std::sqrt(n0 * nb));
  }
  return best;
}

}  // namespace streamlab
