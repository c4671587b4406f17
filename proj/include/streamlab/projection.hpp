#pragma once

#include <Eigen/SparseCholesky>
#include <random>
#include <unsupported/Eigen/FFT>

#include "streamlab/thin_sets.hpp"

namespace streamlab {

/// Discrete streamline average P0 as the weighted-orthogonal projection onto functions of the
/// level h(x) that are piecewise linear between level nodes, one family per streamline cell:
/// P0 = B G^-1 B^T W with B the hat functions evaluated at grid nodes and G = B^T W B.
class StreamProjector {
 public:
  GridPtr grid;
  HamiltonianPtr H;
  bool identity = false;
  /// Per node: cell index, level h(x), and 1 where the node lies outside the level family.
  std::vector<int> cell;
  std::vector<double> level;
  std::vector<unsigned char> uncovered;
  /// Level nodes per cell.
  std::vector<std::vector<double>> nodes;
  std::vector<int> offset;
  Eigen::SparseMatrix<double> B;
  Eigen::SparseMatrix<double> BtW;
  Eigen::SparseMatrix<double> G;

  int basis_size() const { return static_cast<int>(B.cols()); }

  Eigen::VectorXd coefficients(const Eigen::VectorXd& f) const {
    Eigen::VectorXd c = solver_->solve(BtW * f);
    if (solver_->info() != Eigen::Success) throw numerical("level Gram solve failed");
    return c;
  }
  Eigen::VectorXd expand(const Eigen::VectorXd& c) const { return B * c; }

  Eigen::VectorXd P0(const Eigen::VectorXd& f) const { return identity ? f : expand(coefficients(f)); }
  Eigen::VectorXd Pperp(const Eigen::VectorXd& f) const { return f - P0(f); }
  ScalarField P0(const ScalarField& f) const { return ScalarField(f.grid, P0(f.values)); }
  ScalarField Pperp(const ScalarField& f) const { return ScalarField(f.grid, Pperp(f.values)); }

  /// Gram solve on coefficient vectors, shared with the evolution solvers.
  Eigen::VectorXd gram_solve(const Eigen::VectorXd& rhs) const { return solver_->solve(rhs); }

  std::shared_ptr<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>> solver_;
};

using ProjectorPtr = std::shared_ptr<const StreamProjector>;

namespace detail {

/// Level nodes from h sampled along the section ray at the given spacing, up to `top`.
inline std::vector<double> ray_levels(const HamiltonianField& H, double spacing, double start, double top, double reach) {
  std::vector<double> out;
  const Vec2 d = H.section_direction / norm(H.section_direction);
  double prev = -1.0;
  for (int k = 0;; ++k) {
    const double t = start + k * spacing;
    if (t > reach) break;
    const double hv = H.level_of(H.x0 + d * t);
    if (hv <= prev) break;
    if (hv > top) {
      if (out.empty() || out.back() < top) out.push_back(top);
      break;
    }
    out.push_back(hv);
    prev = hv;
  }
  return out;
}

}  // namespace detail

/// Builds P0 on `grid`. For torus presets pass the chart: nodes outside its outermost streamline
/// are attached to the top level and flagged. Level nodes are `spacing` grid cells apart along the
/// section ray; 0 picks 1 for rotationally symmetric flows (levels on the rings), 4 on other disk
/// flows and 2 on the torus. Narrow hats on non-circular streamlines pick up moire noise from the
/// grid and spoil the commutation with advection.
inline ProjectorPtr build_projector(GridPtr grid, HamiltonianPtr H, const ActionAngleChart* chart = nullptr,
                                    double spacing = 0.0) {
  auto P = std::make_shared<StreamProjector>();
  P->grid = grid;
  P->H = H;
  const Grid& g = *grid;
  const int n = g.size();
  if (!H->has_elliptic_cell) {
    P->identity = true;
    P->uncovered.assign(n, 0);
    return P;
  }
  if (g.domain.kind != H->domain.kind) throw invalid("grid and Hamiltonian live on different domains");
  if (!g.polar() && !chart) throw invalid("torus projections need the chart for coverage");

  if (spacing <= 0) spacing = H->rotationally_symmetric ? 1.0 : (g.polar() ? 4.0 : 2.0);
  std::vector<double> lv;
  if (g.polar()) {
    lv = detail::ray_levels(*H, spacing * g.d1, 0.5 * g.d1, std::numeric_limits<double>::infinity(), g.domain.size);
  } else {
    lv = detail::ray_levels(*H, spacing * g.d1, 0.0, chart->h_max(), g.domain.size);
  }
  if (lv.size() < 2) throw numerical("too few streamline levels resolved by the grid");

  P->cell.resize(n);
  P->level.resize(n);
  P->uncovered.assign(n, 0);
  int ncell = 1;
  for (int i = 0; i < n; ++i) {
    auto c = H->cell(g.nodes[i]);
    if (!c) throw numerical("grid node outside every streamline cell");
    P->cell[i] = c->id;
    ncell = std::max(ncell, c->id + 1);
    double hv = std::sqrt(std::max(0.0, c->sign * (H->H(g.nodes[i]) - c->h0)));
    if (!g.polar() && !chart->inside_outer(c->local)) {
      hv = lv.back();
      P->uncovered[i] = 1;
    } else if (hv > lv.back()) {
      P->uncovered[i] = !g.polar();
    }
    P->level[i] = hv;
  }

  // Hat weights for a node at level hv against sorted level nodes.
  auto hat = [](const std::vector<double>& L, double hv, int& l, double& s) {
    if (hv <= L.front()) { l = 0; s = 0.0; return; }
    if (hv >= L.back()) { l = static_cast<int>(L.size()) - 2; s = 1.0; return; }
    l = static_cast<int>(std::upper_bound(L.begin(), L.end(), hv) - L.begin()) - 1;
    s = (hv - L[l]) / (L[l + 1] - L[l]);
  };

  // Drop level nodes that no grid node resolves, then rebuild the hats on the remaining nodes.
  P->nodes.assign(ncell, lv);
  for (int c = 0; c < ncell; ++c) {
    for (int pass = 0; pass < 50; ++pass) {
      auto& L = P->nodes[c];
      std::vector<double> peak(L.size(), 0.0);
      for (int i = 0; i < n; ++i) {
        if (P->cell[i] != c) continue;
        int l;
        double s;
        hat(L, P->level[i], l, s);
        peak[l] = std::max(peak[l], 1 - s);
        peak[l + 1] = std::max(peak[l + 1], s);
      }
      std::vector<double> keep;
      for (size_t l = 0; l < L.size(); ++l)
        if (peak[l] >= 0.5) keep.push_back(L[l]);
      if (keep.size() == L.size()) break;
      if (keep.size() < 2) throw numerical("streamline levels are not resolved by the grid");
      L = keep;
    }
  }
  P->offset.resize(ncell + 1, 0);
  for (int c = 0; c < ncell; ++c) P->offset[c + 1] = P->offset[c] + static_cast<int>(P->nodes[c].size());

  std::vector<Eigen::Triplet<double>> t;
  t.reserve(2 * n);
  for (int i = 0; i < n; ++i) {
    const auto& L = P->nodes[P->cell[i]];
    int l;
    double s;
    hat(L, P->level[i], l, s);
    const int base = P->offset[P->cell[i]];
    if (1 - s > 0) t.emplace_back(i, base + l, 1 - s);
    if (s > 0) t.emplace_back(i, base + l + 1, s);
  }
  P->B.resize(n, P->offset.back());
  P->B.setFromTriplets(t.begin(), t.end());
  P->BtW = Eigen::SparseMatrix<double>(P->B.transpose()) * g.weights.asDiagonal();
  P->G = P->BtW * P->B;
  P->solver_ = std::make_shared<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>>(P->G);
  if (P->solver_->info() != Eigen::Success) throw numerical("level Gram matrix is singular");
  return P;
}

/// Chart samples as an n_theta x n_h matrix, column j for level h_j.
using ChartSamples = Eigen::MatrixXd;

/// Grid <-> chart transfer: bilinear interpolation to chart samples, and per-node (theta, h)
/// for evaluating angular series back on the grid. Nodes outside the reference cell's annulus
/// are flagged.
class ChartTransfer {
 public:
  const ActionAngleChart* chart = nullptr;
  GridPtr grid;
  std::vector<double> theta, h;
  std::vector<unsigned char> uncovered;

  ChartSamples sample(const Eigen::VectorXd& f) const {
    const auto& c = *chart;
    ChartSamples S(c.n_theta, c.n_h);
    for (int j = 0; j < c.n_h; ++j)
      for (int i = 0; i < c.n_theta; ++i) S(i, j) = interpolate(*grid, f, c.phi[c.idx(i, j)]);
    return S;
  }
};

using TransferPtr = std::shared_ptr<const ChartTransfer>;

inline TransferPtr build_transfer(const ActionAngleChart& chart, GridPtr grid) {
  auto X = std::make_shared<ChartTransfer>();
  X->chart = &chart;
  X->grid = grid;
  const int n = grid->size();
  X->theta.assign(n, 0.0);
  X->h.assign(n, 0.0);
  X->uncovered.assign(n, 1);
  for (int i = 0; i < n; ++i) {
    const Vec2 p = grid->nodes[i];
    auto ci = chart.H->cell(p);
    if (!ci || ci->id != 0 || !chart.covers(p)) continue;
    auto [th, hh] = chart.invert(p);
    X->theta[i] = th;
    X->h[i] = hh;
    X->uncovered[i] = 0;
  }
  return X;
}

/// Per-level discrete Fourier coefficients in theta, stored in FFT order (row r <-> mode r for
/// r < n/2, r - n otherwise).
struct AngularSpectrum {
  int n_theta = 0, n_h = 0;
  int K = 0;
  std::vector<double> h;
  Eigen::MatrixXcd coeff;
  std::string warning;

  int mode(int row) const { return row < n_theta / 2 ? row : row - n_theta; }
  int row(int k) const { return k >= 0 ? k : k + n_theta; }
  cplx at(int k, int j) const { return coeff(row(k), j); }
  /// Sum over modes of |f^(k, h_j)|^2.
  double level_energy(int j) const { return coeff.col(j).squaredNorm(); }
};

inline AngularSpectrum theta_fourier(const ActionAngleChart& c, const ChartSamples& S, int K = -1) {
  if (S.rows() != c.n_theta || S.cols() != c.n_h) throw invalid("chart samples do not match the chart");
  AngularSpectrum sp;
  sp.n_theta = c.n_theta;
  sp.n_h = c.n_h;
  sp.K = K < 0 ? c.n_theta / 4 : K;
  if (sp.K > c.n_theta / 2 - 1) throw invalid("mode cap exceeds n_theta/2 - 1");
  sp.h = c.h;
  sp.coeff.resize(c.n_theta, c.n_h);
  Eigen::FFT<double> fft;
  std::vector<double> in(c.n_theta);
  std::vector<cplx> out;
  double total = 0.0, top = 0.0;
  for (int j = 0; j < c.n_h; ++j) {
    for (int i = 0; i < c.n_theta; ++i) in[i] = S(i, j);
    fft.fwd(out, in);
    for (int r = 0; r < c.n_theta; ++r) {
      sp.coeff(r, j) = out[r] / static_cast<double>(c.n_theta);
      const double e = std::norm(sp.coeff(r, j));
      total += e;
      if (std::abs(sp.mode(r)) > sp.K) top += e;
    }
  }
  if (total > 0 && top > 0.01 * total) sp.warning = "energy above the mode cap exceeds 1%: possible aliasing";
  return sp;
}

inline AngularSpectrum theta_fourier(const ChartTransfer& X, const ScalarField& f, int K = -1) {
  return theta_fourier(*X.chart, X.sample(f.values), K);
}

inline Eigen::MatrixXcd inverse_theta_fourier_complex(const AngularSpectrum& sp) {
  Eigen::MatrixXcd S(sp.n_theta, sp.n_h);
  Eigen::FFT<double> fft;
  std::vector<cplx> in(sp.n_theta), out;
  for (int j = 0; j < sp.n_h; ++j) {
    for (int r = 0; r < sp.n_theta; ++r) in[r] = sp.coeff(r, j) * static_cast<double>(sp.n_theta);
    fft.inv(out, in);
    for (int i = 0; i < sp.n_theta; ++i) S(i, j) = out[i];
  }
  return S;
}

inline ChartSamples inverse_theta_fourier(const AngularSpectrum& sp) { return inverse_theta_fourier_complex(sp).real(); }

/// Streamline average as a function of the level, with the chart measure |q'| T per level.
struct StreamProfile {
  std::vector<double> h, value, weight;

  double integral() const {
    double s = 0.0;
    for (size_t j = 0; j + 1 < h.size(); ++j)
      s += 0.5 * (value[j] * weight[j] + value[j + 1] * weight[j + 1]) * (h[j + 1] - h[j]);
    return s;
  }
};

inline StreamProfile streamline_average(const ActionAngleChart& c, const ChartSamples& S) {
  StreamProfile p;
  p.h = c.h;
  for (int j = 0; j < c.n_h; ++j) {
    p.value.push_back(S.col(j).mean());
    p.weight.push_back(std::abs(c.dq(c.h[j])) * c.T[j]);
  }
  return p;
}

inline StreamProfile streamline_average(const ChartTransfer& X, const ScalarField& f) {
  return streamline_average(*X.chart, X.sample(f.values));
}

/// Symbol w(k, h) tabulated in FFT order against the chart levels.
struct AngularMultiplier {
  int n_theta = 0;
  std::vector<double> h;
  Eigen::MatrixXcd w;
  double sup_abs = 0.0;
  /// sup_h |d_h w(k, h)| per FFT row, from differences between tabulated levels.
  std::vector<double> sup_dh;

  int mode(int row) const { return row < n_theta / 2 ? row : row - n_theta; }
  int row(int k) const { return k >= 0 ? k : k + n_theta; }
  double sup_dh_all() const { return sup_dh.empty() ? 0.0 : *std::max_element(sup_dh.begin(), sup_dh.end()); }

  cplx value(int k, double hh) const {
    const int r = row(k);
    if (hh <= h.front()) return w(r, 0);
    if (hh >= h.back()) return w(r, w.cols() - 1);
    const int j = static_cast<int>(std::upper_bound(h.begin(), h.end(), hh) - h.begin()) - 1;
    const double s = (hh - h[j]) / (h[j + 1] - h[j]);
    return (1 - s) * w(r, j) + s * w(r, j + 1);
  }

  void finalize() {
    sup_abs = w.cwiseAbs().maxCoeff();
    sup_dh.assign(n_theta, 0.0);
    for (int r = 0; r < n_theta; ++r)
      for (size_t j = 0; j + 1 < h.size(); ++j)
        sup_dh[r] = std::max(sup_dh[r], std::abs(w(r, j + 1) - w(r, j)) / (h[j + 1] - h[j]));
  }

  template <class F>
  static AngularMultiplier from(const ActionAngleChart& c, F&& fn) {
    AngularMultiplier m;
    m.n_theta = c.n_theta;
    m.h = c.h;
    m.w.resize(c.n_theta, c.n_h);
    for (int r = 0; r < c.n_theta; ++r)
      for (int j = 0; j < c.n_h; ++j) m.w(r, j) = fn(m.mode(r), j);
    m.finalize();
    return m;
  }

  static AngularMultiplier constant(const ActionAngleChart& c, double v) {
    return from(c, [v](int, int) { return cplx(v); });
  }
  static AngularMultiplier mean_only(const ActionAngleChart& c) {
    return from(c, [](int k, int) { return cplx(k == 0 ? 1.0 : 0.0); });
  }
  /// 2 pi i k Omega(h): the advection operator in angle variables.
  static AngularMultiplier advection(const ActionAngleChart& c) {
    return from(c, [&c](int k, int j) { return cplx(0.0, two_pi * k * c.Omega[j]); });
  }
};

/// Applies the symbol to chart samples; the Nyquist row is dropped so real data stay real.
inline ChartSamples apply_multiplier(const AngularMultiplier& w, const AngularSpectrum& sp) {
  AngularSpectrum out = sp;
  for (int r = 0; r < sp.n_theta; ++r)
    for (int j = 0; j < sp.n_h; ++j)
      out.coeff(r, j) = (r == sp.n_theta / 2) ? cplx(0.0) : sp.coeff(r, j) * w.w(r, j);
  return inverse_theta_fourier(out);
}

inline ChartSamples apply_multiplier(const ActionAngleChart& c, const AngularMultiplier& w, const ChartSamples& S) {
  return apply_multiplier(w, theta_fourier(c, S));
}

struct MultiplierResult {
  ScalarField field;
  std::vector<unsigned char> uncovered;
};

/// Grid route: w(0, h(x)) P0 f on every node plus the k != 0 modes of P_perp f through the chart;
/// the angular part is zero on nodes the chart does not cover, which are flagged.
inline MultiplierResult apply_multiplier(const StreamProjector& P, const ChartTransfer& X, const AngularMultiplier& w,
                                         const ScalarField& f) {
  const auto& c = *X.chart;
  if (w.n_theta != c.n_theta || static_cast<int>(w.h.size()) != c.n_h) throw invalid("symbol does not match the chart");
  const Eigen::VectorXd p0 = P.P0(f.values);
  const AngularSpectrum sp = theta_fourier(c, X.sample(f.values - p0));
  MultiplierResult res{ScalarField(f.grid), X.uncovered};
  const int n = f.size();
  const int half = c.n_theta / 2;
  for (int i = 0; i < n; ++i) {
    const double hv = P.identity ? X.h[i] : P.level[i];
    double v = std::real(w.value(0, hv)) * p0[i];
    if (!X.uncovered[i]) {
      const double hh = X.h[i];
      int j = static_cast<int>(std::upper_bound(c.h.begin(), c.h.end(), hh) - c.h.begin()) - 1;
      j = std::clamp(j, 0, c.n_h - 2);
      const double s = std::clamp((hh - c.h[j]) / (c.h[j + 1] - c.h[j]), 0.0, 1.0);
      cplx acc = 0.0;
      for (int r = 1; r < c.n_theta; ++r) {
        if (r == half) continue;
        const int k = sp.mode(r);
        const cplx a = (1 - s) * sp.coeff(r, j) * w.w(r, j) + s * sp.coeff(r, j + 1) * w.w(r, j + 1);
        acc += a * std::polar(1.0, two_pi * k * X.theta[i]);
      }
      v += acc.real();
    }
    res.field.values[i] = v;
  }
  return res;
}

/// chi(k, h) = sign(k Omega(h) - lambda) smoothstep(dist(h, E_k) / width), chi(0, .) = 0, with the
/// thin sets taken from `thin_sets` for every resolved mode.
inline AngularMultiplier build_chi(const ActionAngleChart& c, ThinSetOptions opt) {
  if (!(opt.delta > 0 && opt.delta < 0.25)) throw invalid("delta must lie in (0, 1/4)");
  const int cap = opt.K;
  opt.K = c.n_theta / 2;
  const ThinSetCover cover = thin_sets(c, opt);
  std::map<int, const ModeSets*> sets;
  for (const auto& s : cover.modes) sets[s.k] = &s;
  const bool low = cover.regime == Regime::low;
  auto m = AngularMultiplier::from(c, [&](int k, int j) {
    if (k == 0) return cplx(0.0);
    const double diff = k * c.Omega[j] - opt.lambda;
    const double sg = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    auto it = sets.find(k);
    if (it == sets.end()) return cplx(sg);
    const double width = low ? opt.delta : 1.0 / std::abs(k);
    return cplx(sg * smoothstep3(distance_to(it->second->E, c.h[j]) / width));
  });
  (void)cap;
  return m;
}

/// Gradient in the plane of a chart-coordinate function from its theta and h derivatives:
/// grad theta = perp(d_h Phi) / (q' T), grad h = grad H / q'.
inline Vec2 chart_gradient(const HamiltonianField& H, Vec2 phi, Vec2 dphi_dh, double dq, double T, double Ft,
                           double Fh) {
  return perp(dphi_dh) * (Ft / (dq * T)) + H.grad(phi) * (Fh / dq);
}

/// L2 norm and gradient norm of chart samples over the tabulated annulus (spectral in theta,
/// five-point differences in h, trapezoid in h with the measure |q'| T).
struct ChartNorms {
  double l2 = 0.0, grad = 0.0;
};

inline ChartNorms chart_norms(const ActionAngleChart& c, const ChartSamples& S) {
  const int Nt = c.n_theta, Nh = c.n_h;
  AngularSpectrum sp = theta_fourier(c, S, 0);
  for (int r = 0; r < Nt; ++r)
    for (int j = 0; j < Nh; ++j) sp.coeff(r, j) *= (r == Nt / 2) ? cplx(0.0) : cplx(0.0, two_pi * sp.mode(r));
  const ChartSamples St = inverse_theta_fourier(sp);
  ChartNorms out;
  for (int j = 0; j < Nh; ++j) {
    const double wj = (j == 0 || j == Nh - 1 ? 0.5 : 1.0) * c.dh;
    const double meas = std::abs(c.dq(c.h[j])) * c.T[j] / Nt;
    for (int i = 0; i < Nt; ++i) {
      auto F = [&](int jj) { return S(i, jj); };
      double Fh;
      if (j == 0) Fh = -25 * F(0) + 48 * F(1) - 36 * F(2) + 16 * F(3) - 3 * F(4);
      else if (j == 1) Fh = -3 * F(0) - 10 * F(1) + 18 * F(2) - 6 * F(3) + F(4);
      else if (j == Nh - 1) Fh = 25 * F(j) - 48 * F(j - 1) + 36 * F(j - 2) - 16 * F(j - 3) + 3 * F(j - 4);
      else if (j == Nh - 2) Fh = 3 * F(j + 1) + 10 * F(j) - 18 * F(j - 1) + 6 * F(j - 2) - F(j - 3);
      else Fh = F(j - 2) - 8 * F(j - 1) + 8 * F(j + 1) - F(j + 2);
      Fh /= 12 * c.dh;
      const Vec2 g = chart_gradient(*c.H, c.phi[c.idx(i, j)], c.dphi_dh[c.idx(i, j)], c.dq(c.h[j]), c.T[j], St(i, j), Fh);
      out.l2 += wj * meas * S(i, j) * S(i, j);
      out.grad += wj * meas * dot(g, g);
    }
  }
  out.l2 = std::sqrt(out.l2);
  out.grad = std::sqrt(out.grad);
  return out;
}

/// Smooth random chart function: angular modes 1..kmax with quadratic-in-h amplitudes, plus a
/// quadratic mean profile unless `mean_free`.
inline ChartSamples random_chart_samples(const ActionAngleChart& c, std::mt19937_64& rng, int kmax = 4,
                                         bool mean_free = true) {
  std::normal_distribution<double> N(0.0, 1.0);
  ChartSamples S = ChartSamples::Zero(c.n_theta, c.n_h);
  const double a = c.h_min(), b = c.h_max();
  for (int k = (mean_free ? 1 : 0); k <= kmax; ++k) {
    const double c0 = N(rng), c1 = N(rng), c2 = N(rng), d0 = N(rng), d1 = N(rng), d2 = N(rng);
    for (int j = 0; j < c.n_h; ++j) {
      const double s = (c.h[j] - a) / (b - a);
      const double A = c0 + c1 * s + c2 * s * s, Bc = d0 + d1 * s + d2 * s * s;
      for (int i = 0; i < c.n_theta; ++i) {
        const double ang = two_pi * k * c.theta[i];
        S(i, j) += A * std::cos(ang) + (k > 0 ? Bc * std::sin(ang) : 0.0);
      }
    }
  }
  return S;
}

struct GradientConstants {
  /// Smallest C_a with ||grad W f|| <= C_a (||grad f|| + N ||f||) over the samples.
  double C_a = 0.0;
  /// Smallest C_b with ||grad W f|| <= C_b ||grad f||.
  double C_b = 0.0;
  double N = 0.0;
  /// Largest share of the N-term in the denominator of C_a.
  double n_term_share = 0.0;
};

inline GradientConstants multiplier_gradient_constants(const ActionAngleChart& c, const AngularMultiplier& w,
                                                       const std::vector<ChartSamples>& samples) {
  GradientConstants g;
  g.N = w.sup_dh_all();
  for (const auto& S : samples) {
    const ChartNorms f = chart_norms(c, S);
    if (f.grad <= 0) continue;
    const ChartNorms wf = chart_norms(c, apply_multiplier(c, w, S));
    const double denom = f.grad + g.N * f.l2;
    g.C_a = std::max(g.C_a, wf.grad / denom);
    g.C_b = std::max(g.C_b, wf.grad / f.grad);
    g.n_term_share = std::max(g.n_term_share, g.N * f.l2 / denom);
  }
  return g;
}

}  // namespace streamlab
