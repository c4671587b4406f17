#pragma once

#include <fstream>
#include <iomanip>
#include <sstream>
#include <utility>
#include <vector>

#include "streamlab/hamiltonian.hpp"
#include "streamlab/ode.hpp"

namespace streamlab {

namespace detail {

struct FlowRhs {
  const HamiltonianField* H;
  State<2> operator()(double, const State<2>& y) const {
    const Vec2 g = H->grad({y[0], y[1]});
    return {-g.y, g.x};
  }
};

using FlowStepper = DormandPrince<2, FlowRhs>;

inline Vec2 to_vec(const State<2>& s) { return {s[0], s[1]}; }
inline State<2> to_state(Vec2 v) { return {v.x, v.y}; }

/// Newton correction of x onto the level set H = target along grad H.
inline Vec2 project_to_level(const HamiltonianField& H, Vec2 x, double target) {
  for (int it = 0; it < 3; ++it) {
    const Vec2 g = H.grad(x);
    const double g2 = dot(g, g);
    if (g2 == 0.0) break;
    const double r = target - H.H(x);
    if (r == 0.0) break;
    x += g * (r / g2);
  }
  return x;
}

}  // namespace detail

/// X(t, x0) for the Hamiltonian flow x' = perp(grad H).
inline Vec2 integrate_flow(const HamiltonianField& H, Vec2 x0, double t, const FlowIntegratorConfig& cfg = {}) {
  if (H.domain.kind == DomainKind::disk && norm(x0) > H.domain.size)
    throw invalid("starting point lies outside the disk");
  if (t < 0) throw invalid("flow time must be nonnegative");
  detail::FlowStepper dp(detail::FlowRhs{&H}, cfg);
  const Vec2 x = detail::to_vec(integrate_to(dp, detail::to_state(x0), 0.0, t));
  if (H.domain.kind == DomainKind::disk && norm(x) > H.domain.size * (1 + 1e-6))
    throw numerical("trajectory left the domain");
  return x;
}

struct ChartOptions {
  int n_theta = 128;
  int n_h = 64;
  /// Outermost level; 0 selects the preset default.
  double h_max = 0.0;
  /// Longest admissible return time.
  double max_period = 1e4;
  FlowIntegratorConfig flow{};
};

/// Samples of the chart along one level at uniformly spaced angles.
struct LevelSlice {
  double h = 0.0;
  double T = 0.0;
  Vec2 z{};
  std::vector<Vec2> phi, dphi_dtheta, dphi_dh;
};

/// Rescaled action-angle chart Phi(theta, h) = X(theta T(h), z(h)) with H(Phi) = h0 + sign h^2,
/// tabulated on a uniform theta-grid in [0,1) and a uniform h-grid excluding a collar of three
/// cells at the elliptic point.
class ActionAngleChart {
 public:
  HamiltonianPtr H;
  Vec2 x0{};
  double h0 = 0.0;
  int sign = 1;
  Vec2 section_dir{1, 0};
  int n_theta = 0, n_h = 0;
  double dh = 0.0;
  std::vector<double> h, theta, T, Omega, Omega_prime;
  std::vector<Vec2> z;
  /// Per-sample data, index j * n_theta + i for (theta_i, h_j).
  std::vector<Vec2> phi, dphi_dtheta, dphi_dh;
  ChartOptions options;

  double cond1_residual = 0.0;
  double cond2_residual = 0.0;
  double jacobian_residual = 0.0;
  double max_dphi_dh = 0.0;

  int idx(int i, int j) const { return j * n_theta + i; }
  double q(double hh) const { return sign * hh * hh; }
  double dq(double hh) const { return 2.0 * sign * hh; }
  double h_min() const { return h.front(); }
  double h_max() const { return h.back(); }
  const HamiltonianField& ham() const { return *H; }

  /// Section point z(hh), integrated from the nearest tabulated level.
  Vec2 section_point(double hh) const {
    int j = static_cast<int>(std::lround((hh - h.front()) / dh));
    j = std::clamp(j, 0, n_h - 1);
    return integrate_z(z[j], h[j], hh);
  }

  double period_at(double hh) const { return return_time(section_point(hh)); }

  /// Exact samples on an arbitrary level. With `with_dh` the h-derivative comes from a centred
  /// difference of neighbouring exact slices.
  LevelSlice slice(double hh, int count, bool with_dh = false) const {
    LevelSlice s = raw_slice(hh, count);
    if (with_dh) {
      const double d = 1e-4 * std::max(h_max(), 1e-3);
      LevelSlice a = raw_slice(hh + d, count), b = raw_slice(hh - d, count);
      s.dphi_dh.resize(count);
      for (int i = 0; i < count; ++i) s.dphi_dh[i] = (a.phi[i] - b.phi[i]) / (2 * d);
    }
    return s;
  }

  Vec2 map(double th, double hh) const {
    th -= std::floor(th);
    const Vec2 zz = section_point(hh);
    const double TT = return_time(zz);
    return detail::to_vec(integrate_to(dp(), detail::to_state(zz), 0.0, th * TT));
  }

  /// Reference-cell point and level for x; throws for points outside any cell.
  std::pair<Vec2, double> local_level(Vec2 x) const {
    auto c = H->cell(x);
    if (!c) throw invalid("point lies outside every streamline cell");
    const double hh = std::sqrt(std::max(0.0, c->sign * (H->H(x) - c->h0)));
    return {c->local, hh};
  }

  /// (theta, h) = Phi^{-1}(x): h directly from H, theta from the return time to the section.
  std::pair<double, double> invert(Vec2 x) const {
    auto [p, hh] = local_level(x);
    if (hh < h_min() * (1 - 1e-12)) throw invalid("point lies inside the excluded collar");
    if (hh > h_max() * (1 + 1e-9)) throw invalid("point lies outside the chart coverage");
    const Vec2 zz = section_point(hh);
    const auto d = dp();
    const Vec2 uhat = unit_velocity(zz);
    auto g = [&](const State<2>& y) { return dot(detail::to_vec(y) - zz, uhat); };
    auto acc = [&](const State<2>& y) { return dot(detail::to_vec(y) - x0, zz - x0) > 0; };
    auto hit = integrate_until_event(d, detail::to_state(p), options.max_period, g, acc);
    if (!hit) throw numerical("no return to the section");
    const double TT = return_time(zz);
    double th = 1.0 - hit->t / TT;
    th -= std::floor(th);
    if (th >= 1.0) th = 0.0;
    return {th, hh};
  }

  /// Omega'(hh) by linear interpolation of the Richardson-extrapolated difference table.
  double omega_prime(double hh) const { return interp_level(Omega_prime, hh); }
  double omega(double hh) const { return interp_level(Omega, hh); }
  double period(double hh) const { return 1.0 / omega(hh); }

  double interp_level(const std::vector<double>& v, double hh) const {
    double s = (hh - h.front()) / dh;
    if (s <= 0) return v.front();
    if (s >= n_h - 1) return v.back();
    const int j = static_cast<int>(std::floor(s));
    const double a = s - j;
    return (1 - a) * v[j] + a * v[j + 1];
  }

  /// Inside the outermost tabulated streamline of the reference cell and outside the collar.
  bool covers(Vec2 x) const {
    auto c = H->cell(x);
    if (!c) return false;
    const double hh = std::sqrt(std::max(0.0, c->sign * (H->H(x) - c->h0)));
    if (hh < h_min() || hh > h_max()) return false;
    if (H->domain.kind == DomainKind::disk) return true;
    return inside_outer(c->local);
  }

  bool inside_outer(Vec2 p) const {
    bool in = false;
    const int j = n_h - 1;
    for (int i = 0, k = n_theta - 1; i < n_theta; k = i++) {
      const Vec2 a = phi[idx(i, j)], b = phi[idx(k, j)];
      if ((a.y > p.y) != (b.y > p.y) && p.x < (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x) in = !in;
    }
    return in;
  }

  Vec2 unit_velocity(Vec2 p) const {
    const Vec2 u = H->velocity(p);
    const double n = norm(u);
    if (n < 1e-14) throw numerical("velocity vanishes on the section");
    return u / n;
  }

  double return_time(Vec2 zz) const {
    const auto d = dp();
    const Vec2 uhat = unit_velocity(zz);
    auto g = [&](const State<2>& y) { return dot(detail::to_vec(y) - zz, uhat); };
    auto acc = [&](const State<2>& y) { return dot(detail::to_vec(y) - x0, zz - x0) > 0; };
    auto hit = integrate_until_event(d, detail::to_state(zz), options.max_period, g, acc);
    if (!hit) throw numerical("no return within the maximal period (open or separatrix streamline)");
    return hit->t;
  }

  detail::FlowStepper dp() const { return detail::FlowStepper(detail::FlowRhs{H.get()}, options.flow); }

  /// dz/dh = q'(h) grad H / |grad H|^2 from (h_from, z_from) to h_to, then projected onto the level.
  Vec2 integrate_z(Vec2 z_from, double h_from, double h_to) const {
    if (h_to == h_from) return z_from;
    const double sgn = h_to > h_from ? 1.0 : -1.0;
    const HamiltonianField& HH = *H;
    const int sg = sign;
    auto rhs = [&HH, sg, h_from, sgn](double s, const State<2>& y) {
      const double hh = h_from + sgn * s;
      const Vec2 g = HH.grad({y[0], y[1]});
      const double g2 = dot(g, g);
      if (g2 < 1e-20) throw numerical("gradient vanishes along the section curve");
      const double c = sgn * 2.0 * sg * hh / g2;
      return State<2>{c * g.x, c * g.y};
    };
    DormandPrince<2, decltype(rhs)> d(rhs, options.flow);
    Vec2 out = detail::to_vec(integrate_to(d, detail::to_state(z_from), 0.0, std::abs(h_to - h_from)));
    return detail::project_to_level(HH, out, h0 + q(h_to));
  }

 private:
  LevelSlice raw_slice(double hh, int count) const {
    LevelSlice s;
    s.h = hh;
    s.z = section_point(hh);
    s.T = return_time(s.z);
    std::vector<double> times;
    for (int i = 1; i < count; ++i) times.push_back(s.T * i / count);
    auto pts = integrate_outputs(dp(), detail::to_state(s.z), 0.0, times);
    s.phi.resize(count);
    s.dphi_dtheta.resize(count);
    s.phi[0] = s.z;
    for (int i = 1; i < count; ++i) s.phi[i] = detail::project_to_level(*H, detail::to_vec(pts[i - 1]), h0 + q(hh));
    for (int i = 0; i < count; ++i) s.dphi_dtheta[i] = H->velocity(s.phi[i]) * s.T;
    return s;
  }

  friend ActionAngleChart build_chart(HamiltonianPtr, const ChartOptions&);
};

/// Seed point on the ray x0 + t d with H = h0 + sign hh^2.
inline Vec2 seed_on_ray(const HamiltonianField& H, Vec2 x0, Vec2 d, int sign, double h0, double hh) {
  const double target = sign * hh * hh;
  auto f = [&](double t) { return sign * (H.H(x0 + d * t) - h0) - sign * target; };
  double lo = 0.0, hi = 1e-3;
  while (f(hi) < 0) {
    lo = hi;
    hi *= 1.5;
    if (hi > 1e3) throw numerical("section ray never reaches the requested level");
  }
  for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
    const double m = 0.5 * (lo + hi);
    (f(m) < 0 ? lo : hi) = m;
  }
  return detail::project_to_level(H, x0 + d * (0.5 * (lo + hi)), h0 + target);
}

inline ActionAngleChart build_chart(HamiltonianPtr Hp, const ChartOptions& opt = {}) {
  if (opt.n_theta < 64 || opt.n_h < 32) throw invalid("chart needs n_theta >= 64 and n_h >= 32");
  if (!Hp->has_elliptic_cell) throw invalid("preset has no elliptic cell to chart");
  opt.flow.validate();
  const HamiltonianField& H = *Hp;
  ActionAngleChart c;
  c.H = Hp;
  c.options = opt;
  c.x0 = H.x0;
  c.h0 = H.h0;
  c.sign = H.level_sign;
  c.section_dir = H.section_direction / norm(H.section_direction);
  c.n_theta = opt.n_theta;
  c.n_h = opt.n_h;
  const double hmax = opt.h_max > 0 ? opt.h_max : H.default_h_max;
  if (!(hmax > 0)) throw invalid("chart needs a positive outermost level");
  c.dh = hmax / (opt.n_h + 2);
  for (int j = 0; j < opt.n_h; ++j) c.h.push_back((j + 3) * c.dh);
  for (int i = 0; i < opt.n_theta; ++i) c.theta.push_back(static_cast<double>(i) / opt.n_theta);

  c.z.resize(opt.n_h);
  c.z[0] = seed_on_ray(H, c.x0, c.section_dir, c.sign, c.h0, c.h[0]);
  for (int j = 1; j < opt.n_h; ++j) c.z[j] = c.integrate_z(c.z[j - 1], c.h[j - 1], c.h[j]);

  const int Nt = opt.n_theta, Nh = opt.n_h;
  c.phi.resize(Nt * Nh);
  c.dphi_dtheta.resize(Nt * Nh);
  c.dphi_dh.resize(Nt * Nh);
  c.T.resize(Nh);
  c.Omega.resize(Nh);
  for (int j = 0; j < Nh; ++j) {
    LevelSlice s = c.raw_slice(c.h[j], Nt);
    c.T[j] = s.T;
    c.Omega[j] = 1.0 / s.T;
    for (int i = 0; i < Nt; ++i) {
      c.phi[c.idx(i, j)] = s.phi[i];
      c.dphi_dtheta[c.idx(i, j)] = s.dphi_dtheta[i];
    }
  }
  // h-derivative: five-point stencils, centred in the interior and one-sided at the ends.
  for (int j = 0; j < Nh; ++j)
    for (int i = 0; i < Nt; ++i) {
      auto P = [&](int jj) { return c.phi[c.idx(i, jj)]; };
      Vec2 d;
      if (j == 0)
        d = P(0) * -25.0 + P(1) * 48.0 - P(2) * 36.0 + P(3) * 16.0 - P(4) * 3.0;
      else if (j == 1)
        d = P(0) * -3.0 - P(1) * 10.0 + P(2) * 18.0 - P(3) * 6.0 + P(4);
      else if (j == Nh - 1)
        d = (P(j) * -25.0 + P(j - 1) * 48.0 - P(j - 2) * 36.0 + P(j - 3) * 16.0 - P(j - 4) * 3.0) * -1.0;
      else if (j == Nh - 2)
        d = (P(j + 1) * -3.0 - P(j) * 10.0 + P(j - 1) * 18.0 - P(j - 2) * 6.0 + P(j - 3)) * -1.0;
      else
        d = P(j - 2) - P(j - 1) * 8.0 + P(j + 1) * 8.0 - P(j + 2);
      d = d / (12 * c.dh);
      c.dphi_dh[c.idx(i, j)] = d;
      c.max_dphi_dh = std::max(c.max_dphi_dh, norm(d));
    }
  // Omega' with Richardson extrapolation of centred differences.
  c.Omega_prime.resize(Nh);
  const auto& W = c.Omega;
  for (int j = 0; j < Nh; ++j) {
    if (j == 0)
      c.Omega_prime[j] = (-3 * W[0] + 4 * W[1] - W[2]) / (2 * c.dh);
    else if (j == Nh - 1)
      c.Omega_prime[j] = (3 * W[j] - 4 * W[j - 1] + W[j - 2]) / (2 * c.dh);
    else if (j == 1 || j == Nh - 2)
      c.Omega_prime[j] = (W[j + 1] - W[j - 1]) / (2 * c.dh);
    else {
      const double d1 = (W[j + 1] - W[j - 1]) / (2 * c.dh);
      const double d2 = (W[j + 2] - W[j - 2]) / (4 * c.dh);
      c.Omega_prime[j] = (4 * d1 - d2) / 3;
    }
  }
  // Diagnostics for conditions (1)-(3) and the Jacobian identity.
  for (int j = 0; j < Nh; ++j) {
    const double target = c.q(c.h[j]);
    for (int i = 0; i < Nt; ++i) {
      const Vec2 p = c.phi[c.idx(i, j)];
      c.cond1_residual = std::max(c.cond1_residual, std::abs(H.H(p) - c.h0 - target) / std::abs(target));
      auto P = [&](int k) { return c.phi[c.idx((k % Nt + Nt) % Nt, j)]; };
      const Vec2 fd =
          (P(i + 3) - P(i - 3) - (P(i + 2) - P(i - 2)) * 9.0 + (P(i + 1) - P(i - 1)) * 45.0) * (Nt / 60.0);
      const Vec2 ex = c.dphi_dtheta[c.idx(i, j)];
      c.cond2_residual = std::max(c.cond2_residual, norm(fd - ex) / norm(ex));
      const double det = cross(fd, c.dphi_dh[c.idx(i, j)]);
      const double want = -c.dq(c.h[j]) * c.T[j];
      c.jacobian_residual = std::max(c.jacobian_residual, std::abs(det - want) / std::abs(want));
    }
  }
  return c;
}

/// Plain-text table: header lines start with '#'; rows are theta, h, Phi_1, Phi_2, T(h).
inline void write_chart_table(const ActionAngleChart& c, std::ostream& os) {
  os << "# preset " << c.H->describe() << "\n";
  os << "# n_theta " << c.n_theta << " n_h " << c.n_h << "\n";
  os << "# atol " << c.options.flow.atol << " rtol " << c.options.flow.rtol << "\n";
  os << "# theta h phi1 phi2 T\n";
  os << std::setprecision(15);
  for (int j = 0; j < c.n_h; ++j)
    for (int i = 0; i < c.n_theta; ++i) {
      const Vec2 p = c.phi[c.idx(i, j)];
      os << c.theta[i] << " " << c.h[j] << " " << p.x << " " << p.y << " " << c.T[j] << "\n";
    }
}

}  // namespace streamlab
