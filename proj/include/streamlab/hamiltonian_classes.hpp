#pragma once

#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "streamlab/chart.hpp"

namespace streamlab {

struct ClassReport {
  double omega_inf = 0.0, omega_sup = 0.0;
  double omega_prime_sup = 0.0;
  /// max over levels of sup|grad H| / inf|grad H| along the streamline.
  double weak_uniformity = 1.0;
  /// Vanishing order; 0 stands for the m = infinity sentinel.
  int m = 0;
  double fit_r2 = 0.0;
  double fit_slope = 0.0;
  double eps_unif = 0.0, eps_trans = 0.0;
  bool omega_prime_unbounded = false;
  std::vector<std::string> flags;

  bool m_infinite() const { return m == 0; }

  std::string render() const {
    std::ostringstream os;
    os << "[class]\n";
    os << "omega_inf = " << omega_inf << "\nomega_sup = " << omega_sup << "\n";
    os << "omega_prime_sup = " << omega_prime_sup << "\nweak_uniformity = " << weak_uniformity << "\n";
    os << "m = " << (m_infinite() ? std::string("inf") : std::to_string(m)) << "\nfit_r2 = " << fit_r2 << "\n";
    os << "eps_unif = " << eps_unif << "\neps_trans = " << eps_trans << "\n";
    for (auto& f : flags) os << "flag = " << f << "\n";
    return os.str();
  }
};

struct OrderEstimate {
  int m = 0;
  double slope = 0.0;
  double r2 = 0.0;
  bool infinite() const { return m == 0; }
};

/// Slope of log|Omega'| against log h over the lower third of the tabulated levels.
/// Returns m = 0 (infinity) when |Omega'| is negligible relative to Omega / h_max.
inline OrderEstimate estimate_m(const ActionAngleChart& c) {
  OrderEstimate out;
  double osup = 0.0, dsup = 0.0;
  for (int j = 0; j < c.n_h; ++j) {
    osup = std::max(osup, std::abs(c.Omega[j]));
    dsup = std::max(dsup, std::abs(c.Omega_prime[j]));
  }
  if (dsup * c.h_max() < 1e-7 * osup) return out;
  const int n = std::max(4, c.n_h / 3);
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  int cnt = 0;
  for (int j = 0; j < n; ++j) {
    const double d = std::abs(c.Omega_prime[j]);
    if (d <= 0) continue;
    const double x = std::log(c.h[j]), y = std::log(d);
    sx += x; sy += y; sxx += x * x; sxy += x * y; syy += y * y;
    ++cnt;
  }
  if (cnt < 3) throw numerical("too few levels with nonzero Omega' for an order fit");
  const double vx = sxx - sx * sx / cnt, vy = syy - sy * sy / cnt, cxy = sxy - sx * sy / cnt;
  out.slope = cxy / vx;
  out.r2 = vy > 0 ? cxy * cxy / (vx * vy) : 1.0;
  out.m = std::max(1, static_cast<int>(std::lround(out.slope)) + 1);
  return out;
}

/// Omega bounds, sup|Omega'|, weak uniformity and the order estimate.
inline ClassReport check_class_A(const HamiltonianField& H, const ActionAngleChart& c) {
  ClassReport r;
  r.omega_inf = std::numeric_limits<double>::infinity();
  for (int j = 0; j < c.n_h; ++j) {
    r.omega_inf = std::min(r.omega_inf, c.Omega[j]);
    r.omega_sup = std::max(r.omega_sup, c.Omega[j]);
    r.omega_prime_sup = std::max(r.omega_prime_sup, std::abs(c.Omega_prime[j]));
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (int i = 0; i < c.n_theta; ++i) {
      const double g = norm(H.grad(c.phi[c.idx(i, j)]));
      lo = std::min(lo, g);
      hi = std::max(hi, g);
    }
    r.weak_uniformity = std::max(r.weak_uniformity, hi / lo);
  }
  // Growth of |Omega'| over the outer quarter of the levels signals an approaching separatrix.
  const double outer = std::abs(c.Omega_prime.back());
  const double inner = std::abs(c.Omega_prime[(3 * c.n_h) / 4]);
  if (outer > 5.0 * std::max(inner, 1e-300) && outer * c.h_max() > 1e-3 * r.omega_sup) {
    r.omega_prime_unbounded = true;
    r.flags.push_back("omega_prime_unbounded");
  }
  if (r.weak_uniformity > 10.0) r.flags.push_back("weak_uniformity_large");
  const OrderEstimate m = estimate_m(c);
  r.m = m.m;
  r.fit_r2 = m.r2;
  r.fit_slope = m.slope;
  return r;
}

struct ClassP {
  double eps_unif = 0.0;
  double eps_trans = 0.0;
};

/// Uniformity and transversality measures over all chart samples.
inline ClassP check_class_P(const HamiltonianField& H, const ActionAngleChart& c) {
  ClassP p;
  std::vector<double> g2(c.n_theta);
  for (int j = 0; j < c.n_h; ++j) {
    double mean = 0.0;
    for (int i = 0; i < c.n_theta; ++i) {
      const Vec2 g = H.grad(c.phi[c.idx(i, j)]);
      g2[i] = dot(g, g);
      mean += g2[i];
    }
    mean /= c.n_theta;
    for (int i = 0; i < c.n_theta; ++i) {
      p.eps_unif = std::max(p.eps_unif, std::abs(g2[i] - mean) / g2[i]);
      const Vec2 a = c.dphi_dtheta[c.idx(i, j)], b = c.dphi_dh[c.idx(i, j)];
      p.eps_trans = std::max(p.eps_trans, std::abs(dot(a, b)) / (norm(a) * norm(b)));
    }
  }
  return p;
}

inline ClassReport class_report(const HamiltonianField& H, const ActionAngleChart& c) {
  ClassReport r = check_class_A(H, c);
  const ClassP p = check_class_P(H, c);
  r.eps_unif = p.eps_unif;
  r.eps_trans = p.eps_trans;
  if (r.eps_trans > 0.5) r.flags.push_back("transversality_poor");
  return r;
}

struct LocalBound {
  double r = 0.0;
  /// sup_{B_r(x0)} |grad H| / r
  double gradient_ratio = 0.0;
  /// radius of the component of {sign (H - h0) < r^2} around x0, divided by r
  double sublevel_ratio = 0.0;
  double lambda() const { return std::max(gradient_ratio, sublevel_ratio); }
};

/// Measures the constants of the local bounds near the elliptic point on a polar sample of B_r
/// and along rays for the sublevel component.
inline LocalBound local_bound(const HamiltonianField& H, double r, int rays = 360, int radial = 200) {
  if (!(r > 0)) throw invalid("radius must be positive");
  LocalBound b;
  b.r = r;
  const int s = H.level_sign;
  for (int a = 0; a < rays; ++a) {
    const double ang = two_pi * a / rays;
    const Vec2 e{std::cos(ang), std::sin(ang)};
    for (int k = 1; k <= radial; ++k) {
      const Vec2 p = H.x0 + e * (r * k / radial);
      b.gradient_ratio = std::max(b.gradient_ratio, norm(H.grad(p)) / r);
    }
    double lo = 0.0, hi = r / 64;
    auto below = [&](double t) { return s * (H.H(H.x0 + e * t) - H.h0) < r * r; };
    while (below(hi)) {
      lo = hi;
      hi *= 1.25;
      if (hi > 1e3 * r) throw numerical("sublevel component is unbounded along a ray");
    }
    for (int it = 0; it < 60; ++it) {
      const double m = 0.5 * (lo + hi);
      (below(m) ? lo : hi) = m;
    }
    b.sublevel_ratio = std::max(b.sublevel_ratio, hi / r);
  }
  return b;
}

}  // namespace streamlab
