#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "streamlab/chart.hpp"

namespace streamlab {

struct Interval {
  double lo = 0.0, hi = 0.0;
  double length() const { return hi - lo; }
  bool contains(double x) const { return x >= lo && x <= hi; }
};

inline bool overlaps(const Interval& a, const Interval& b) { return a.lo < b.hi && b.lo < a.hi; }

/// Sorted, merged union of intervals.
inline std::vector<Interval> merge_intervals(std::vector<Interval> v) {
  std::sort(v.begin(), v.end(), [](const Interval& a, const Interval& b) { return a.lo < b.lo; });
  std::vector<Interval> out;
  for (const auto& iv : v) {
    if (!out.empty() && iv.lo <= out.back().hi)
      out.back().hi = std::max(out.back().hi, iv.hi);
    else
      out.push_back(iv);
  }
  return out;
}

inline double distance_to(const std::vector<Interval>& set, double x) {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& iv : set) d = std::min(d, x < iv.lo ? iv.lo - x : (x > iv.hi ? x - iv.hi : 0.0));
  return d;
}

enum class Regime { low, high, automatic };

inline const char* to_string(Regime r) { return r == Regime::low ? "low" : r == Regime::high ? "high" : "auto"; }

struct ThinSetOptions {
  double lambda = 0.0;
  double delta = 0.05;
  int m = 2;
  int K = 40;
  Regime regime = Regime::automatic;
  /// 0 selects 0.05 inf Omega.
  double gamma0 = 0.0;
  double C0 = 4.0;
  double C1 = 8.0;
  /// 0 selects the measured value 2 / c~ + 1.
  double Cstar = 0.0;
};

struct ModeSets {
  int k = 0;
  std::vector<Interval> E, thick;
  /// Anchor h_k in E outside Q_delta, and its neighbourhood radius (32 C* delta or 32 C* / |k|).
  double anchor = 0.0;
  double radius = 0.0;
  /// Whether thick minus Q_delta lies within C* delta (resp. C*/|k|) of the anchor.
  bool inclusion = true;
  /// False when E lies entirely inside Q_delta; such modes carry no anchor and skip the certificate.
  bool anchored = true;
  Interval neighbourhood() const { return {anchor - radius, anchor + radius}; }
};

struct ThinSetCover {
  double lambda = 0.0, delta = 0.0;
  int m = 0, K = 0;
  Regime regime = Regime::low;
  double gamma0 = 0.0, C0 = 0.0, C1 = 0.0, Cstar = 0.0;
  Interval I{};
  Interval center{};
  std::vector<ModeSets> modes;
  bool disjoint = true;
  std::optional<std::pair<int, int>> violating;
  /// Result of the independent pairwise recheck.
  bool brute_force_disjoint = true;
  bool consistent() const { return disjoint == brute_force_disjoint; }

  std::string render() const {
    std::ostringstream os;
    os << "[thin_sets]\nlambda = " << lambda << "\ndelta = " << delta << "\nm = " << m << "\nK = " << K
       << "\nregime = " << to_string(regime) << "\ngamma0 = " << gamma0 << "\nC0 = " << C0 << "\nC1 = " << C1
       << "\nCstar = " << Cstar << "\ncenter_band = [0, " << center.hi << "]\n";
    for (const auto& s : modes) {
      os << "k = " << s.k << " E =";
      for (auto& iv : s.E) os << " [" << iv.lo << ", " << iv.hi << "]";
      os << " thick =";
      for (auto& iv : s.thick) os << " [" << iv.lo << ", " << iv.hi << "]";
      os << " anchor = " << s.anchor << " radius = " << s.radius << " inclusion = " << (s.inclusion ? "yes" : "no")
         << "\n";
    }
    os << "certificate = " << (disjoint ? "disjoint" : "overlap");
    if (violating) os << " (" << violating->first << ", " << violating->second << ")";
    os << "\nbrute_force = " << (brute_force_disjoint ? "disjoint" : "overlap") << "\n";
    return os.str();
  }
};

/// {h in [h_a, h_b] : |Omega(h) - c| < w} for Omega linear between the tabulated values.
inline std::vector<Interval> level_band(const std::vector<double>& h, const std::vector<double>& Om, double c, double w) {
  std::vector<Interval> out;
  for (size_t j = 0; j + 1 < h.size(); ++j) {
    const double a = Om[j] - c, b = Om[j + 1] - c;
    const double h0 = h[j], h1 = h[j + 1];
    // Solve |a + (b - a) s| < w for s in [0, 1].
    double slo = 0.0, shi = 1.0;
    const double d = b - a;
    if (d == 0.0) {
      if (std::abs(a) >= w) continue;
    } else {
      double s1 = (-w - a) / d, s2 = (w - a) / d;
      if (s1 > s2) std::swap(s1, s2);
      slo = std::max(slo, s1);
      shi = std::min(shi, s2);
      if (slo >= shi) continue;
    }
    out.push_back({h0 + slo * (h1 - h0), h0 + shi * (h1 - h0)});
  }
  return merge_intervals(out);
}

inline ThinSetCover thin_sets(const std::vector<double>& h, const std::vector<double>& Omega,
                              const std::vector<double>& Omega_prime, const ThinSetOptions& opt) {
  if (!(opt.delta > 0 && opt.delta < 0.25)) throw invalid("delta must lie in (0, 1/4)");
  if (opt.m < 1) throw invalid("m must be a positive integer");
  if (opt.K < 1) throw invalid("mode cap K must be positive");
  if (h.size() < 2 || h.size() != Omega.size() || h.size() != Omega_prime.size())
    throw invalid("tabulated frequency data is inconsistent");
  ThinSetCover c;
  c.lambda = opt.lambda;
  c.delta = opt.delta;
  c.m = opt.m;
  c.K = opt.K;
  c.C0 = opt.C0;
  c.C1 = opt.C1;
  c.I = {h.front(), h.back()};
  c.center = {0.0, opt.C0 * opt.delta};
  const double om_inf = *std::min_element(Omega.begin(), Omega.end());
  c.gamma0 = opt.gamma0 > 0 ? opt.gamma0 : 0.05 * om_inf;
  if (opt.regime == Regime::automatic)
    c.regime = std::abs(opt.lambda) > c.gamma0 / opt.delta ? Regime::high : Regime::low;
  else
    c.regime = opt.regime;

  const double dm1 = std::pow(opt.delta, opt.m - 1);
  if (opt.Cstar > 0) {
    c.Cstar = opt.Cstar;
  } else {
    double inf_d = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < h.size(); ++j)
      if (h[j] >= opt.delta) inf_d = std::min(inf_d, std::abs(Omega_prime[j]));
    if (!std::isfinite(inf_d) || inf_d <= 0) throw numerical("Omega' vanishes outside the centre band; C* undefined");
    c.Cstar = 2.0 / (inf_d / dm1) + 1.0;
  }

  for (int k = -opt.K; k <= opt.K; ++k) {
    if (k == 0) continue;
    const int ak = std::abs(k);
    const bool low = c.regime == Regime::low;
    const double w = low ? std::pow(opt.delta, opt.m) : dm1 / (opt.C1 * ak);
    const double thick = low ? opt.delta : 1.0 / ak;
    ModeSets s;
    s.k = k;
    s.E = level_band(h, Omega, opt.lambda / k, w);
    if (s.E.empty()) continue;
    std::vector<Interval> t;
    for (const auto& iv : s.E) t.push_back({std::max(c.I.lo, iv.lo - thick), std::min(c.I.hi, iv.hi + thick)});
    s.thick = merge_intervals(t);
    // Anchor: the exact crossing Omega = lambda/k if present outside Q_delta, else the midpoint of E there.
    std::optional<double> anchor;
    const double target = opt.lambda / k;
    for (size_t j = 0; j + 1 < h.size() && !anchor; ++j) {
      const double a = Omega[j] - target, b = Omega[j + 1] - target;
      if ((a <= 0 && b >= 0) || (a >= 0 && b <= 0)) {
        const double x = a == b ? h[j] : h[j] + (h[j + 1] - h[j]) * a / (a - b);
        if (x > opt.delta) anchor = x;
      }
    }
    if (!anchor)
      for (const auto& iv : s.E)
        if (iv.hi > opt.delta) {
          anchor = 0.5 * (std::max(iv.lo, opt.delta) + iv.hi);
          break;
        }
    if (!anchor) {
      s.anchored = false;
      c.modes.push_back(std::move(s));
      continue;
    }
    s.anchor = *anchor;
    const double base = low ? c.Cstar * opt.delta : c.Cstar / ak;
    s.radius = 32.0 * base;
    for (const auto& iv : s.thick) {
      const double lo = std::max(iv.lo, opt.delta);
      if (lo >= iv.hi) continue;
      if (lo < s.anchor - base || iv.hi > s.anchor + base) s.inclusion = false;
    }
    c.modes.push_back(std::move(s));
  }

  // Sort-and-sweep certificate over the neighbourhoods.
  std::vector<std::pair<Interval, int>> nb;
  for (const auto& s : c.modes)
    if (s.anchored) nb.push_back({s.neighbourhood(), s.k});
  std::sort(nb.begin(), nb.end(), [](auto& a, auto& b) { return a.first.lo < b.first.lo; });
  double reach = -std::numeric_limits<double>::infinity();
  int reach_k = 0;
  for (const auto& [iv, k] : nb) {
    if (iv.lo < reach) {
      c.disjoint = false;
      c.violating = std::make_pair(reach_k, k);
      break;
    }
    if (iv.hi > reach) {
      reach = iv.hi;
      reach_k = k;
    }
  }
  for (size_t a = 0; a < c.modes.size(); ++a)
    for (size_t b = a + 1; b < c.modes.size(); ++b)
      if (c.modes[a].anchored && c.modes[b].anchored && overlaps(c.modes[a].neighbourhood(), c.modes[b].neighbourhood())) c.brute_force_disjoint = false;
  return c;
}

inline ThinSetCover thin_sets(const ActionAngleChart& chart, const ThinSetOptions& opt) {
  return thin_sets(chart.h, chart.Omega, chart.Omega_prime, opt);
}

}  // namespace streamlab
