#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "streamlab/core.hpp"
#include "streamlab/evolve.hpp"

namespace streamlab::lab {

/// Two-sided 97.5% Student t quantile.
inline double t_quantile_975(int df) {
  static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
                                 2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
                                 2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  if (df < 1) return std::numeric_limits<double>::infinity();
  if (df <= 30) return table[df - 1];
  if (df <= 60) return 2.000 + (2.042 - 2.000) * (60.0 - df) / 30.0;
  return 1.960 + 0.04 * 60.0 / df;
}

struct LinearFit {
  double slope = 0.0, intercept = 0.0;
  double r2 = 0.0;
  double slope_se = 0.0;
  /// 95% confidence half-width of the slope.
  double half_width = 0.0;
  int n = 0;
};

inline LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw invalid("fit arrays differ in length");
  const int n = static_cast<int>(x.size());
  if (n < 2) throw invalid("a line fit needs at least two points");
  double mx = 0, my = 0;
  for (int i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (int i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0) throw invalid("fit abscissae are all equal");
  LinearFit f;
  f.n = n;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  const double sse = std::max(0.0, syy - f.slope * sxy);
  f.r2 = syy > 0 ? std::clamp(1.0 - sse / syy, 0.0, 1.0) : 1.0;
  if (n > 2) {
    f.slope_se = std::sqrt(sse / (n - 2) / sxx);
    f.half_width = t_quantile_975(n - 2) * f.slope_se;
  }
  return f;
}

/// Window edges as fractions of the initial norm.
struct WindowPolicy {
  double upper = 0.5;
  double lower = 0.01;
};

struct RateFit {
  double t_start = 0.0, t_end = 0.0;
  std::optional<double> rate;
  double r2 = 0.0;
  int points = 0;
  std::string flag;
  bool ok() const { return rate.has_value(); }
};

/// Regression of log ||g|| on t between the first drops to upper and lower times ||g(0)||.
inline RateFit fit_decay_rate(const std::vector<double>& t, const std::vector<double>& g,
                              const WindowPolicy& win = {}) {
  if (t.size() != g.size() || t.empty()) throw invalid("energy series is empty or ragged");
  if (!(win.upper < 1 && win.lower > 0 && win.lower < win.upper)) throw invalid("bad fit window");
  RateFit r;
  const double g0 = g.front();
  if (!(g0 > 0)) throw invalid("energy series starts at zero");
  size_t i1 = t.size(), i2 = t.size();
  for (size_t i = 0; i < t.size(); ++i) {
    if (i1 == t.size() && g[i] <= win.upper * g0) i1 = i;
    if (g[i] <= win.lower * g0) {
      i2 = i;
      break;
    }
  }
  if (i1 == t.size() || i2 == t.size() || i2 <= i1 + 1) {
    r.flag = "insufficient_decay";
    return r;
  }
  std::vector<double> x, y;
  for (size_t i = i1; i <= i2; ++i) {
    if (!(g[i] > 0)) {
      r.flag = "nonpositive_energy";
      return r;
    }
    x.push_back(t[i]);
    y.push_back(std::log(g[i]));
  }
  const LinearFit f = linear_fit(x, y);
  r.t_start = t[i1];
  r.t_end = t[i2];
  r.rate = -f.slope;
  r.r2 = f.r2;
  r.points = f.n;
  return r;
}

inline RateFit fit_decay_rate(const EnergySeries& s, const WindowPolicy& win = {}) {
  return fit_decay_rate(s.t, s.l2, win);
}

/// log(rate) against log(nu).
struct ScalingFit {
  double alpha = 0.0;
  double half_width = 0.0;
  double prefactor = 0.0;
  double r2 = 0.0;
};

inline ScalingFit scaling_fit(const std::vector<double>& nu, const std::vector<double>& rate) {
  std::vector<double> x, y;
  for (size_t i = 0; i < nu.size(); ++i) {
    if (!(nu[i] > 0 && rate[i] > 0)) throw invalid("scaling fit needs positive data");
    x.push_back(std::log(nu[i]));
    y.push_back(std::log(rate[i]));
  }
  const LinearFit f = linear_fit(x, y);
  return {f.slope, f.half_width, std::exp(f.intercept), f.r2};
}

}  // namespace streamlab::lab
