#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "streamlab/core.hpp"

namespace streamlab {

/// Adaptive Dormand-Prince 5(4) settings.
struct FlowIntegratorConfig {
  double atol = 1e-12;
  double rtol = 1e-12;
  long max_steps = 2'000'000;
  /// Time tolerance for event location.
  double event_tol = 1e-13;

  void validate() const {
    if (atol < 1e-13 || atol > 1e-6 || rtol < 1e-13 || rtol > 1e-6)
      throw invalid("integrator tolerances must lie in [1e-13, 1e-6]");
    if (max_steps <= 0) throw invalid("max_steps must be positive");
  }
};

template <std::size_t N>
using State = std::array<double, N>;

template <std::size_t N, class Rhs>
class DormandPrince {
 public:
  using S = State<N>;

  DormandPrince(Rhs f, FlowIntegratorConfig cfg) : f_(std::move(f)), cfg_(cfg) { cfg_.validate(); }

  const FlowIntegratorConfig& config() const { return cfg_; }
  S rhs(double t, const S& y) const { return f_(t, y); }

  /// One explicit step of size h. Returns the fifth-order solution; `err` gets the scaled
  /// embedded error norm and `k7` the derivative at the new point.
  S step(double t, const S& y, const S& k1, double h, double& err, S& k7) const {
    S tmp, k2, k3, k4, k5, k6, yn;
    for (std::size_t i = 0; i < N; ++i) tmp[i] = y[i] + h * (0.2 * k1[i]);
    k2 = f_(t + 0.2 * h, tmp);
    for (std::size_t i = 0; i < N; ++i) tmp[i] = y[i] + h * (3.0 / 40 * k1[i] + 9.0 / 40 * k2[i]);
    k3 = f_(t + 0.3 * h, tmp);
    for (std::size_t i = 0; i < N; ++i) tmp[i] = y[i] + h * (44.0 / 45 * k1[i] - 56.0 / 15 * k2[i] + 32.0 / 9 * k3[i]);
    k4 = f_(t + 0.8 * h, tmp);
    for (std::size_t i = 0; i < N; ++i)
      tmp[i] = y[i] + h * (19372.0 / 6561 * k1[i] - 25360.0 / 2187 * k2[i] + 64448.0 / 6561 * k3[i] -
                           212.0 / 729 * k4[i]);
    k5 = f_(t + 8.0 / 9 * h, tmp);
    for (std::size_t i = 0; i < N; ++i)
      tmp[i] = y[i] + h * (9017.0 / 3168 * k1[i] - 355.0 / 33 * k2[i] + 46732.0 / 5247 * k3[i] +
                           49.0 / 176 * k4[i] - 5103.0 / 18656 * k5[i]);
    k6 = f_(t + h, tmp);
    for (std::size_t i = 0; i < N; ++i)
      yn[i] = y[i] + h * (35.0 / 384 * k1[i] + 500.0 / 1113 * k3[i] + 125.0 / 192 * k4[i] -
                          2187.0 / 6784 * k5[i] + 11.0 / 84 * k6[i]);
    k7 = f_(t + h, yn);
    double acc = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double e = h * (71.0 / 57600 * k1[i] - 71.0 / 16695 * k3[i] + 71.0 / 1920 * k4[i] -
                            17253.0 / 339200 * k5[i] + 22.0 / 525 * k6[i] - 1.0 / 40 * k7[i]);
      const double sc = cfg_.atol + cfg_.rtol * std::max(std::abs(y[i]), std::abs(yn[i]));
      acc += (e / sc) * (e / sc);
    }
    err = std::sqrt(acc / N);
    return yn;
  }

  S step_only(double t, const S& y, const S& k1, double h) const {
    double err;
    S k7;
    return step(t, y, k1, h, err, k7);
  }

  double initial_step(double t, const S& y, const S& k1, double span) const {
    double d0 = 0, d1 = 0;
    for (std::size_t i = 0; i < N; ++i) {
      const double sc = cfg_.atol + cfg_.rtol * std::abs(y[i]);
      d0 += (y[i] / sc) * (y[i] / sc);
      d1 += (k1[i] / sc) * (k1[i] / sc);
    }
    d0 = std::sqrt(d0 / N);
    d1 = std::sqrt(d1 / N);
    double h = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    (void)t;
    return std::min(h, std::abs(span));
  }

  static double next_step(double h, double err) {
    const double fac = err == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(err, -0.2), 0.2, 5.0);
    return h * fac;
  }

 private:
  Rhs f_;
  FlowIntegratorConfig cfg_;
};

/// Integrate from t0 and record the state at each requested output time (sorted ascending,
/// all >= t0). Steps are clipped to land exactly on output times.
template <std::size_t N, class Rhs>
std::vector<State<N>> integrate_outputs(const DormandPrince<N, Rhs>& dp, State<N> y, double t0,
                                        const std::vector<double>& outputs) {
  std::vector<State<N>> out;
  out.reserve(outputs.size());
  double t = t0;
  State<N> k1 = dp.rhs(t, y);
  double h = outputs.empty() ? 0.0 : dp.initial_step(t, y, k1, outputs.back() - t0);
  long steps = 0;
  for (double target : outputs) {
    while (t < target) {
      if (++steps > dp.config().max_steps) throw numerical("flow integration exhausted its step budget");
      double hs = std::min(h, target - t);
      double err;
      State<N> k7;
      State<N> yn = dp.step(t, y, k1, hs, err, k7);
      if (err <= 1.0) {
        t = (hs == target - t) ? target : t + hs;
        y = yn;
        k1 = k7;
        if (hs >= h) h = DormandPrince<N, Rhs>::next_step(hs, err);
      } else {
        h = DormandPrince<N, Rhs>::next_step(hs, err);
        if (h < 1e-14 * std::max(1.0, std::abs(t))) throw numerical("flow integration step size underflow");
      }
    }
    out.push_back(y);
  }
  return out;
}

template <std::size_t N, class Rhs>
State<N> integrate_to(const DormandPrince<N, Rhs>& dp, const State<N>& y, double t0, double t1) {
  if (t1 <= t0) return y;
  return integrate_outputs(dp, y, t0, std::vector<double>{t1}).front();
}

template <std::size_t N>
struct EventHit {
  double t = 0.0;
  State<N> y{};
};

/// Integrate until g(y) crosses zero upward (g < 0 before, g >= 0 after) at a point where
/// accept(y) holds. The crossing time is refined with a safeguarded secant on re-taken partial
/// steps, which keep the full fifth-order accuracy.
template <std::size_t N, class Rhs, class G, class Acc>
std::optional<EventHit<N>> integrate_until_event(const DormandPrince<N, Rhs>& dp, State<N> y, double t_max, G&& g,
                                                 Acc&& accept, double h_hint = 0.0) {
  double t = 0.0;
  State<N> k1 = dp.rhs(t, y);
  double h = h_hint > 0 ? h_hint : dp.initial_step(t, y, k1, t_max);
  double g_prev = g(y);
  long steps = 0;
  while (t < t_max) {
    if (++steps > dp.config().max_steps) throw numerical("flow integration exhausted its step budget");
    const double hs = std::min(h, t_max - t);
    double err;
    State<N> k7;
    State<N> yn = dp.step(t, y, k1, hs, err, k7);
    if (err > 1.0) {
      h = DormandPrince<N, Rhs>::next_step(hs, err);
      continue;
    }
    const double g_new = g(yn);
    if (g_prev < 0.0 && g_new >= 0.0 && accept(yn)) {
      double a = 0.0, b = hs, ga = g_prev, gb = g_new;
      int side = 0;
      for (int it = 0; it < 200 && (b - a) > dp.config().event_tol; ++it) {
        double s = (gb != ga) ? a - ga * (b - a) / (gb - ga) : 0.5 * (a + b);
        if (!(s > a && s < b) || it % 8 == 7) s = 0.5 * (a + b);
        const double gs = g(dp.step_only(t, y, k1, s));
        if (gs < 0.0) {
          a = s;
          ga = gs;
          if (side == -1) gb *= 0.5;
          side = -1;
        } else {
          b = s;
          gb = gs;
          if (side == 1) ga *= 0.5;
          side = 1;
        }
        if (gs == 0.0) { a = b = s; break; }
      }
      EventHit<N> hit;
      hit.t = t + b;
      hit.y = dp.step_only(t, y, k1, b);
      return hit;
    }
    t += hs;
    y = yn;
    k1 = k7;
    g_prev = g_new;
    h = DormandPrince<N, Rhs>::next_step(hs, err);
    if (h < 1e-14 * std::max(1.0, std::abs(t))) throw numerical("flow integration step size underflow");
  }
  return std::nullopt;
}

}  // namespace streamlab
