#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "streamlab/core.hpp"
#include "streamlab/domain_grid.hpp"

namespace streamlab {

/// Which closed-streamline cell a point belongs to, with that cell's level data:
/// h(x) = sqrt(sign * (H(x) - h0)). `local` is the point moved into the reference cell.
struct CellInfo {
  int id = 0;
  Vec2 local{};
  double h0 = 0.0;
  int sign = 1;
};

namespace detail {

struct HamiltonianImpl {
  virtual ~HamiltonianImpl() = default;
  virtual double value(Vec2 p) const = 0;
  virtual Vec2 grad(Vec2 p) const = 0;
  virtual Sym2 hess(Vec2 p) const = 0;
};

/// H = H(r) given through H, H'(r)/r and H''(r).
struct RadialImpl final : HamiltonianImpl {
  std::function<double(double)> Hr, g, Hpp;
  double value(Vec2 p) const override { return Hr(std::hypot(p.x, p.y)); }
  Vec2 grad(Vec2 p) const override { return p * g(std::hypot(p.x, p.y)); }
  Sym2 hess(Vec2 p) const override {
    const double r = std::hypot(p.x, p.y);
    const double gr = g(r);
    Sym2 h{gr, 0.0, gr};
    if (r > 0.0) {
      const double c = (Hpp(r) - gr) / (r * r);
      h.xx += c * p.x * p.x;
      h.xy += c * p.x * p.y;
      h.yy += c * p.y * p.y;
    }
    return h;
  }
};

/// r^2/2 + r^4/4 + eps * (1 - r^2/R^2)^2 (x^2 - y^2).
struct PerturbedImpl final : HamiltonianImpl {
  double eps = 0.0, R = 1.0;
  double value(Vec2 p) const override {
    const double s = p.x * p.x + p.y * p.y;
    const double P = (1 - s / (R * R)) * (1 - s / (R * R));
    return 0.5 * s + 0.25 * s * s + eps * P * (p.x * p.x - p.y * p.y);
  }
  Vec2 grad(Vec2 p) const override {
    const double s = p.x * p.x + p.y * p.y, Q = p.x * p.x - p.y * p.y;
    const double u = 1 - s / (R * R);
    const double P = u * u, Pp = -2 * u / (R * R);
    const double g0 = 1 + s;
    return {g0 * p.x + eps * (2 * p.x * Pp * Q + 2 * p.x * P), g0 * p.y + eps * (2 * p.y * Pp * Q - 2 * p.y * P)};
  }
  Sym2 hess(Vec2 p) const override {
    const double x = p.x, y = p.y;
    const double s = x * x + y * y, Q = x * x - y * y;
    const double u = 1 - s / (R * R);
    const double P = u * u, Pp = -2 * u / (R * R), Ppp = 2 / (R * R * R * R);
    Sym2 h{1 + s + 2 * x * x, 2 * x * y, 1 + s + 2 * y * y};
    h.xx += eps * (2 * Pp * Q + 4 * x * x * Ppp * Q + 8 * x * x * Pp + 2 * P);
    h.yy += eps * (2 * Pp * Q + 4 * y * y * Ppp * Q - 8 * y * y * Pp - 2 * P);
    h.xy += eps * (4 * x * y * Ppp * Q);
    return h;
  }
};

struct CellularImpl final : HamiltonianImpl {
  double value(Vec2 p) const override { return std::sin(p.x) * std::sin(p.y); }
  Vec2 grad(Vec2 p) const override { return {std::cos(p.x) * std::sin(p.y), std::sin(p.x) * std::cos(p.y)}; }
  Sym2 hess(Vec2 p) const override {
    const double ss = std::sin(p.x) * std::sin(p.y), cc = std::cos(p.x) * std::cos(p.y);
    return {-ss, cc, -ss};
  }
};

/// phi_c(r) * (x^2 + y^2/9) with phi_c a quintic smoothstep cutoff, 1 on r <= 1/4 and 0 on r >= 1/2.
struct EllipseImpl final : HamiltonianImpl {
  static void cutoff(double r, double& f, double& fp, double& fpp) {
    if (r <= 0.25) { f = 1; fp = fpp = 0; return; }
    if (r >= 0.5) { f = fp = fpp = 0; return; }
    const double t = (r - 0.25) * 4.0;
    f = 1 - t * t * t * (10 - 15 * t + 6 * t * t);
    fp = -4.0 * 30 * t * t * (t - 1) * (t - 1);
    fpp = -16.0 * (120 * t * t * t - 180 * t * t + 60 * t);
  }
  double value(Vec2 p) const override {
    double f, fp, fpp;
    cutoff(std::hypot(p.x, p.y), f, fp, fpp);
    return f * (p.x * p.x + p.y * p.y / 9);
  }
  Vec2 grad(Vec2 p) const override {
    const double r = std::hypot(p.x, p.y);
    double f, fp, fpp;
    cutoff(r, f, fp, fpp);
    const double Q = p.x * p.x + p.y * p.y / 9;
    Vec2 g{2 * p.x * f, 2 * p.y / 9 * f};
    if (r > 0 && fp != 0) g += p * (fp / r * Q);
    return g;
  }
  Sym2 hess(Vec2 p) const override {
    const double r = std::hypot(p.x, p.y);
    double f, fp, fpp;
    cutoff(r, f, fp, fpp);
    const double Q = p.x * p.x + p.y * p.y / 9;
    Sym2 h{2 * f, 0, 2.0 / 9 * f};
    if (r > 0 && (fp != 0 || fpp != 0)) {
      const Vec2 e = p / r;
      const Vec2 gq{2 * p.x, 2 * p.y / 9};
      // D2 phi = phi'' e e^T + phi'/r (I - e e^T)
      Sym2 dphi{fpp * e.x * e.x + fp / r * (1 - e.x * e.x), fpp * e.x * e.y - fp / r * e.x * e.y,
                fpp * e.y * e.y + fp / r * (1 - e.y * e.y)};
      const Vec2 gp = e * fp;
      h.xx += Q * dphi.xx + 2 * gp.x * gq.x;
      h.yy += Q * dphi.yy + 2 * gp.y * gq.y;
      h.xy += Q * dphi.xy + gp.x * gq.y + gp.y * gq.x;
    }
    return h;
  }
};

struct ScaledImpl final : HamiltonianImpl {
  std::shared_ptr<const HamiltonianImpl> base;
  double c = 1.0;
  double value(Vec2 p) const override { return c * base->value(p); }
  Vec2 grad(Vec2 p) const override { return base->grad(p) * c; }
  Sym2 hess(Vec2 p) const override {
    const Sym2 h = base->hess(p);
    return {c * h.xx, c * h.xy, c * h.yy};
  }
};

struct ZeroImpl final : HamiltonianImpl {
  double value(Vec2) const override { return 0.0; }
  Vec2 grad(Vec2) const override { return {}; }
  Sym2 hess(Vec2) const override { return {}; }
};

}  // namespace detail

/// Analytic Hamiltonian with its domain and the reference elliptic cell used for charts.
class HamiltonianField {
 public:
  std::string name;
  std::map<std::string, double> params;
  DomainSpec domain;
  /// Reference elliptic point, its value, and the level sign (+1 minimum, -1 maximum).
  Vec2 x0{};
  double h0 = 0.0;
  int level_sign = 1;
  /// Direction of the ray from x0 that seeds the section curve.
  Vec2 section_direction{1.0, 0.0};
  /// Default outermost chart level.
  double default_h_max = 0.0;
  bool rotationally_symmetric = false;
  bool has_elliptic_cell = true;

  double H(Vec2 p) const { return impl_->value(p); }
  Vec2 grad(Vec2 p) const { return impl_->grad(p); }
  Sym2 hess(Vec2 p) const { return impl_->hess(p); }
  Vec2 velocity(Vec2 p) const { return perp(impl_->grad(p)); }

  /// Level coordinate of the reference cell, clamped at zero.
  double level_of(Vec2 p) const { return std::sqrt(std::max(0.0, level_sign * (H(p) - h0))); }

  std::optional<CellInfo> cell(Vec2 p) const {
    if (cell_fn_) return cell_fn_(p);
    return CellInfo{0, p, h0, level_sign};
  }

  std::string describe() const {
    std::ostringstream os;
    os << name;
    if (!params.empty()) {
      os << "(";
      bool first = true;
      for (auto& [k, v] : params) {
        os << (first ? "" : ", ") << k << "=" << v;
        first = false;
      }
      os << ")";
    }
    os << " on " << domain.describe();
    return os.str();
  }

  std::shared_ptr<const detail::HamiltonianImpl> impl_;
  std::function<std::optional<CellInfo>(Vec2)> cell_fn_;
};

using HamiltonianPtr = std::shared_ptr<const HamiltonianField>;

inline double param_or(const std::map<std::string, double>& p, const std::string& key, double fallback) {
  auto it = p.find(key);
  return it == p.end() ? fallback : it->second;
}

/// Preset names: rotation, radial_m2, radial_m1 (a), perturbed (eps), cellular, ellipse_localized, zero.
/// Every preset accepts an optional positive `scale` multiplying H.
inline HamiltonianPtr preset(const std::string& name, const std::map<std::string, double>& params = {},
                             std::optional<DomainSpec> domain = std::nullopt) {
  auto H = std::make_shared<HamiltonianField>();
  H->name = name;
  H->params = params;
  auto disk_domain = [&]() {
    DomainSpec d = domain.value_or(DomainSpec::disk(1.0));
    if (d.kind != DomainKind::disk) throw invalid("preset '" + name + "' lives on a disk");
    d.validate();
    return d;
  };
  auto radial = [&](std::function<double(double)> Hr, std::function<double(double)> g,
                    std::function<double(double)> Hpp) {
    auto impl = std::make_shared<detail::RadialImpl>();
    impl->Hr = std::move(Hr);
    impl->g = std::move(g);
    impl->Hpp = std::move(Hpp);
    H->impl_ = impl;
    H->domain = disk_domain();
    H->rotationally_symmetric = true;
    const double R = H->domain.size;
    H->default_h_max = std::sqrt(impl->Hr(R));
  };
  for (auto& [k, v] : params)
    if (!std::isfinite(v)) throw invalid("parameter '" + k + "' is not finite");

  if (name == "rotation") {
    radial([](double r) { return 0.5 * r * r; }, [](double) { return 1.0; }, [](double) { return 1.0; });
  } else if (name == "radial_m2") {
    radial([](double r) { return 0.5 * r * r + 0.25 * r * r * r * r; }, [](double r) { return 1.0 + r * r; },
           [](double r) { return 1.0 + 3.0 * r * r; });
  } else if (name == "radial_m1") {
    const double a = param_or(params, "a", 0.4);
    if (a < 0) throw invalid("radial_m1 needs a >= 0");
    H->params["a"] = a;
    radial([a](double r) { return 0.5 * r * r + a * r * r * r; }, [a](double r) { return 1.0 + 3.0 * a * r; },
           [a](double r) { return 1.0 + 6.0 * a * r; });
  } else if (name == "perturbed") {
    const double eps = param_or(params, "eps", 0.1);
    if (!(eps >= 0.0 && eps < 0.25)) throw invalid("perturbed needs eps in [0, 1/4)");
    H->params["eps"] = eps;
    auto impl = std::make_shared<detail::PerturbedImpl>();
    H->domain = disk_domain();
    impl->eps = eps;
    impl->R = H->domain.size;
    H->impl_ = impl;
    H->rotationally_symmetric = eps == 0.0;
    const double R = H->domain.size;
    H->default_h_max = std::sqrt(0.5 * R * R + 0.25 * R * R * R * R);
  } else if (name == "cellular") {
    if (domain && (domain->kind != DomainKind::torus || std::abs(domain->size - two_pi) > 1e-12))
      throw invalid("cellular lives on the torus of side 2*pi");
    H->impl_ = std::make_shared<detail::CellularImpl>();
    H->domain = DomainSpec::torus(two_pi);
    H->x0 = {pi / 2, pi / 2};
    H->h0 = 1.0;
    H->level_sign = -1;
    H->default_h_max = std::sqrt(1.0 - 2e-4);
    H->cell_fn_ = [](Vec2 p) -> std::optional<CellInfo> {
      double x = std::fmod(p.x, two_pi), y = std::fmod(p.y, two_pi);
      if (x < 0) x += two_pi;
      if (y < 0) y += two_pi;
      const int cx = x < pi ? 0 : 1, cy = y < pi ? 0 : 1;
      CellInfo c;
      c.id = cx + 2 * cy;
      c.local = {x - cx * pi, y - cy * pi};
      const bool positive = (cx + cy) % 2 == 0;
      c.h0 = positive ? 1.0 : -1.0;
      c.sign = positive ? -1 : 1;
      return c;
    };
  } else if (name == "ellipse_localized") {
    if (domain && (domain->kind != DomainKind::torus || std::abs(domain->size - 1.0) > 1e-12))
      throw invalid("ellipse_localized lives on the unit torus");
    H->impl_ = std::make_shared<detail::EllipseImpl>();
    H->domain = DomainSpec::torus(1.0, {-0.5, -0.5});
    H->default_h_max = 0.09;
  } else if (name == "zero") {
    H->impl_ = std::make_shared<detail::ZeroImpl>();
    H->domain = domain.value_or(DomainSpec::torus(1.0));
    H->domain.validate();
    H->rotationally_symmetric = H->domain.kind == DomainKind::disk;
    H->has_elliptic_cell = false;
  } else {
    throw invalid("unknown preset '" + name + "'");
  }
  if (auto it = params.find("scale"); it != params.end() && it->second != 1.0) {
    const double c = it->second;
    if (!(c > 0)) throw invalid("scale must be positive");
    auto sc = std::make_shared<detail::ScaledImpl>();
    sc->base = H->impl_;
    sc->c = c;
    H->impl_ = sc;
    H->h0 *= c;
    H->default_h_max *= std::sqrt(c);
    if (H->cell_fn_) {
      auto inner = H->cell_fn_;
      H->cell_fn_ = [inner, c](Vec2 p) {
        auto ci = inner(p);
        if (ci) ci->h0 *= c;
        return ci;
      };
    }
  }
  return H;
}

/// Spread of H over the boundary circle (zero for torus domains).
inline double boundary_spread(const HamiltonianField& H, int samples = 720) {
  if (H.domain.kind != DomainKind::disk) return 0.0;
  double lo = 1e300, hi = -1e300;
  for (int k = 0; k < samples; ++k) {
    const double a = two_pi * k / samples;
    const double v = H.H({H.domain.size * std::cos(a), H.domain.size * std::sin(a)});
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return hi - lo;
}

enum class CriticalType { elliptic, hyperbolic, degenerate };

inline const char* to_string(CriticalType t) {
  return t == CriticalType::elliptic ? "elliptic" : t == CriticalType::hyperbolic ? "hyperbolic" : "degenerate";
}

struct CriticalPoint {
  Vec2 point;
  CriticalType type;
  double value;
};

struct CriticalPointSearch {
  std::vector<CriticalPoint> points;
  int failed_seeds = 0;
};

/// Newton search for zeros of grad H from a lattice of seeds; duplicates within 1e-8 merged.
inline CriticalPointSearch critical_points(const HamiltonianField& H, int lattice = 12) {
  CriticalPointSearch out;
  std::vector<Vec2> seeds;
  const DomainSpec& d = H.domain;
  if (d.kind == DomainKind::disk) {
    seeds.push_back({0.0, 0.0});
    for (int i = 1; i <= lattice / 2; ++i)
      for (int j = 0; j < lattice; ++j) {
        const double r = 0.95 * d.size * i / (lattice / 2), a = two_pi * (j + 0.5 * (i % 2)) / lattice;
        seeds.push_back({r * std::cos(a), r * std::sin(a)});
      }
  } else {
    for (int i = 0; i <= lattice; ++i)
      for (int j = 0; j <= lattice; ++j)
        seeds.push_back({d.origin.x + d.size * i / lattice, d.origin.y + d.size * j / lattice});
  }
  auto wrap = [&](Vec2 p) {
    if (d.kind == DomainKind::torus) {
      p.x = d.origin.x + std::fmod(std::fmod(p.x - d.origin.x, d.size) + d.size, d.size);
      p.y = d.origin.y + std::fmod(std::fmod(p.y - d.origin.y, d.size) + d.size, d.size);
    }
    return p;
  };
  for (Vec2 x : seeds) {
    bool ok = false;
    for (int it = 0; it < 60; ++it) {
      const Vec2 g = H.grad(x);
      const Sym2 J = H.hess(x);
      const double det = J.det();
      if (std::abs(det) < 1e-14) break;
      const Vec2 dx{(J.yy * g.x - J.xy * g.y) / det, (-J.xy * g.x + J.xx * g.y) / det};
      x = x - dx;
      if (norm(dx) < 1e-14 * std::max(1.0, norm(x))) {
        ok = norm(H.grad(x)) < 1e-10;
        break;
      }
    }
    if (d.kind == DomainKind::disk && norm(x) > d.size) ok = false;
    if (!ok) {
      ++out.failed_seeds;
      continue;
    }
    x = wrap(x);
    const double det = H.hess(x).det();
    if (std::abs(det) < 1e-12) {
      ++out.failed_seeds;
      continue;
    }
    bool dup = false;
    for (auto& c : out.points) {
      Vec2 dd = c.point - x;
      if (d.kind == DomainKind::torus) {
        dd.x -= d.size * std::round(dd.x / d.size);
        dd.y -= d.size * std::round(dd.y / d.size);
      }
      if (norm(dd) < 1e-8) dup = true;
    }
    if (dup) continue;
    out.points.push_back({x, det > 0 ? CriticalType::elliptic : CriticalType::hyperbolic, H.H(x)});
  }
  return out;
}

}  // namespace streamlab
