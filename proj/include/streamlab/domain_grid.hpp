#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <memory>
#include <random>
#include <sstream>
#include <vector>

#include "streamlab/core.hpp"

namespace streamlab {

enum class DomainKind { disk, torus };
enum class Boundary { dirichlet, neumann, periodic };

inline const char* to_string(Boundary b) {
  switch (b) {
    case Boundary::dirichlet: return "dirichlet";
    case Boundary::neumann: return "neumann";
    default: return "periodic";
  }
}

/// Disk of given radius centred at the origin, or a square flat torus [origin, origin + side)^2.
struct DomainSpec {
  DomainKind kind = DomainKind::disk;
  double size = 1.0;
  Boundary boundary = Boundary::dirichlet;
  Vec2 origin{};

  static DomainSpec disk(double radius, Boundary bc = Boundary::dirichlet) {
    return {DomainKind::disk, radius, bc, {}};
  }
  static DomainSpec torus(double side, Vec2 origin = {}) {
    return {DomainKind::torus, side, Boundary::periodic, origin};
  }

  void validate() const {
    if (!(size > 0.0)) throw invalid("domain size must be positive");
    if (kind == DomainKind::disk && boundary == Boundary::periodic)
      throw invalid("disk domains take dirichlet or neumann boundaries");
    if (kind == DomainKind::torus && boundary != Boundary::periodic)
      throw invalid("torus domains are periodic");
  }

  double area() const { return kind == DomainKind::disk ? pi * size * size : size * size; }

  std::string describe() const {
    std::ostringstream os;
    if (kind == DomainKind::disk)
      os << "disk(radius=" << size << ")";
    else
      os << "torus(side=" << size << ", origin=(" << origin.x << "," << origin.y << "))";
    os << " boundary=" << to_string(boundary);
    return os.str();
  }
};

/// Cell counts. Disk: (radial, angular). Torus: (x, y).
struct Resolution {
  int n1 = 0;
  int n2 = 0;
};

/// Structured grid. Polar grids are ring-major with r_i = (i+1/2)dr, phi_j = j dphi;
/// torus grids are cell-centred with x_i = origin + (i+1/2)dx.
class Grid {
 public:
  DomainSpec domain;
  int n1 = 0, n2 = 0;
  double d1 = 0.0, d2 = 0.0;
  std::vector<Vec2> nodes;
  Eigen::VectorXd weights;

  bool polar() const { return domain.kind == DomainKind::disk; }
  int size() const { return n1 * n2; }
  int index(int i, int j) const { return i * n2 + j; }
  int wrap2(int j) const { return ((j % n2) + n2) % n2; }
  int wrap1(int i) const { return ((i % n1) + n1) % n1; }
  double radius(int i) const { return (i + 0.5) * d1; }
  double angle(int j) const { return j * d2; }
  /// Smallest node spacing (used for stability limits).
  double min_spacing() const { return polar() ? std::min(d1, radius(0) * d2) : std::min(d1, d2); }

  /// Shortest displacement a - b on the torus; plain difference on the disk.
  Vec2 displacement(Vec2 a, Vec2 b) const {
    Vec2 d = a - b;
    if (!polar()) {
      const double L = domain.size;
      d.x -= L * std::round(d.x / L);
      d.y -= L * std::round(d.y / L);
    }
    return d;
  }

  std::string describe() const {
    std::ostringstream os;
    os << domain.describe() << " resolution=" << n1 << "x" << n2
       << (polar() ? " (polar r x theta)" : " (cartesian)");
    return os.str();
  }
};

using GridPtr = std::shared_ptr<const Grid>;

inline GridPtr build_grid(const DomainSpec& spec, Resolution res) {
  spec.validate();
  if (res.n1 < 16 || res.n2 < 16) throw invalid("grid resolution must be at least 16 per axis");
  auto g = std::make_shared<Grid>();
  g->domain = spec;
  g->n1 = res.n1;
  g->n2 = res.n2;
  g->nodes.resize(static_cast<size_t>(res.n1) * res.n2);
  g->weights.resize(res.n1 * res.n2);
  if (spec.kind == DomainKind::disk) {
    if (res.n2 % 2 != 0) throw invalid("polar grids need an even angular count");
    g->d1 = spec.size / res.n1;
    g->d2 = two_pi / res.n2;
    for (int i = 0; i < res.n1; ++i) {
      const double r = (i + 0.5) * g->d1;
      for (int j = 0; j < res.n2; ++j) {
        const double phi = j * g->d2;
        g->nodes[g->index(i, j)] = {r * std::cos(phi), r * std::sin(phi)};
        g->weights[g->index(i, j)] = r * g->d1 * g->d2;
      }
    }
  } else {
    if (res.n1 != res.n2) throw invalid("torus grids are square");
    g->d1 = spec.size / res.n1;
    g->d2 = spec.size / res.n2;
    const double w = g->d1 * g->d2;
    for (int i = 0; i < res.n1; ++i)
      for (int j = 0; j < res.n2; ++j) {
        g->nodes[g->index(i, j)] = {spec.origin.x + (i + 0.5) * g->d1, spec.origin.y + (j + 0.5) * g->d2};
        g->weights[g->index(i, j)] = w;
      }
  }
  return g;
}

template <class T>
struct BasicField {
  GridPtr grid;
  Eigen::Matrix<T, Eigen::Dynamic, 1> values;

  BasicField() = default;
  explicit BasicField(GridPtr g) : grid(std::move(g)), values(Eigen::Matrix<T, Eigen::Dynamic, 1>::Zero(grid->size())) {}
  BasicField(GridPtr g, Eigen::Matrix<T, Eigen::Dynamic, 1> v) : grid(std::move(g)), values(std::move(v)) {
    if (values.size() != grid->size()) throw invalid("field size does not match grid");
  }
  int size() const { return static_cast<int>(values.size()); }
};

using ScalarField = BasicField<double>;
using ComplexField = BasicField<cplx>;

template <class F>
ScalarField sample(GridPtr grid, F&& fn) {
  ScalarField f(grid);
  for (int n = 0; n < grid->size(); ++n) f.values[n] = fn(grid->nodes[n]);
  return f;
}

using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<double>;

/// Five-point Laplacian. Polar grids use the finite-volume form with zero flux through the
/// pole face, so W * Lap is symmetric (W = quadrature weights). Dirichlet uses an odd ghost,
/// Neumann an even ghost, both placed half a cell outside the boundary circle.
inline SparseMatrix laplacian_matrix(const Grid& g) {
  std::vector<Triplet> t;
  t.reserve(static_cast<size_t>(g.size()) * 5);
  if (g.polar()) {
    const double dr = g.d1, dp = g.d2;
    const double ghost = g.domain.boundary == Boundary::dirichlet ? -1.0 : 1.0;
    for (int i = 0; i < g.n1; ++i) {
      const double r = g.radius(i);
      const double rm = i * dr, rp = (i + 1) * dr;
      const double cm = rm / (r * dr * dr), cp = rp / (r * dr * dr);
      const double ca = 1.0 / (r * r * dp * dp);
      for (int j = 0; j < g.n2; ++j) {
        const int n = g.index(i, j);
        double diag = -cm - cp - 2.0 * ca;
        if (i > 0) t.emplace_back(n, g.index(i - 1, j), cm);
        if (i + 1 < g.n1)
          t.emplace_back(n, g.index(i + 1, j), cp);
        else
          diag += ghost * cp;
        t.emplace_back(n, g.index(i, g.wrap2(j + 1)), ca);
        t.emplace_back(n, g.index(i, g.wrap2(j - 1)), ca);
        t.emplace_back(n, n, diag);
      }
    }
  } else {
    const double cx = 1.0 / (g.d1 * g.d1), cy = 1.0 / (g.d2 * g.d2);
    for (int i = 0; i < g.n1; ++i)
      for (int j = 0; j < g.n2; ++j) {
        const int n = g.index(i, j);
        t.emplace_back(n, g.index(g.wrap1(i + 1), j), cx);
        t.emplace_back(n, g.index(g.wrap1(i - 1), j), cx);
        t.emplace_back(n, g.index(i, g.wrap2(j + 1)), cy);
        t.emplace_back(n, g.index(i, g.wrap2(j - 1)), cy);
        t.emplace_back(n, n, -2.0 * (cx + cy));
      }
  }
  SparseMatrix L(g.size(), g.size());
  L.setFromTriplets(t.begin(), t.end());
  return L;
}

inline ScalarField laplacian(const ScalarField& f) {
  return ScalarField(f.grid, laplacian_matrix(*f.grid) * f.values);
}

/// Centred-difference matrix of u.grad with u = perp(grad H) evaluated analytically at nodes,
/// symmetrised to (N - W^-1 N^T W)/2 so that it is exactly skew-adjoint in the weighted product.
/// `Ham` needs `Vec2 grad(Vec2) const`.
template <class Ham>
SparseMatrix advection_matrix(const Grid& g, const Ham& H) {
  std::vector<Triplet> t;
  t.reserve(static_cast<size_t>(g.size()) * 4);
  if (g.polar()) {
    const double dr = g.d1, dp = g.d2;
    const double ghost = g.domain.boundary == Boundary::dirichlet ? -1.0 : 1.0;
    const int half = g.n2 / 2;
    for (int i = 0; i < g.n1; ++i) {
      const double r = g.radius(i);
      for (int j = 0; j < g.n2; ++j) {
        const int n = g.index(i, j);
        const double phi = g.angle(j);
        const double c = std::cos(phi), s = std::sin(phi);
        const Vec2 gh = H.grad(g.nodes[n]);
        const double ur = gh.x * s - gh.y * c;
        const double uphi = gh.x * c + gh.y * s;
        const double a = uphi / (r * 2.0 * dp);
        t.emplace_back(n, g.index(i, g.wrap2(j + 1)), a);
        t.emplace_back(n, g.index(i, g.wrap2(j - 1)), -a);
        const double b = ur / (2.0 * dr);
        if (i + 1 < g.n1)
          t.emplace_back(n, g.index(i + 1, j), b);
        else
          t.emplace_back(n, n, ghost * b);
        if (i > 0)
          t.emplace_back(n, g.index(i - 1, j), -b);
        else
          t.emplace_back(n, g.index(0, g.wrap2(j + half)), -b);
      }
    }
  } else {
    for (int i = 0; i < g.n1; ++i)
      for (int j = 0; j < g.n2; ++j) {
        const int n = g.index(i, j);
        const Vec2 gh = H.grad(g.nodes[n]);
        const double ax = -gh.y / (2.0 * g.d1), ay = gh.x / (2.0 * g.d2);
        t.emplace_back(n, g.index(g.wrap1(i + 1), j), ax);
        t.emplace_back(n, g.index(g.wrap1(i - 1), j), -ax);
        t.emplace_back(n, g.index(i, g.wrap2(j + 1)), ay);
        t.emplace_back(n, g.index(i, g.wrap2(j - 1)), -ay);
      }
  }
  SparseMatrix N(g.size(), g.size());
  N.setFromTriplets(t.begin(), t.end());
  const Eigen::VectorXd& w = g.weights;
  const Eigen::VectorXd winv = w.cwiseInverse();
  SparseMatrix adj = SparseMatrix(N.transpose());
  adj = winv.asDiagonal() * adj * w.asDiagonal();
  SparseMatrix A = 0.5 * (N - adj);
  A.prune(0.0);
  return A;
}

template <class Ham>
ScalarField advection(const Ham& H, const ScalarField& f) {
  return ScalarField(f.grid, advection_matrix(*f.grid, H) * f.values);
}

template <class T>
double inner(const BasicField<T>& a, const BasicField<T>& b) {
  if (a.size() != b.size()) throw invalid("inner product of fields on different grids");
  const auto& w = a.grid->weights;
  double s = 0.0;
  for (int n = 0; n < a.size(); ++n) s += w[n] * std::real(a.values[n] * std::conj(b.values[n]));
  return s;
}

inline double weighted_norm(const Eigen::VectorXd& w, const Eigen::VectorXd& v) {
  return std::sqrt(w.dot(v.cwiseAbs2()));
}

template <class T>
double norm(const BasicField<T>& f, int p = 2) {
  const auto& w = f.grid->weights;
  if (p == 1) {
    double s = 0.0;
    for (int n = 0; n < f.size(); ++n) s += w[n] * std::abs(f.values[n]);
    return s;
  }
  if (p != 2) throw invalid("only L1 and L2 norms are supported");
  double s = 0.0;
  for (int n = 0; n < f.size(); ++n) s += w[n] * std::norm(f.values[n]);
  return std::sqrt(s);
}

inline double mass(const ScalarField& f) { return f.grid->weights.dot(f.values); }

/// Discrete H1 seminorm consistent with the Laplacian: ||grad f||^2 = -<Lap f, f>.
inline double grad_norm(const SparseMatrix& lap, const Eigen::VectorXd& w, const Eigen::VectorXd& f) {
  const double v = -(w.cwiseProduct(f)).dot(lap * f);
  return std::sqrt(std::max(0.0, v));
}

/// Bilinear interpolation of a grid field at a point. Polar grids interpolate across the pole
/// through the opposite node and use the boundary ghost beyond the outer ring.
inline double interpolate(const Grid& g, const Eigen::VectorXd& v, Vec2 p) {
  if (g.polar()) {
    double r = std::hypot(p.x, p.y);
    double phi = std::atan2(p.y, p.x);
    if (phi < 0) phi += two_pi;
    auto ring_value = [&](int i, double ph) {
      double s = ph / g.d2;
      int j0 = static_cast<int>(std::floor(s));
      double a = s - j0;
      return (1 - a) * v[g.index(i, g.wrap2(j0))] + a * v[g.index(i, g.wrap2(j0 + 1))];
    };
    double s = r / g.d1 - 0.5;
    if (s < 0.0) {
      const double a = (r + g.radius(0)) / (2.0 * g.radius(0));
      double opposite = phi + pi;
      if (opposite >= two_pi) opposite -= two_pi;
      return (1 - a) * ring_value(0, opposite) + a * ring_value(0, phi);
    }
    int i0 = static_cast<int>(std::floor(s));
    double a = s - i0;
    if (i0 >= g.n1 - 1) {
      const double ghost = g.domain.boundary == Boundary::dirichlet ? -1.0 : 1.0;
      const double vin = ring_value(g.n1 - 1, phi);
      a = std::min(s - (g.n1 - 1), 1.0);
      return (1 - a) * vin + a * ghost * vin;
    }
    return (1 - a) * ring_value(i0, phi) + a * ring_value(i0 + 1, phi);
  }
  const double sx = (p.x - g.domain.origin.x) / g.d1 - 0.5;
  const double sy = (p.y - g.domain.origin.y) / g.d2 - 0.5;
  const int i0 = static_cast<int>(std::floor(sx)), j0 = static_cast<int>(std::floor(sy));
  const double a = sx - i0, b = sy - j0;
  const int i1 = g.wrap1(i0 + 1), j1 = g.wrap2(j0 + 1);
  const int ia = g.wrap1(i0), ja = g.wrap2(j0);
  return (1 - a) * (1 - b) * v[g.index(ia, ja)] + a * (1 - b) * v[g.index(i1, ja)] +
         (1 - a) * b * v[g.index(ia, j1)] + a * b * v[g.index(i1, j1)];
}

inline double interpolate(const ScalarField& f, Vec2 p) { return interpolate(*f.grid, f.values, p); }

struct EigenOptions {
  double tolerance = 1e-6;
  int max_iterations = 500;
  unsigned seed = 7;
};

/// Smallest nonzero eigenvalue of -Lap by shifted inverse power iteration in the weighted
/// product; constants are deflated for Neumann and periodic boundaries.
inline double smallest_diffusion_eigenvalue(const Grid& g, const EigenOptions& opt = {}) {
  const SparseMatrix L = laplacian_matrix(g);
  const Eigen::VectorXd& w = g.weights;
  const bool deflate = g.domain.boundary != Boundary::dirichlet;
  const double shift = deflate ? 1e-3 : 0.0;
  Eigen::SparseMatrix<double> M = -(w.asDiagonal() * L);
  if (shift != 0.0) {
    Eigen::SparseMatrix<double> Wd(g.size(), g.size());
    Wd.reserve(Eigen::VectorXi::Constant(g.size(), 1));
    for (int n = 0; n < g.size(); ++n) Wd.insert(n, n) = shift * w[n];
    M += Wd;
  }
  M = 0.5 * (M + Eigen::SparseMatrix<double>(M.transpose()));
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(M);
  if (solver.info() != Eigen::Success) throw numerical("eigenvalue factorisation failed");
  const double wsum = w.sum();
  auto remove_mean = [&](Eigen::VectorXd& x) {
    if (deflate) x.array() -= w.dot(x) / wsum;
  };
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> nd;
  Eigen::VectorXd x(g.size());
  for (int n = 0; n < g.size(); ++n) x[n] = nd(rng);
  remove_mean(x);
  x /= weighted_norm(w, x);
  double mu_prev = 0.0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    Eigen::VectorXd y = solver.solve(w.cwiseProduct(x));
    remove_mean(y);
    y /= weighted_norm(w, y);
    const double mu = -(w.cwiseProduct(y)).dot(L * y);
    if (it > 2 && std::abs(mu - mu_prev) <= 1e-3 * opt.tolerance * std::abs(mu)) return mu;
    mu_prev = mu;
    x = y;
  }
  throw numerical("inverse iteration did not converge");
}

}  // namespace streamlab
