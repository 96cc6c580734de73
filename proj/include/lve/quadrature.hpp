#pragma once

// Point sets shared by the integration code: Gauss rules computed by the
// Golub-Welsch method, the ordered-simplex product rule used for the
// weakening parameters, and randomized Sobol / counter-based Monte Carlo sets.

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <boost/random/sobol.hpp>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "lve/common.hpp"

namespace lve::quad {

/// Weighted point set; coordinates are stored point-major.
struct PointSet {
  int dim = 0;
  std::vector<double> coords;
  std::vector<double> weights;

  std::size_t size() const { return weights.size(); }
  std::span<const double> point(std::size_t i) const {
    return {coords.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
};

/// A single empty-dimensional point of unit weight.
inline PointSet unit_point() {
  PointSet p;
  p.weights = {1.0};
  return p;
}

// ---------------------------------------------------------------------------
// Counter-based generator: every draw is a pure function of (seed, stream, index).

inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix64(mix64(seed) ^ (stream * 0xD1B54A32D192ED03ULL))) {}

  std::uint64_t bits(std::uint64_t index) const { return mix64(key_ ^ mix64(index)); }

  /// Uniform on the open interval (0, 1).
  double uniform(std::uint64_t index) const {
    return (static_cast<double>(bits(index) >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller on draws 2*index and 2*index+1.
  double normal(std::uint64_t index) const {
    const double u1 = uniform(2 * index);
    const double u2 = uniform(2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

 private:
  std::uint64_t key_;
};

inline double normal_quantile(double u) {
  static const boost::math::normal_distribution<double> standard;
  return boost::math::quantile(standard, u);
}

// ---------------------------------------------------------------------------
// Gauss rules.

struct Rule1d {
  std::vector<double> nodes;
  std::vector<double> weights;
};

/// Golub-Welsch for a monic three-term recurrence with zero diagonal.
/// `offdiag[i]` is sqrt(beta_{i+1}); `mass` is the total weight.
inline Rule1d golub_welsch(const std::vector<double>& offdiag, double mass) {
  const int n = static_cast<int>(offdiag.size()) + 1;
  Rule1d rule;
  if (n == 1) {
    rule.nodes = {0.0};
    rule.weights = {mass};
    return rule;
  }
  Eigen::VectorXd diag = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd sub = Eigen::Map<const Eigen::VectorXd>(offdiag.data(), n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver;
  solver.computeFromTridiagonal(diag, sub, Eigen::ComputeEigenvectors);
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    rule.nodes[i] = solver.eigenvalues()(i);
    const double v = solver.eigenvectors()(0, i);
    rule.weights[i] = mass * v * v;
  }
  // The rules are symmetric; enforce it exactly.
  for (int i = 0; i < n / 2; ++i) {
    const double x = 0.5 * (rule.nodes[n - 1 - i] - rule.nodes[i]);
    const double w = 0.5 * (rule.weights[i] + rule.weights[n - 1 - i]);
    rule.nodes[i] = -x;
    rule.nodes[n - 1 - i] = x;
    rule.weights[i] = rule.weights[n - 1 - i] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  return rule;
}

/// Gauss-Hermite rule for the standard normal weight (weights sum to 1).
inline Rule1d gauss_hermite(int q) {
  require(q >= 1, "gauss_hermite: need at least one node");
  std::vector<double> off(q - 1);
  for (int i = 1; i < q; ++i) off[i - 1] = std::sqrt(static_cast<double>(i));
  return golub_welsch(off, 1.0);
}

/// Gauss-Legendre rule on [0, 1] (weights sum to 1).
inline Rule1d gauss_legendre01(int m) {
  require(m >= 1, "gauss_legendre01: need at least one node");
  std::vector<double> off(m - 1);
  for (int i = 1; i < m; ++i) off[i - 1] = i / std::sqrt(4.0 * i * i - 1.0);
  Rule1d r = golub_welsch(off, 2.0);
  for (int i = 0; i < m; ++i) {
    r.nodes[i] = 0.5 * (r.nodes[i] + 1.0);
    r.weights[i] *= 0.5;
  }
  return r;
}

inline std::size_t checked_power(int base, int exponent, std::size_t cap) {
  std::size_t count = 1;
  for (int d = 0; d < exponent; ++d) {
    count *= static_cast<std::size_t>(base);
    require(count <= cap, "tensor rule too large");
  }
  return count;
}

/// Tensor-product Gauss-Hermite rule for a standard normal vector.
inline PointSet hermite_tensor(int dim, int q, std::size_t cap = 50'000'000) {
  PointSet ps;
  ps.dim = dim;
  if (dim == 0) return unit_point();
  const Rule1d r = gauss_hermite(q);
  const std::size_t count = checked_power(q, dim, cap);
  ps.coords.resize(count * dim);
  ps.weights.resize(count);
  std::vector<int> idx(dim, 0);
  for (std::size_t p = 0; p < count; ++p) {
    double w = 1.0;
    for (int d = 0; d < dim; ++d) {
      ps.coords[p * dim + d] = r.nodes[idx[d]];
      w *= r.weights[idx[d]];
    }
    ps.weights[p] = w;
    for (int d = dim - 1; d >= 0; --d) {
      if (++idx[d] < q) break;
      idx[d] = 0;
    }
  }
  return ps;
}

/// Product rule on [0,1]^dim that splits the cube into the dim! cells of
/// fixed coordinate ordering. On a cell with x_{p1} >= x_{p2} >= ... the map
/// x_{p_i} = u_1 * ... * u_i is smooth, so integrands that are smooth on each
/// cell but kinked across x_a = x_b are integrated spectrally.
inline PointSet ordered_simplex_rule(int dim, int m) {
  if (dim == 0) return unit_point();
  const Rule1d r = gauss_legendre01(m);
  const std::size_t per_cell = checked_power(m, dim, 50'000'000);
  std::vector<int> perm(dim);
  std::iota(perm.begin(), perm.end(), 0);
  PointSet ps;
  ps.dim = dim;
  std::vector<int> idx(dim);
  std::vector<double> x(dim);
  do {
    std::fill(idx.begin(), idx.end(), 0);
    for (std::size_t p = 0; p < per_cell; ++p) {
      double prod = 1.0, w = 1.0;
      for (int i = 0; i < dim; ++i) {
        const double u = r.nodes[idx[i]];
        prod *= u;
        x[perm[i]] = prod;
        w *= r.weights[idx[i]] * std::pow(u, dim - 1 - i);
      }
      ps.coords.insert(ps.coords.end(), x.begin(), x.end());
      ps.weights.push_back(w);
      for (int d = dim - 1; d >= 0; --d) {
        if (++idx[d] < m) break;
        idx[d] = 0;
      }
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return ps;
}

/// Digitally shifted Sobol points in (0,1)^dim, equal weights. Replica r of
/// a given seed uses an independent shift.
inline PointSet sobol_uniform(int dim, std::size_t count, std::uint64_t seed, int replica) {
  if (dim == 0) {
    PointSet p = unit_point();
    return p;
  }
  PointSet ps;
  ps.dim = dim;
  ps.coords.resize(count * dim);
  ps.weights.assign(count, 1.0 / static_cast<double>(count));
  const CounterRng rng(seed, 0x5057u + static_cast<std::uint64_t>(replica));
  std::vector<std::uint64_t> shift(dim);
  for (int d = 0; d < dim; ++d) shift[d] = rng.bits(static_cast<std::uint64_t>(d));
  boost::random::sobol gen(static_cast<std::size_t>(dim));
  for (std::size_t p = 0; p < count; ++p) {
    for (int d = 0; d < dim; ++d) {
      const std::uint64_t v = static_cast<std::uint64_t>(gen()) ^ shift[d];
      ps.coords[p * dim + d] = (static_cast<double>(v >> 11) + 0.5) * 0x1.0p-53;
    }
  }
  return ps;
}

/// Sobol set mapped to standard normal coordinates.
inline PointSet sobol_normal(int dim, std::size_t count, std::uint64_t seed, int replica) {
  PointSet ps = sobol_uniform(dim, count, seed, replica);
  for (double& c : ps.coords) c = normal_quantile(c);
  return ps;
}

/// Pseudo-random standard normal set from the counter generator.
inline PointSet mc_normal(int dim, std::size_t count, std::uint64_t seed, int replica) {
  if (dim == 0) return unit_point();
  PointSet ps;
  ps.dim = dim;
  ps.coords.resize(count * dim);
  ps.weights.assign(count, 1.0 / static_cast<double>(count));
  const CounterRng rng(seed, 0x4D43u + static_cast<std::uint64_t>(replica));
  for (std::size_t i = 0; i < count * dim; ++i) ps.coords[i] = rng.normal(i);
  return ps;
}

/// Pseudo-random uniform set from the counter generator.
inline PointSet mc_uniform(int dim, std::size_t count, std::uint64_t seed, int replica) {
  if (dim == 0) return unit_point();
  PointSet ps;
  ps.dim = dim;
  ps.coords.resize(count * dim);
  ps.weights.assign(count, 1.0 / static_cast<double>(count));
  const CounterRng rng(seed, 0x4D55u + static_cast<std::uint64_t>(replica));
  for (std::size_t i = 0; i < count * dim; ++i) ps.coords[i] = rng.uniform(i);
  return ps;
}

}  // namespace lve::quad
