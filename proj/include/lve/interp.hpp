#pragma once

// The interpolated Gaussian measure attached to a tree: covariance built
// from path infima of the weakening parameters, a PSD square root, and
// Gaussian expectations under it.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lve/common.hpp"
#include "lve/quadrature.hpp"
#include "lve/trees.hpp"

namespace lve::interp {

inline constexpr double pivot_tolerance = -1e-12;

struct TreeCovariance {
  int n = 1;
  Eigen::MatrixXd W;
  Eigen::MatrixXd root;      // symmetric PSD square root, W = root * root
  double min_pivot = 1.0;    // smallest LDLT pivot
};

enum class QuadMode { TensorHermite, QuasiMonteCarlo, MonteCarlo };

struct QuadratureSpec {
  QuadMode mode = QuadMode::TensorHermite;
  int nodes = 12;            // per axis (tensor) or points per replica
  std::uint64_t seed = 1;
  int replicas = 8;          // randomized modes only
};

/// Smallest pivot of a pivoted LDLT factorization.
inline double min_ldlt_pivot(const Eigen::MatrixXd& W) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(W);
  return ldlt.vectorD().minCoeff();
}

/// Symmetric square root of a PSD matrix; eigenvalues below zero are set to zero.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& W) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(W);
  const Eigen::VectorXd s = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * s.asDiagonal() * eig.eigenvectors().transpose();
}

inline Eigen::MatrixXd covariance_matrix(const trees::LabeledTree& t, std::span<const double> w) {
  for (double x : w) require(std::isfinite(x) && x >= 0.0 && x <= 1.0, "build_covariance: w must lie in [0,1]");
  const auto table = trees::path_infimum_table(t, w);
  Eigen::MatrixXd W(t.n, t.n);
  for (int a = 0; a < t.n; ++a)
    for (int b = 0; b < t.n; ++b) W(a, b) = table[a * t.n + b];
  return W;
}

/// W[v][v'] = path infimum; the factorization must have pivots >= -1e-12.
inline TreeCovariance build_covariance(const trees::LabeledTree& t, std::span<const double> w, bool with_root = true) {
  TreeCovariance c;
  c.n = t.n;
  c.W = covariance_matrix(t, w);
  c.min_pivot = min_ldlt_pivot(c.W);
  if (c.min_pivot < pivot_tolerance)
    throw Error("build_covariance: tree covariance is not positive (pivot " + std::to_string(c.min_pivot) + ")");
  if (with_root) c.root = psd_sqrt(c.W);
  return c;
}

inline TreeCovariance covariance_from_matrix(const Eigen::MatrixXd& W) {
  TreeCovariance c;
  c.n = static_cast<int>(W.rows());
  c.W = W;
  c.min_pivot = min_ldlt_pivot(W);
  if (c.min_pivot < pivot_tolerance) throw Error("covariance is not positive semidefinite");
  c.root = psd_sqrt(W);
  return c;
}

/// Integrand over n*sites variables stored vertex-major: sigma[v*sites + x].
using Integrand = std::function<cplx(std::span<const double>)>;

namespace detail {

/// Maps standard normal z (vertex-major) to sigma = (root (x) I) z.
inline void correlate(const Eigen::MatrixXd& root, int sites, std::span<const double> z, std::vector<double>& sigma) {
  const int n = static_cast<int>(root.rows());
  sigma.assign(static_cast<std::size_t>(n) * sites, 0.0);
  for (int v = 0; v < n; ++v)
    for (int u = 0; u < n; ++u) {
      const double r = root(v, u);
      if (r == 0.0) continue;
      for (int x = 0; x < sites; ++x) sigma[v * sites + x] += r * z[u * sites + x];
    }
}

inline cplx checked(cplx v) {
  if (!std::isfinite(v.real()) || !std::isfinite(v.imag())) throw Error("gaussian_expectation: non-finite integrand value");
  return v;
}

inline cplx sum_over(const quad::PointSet& ps, const TreeCovariance& cov, int sites, const Integrand& f) {
  CompensatedSum acc;
  std::vector<double> sigma;
  for (std::size_t p = 0; p < ps.size(); ++p) {
    correlate(cov.root, sites, ps.point(p), sigma);
    acc.add(ps.weights[p] * checked(f(sigma)));
  }
  return acc.value();
}

}  // namespace detail

/// E[f(sigma)] for sigma centered Gaussian with covariance W (x) I_sites.
/// Tensor mode: error = max |rule(q) - rule(q')| over q' in {q-2, q/2}. Randomized modes: standard
/// error across independent replicas.
inline Estimate gaussian_expectation(const TreeCovariance& cov, const Integrand& f, const QuadratureSpec& q, int sites = 1) {
  require(sites >= 1, "gaussian_expectation: sites must be >= 1");
  const int dim = cov.n * sites;
  if (q.mode == QuadMode::TensorHermite) {
    require(dim <= 8, "gaussian_expectation: tensor Hermite limited to dimension 8");
    require(q.nodes >= 1, "gaussian_expectation: need nodes >= 1");
    const cplx fine = detail::sum_over(quad::hermite_tensor(dim, q.nodes), cov, sites, f);
    // q-2 alone underestimates slow (pole-limited) convergence; q/2 bounds it
    const cplx near = detail::sum_over(quad::hermite_tensor(dim, std::max(1, q.nodes - 2)), cov, sites, f);
    const cplx half = detail::sum_over(quad::hermite_tensor(dim, std::max(1, q.nodes / 2)), cov, sites, f);
    return {fine, std::max(std::abs(fine - near), std::abs(fine - half))};
  }
  require(q.replicas >= 2, "gaussian_expectation: randomized modes need >= 2 replicas");
  require(q.nodes >= 1, "gaussian_expectation: need nodes >= 1");
  std::vector<cplx> reps(q.replicas);
  for (int r = 0; r < q.replicas; ++r) {
    const quad::PointSet ps = q.mode == QuadMode::QuasiMonteCarlo ? quad::sobol_normal(dim, q.nodes, q.seed, r)
                                                                   : quad::mc_normal(dim, q.nodes, q.seed, r);
    reps[r] = detail::sum_over(ps, cov, sites, f);
  }
  cplx mean{};
  for (auto v : reps) mean += v;
  mean /= static_cast<double>(q.replicas);
  double var = 0.0;
  for (auto v : reps) var += std::norm(v - mean);
  var /= static_cast<double>(q.replicas - 1);
  return {mean, std::sqrt(var / q.replicas)};
}

struct ReplicaReport {
  Estimate single;     // one field, f(s, ..., s)
  Estimate replicated; // n fields with all-ones covariance
  double deviation = 0.0;
  double combined_error = 0.0;
  bool pass = false;
};

/// Compares E[f(s,...,s)] under one standard normal with E[f(s_1..s_n)]
/// under the degenerate all-ones covariance.
inline ReplicaReport replica_identity_check(const Integrand& f, int n, const QuadratureSpec& q) {
  require(n >= 1, "replica_identity_check: n must be >= 1");
  ReplicaReport rep;
  const TreeCovariance one = covariance_from_matrix(Eigen::MatrixXd::Ones(1, 1));
  const Integrand diag = [&](std::span<const double> s) {
    std::vector<double> copies(n, s[0]);
    return f(copies);
  };
  rep.single = gaussian_expectation(one, diag, q);
  const TreeCovariance all = covariance_from_matrix(Eigen::MatrixXd::Ones(n, n));
  rep.replicated = gaussian_expectation(all, f, q);
  rep.deviation = std::abs(rep.single.value - rep.replicated.value);
  rep.combined_error = rep.single.error + rep.replicated.error + 1e-13;
  rep.pass = rep.deviation <= rep.combined_error;
  return rep;
}

/// Integrand families for replica checks, all built from the zero-dimensional
/// loop vertex at coupling g: "loop" prod_i V(s_i), "resolvent"
/// prod_i (1 + i g s_i)^{-k_i} with k_i = 1 + i mod 3, and "moment"
/// prod_i (1 + s_i^2) e^{i g s_i}.
inline const std::vector<std::string>& replica_families() {
  static const std::vector<std::string> names{"loop", "resolvent", "moment"};
  return names;
}

inline Integrand replica_family(const std::string& name, cplx g) {
  const cplx ig = cplx(0.0, 1.0) * g;
  if (name == "loop")
    return [ig](std::span<const double> s) {
      cplx p(1.0);
      for (double x : s) p *= -0.5 * std::log(cplx(1.0) + ig * x);
      return p;
    };
  if (name == "resolvent")
    return [ig](std::span<const double> s) {
      cplx p(1.0);
      for (std::size_t i = 0; i < s.size(); ++i) p *= std::pow(cplx(1.0) + ig * s[i], -static_cast<int>(1 + i % 3));
      return p;
    };
  if (name == "moment")
    return [ig](std::span<const double> s) {
      cplx p(1.0);
      for (double x : s) p *= (1.0 + x * x) * std::exp(ig * x);
      return p;
    };
  throw Error("replica family: unknown name '" + name + "'");
}

}  // namespace lve::interp
