#pragma once

// The loop vertex V(sigma) = -(N/2) Tr log(1 + i g D sigma D), its sigma
// derivatives (cyclic resolvent chains), and resolvent matrices.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "lve/common.hpp"
#include "lve/model.hpp"

namespace lve::loop {

using Eigen::MatrixXcd;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Zero-dimensional vertex.

inline cplx loop_vertex_0d(double sigma, cplx g, int colors = 1) {
  return -0.5 * colors * std::log(cplx(1.0) + cplx(0.0, 1.0) * g * sigma);
}

/// k-th sigma derivative: (N/2) (k-1)! (-i g)^k (1 + i g sigma)^{-k}.
inline cplx vertex_derivative_0d(int k, double sigma, cplx g, int colors = 1) {
  require(k >= 1, "vertex_derivative_chain: k must be >= 1 (use loop_vertex_value for k = 0)");
  const cplx ig(0.0, 1.0);
  return 0.5 * colors * factorial(k - 1) * std::pow(-ig * g, k) * std::pow(cplx(1.0) + ig * g * sigma, -k);
}

// ---------------------------------------------------------------------------
// Lattice resolvent.

struct Resolvent {
  MatrixXcd matrix;          // D (1 + i H)^{-1} D, no cell weights
  VectorXd spectrum;         // eigenvalues of D sigma D
  cplx g;
  cplx trace_log() const {   // Tr log(1 + i H), principal branch per eigenvalue
    cplx s{};
    for (int i = 0; i < spectrum.size(); ++i) s += std::log(cplx(1.0) + cplx(0.0, 1.0) * g * spectrum(i));
    return s;
  }
  double inverse_norm() const {  // ||(1 + i H)^{-1}||
    double m = 0.0;
    for (int i = 0; i < spectrum.size(); ++i) m = std::max(m, 1.0 / std::abs(cplx(1.0) + cplx(0.0, 1.0) * g * spectrum(i)));
    return spectrum.size() ? m : 1.0;
  }
};

/// Resolvent for one field configuration; sigma has one entry per site.
inline Resolvent make_resolvent(const MatrixXd& D, std::span<const double> sigma, cplx g) {
  const int S = static_cast<int>(D.rows());
  require(static_cast<int>(sigma.size()) == S, "resolvent: sigma must have one entry per site");
  for (double s : sigma) require(std::isfinite(s), "resolvent: non-finite sigma");
  const Eigen::Map<const VectorXd> s(sigma.data(), S);
  const MatrixXd A = D * s.asDiagonal() * D;
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(0.5 * (A + A.transpose()));
  const MatrixXd B = D * eig.eigenvectors();
  Eigen::VectorXcd inv(S);
  for (int i = 0; i < S; ++i) inv(i) = 1.0 / (cplx(1.0) + cplx(0.0, 1.0) * g * eig.eigenvalues()(i));
  Resolvent r;
  r.matrix = B.cast<cplx>() * inv.asDiagonal() * B.transpose().cast<cplx>();
  r.spectrum = eig.eigenvalues();
  r.g = g;
  return r;
}

struct LatticeVertex {
  model::LatticeCovariance cov;
  cplx g;
  int colors = 1;

  static LatticeVertex of(const model::ModelSpec& m, int cap = 64) {
    require(m.is_lattice(), "loop vertex: lattice model expected");
    return {model::build_lattice_covariance(*m.slice, cap), model::CouplingMap::of(m).g, m.colors};
  }
  int sites() const { return static_cast<int>(cov.matrix.rows()); }
  Resolvent resolvent(std::span<const double> sigma) const { return make_resolvent(cov.sqrt, sigma, g); }
};

/// -(N/2) Tr log(1 + i g D sigma D).
inline cplx loop_vertex_value(const LatticeVertex& lv, std::span<const double> sigma) {
  return -0.5 * lv.colors * lv.resolvent(sigma).trace_log();
}

/// (N/2)(-ig)^k sum over cyclic orders of prod R(x_tau(i), x_tau(i+1)).
inline cplx vertex_derivative_chain(const Resolvent& r, int k, std::span<const int> points, int colors = 1) {
  require(k >= 1, "vertex_derivative_chain: k must be >= 1 (use loop_vertex_value for k = 0)");
  require(static_cast<int>(points.size()) == k, "vertex_derivative_chain: need k attachment points");
  std::vector<int> tau(k);
  std::iota(tau.begin(), tau.end(), 0);
  cplx sum{};
  do {
    cplx prod(1.0);
    for (int i = 0; i < k; ++i) prod *= r.matrix(points[tau[i]], points[tau[(i + 1) % k]]);
    sum += prod;
  } while (std::next_permutation(tau.begin() + 1, tau.end()));
  return 0.5 * colors * std::pow(cplx(0.0, -1.0) * r.g, k) * sum;
}

inline cplx vertex_derivative_chain(const LatticeVertex& lv, int k, std::span<const double> sigma, std::span<const int> points) {
  return vertex_derivative_chain(lv.resolvent(sigma), k, points, lv.colors);
}

/// k-th derivative of the resolvent entry R(x, y): (-ig)^k times the sum over
/// all orderings of R(x, z_1) R(z_1, z_2) ... R(z_k, y).
inline cplx resolvent_derivative_chain(const Resolvent& r, int x, int y, std::span<const int> points) {
  const int k = static_cast<int>(points.size());
  std::vector<int> tau(k);
  std::iota(tau.begin(), tau.end(), 0);
  cplx sum{};
  do {
    cplx prod(1.0);
    int prev = x;
    for (int i = 0; i < k; ++i) {
      prod *= r.matrix(prev, points[tau[i]]);
      prev = points[tau[i]];
    }
    sum += prod * r.matrix(prev, y);
  } while (std::next_permutation(tau.begin(), tau.end()));
  return std::pow(cplx(0.0, -1.0) * r.g, k) * sum;
}

// ---------------------------------------------------------------------------
// Uniform resolvent-loop bound.

struct LoopBoundReport {
  int k = 1;
  double worst_ratio = 0.0;  // max |[C(sigma)]^k(x,x)| M^{(2k-4)j}
  double worst_resolvent_norm = 0.0;
  int samples = 0;
};

/// Operator powers carry the cell weight: [C(sigma)]^k(x,x) = w^{k-1} (R^k)(x,x).
/// Samples are i.i.d. unit normal site fields from the counter generator,
/// multiplied by sigma_scale.
inline LoopBoundReport resolvent_loop_bound_check(const LatticeVertex& lv, int k, int samples, std::uint64_t seed,
                                                  double sigma_scale = 1.0) {
  require(k >= 1, "loop bound: k must be >= 1");
  require(samples >= 1, "loop bound: need at least one sample");
  const auto& s = lv.cov.slice;
  const int S = lv.sites();
  const double w = s.cell_weight();
  const double scale = std::pow(s.M, (2.0 * k - 4.0) * s.j) * std::pow(w, k - 1);
  const quad::CounterRng rng(seed, 0x4C4Fu);
  LoopBoundReport rep;
  rep.k = k;
  rep.samples = samples;
  std::vector<double> sigma(S);
  for (int i = 0; i < samples; ++i) {
    for (int x = 0; x < S; ++x) sigma[x] = sigma_scale * rng.normal(static_cast<std::uint64_t>(i) * S + x);
    const Resolvent r = lv.resolvent(sigma);
    MatrixXcd P = r.matrix;
    for (int p = 1; p < k; ++p) P = P * r.matrix;
    for (int x = 0; x < S; ++x) rep.worst_ratio = std::max(rep.worst_ratio, std::abs(P(x, x)) * scale);
    rep.worst_resolvent_norm = std::max(rep.worst_resolvent_norm, r.inverse_norm());
  }
  return rep;
}

}  // namespace lve::loop
