#pragma once

// Assembly of the expansion: tree terms, the pressure series, Taylor
// coefficients, Borel remainder diagnostics and the two-point function.

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lve/common.hpp"
#include "lve/interp.hpp"
#include "lve/loopvertex.hpp"
#include "lve/model.hpp"
#include "lve/parallel.hpp"
#include "lve/quadrature.hpp"
#include "lve/trees.hpp"

namespace lve::engine {

using Eigen::MatrixXcd;
using Eigen::MatrixXd;
using Eigen::VectorXcd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Integration rules for one tree term.

struct TermRule {
  enum class Kind {
    Deterministic,  // ordered-simplex Gauss-Legendre in w x tensor Gauss-Hermite in sigma
    Nested,         // shifted Sobol in w x tensor Gauss-Hermite in sigma, replicas
    Joint,          // shifted Sobol over (w, sigma) jointly, replicas
    JointMC,        // pseudo-random over (w, sigma), replicas
    Laplace         // zero-dim only: Sobol over (w, t), t_v ~ Gamma(k_v), replicas
  };
  Kind kind = Kind::Deterministic;
  int w_nodes = 8;      // per axis (Deterministic) or points (Nested)
  int sigma_nodes = 8;  // Hermite nodes per axis (Deterministic, Nested); points for Joint modes
  int replicas = 8;

  static TermRule deterministic(int m, int q) { return {Kind::Deterministic, m, q, 1}; }
  static TermRule nested(int w_points, int q, int reps) { return {Kind::Nested, w_points, q, reps}; }
  static TermRule joint(int points, int reps) { return {Kind::Joint, 0, points, reps}; }
  static TermRule joint_mc(int points, int reps) { return {Kind::JointMC, 0, points, reps}; }
  static TermRule laplace(int points, int reps) { return {Kind::Laplace, 0, points, reps}; }

  bool randomized() const { return kind != Kind::Deterministic; }
  std::string describe() const {
    switch (kind) {
      case Kind::Deterministic: return "simplex-gl(" + std::to_string(w_nodes) + ")xhermite(" + std::to_string(sigma_nodes) + ")";
      case Kind::Nested: return "sobol(" + std::to_string(w_nodes) + ")xhermite(" + std::to_string(sigma_nodes) + ")x" + std::to_string(replicas);
      case Kind::Joint: return "sobol-joint(" + std::to_string(sigma_nodes) + ")x" + std::to_string(replicas);
      case Kind::JointMC: return "mc-joint(" + std::to_string(sigma_nodes) + ")x" + std::to_string(replicas);
      case Kind::Laplace: return "sobol-laplace(" + std::to_string(sigma_nodes) + ")x" + std::to_string(replicas);
    }
    return "?";
  }
};

struct EngineOptions {
  std::map<int, TermRule> rules;  // keyed by the number of vertices in the tree
  TermRule fallback = TermRule::joint(1024, 8);
  std::uint64_t seed = 20240917;
  int threads = 0;  // 0: LVE_THREADS or hardware
  int root = 0;     // contraction root for lattice pressure terms
  int site_cap = 64;
  int tree_cap = trees::default_enumeration_cap;

  const TermRule& rule(int n) const {
    auto it = rules.find(n);
    return it == rules.end() ? fallback : it->second;
  }

  /// Accurate rules for zero-dimensional series up to n = 7.
  static EngineOptions zero_dim() {
    EngineOptions o;
    o.rules[1] = TermRule::deterministic(1, 80);
    o.rules[2] = TermRule::deterministic(12, 20);
    o.rules[3] = TermRule::laplace(1 << 16, 8);
    o.rules[4] = TermRule::laplace(1 << 15, 8);
    o.rules[5] = TermRule::laplace(1 << 14, 8);
    o.rules[6] = TermRule::laplace(1 << 13, 8);
    o.rules[7] = TermRule::laplace(1 << 12, 8);
    o.fallback = TermRule::laplace(1 << 12, 8);
    return o;
  }

  /// Rules exact for the polynomial content that fixes the Taylor
  /// coefficients up to order 5. Term n enters at lambda^{n-1} and needs
  /// r = 5 - n + 1 further orders: Hermite q >= r + 1, simplex m with
  /// 2m - 1 >= r. One node of margin on the Hermite side.
  static EngineOptions zero_dim_taylor() {
    EngineOptions o;
    o.rules[1] = TermRule::deterministic(1, 8);
    o.rules[2] = TermRule::deterministic(4, 6);
    o.rules[3] = TermRule::deterministic(3, 5);
    o.rules[4] = TermRule::deterministic(2, 4);
    o.rules[5] = TermRule::deterministic(2, 3);
    o.rules[6] = TermRule::deterministic(1, 2);
    o.fallback = TermRule::deterministic(1, 2);
    return o;
  }

  static EngineOptions lattice() {
    EngineOptions o;
    o.rules[1] = TermRule::joint(4096, 8);
    o.rules[2] = TermRule::joint(4096, 8);
    o.rules[3] = TermRule::joint(2048, 8);
    o.rules[4] = TermRule::joint(1024, 8);
    o.fallback = TermRule::joint(512, 8);
    return o;
  }

  static EngineOptions for_model(const model::ModelSpec& m) { return m.is_lattice() ? lattice() : zero_dim(); }
};

// ---------------------------------------------------------------------------
// Generic integration of one tree over (w, sigma).

namespace detail {

/// Linear map applied to raw integrand outputs before error estimation.
using Projection = std::function<std::vector<cplx>(const std::vector<cplx>&)>;

struct ShapeIntegral {
  std::vector<cplx> value;
  std::vector<double> error;
  std::size_t evaluations = 0;
};

inline std::uint64_t term_seed(std::uint64_t seed, int n, std::size_t shape, std::uint64_t salt) {
  return quad::mix64(seed ^ quad::mix64(static_cast<std::uint64_t>(n) * 0x100000001B3ULL + shape) ^ (salt << 1));
}

/// Mean and standard error over replicas, after projection.
inline void reduce_replicas(const std::vector<std::vector<cplx>>& reps, const Projection& project, ShapeIntegral& res) {
  const int R = static_cast<int>(reps.size());
  std::vector<std::vector<cplx>> proj(R);
  for (int r = 0; r < R; ++r) proj[r] = project(reps[r]);
  const std::size_t O = proj[0].size();
  res.value.assign(O, cplx{});
  res.error.assign(O, 0.0);
  for (std::size_t o = 0; o < O; ++o) {
    cplx mean{};
    for (int r = 0; r < R; ++r) mean += proj[r][o];
    mean /= static_cast<double>(R);
    double var = 0.0;
    for (int r = 0; r < R; ++r) var += std::norm(proj[r][o] - mean);
    var /= (R - 1.0);
    res.value[o] = mean;
    res.error[o] = std::sqrt(var / R);
  }
}

/// Integrates Eval over the interpolated measure of tree `t` with `sites`
/// Gaussian components per vertex. Eval must provide
///   Workspace workspace() const;
///   void operator()(Workspace&, std::span<const double> sigma, std::vector<cplx>& out) const;
/// and `outputs` raw values per point.
template <class Eval>
ShapeIntegral integrate_tree(const trees::LabeledTree& t, int sites, const TermRule& rule, std::uint64_t seed, int threads,
                             const Eval& eval, std::size_t outputs, const Projection& project) {
  const int n = t.n;
  const int wdim = n - 1;
  const int zdim = n * sites;
  ShapeIntegral res;

  auto finish = [&](std::vector<std::vector<cplx>>& partials, std::size_t first, std::size_t count) {
    std::vector<cplx> total(outputs, cplx{});
    for (std::size_t i = first; i < first + count; ++i)
      for (std::size_t o = 0; o < outputs; ++o) total[o] += partials[i][o];
    return total;
  };

  // Sum over a fixed sigma tensor rule for each w point of a block.
  auto tensor_block = [&](const quad::PointSet& wset, std::size_t begin, std::size_t end, const quad::PointSet& zset,
                          std::vector<cplx>& acc) {
    auto ws = eval.workspace();
    std::vector<cplx> out(outputs);
    std::vector<double> sigma;
    std::vector<CompensatedSum> sums(outputs);
    for (std::size_t p = begin; p < end; ++p) {
      const interp::TreeCovariance cov = interp::build_covariance(t, wset.point(p));
      for (std::size_t s = 0; s < zset.size(); ++s) {
        interp::detail::correlate(cov.root, sites, zset.point(s), sigma);
        eval(ws, sigma, out);
        const double w = wset.weights[p] * zset.weights[s];
        for (std::size_t o = 0; o < outputs; ++o) sums[o].add(w * out[o]);
      }
    }
    acc.assign(outputs, cplx{});
    for (std::size_t o = 0; o < outputs; ++o) acc[o] = sums[o].value();
  };

  if (rule.kind == TermRule::Kind::Deterministic) {
    require(zdim <= 12, "tree term: tensor Hermite rule limited to 12 Gaussian dimensions");
    const int mf = rule.w_nodes, qf = rule.sigma_nodes;
    const int mc = std::max(1, mf - 2), qc = std::max(1, qf - 2);
    const quad::PointSet wf = quad::ordered_simplex_rule(wdim, mf), wc = quad::ordered_simplex_rule(wdim, mc);
    const quad::PointSet zf = quad::hermite_tensor(zdim, qf), zc = quad::hermite_tensor(zdim, qc);
    const std::size_t block = std::max<std::size_t>(1, 4096 / std::max<std::size_t>(1, zf.size()));
    struct Task {
      const quad::PointSet* w;
      const quad::PointSet* z;
      std::size_t begin, end;
      bool fine;
    };
    std::vector<Task> tasks;
    for (std::size_t b = 0; b < wf.size(); b += block) tasks.push_back({&wf, &zf, b, std::min(wf.size(), b + block), true});
    const std::size_t nfine = tasks.size();
    for (std::size_t b = 0; b < wc.size(); b += block) tasks.push_back({&wc, &zc, b, std::min(wc.size(), b + block), false});
    std::vector<std::vector<cplx>> partials(tasks.size());
    parallel_for(tasks.size(), threads, [&](std::size_t i) {
      tensor_block(*tasks[i].w, tasks[i].begin, tasks[i].end, *tasks[i].z, partials[i]);
    });
    const auto fine = project(finish(partials, 0, nfine));
    const auto coarse = project(finish(partials, nfine, tasks.size() - nfine));
    res.value = fine;
    res.error.resize(fine.size());
    for (std::size_t o = 0; o < fine.size(); ++o) res.error[o] = std::abs(fine[o] - coarse[o]);
    res.evaluations = wf.size() * zf.size() + wc.size() * zc.size();
    return res;
  }

  require(rule.replicas >= 2, "tree term: randomized rules need at least 2 replicas");
  const int R = rule.replicas;

  if (rule.kind == TermRule::Kind::Nested) {
    const quad::PointSet zf = quad::hermite_tensor(zdim, rule.sigma_nodes);
    const quad::PointSet zc = quad::hermite_tensor(zdim, std::max(1, rule.sigma_nodes - 1));
    std::vector<quad::PointSet> wsets(R);
    for (int r = 0; r < R; ++r)
      wsets[r] = wdim > 0 ? quad::sobol_uniform(wdim, rule.w_nodes, seed, r) : quad::unit_point();
    const std::size_t per = wsets[0].size();
    const std::size_t block = std::max<std::size_t>(1, 16384 / std::max<std::size_t>(1, zf.size()));
    struct Task {
      int r;
      std::size_t begin, end;
      bool fine;
    };
    std::vector<Task> tasks;
    for (int r = 0; r < R; ++r)
      for (std::size_t b = 0; b < per; b += block) tasks.push_back({r, b, std::min(per, b + block), true});
    // bias probe: the lower Hermite order on the first replica's w points
    for (std::size_t b = 0; b < per; b += block) tasks.push_back({0, b, std::min(per, b + block), false});
    std::vector<std::vector<cplx>> partials(tasks.size());
    parallel_for(tasks.size(), threads, [&](std::size_t i) {
      const Task& tk = tasks[i];
      tensor_block(wsets[tk.r], tk.begin, tk.end, tk.fine ? zf : zc, partials[i]);
    });
    std::vector<std::vector<cplx>> reps(R, std::vector<cplx>(outputs, cplx{}));
    std::vector<cplx> low(outputs, cplx{});
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      auto& dst = tasks[i].fine ? reps[tasks[i].r] : low;
      for (std::size_t o = 0; o < outputs; ++o) dst[o] += partials[i][o];
    }
    std::vector<std::vector<cplx>> proj(R);
    for (int r = 0; r < R; ++r) proj[r] = project(reps[r]);
    const auto plow = project(low);
    const std::size_t O = proj[0].size();
    res.value.assign(O, cplx{});
    res.error.assign(O, 0.0);
    for (std::size_t o = 0; o < O; ++o) {
      cplx mean{};
      for (int r = 0; r < R; ++r) mean += proj[r][o];
      mean /= static_cast<double>(R);
      double var = 0.0;
      for (int r = 0; r < R; ++r) var += std::norm(proj[r][o] - mean);
      var /= (R - 1.0);
      res.value[o] = mean;
      res.error[o] = std::sqrt(var / R) + std::abs(proj[0][o] - plow[o]);
    }
    res.evaluations = (R * per) * zf.size() + per * zc.size();
    return res;
  }

  require(rule.kind != TermRule::Kind::Laplace, "tree term: the Laplace rule applies to zero-dimensional terms with n >= 2");
  // Joint modes: one point set over (w, z) per replica.
  const std::size_t count = static_cast<std::size_t>(rule.sigma_nodes);
  const int dim = wdim + zdim;
  const bool qmc = rule.kind == TermRule::Kind::Joint;
  std::vector<quad::PointSet> sets(R);
  parallel_for(R, threads, [&](std::size_t r) {
    quad::PointSet ps = qmc ? quad::sobol_uniform(dim, count, seed, static_cast<int>(r))
                            : quad::mc_uniform(dim, count, seed, static_cast<int>(r));
    for (std::size_t p = 0; p < ps.size(); ++p)
      for (int d = wdim; d < dim; ++d) {
        double& c = ps.coords[p * dim + d];
        c = quad::normal_quantile(c);
      }
    sets[r] = std::move(ps);
  });
  const std::size_t block = 64;
  struct Task {
    int r;
    std::size_t begin, end;
  };
  std::vector<Task> tasks;
  for (int r = 0; r < R; ++r)
    for (std::size_t b = 0; b < count; b += block) tasks.push_back({r, b, std::min(count, b + block)});
  std::vector<std::vector<cplx>> partials(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t i) {
    const Task& tk = tasks[i];
    const quad::PointSet& ps = sets[tk.r];
    auto ws = eval.workspace();
    std::vector<cplx> out(outputs);
    std::vector<double> sigma;
    std::vector<CompensatedSum> sums(outputs);
    for (std::size_t p = tk.begin; p < tk.end; ++p) {
      const auto pt = ps.point(p);
      const interp::TreeCovariance cov = interp::build_covariance(t, pt.subspan(0, wdim));
      interp::detail::correlate(cov.root, sites, pt.subspan(wdim), sigma);
      eval(ws, sigma, out);
      for (std::size_t o = 0; o < outputs; ++o) sums[o].add(ps.weights[p] * out[o]);
    }
    partials[i].resize(outputs);
    for (std::size_t o = 0; o < outputs; ++o) partials[i][o] = sums[o].value();
  });
  std::vector<std::vector<cplx>> reps(R, std::vector<cplx>(outputs, cplx{}));
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t o = 0; o < outputs; ++o) reps[tasks[i].r][o] += partials[i][o];
  reduce_replicas(reps, project, res);
  res.evaluations = R * count;
  return res;
}

inline std::vector<cplx> identity_projection(const std::vector<cplx>& v) { return v; }

// sigma -> -sigma is a symmetry of the measure and acts on every integrand as
// g -> -g. Evaluating both signs on the same nodes and keeping the even part
// removes the odd powers of g that a non-symmetric point set leaves behind,
// so shared-node results are analytic in lambda.
inline std::vector<cplx> with_reflections(std::span<const cplx> gs) {
  std::vector<cplx> out(gs.begin(), gs.end());
  for (cplx g : gs) out.push_back(-g);
  return out;
}

/// First half of the raw outputs averaged with the second half.
inline std::vector<cplx> even_part(const std::vector<cplx>& raw) {
  const std::size_t h = raw.size() / 2;
  std::vector<cplx> out(h);
  for (std::size_t i = 0; i < h; ++i) out[i] = 0.5 * (raw[i] + raw[i + h]);
  return out;
}

// ---------------------------------------------------------------------------
// Integrands.

/// Zero-dimensional tree integrand for several couplings at once.
class ZeroDimIntegrand {
 public:
  ZeroDimIntegrand(const trees::LabeledTree& t, std::span<const cplx> gs, int colors) : n_(t.n), gs_(gs.begin(), gs.end()), colors_(colors) {
    degrees_ = t.degrees();
    const cplx ig(0.0, 1.0);
    for (cplx g : gs_) {
      ig_.push_back(ig * g);
      if (n_ == 1) {
        pref_.push_back(-0.5 * colors_);
        continue;
      }
      cplx p = std::pow(0.5 * colors_, n_) * std::pow(-g * g, n_ - 1);
      for (int k : degrees_) p *= factorial(k - 1);
      pref_.push_back(p);
    }
  }
  struct Workspace {};
  Workspace workspace() const { return {}; }
  void operator()(Workspace&, std::span<const double> sigma, std::vector<cplx>& out) const {
    for (std::size_t l = 0; l < gs_.size(); ++l) {
      if (n_ == 1) {
        out[l] = pref_[l] * std::log(cplx(1.0) + ig_[l] * sigma[0]);
        continue;
      }
      cplx prod(1.0);
      for (int v = 0; v < n_; ++v) {
        const cplx inv = 1.0 / (cplx(1.0) + ig_[l] * sigma[v]);
        cplx p = inv;
        for (int e = 1; e < degrees_[v]; ++e) p *= inv;
        prod *= p;
      }
      out[l] = pref_[l] * prod;
    }
  }

 private:
  int n_;
  std::vector<cplx> gs_, ig_, pref_;
  std::vector<int> degrees_;
  int colors_;
};

/// Zero-dimensional tree term through the Laplace form of the resolvent powers:
/// (1 + i g s)^{-k} = E_t[exp(-i g s t)], t ~ Gamma(k), so the Gaussian
/// average over sigma is exp(-(g^2/2) t^T W t) in closed form. The remaining
/// integral over (w, t) is done by shifted Sobol points with replicas.
inline ShapeIntegral integrate_laplace_0d(const trees::LabeledTree& t, const TermRule& rule, std::uint64_t seed, int threads,
                                         std::span<const cplx> gs, int colors) {
  const int n = t.n;
  require(n >= 2, "Laplace rule needs n >= 2");
  require(rule.replicas >= 2, "tree term: randomized rules need at least 2 replicas");
  const int wdim = n - 1, dim = wdim + n;
  const auto degrees = t.degrees();
  // edges on the path between each pair of vertices
  std::vector<std::vector<int>> path_edges(static_cast<std::size_t>(n) * n);
  {
    const auto adj = t.adjacency();
    for (int a = 0; a < n; ++a) {
      std::vector<int> via(n, -2);
      std::vector<int> stack{a};
      via[a] = -1;
      std::vector<int> parent(n, -1);
      while (!stack.empty()) {
        const int x = stack.back();
        stack.pop_back();
        for (int y : adj[x])
          if (via[y] == -2) {
            via[y] = t.edge_index(x, y);
            parent[y] = x;
            stack.push_back(y);
          }
      }
      for (int b = 0; b < n; ++b)
        for (int x = b; x != a; x = parent[x]) path_edges[a * n + b].push_back(via[x]);
    }
  }
  std::vector<cplx> pref, half_g2;
  for (cplx g : gs) {
    cplx p = std::pow(0.5 * colors, n) * std::pow(-g * g, n - 1);
    for (int k : degrees) p *= factorial(k - 1);
    pref.push_back(p);
    half_g2.push_back(0.5 * g * g);
  }
  const std::size_t L = gs.size();
  const std::size_t count = static_cast<std::size_t>(rule.sigma_nodes);
  const int R = rule.replicas;
  const std::size_t block = 1024;
  struct Task {
    int r;
    std::size_t begin, end;
  };
  std::vector<Task> tasks;
  for (int r = 0; r < R; ++r)
    for (std::size_t b = 0; b < count; b += block) tasks.push_back({r, b, std::min(count, b + block)});
  std::vector<quad::PointSet> sets(R);
  for (int r = 0; r < R; ++r) sets[r] = quad::sobol_uniform(dim, count, seed, r);
  std::vector<std::vector<cplx>> partials(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t i) {
    const Task& tk = tasks[i];
    const quad::PointSet& ps = sets[tk.r];
    std::vector<double> tv(n);
    std::vector<CompensatedSum> sums(L);
    for (std::size_t p = tk.begin; p < tk.end; ++p) {
      const auto pt = ps.point(p);
      for (int v = 0; v < n; ++v) tv[v] = boost::math::gamma_p_inv(static_cast<double>(degrees[v]), pt[wdim + v]);
      double Q = 0.0;
      for (int a = 0; a < n; ++a) {
        Q += tv[a] * tv[a];
        for (int b = a + 1; b < n; ++b) {
          double m = 1.0;
          for (int e : path_edges[a * n + b]) m = std::min(m, pt[e]);
          Q += 2.0 * m * tv[a] * tv[b];
        }
      }
      for (std::size_t l = 0; l < L; ++l) sums[l].add(ps.weights[p] * std::exp(-half_g2[l] * Q));
    }
    partials[i].resize(L);
    for (std::size_t l = 0; l < L; ++l) partials[i][l] = pref[l] * sums[l].value();
  });
  std::vector<std::vector<cplx>> reps(R, std::vector<cplx>(L, cplx{}));
  for (std::size_t i = 0; i < tasks.size(); ++i)
    for (std::size_t l = 0; l < L; ++l) reps[tasks[i].r][l] += partials[i][l];
  ShapeIntegral res;
  reduce_replicas(reps, identity_projection, res);
  res.evaluations = R * count;
  return res;
}

/// Spectral data of D sigma_v D for every vertex.
struct VertexSpectra {
  std::vector<MatrixXd> B;  // D U
  std::vector<VectorXd> mu;
};

inline void vertex_spectra(const MatrixXd& D, int n, std::span<const double> sigma, VertexSpectra& out) {
  const int S = static_cast<int>(D.rows());
  out.B.resize(n);
  out.mu.resize(n);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(S);
  for (int v = 0; v < n; ++v) {
    const Eigen::Map<const VectorXd> s(sigma.data() + static_cast<std::size_t>(v) * S, S);
    MatrixXd A = D * s.asDiagonal() * D;
    A = 0.5 * (A + A.transpose());
    eig.compute(A);
    out.B[v] = D * eig.eigenvectors();
    out.mu[v] = eig.eigenvalues();
  }
}

inline MatrixXcd resolvent_from(const MatrixXd& B, const VectorXd& mu, cplx g) {
  const int S = static_cast<int>(B.rows());
  Eigen::VectorXcd inv(S);
  for (int i = 0; i < S; ++i) inv(i) = 1.0 / (cplx(1.0) + cplx(0.0, 1.0) * g * mu(i));
  const MatrixXcd Bc = B.cast<cplx>();
  return Bc * inv.asDiagonal() * Bc.transpose();
}

/// Sum over all orderings of the given diagonal insertions of
/// R M_{p1} R M_{p2} ... M_{pk} R.
inline MatrixXcd ordered_insertions(const MatrixXcd& R, const std::vector<VectorXcd>& msgs) {
  const int k = static_cast<int>(msgs.size());
  if (k == 0) return R;
  MatrixXcd total = MatrixXcd::Zero(R.rows(), R.cols());
  std::vector<bool> used(k, false);
  std::function<void(const MatrixXcd&, int)> rec = [&](const MatrixXcd& prefix, int depth) {
    if (depth == k) {
      total += prefix;
      return;
    }
    for (int c = 0; c < k; ++c) {
      if (used[c]) continue;
      used[c] = true;
      rec((prefix * msgs[c].asDiagonal()) * R, depth + 1);
      used[c] = false;
    }
  };
  rec(R, 0);
  return total;
}

/// Message of vertex v toward `parent` along the line they share:
/// m_v(x) = (N/2)(-ig)^{k_v} sum over orderings diag(R M ... R)(x).
inline VectorXcd loop_message(int v, int parent, const std::vector<std::vector<int>>& adj, const std::vector<MatrixXcd>& R,
                              cplx g, int colors) {
  std::vector<VectorXcd> msgs;
  for (int u : adj[v])
    if (u != parent) msgs.push_back(loop_message(u, v, adj, R, g, colors));
  const int k = static_cast<int>(adj[v].size());
  const cplx coef = 0.5 * colors * std::pow(cplx(0.0, -1.0) * g, k);
  return coef * ordered_insertions(R[v], msgs).diagonal();
}

/// Lattice pressure integrand: each sample yields one value per coupling.
class LatticePressureIntegrand {
 public:
  LatticePressureIntegrand(const trees::LabeledTree& t, const MatrixXd& D, std::span<const cplx> gs, int colors, int root)
      : t_(t), adj_(t.adjacency()), D_(D), gs_(gs.begin(), gs.end()), colors_(colors) {
    root_ = ((root % t.n) + t.n) % t.n;
    partner_ = t.n > 1 ? adj_[root_].front() : -1;
  }
  struct Workspace {
    VertexSpectra spectra;
    std::vector<MatrixXcd> R;
  };
  Workspace workspace() const { return {}; }
  void operator()(Workspace& ws, std::span<const double> sigma, std::vector<cplx>& out) const {
    vertex_spectra(D_, t_.n, sigma, ws.spectra);
    for (std::size_t l = 0; l < gs_.size(); ++l) {
      const cplx g = gs_[l];
      if (t_.n == 1) {
        cplx s{};
        const VectorXd& mu = ws.spectra.mu[0];
        for (int i = 0; i < mu.size(); ++i) s += std::log(cplx(1.0) + cplx(0.0, 1.0) * g * mu(i));
        out[l] = -0.5 * colors_ * s;
        continue;
      }
      ws.R.resize(t_.n);
      for (int v = 0; v < t_.n; ++v) ws.R[v] = resolvent_from(ws.spectra.B[v], ws.spectra.mu[v], g);
      // close the root line: sum_x m_root(x) m_partner(x)
      const VectorXcd a = loop_message(root_, partner_, adj_, ws.R, g, colors_);
      const VectorXcd b = loop_message(partner_, root_, adj_, ws.R, g, colors_);
      out[l] = (a.array() * b.array()).sum();
    }
  }

 private:
  trees::LabeledTree t_;
  std::vector<std::vector<int>> adj_;
  MatrixXd D_;
  std::vector<cplx> gs_;
  int colors_;
  int root_ = 0, partner_ = -1;
};

/// Two-point integrand: vertex 0 carries the resolvent C(sigma_0)(x, y);
/// each sample yields the full site matrix per coupling (row-major).
class LatticeTwoPointIntegrand {
 public:
  LatticeTwoPointIntegrand(const trees::LabeledTree& t, const MatrixXd& D, std::span<const cplx> gs, int colors)
      : t_(t), adj_(t.adjacency()), D_(D), gs_(gs.begin(), gs.end()), colors_(colors) {}
  struct Workspace {
    VertexSpectra spectra;
    std::vector<MatrixXcd> R;
  };
  Workspace workspace() const { return {}; }
  void operator()(Workspace& ws, std::span<const double> sigma, std::vector<cplx>& out) const {
    const int S = static_cast<int>(D_.rows());
    vertex_spectra(D_, t_.n, sigma, ws.spectra);
    ws.R.resize(t_.n);
    for (std::size_t l = 0; l < gs_.size(); ++l) {
      const cplx g = gs_[l];
      for (int v = 0; v < t_.n; ++v) ws.R[v] = resolvent_from(ws.spectra.B[v], ws.spectra.mu[v], g);
      std::vector<VectorXcd> msgs;
      for (int u : adj_[0]) msgs.push_back(loop_message(u, 0, adj_, ws.R, g, colors_));
      const int k = static_cast<int>(msgs.size());
      const MatrixXcd M = std::pow(cplx(0.0, -1.0) * g, k) * ordered_insertions(ws.R[0], msgs);
      for (int x = 0; x < S; ++x)
        for (int y = 0; y < S; ++y) out[l * S * S + x * S + y] = M(x, y);
    }
  }

 private:
  trees::LabeledTree t_;
  std::vector<std::vector<int>> adj_;
  MatrixXd D_;
  std::vector<cplx> gs_;
  int colors_;
};

inline const std::vector<trees::ShapeClass>& cached_shapes(int n, int fixed_root, int cap) {
  static std::map<std::pair<int, int>, std::vector<trees::ShapeClass>> cache;
  static std::mutex mutex;
  std::lock_guard lock(mutex);
  auto key = std::make_pair(n, fixed_root);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, trees::tree_shapes(n, fixed_root, cap)).first;
  return it->second;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tree terms.

/// G_T for a single labeled tree: the w and sigma integral of the
/// derivative-contracted loop vertices (no 1/n! factor). Lattice terms sum
/// over all attachment sites.
inline Estimate tree_term(const model::ModelSpec& m, const trees::LabeledTree& t, const EngineOptions& opt = EngineOptions::zero_dim(),
                          std::size_t shape_index = 0) {
  m.require_analytic_domain();
  require(t.is_valid_tree(), "tree_term: invalid tree");
  const cplx g = model::CouplingMap::of(m).g;
  const std::vector<cplx> gs{g};
  const TermRule& rule = opt.rule(t.n);
  const std::uint64_t seed = detail::term_seed(opt.seed, t.n, shape_index, 0x7072);
  const int threads = resolve_threads(opt.threads);
  detail::ShapeIntegral r;
  if (!m.is_lattice() && rule.kind == TermRule::Kind::Laplace) {
    r = detail::integrate_laplace_0d(t, rule, seed, threads, gs, m.colors);
  } else if (!m.is_lattice()) {
    detail::ZeroDimIntegrand f(t, detail::with_reflections(gs), m.colors);
    r = detail::integrate_tree(t, 1, rule, seed, threads, f, 2, detail::even_part);
  } else {
    const auto cov = model::build_lattice_covariance(*m.slice, opt.site_cap);
    detail::LatticePressureIntegrand f(t, cov.sqrt, detail::with_reflections(gs), m.colors, opt.root);
    r = detail::integrate_tree(t, cov.slice.total_sites(), rule, seed, threads, f, 2, detail::even_part);
  }
  return {r.value[0], r.error[0]};
}

struct SeriesAccumulator {
  cplx lambda{};
  std::vector<Estimate> terms;       // t_n = (1/n!) sum_T G_T, index n-1
  std::vector<cplx> partial_sums;
  std::vector<double> ratios;        // |t_{n+1}/t_n|, index n-1
  Estimate total;                    // error = integration error only
  double tail_estimate = 0.0;        // geometric extrapolation from the last ratio
  bool flagged = false;              // a ratio >= 1 occurred beyond n = 2
  std::uint64_t trees_represented = 0;
  std::size_t shapes_evaluated = 0;
  std::size_t evaluations = 0;
  std::vector<std::string> rules;

  double max_ratio(int from_n = 2) const {
    double q = 0.0;
    for (std::size_t i = from_n - 1; i < ratios.size(); ++i) q = std::max(q, ratios[i]);
    return q;
  }
};

namespace detail {

inline void finalize_series(SeriesAccumulator& acc) {
  CompensatedSum s;
  double err = 0.0;
  acc.partial_sums.clear();
  acc.ratios.clear();
  for (const auto& t : acc.terms) {
    s.add(t.value);
    err += t.error;
    acc.partial_sums.push_back(s.value());
  }
  for (std::size_t i = 0; i + 1 < acc.terms.size(); ++i) {
    const double a = std::abs(acc.terms[i].value), b = std::abs(acc.terms[i + 1].value);
    acc.ratios.push_back(a > 0.0 ? b / a : 0.0);
  }
  acc.total = {s.value(), err};
  acc.flagged = false;
  for (std::size_t i = 1; i < acc.ratios.size(); ++i)
    if (acc.ratios[i] >= 1.0) acc.flagged = true;
  if (acc.terms.empty()) {
    acc.tail_estimate = 0.0;
  } else if (acc.ratios.empty()) {
    acc.tail_estimate = std::abs(acc.terms.back().value);
  } else {
    const double q = acc.ratios.back();
    acc.tail_estimate = q < 1.0 ? std::abs(acc.terms.back().value) * q / (1.0 - q) : std::numeric_limits<double>::infinity();
  }
}

}  // namespace detail

/// Pressure series (log Z) for several couplings sharing every node, so the
/// results are smooth functions of lambda. Terms n = 1..n_max.
inline std::vector<SeriesAccumulator> pressure_series_multi(const model::ModelSpec& base, std::span<const cplx> lambdas, int n_max,
                                                            const EngineOptions& opt) {
  base.validate();
  require(n_max >= 1, "pressure_series: n_max must be >= 1");
  require(n_max <= opt.tree_cap, "pressure_series: n_max exceeds tree cap");
  require(!lambdas.empty(), "pressure_series: no couplings");
  std::vector<cplx> gs;
  for (cplx l : lambdas) {
    base.with_lambda(l).require_analytic_domain();
    gs.push_back(model::CouplingMap::of(base.with_lambda(l)).g);
  }
  const std::vector<cplx> signed_gs = detail::with_reflections(gs);
  const int threads = resolve_threads(opt.threads);
  std::optional<model::LatticeCovariance> cov;
  if (base.is_lattice()) cov = model::build_lattice_covariance(*base.slice, opt.site_cap);
  const int sites = base.sites();
  std::vector<SeriesAccumulator> out(lambdas.size());
  for (std::size_t l = 0; l < lambdas.size(); ++l) out[l].lambda = lambdas[l];
  for (int n = 1; n <= n_max; ++n) {
    const auto& shapes = detail::cached_shapes(n, -1, opt.tree_cap);
    const TermRule& rule = opt.rule(n);
    std::vector<cplx> value(lambdas.size(), cplx{});
    std::vector<double> error(lambdas.size(), 0.0);
    std::size_t evals = 0;
    for (std::size_t si = 0; si < shapes.size(); ++si) {
      const auto& sh = shapes[si];
      const std::uint64_t seed = detail::term_seed(opt.seed, n, si, 0x7072);
      detail::ShapeIntegral r;
      if (!cov && rule.kind == TermRule::Kind::Laplace && n >= 2) {
        r = detail::integrate_laplace_0d(sh.representative, rule, seed, threads, gs, base.colors);
      } else if (!cov) {
        detail::ZeroDimIntegrand f(sh.representative, signed_gs, base.colors);
        r = detail::integrate_tree(sh.representative, 1, rule, seed, threads, f, signed_gs.size(), detail::even_part);
      } else {
        detail::LatticePressureIntegrand f(sh.representative, cov->sqrt, signed_gs, base.colors, opt.root);
        r = detail::integrate_tree(sh.representative, sites, rule, seed, threads, f, signed_gs.size(), detail::even_part);
      }
      const double w = static_cast<double>(sh.multiplicity) / factorial(n);
      for (std::size_t l = 0; l < gs.size(); ++l) {
        value[l] += w * r.value[l];
        error[l] += w * r.error[l];
      }
      evals += r.evaluations;
    }
    for (std::size_t l = 0; l < gs.size(); ++l) {
      // every term carries g^{2(n-1)} (n >= 2) or vanishes at g = 0 (n = 1)
      if (gs[l] == cplx{}) value[l] = cplx{}, error[l] = 0.0;
      out[l].terms.push_back({value[l], error[l]});
      out[l].trees_represented += trees::cayley_count(n);
      out[l].shapes_evaluated += shapes.size();
      out[l].evaluations += evals;
      out[l].rules.push_back(rule.describe());
    }
  }
  for (auto& a : out) detail::finalize_series(a);
  return out;
}

inline SeriesAccumulator pressure_series(const model::ModelSpec& m, int n_max, const EngineOptions& opt) {
  const cplx l = m.lambda;
  return pressure_series_multi(m, std::span<const cplx>(&l, 1), n_max, opt).front();
}

inline SeriesAccumulator pressure_series(const model::ModelSpec& m, int n_max) {
  return pressure_series(m, n_max, EngineOptions::for_model(m));
}

// ---------------------------------------------------------------------------
// Taylor coefficients by step-halving polynomial extrapolation.

struct TaylorResult {
  std::vector<Estimate> coeffs;  // a_1 .. a_order (a_0 = 0)
  double final_step = 0.0;
  int levels = 0;
  bool converged = false;
  double achieved_relative_change = 0.0;
};

struct TaylorOptions {
  double h0 = 0.004;
  int max_levels = 7;
  double rel_tol = 1e-6;
};

/// Fits f(lambda) = sum_{k=1}^{P} c_k lambda^k through lambda_i = i h,
/// i = 1..P, with P = order + 3, and halves h until every a_k with k <= order
/// changes by less than rel_tol (relative) or the change stops shrinking.
inline TaylorResult taylor_coefficients(const model::ModelSpec& m, int order, const EngineOptions& opt, const TaylorOptions& topt = {}) {
  m.validate();
  require(order >= 1, "taylor_coefficients: order must be >= 1");
  require(order <= (m.is_lattice() ? 3 : 5), "taylor_coefficients: order limited to 5 (zero-dim) or 3 (lattice)");
  const int P = order + 3;
  const int n_max = order + 1;
  // all probe couplings share nodes; collect them once
  std::vector<cplx> lambdas;
  std::map<long long, std::size_t> index;  // key: i * 2^(max_levels) / 2^level
  const long long unit = 1LL << topt.max_levels;
  for (int lev = 0; lev < topt.max_levels; ++lev)
    for (int i = 1; i <= P; ++i) {
      const long long key = static_cast<long long>(i) * (unit >> lev);
      if (!index.count(key)) {
        index[key] = lambdas.size();
        lambdas.push_back(cplx(topt.h0 * static_cast<double>(key) / static_cast<double>(unit), 0.0));
      }
    }
  const auto series = pressure_series_multi(m, lambdas, n_max, opt);
  auto fit = [&](int lev) {
    const double h = topt.h0 / static_cast<double>(1LL << lev);
    Eigen::MatrixXd V(P, P);
    Eigen::VectorXcd rhs(P);
    for (int i = 1; i <= P; ++i) {
      for (int k = 1; k <= P; ++k) V(i - 1, k - 1) = std::pow(static_cast<double>(i), k);
      rhs(i - 1) = series[index.at(static_cast<long long>(i) * (unit >> lev))].total.value;
    }
    const Eigen::VectorXcd c = V.cast<cplx>().fullPivLu().solve(rhs);
    std::vector<cplx> a(order);
    for (int k = 1; k <= order; ++k) a[k - 1] = c(k - 1) / std::pow(h, k);
    return a;
  };
  TaylorResult res;
  std::vector<cplx> prev = fit(0), best = prev;
  std::vector<double> best_change(order, std::numeric_limits<double>::infinity());
  double last_worst = std::numeric_limits<double>::infinity();
  for (int lev = 1; lev < topt.max_levels; ++lev) {
    const auto cur = fit(lev);
    std::vector<double> change(order);
    double worst = 0.0;
    for (int k = 0; k < order; ++k) {
      change[k] = std::abs(cur[k] - prev[k]);
      worst = std::max(worst, change[k] / std::max(std::abs(cur[k]), 1e-300));
    }
    if (worst > last_worst) break;  // noise floor reached; keep the previous level
    best = cur;
    best_change = change;
    last_worst = worst;
    res.levels = lev;
    res.final_step = topt.h0 / static_cast<double>(1LL << lev);
    prev = cur;
    if (worst < topt.rel_tol) break;
  }
  res.achieved_relative_change = last_worst;
  res.converged = last_worst < topt.rel_tol;
  for (int k = 0; k < order; ++k) res.coeffs.push_back({best[k], best_change[k]});
  if (!(last_worst < 1e-2)) throw Error("taylor_coefficients: extrapolation did not converge");
  return res;
}

inline EngineOptions taylor_options_for(const model::ModelSpec& m) {
  return m.is_lattice() ? EngineOptions::lattice() : EngineOptions::zero_dim_taylor();
}

// ---------------------------------------------------------------------------
// Borel remainder diagnostics.

struct RemainderPoint {
  cplx lambda;
  int r = 0;
  cplx remainder;
  double error = 0.0;
};

struct BorelDiagnostics {
  std::vector<Estimate> coeffs;  // a_1..a_{r_max-1}
  std::vector<RemainderPoint> remainders;
  double A = 0.0;      // envelope constant: |R_r| <= A rho^r r! |lambda|^r on all points
  double rho = 0.0;
  double fit_log_A = 0.0;
  double fit_residual = 0.0;  // RMS residual of the log-linear fit
  bool envelope_holds = false;
};

struct BorelOptions {
  int r_max = 6;
  int n_max = 7;
};

namespace detail {

inline void fit_borel(BorelDiagnostics& d) {
  // y = log|R_r| - log r! - r log|lambda| = log A + r log rho
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int cnt = 0;
  std::vector<std::pair<double, double>> pts;
  for (const auto& p : d.remainders) {
    if (p.r < 1 || std::abs(p.remainder) == 0.0) continue;
    const double y = std::log(std::abs(p.remainder)) - std::lgamma(p.r + 1.0) - p.r * std::log(std::abs(p.lambda));
    pts.emplace_back(p.r, y);
    sx += p.r;
    sy += y;
    sxx += p.r * p.r;
    sxy += p.r * y;
    ++cnt;
  }
  require(cnt >= 2, "borel fit: need at least two remainders");
  const double den = cnt * sxx - sx * sx;
  require(den > 0.0, "borel fit: need at least two distinct orders");
  const double slope = (cnt * sxy - sx * sy) / den;
  const double icpt = (sy - slope * sx) / cnt;
  d.rho = std::exp(slope);
  d.fit_log_A = icpt;
  double ss = 0.0, env = -std::numeric_limits<double>::infinity();
  for (auto [x, y] : pts) {
    const double res = y - (icpt + slope * x);
    ss += res * res;
    env = std::max(env, y - slope * x);
  }
  d.fit_residual = std::sqrt(ss / cnt);
  d.A = std::exp(env);
  d.envelope_holds = std::isfinite(d.A) && std::isfinite(d.rho);
}

}  // namespace detail

/// R_r(lambda) = f(lambda) - sum_{k<r} a_k lambda^k for r = 0..r_max and a
/// fit of the bound A rho^r r! |lambda|^r.
inline BorelDiagnostics borel_remainder_check(const model::ModelSpec& m, std::span<const cplx> probes, const BorelOptions& bopt,
                                              const EngineOptions& series_opt, const EngineOptions& taylor_opt,
                                              const TaylorOptions& topt = {}) {
  require(!probes.empty(), "borel_remainder_check: no probes");
  require(bopt.r_max >= 1, "borel_remainder_check: r_max must be >= 1");
  BorelDiagnostics d;
  const int order = bopt.r_max - 1;
  if (order >= 1) d.coeffs = taylor_coefficients(m, order, taylor_opt, topt).coeffs;
  const auto f = pressure_series_multi(m, probes, bopt.n_max, series_opt);
  for (std::size_t i = 0; i < probes.size(); ++i) {
    const cplx lam = probes[i];
    cplx partial{};
    double perr = 0.0;
    for (int r = 0; r <= bopt.r_max; ++r) {
      if (r >= 2) {
        partial += d.coeffs[r - 2].value * std::pow(lam, r - 1);
        perr += d.coeffs[r - 2].error * std::pow(std::abs(lam), r - 1);
      }
      const double ferr = f[i].total.error + (std::isfinite(f[i].tail_estimate) ? f[i].tail_estimate : 0.0);
      d.remainders.push_back({lam, r, f[i].total.value - partial, ferr + perr});
    }
  }
  detail::fit_borel(d);
  return d;
}

struct SliceBorel {
  int j = 0;
  BorelDiagnostics diagnostics;
};

struct UniformityReport {
  std::vector<SliceBorel> slices;
  double rho_spread = 0.0;  // max rho / min rho
};

/// Borel diagnostics per slice index on the same lattice setup.
inline UniformityReport borel_uniformity(const model::ModelSpec& m, std::span<const int> js, std::span<const cplx> probes,
                                         const BorelOptions& bopt, const EngineOptions& series_opt, const EngineOptions& taylor_opt,
                                         const TaylorOptions& topt = {}) {
  require(m.is_lattice(), "borel_uniformity: lattice model expected");
  UniformityReport rep;
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (int j : js) {
    model::ModelSpec mj = m;
    mj.slice->j = j;
    SliceBorel sb{j, borel_remainder_check(mj, probes, bopt, series_opt, taylor_opt, topt)};
    lo = std::min(lo, sb.diagnostics.rho);
    hi = std::max(hi, sb.diagnostics.rho);
    rep.slices.push_back(std::move(sb));
  }
  rep.rho_spread = hi / lo;
  return rep;
}

// ---------------------------------------------------------------------------
// Connected two-point function.

struct TwoPointResult {
  cplx lambda{};
  int sites = 0;
  std::vector<std::vector<int>> offsets;  // canonical per-axis offsets (folded, sorted)
  std::vector<double> separations;        // |offset| * spacing, units of M^{-j}
  std::vector<Estimate> values;           // translation-averaged S at each offset
  std::vector<std::vector<Estimate>> per_n;  // per_n[n][offset]
  MatrixXcd matrix;                       // unaveraged S(x, y)
  double matrix_error = 0.0;              // largest per-entry error
  std::vector<double> ratios;             // max_offset |S_{n+1}| / |S_n|
  double tail_estimate = 0.0;
  int M_j_scale_j = 0;
  double M = 2.0;
};

namespace detail {

struct OffsetMap {
  std::vector<std::vector<int>> keys;
  std::vector<int> pair_class;  // x*S + y -> class
  std::vector<int> class_count;
};

inline OffsetMap offset_map(const model::SliceSpec& s) {
  const int S = s.total_sites();
  auto key_of = [&](int x, int y) {
    const auto cx = model::site_coordinates(s, x), cy = model::site_coordinates(s, y);
    std::vector<int> key(s.dim);
    for (int d = 0; d < s.dim; ++d) {
      const int o = ((cy[d] - cx[d]) % s.sites + s.sites) % s.sites;
      key[d] = std::min(o, s.sites - o);
    }
    std::sort(key.begin(), key.end());
    return key;
  };
  std::map<std::vector<int>, int> idx;
  for (int x = 0; x < S; ++x)
    for (int y = 0; y < S; ++y) idx.emplace(key_of(x, y), 0);
  OffsetMap om;
  int c = 0;
  for (auto& [k, v] : idx) {
    v = c++;
    om.keys.push_back(k);
  }
  om.class_count.assign(c, 0);
  om.pair_class.resize(static_cast<std::size_t>(S) * S);
  for (int x = 0; x < S; ++x)
    for (int y = 0; y < S; ++y) {
      const int k = idx.at(key_of(x, y));
      om.pair_class[x * S + y] = k;
      ++om.class_count[k];
    }
  return om;
}

}  // namespace detail

/// LVE sum for S(x, y) with one resolvent vertex: sum_{n=0}^{n_max}
/// (1/n!) sum over trees on n+1 vertices rooted at the resolvent.
inline TwoPointResult two_point_function(const model::ModelSpec& m, int n_max, const EngineOptions& opt) {
  require(m.is_lattice(), "two_point_function: lattice model required");
  m.require_analytic_domain();
  require(n_max >= 0, "two_point_function: n_max must be >= 0");
  require(n_max + 1 <= opt.tree_cap, "two_point_function: n_max exceeds tree cap");
  const auto cov = model::build_lattice_covariance(*m.slice, opt.site_cap);
  const int S = cov.slice.total_sites();
  const cplx g = model::CouplingMap::of(m).g;
  const std::vector<cplx> gs{g};
  const int threads = resolve_threads(opt.threads);
  const detail::OffsetMap om = detail::offset_map(cov.slice);
  const std::size_t K = om.keys.size();
  const std::size_t SS = static_cast<std::size_t>(S) * S;

  // raw S x S matrices for +g and -g -> [K translation averages, then the S*S matrix]
  const detail::Projection project = [&](const std::vector<cplx>& signed_raw) {
    const std::vector<cplx> raw = detail::even_part(signed_raw);
    std::vector<cplx> out(K + SS, cplx{});
    for (std::size_t p = 0; p < SS; ++p) out[om.pair_class[p]] += raw[p];
    for (std::size_t k = 0; k < K; ++k) out[k] /= static_cast<double>(om.class_count[k]);
    std::copy(raw.begin(), raw.end(), out.begin() + K);
    return out;
  };

  TwoPointResult res;
  res.lambda = m.lambda;
  res.sites = S;
  res.offsets = om.keys;
  res.M = cov.slice.M;
  res.M_j_scale_j = cov.slice.j;
  for (const auto& k : om.keys) {
    double r2 = 0.0;
    for (int o : k) r2 += static_cast<double>(o) * o;
    res.separations.push_back(std::sqrt(r2) * cov.slice.spacing);
  }
  std::vector<cplx> total(K + SS, cplx{});
  std::vector<double> total_err(K + SS, 0.0);
  for (int n = 0; n <= n_max; ++n) {
    const int nv = n + 1;
    const auto& shapes = detail::cached_shapes(nv, 0, opt.tree_cap);
    const TermRule& rule = opt.rule(nv);
    std::vector<cplx> term(K + SS, cplx{});
    std::vector<double> err(K + SS, 0.0);
    for (std::size_t si = 0; si < shapes.size(); ++si) {
      const auto& sh = shapes[si];
      const std::uint64_t seed = detail::term_seed(opt.seed, nv, si, 0x3270);
      detail::LatticeTwoPointIntegrand f(sh.representative, cov.sqrt, detail::with_reflections(gs), m.colors);
      const auto r = detail::integrate_tree(sh.representative, S, rule, seed, threads, f, 2 * SS, project);
      const double w = static_cast<double>(sh.multiplicity) / factorial(n);
      for (std::size_t o = 0; o < K + SS; ++o) {
        term[o] += w * r.value[o];
        err[o] += w * r.error[o];
      }
    }
    if (g == cplx{} && n > 0) {
      std::fill(term.begin(), term.end(), cplx{});
      std::fill(err.begin(), err.end(), 0.0);
    }
    std::vector<Estimate> pn;
    for (std::size_t k = 0; k < K; ++k) pn.push_back({term[k], err[k]});
    res.per_n.push_back(std::move(pn));
    for (std::size_t o = 0; o < K + SS; ++o) {
      total[o] += term[o];
      total_err[o] += err[o];
    }
  }
  if (g == cplx{}) {
    // free theory: the resolvent is C itself
    for (std::size_t p = 0; p < SS; ++p) total[K + p] = cov.matrix(p / S, p % S);
    std::fill(total.begin(), total.begin() + K, cplx{});
    for (std::size_t p = 0; p < SS; ++p) total[om.pair_class[p]] += total[K + p] / static_cast<double>(om.class_count[om.pair_class[p]]);
    std::fill(total_err.begin(), total_err.end(), 0.0);
  }
  for (std::size_t n = 0; n + 1 < res.per_n.size(); ++n) {
    double a = 0.0, b = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      a = std::max(a, std::abs(res.per_n[n][k].value));
      b = std::max(b, std::abs(res.per_n[n + 1][k].value));
    }
    res.ratios.push_back(a > 0.0 ? b / a : 0.0);
  }
  double last = 0.0;
  if (!res.per_n.empty())
    for (std::size_t k = 0; k < K; ++k) last = std::max(last, std::abs(res.per_n.back()[k].value));
  if (res.ratios.empty() || g == cplx{}) {
    res.tail_estimate = 0.0;
  } else {
    const double q = res.ratios.back();
    res.tail_estimate = q < 1.0 ? last * q / (1.0 - q) : std::numeric_limits<double>::infinity();
  }
  for (std::size_t k = 0; k < K; ++k) res.values.push_back({total[k], total_err[k]});
  res.matrix.resize(S, S);
  for (std::size_t p = 0; p < SS; ++p) {
    res.matrix(p / S, p % S) = total[K + p];
    res.matrix_error = std::max(res.matrix_error, total_err[K + p]);
  }
  return res;
}

struct DecayFit {
  double c_hat = 0.0;       // decay rate in units of M^j
  double K_hat = 0.0;       // sup |S| M^{-2j} e^{c_hat M^j |x - y|}
  double residual = 0.0;    // RMS residual of log|S| over the log range
  double log_range = 0.0;
  int points = 0;
};

/// Least squares of log|S| against M^j |x - y| over the given separations
/// (all offsets when `use` is empty). Points whose value does not exceed
/// three times its error are discarded.
inline DecayFit decay_rate_fit(std::span<const double> separations, std::span<const Estimate> values, int j, double M,
                               std::span<const int> use = {}) {
  require(separations.size() == values.size(), "decay_rate_fit: size mismatch");
  std::vector<std::size_t> idx;
  if (use.empty()) {
    for (std::size_t i = 0; i < separations.size(); ++i) idx.push_back(i);
  } else {
    for (int i : use) {
      require(i >= 0 && static_cast<std::size_t>(i) < separations.size(), "decay_rate_fit: index out of range");
      idx.push_back(static_cast<std::size_t>(i));
    }
  }
  std::vector<double> xs, ys;
  for (std::size_t i : idx) {
    const double a = std::abs(values[i].value);
    if (!(a > 3.0 * values[i].error) || a == 0.0) continue;
    xs.push_back(separations[i]);
    ys.push_back(std::log(a));
  }
  std::vector<double> distinct = xs;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  if (distinct.size() < 4) throw Error("decay_rate_fit: insufficient dynamic range");
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
    sxx += xs[i] * xs[i];
    sxy += xs[i] * ys[i];
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double icpt = (sy - slope * sx) / n;
  DecayFit fit;
  fit.c_hat = -slope;
  fit.points = static_cast<int>(xs.size());
  double ss = 0.0;
  const auto [lo, hi] = std::minmax_element(ys.begin(), ys.end());
  fit.log_range = *hi - *lo;
  const double scale = std::pow(M, -2.0 * j);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - (icpt + slope * xs[i]);
    ss += r * r;
    fit.K_hat = std::max(fit.K_hat, std::exp(ys[i]) * scale * std::exp(fit.c_hat * xs[i]));
  }
  fit.residual = fit.log_range > 0.0 ? std::sqrt(ss / n) / fit.log_range : 0.0;
  return fit;
}

inline DecayFit decay_rate_fit(const TwoPointResult& r, std::span<const int> use = {}) {
  return decay_rate_fit(r.separations, r.values, r.M_j_scale_j, r.M, use);
}

}  // namespace lve::engine
