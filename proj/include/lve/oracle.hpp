#pragma once

// Reference values computed without the expansion: direct quadrature of
// the zero-dimensional integral, exact perturbative coefficients from pair
// counting, and brute-force lattice integrals.

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/gamma.hpp>
#include <boost/multiprecision/cpp_int.hpp>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "lve/common.hpp"
#include "lve/model.hpp"
#include "lve/parallel.hpp"
#include "lve/quadrature.hpp"

namespace lve::oracle {

struct OracleResult {
  cplx value{};
  double error = 0.0;
  std::string method;
};

// ---------------------------------------------------------------------------
// Zero-dimensional integral, radial form for N colors:
// Z = 2^{1-N/2}/Gamma(N/2) int_0^inf r^{N-1} e^{-r^2/2 - lambda r^4} dr.

namespace detail {

inline double radial_norm(int colors) { return std::pow(2.0, 1.0 - 0.5 * colors) / std::tgamma(0.5 * colors); }

/// Smallest R (on a 1/4 grid) whose free-measure tail is below `tail`.
inline double truncation_radius(int colors, double tail) {
  double R = 4.0;
  while (boost::math::gamma_q(0.5 * colors, 0.5 * R * R) > tail) R += 0.25;
  return R;
}

inline void check_lambda(cplx lambda) {
  require(std::isfinite(lambda.real()) && std::isfinite(lambda.imag()), "oracle: lambda must be finite");
  require(lambda == cplx{} || lambda.real() > 0.0, "oracle: Re(lambda) must be > 0");
}

}  // namespace detail

/// log Z by adaptive Gauss-Kronrod on the truncated radial integral.
inline OracleResult quadrature_logZ_0d(cplx lambda, double tol = 1e-12, int colors = 1) {
  detail::check_lambda(lambda);
  require(colors >= 1, "oracle: colors must be >= 1");
  require(tol > 0.0, "oracle: tol must be > 0");
  if (lambda == cplx{}) return {cplx{}, 0.0, "exact"};
  const double norm = detail::radial_norm(colors);
  const double tail = tol / 10.0;
  const double R = detail::truncation_radius(colors, tail);
  auto base = [&](double r) { return norm * std::pow(r, colors - 1) * std::exp(-0.5 * r * r); };
  auto re = [&](double r) { return base(r) * std::real(std::exp(-lambda * std::pow(r, 4))); };
  auto im = [&](double r) { return base(r) * std::imag(std::exp(-lambda * std::pow(r, 4))); };
  using GK = boost::math::quadrature::gauss_kronrod<double, 61>;
  double er = 0.0, ei = 0.0;
  // fixed panels of width <= 1/4, no adaptive refinement: the adaptive
  // driver's error estimate is erratic near machine precision
  double zr = 0.0, zi = 0.0;
  const int pieces = static_cast<int>(std::ceil(4.0 * R));
  for (int p = 0; p < pieces; ++p) {
    const double a = R * p / pieces, b = R * (p + 1) / pieces;
    double e1 = 0.0, e2 = 0.0;
    zr += GK::integrate(re, a, b, 0, 0.0, &e1);
    zi += lambda.imag() == 0.0 ? 0.0 : GK::integrate(im, a, b, 0, 0.0, &e2);
    er += e1;
    ei += e2;
  }
  const cplx Z(zr, zi);
  const double zerr = std::hypot(er, ei) + tail + 4.0 * std::numeric_limits<double>::epsilon() * std::abs(Z);
  const double err = zerr / std::abs(Z);
  if (err > tol) {
    std::ostringstream msg;
    msg << "quadrature_logZ_0d: tolerance " << tol << " unreachable (estimate " << err << ")";
    throw Error(msg.str());
  }
  return {std::log(Z), err, "gauss-kronrod-61"};
}

/// Independent composite 10-point Gauss-Legendre evaluation.
inline OracleResult quadrature_logZ_0d_gl(cplx lambda, int panels = 400, int colors = 1) {
  detail::check_lambda(lambda);
  if (lambda == cplx{}) return {cplx{}, 0.0, "exact"};
  const double norm = detail::radial_norm(colors);
  const double R = detail::truncation_radius(colors, 1e-17);
  const quad::Rule1d rule = quad::gauss_legendre01(10);
  CompensatedSum acc;
  const double h = R / panels;
  for (int p = 0; p < panels; ++p)
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
      const double r = h * (p + rule.nodes[i]);
      acc.add(h * rule.weights[i] * norm * std::pow(r, colors - 1) * std::exp(-0.5 * r * r - lambda * std::pow(r, 4)));
    }
  return {std::log(acc.value()), 1e-14, "composite-gauss-legendre-10"};
}

// ---------------------------------------------------------------------------
// Perturbative coefficients from pair counting.

using Rational = boost::multiprecision::cpp_rational;
using BigInt = boost::multiprecision::cpp_int;

struct WickSeries {
  std::vector<Rational> z;  // Z = sum_k z_k lambda^k, z_0 = 1
  std::vector<Rational> a;  // log Z = sum_k a_k lambda^k, a_0 = 0
  double z_double(int k) const { return z.at(k).convert_to<double>(); }
  double a_double(int k) const { return a.at(k).convert_to<double>(); }
};

/// z_k = (-1)^k <|phi|^{4k}> / k! with <|phi|^{2m}> = prod_{i<m} (N + 2i);
/// for N = 1 this is (4k-1)!!. a_k by the formal logarithm.
inline WickSeries wick_coefficients(int k_max, int colors = 1) {
  require(k_max >= 0 && k_max <= 12, "wick_coefficients: k_max must be in [0, 12]");
  require(colors >= 1, "wick_coefficients: colors must be >= 1");
  WickSeries w;
  w.z.resize(k_max + 1);
  w.a.resize(k_max + 1);
  w.z[0] = 1;
  w.a[0] = 0;
  for (int k = 1; k <= k_max; ++k) {
    BigInt moment = 1;
    for (int i = 0; i < 2 * k; ++i) moment *= BigInt(colors + 2 * i);
    BigInt kf = 1;
    for (int i = 2; i <= k; ++i) kf *= i;
    Rational zk(moment, kf);
    w.z[k] = (k % 2 == 1) ? Rational(-zk) : zk;
  }
  // a_k = z_k - (1/k) sum_{j=1}^{k-1} j a_j z_{k-j}
  for (int k = 1; k <= k_max; ++k) {
    Rational s = 0;
    for (int j = 1; j < k; ++j) s += Rational(j) * w.a[j] * w.z[k - j];
    w.a[k] = w.z[k] - s / Rational(k);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Lattice partition function.

struct LatticeOracleSpec {
  enum class Mode { Tensor, MonteCarlo } mode = Mode::Tensor;
  int nodes = 0;                  // per axis, tensor mode (4k+1); 0 picks by site count
  std::size_t samples = 1 << 20;  // MC mode
  std::uint64_t seed = 7;
  int threads = 0;
};

/// log of E[exp(-lambda w sum_x phi_x^4)] with phi = D z, z standard normal.
inline OracleResult lattice_logZ(const model::SliceSpec& slice, cplx lambda, const LatticeOracleSpec& spec = {}, int cap = 64) {
  detail::check_lambda(lambda);
  const auto cov = model::build_lattice_covariance(slice, cap);
  const int S = slice.total_sites();
  const cplx lw = lambda * slice.cell_weight();
  const Eigen::MatrixXd& D = cov.sqrt;
  auto weight = [&](std::span<const double> z) {
    double s4 = 0.0;
    for (int x = 0; x < S; ++x) {
      double phi = 0.0;
      for (int y = 0; y < S; ++y) phi += D(x, y) * z[y];
      const double p2 = phi * phi;
      s4 += p2 * p2;
    }
    return std::exp(-lw * s4);
  };
  const int threads = resolve_threads(spec.threads);
  if (spec.mode == LatticeOracleSpec::Mode::Tensor) {
    require(S <= 4, "lattice_logZ: tensor mode limited to 4 sites");
    static constexpr int auto_nodes[] = {0, 401, 201, 121, 81};
    const int nodes = spec.nodes > 0 ? spec.nodes : auto_nodes[S];
    require(nodes >= 9 && nodes % 4 == 1, "lattice_logZ: tensor nodes must be 4k+1 and >= 9");
    // trapezoid rule on [-L, L] per axis; for a Gaussian weight times an
    // entire function it converges exponentially, and the rule on every
    // second node gives a conservative error estimate
    const double L = 9.0;
    auto run = [&](int stride) {
      const int half = (nodes - 1) / 2 / stride;
      const double h = L / half;
      const int q = 2 * half + 1;
      std::vector<double> x(q), wt(q);
      for (int i = 0; i < q; ++i) {
        x[i] = (i - half) * h;
        wt[i] = h * std::exp(-0.5 * x[i] * x[i]) / std::sqrt(2.0 * std::numbers::pi);
      }
      std::size_t total = 1;
      for (int d = 0; d < S; ++d) total *= static_cast<std::size_t>(q);
      const std::size_t block = 4096;
      const std::size_t tasks = (total + block - 1) / block;
      std::vector<cplx> part(tasks);
      parallel_for(tasks, threads, [&](std::size_t t) {
        CompensatedSum acc;
        std::vector<double> z(S);
        for (std::size_t p = t * block; p < std::min(total, (t + 1) * block); ++p) {
          std::size_t rest = p;
          double w = 1.0;
          for (int d = 0; d < S; ++d) {
            const int i = static_cast<int>(rest % q);
            rest /= q;
            z[d] = x[i];
            w *= wt[i];
          }
          acc.add(w * weight(z));
        }
        part[t] = acc.value();
      });
      CompensatedSum tot;
      for (auto v : part) tot.add(v);
      return tot.value();
    };
    const cplx fine = run(1), coarse = run(2);
    return {std::log(fine), std::abs(fine - coarse) / std::abs(fine) + 1e-15, "tensor-trapezoid"};
  }
  require(S <= 16, "lattice_logZ: Monte Carlo mode limited to 16 sites");
  const quad::CounterRng rng(spec.seed, 0x5A);
  const std::size_t block = 1 << 14;
  const std::size_t tasks = (spec.samples + block - 1) / block;
  std::vector<cplx> s1(tasks);
  std::vector<double> s2(tasks);
  parallel_for(tasks, threads, [&](std::size_t t) {
    std::vector<double> z(S);
    CompensatedSum a;
    double b = 0.0;
    for (std::size_t i = t * block; i < std::min(spec.samples, (t + 1) * block); ++i) {
      for (int x = 0; x < S; ++x) z[x] = rng.normal(i * S + x);
      const cplx w = weight(z);
      a.add(w);
      b += std::norm(w);
    }
    s1[t] = a.value();
    s2[t] = b;
  });
  CompensatedSum a;
  double b = 0.0;
  for (std::size_t t = 0; t < tasks; ++t) {
    a.add(s1[t]);
    b += s2[t];
  }
  const double N = static_cast<double>(spec.samples);
  const cplx mean = a.value() / N;
  const double var = std::max(0.0, b / N - std::norm(mean));
  return {std::log(mean), std::sqrt(var / N) / std::abs(mean), "monte-carlo"};
}

// ---------------------------------------------------------------------------
// Two-point function by reweighted Gaussian sampling.

struct TwoPointOracle {
  std::vector<std::vector<int>> offsets;  // folded per-axis offsets, as in the engine
  std::vector<double> separations;        // units of M^{-j}
  std::vector<OracleResult> values;       // translation-averaged <phi(x) phi(y)>
  double effective_samples = 0.0;
};

/// <phi(x) phi(y)> under exp(-lambda w sum phi^4) dmu_C for every offset
/// class, with delta-method errors of the ratio estimator. Refuses when the
/// effective sample size is below 100.
inline TwoPointOracle connected_2pt_profile(const model::SliceSpec& slice, cplx lambda, std::size_t samples, std::uint64_t seed,
                                            int threads = 0, int cap = 64) {
  detail::check_lambda(lambda);
  require(samples >= 2, "connected_2pt_oracle: need samples >= 2");
  const auto cov = model::build_lattice_covariance(slice, cap);
  const int S = slice.total_sites();
  const cplx lw = lambda * slice.cell_weight();
  // offset classes (same folding as the engine)
  std::map<std::vector<int>, int> idx;
  std::vector<int> cls(static_cast<std::size_t>(S) * S);
  auto key_of = [&](int x, int y) {
    const auto cx = model::site_coordinates(slice, x), cy = model::site_coordinates(slice, y);
    std::vector<int> key(slice.dim);
    for (int d = 0; d < slice.dim; ++d) {
      const int o = ((cy[d] - cx[d]) % slice.sites + slice.sites) % slice.sites;
      key[d] = std::min(o, slice.sites - o);
    }
    std::sort(key.begin(), key.end());
    return key;
  };
  for (int x = 0; x < S; ++x)
    for (int y = 0; y < S; ++y) idx.emplace(key_of(x, y), 0);
  TwoPointOracle out;
  int c = 0;
  for (auto& [k, v] : idx) {
    v = c++;
    out.offsets.push_back(k);
    double r2 = 0.0;
    for (int o : k) r2 += static_cast<double>(o) * o;
    out.separations.push_back(std::sqrt(r2) * slice.spacing);
  }
  const int K = c;
  std::vector<int> count(K, 0);
  for (int x = 0; x < S; ++x)
    for (int y = 0; y < S; ++y) {
      cls[x * S + y] = idx.at(key_of(x, y));
      ++count[cls[x * S + y]];
    }

  struct Moments {
    cplx sw{};
    double sw_abs = 0.0, sw2 = 0.0;
    std::vector<cplx> swa;
    std::vector<double> sw2a, sw2aa;
  };
  const std::size_t block = 1 << 13;
  const std::size_t tasks = (samples + block - 1) / block;
  std::vector<Moments> parts(tasks);
  const quad::CounterRng rng(seed, 0x32);
  const Eigen::MatrixXd& D = cov.sqrt;
  parallel_for(tasks, resolve_threads(threads), [&](std::size_t t) {
    Moments m;
    m.swa.assign(K, cplx{});
    m.sw2a.assign(K, 0.0);
    m.sw2aa.assign(K, 0.0);
    Eigen::VectorXd z(S);
    std::vector<double> A(K);
    for (std::size_t i = t * block; i < std::min(samples, (t + 1) * block); ++i) {
      for (int x = 0; x < S; ++x) z(x) = rng.normal(i * S + x);
      const Eigen::VectorXd phi = D * z;
      double s4 = 0.0;
      for (int x = 0; x < S; ++x) s4 += phi(x) * phi(x) * phi(x) * phi(x);
      const cplx w = std::exp(-lw * s4);
      std::fill(A.begin(), A.end(), 0.0);
      for (int x = 0; x < S; ++x)
        for (int y = 0; y < S; ++y) A[cls[x * S + y]] += phi(x) * phi(y);
      const double w2 = std::norm(w);
      m.sw += w;
      m.sw_abs += std::abs(w);
      m.sw2 += w2;
      for (int k = 0; k < K; ++k) {
        A[k] /= count[k];
        m.swa[k] += w * A[k];
        m.sw2a[k] += w2 * A[k];
        m.sw2aa[k] += w2 * A[k] * A[k];
      }
    }
    parts[t] = std::move(m);
  });
  Moments tot;
  tot.swa.assign(K, cplx{});
  tot.sw2a.assign(K, 0.0);
  tot.sw2aa.assign(K, 0.0);
  for (const auto& m : parts) {
    tot.sw += m.sw;
    tot.sw_abs += m.sw_abs;
    tot.sw2 += m.sw2;
    for (int k = 0; k < K; ++k) {
      tot.swa[k] += m.swa[k];
      tot.sw2a[k] += m.sw2a[k];
      tot.sw2aa[k] += m.sw2aa[k];
    }
  }
  out.effective_samples = tot.sw_abs * tot.sw_abs / tot.sw2;
  if (out.effective_samples < 100.0)
    throw Error("connected_2pt_oracle: effective sample size " + std::to_string(out.effective_samples) + " below 100");
  const double N = static_cast<double>(samples);
  const cplx mw = tot.sw / N;
  for (int k = 0; k < K; ++k) {
    const cplx r = tot.swa[k] / tot.sw;
    // E|w (A - r)|^2 with A real
    const double e = (tot.sw2aa[k] - 2.0 * r.real() * tot.sw2a[k] + std::norm(r) * tot.sw2) / N;
    const double se = std::sqrt(std::max(0.0, e) / N) / std::abs(mw);
    out.values.push_back({r, se, "reweighted-monte-carlo"});
  }
  return out;
}

/// <phi(x) phi(y)> for one pair of sites (translation averaged over the
/// pair's offset class).
inline OracleResult connected_2pt_oracle(const model::SliceSpec& slice, cplx lambda, int x, int y, std::size_t samples,
                                         std::uint64_t seed, int threads = 0) {
  const int S = slice.total_sites();
  require(x >= 0 && x < S && y >= 0 && y < S, "connected_2pt_oracle: site out of range");
  const auto prof = connected_2pt_profile(slice, lambda, samples, seed, threads);
  const auto cx = model::site_coordinates(slice, x), cy = model::site_coordinates(slice, y);
  std::vector<int> key(slice.dim);
  for (int d = 0; d < slice.dim; ++d) {
    const int o = ((cy[d] - cx[d]) % slice.sites + slice.sites) % slice.sites;
    key[d] = std::min(o, slice.sites - o);
  }
  std::sort(key.begin(), key.end());
  for (std::size_t k = 0; k < prof.offsets.size(); ++k)
    if (prof.offsets[k] == key) return prof.values[k];
  throw Error("connected_2pt_oracle: offset class not found");
}

}  // namespace lve::oracle
