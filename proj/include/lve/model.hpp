#pragma once

// Model specifications, the single-slice propagator, its periodic lattice
// discretization, and the coupling constant of the intermediate field.
//
// Units: every lattice length is expressed through `spacing`, measured in
// units of the slice scale M^{-j}. The lattice cell weight is the
// four-dimensional cell volume (spacing * M^{-j})^4, matching the d = 4
// normalization of the slice kernel; it multiplies the quartic coupling and
// every operator product on the lattice. With this choice a lattice slice at
// m = 0 is an exact rescaling of the same lattice at j = 0.

#include <Eigen/Dense>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lve/common.hpp"
#include "lve/quadrature.hpp"

namespace lve::model {

enum class ModelKind { ZeroDim, LatticeSlice };

struct SliceSpec {
  double M = 2.0;
  int j = 0;
  double mass = 0.0;
  int dim = 1;
  int sites = 1;         // per axis
  double spacing = 1.0;  // in units of M^{-j}

  void validate() const {
    require(std::isfinite(M) && M > 1.0, "slice: M must be > 1");
    require(j >= 0, "slice: j must be >= 0");
    require(std::isfinite(mass) && mass >= 0.0, "slice: mass must be >= 0");
    require(dim >= 1 && dim <= 4, "slice: dim must be in {1,2,3,4}");
    require(sites >= 1, "slice: sites must be >= 1");
    require(std::isfinite(spacing) && spacing > 0.0, "slice: spacing must be > 0");
  }

  int total_sites() const {
    int n = 1;
    for (int d = 0; d < dim; ++d) n *= sites;
    return n;
  }
  double scale() const { return std::pow(M, -j); }  // M^{-j}
  double lattice_spacing() const { return spacing * scale(); }
  double extent() const { return sites * lattice_spacing(); }
  // four-volume of a cell: spacing along the lattice axes, one slice length
  // M^{-j} across the remaining 4 - dim directions
  double cell_weight() const { return std::pow(lattice_spacing(), dim) * std::pow(scale(), 4 - dim); }
  double alpha_min() const { return std::pow(M, -2.0 * j); }
  double alpha_max() const { return std::pow(M, -2.0 * j + 2.0); }

  /// True when the periodic box spans fewer than three slice lengths.
  bool extent_warning() const { return sites * spacing < 3.0; }
};

struct ModelSpec {
  ModelKind kind = ModelKind::ZeroDim;
  cplx lambda{0.0, 0.0};
  int colors = 1;
  std::optional<SliceSpec> slice;

  static ModelSpec zero_dim(cplx lambda, int colors = 1) {
    ModelSpec m;
    m.lambda = lambda;
    m.colors = colors;
    return m;
  }
  static ModelSpec lattice(const SliceSpec& s, cplx lambda, int colors = 1) {
    ModelSpec m;
    m.kind = ModelKind::LatticeSlice;
    m.slice = s;
    m.lambda = lambda;
    m.colors = colors;
    return m;
  }

  bool is_lattice() const { return kind == ModelKind::LatticeSlice; }
  int sites() const { return is_lattice() ? slice->total_sites() : 1; }
  double cell_weight() const { return is_lattice() ? slice->cell_weight() : 1.0; }

  void validate() const {
    require(colors >= 1, "model: colors must be >= 1");
    require(std::isfinite(lambda.real()) && std::isfinite(lambda.imag()), "model: lambda must be finite");
    if (is_lattice()) {
      require(slice.has_value(), "model: lattice mode needs a slice");
      slice->validate();
    }
  }

  /// Series evaluators need Re(lambda) > 0; lambda = 0 is admitted as the free theory.
  void require_analytic_domain() const {
    validate();
    require(lambda == cplx{} || lambda.real() > 0.0, "model: Re(lambda) must be > 0");
  }

  ModelSpec with_lambda(cplx l) const {
    ModelSpec m = *this;
    m.lambda = l;
    return m;
  }
};

/// Intermediate-field constant g in V = -(N/2) Tr log(1 + i g D sigma D).
/// For lambda * w * sum phi^4 with unit-normal sigma, g^2 = 8 lambda w.
struct CouplingMap {
  cplx g;
  double cell_weight = 1.0;

  static CouplingMap of(const ModelSpec& m) {
    const double w = m.cell_weight();
    return {std::sqrt(8.0 * m.lambda * w), w};
  }
};

// ---------------------------------------------------------------------------
// Slice propagator.

inline double squared_distance(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), "propagator: point dimensions differ");
  double r2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    require(std::isfinite(x[i]) && std::isfinite(y[i]), "propagator: non-finite coordinate");
    const double d = x[i] - y[i];
    r2 += d * d;
  }
  return r2;
}

/// Slice kernel at squared separation r2, by adaptive Gauss-Kronrod on alpha.
inline double propagator_at(const SliceSpec& s, double r2, double* error_estimate = nullptr) {
  s.validate();
  require(std::isfinite(r2) && r2 >= 0.0, "propagator: invalid separation");
  const double m2 = s.mass * s.mass;
  // alpha = a0 u with u in [1, M^2]
  const double a0 = s.alpha_min();
  auto f = [&](double u) { return std::exp(-a0 * u * m2 - r2 / (4.0 * a0 * u)) / (u * u); };
  double err = 0.0;
  const double v = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, 1.0, s.M * s.M, 12, 1e-13, &err) / a0;
  err /= a0;
  if (error_estimate) *error_estimate = err;
  require(err <= 1e-10 * std::abs(v) || v == 0.0, "propagator: quadrature did not reach 1e-10 relative");
  return v;
}

/// C_j(x, y) = int_{M^{-2j}}^{M^{-2j+2}} e^{-alpha m^2} e^{-(x-y)^2/4alpha} alpha^{-2} d alpha.
inline double eval_propagator(const SliceSpec& s, std::span<const double> x, std::span<const double> y) {
  return propagator_at(s, squared_distance(x, y));
}

/// log C_j at distance r, stable for separations where C_j underflows.
/// Uses t = r^2/4alpha - r^2/4alpha_max, giving
/// C = (4/r^2) e^{-r^2/4alpha_max} int_0^T e^{-t} e^{-alpha(t) m^2} dt.
inline double log_propagator(const SliceSpec& s, double r) {
  s.validate();
  require(std::isfinite(r) && r >= 0.0, "propagator: invalid separation");
  if (r * r < 1e-8 * s.alpha_min()) return std::log(propagator_at(s, r * r));
  const double r2 = r * r;
  const double c = r2 / (4.0 * s.alpha_max());
  const double t_max = std::min(r2 / (4.0 * s.alpha_min()) - c, 60.0);
  const double m2 = s.mass * s.mass;
  auto f = [&](double t) { return std::exp(-t - m2 * r2 / (4.0 * (t + c))); };
  const double integral = boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, 0.0, t_max, 12, 1e-13);
  return std::log(4.0 / r2) - c + std::log(integral);
}

// ---------------------------------------------------------------------------
// Periodic lattice covariance.

struct LatticeCovariance {
  SliceSpec slice;
  Eigen::MatrixXd matrix;  // C[x][y]
  Eigen::MatrixXd sqrt;    // symmetric PSD square root D
  std::vector<std::vector<double>> positions;
  double min_eigenvalue = 0.0;
  double max_eigenvalue = 0.0;
  int clipped_count = 0;
  double clipped_magnitude = 0.0;
};

inline std::vector<int> site_coordinates(const SliceSpec& s, int index) {
  std::vector<int> c(s.dim);
  for (int d = s.dim - 1; d >= 0; --d) {
    c[d] = index % s.sites;
    index /= s.sites;
  }
  return c;
}

inline int site_index(const SliceSpec& s, std::span<const int> coords) {
  int idx = 0;
  for (int d = 0; d < s.dim; ++d) idx = idx * s.sites + ((coords[d] % s.sites) + s.sites) % s.sites;
  return idx;
}

namespace detail {

/// Periodized kernel for per-axis integer offsets, summing all images.
/// Because the heat kernel factorizes over axes, each alpha node needs only
/// one-dimensional theta sums. Fixed alpha nodes make the resulting matrix a
/// positive combination of periodic Gaussians, hence PSD to rounding.
class PeriodicKernel {
 public:
  explicit PeriodicKernel(const SliceSpec& s) : s_(s) {
    // panel count: refine until the largest change in any distinct offset is < 1e-15 C(0)
    for (int panels = 4; panels <= 4096; panels *= 2) {
      build_nodes(panels);
      std::vector<double> fine(s.sites);
      for (int o = 0; o < s.sites; ++o) fine[o] = axis_integral_probe(o);
      if (!probe_.empty()) {
        double diff = 0.0;
        for (int o = 0; o < s.sites; ++o) diff = std::max(diff, std::abs(fine[o] - probe_[o]));
        if (diff < 1e-15 * fine[0]) break;
      }
      probe_ = fine;
    }
  }

  double operator()(std::span<const int> offsets) const {
    double total = 0.0;
    for (std::size_t q = 0; q < alpha_.size(); ++q) {
      double prod = weight_[q];
      for (int d = 0; d < s_.dim; ++d) prod *= theta(offsets[d], q);
      total += prod;
    }
    return total;
  }

 private:
  void build_nodes(int panels) {
    const quad::Rule1d r = quad::gauss_legendre01(16);
    const double lo = s_.alpha_min(), hi = s_.alpha_max();
    alpha_.clear();
    weight_.clear();
    const double m2 = s_.mass * s_.mass;
    for (int p = 0; p < panels; ++p) {
      const double a0 = lo + (hi - lo) * p / panels;
      const double h = (hi - lo) / panels;
      for (std::size_t i = 0; i < r.nodes.size(); ++i) {
        const double al = a0 + h * r.nodes[i];
        alpha_.push_back(al);
        weight_.push_back(h * r.weights[i] * std::exp(-al * m2) / (al * al));
      }
    }
    // theta table per alpha node and per-axis offset
    const int n = s_.sites;
    const double a = s_.lattice_spacing();
    const double L = s_.extent();
    theta_.assign(alpha_.size() * n, 0.0);
    for (std::size_t q = 0; q < alpha_.size(); ++q) {
      const double four_a = 4.0 * alpha_[q];
      // images until the Gaussian factor drops below 1e-18
      const int K = static_cast<int>(std::ceil((std::sqrt(four_a * 42.0) + L) / L)) + 1;
      for (int o = 0; o < n; ++o) {
        double sum = 0.0;
        for (int k = -K; k <= K; ++k) {
          const double d = o * a + k * L;
          sum += std::exp(-d * d / four_a);
        }
        theta_[q * n + o] = sum;
      }
    }
  }

  double theta(int offset, std::size_t q) const {
    const int n = s_.sites;
    const int o = ((offset % n) + n) % n;
    return theta_[q * n + o];
  }

  double axis_integral_probe(int offset) const {
    std::vector<int> off(s_.dim, 0);
    off[0] = offset;
    return (*this)(off);
  }

  SliceSpec s_;
  std::vector<double> alpha_, weight_, theta_;
  std::vector<double> probe_;
};

}  // namespace detail

/// Builds C[x][y] for the periodic lattice of the slice (row-major site
/// order) and its PSD square root. Negative eigenvalues above
/// -1e-12 * ||C|| are clipped and reported; anything below is an error.
inline LatticeCovariance build_lattice_covariance(const SliceSpec& s, int cap = 64) {
  s.validate();
  const int n = s.total_sites();
  require(n <= cap, "lattice covariance: site count " + std::to_string(n) + " exceeds cap " + std::to_string(cap));
  LatticeCovariance out;
  out.slice = s;
  out.matrix.resize(n, n);
  out.positions.resize(n);
  const double a = s.lattice_spacing();
  for (int x = 0; x < n; ++x) {
    const auto c = site_coordinates(s, x);
    out.positions[x].resize(s.dim);
    for (int d = 0; d < s.dim; ++d) out.positions[x][d] = c[d] * a;
  }
  const detail::PeriodicKernel kernel(s);
  std::map<std::vector<int>, double> cache;
  for (int x = 0; x < n; ++x) {
    const auto cx = site_coordinates(s, x);
    for (int y = x; y < n; ++y) {
      const auto cy = site_coordinates(s, y);
      std::vector<int> key(s.dim);
      for (int d = 0; d < s.dim; ++d) {
        const int o = ((cy[d] - cx[d]) % s.sites + s.sites) % s.sites;
        key[d] = std::min(o, s.sites - o);
      }
      std::sort(key.begin(), key.end());
      auto it = cache.find(key);
      if (it == cache.end()) it = cache.emplace(key, kernel(key)).first;
      out.matrix(x, y) = out.matrix(y, x) = it->second;
    }
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(out.matrix);
  Eigen::VectorXd lam = eig.eigenvalues();
  out.min_eigenvalue = lam.minCoeff();
  out.max_eigenvalue = lam.maxCoeff();
  const double tol = 1e-12 * std::abs(out.max_eigenvalue);
  require(out.min_eigenvalue >= -tol,
          "lattice covariance: eigenvalue " + std::to_string(out.min_eigenvalue) +
              " below PSD tolerance; discretization too coarse");
  for (int i = 0; i < n; ++i) {
    if (lam(i) < 0.0) {
      ++out.clipped_count;
      out.clipped_magnitude = std::max(out.clipped_magnitude, -lam(i));
      lam(i) = 0.0;
    }
  }
  out.sqrt = eig.eigenvectors() * lam.cwiseSqrt().asDiagonal() * eig.eigenvectors().transpose();
  return out;
}

struct NormReport {
  double norm = 0.0;
  int iterations = 0;
  double relative_change = 0.0;
};

/// Largest eigenvalue of the covariance as an integral operator on the
/// lattice (matrix times cell weight), by power iteration.
inline NormReport operator_norm(const LatticeCovariance& cov, double rel_tol = 1e-8, int max_iterations = 100000) {
  const Eigen::MatrixXd op = cov.matrix * cov.slice.cell_weight();
  const int n = static_cast<int>(op.rows());
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = 1.0 + 0.01 * std::sin(1.0 + i);
  v.normalize();
  NormReport rep;
  double prev = 0.0;
  for (int it = 1; it <= max_iterations; ++it) {
    Eigen::VectorXd w = op * v;
    const double rayleigh = v.dot(w);
    const double nw = w.norm();
    if (nw == 0.0) return {0.0, it, 0.0};
    v = w / nw;
    rep.iterations = it;
    rep.norm = rayleigh;
    rep.relative_change = std::abs(rayleigh - prev) / std::abs(rayleigh);
    if (it > 1 && rep.relative_change < rel_tol) return rep;
    prev = rayleigh;
  }
  throw Error("operator_norm: power iteration did not converge");
}

inline NormReport operator_norm(const SliceSpec& s, int cap = 64) { return operator_norm(build_lattice_covariance(s, cap)); }

struct BoundReport {
  double c_trial = 0.0;
  double sup_ratio = 0.0;           // sup of C_j e^{c M^j r} M^{-2j}
  double argmax_separation = 0.0;   // in units of M^{-j}
  bool failed = false;
  double failure_separation = 0.0;  // first sampled M^j r where the guard tripped
  int samples = 0;
};

struct BoundSampling {
  double max_separation = 64.0;  // in units of M^{-j}
  double step = 1.0 / 16.0;
  double log_guard = 690.0;  // exp overflow guard on the ratio
};

/// Samples the ratio C_j(r) e^{c M^j r} M^{-2j} along a ray; a finite
/// supremum certifies (K = sup, c = c_trial) on the sampled range.
inline BoundReport verify_propagator_bound(const SliceSpec& s, double c_trial, const BoundSampling& samp = {}) {
  s.validate();
  require(std::isfinite(c_trial) && c_trial >= 0.0, "propagator bound: c_trial must be >= 0");
  BoundReport rep;
  rep.c_trial = c_trial;
  double best_log = -std::numeric_limits<double>::infinity();
  const int count = static_cast<int>(std::floor(samp.max_separation / samp.step + 0.5));
  const double log_scale = -2.0 * s.j * std::log(s.M);
  for (int i = 0; i <= count; ++i) {
    const double u = i * samp.step;
    const double r = u * s.scale();
    const double lr = log_propagator(s, r) + c_trial * u + log_scale;
    ++rep.samples;
    if (lr > samp.log_guard) {
      rep.failed = true;
      rep.failure_separation = u;
      rep.sup_ratio = std::numeric_limits<double>::infinity();
      rep.argmax_separation = u;
      return rep;
    }
    if (lr > best_log) {
      best_log = lr;
      rep.argmax_separation = u;
    }
  }
  rep.sup_ratio = std::exp(best_log);
  return rep;
}

}  // namespace lve::model
