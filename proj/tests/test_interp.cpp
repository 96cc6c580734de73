#include <catch2/catch_amalgamated.hpp>

#include "lve/interp.hpp"
#include "lve/loopvertex.hpp"

using namespace lve;
using Catch::Matchers::WithinAbs;

namespace {

interp::QuadratureSpec tensor(int q) {
  interp::QuadratureSpec s;
  s.mode = interp::QuadMode::TensorHermite;
  s.nodes = q;
  return s;
}

}  // namespace

TEST_CASE("covariance from tree and weakening parameters") {
  SECTION("n = 1") {
    const auto c = interp::build_covariance(trees::make_tree(1, {}), {});
    CHECK(c.W.rows() == 1);
    CHECK(c.W(0, 0) == 1.0);
  }
  SECTION("n = 2") {
    const double w[] = {0.4};
    const auto c = interp::build_covariance(trees::make_tree(2, {{0, 1}}), w);
    CHECK(c.W(0, 1) == 0.4);
    CHECK(c.W(1, 0) == 0.4);
    CHECK(c.W(0, 0) == 1.0);
  }
  SECTION("star on three vertices") {
    const double w[] = {0.9, 0.3};
    const auto c = interp::build_covariance(trees::make_tree(3, {{0, 1}, {0, 2}}), w);
    CHECK(c.W(1, 2) == 0.3);
    CHECK(c.W(0, 1) == 0.9);
  }
  SECTION("w outside [0, 1] is rejected") {
    const double w[] = {1.5};
    CHECK_THROWS_AS(interp::build_covariance(trees::make_tree(2, {{0, 1}}), w), Error);
  }
}

TEST_CASE("root reproduces W") {
  const double w[] = {0.8, 0.1, 0.5, 0.0};
  const auto t = trees::make_tree(5, {{0, 1}, {1, 2}, {1, 3}, {3, 4}});
  const auto c = interp::build_covariance(t, w);
  CHECK((c.root * c.root.transpose() - c.W).norm() < 1e-12);
  CHECK(c.min_pivot >= interp::pivot_tolerance);
}

TEST_CASE("random (tree, w) draws are positive semidefinite") {
  const quad::CounterRng rng(99, 1);
  double worst = 1.0;
  for (std::uint64_t i = 0; i < 20000; ++i) {
    const int n = 2 + static_cast<int>(rng.uniform(i * 32) * 7);  // 2..8
    trees::PruferCode code(n - 2);
    for (int c = 0; c < n - 2; ++c) code[c] = std::min(n - 1, static_cast<int>(rng.uniform(i * 32 + 1 + c) * n));
    std::vector<double> w(n - 1);
    for (int e = 0; e < n - 1; ++e) w[e] = rng.uniform(i * 32 + 16 + e);
    const double p = interp::min_ldlt_pivot(interp::covariance_matrix(trees::prufer_decode(n, code), w));
    worst = std::min(worst, p);
  }
  CHECK(worst >= interp::pivot_tolerance);
}

TEST_CASE("indefinite matrices are refused") {
  Eigen::MatrixXd W(2, 2);
  W << 1.0, 1.5, 1.5, 1.0;
  CHECK_THROWS_AS(interp::covariance_from_matrix(W), Error);
}

TEST_CASE("Gaussian moments") {
  const double w[] = {0.6, 0.25};
  const auto t = trees::make_tree(3, {{0, 1}, {1, 2}});
  const auto c = interp::build_covariance(t, w);
  SECTION("normalization") {
    const auto e = interp::gaussian_expectation(c, [](std::span<const double>) { return cplx(1.0); }, tensor(6));
    CHECK_THAT(e.value.real(), WithinAbs(1.0, 1e-13));
  }
  SECTION("second moments") {
    for (int u = 0; u < 3; ++u)
      for (int v = 0; v < 3; ++v) {
        const auto e = interp::gaussian_expectation(c, [&](std::span<const double> s) { return cplx(s[u] * s[v]); }, tensor(6));
        CHECK_THAT(e.value.real(), WithinAbs(c.W(u, v), 1e-10));
      }
  }
  SECTION("fourth moment on the identity") {
    const auto id = interp::covariance_from_matrix(Eigen::MatrixXd::Identity(2, 2));
    const auto e = interp::gaussian_expectation(id, [](std::span<const double> s) { return cplx(std::pow(s[0], 4)); }, tensor(8));
    CHECK_THAT(e.value.real(), WithinAbs(3.0, 1e-12));
  }
}

TEST_CASE("randomized modes agree with the tensor rule within their error") {
  const double w[] = {0.5};
  const auto c = interp::build_covariance(trees::make_tree(2, {{0, 1}}), w);
  const interp::Integrand f = [](std::span<const double> s) { return std::exp(cplx(0.0, 0.7) * (s[0] - 0.3 * s[1])); };
  const auto ref = interp::gaussian_expectation(c, f, tensor(30));
  for (auto mode : {interp::QuadMode::QuasiMonteCarlo, interp::QuadMode::MonteCarlo}) {
    interp::QuadratureSpec q;
    q.mode = mode;
    q.nodes = 1 << 12;
    q.replicas = 16;
    const auto e = interp::gaussian_expectation(c, f, q);
    CHECK(e.error > 0.0);
    CHECK(std::abs(e.value - ref.value) <= 4.0 * e.error);
  }
}

TEST_CASE("sites multiply the field dimension") {
  const auto c = interp::covariance_from_matrix(Eigen::MatrixXd::Ones(2, 2));
  // vertex-major layout: sigma = (s_{0,x0}, s_{0,x1}, s_{1,x0}, s_{1,x1})
  const auto e = interp::gaussian_expectation(
      c, [](std::span<const double> s) { return cplx((s[0] - s[2]) * (s[0] - s[2]) + s[1] * s[3]); }, tensor(4), 2);
  CHECK_THAT(e.value.real(), WithinAbs(1.0, 1e-12));
}

TEST_CASE("replica identity") {
  SECTION("product of fields") {
    const auto r = interp::replica_identity_check(
        [](std::span<const double> s) {
          cplx p(1.0);
          for (double x : s) p *= x;
          return p;
        },
        2, tensor(8));
    CHECK_THAT(r.single.value.real(), WithinAbs(1.0, 1e-12));
    CHECK_THAT(r.replicated.value.real(), WithinAbs(1.0, 1e-12));
    CHECK(r.pass);
  }
  SECTION("characteristic function") {
    const auto r = interp::replica_identity_check(
        [](std::span<const double> s) {
          double t = 0.0;
          for (double x : s) t += x;
          return std::exp(cplx(0.0, t));
        },
        3, tensor(40));
    CHECK_THAT(r.single.value.real(), WithinAbs(std::exp(-4.5), 1e-10));
    CHECK_THAT(r.replicated.value.real(), WithinAbs(std::exp(-4.5), 1e-10));
    CHECK(r.pass);
  }
  SECTION("loop-vertex product at lambda = 0.05") {
    const cplx g = std::sqrt(8.0 * 0.05);
    const auto r = interp::replica_identity_check(
        [&](std::span<const double> s) {
          cplx p(1.0);
          for (double x : s) p *= loop::loop_vertex_0d(x, g);
          return p;
        },
        3, tensor(40));
    CHECK(r.deviation < 1e-6);
    CHECK(r.pass);
  }
  SECTION("all families, n = 2..4") {
    for (const auto& fam : interp::replica_families())
      for (int n : {2, 3, 4}) {
        const auto r = interp::replica_identity_check(interp::replica_family(fam, std::sqrt(8.0 * 0.02)), n, tensor(32));
        INFO(fam << " n=" << n << " deviation " << r.deviation << " error " << r.combined_error);
        CHECK(r.pass);
      }
  }
}
