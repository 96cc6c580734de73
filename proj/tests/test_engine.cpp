#include <catch2/catch_amalgamated.hpp>

#include <numbers>

#include "lve/engine.hpp"
#include "lve/oracle.hpp"

using namespace lve;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

model::SliceSpec chain(int sites, int j, double spacing = 0.5) {
  model::SliceSpec s;
  s.sites = sites;
  s.j = j;
  s.spacing = spacing;
  return s;
}

}  // namespace

TEST_CASE("leading tree terms at small coupling") {
  const double l = 1e-3;
  const auto m = model::ModelSpec::zero_dim(l);
  const auto h = model::ModelSpec::zero_dim(l / 2);
  const auto t1 = engine::tree_term(m, trees::make_tree(1, {}));
  const auto t2 = engine::tree_term(m, trees::make_tree(2, {{0, 1}}));
  // exact n = 1 term: -2 lambda + 24 lambda^2 + O(lambda^3)
  CHECK_THAT(t1.value.real(), WithinAbs(-2 * l + 24 * l * l, 2e-6));
  CHECK(std::abs(t1.value.imag()) < 1e-12);
  // one Richardson step removes lambda^2: n = 1 -> -2 lambda, n = 2 / 2! -> -lambda
  const double o1 = 4 * engine::tree_term(h, trees::make_tree(1, {})).value.real() - t1.value.real();
  const double o2 = 0.5 * (4 * engine::tree_term(h, trees::make_tree(2, {{0, 1}})).value.real() - t2.value.real());
  CHECK_THAT(o1, WithinRel(-2 * l, 5e-3));
  CHECK_THAT(o2, WithinRel(-l, 5e-3));
}

TEST_CASE("zero coupling gives zero") {
  const auto s = engine::pressure_series(model::ModelSpec::zero_dim(0.0), 4);
  CHECK(s.total.value == cplx{});
  CHECK(s.tail_estimate == 0.0);
}

TEST_CASE("tree counting bookkeeping") {
  const auto s = engine::pressure_series(model::ModelSpec::zero_dim(0.02), 4);
  CHECK(s.trees_represented == 1 + 1 + 3 + 16);
  CHECK(s.shapes_evaluated == 1 + 1 + 1 + 2);
  CHECK(s.terms.size() == 4);
}

TEST_CASE("zero-dim pressure matches the oracle") {
  const double l = 0.02;
  const auto s = engine::pressure_series(model::ModelSpec::zero_dim(l), 5);
  const auto o = oracle::quadrature_logZ_0d(l);
  const double tol = std::max(1e-6, s.tail_estimate + s.total.error + o.error);
  INFO("series " << s.total.value << " oracle " << o.value << " tol " << tol);
  CHECK(std::abs(s.total.value - o.value) <= tol);
  for (std::size_t i = 1; i < s.ratios.size(); ++i) CHECK(s.ratios[i] < 1.0);
}

TEST_CASE("complex coupling inside the sector") {
  const cplx l = 0.03 * std::polar(1.0, std::numbers::pi / 3);
  const auto s = engine::pressure_series(model::ModelSpec::zero_dim(l), 5);
  const auto o = oracle::quadrature_logZ_0d(l);
  CHECK(std::abs(s.total.value - o.value) <= std::max(1e-6, s.tail_estimate + s.total.error + o.error));
  CHECK(std::abs(s.total.value.imag()) > 1e-3);
}

TEST_CASE("negative real part is refused") {
  CHECK_THROWS_AS(engine::pressure_series(model::ModelSpec::zero_dim(cplx(-0.01, 0.0)), 3), Error);
}

TEST_CASE("Taylor coefficients reproduce the Wick values") {
  const auto m = model::ModelSpec::zero_dim(0.0);
  const auto t = engine::taylor_coefficients(m, 2, engine::EngineOptions::zero_dim_taylor());
  REQUIRE(t.coeffs.size() == 2);
  CHECK_THAT(t.coeffs[0].value.real(), WithinAbs(-3.0, 1e-4));
  CHECK_THAT(t.coeffs[1].value.real(), WithinAbs(48.0, 0.1));
}

TEST_CASE("Borel remainders") {
  const auto m = model::ModelSpec::zero_dim(0.0);
  const std::vector<cplx> probes{0.01, 0.02};
  engine::BorelOptions b;
  b.r_max = 3;
  b.n_max = 5;
  const auto d = engine::borel_remainder_check(m, probes, b, engine::EngineOptions::zero_dim(), engine::EngineOptions::zero_dim_taylor());
  REQUIRE(d.remainders.size() == 2 * 4);
  // R_0 = R_1 = f, R_2 = f + 3 lambda ~ 48 lambda^2 > 0
  CHECK(d.remainders[0].remainder == d.remainders[1].remainder);
  CHECK(d.remainders[0].remainder.real() < 0.0);
  CHECK(d.remainders[2].remainder.real() > 0.0);
  CHECK(std::isfinite(d.rho));
  CHECK(d.rho > 0.0);
}

TEST_CASE("two-point function at zero coupling is the covariance") {
  const auto s = chain(8, 1);
  const auto r = engine::two_point_function(model::ModelSpec::lattice(s, 0.0), 2, engine::EngineOptions::lattice());
  const auto cov = model::build_lattice_covariance(s);
  for (std::size_t k = 0; k < r.offsets.size(); ++k) CHECK_THAT(r.values[k].value.real(), WithinRel(cov.matrix(0, r.offsets[k][0]), 1e-12));
  CHECK((r.matrix.real() - cov.matrix).norm() < 1e-12);
  CHECK(r.tail_estimate == 0.0);
}

TEST_CASE("decay fit") {
  const auto s = chain(16, 1);
  const auto r = engine::two_point_function(model::ModelSpec::lattice(s, 0.0), 0, engine::EngineOptions::lattice());
  SECTION("one separation is not enough") {
    const int use[] = {3};
    CHECK_THROWS_AS(engine::decay_rate_fit(r, use), Error);
  }
  SECTION("free decay is positive and meets the certified rate") {
    const auto f = engine::decay_rate_fit(r);
    CHECK(f.c_hat > 0.25);
    CHECK(f.points == 9);
  }
}

TEST_CASE("interacting two-point function is stable in lambda") {
  const auto s = chain(8, 1);
  const auto opt = engine::EngineOptions::lattice();
  const auto a = engine::two_point_function(model::ModelSpec::lattice(s, 0.002), 2, opt);
  const auto b = engine::two_point_function(model::ModelSpec::lattice(s, 0.001), 2, opt);
  const auto c0 = engine::two_point_function(model::ModelSpec::lattice(s, 0.0), 0, opt);
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    // interaction lowers the correlation, roughly linearly in lambda
    const double d2 = c0.values[k].value.real() - a.values[k].value.real();
    const double d1 = c0.values[k].value.real() - b.values[k].value.real();
    CHECK(d2 > 0.0);
    CHECK_THAT(d2 / d1, WithinAbs(2.0, 0.2));
  }
  CHECK(a.ratios.front() < 1.0);
}

TEST_CASE("decoupled lattice sites factorize the pressure") {
  auto two = chain(2, 0, 40.0);
  auto one = chain(1, 0, 40.0);  // images at distance 40 are negligible, same cell weight
  const auto opt = engine::EngineOptions::lattice();
  const auto p2 = engine::pressure_series(model::ModelSpec::lattice(two, 0.05), 3, opt);
  const auto p1 = engine::pressure_series(model::ModelSpec::lattice(one, 0.05), 3, opt);
  CHECK(std::abs(p2.total.value - 2.0 * p1.total.value) <= 4.0 * (p2.total.error + 2.0 * p1.total.error) + 1e-12);
}

TEST_CASE("results do not depend on the thread count") {
  auto o1 = engine::EngineOptions::lattice();
  o1.threads = 1;
  auto o3 = o1;
  o3.threads = 3;
  const auto m = model::ModelSpec::lattice(chain(4, 0, 1.0), 0.02);
  const auto a = engine::pressure_series(m, 3, o1);
  const auto b = engine::pressure_series(m, 3, o3);
  for (std::size_t i = 0; i < a.terms.size(); ++i) {
    CHECK(a.terms[i].value == b.terms[i].value);
    CHECK(a.terms[i].error == b.terms[i].error);
  }
  const auto z1 = engine::pressure_series(model::ModelSpec::zero_dim(0.05), 4, [] {
    auto o = engine::EngineOptions::zero_dim();
    o.threads = 1;
    return o;
  }());
  const auto z3 = engine::pressure_series(model::ModelSpec::zero_dim(0.05), 4, [] {
    auto o = engine::EngineOptions::zero_dim();
    o.threads = 3;
    return o;
  }());
  CHECK(z1.total.value == z3.total.value);
}

TEST_CASE("conjugate coupling gives the conjugate pressure") {
  const cplx l = 0.03 * std::polar(1.0, std::numbers::pi / 6);
  const auto a = engine::pressure_series(model::ModelSpec::zero_dim(l), 4);
  const auto b = engine::pressure_series(model::ModelSpec::zero_dim(std::conj(l)), 4);
  CHECK(std::abs(b.total.value - std::conj(a.total.value)) < 1e-12);
}

TEST_CASE("lattice pressure does not depend on the contraction root") {
  const auto m = model::ModelSpec::lattice(chain(4, 0, 1.0), 0.02);
  auto o0 = engine::EngineOptions::lattice();
  auto o1 = o0;
  o1.root = 2;
  const auto a = engine::pressure_series(m, 3, o0);
  const auto b = engine::pressure_series(m, 3, o1);
  CHECK(std::abs(a.total.value - b.total.value) <= 2.0 * (a.total.error + b.total.error));
}

TEST_CASE("fitted decay rate is stable in lambda") {
  const auto s = chain(16, 2, 0.5);
  const auto opt = engine::EngineOptions::lattice();
  const auto a = engine::decay_rate_fit(engine::two_point_function(model::ModelSpec::lattice(s, 0.02), 2, opt));
  const auto b = engine::decay_rate_fit(engine::two_point_function(model::ModelSpec::lattice(s, 0.01), 2, opt));
  INFO("c_hat " << a.c_hat << " vs " << b.c_hat);
  CHECK(std::abs(a.c_hat - b.c_hat) < 0.2 * b.c_hat);
}
