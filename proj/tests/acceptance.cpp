// End-to-end acceptance run: one PASS/FAIL line per criterion, details below it.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "lve/engine.hpp"
#include "lve/interp.hpp"
#include "lve/loopvertex.hpp"
#include "lve/oracle.hpp"

using namespace lve;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << "    failed: " << what << "\n";
    }
  }
};

int failures = 0;

void criterion(int id, const std::string& title, const std::function<void(Outcome&)>& body) {
  Outcome o;
  o.detail.precision(6);
  const auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << "    exception: " << e.what() << "\n";
  }
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << title << " (" << seconds_since(t0) << " s)\n"
            << o.detail.str() << std::flush;
}

model::SliceSpec chain(int sites, int j, double spacing) {
  model::SliceSpec s;
  s.sites = sites;
  s.j = j;
  s.spacing = spacing;
  return s;
}

// stdout of the command line tool, or an empty string plus status on failure
std::pair<int, std::string> run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + std::string(LVE_CLI_PATH) + " " + args + " 2>/dev/null";
  std::string out;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) throw std::runtime_error("popen failed");
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) out.append(buf, n);
  const int st = pclose(p);
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

std::vector<double> zero_dim_ratios_c3;

}  // namespace

int main() {
  std::cout.precision(6);

  criterion(1, "zero-dim pressure matches the oracle for n_max = 7", [](Outcome& o) {
    for (double l : {0.01, 0.02, 0.05}) {
      const auto t0 = Clock::now();
      const auto s = engine::pressure_series(model::ModelSpec::zero_dim(l), 7);
      const double dt = seconds_since(t0);
      const auto orc = oracle::quadrature_logZ_0d(l);
      const double diff = std::abs(s.total.value - orc.value);
      const double tol = std::max(1e-6, s.tail_estimate + orc.error);
      o.detail << "    lambda " << l << ": LVE " << s.total.value.real() << " oracle " << orc.value.real() << " |diff| " << diff
               << " tol " << tol << " (integration error " << s.total.error << ") " << dt << " s\n";
      o.require(diff <= tol, "agreement at lambda " + std::to_string(l));
      o.require(dt < 60.0, "runtime at lambda " + std::to_string(l));
      if (l == 0.05) zero_dim_ratios_c3 = s.ratios;
    }
  });

  criterion(2, "Taylor coefficients and the order-lambda split", [](Outcome& o) {
    const auto t = engine::taylor_coefficients(model::ModelSpec::zero_dim(0.0), 2, engine::EngineOptions::zero_dim_taylor());
    const double a1 = t.coeffs[0].value.real(), a2 = t.coeffs[1].value.real();
    o.detail << "    a1 " << a1 << " +- " << t.coeffs[0].error << ", a2 " << a2 << " +- " << t.coeffs[1].error << "\n";
    o.require(std::abs(a1 + 3.0) <= 1e-4, "a1 = -3 +- 1e-4");
    o.require(std::abs(a2 - 48.0) <= 0.1, "a2 = 48 +- 0.1");
    // order-lambda part of each term by one Richardson step, 4 t(l/2) - t(l)
    const double l = 1e-3;
    const auto one = trees::make_tree(1, {}), two = trees::make_tree(2, {{0, 1}});
    auto term = [&](const trees::LabeledTree& tr, double lam) {
      return engine::tree_term(model::ModelSpec::zero_dim(lam), tr).value.real() / factorial(tr.n);
    };
    const double t1 = term(one, l), t2 = term(two, l);
    const double o1 = 4 * term(one, l / 2) - t1, o2 = 4 * term(two, l / 2) - t2;
    o.detail << "    raw terms at 1e-3: n=1 " << t1 << " (" << 100 * std::abs(t1 / (-2 * l) - 1) << "% off -2 lambda), n=2/2! " << t2 << " ("
             << 100 * std::abs(t2 / (-l) - 1) << "% off -lambda)\n";
    o.detail << "    order-lambda parts: n=1 " << o1 << " (" << 100 * std::abs(o1 / (-2 * l) - 1) << "%), n=2/2! " << o2 << " ("
             << 100 * std::abs(o2 / (-l) - 1) << "%)\n";
    o.require(std::abs(o1 / (-2 * l) - 1) <= 5e-3, "n=1 order-lambda part within 0.5% of -2 lambda");
    o.require(std::abs(o2 / (-l) - 1) <= 5e-3, "n=2 order-lambda part within 0.5% of -lambda");
  });

  criterion(3, "term ratios below 1 for n = 2..6 at lambda = 0.05", [](Outcome& o) {
    o.require(zero_dim_ratios_c3.size() >= 6, "series from criterion 1 available");
    for (int n = 2; n <= 6 && static_cast<std::size_t>(n) <= zero_dim_ratios_c3.size(); ++n) {
      const double q = zero_dim_ratios_c3[n - 1];
      o.detail << "    |t" << n + 1 << "/t" << n << "| = " << q << "\n";
      o.require(q < 1.0, "ratio at n = " + std::to_string(n));
    }
  });

  criterion(4, "tree enumeration: Cayley counts and degree histogram", [](Outcome& o) {
    for (int n = 2; n <= 8; ++n) {
      std::uint64_t count = 0;
      std::map<std::vector<int>, std::uint64_t> hist;
      trees::for_each_tree(n, [&](const trees::LabeledTree& t) {
        ++count;
        if (n <= 7) ++hist[t.degrees()];
      });
      std::uint64_t expected = 1;
      for (int i = 0; i < n - 2; ++i) expected *= n;
      bool hist_ok = true;
      for (const auto& [k, c] : hist) hist_ok = hist_ok && trees::count_trees_with_degrees(n, k) == c;
      o.detail << "    n " << n << ": " << count << " trees (n^(n-2) = " << expected << ")" << (n <= 7 ? (hist_ok ? ", histogram exact" : ", histogram WRONG") : "")
               << "\n";
      o.require(count == expected, "count at n = " + std::to_string(n));
      o.require(hist_ok, "histogram at n = " + std::to_string(n));
    }
  });

  criterion(5, "10^5 random (tree, w) draws are PSD", [](Outcome& o) {
    const quad::CounterRng rng(20240917, 0xC0F);
    double worst = INFINITY;
    int bad = 0;
    std::vector<double> w;
    for (std::uint64_t i = 0; i < 100000; ++i) {
      const std::uint64_t base = i * 64;
      const int n = 2 + static_cast<int>(rng.uniform(base) * 7);
      trees::PruferCode code(n - 2);
      for (int c = 0; c < n - 2; ++c) code[c] = std::min(n - 1, static_cast<int>(rng.uniform(base + 1 + c) * n));
      w.resize(n - 1);
      for (int e = 0; e < n - 1; ++e) w[e] = rng.uniform(base + 32 + e);
      const double p = interp::min_ldlt_pivot(interp::covariance_matrix(trees::prufer_decode(n, code), w));
      worst = std::min(worst, p);
      bad += p < interp::pivot_tolerance;
    }
    o.detail << "    min pivot " << worst << ", failures " << bad << "\n";
    o.require(bad == 0, "pivot >= -1e-12 on every draw");
  });

  criterion(6, "replica identity, three integrand families, n = 2, 3, 4", [](Outcome& o) {
    const cplx g = model::CouplingMap::of(model::ModelSpec::zero_dim(0.05)).g;
    interp::QuadratureSpec q;
    q.nodes = 32;
    for (const auto& fam : interp::replica_families())
      for (int n : {2, 3, 4}) {
        const auto r = interp::replica_identity_check(interp::replica_family(fam, g), n, q);
        o.detail << "    " << fam << " n=" << n << ": deviation " << r.deviation << " <= " << r.combined_error << "\n";
        o.require(r.pass, fam + " n=" + std::to_string(n));
      }
  });

  criterion(7, "complex coupling, Borel remainders, slice uniformity", [](Outcome& o) {
    const double pi = std::numbers::pi;
    for (double th : {-pi / 3, -pi / 6, pi / 6, pi / 3}) {
      const cplx l = 0.03 * std::polar(1.0, th);
      const auto s = engine::pressure_series(model::ModelSpec::zero_dim(l), 7);
      const auto orc = oracle::quadrature_logZ_0d(l);
      const double diff = std::abs(s.total.value - orc.value);
      const double tol = std::max(1e-6, s.tail_estimate + s.total.error + orc.error);
      const double q = s.max_ratio(2);
      o.detail << "    theta " << th << ": max ratio (n>=2) " << q << ", |diff| " << diff << " tol " << tol << "\n";
      o.require(q < 1.0, "ratios at theta " + std::to_string(th));
      o.require(diff <= tol, "oracle agreement at theta " + std::to_string(th));
    }
    {
      const std::vector<cplx> probes{0.01, 0.02};
      engine::BorelOptions b;
      b.r_max = 6;
      b.n_max = 7;
      const auto d = engine::borel_remainder_check(model::ModelSpec::zero_dim(0.0), probes, b, engine::EngineOptions::zero_dim(),
                                                   engine::EngineOptions::zero_dim_taylor());
      o.detail << "    zero-dim Borel: rho " << d.rho << ", A " << d.A << ", fit residual " << d.fit_residual << "\n";
      o.require(std::isfinite(d.rho) && d.rho > 0.0 && d.envelope_holds, "finite zero-dim rho");
    }
    {
      const auto m = model::ModelSpec::lattice(chain(4, 0, 1.0), 0.0);
      const std::vector<cplx> probes{0.01, 0.02};
      const int js[] = {0, 1, 2};
      engine::BorelOptions b;
      b.r_max = 4;
      b.n_max = 5;
      const auto u = engine::borel_uniformity(m, js, probes, b, engine::EngineOptions::lattice(), engine::EngineOptions::lattice());
      for (const auto& s : u.slices) o.detail << "    lattice j " << s.j << ": rho " << s.diagnostics.rho << "\n";
      o.detail << "    rho spread " << u.rho_spread << "\n";
      for (const auto& s : u.slices) o.require(std::isfinite(s.diagnostics.rho) && s.diagnostics.rho > 0.0, "finite lattice rho");
      o.require(u.rho_spread < 2.0, "rho spread < 2");
    }
  });

  criterion(8, "propagator norm, decay bound and loop bound are j-uniform", [](Outcome& o) {
    double nlo = INFINITY, nhi = 0, slo = INFINITY, shi = 0;
    bool failed = false;
    for (int j = 0; j <= 4; ++j) {
      const auto s = chain(16, j, 0.5);
      const double nm = model::operator_norm(s).norm * std::pow(s.M, 2.0 * j);
      const auto b = model::verify_propagator_bound(s, 0.25);
      nlo = std::min(nlo, nm), nhi = std::max(nhi, nm);
      slo = std::min(slo, b.sup_ratio), shi = std::max(shi, b.sup_ratio);
      failed = failed || b.failed;
      o.detail << "    j " << j << ": norm M^2j " << nm << ", sup ratio (c = 0.25) " << b.sup_ratio << "\n";
    }
    o.require(nhi / nlo <= 2.0, "norm spread within 2x");
    o.require(!failed && shi / slo <= 2.0, "bound sup spread within 2x");
    for (int k = 1; k <= 4; ++k) {
      double lo = INFINITY, hi = 0, growth = 0, change = 1;
      for (int j = 0; j <= 4; ++j) {
        const auto lv = loop::LatticeVertex::of(model::ModelSpec::lattice(chain(16, j, 0.5), 0.02));
        const double a = loop::resolvent_loop_bound_check(lv, k, 64, 20240917, 1.0).worst_ratio;
        const double b = loop::resolvent_loop_bound_check(lv, k, 64, 20240917, 10.0).worst_ratio;
        lo = std::min(lo, a), hi = std::max(hi, a);
        growth = std::max(growth, b / a);
        change = std::max(change, std::max(a / b, b / a));
      }
      o.detail << "    loop k " << k << ": j spread " << hi / lo << ", growth under sigma -> 10 sigma " << growth << " (two-sided change " << change
               << ")\n";
      o.require(hi / lo <= 2.0, "loop bound j spread at k = " + std::to_string(k));
      o.require(growth <= 2.0, "loop bound growth at k = " + std::to_string(k));
    }
  });

  criterion(9, "16-site two-point function against Monte Carlo, decay fit", [](Outcome& o) {
    const auto t0 = Clock::now();
    const auto s = chain(16, 2, 0.5);
    const auto m = model::ModelSpec::lattice(s, 0.02);
    const auto tp = engine::two_point_function(m, 3, engine::EngineOptions::lattice());
    const double t_lve = seconds_since(t0);
    const auto orc = oracle::connected_2pt_profile(s, 0.02, std::size_t{1} << 23, 11);
    const double total = seconds_since(t0);
    for (int k : {0, 2, 4, 6, 8}) {
      const double dev = std::abs(tp.values[k].value - orc.values[k].value);
      const double comb = tp.values[k].error + orc.values[k].error + tp.tail_estimate;
      o.detail << "    offset " << k << ": LVE " << tp.values[k].value.real() << " oracle " << orc.values[k].value.real() << " |diff| " << dev
               << " <= " << comb << "\n";
      o.require(dev <= comb, "agreement at offset " + std::to_string(k));
    }
    const auto f = engine::decay_rate_fit(tp);
    o.detail << "    c_hat " << f.c_hat << ", residual " << 100 * f.residual << "% of range, LVE " << t_lve << " s, total " << total << " s\n";
    o.require(f.c_hat > 0.0, "c_hat > 0");
    o.require(f.residual < 0.1, "fit residual < 10% of range");
    o.require(total < 600.0, "runtime < 10 min");
  });

  criterion(10, "byte-identical output across runs and thread counts", [](Outcome& o) {
    const std::vector<std::string> cmds{"pressure --lambda 0.03 --nmax 5", "two-point --sites 8 --nmax 2 --oracle-samples 65536",
                                        "borel --r-max 3 --nmax 5", "verify covariance --draws 2000"};
    for (const auto& c : cmds) {
      const auto a = run_cli(c + " --threads 1");
      const auto b = run_cli(c + " --threads 4");
      const auto e = run_cli(c, "LVE_THREADS=3");
      const auto again = run_cli(c + " --threads 1");
      const bool same = !a.second.empty() && a.second == b.second && a.second == e.second && a.second == again.second;
      o.detail << "    " << c << ": exit " << a.first << ", " << a.second.size() << " bytes, " << (same ? "identical" : "DIFFERENT") << "\n";
      o.require(a.first == 0, "exit status for " + c);
      o.require(same, "identical output for " + c);
    }
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << "\n";
  return failures == 0 ? 0 : 1;
}
