// Pressure of the zero-dimensional model: tree terms, partial sums and the
// direct integral, for a few couplings.

#include <cstdio>
#include <cstdlib>

#include "lve/engine.hpp"
#include "lve/oracle.hpp"

int main(int argc, char** argv) {
  using namespace lve;
  const int n_max = argc > 1 ? std::atoi(argv[1]) : 5;
  for (double l : {0.01, 0.05, 0.2}) {
    const auto m = model::ModelSpec::zero_dim(l);
    const auto s = engine::pressure_series(m, n_max);
    const auto o = oracle::quadrature_logZ_0d(l);
    std::printf("lambda = %g\n", l);
    for (std::size_t n = 0; n < s.terms.size(); ++n)
      std::printf("  n=%zu  term % .10f  (+- %.1e)  partial % .10f\n", n + 1, s.terms[n].value.real(), s.terms[n].error,
                  s.partial_sums[n].real());
    std::printf("  oracle      % .10f  (+- %.1e)\n", o.value.real(), o.error);
    std::printf("  |diff| %.2e, tail estimate %.2e%s\n\n", std::abs(s.total.value - o.value), s.tail_estimate,
                s.flagged ? "  [ratios >= 1: not converging]" : "");
  }
}
