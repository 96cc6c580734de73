#pragma once

#include <complex>
#include <stdexcept>
#include <string>

namespace lve {

using cplx = std::complex<double>;

/// Raised when an operation's precondition or numerical contract fails.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value together with an estimated absolute error.
struct Estimate {
  cplx value{};
  double error = 0.0;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw Error(message);
}

inline double factorial(int k) {
  double f = 1.0;
  for (int i = 2; i <= k; ++i) f *= i;
  return f;
}

/// Neumaier-compensated accumulator for complex sums.
class CompensatedSum {
 public:
  void add(cplx x) {
    add_part(sum_re_, comp_re_, x.real());
    add_part(sum_im_, comp_im_, x.imag());
  }
  cplx value() const { return {sum_re_ + comp_re_, sum_im_ + comp_im_}; }

 private:
  static void add_part(double& sum, double& comp, double x) {
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x))
      comp += (sum - t) + x;
    else
      comp += (x - t) + sum;
    sum = t;
  }
  double sum_re_ = 0.0, comp_re_ = 0.0;
  double sum_im_ = 0.0, comp_im_ = 0.0;
};

}  // namespace lve
