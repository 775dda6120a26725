// Gradient suite against a library whose GELU derivative has its sign
// flipped. Exits nonzero when the suite catches the fault, which is the
// expected outcome.
#include <cinttypes>
#include <cstdio>

#include "fvt/gradient_suite.hpp"

int main() {
  fvt::GradientSuiteOptions opt;
  const fvt::GradientSuiteResult r = fvt::f64::run_gradient_suite(opt);
  std::printf("worst_check=%s\nworst_relative_error=%.3e\n%s\n", r.worst_name.c_str(), r.worst,
              r.passed() ? "PASS" : "FAIL");
  return r.passed() ? 0 : 3;
}
