#pragma once

// Finite-difference sweep over every differentiable operation plus the
// minimal end-to-end detector.

#include <cstdint>
#include <string>
#include <vector>

namespace vqd {

struct OpCheck {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t entries = 0;

  bool passed() const { return max_rel_error <= tolerance; }
};

struct GradSuiteOptions {
  std::uint64_t seed = 0;
  int trials = 8;
  // Negative control: adds perturb * sum(x^2) of every input to each loss
  // through a constant, so finite differences see a term backward does not.
  double perturb = 0.0;
};

// One entry per operation, in a fixed order.
std::vector<OpCheck> run_gradient_suite(const GradSuiteOptions& options);

}  // namespace vqd
