#pragma once

#include <functional>
#include <vector>

#include "vqd/tensor.hpp"

namespace vqd {

// Entry-wise relative error |a - n| / max(|a|, |n|, 1e-3). The floor makes
// near-zero entries compare absolutely.
double relative_error(double analytic, double numeric);

struct FiniteDifferenceReport {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
};

// Compares backward() gradients of `loss_fn` with central differences over
// every entry of `inputs` (leaves with requires_grad). `loss_fn` must rebuild
// the graph from the inputs' current values on each call.
FiniteDifferenceReport check_gradients(const std::function<Tensor()>& loss_fn,
                                       std::vector<Tensor> inputs,
                                       double step = 1e-6);

}  // namespace vqd
