#include "vqd/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace vqd {

double relative_error(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-3});
  return std::abs(analytic - numeric) / denom;
}

FiniteDifferenceReport check_gradients(const std::function<Tensor()>& loss_fn,
                                       std::vector<Tensor> inputs,
                                       double step) {
  for (auto& t : inputs) t.zero_grad();
  backward(loss_fn());
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& t : inputs) analytic.push_back(t.grad());

  FiniteDifferenceReport report;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss_fn().item();
      values[i] = saved - step;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      report.max_rel_error = std::max(report.max_rel_error,
                                      relative_error(analytic[k][i], numeric));
      ++report.entries;
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return report;
}

}  // namespace vqd
