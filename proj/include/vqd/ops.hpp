#pragma once

// Differentiable operations on vqd::Tensor. Matrices are row-major; rank-1
// tensors act as a single row. All ops validate shapes and throw
// DimensionError naming the offending shapes.

#include <cstdint>
#include <span>
#include <vector>

#include "vqd/tensor.hpp"

namespace vqd {

// Row-major boolean matrix view; nonzero = allowed.
struct MaskView {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::span<const std::uint8_t> allow;

  bool allowed(std::size_t r, std::size_t c) const {
    return allow[r * cols + c] != 0;
  }
};

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x * w + b, with b broadcast over rows
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sin(const Tensor& x);
// Gradient is zero where the input lies outside [lo, hi].
Tensor clamp(const Tensor& x, double lo, double hi);

// Row softmax; when a mask is given disallowed entries are exactly 0 and the
// max subtraction runs over allowed entries only.
Tensor softmax_rows(const Tensor& x, const MaskView* mask = nullptr);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// sum_ij x_ij * w_ij; w is treated as a constant.
Tensor weighted_sum(const Tensor& x, const Tensor& weights);

// Mean over elements of 0.5 d^2 (|d| < 1) or |d| - 0.5, d = pred - target.
Tensor smooth_l1(const Tensor& pred, const Tensor& target);
// sum_r w_r * mean_c smooth_l1(pred_rc - target_rc)
Tensor weighted_smooth_l1(const Tensor& pred, const Tensor& target,
                          std::span<const double> row_weights);
// sum_r w_r * sum_c |pred_rc - target_rc|
Tensor weighted_l1(const Tensor& pred, const Tensor& target,
                   std::span<const double> row_weights);

// KL(N(mu, diag(exp(log_var))) || N(0, I)): sum over columns, mean over rows.
Tensor gaussian_kl(const Tensor& mu, const Tensor& log_var);

// Sigmoid focal loss summed over all entries. targets are 0/1 constants.
Tensor sigmoid_focal_loss(const Tensor& logits, const Tensor& targets,
                          double alpha, double gamma);

// sum_r w_r * (1 - GIoU(pred_r, target_r)); rows are (x0, y0, x1, y1).
Tensor giou_loss(const Tensor& pred, const Tensor& target,
                 std::span<const double> row_weights);

// Scaled dot-product attention over `heads` column blocks of q, k, v.
// q: Sq x D, k: Sk x D, v: Sk x D. Returns the concatenated head outputs
// (Sq x D). If probs_out is non-null it receives the head-averaged
// attention probabilities (Sq x Sk, row-major).
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t heads, const MaskView* mask,
                           std::vector<double>* probs_out = nullptr);

}  // namespace vqd
