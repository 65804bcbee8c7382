#include "vqd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "vqd/kernels.hpp"

namespace vqd {
namespace {

using Buffer = std::vector<double>;

const kernels::KernelTable& K() { return kernels::active(); }

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " +
                         shape_string(t.shape()));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
}

void require_row_weights(const Tensor& t, std::span<const double> w,
                         const char* op) {
  if (w.size() != t.rows())
    throw DimensionError(std::string(op) + ": " + std::to_string(w.size()) +
                         " row weights for shape " + shape_string(t.shape()));
}

// Elementwise unary op with derivative computed from (input, output).
template <typename F, typename DF>
Tensor unary(const Tensor& x, F f, DF df) {
  Buffer out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [df](Node& self) {
    Node& in = parent(self, 0);
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += self.grad[i] * df(in.value[i], self.value[i]);
  });
}

double stable_softplus(double x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner extents differ for " +
                         shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Buffer out(m * n);
  K().gemm_nn(m, k, n, a.values().data(), b.values().data(), out.data());
  return Tensor::make_result({m, n}, std::move(out), {a, b},
                             [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      Buffer tmp(m * k);
      K().gemm_nt(m, n, k, self.grad.data(), pb.value.data(), tmp.data());
      K().accumulate(tmp.size(), tmp.data(), pa.grad_buffer().data());
    }
    if (pb.requires_grad) {
      Buffer tmp(k * n);
      K().gemm_tn(k, m, n, pa.value.data(), self.grad.data(), tmp.data());
      K().accumulate(tmp.size(), tmp.data(), pb.grad_buffer().data());
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: inner extents differ for " +
                         shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  Buffer out(m * n);
  K().gemm_nt(m, k, n, a.values().data(), b.values().data(), out.data());
  return Tensor::make_result({m, n}, std::move(out), {a, b},
                             [m, k, n](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      Buffer tmp(m * k);
      K().gemm_nn(m, n, k, self.grad.data(), pb.value.data(), tmp.data());
      K().accumulate(tmp.size(), tmp.data(), pa.grad_buffer().data());
    }
    if (pb.requires_grad) {
      Buffer tmp(n * k);
      K().gemm_tn(n, m, k, self.grad.data(), pa.value.data(), tmp.data());
      K().accumulate(tmp.size(), tmp.data(), pb.grad_buffer().data());
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_matrix(x, "linear");
  require_matrix(w, "linear");
  if (x.cols() != w.rows() || b.size() != w.cols() || b.rank() != 1)
    throw DimensionError("linear: incompatible shapes x" +
                         shape_string(x.shape()) + " W" +
                         shape_string(w.shape()) + " b" +
                         shape_string(b.shape()));
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  Buffer out(m * n);
  K().gemm_nn(m, k, n, x.values().data(), w.values().data(), out.data());
  K().add_row(m, n, out.data(), b.values().data(), out.data());
  return Tensor::make_result({m, n}, std::move(out), {x, w, b},
                             [m, k, n](Node& self) {
    Node& px = parent(self, 0);
    Node& pw = parent(self, 1);
    Node& pb = parent(self, 2);
    if (px.requires_grad) {
      Buffer tmp(m * k);
      K().gemm_nt(m, n, k, self.grad.data(), pw.value.data(), tmp.data());
      K().accumulate(tmp.size(), tmp.data(), px.grad_buffer().data());
    }
    if (pw.requires_grad) {
      Buffer tmp(k * n);
      K().gemm_tn(k, m, n, px.value.data(), self.grad.data(), tmp.data());
      K().accumulate(tmp.size(), tmp.data(), pw.grad_buffer().data());
    }
    if (pb.requires_grad)
      K().sum_rows(m, n, self.grad.data(), pb.grad_buffer().data());
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.size());
  K().add(out.size(), a.values().data(), b.values().data(), out.data());
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      Node& p = parent(self, i);
      if (p.requires_grad)
        K().accumulate(self.grad.size(), self.grad.data(),
                       p.grad_buffer().data());
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.size());
  const auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad)
      K().accumulate(self.grad.size(), self.grad.data(),
                     pa.grad_buffer().data());
    if (pb.requires_grad)
      K().axpy(self.grad.size(), -1.0, self.grad.data(),
               pb.grad_buffer().data());
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.size());
  K().mul(out.size(), a.values().data(), b.values().data(), out.data());
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    Buffer tmp(self.grad.size());
    if (pa.requires_grad) {
      K().mul(tmp.size(), self.grad.data(), pb.value.data(), tmp.data());
      K().accumulate(tmp.size(), tmp.data(), pa.grad_buffer().data());
    }
    if (pb.requires_grad) {
      K().mul(tmp.size(), self.grad.data(), pa.value.data(), tmp.data());
      K().accumulate(tmp.size(), tmp.data(), pb.grad_buffer().data());
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& row) {
  require_matrix(x, "add_row");
  if (row.size() != x.cols())
    throw DimensionError("add_row: row " + shape_string(row.shape()) +
                         " does not match " + shape_string(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  Buffer out(m * n);
  K().add_row(m, n, x.values().data(), row.values().data(), out.data());
  return Tensor::make_result(x.shape(), std::move(out), {x, row},
                             [m, n](Node& self) {
    Node& px = parent(self, 0);
    Node& pr = parent(self, 1);
    if (px.requires_grad)
      K().accumulate(self.grad.size(), self.grad.data(),
                     px.grad_buffer().data());
    if (pr.requires_grad)
      K().sum_rows(m, n, self.grad.data(), pr.grad_buffer().data());
  });
}

Tensor scale(const Tensor& x, double factor) {
  Buffer out(x.size());
  K().scale(out.size(), factor, x.values().data(), out.data());
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [factor](Node& self) {
    K().axpy(self.grad.size(), factor, self.grad.data(),
             parent(self, 0).grad_buffer().data());
  });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary(
      x, [offset](double v) { return v + offset; },
      [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0 ? v : 0.0; },
      [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(x, stable_sigmoid,
               [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(x, stable_softplus,
               [](double v, double) { return stable_sigmoid(v); });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor sin(const Tensor& x) {
  return unary(
      x, [](double v) { return std::sin(v); },
      [](double v, double) { return std::cos(v); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor softmax_rows(const Tensor& x, const MaskView* mask) {
  require_matrix(x, "softmax_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (mask && (mask->rows != r || mask->cols != c))
    throw DimensionError("softmax_rows: mask " + std::to_string(mask->rows) +
                         "x" + std::to_string(mask->cols) + " for input " +
                         shape_string(x.shape()));
  Buffer out(r * c, 0.0);
  const auto xv = x.values();
  for (std::size_t i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < c; ++j) {
      if (mask && !mask->allowed(i, j)) continue;
      mx = std::max(mx, xv[i * c + j]);
      any = true;
    }
    if (!any)
      throw DegenerateMaskError("softmax_rows: row " + std::to_string(i) +
                                " has no allowed column");
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      if (mask && !mask->allowed(i, j)) continue;
      out[i * c + j] = std::exp(xv[i * c + j] - mx);
      total += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= total;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [r, c](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i) {
      const double* y = self.value.data() + i * c;
      const double* gy = self.grad.data() + i * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const std::size_t d = x.cols();
  if (gain.size() != d || bias.size() != d)
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) +
                         " / bias " + shape_string(bias.shape()) +
                         " for input " + shape_string(x.shape()));
  const std::size_t r = x.rows();
  Buffer out(r * d), xhat(r * d), inv_std(r);
  const auto xv = x.values(), gv = gain.values(), bv = bias.values();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (row[j] - mu) * inv_std[i];
      out[i * d + j] = xhat[i * d + j] * gv[j] + bv[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& px = parent(self, 0);
        Node& pg = parent(self, 1);
        Node& pb = parent(self, 2);
        if (pg.requires_grad) {
          auto& gg = pg.grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < d; ++j)
              gg[j] += self.grad[i * d + j] * xhat[i * d + j];
        }
        if (pb.requires_grad)
          K().sum_rows(r, d, self.grad.data(), pb.grad_buffer().data());
        if (px.requires_grad) {
          auto& gx = px.grad_buffer();
          const double n = static_cast<double>(d);
          for (std::size_t i = 0; i < r; ++i) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = self.grad[i * d + j] * pg.value[j];
              sum_g += gh;
              sum_gx += gh * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = self.grad[i * d + j] * pg.value[j];
              gx[i * d + j] += inv_std[i] / n *
                               (n * gh - sum_g - xhat[i * d + j] * sum_gx);
            }
          }
        }
      });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.cols() != c)
      throw DimensionError("concat_rows: column mismatch " +
                           shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    total += p.rows();
  }
  Buffer out;
  out.reserve(total * c);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  return Tensor::make_result(
      {total, c}, std::move(out), {parts.begin(), parts.end()},
      [offsets = std::move(offsets)](Node& self) {
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          Node& p = parent(self, i);
          if (!p.requires_grad) continue;
          K().accumulate(p.value.size(), self.grad.data() + offsets[i],
                         p.grad_buffer().data());
        }
      });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_rows");
  if (begin + count > x.rows())
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " +
                         shape_string(x.shape()));
  const std::size_t c = x.cols();
  Buffer out(x.values().begin() + begin * c,
             x.values().begin() + (begin + count) * c);
  return Tensor::make_result({count, c}, std::move(out), {x},
                             [begin, c](Node& self) {
    K().accumulate(self.grad.size(), self.grad.data(),
                   parent(self, 0).grad_buffer().data() + begin * c);
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  require_matrix(x, "gather_rows");
  const std::size_t c = x.cols();
  Buffer out;
  out.reserve(rows.size() * c);
  for (std::size_t r : rows) {
    if (r >= x.rows())
      throw DimensionError("gather_rows: index " + std::to_string(r) +
                           " out of " + shape_string(x.shape()));
    out.insert(out.end(), x.values().begin() + r * c,
               x.values().begin() + (r + 1) * c);
  }
  return Tensor::make_result(
      {rows.size(), c}, std::move(out), {x},
      [idx = std::vector<std::size_t>(rows.begin(), rows.end()), c](Node& self) {
        auto& g = parent(self, 0).grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
          K().accumulate(c, self.grad.data() + i * c, g.data() + idx[i] * c);
      });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.rows() != r)
      throw DimensionError("concat_cols: row mismatch " +
                           shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    offsets.push_back(total);
    total += p.cols();
  }
  Buffer out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t c = parts[k].cols();
    const auto v = parts[k].values();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(v.data() + i * c, c, out.data() + i * total + offsets[k]);
  }
  return Tensor::make_result(
      {r, total}, std::move(out), {parts.begin(), parts.end()},
      [r, total, offsets = std::move(offsets)](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          Node& p = parent(self, k);
          if (!p.requires_grad) continue;
          const std::size_t c = p.shape[1];
          auto& g = p.grad_buffer();
          for (std::size_t i = 0; i < r; ++i)
            K().accumulate(c, self.grad.data() + i * total + offsets[k],
                           g.data() + i * c);
        }
      });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  require_matrix(x, "slice_cols");
  if (begin + count > x.cols())
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") out of " +
                         shape_string(x.shape()));
  const std::size_t r = x.rows(), c = x.cols();
  Buffer out(r * count);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.values().data() + i * c + begin, count,
                out.data() + i * count);
  return Tensor::make_result({r, count}, std::move(out), {x},
                             [r, c, begin, count](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < r; ++i)
      K().accumulate(count, self.grad.data() + i * count,
                     g.data() + i * c + begin);
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return Tensor::make_result({}, {total}, {x}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw DimensionError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Tensor weighted_sum(const Tensor& x, const Tensor& weights) {
  require_same_shape(x, weights, "weighted_sum");
  const auto xv = x.values();
  const auto wv = weights.values();
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) total += xv[i] * wv[i];
  return Tensor::make_result(
      {}, {total}, {x},
      [w = Buffer(wv.begin(), wv.end())](Node& self) {
        K().axpy(w.size(), self.grad[0], w.data(),
                 parent(self, 0).grad_buffer().data());
      });
}

namespace {

// Shared body for pairwise row-weighted losses of (pred - target).
template <typename F, typename DF>
Tensor rowwise_residual_loss(const Tensor& pred, const Tensor& target,
                             std::span<const double> row_weights,
                             double col_factor, F f, DF df) {
  const std::size_t r = pred.rows(), c = pred.cols();
  const auto pv = pred.values(), tv = target.values();
  Buffer coef(r * c);
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    double row_total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = pv[i * c + j] - tv[i * c + j];
      row_total += f(d);
      coef[i * c + j] = row_weights[i] * col_factor * df(d);
    }
    total += row_weights[i] * col_factor * row_total;
  }
  return Tensor::make_result({}, {total}, {pred, target},
                             [coef = std::move(coef)](Node& self) {
    Node& pp = parent(self, 0);
    Node& pt = parent(self, 1);
    if (pp.requires_grad)
      K().axpy(coef.size(), self.grad[0], coef.data(),
               pp.grad_buffer().data());
    if (pt.requires_grad)
      K().axpy(coef.size(), -self.grad[0], coef.data(),
               pt.grad_buffer().data());
  });
}

double smooth_l1_value(double d) {
  const double a = std::abs(d);
  return a < 1.0 ? 0.5 * d * d : a - 0.5;
}

double smooth_l1_slope(double d) {
  if (std::abs(d) < 1.0) return d;
  return d > 0 ? 1.0 : -1.0;
}

double l1_slope(double d) {
  if (d > 0) return 1.0;
  return d < 0 ? -1.0 : 0.0;
}

}  // namespace

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "smooth_l1");
  if (pred.size() == 0) return Tensor::scalar(0.0);
  // Rows of the flattened view all carry weight 1/rows; the column factor
  // completes the mean over elements.
  const std::size_t r = pred.rows();
  const Buffer w(r, 1.0 / static_cast<double>(r));
  return rowwise_residual_loss(pred, target, w,
                               1.0 / static_cast<double>(pred.cols()),
                               smooth_l1_value, smooth_l1_slope);
}

Tensor weighted_smooth_l1(const Tensor& pred, const Tensor& target,
                          std::span<const double> row_weights) {
  require_same_shape(pred, target, "weighted_smooth_l1");
  require_row_weights(pred, row_weights, "weighted_smooth_l1");
  if (pred.size() == 0) return Tensor::scalar(0.0);
  return rowwise_residual_loss(pred, target, row_weights,
                               1.0 / static_cast<double>(pred.cols()),
                               smooth_l1_value, smooth_l1_slope);
}

Tensor weighted_l1(const Tensor& pred, const Tensor& target,
                   std::span<const double> row_weights) {
  require_same_shape(pred, target, "weighted_l1");
  require_row_weights(pred, row_weights, "weighted_l1");
  if (pred.size() == 0) return Tensor::scalar(0.0);
  return rowwise_residual_loss(
      pred, target, row_weights, 1.0,
      [](double d) { return std::abs(d); }, l1_slope);
}

Tensor gaussian_kl(const Tensor& mu, const Tensor& log_var) {
  require_same_shape(mu, log_var, "gaussian_kl");
  const std::size_t r = mu.rows();
  if (mu.size() == 0) return Tensor::scalar(0.0);
  const auto mv = mu.values(), lv = log_var.values();
  double total = 0.0;
  for (std::size_t i = 0; i < mv.size(); ++i) {
    if (!std::isfinite(mv[i]) || !std::isfinite(lv[i]))
      throw NumericError("gaussian_kl: non-finite input at element " +
                         std::to_string(i));
    total += 0.5 * (std::exp(lv[i]) + mv[i] * mv[i] - 1.0 - lv[i]);
  }
  const double inv_rows = 1.0 / static_cast<double>(r);
  return Tensor::make_result({}, {total * inv_rows}, {mu, log_var},
                             [inv_rows](Node& self) {
    Node& pm = parent(self, 0);
    Node& pl = parent(self, 1);
    const double g = self.grad[0] * inv_rows;
    if (pm.requires_grad) {
      auto& gm = pm.grad_buffer();
      for (std::size_t i = 0; i < gm.size(); ++i) gm[i] += g * pm.value[i];
    }
    if (pl.requires_grad) {
      auto& gl = pl.grad_buffer();
      for (std::size_t i = 0; i < gl.size(); ++i)
        gl[i] += g * 0.5 * (std::exp(pl.value[i]) - 1.0);
    }
  });
}

Tensor sigmoid_focal_loss(const Tensor& logits, const Tensor& targets,
                          double alpha, double gamma) {
  require_same_shape(logits, targets, "sigmoid_focal_loss");
  const auto xv = logits.values(), tv = targets.values();
  Buffer dloss(xv.size());
  double total = 0.0;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double x = xv[i];
    const double t = tv[i];
    const double p = stable_sigmoid(x);
    // ce = -[t log p + (1-t) log(1-p)] in a form stable for large |x|.
    const double ce = stable_softplus(x) - t * x;
    const double pt = p * t + (1.0 - p) * (1.0 - t);
    const double at = alpha * t + (1.0 - alpha) * (1.0 - t);
    const double m = 1.0 - pt;
    const double mod = std::pow(m, gamma);
    total += at * mod * ce;
    // d/dx: dce/dx = p - t; dpt/dx = (2t - 1) p (1 - p).
    const double dpt = (2.0 * t - 1.0) * p * (1.0 - p);
    const double dmod = gamma > 0 ? -gamma * std::pow(m, gamma - 1.0) * dpt : 0.0;
    dloss[i] = at * (dmod * ce + mod * (p - t));
  }
  return Tensor::make_result({}, {total}, {logits},
                             [dloss = std::move(dloss)](Node& self) {
    K().axpy(dloss.size(), self.grad[0], dloss.data(),
             parent(self, 0).grad_buffer().data());
  });
}

Tensor giou_loss(const Tensor& pred, const Tensor& target,
                 std::span<const double> row_weights) {
  require_same_shape(pred, target, "giou_loss");
  if (pred.cols() != 4)
    throw DimensionError("giou_loss: rows must be (x0, y0, x1, y1), got " +
                         shape_string(pred.shape()));
  require_row_weights(pred, row_weights, "giou_loss");
  const std::size_t r = pred.rows();
  const auto pv = pred.values(), tv = target.values();
  Buffer dp(r * 4, 0.0), dt(r * 4, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    const double* a = pv.data() + i * 4;
    const double* b = tv.data() + i * 4;
    const double area_a = (a[2] - a[0]) * (a[3] - a[1]);
    const double area_b = (b[2] - b[0]) * (b[3] - b[1]);
    const double ix0 = std::max(a[0], b[0]), iy0 = std::max(a[1], b[1]);
    const double ix1 = std::min(a[2], b[2]), iy1 = std::min(a[3], b[3]);
    const double iw = std::max(0.0, ix1 - ix0), ih = std::max(0.0, iy1 - iy0);
    const double inter = iw * ih;
    const double uni = area_a + area_b - inter;
    const double hx0 = std::min(a[0], b[0]), hy0 = std::min(a[1], b[1]);
    const double hx1 = std::max(a[2], b[2]), hy1 = std::max(a[3], b[3]);
    const double hull = (hx1 - hx0) * (hy1 - hy0);
    if (uni <= 0.0 || hull <= 0.0) {
      total += row_weights[i];  // degenerate: GIoU taken as 0
      continue;
    }
    const double giou = inter / uni - (hull - uni) / hull;
    total += row_weights[i] * (1.0 - giou);

    // giou = I/U - 1 + U/H; loss = 1 - giou.
    const double dI = -(1.0 / uni);
    const double dU = inter / (uni * uni) - 1.0 / hull;
    const double dH = uni / (hull * hull);
    const double gI = dI - dU;  // U depends on I with coefficient -1
    const double w = row_weights[i];
    // Intersection extents.
    double g_iw = iw > 0.0 ? gI * ih : 0.0;
    double g_ih = ih > 0.0 ? gI * iw : 0.0;
    auto route_max = [](double va, double vb, double g, double* ga, double* gb) {
      if (va >= vb) *ga += g; else *gb += g;
    };
    auto route_min = [](double va, double vb, double g, double* ga, double* gb) {
      if (va <= vb) *ga += g; else *gb += g;
    };
    double* ga = dp.data() + i * 4;
    double* gb = dt.data() + i * 4;
    route_min(a[2], b[2], w * g_iw, ga + 2, gb + 2);
    route_max(a[0], b[0], -w * g_iw, ga + 0, gb + 0);
    route_min(a[3], b[3], w * g_ih, ga + 3, gb + 3);
    route_max(a[1], b[1], -w * g_ih, ga + 1, gb + 1);
    // Areas through U.
    const double ha = a[3] - a[1], wa = a[2] - a[0];
    const double hb = b[3] - b[1], wb = b[2] - b[0];
    ga[2] += w * dU * ha;
    ga[0] -= w * dU * ha;
    ga[3] += w * dU * wa;
    ga[1] -= w * dU * wa;
    gb[2] += w * dU * hb;
    gb[0] -= w * dU * hb;
    gb[3] += w * dU * wb;
    gb[1] -= w * dU * wb;
    // Hull extents.
    const double hw = hx1 - hx0, hh = hy1 - hy0;
    route_max(a[2], b[2], w * dH * hh, ga + 2, gb + 2);
    route_min(a[0], b[0], -w * dH * hh, ga + 0, gb + 0);
    route_max(a[3], b[3], w * dH * hw, ga + 3, gb + 3);
    route_min(a[1], b[1], -w * dH * hw, ga + 1, gb + 1);
  }
  return Tensor::make_result(
      {}, {total}, {pred, target},
      [dp = std::move(dp), dt = std::move(dt)](Node& self) {
        Node& pp = parent(self, 0);
        Node& pt = parent(self, 1);
        if (pp.requires_grad)
          K().axpy(dp.size(), self.grad[0], dp.data(), pp.grad_buffer().data());
        if (pt.requires_grad)
          K().axpy(dt.size(), self.grad[0], dt.data(), pt.grad_buffer().data());
      });
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t heads, const MaskView* mask,
                           std::vector<double>* probs_out) {
  require_matrix(q, "multihead_attention");
  require_matrix(k, "multihead_attention");
  require_matrix(v, "multihead_attention");
  const std::size_t sq = q.rows(), sk = k.rows(), d = q.cols();
  if (k.cols() != d || v.cols() != d || v.rows() != sk)
    throw DimensionError("multihead_attention: q" + shape_string(q.shape()) +
                         " k" + shape_string(k.shape()) + " v" +
                         shape_string(v.shape()));
  if (heads == 0 || d % heads != 0)
    throw DimensionError("multihead_attention: width " + std::to_string(d) +
                         " not divisible by " + std::to_string(heads) +
                         " heads");
  if (mask && (mask->rows != sq || mask->cols != sk))
    throw DimensionError("multihead_attention: mask size " +
                         std::to_string(mask->rows) + "x" +
                         std::to_string(mask->cols) + " for " +
                         std::to_string(sq) + "x" + std::to_string(sk));
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  // Per-head contiguous copies: qh[h] is sq x dh, etc.
  auto split = [heads, dh, d](std::span<const double> src, std::size_t rows) {
    std::vector<Buffer> out(heads, Buffer(rows * dh));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(src.data() + i * d + h * dh, dh, out[h].data() + i * dh);
    return out;
  };
  auto qh = split(q.values(), sq);
  auto kh = split(k.values(), sk);
  auto vh = split(v.values(), sk);

  std::vector<Buffer> probs(heads, Buffer(sq * sk, 0.0));
  Buffer out(sq * d);
  Buffer scores(sq * sk), oh(sq * dh);
  for (std::size_t h = 0; h < heads; ++h) {
    K().gemm_nt(sq, dh, sk, qh[h].data(), kh[h].data(), scores.data());
    Buffer& p = probs[h];
    for (std::size_t i = 0; i < sq; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (std::size_t j = 0; j < sk; ++j) {
        if (mask && !mask->allowed(i, j)) continue;
        mx = std::max(mx, scores[i * sk + j] * inv_sqrt);
        any = true;
      }
      if (!any)
        throw DegenerateMaskError("multihead_attention: row " +
                                  std::to_string(i) + " fully masked");
      double total = 0.0;
      for (std::size_t j = 0; j < sk; ++j) {
        if (mask && !mask->allowed(i, j)) continue;
        p[i * sk + j] = std::exp(scores[i * sk + j] * inv_sqrt - mx);
        total += p[i * sk + j];
      }
      for (std::size_t j = 0; j < sk; ++j) p[i * sk + j] /= total;
    }
    K().gemm_nn(sq, sk, dh, p.data(), vh[h].data(), oh.data());
    for (std::size_t i = 0; i < sq; ++i)
      std::copy_n(oh.data() + i * dh, dh, out.data() + i * d + h * dh);
  }

  if (probs_out) {
    probs_out->assign(sq * sk, 0.0);
    for (std::size_t h = 0; h < heads; ++h)
      K().accumulate(sq * sk, probs[h].data(), probs_out->data());
    K().scale(sq * sk, 1.0 / static_cast<double>(heads), probs_out->data(),
              probs_out->data());
  }

  return Tensor::make_result(
      {sq, d}, std::move(out), {q, k, v},
      [sq, sk, d, dh, heads, inv_sqrt, qh = std::move(qh), kh = std::move(kh),
       vh = std::move(vh), probs = std::move(probs)](Node& self) {
        Node& pq = parent(self, 0);
        Node& pk = parent(self, 1);
        Node& pv = parent(self, 2);
        Buffer go(sq * dh), dp(sq * sk), ds(sq * sk);
        Buffer tmp_q(sq * dh), tmp_kv(sk * dh);
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < sq; ++i)
            std::copy_n(self.grad.data() + i * d + h * dh, dh,
                        go.data() + i * dh);
          const Buffer& p = probs[h];
          if (pv.requires_grad) {
            K().gemm_tn(sk, sq, dh, p.data(), go.data(), tmp_kv.data());
            auto& gv = pv.grad_buffer();
            for (std::size_t j = 0; j < sk; ++j)
              K().accumulate(dh, tmp_kv.data() + j * dh,
                             gv.data() + j * d + h * dh);
          }
          if (!pq.requires_grad && !pk.requires_grad) continue;
          K().gemm_nt(sq, dh, sk, go.data(), vh[h].data(), dp.data());
          for (std::size_t i = 0; i < sq; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < sk; ++j)
              dot += p[i * sk + j] * dp[i * sk + j];
            for (std::size_t j = 0; j < sk; ++j)
              ds[i * sk + j] = p[i * sk + j] * (dp[i * sk + j] - dot) * inv_sqrt;
          }
          if (pq.requires_grad) {
            K().gemm_nn(sq, sk, dh, ds.data(), kh[h].data(), tmp_q.data());
            auto& gq = pq.grad_buffer();
            for (std::size_t i = 0; i < sq; ++i)
              K().accumulate(dh, tmp_q.data() + i * dh,
                             gq.data() + i * d + h * dh);
          }
          if (pk.requires_grad) {
            K().gemm_tn(sk, sq, dh, ds.data(), qh[h].data(), tmp_kv.data());
            auto& gk = pk.grad_buffer();
            for (std::size_t j = 0; j < sk; ++j)
              K().accumulate(dh, tmp_kv.data() + j * dh,
                             gk.data() + j * d + h * dh);
          }
        }
      });
}

}  // namespace vqd
