#include "vqd/kernels.hpp"

#include <immintrin.h>

#include <vector>

// Compiled with -mavx2 -mno-fma. All loops vectorize over output columns j
// and keep the scalar accumulation order over the reduction index.

namespace vqd::kernels {
namespace {

// c_row[0, n) = sum_p coef(p) * b_row(p)[0, n), accumulated in p order.
template <typename Coef, typename Row>
inline void row_combination(std::size_t k, std::size_t n, Coef coef, Row row,
                            double* c_row) {
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    __m256d acc2 = _mm256_setzero_pd();
    __m256d acc3 = _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d s = _mm256_set1_pd(coef(p));
      const double* bp = row(p) + j;
      acc0 = _mm256_add_pd(acc0, _mm256_mul_pd(s, _mm256_loadu_pd(bp)));
      acc1 = _mm256_add_pd(acc1, _mm256_mul_pd(s, _mm256_loadu_pd(bp + 4)));
      acc2 = _mm256_add_pd(acc2, _mm256_mul_pd(s, _mm256_loadu_pd(bp + 8)));
      acc3 = _mm256_add_pd(acc3, _mm256_mul_pd(s, _mm256_loadu_pd(bp + 12)));
    }
    _mm256_storeu_pd(c_row + j, acc0);
    _mm256_storeu_pd(c_row + j + 4, acc1);
    _mm256_storeu_pd(c_row + j + 8, acc2);
    _mm256_storeu_pd(c_row + j + 12, acc3);
  }
  for (; j + 4 <= n; j += 4) {
    __m256d acc = _mm256_setzero_pd();
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d s = _mm256_set1_pd(coef(p));
      acc = _mm256_add_pd(acc, _mm256_mul_pd(s, _mm256_loadu_pd(row(p) + j)));
    }
    _mm256_storeu_pd(c_row + j, acc);
  }
  for (; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) acc += coef(p) * row(p)[j];
    c_row[j] = acc;
  }
}

void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    row_combination(
        k, n, [ai](std::size_t p) { return ai[p]; },
        [b, n](std::size_t p) { return b + p * n; }, c + i * n);
  }
}

void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    row_combination(
        k, n, [a, m, i](std::size_t p) { return a[p * m + i]; },
        [b, n](std::size_t p) { return b + p * n; }, c + i * n);
  }
}

void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
             const double* b, double* c) {
  // Transposing b turns the dot products into row combinations with the
  // same per-element summation order.
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, k, n, a, bt.data(), c);
}

void add(std::size_t n, const double* a, const double* b, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void mul(std::size_t n, const double* a, const double* b, double* out) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i),
                                            _mm256_loadu_pd(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void accumulate(std::size_t n, const double* x, double* y) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i),
                                          _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) y[i] += x[i];
}

void axpy(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d s = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(
        y + i, _mm256_add_pd(_mm256_loadu_pd(y + i),
                             _mm256_mul_pd(s, _mm256_loadu_pd(x + i))));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale(std::size_t n, double alpha, const double* x, double* out) {
  const __m256d s = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(out + i, _mm256_mul_pd(s, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void add_row(std::size_t rows, std::size_t cols, const double* x,
             const double* row, double* out) {
  for (std::size_t r = 0; r < rows; ++r) add(cols, x + r * cols, row, out + r * cols);
}

void sum_rows(std::size_t rows, std::size_t cols, const double* x,
              double* out) {
  for (std::size_t r = 0; r < rows; ++r) accumulate(cols, x + r * cols, out);
}

constexpr KernelTable kAvx2{gemm_nn, gemm_tn,    gemm_nt, add,
                            mul,     accumulate, axpy,    scale,
                            add_row, sum_rows};

}  // namespace

const KernelTable* avx2_table() { return &kAvx2; }

}  // namespace vqd::kernels
