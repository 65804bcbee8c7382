#pragma once

// Dense double-precision inner loops used by the tensor core.
//
// Every kernel has a scalar reference implementation and, where the CPU
// supports it, an AVX2 variant selected at runtime. SIMD variants only
// vectorize across independent output elements and never reorder a
// reduction, so they reproduce the scalar results bit-for-bit.

#include <cstddef>
#include <string_view>

namespace vqd::kernels {

enum class SimdLevel { kScalar, kAvx2 };

struct KernelTable {
  // c[m x n] = a[m x k] * b[k x n]
  void (*gemm_nn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c);
  // c[m x n] = a[k x m]^T * b[k x n]
  void (*gemm_tn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c);
  // c[m x n] = a[m x k] * b[n x k]^T
  void (*gemm_nt)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c);
  // out = a + b
  void (*add)(std::size_t n, const double* a, const double* b, double* out);
  // out = a * b
  void (*mul)(std::size_t n, const double* a, const double* b, double* out);
  // y += x
  void (*accumulate)(std::size_t n, const double* x, double* y);
  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  // out = alpha * x
  void (*scale)(std::size_t n, double alpha, const double* x, double* out);
  // out[r, :] = x[r, :] + row[:] for r in [0, rows)
  void (*add_row)(std::size_t rows, std::size_t cols, const double* x,
                  const double* row, double* out);
  // out[:] += sum_r x[r, :]
  void (*sum_rows)(std::size_t rows, std::size_t cols, const double* x,
                   double* out);
};

const KernelTable& scalar_table();
// Returns nullptr when the binary was built without AVX2 support.
const KernelTable* avx2_table();

bool supported(SimdLevel level);
const KernelTable& table(SimdLevel level);

// Process-wide dispatch. The initial level is the best one the CPU supports,
// overridable with VQD_SIMD=scalar|avx2.
const KernelTable& active();
SimdLevel active_level();
void set_active_level(SimdLevel level);

std::string_view level_name(SimdLevel level);

}  // namespace vqd::kernels
