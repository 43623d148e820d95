#pragma once

// Register-blocked dense kernels shared by matmul and conv2d. Every output
// element is summed over k in ascending order no matter how rows are
// grouped, so a row's result never depends on the other rows in the batch.

#include <cstddef>
#include <cstring>
#include <vector>

namespace invreg::detail {

using vec4 = double __attribute__((vector_size(32)));

inline vec4 load4(const double* p) {
  vec4 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, vec4 v) { std::memcpy(p, &v, sizeof v); }

// RB rows by 4*JV columns of C, accumulated in registers.
// A is addressed as a[r * ars + k * aks], so one kernel serves A and A^T.
struct StridedA {
  const double* p;
  std::size_t ars, aks;
  double at(std::size_t r, std::size_t k) const { return p[r * ars + k * aks]; }
  StridedA rows_from(std::size_t r) const { return {p + r * ars, ars, aks}; }
};

template <int RB, int JV>
inline void gemm_block(std::size_t k_count, StridedA a, const double* b, std::size_t ldb,
                       double* c, std::size_t ldc, const double* init, bool accumulate) {
  vec4 acc[RB][JV] = {};
  for (std::size_t k = 0; k < k_count; ++k) {
    const double* brow = b + k * ldb;
    vec4 bv[JV];
    for (int j = 0; j < JV; ++j) bv[j] = load4(brow + 4 * j);
    for (int r = 0; r < RB; ++r) {
      const double s = a.at(static_cast<std::size_t>(r), k);
      const vec4 av = {s, s, s, s};
      for (int j = 0; j < JV; ++j) acc[r][j] += av * bv[j];
    }
  }
  for (int r = 0; r < RB; ++r) {
    double* crow = c + r * ldc;
    for (int j = 0; j < JV; ++j) {
      vec4 base = accumulate ? load4(crow + 4 * j) : (init ? load4(init + 4 * j) : vec4{});
      store4(crow + 4 * j, base + acc[r][j]);
    }
  }
}

template <int RB>
inline void gemm_scalar_column(std::size_t k_count, StridedA a, const double* b, std::size_t ldb, double* c,
                               std::size_t ldc, const double* init, bool accumulate) {
  double acc[RB] = {};
  for (std::size_t k = 0; k < k_count; ++k) {
    const double bv = b[k * ldb];
    for (int r = 0; r < RB; ++r) acc[r] += a.at(static_cast<std::size_t>(r), k) * bv;
  }
  for (int r = 0; r < RB; ++r) {
    double& out = c[r * ldc];
    out = accumulate ? out + acc[r] : (init ? *init : 0.0) + acc[r];
  }
}

template <int JV>
inline void gemm_columns(std::size_t m, std::size_t k, StridedA a, const double* b, std::size_t ldb, double* c,
                         std::size_t ldc, const double* init, bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_block<4, JV>(k, a.rows_from(i), b, ldb, c + i * ldc, ldc, init, accumulate);
  for (; i < m; ++i) gemm_block<1, JV>(k, a.rows_from(i), b, ldb, c + i * ldc, ldc, init, accumulate);
}

inline void gemm_strided(std::size_t m, std::size_t k, std::size_t n, StridedA a, const double* b, std::size_t ldb,
                         double* c, std::size_t ldc, const double* init, bool accumulate) {
  auto at = [&](std::size_t j) { return init ? init + j : nullptr; };
  std::size_t j = 0;
  for (; j + 16 <= n; j += 16) gemm_columns<4>(m, k, a, b + j, ldb, c + j, ldc, at(j), accumulate);
  for (; j + 8 <= n; j += 8) gemm_columns<2>(m, k, a, b + j, ldb, c + j, ldc, at(j), accumulate);
  for (; j + 4 <= n; j += 4) gemm_columns<1>(m, k, a, b + j, ldb, c + j, ldc, at(j), accumulate);
  for (; j < n; ++j) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4)
      gemm_scalar_column<4>(k, a.rows_from(i), b + j, ldb, c + i * ldc + j, ldc, at(j), accumulate);
    for (; i < m; ++i) gemm_scalar_column<1>(k, a.rows_from(i), b + j, ldb, c + i * ldc + j, ldc, at(j), accumulate);
  }
}

/// C[m,n] (=|+=) init + A[m,k] B[k,n], all row-major with the given leading dims.
/// `init` (length n, optional) seeds each row when not accumulating.
inline void gemm(std::size_t m, std::size_t k, std::size_t n, const double* a, std::size_t lda, const double* b,
                 std::size_t ldb, double* c, std::size_t ldc, const double* init = nullptr, bool accumulate = false) {
  gemm_strided(m, k, n, {a, lda, 1}, b, ldb, c, ldc, init, accumulate);
}

/// C[m,n] += A^T B where A is stored [k,m] with leading dim lda.
inline void gemm_at_accumulate(std::size_t m, std::size_t k, std::size_t n, const double* a, std::size_t lda,
                               const double* b, std::size_t ldb, double* c, std::size_t ldc) {
  gemm_strided(m, k, n, {a, 1, lda}, b, ldb, c, ldc, nullptr, true);
}

inline std::vector<double> transpose(const double* a, std::size_t rows, std::size_t cols) {
  std::vector<double> t(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
  }
  return t;
}

}  // namespace invreg::detail
