#pragma once

#include <cstddef>
#include <cstring>

namespace lreid::kernels {

namespace detail {

#if 0  // 512-bit lanes measured slower than 256-bit on the target hosts
inline constexpr std::size_t kLanes = 8;
typedef double vec __attribute__((vector_size(64)));
#else
inline constexpr std::size_t kLanes = 4;
typedef double vec __attribute__((vector_size(32)));
#endif
inline constexpr std::size_t kTileRows = 6;
inline constexpr std::size_t kTileCols = 2 * kLanes;

inline vec load(const double* p) {
  vec v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
inline void store(double* p, vec v) { std::memcpy(p, &v, sizeof v); }
inline vec splat(double x) {
  vec v;
  for (std::size_t l = 0; l < kLanes; ++l) v[l] = x;
  return v;
}

// Rows x (2 * kLanes) tile of C held in registers for the whole k loop.
template <std::size_t Rows>
inline void tile(std::size_t n, std::size_t k, const double* a, const double* b, double* c, bool accumulate) {
  vec acc[Rows][2];
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t h = 0; h < 2; ++h) acc[r][h] = accumulate ? load(c + r * n + kLanes * h) : splat(0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const vec b0 = load(b + p * n), b1 = load(b + p * n + kLanes);
    for (std::size_t r = 0; r < Rows; ++r) {
      const vec av = splat(a[r * k + p]);
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
    }
  }
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t h = 0; h < 2; ++h) store(c + r * n + kLanes * h, acc[r][h]);
}

template <std::size_t Rows>
inline void row_panel(std::size_t n, std::size_t k, const double* a, const double* b, double* c, bool accumulate) {
  const std::size_t nt = n - n % kTileCols;
  for (std::size_t j = 0; j < nt; j += kTileCols) tile<Rows>(n, k, a, b + j, c + j, accumulate);
  for (std::size_t r = 0; r < Rows; ++r)
    for (std::size_t j = nt; j < n; ++j) {
      double s = accumulate ? c[r * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[r * k + p] * b[p * n + j];
      c[r * n + j] = s;
    }
}

}  // namespace detail

// C[M x N] (+)= A[M x K] * B[K x N], all row-major.
//
// Every output element is reduced over k in ascending order starting from
// its initial value (0, or C when accumulating); SIMD lanes only span
// distinct output columns, so the result does not depend on vector width.
inline void gemm(std::size_t m, std::size_t n, std::size_t k, const double* __restrict a,
                 const double* __restrict b, double* __restrict c, bool accumulate) {
  using detail::kTileRows;
  std::size_t i = 0;
  for (; i + kTileRows <= m; i += kTileRows) detail::row_panel<kTileRows>(n, k, a + i * k, b, c + i * n, accumulate);
  const double* ar = a + i * k;
  double* cr = c + i * n;
  switch (m - i) {
    case 5: detail::row_panel<5>(n, k, ar, b, cr, accumulate); break;
    case 4: detail::row_panel<4>(n, k, ar, b, cr, accumulate); break;
    case 3: detail::row_panel<3>(n, k, ar, b, cr, accumulate); break;
    case 2: detail::row_panel<2>(n, k, ar, b, cr, accumulate); break;
    case 1: detail::row_panel<1>(n, k, ar, b, cr, accumulate); break;
    default: break;
  }
}

inline void transpose(std::size_t rows, std::size_t cols, const double* __restrict src,
                      double* __restrict dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace lreid::kernels
