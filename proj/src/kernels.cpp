#include "retro/kernels.hpp"

#include <omp.h>

#include <vector>

namespace retro::kernels {
namespace {

constexpr std::size_t kParallelWork = std::size_t{1} << 15;

template <typename T>
inline void gemm_row(std::size_t i, std::size_t k, std::size_t n, const T* a,
                     const T* b, T* c) {
  T* crow = c + i * n;
  const T* arow = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const T av = arow[p];
    const T* brow = b + p * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

// Row `r` of c[k,n] += at[k,m] * b[m,n] where `at` is a transposed.
template <typename T>
inline void gemm_tn_row(std::size_t r, std::size_t m, std::size_t n, const T* at,
                        const T* b, T* c) {
  T* crow = c + r * n;
  const T* arow = at + r * m;
  for (std::size_t i = 0; i < m; ++i) {
    const T av = arow[i];
    const T* brow = b + i * n;
    for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
  }
}

template <typename T>
std::vector<T> transpose(std::size_t rows, std::size_t cols, const T* x) {
  std::vector<T> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = x[i * cols + j];
  }
  return t;
}

}  // namespace

template <typename T>
T sq_distance(std::size_t d, const T* x, const T* y) {
  T acc[8] = {};
  std::size_t j = 0;
  for (; j + 8 <= d; j += 8) {
    for (std::size_t l = 0; l < 8; ++l) {
      const T diff = x[j + l] - y[j + l];
      acc[l] += diff * diff;
    }
  }
  for (std::size_t l = 0; j < d; ++j, ++l) {
    const T diff = x[j] - y[j];
    acc[l] += diff * diff;
  }
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

namespace serial {

template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) gemm_row(i, k, n, a, b, c);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto at = transpose(m, k, a);
  for (std::size_t r = 0; r < k; ++r) gemm_tn_row(r, m, n, at.data(), b, c);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto bt = transpose(n, k, b);
  gemm(m, k, n, a, bt.data(), c);
}

template <typename T>
void sq_distances(std::size_t n, std::size_t d, const T* query, const T* rows, T* out) {
  for (std::size_t r = 0; r < n; ++r) out[r] = sq_distance(d, query, rows + r * d);
}

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    gemm_row(static_cast<std::size_t>(i), k, n, a, b, c);
  }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto at = transpose(m, k, a);
  const auto rows = static_cast<std::ptrdiff_t>(k);
#pragma omp parallel for schedule(static) if (m * k * n >= kParallelWork)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    gemm_tn_row(static_cast<std::size_t>(r), m, n, at.data(), b, c);
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c) {
  const auto bt = transpose(n, k, b);
  gemm(m, k, n, a, bt.data(), c);
}

template <typename T>
void sq_distances(std::size_t n, std::size_t d, const T* query, const T* rows, T* out) {
  const auto count = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (n * d >= kParallelWork)
  for (std::ptrdiff_t r = 0; r < count; ++r) {
    out[r] = sq_distance(d, query, rows + static_cast<std::size_t>(r) * d);
  }
}

}  // namespace parallel

void set_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

int max_threads() { return omp_get_max_threads(); }

#define RETRO_INSTANTIATE(T)                                                              \
  template T sq_distance<T>(std::size_t, const T*, const T*);                             \
  template void serial::gemm<T>(std::size_t, std::size_t, std::size_t, const T*,          \
                                const T*, T*);                                            \
  template void serial::gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*,       \
                                   const T*, T*);                                         \
  template void serial::gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*,       \
                                   const T*, T*);                                         \
  template void serial::sq_distances<T>(std::size_t, std::size_t, const T*, const T*,     \
                                        T*);                                              \
  template void parallel::gemm<T>(std::size_t, std::size_t, std::size_t, const T*,        \
                                  const T*, T*);                                          \
  template void parallel::gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*,     \
                                     const T*, T*);                                       \
  template void parallel::gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*,     \
                                     const T*, T*);                                       \
  template void parallel::sq_distances<T>(std::size_t, std::size_t, const T*, const T*,   \
                                          T*);

RETRO_INSTANTIATE(float)
RETRO_INSTANTIATE(double)
#undef RETRO_INSTANTIATE

}  // namespace retro::kernels
