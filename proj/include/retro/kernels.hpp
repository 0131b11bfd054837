#pragma once

#include <cstddef>
#include <span>

// Dense kernels behind the tensor engine and the retrieval store.
//
// Every kernel exists twice: `serial` is the reference, `parallel` splits the
// outermost output loop across OpenMP threads. Each output element is produced
// by exactly one thread with the same summation order as the serial version,
// so the two agree bit for bit at any thread count.
//
// All matrices are row-major. Matmul kernels accumulate into `c`.

namespace retro::kernels {

namespace serial {

/// c[m,n] += a[m,k] * b[k,n]
template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);

/// c[k,n] += a[m,k]^T * b[m,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);

/// c[m,n] += a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);

/// out[r] = ||query - rows[r]||^2 for rows[n,d]
template <typename T>
void sq_distances(std::size_t n, std::size_t d, const T* query, const T* rows, T* out);

}  // namespace serial

namespace parallel {

template <typename T>
void gemm(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a, const T* b, T* c);
template <typename T>
void sq_distances(std::size_t n, std::size_t d, const T* query, const T* rows, T* out);

}  // namespace parallel

/// Squared L2 distance with a fixed 8-lane reduction order.
template <typename T>
T sq_distance(std::size_t d, const T* x, const T* y);

void set_threads(int n);
int max_threads();

}  // namespace retro::kernels
