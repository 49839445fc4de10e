#pragma once

#include <cstdint>
#include <cstring>
#include <vector>

#include "prf/threading.hpp"

namespace prf {

// Row-major GEMM kernels. Parallel partitioning is by fixed-size row chunks,
// reductions accumulate serially in chunk order, so outputs are bitwise
// reproducible for any thread count.

namespace detail {

// Explicit 64-byte vectors: codegen does not depend on the autovectorizer's
// loop-nest choice, which proved fragile for some tile shapes.
template <typename T>
struct VecOf {
  typedef T type __attribute__((vector_size(64)));
  static constexpr int lanes = 64 / sizeof(T);
};

template <typename T>
inline typename VecOf<T>::type vload(const T* p) {
  typename VecOf<T>::type v;
  __builtin_memcpy(&v, p, 64);
  return v;
}

template <typename T>
inline void vstore(T* p, typename VecOf<T>::type v) {
  __builtin_memcpy(p, &v, 64);
}

template <typename T>
inline typename VecOf<T>::type vsplat(T x) {
  return typename VecOf<T>::type{} + x;
}

// C[MR, NR] (+)= A rows times B cols; NR must be a multiple of the lane count.
template <typename T, int MR, int NR>
inline void microKernel(const T* A, const T* B, T* C, int64_t K, int64_t ldb,
                        int64_t lda, int64_t ldc, bool accumulate) {
  using V = typename VecOf<T>::type;
  constexpr int L = VecOf<T>::lanes;
  static_assert(NR % L == 0);
  constexpr int NV = NR / L;
  V acc[MR][NV];
  for (int r = 0; r < MR; ++r)
    for (int v = 0; v < NV; ++v)
      acc[r][v] = accumulate ? vload(C + r * ldc + v * L) : V{};
  for (int64_t k = 0; k < K; ++k) {
    const T* bk = B + k * ldb;
    V bv[NV];
    for (int v = 0; v < NV; ++v) bv[v] = vload(bk + v * L);
    for (int r = 0; r < MR; ++r) {
      V av = vsplat(A[r * lda + k]);
      for (int v = 0; v < NV; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (int r = 0; r < MR; ++r)
    for (int v = 0; v < NV; ++v) vstore(C + r * ldc + v * L, acc[r][v]);
}

template <typename T>
inline void gemmRowRange(const T* A, const T* B, T* C, int64_t i0, int64_t i1,
                         int64_t K, int64_t N, bool accumulate) {
  constexpr int MR = 4;
  int64_t i = i0;
  for (; i + MR <= i1; i += MR) {
    const T* a = A + i * K;
    T* c = C + i * N;
    int64_t j = 0;
    for (; j + 32 <= N; j += 32)
      microKernel<T, MR, 32>(a, B + j, c + j, K, N, K, N, accumulate);
    for (; j + 16 <= N; j += 16)
      microKernel<T, MR, 16>(a, B + j, c + j, K, N, K, N, accumulate);
    for (; j < N; ++j) {
      for (int r = 0; r < MR; ++r) {
        T s = accumulate ? c[r * N + j] : T(0);
        for (int64_t k = 0; k < K; ++k) s += a[r * K + k] * B[k * N + j];
        c[r * N + j] = s;
      }
    }
  }
  for (; i < i1; ++i) {
    const T* a = A + i * K;
    T* c = C + i * N;
    int64_t j = 0;
    for (; j + 32 <= N; j += 32)
      microKernel<T, 1, 32>(a, B + j, c + j, K, N, K, N, accumulate);
    for (; j + 16 <= N; j += 16)
      microKernel<T, 1, 16>(a, B + j, c + j, K, N, K, N, accumulate);
    for (; j < N; ++j) {
      T s = accumulate ? c[j] : T(0);
      for (int64_t k = 0; k < K; ++k) s += a[k] * B[k * N + j];
      c[j] = s;
    }
  }
}

// acc[KR][NR] += outer(A[m, k0:k0+KR], G[m, j0:j0+NR]) over the m range,
// then folded into C. KR*NR is sized to stay in registers.
template <typename T, int KR, int NR>
inline void atbTile(const T* A, const T* G, T* C, int64_t m0, int64_t m1,
                    int64_t K, int64_t N, int64_t k0, int64_t j0) {
  using V = typename VecOf<T>::type;
  constexpr int L = VecOf<T>::lanes;
  static_assert(NR % L == 0);
  constexpr int NV = NR / L;
  V acc[KR][NV];
  for (int k = 0; k < KR; ++k)
    for (int v = 0; v < NV; ++v) acc[k][v] = V{};
  for (int64_t m = m0; m < m1; ++m) {
    const T* g = G + m * N + j0;
    const T* a = A + m * K + k0;
    V gv[NV];
    for (int v = 0; v < NV; ++v) gv[v] = vload(g + v * L);
    for (int k = 0; k < KR; ++k) {
      V av = vsplat(a[k]);
      for (int v = 0; v < NV; ++v) acc[k][v] += av * gv[v];
    }
  }
  for (int k = 0; k < KR; ++k)
    for (int v = 0; v < NV; ++v) {
      T tmp[L];
      vstore(tmp, acc[k][v]);
      T* c = C + (k0 + k) * N + j0 + v * L;
      for (int j = 0; j < L; ++j) c[j] += tmp[j];
    }
}

// Partial of A^T*G over rows [m0, m1): C[K, N] (pre-zeroed by caller).
template <typename T>
inline void atbRowRange(const T* A, const T* G, T* C, int64_t m0, int64_t m1,
                        int64_t K, int64_t N) {
  int64_t j0 = 0;
  for (; j0 + 32 <= N; j0 += 32) {
    int64_t k0 = 0;
    for (; k0 + 4 <= K; k0 += 4) atbTile<T, 4, 32>(A, G, C, m0, m1, K, N, k0, j0);
    for (; k0 < K; ++k0) atbTile<T, 1, 32>(A, G, C, m0, m1, K, N, k0, j0);
  }
  for (; j0 + 16 <= N; j0 += 16) {
    int64_t k0 = 0;
    for (; k0 + 4 <= K; k0 += 4) atbTile<T, 4, 16>(A, G, C, m0, m1, K, N, k0, j0);
    for (; k0 < K; ++k0) atbTile<T, 1, 16>(A, G, C, m0, m1, K, N, k0, j0);
  }
  if (j0 < N) {
    for (int64_t m = m0; m < m1; ++m) {
      const T* g = G + m * N;
      const T* a = A + m * K;
      for (int64_t k = 0; k < K; ++k) {
        T av = a[k];
        T* c = C + k * N;
        for (int64_t j = j0; j < N; ++j) c[j] += av * g[j];
      }
    }
  }
}

template <typename T>
inline std::vector<T>& scratchBuf(int which) {
  thread_local std::vector<T> bufs[4];
  return bufs[which];
}

}  // namespace detail

// C[M, N] (+)= A[M, K] * B[K, N]
template <typename T>
inline void gemm(const T* A, const T* B, T* C, int64_t M, int64_t K, int64_t N,
                 bool accumulate = false) {
  if (M == 0 || N == 0) return;
  if (N % 16 != 0 && M >= 512) {
    // Awkward widths run through a zero-padded image so every column stays on
    // the vector path; the copy out is cheaper than a scalar tail.
    int64_t NP = (N + 15) & ~int64_t(15);
    auto& bp = detail::scratchBuf<T>(0);
    auto& cp = detail::scratchBuf<T>(1);
    bp.assign(K * NP, T(0));
    cp.resize(M * NP);
    for (int64_t k = 0; k < K; ++k)
      for (int64_t j = 0; j < N; ++j) bp[k * NP + j] = B[k * N + j];
    gemm(A, bp.data(), cp.data(), M, K, NP, false);
    parallelFor(static_cast<size_t>(M), 4096, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i)
        for (int64_t j = 0; j < N; ++j) {
          T v = cp[i * NP + j];
          C[i * N + j] = accumulate ? C[i * N + j] + v : v;
        }
    });
    return;
  }
  constexpr int64_t kGrain = 256;
  parallelFor(static_cast<size_t>(M), kGrain, [&](size_t i0, size_t i1, size_t) {
    detail::gemmRowRange(A, B, C, static_cast<int64_t>(i0), static_cast<int64_t>(i1),
                         K, N, accumulate);
  });
}

// C[K, N] (+)= A^T[K, M] * G[M, N], A stored row-major [M, K].
// Per-chunk partials combined in chunk order keep the sum deterministic.
template <typename T>
inline void gemmAtB(const T* A, const T* G, T* C, int64_t M, int64_t K, int64_t N,
                    bool accumulate = false) {
  if (K == 0 || N == 0) return;
  if (N % 16 != 0 && M >= 512) {
    int64_t NP = (N + 15) & ~int64_t(15);
    auto& gp = detail::scratchBuf<T>(2);
    auto& cp = detail::scratchBuf<T>(3);
    gp.assign(M * NP, T(0));
    cp.assign(K * NP, T(0));
    parallelFor(static_cast<size_t>(M), 4096, [&](size_t i0, size_t i1, size_t) {
      for (size_t i = i0; i < i1; ++i)
        for (int64_t j = 0; j < N; ++j) gp[i * NP + j] = G[i * N + j];
    });
    gemmAtB(A, gp.data(), cp.data(), M, K, NP, false);
    for (int64_t k = 0; k < K; ++k)
      for (int64_t j = 0; j < N; ++j) {
        T v = cp[k * NP + j];
        C[k * N + j] = accumulate ? C[k * N + j] + v : v;
      }
    return;
  }
  constexpr int64_t kGrain = 2048;
  size_t chunks = (static_cast<size_t>(M) + kGrain - 1) / kGrain;
  if (ThreadPool::instance().threadCount() == 1) {
    if (!accumulate) std::memset(C, 0, sizeof(T) * K * N);
    for (size_t ci = 0; ci < chunks; ++ci)
      detail::atbRowRange(A, G, C, ci * kGrain,
                          std::min<int64_t>(M, (ci + 1) * kGrain), K, N);
    return;
  }
  std::vector<T> partials(chunks * K * N, T(0));
  parallelFor(static_cast<size_t>(M), kGrain, [&](size_t m0, size_t m1, size_t ci) {
    detail::atbRowRange(A, G, partials.data() + ci * K * N,
                        static_cast<int64_t>(m0), static_cast<int64_t>(m1), K, N);
  });
  if (!accumulate) std::memset(C, 0, sizeof(T) * K * N);
  for (size_t ci = 0; ci < chunks; ++ci) {
    const T* p = partials.data() + ci * K * N;
    for (int64_t e = 0; e < K * N; ++e) C[e] += p[e];
  }
}

// Bt[N, M] = B[M, N] transposed.
template <typename T>
inline void transpose(const T* B, T* Bt, int64_t M, int64_t N) {
  constexpr int64_t TB = 32;
  for (int64_t i0 = 0; i0 < M; i0 += TB)
    for (int64_t j0 = 0; j0 < N; j0 += TB) {
      int64_t i1 = std::min(M, i0 + TB), j1 = std::min(N, j0 + TB);
      for (int64_t i = i0; i < i1; ++i)
        for (int64_t j = j0; j < j1; ++j) Bt[j * M + i] = B[i * N + j];
    }
}

// Deterministic sum: fixed-size block partials combined in order, independent
// of threading (it runs serially; blocks bound rounding drift).
template <typename T>
inline T blockSum(const T* x, int64_t n) {
  constexpr int64_t kBlock = 4096;
  T total = T(0);
  for (int64_t b0 = 0; b0 < n; b0 += kBlock) {
    int64_t b1 = std::min(n, b0 + kBlock);
    T s = T(0);
    for (int64_t i = b0; i < b1; ++i) s += x[i];
    total += s;
  }
  return total;
}

}  // namespace prf
