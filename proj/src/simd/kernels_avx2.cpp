// Compiled with -mavx2 -mfma -ffp-contract=off; only reached after a cpuid check.
#include <immintrin.h>

#include <algorithm>
#include <cstring>
#include <vector>

#include "kernels_impl.hpp"

namespace levit::simd::detail {
namespace {

constexpr int kMR = 6;
constexpr int kNR = 16;
constexpr int kKC = 256;
constexpr int kMC = 120;
constexpr int kNC = 2048;

// Packs rows [i0, i0+mc) x cols [p0, p0+kc) of op(A) into kMR-row panels,
// zero-padding the last panel.
void pack_a(const GemmProblem& p, int i0, int mc, int p0, int kc, float* dst) {
  for (int ir = 0; ir < mc; ir += kMR) {
    const int rows = std::min(kMR, mc - ir);
    for (int kk = 0; kk < kc; ++kk) {
      for (int r = 0; r < kMR; ++r) {
        float v = 0.0f;
        if (r < rows) {
          const int i = i0 + ir + r;
          const int k = p0 + kk;
          v = p.trans_a ? p.a[static_cast<std::size_t>(k) * p.lda + i]
                        : p.a[static_cast<std::size_t>(i) * p.lda + k];
        }
        *dst++ = v;
      }
    }
  }
}

void pack_b(const GemmProblem& p, int p0, int kc, int j0, int nc, float* dst) {
  for (int jr = 0; jr < nc; jr += kNR) {
    const int cols = std::min(kNR, nc - jr);
    for (int kk = 0; kk < kc; ++kk) {
      const int k = p0 + kk;
      if (!p.trans_b && cols == kNR) {
        std::memcpy(dst, p.b + static_cast<std::size_t>(k) * p.ldb + j0 + jr, sizeof(float) * kNR);
        dst += kNR;
        continue;
      }
      for (int c = 0; c < kNR; ++c) {
        float v = 0.0f;
        if (c < cols) {
          const int j = j0 + jr + c;
          v = p.trans_b ? p.b[static_cast<std::size_t>(j) * p.ldb + k]
                        : p.b[static_cast<std::size_t>(k) * p.ldb + j];
        }
        *dst++ = v;
      }
    }
  }
}

// acc[6][16] = Ap(6 x kc) * Bp(kc x 16); then C = acc (overwrite) or C += acc.
void micro_kernel(int kc, const float* ap, const float* bp, float* c, int ldc, int rows, int cols,
                  bool overwrite) {
  __m256 c00 = _mm256_setzero_ps(), c01 = _mm256_setzero_ps();
  __m256 c10 = _mm256_setzero_ps(), c11 = _mm256_setzero_ps();
  __m256 c20 = _mm256_setzero_ps(), c21 = _mm256_setzero_ps();
  __m256 c30 = _mm256_setzero_ps(), c31 = _mm256_setzero_ps();
  __m256 c40 = _mm256_setzero_ps(), c41 = _mm256_setzero_ps();
  __m256 c50 = _mm256_setzero_ps(), c51 = _mm256_setzero_ps();
  for (int kk = 0; kk < kc; ++kk) {
    const __m256 b0 = _mm256_loadu_ps(bp);
    const __m256 b1 = _mm256_loadu_ps(bp + 8);
    __m256 a = _mm256_broadcast_ss(ap + 0);
    c00 = _mm256_fmadd_ps(a, b0, c00);
    c01 = _mm256_fmadd_ps(a, b1, c01);
    a = _mm256_broadcast_ss(ap + 1);
    c10 = _mm256_fmadd_ps(a, b0, c10);
    c11 = _mm256_fmadd_ps(a, b1, c11);
    a = _mm256_broadcast_ss(ap + 2);
    c20 = _mm256_fmadd_ps(a, b0, c20);
    c21 = _mm256_fmadd_ps(a, b1, c21);
    a = _mm256_broadcast_ss(ap + 3);
    c30 = _mm256_fmadd_ps(a, b0, c30);
    c31 = _mm256_fmadd_ps(a, b1, c31);
    a = _mm256_broadcast_ss(ap + 4);
    c40 = _mm256_fmadd_ps(a, b0, c40);
    c41 = _mm256_fmadd_ps(a, b1, c41);
    a = _mm256_broadcast_ss(ap + 5);
    c50 = _mm256_fmadd_ps(a, b0, c50);
    c51 = _mm256_fmadd_ps(a, b1, c51);
    ap += kMR;
    bp += kNR;
  }
  alignas(32) float tile[kMR][kNR];
  _mm256_store_ps(tile[0], c00);
  _mm256_store_ps(tile[0] + 8, c01);
  _mm256_store_ps(tile[1], c10);
  _mm256_store_ps(tile[1] + 8, c11);
  _mm256_store_ps(tile[2], c20);
  _mm256_store_ps(tile[2] + 8, c21);
  _mm256_store_ps(tile[3], c30);
  _mm256_store_ps(tile[3] + 8, c31);
  _mm256_store_ps(tile[4], c40);
  _mm256_store_ps(tile[4] + 8, c41);
  _mm256_store_ps(tile[5], c50);
  _mm256_store_ps(tile[5] + 8, c51);
  for (int r = 0; r < rows; ++r) {
    float* crow = c + static_cast<std::size_t>(r) * ldc;
    if (cols == kNR) {
      const __m256 t0 = _mm256_load_ps(tile[r]);
      const __m256 t1 = _mm256_load_ps(tile[r] + 8);
      if (overwrite) {
        _mm256_storeu_ps(crow, t0);
        _mm256_storeu_ps(crow + 8, t1);
      } else {
        _mm256_storeu_ps(crow, _mm256_add_ps(_mm256_loadu_ps(crow), t0));
        _mm256_storeu_ps(crow + 8, _mm256_add_ps(_mm256_loadu_ps(crow + 8), t1));
      }
    } else if (overwrite) {
      for (int j = 0; j < cols; ++j) crow[j] = tile[r][j];
    } else {
      for (int j = 0; j < cols; ++j) crow[j] += tile[r][j];
    }
  }
}

}  // namespace

void gemm_avx2(const GemmProblem& p) {
  if (p.m <= 0 || p.n <= 0) return;
  if (p.k <= 0) {
    if (!p.accumulate) {
      for (int i = 0; i < p.m; ++i) std::fill_n(p.c + static_cast<std::size_t>(i) * p.ldc, p.n, 0.0f);
    }
    return;
  }
  thread_local std::vector<float> a_pack;
  thread_local std::vector<float> b_pack;
  a_pack.resize(static_cast<std::size_t>(kMC) * kKC);
  b_pack.resize(static_cast<std::size_t>(kKC) * (kNC + kNR));

  for (int j0 = 0; j0 < p.n; j0 += kNC) {
    const int nc = std::min(kNC, p.n - j0);
    for (int p0 = 0; p0 < p.k; p0 += kKC) {
      const int kc = std::min(kKC, p.k - p0);
      const bool overwrite = (p0 == 0) && !p.accumulate;
      pack_b(p, p0, kc, j0, nc, b_pack.data());
      for (int i0 = 0; i0 < p.m; i0 += kMC) {
        const int mc = std::min(kMC, p.m - i0);
        pack_a(p, i0, mc, p0, kc, a_pack.data());
        for (int jr = 0; jr < nc; jr += kNR) {
          const int cols = std::min(kNR, nc - jr);
          const float* bp = b_pack.data() + static_cast<std::size_t>(jr) * kc;
          for (int ir = 0; ir < mc; ir += kMR) {
            const int rows = std::min(kMR, mc - ir);
            const float* ap = a_pack.data() + static_cast<std::size_t>(ir) * kc;
            float* c = p.c + static_cast<std::size_t>(i0 + ir) * p.ldc + j0 + jr;
            micro_kernel(kc, ap, bp, c, p.ldc, rows, cols, overwrite);
          }
        }
      }
    }
  }
}

void relu_avx2(const float* x, float* y, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void hardswish_avx2(const float* x, float* y, std::size_t n) {
  const __m256 three = _mm256_set1_ps(3.0f);
  const __m256 six = _mm256_set1_ps(6.0f);
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    const __m256 gate = _mm256_min_ps(_mm256_max_ps(_mm256_add_ps(v, three), zero), six);
    _mm256_storeu_ps(y + i, _mm256_div_ps(_mm256_mul_ps(v, gate), six));
  }
  for (; i < n; ++i) {
    const float gate = std::min(std::max(x[i] + 3.0f, 0.0f), 6.0f);
    y[i] = x[i] * gate / 6.0f;
  }
}

void scale_shift_avx2(const float* x, float* y, std::size_t n, float scale, float shift) {
  const __m256 s = _mm256_set1_ps(scale);
  const __m256 t = _mm256_set1_ps(shift);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_mul_ps(_mm256_loadu_ps(x + i), s), t));
  }
  for (; i < n; ++i) y[i] = x[i] * scale + shift;
}

void accumulate_avx2(const float* x, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), _mm256_loadu_ps(x + i)));
  }
  for (; i < n; ++i) y[i] += x[i];
}

}  // namespace levit::simd::detail
