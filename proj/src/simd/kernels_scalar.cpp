#include <algorithm>

#include "kernels_impl.hpp"

namespace levit::simd::detail {
namespace {

inline float elem_a(const GemmProblem& p, int i, int k) {
  return p.trans_a ? p.a[static_cast<std::size_t>(k) * p.lda + i]
                   : p.a[static_cast<std::size_t>(i) * p.lda + k];
}

inline float elem_b(const GemmProblem& p, int k, int j) {
  return p.trans_b ? p.b[static_cast<std::size_t>(j) * p.ldb + k]
                   : p.b[static_cast<std::size_t>(k) * p.ldb + j];
}

}  // namespace

void gemm_scalar(const GemmProblem& p) {
  for (int i = 0; i < p.m; ++i) {
    float* crow = p.c + static_cast<std::size_t>(i) * p.ldc;
    if (!p.accumulate) std::fill(crow, crow + p.n, 0.0f);
    for (int k = 0; k < p.k; ++k) {
      const float aik = elem_a(p, i, k);
      if (!p.trans_b) {
        const float* brow = p.b + static_cast<std::size_t>(k) * p.ldb;
        for (int j = 0; j < p.n; ++j) crow[j] += aik * brow[j];
      } else {
        for (int j = 0; j < p.n; ++j) crow[j] += aik * elem_b(p, k, j);
      }
    }
  }
}

void relu_scalar(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void hardswish_scalar(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const float gate = std::min(std::max(x[i] + 3.0f, 0.0f), 6.0f);
    y[i] = x[i] * gate / 6.0f;
  }
}

void scale_shift_scalar(const float* x, float* y, std::size_t n, float scale, float shift) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * scale + shift;
}

void accumulate_scalar(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

}  // namespace levit::simd::detail
