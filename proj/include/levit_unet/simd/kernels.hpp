#pragma once

#include <cstddef>
#include <string_view>

namespace levit::simd {

/// Row-major single-precision GEMM problem: C (+)= op(A) * op(B).
///
/// op(A) is M x K, op(B) is K x N. When trans_a is set, A is stored K x M
/// (so element (i, k) lives at a[k * lda + i]); likewise for trans_b.
struct GemmProblem {
  int m = 0;
  int n = 0;
  int k = 0;
  const float* a = nullptr;
  int lda = 0;
  bool trans_a = false;
  const float* b = nullptr;
  int ldb = 0;
  bool trans_b = false;
  float* c = nullptr;
  int ldc = 0;
  bool accumulate = false;
};

/// One complete set of inner kernels. Every variant must agree with the
/// scalar set up to floating-point reassociation.
struct KernelSet {
  std::string_view name;
  void (*gemm)(const GemmProblem&);
  void (*relu)(const float* x, float* y, std::size_t n);
  void (*hardswish)(const float* x, float* y, std::size_t n);
  // y[i] = x[i] * scale + shift
  void (*scale_shift)(const float* x, float* y, std::size_t n, float scale, float shift);
  // y[i] += x[i]
  void (*accumulate)(const float* x, float* y, std::size_t n);
};

const KernelSet& scalar_kernels();

/// nullptr when the binary or the host CPU lacks AVX2+FMA.
const KernelSet* avx2_kernels();

/// The set chosen at startup: AVX2 when supported, unless LEVIT_UNET_KERNELS=scalar.
const KernelSet& active_kernels();

/// Override the dispatch choice ("scalar" or "avx2"); returns false if unavailable.
bool select_kernels(std::string_view name);

bool cpu_supports_avx2_fma();

}  // namespace levit::simd

namespace levit::simd {

/// GEMM through the active kernel set, split across max_threads() workers.
void gemm(const GemmProblem& p);

}  // namespace levit::simd
