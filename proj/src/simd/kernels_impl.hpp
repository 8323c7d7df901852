#pragma once

#include <cstddef>

#include "levit_unet/simd/kernels.hpp"

namespace levit::simd::detail {

void gemm_scalar(const GemmProblem& p);
void relu_scalar(const float* x, float* y, std::size_t n);
void hardswish_scalar(const float* x, float* y, std::size_t n);
void scale_shift_scalar(const float* x, float* y, std::size_t n, float scale, float shift);
void accumulate_scalar(const float* x, float* y, std::size_t n);

#if defined(LEVIT_UNET_HAVE_AVX2)
void gemm_avx2(const GemmProblem& p);
void relu_avx2(const float* x, float* y, std::size_t n);
void hardswish_avx2(const float* x, float* y, std::size_t n);
void scale_shift_avx2(const float* x, float* y, std::size_t n, float scale, float shift);
void accumulate_avx2(const float* x, float* y, std::size_t n);
#endif

}  // namespace levit::simd::detail
