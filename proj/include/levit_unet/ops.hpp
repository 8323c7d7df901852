#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "levit_unet/tensor.hpp"

/// Differentiable operations. Every op validates shapes and throws
/// ConfigError on mismatch; inputs are never modified (batch_norm's running
/// statistics excepted, in training mode).
namespace levit::ops {

/// NCHW convolution via im2col + GEMM. weight [c_out, c_in, k, k]; bias [c_out] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// Channel axis is 1 for rank-4 maps [n,c,h,w] and the last axis for rank-3
/// tokens [n,t,c]. Training mode normalizes with batch statistics and updates
/// the running buffers in place; eval mode reads only the running buffers.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, float momentum, float eps);

/// x [..., d_in] -> [..., d_out]; weight [d_out, d_in]; bias [d_out] or undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
Tensor hardswish(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);

/// Bilinear resampling of [n,c,h,w] with the half-pixel (align_corners=false) convention.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor reshape(const Tensor& x, Shape shape);

/// [B,m,k] x [B,k,n] -> [B,m,n]; with trans_b the second operand is [B,n,k].
Tensor batched_matmul(const Tensor& a, const Tensor& b, bool trans_b);

/// [n,t,h*d] -> [n*h,t,d] and back.
Tensor split_heads(const Tensor& x, int heads);
Tensor merge_heads(const Tensor& x, int heads);

/// scores [n*heads, tq, tk] + table[head, index[q*tk + k]].
Tensor add_attention_bias(const Tensor& scores, const Tensor& table, std::span<const int> index);

/// Keeps tokens at even grid rows/cols: [n,h*w,c] -> [n,ceil(h/2)*ceil(w/2),c].
Tensor subsample_tokens(const Tensor& x, int h, int w);

/// [n,c,h,w] <-> [n,h*w,c] (row-major grid flatten).
Tensor map_to_tokens(const Tensor& x);
Tensor tokens_to_map(const Tensor& x, int h, int w);

Tensor sum(const Tensor& x);

/// Counts multiply-accumulates issued by conv2d / linear / batched_matmul on
/// this thread while alive. Scopes nest; an outer scope also sees inner counts.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;
  std::uint64_t total() const { return total_; }

 private:
  friend void count_macs(std::uint64_t);
  MacCounter* outer_;
  std::uint64_t total_ = 0;
};

void count_macs(std::uint64_t macs);

}  // namespace levit::ops
