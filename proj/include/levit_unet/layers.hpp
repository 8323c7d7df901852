#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "levit_unet/tensor.hpp"

namespace levit::nn {

enum class Mode { train, eval };

/// A model tensor with its hierarchical name. Buffers (batch-norm running
/// statistics) are saved in checkpoints but are not trained or counted.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using TensorList = std::vector<NamedTensor>;

/// Seeded source for parameter initialization.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  /// Uniform in +-sqrt(6 / (fan_in + fan_out)).
  std::vector<float> glorot_uniform(std::size_t count, int fan_in, int fan_out);

 private:
  std::mt19937_64 rng_;
};

struct Conv2d {
  Tensor weight;  // [c_out, c_in, k, k]
  Tensor bias;    // [c_out] or undefined
  int stride = 1;
  int padding = 0;

  static Conv2d make(int c_in, int c_out, int kernel, int stride, int padding, bool with_bias, Initializer& init);

  int in_channels() const { return weight.dim(1); }
  int out_channels() const { return weight.dim(0); }
  int kernel() const { return weight.dim(2); }

  Tensor forward(const Tensor& x) const;
  void collect(TensorList& out, const std::string& prefix) const;
};

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  float eps = 1e-5f;
  float momentum = 0.1f;

  static BatchNorm make(int channels);

  int channels() const { return static_cast<int>(gamma.numel()); }

  /// Training mode updates the running statistics (single writer).
  Tensor forward(const Tensor& x, Mode mode) const;
  void collect(TensorList& out, const std::string& prefix) const;
};

struct Linear {
  Tensor weight;  // [d_out, d_in]
  Tensor bias;    // [d_out] or undefined

  static Linear make(int d_in, int d_out, bool with_bias, Initializer& init);

  int in_features() const { return weight.dim(1); }
  int out_features() const { return weight.dim(0); }

  Tensor forward(const Tensor& x) const;
  void collect(TensorList& out, const std::string& prefix) const;
};

}  // namespace levit::nn
