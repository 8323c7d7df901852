#pragma once

#include <cstdint>
#include <vector>

#include "levit_unet/layers.hpp"

namespace levit::nn {

struct AdamOptions {
  float lr = 1e-5f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 1e-4f;
};

/// Adam with bias correction and decoupled weight decay (an extra
/// -lr * weight_decay * param term on every step).
class Adam {
 public:
  Adam(TensorList params, AdamOptions options);

  /// Applies one update from the parameters' current gradients. Parameters
  /// that received no gradient are left untouched.
  /// Throws NumericError naming the first parameter with a non-finite gradient,
  /// before any parameter is touched.
  void step();
  void zero_grad();

  const AdamOptions& options() const { return options_; }
  void set_lr(float lr) { options_.lr = lr; }
  std::int64_t step_count() const { return step_; }

  const TensorList& params() const { return params_; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }
  void set_step_count(std::int64_t step) { step_ = step; }

 private:
  TensorList params_;
  AdamOptions options_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::int64_t step_ = 0;
};

}  // namespace levit::nn
