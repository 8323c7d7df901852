#include "levit_unet/layers.hpp"

#include <cmath>

#include "levit_unet/ops.hpp"

namespace levit::nn {

std::vector<float> Initializer::glorot_uniform(std::size_t count, int fan_in, int fan_out) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  std::uniform_real_distribution<float> dist(-bound, bound);
  std::vector<float> v(count);
  for (float& x : v) x = dist(rng_);
  return v;
}

Conv2d Conv2d::make(int c_in, int c_out, int kernel, int stride, int padding, bool with_bias, Initializer& init) {
  Conv2d c;
  const std::size_t n = static_cast<std::size_t>(c_out) * c_in * kernel * kernel;
  c.weight = Tensor::parameter({c_out, c_in, kernel, kernel},
                               init.glorot_uniform(n, c_in * kernel * kernel, c_out * kernel * kernel));
  if (with_bias) c.bias = Tensor::parameter({c_out}, std::vector<float>(static_cast<std::size_t>(c_out), 0.0f));
  c.stride = stride;
  c.padding = padding;
  return c;
}

Tensor Conv2d::forward(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, padding); }

void Conv2d::collect(TensorList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

BatchNorm BatchNorm::make(int channels) {
  BatchNorm bn;
  const auto c = static_cast<std::size_t>(channels);
  bn.gamma = Tensor::parameter({channels}, std::vector<float>(c, 1.0f));
  bn.beta = Tensor::parameter({channels}, std::vector<float>(c, 0.0f));
  bn.running_mean = Tensor({channels}, 0.0f);
  bn.running_var = Tensor({channels}, 1.0f);
  return bn;
}

Tensor BatchNorm::forward(const Tensor& x, Mode mode) const {
  Tensor rm = running_mean;
  Tensor rv = running_var;
  return ops::batch_norm(x, gamma, beta, rm, rv, mode == Mode::train, momentum, eps);
}

void BatchNorm::collect(TensorList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma, true});
  out.push_back({prefix + ".beta", beta, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
}

Linear Linear::make(int d_in, int d_out, bool with_bias, Initializer& init) {
  Linear l;
  l.weight = Tensor::parameter({d_out, d_in}, init.glorot_uniform(static_cast<std::size_t>(d_out) * d_in, d_in, d_out));
  if (with_bias) l.bias = Tensor::parameter({d_out}, std::vector<float>(static_cast<std::size_t>(d_out), 0.0f));
  return l;
}

Tensor Linear::forward(const Tensor& x) const { return ops::linear(x, weight, bias); }

void Linear::collect(TensorList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

}  // namespace levit::nn
