#include <cmath>
#include <vector>

#include "levit_unet/errors.hpp"
#include "levit_unet/metrics.hpp"

namespace levit::metrics {

namespace {

struct Forward {
  int n = 0, k = 0, hw = 0;
  std::vector<double> prob;  // [n, K, hw]
  std::vector<double> inter, psum, tsum;
  LossTerms terms;
};

Forward run(const Tensor& logits, std::span<const std::uint8_t> target) {
  if (logits.rank() != 4) throw ConfigError("loss expects logits [n,K,h,w], got " + shape_str(logits.shape()));
  Forward f;
  f.n = logits.dim(0);
  f.k = logits.dim(1);
  f.hw = logits.dim(2) * logits.dim(3);
  const std::size_t pixels = static_cast<std::size_t>(f.n) * f.hw;
  if (target.size() != pixels) {
    throw ConfigError("loss target has " + std::to_string(target.size()) + " labels for " + std::to_string(pixels) +
                      " pixels");
  }
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] >= f.k) {
      throw InputError("target class " + std::to_string(target[i]) + " at pixel " + std::to_string(i) +
                       " is out of range for K=" + std::to_string(f.k));
    }
  }
  const float* z = logits.data().data();
  f.prob.resize(logits.numel());
  f.inter.assign(f.k, 0.0);
  f.psum.assign(f.k, 0.0);
  f.tsum.assign(f.k, 0.0);
  double ce = 0.0;
  for (int b = 0; b < f.n; ++b) {
    const std::size_t base = static_cast<std::size_t>(b) * f.k * f.hw;
    for (int i = 0; i < f.hw; ++i) {
      double mx = -INFINITY;
      for (int c = 0; c < f.k; ++c) mx = std::max(mx, static_cast<double>(z[base + c * f.hw + i]));
      double s = 0.0;
      for (int c = 0; c < f.k; ++c) s += std::exp(z[base + c * f.hw + i] - mx);
      const int t = target[static_cast<std::size_t>(b) * f.hw + i];
      ce -= z[base + t * f.hw + i] - mx - std::log(s);
      for (int c = 0; c < f.k; ++c) {
        const double p = std::exp(z[base + c * f.hw + i] - mx) / s;
        f.prob[base + c * f.hw + i] = p;
        f.psum[c] += p;
        if (c == t) f.inter[c] += p;
      }
      f.tsum[t] += 1.0;
    }
  }
  f.terms.ce = ce / static_cast<double>(pixels);
  double dice_mean = 0.0;
  for (int c = 0; c < f.k; ++c) dice_mean += (2.0 * f.inter[c] + kDiceEps) / (f.psum[c] + f.tsum[c] + kDiceEps);
  f.terms.dice = 1.0 - dice_mean / f.k;
  f.terms.total = 0.5 * f.terms.ce + 0.5 * f.terms.dice;
  return f;
}

}  // namespace

LossTerms loss_terms(const Tensor& logits, std::span<const std::uint8_t> target) { return run(logits, target).terms; }

Tensor combined_loss(const Tensor& logits, std::span<const std::uint8_t> target) {
  auto f = std::make_shared<Forward>(run(logits, target));
  auto labels = std::make_shared<std::vector<std::uint8_t>>(target.begin(), target.end());
  auto zn = logits.node();
  return make_op_result({1}, {static_cast<float>(f->terms.total)}, {logits}, [f, labels, zn](detail::Node& self) {
    const double up = self.grad[0];
    const int n = f->n, k = f->k, hw = f->hw;
    const double pixels = static_cast<double>(n) * hw;
    std::vector<double> s(k), num(k);
    for (int c = 0; c < k; ++c) {
      s[c] = f->psum[c] + f->tsum[c] + kDiceEps;
      num[c] = 2.0 * f->inter[c] + kDiceEps;
    }
    auto& dz = zn->grad_buffer();
    std::vector<double> g(k);
    for (int b = 0; b < n; ++b) {
      const std::size_t base = static_cast<std::size_t>(b) * k * hw;
      for (int i = 0; i < hw; ++i) {
        const int t = (*labels)[static_cast<std::size_t>(b) * hw + i];
        // d dice_loss / d p_c, then through the softmax Jacobian
        double dot = 0.0;
        for (int c = 0; c < k; ++c) {
          const double tc = c == t ? 1.0 : 0.0;
          g[c] = -0.5 / k * (2.0 * tc * s[c] - num[c]) / (s[c] * s[c]);
          dot += g[c] * f->prob[base + c * hw + i];
        }
        for (int c = 0; c < k; ++c) {
          const double p = f->prob[base + c * hw + i];
          const double tc = c == t ? 1.0 : 0.0;
          const double grad = 0.5 * (p - tc) / pixels + p * (g[c] - dot);
          dz[base + c * hw + i] += static_cast<float>(up * grad);
        }
      }
    }
  });
}

}  // namespace levit::metrics
