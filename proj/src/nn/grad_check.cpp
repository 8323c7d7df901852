#include "levit_unet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

namespace levit {
namespace {

Tensor project(const Tensor& y, const std::vector<float>& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += static_cast<double>(weights[i]) * y.data()[i];
  auto yn = y.node();
  return make_op_result({1}, {static_cast<float>(s)}, {y}, [yn, weights](detail::Node& self) {
    auto& dy = yn->grad_buffer();
    for (std::size_t i = 0; i < weights.size(); ++i) dy[i] += self.grad[0] * weights[i];
  });
}

double reduce_double(const Tensor& y, const std::vector<float>& weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += static_cast<double>(weights[i]) * y.data()[i];
  return s;
}

}  // namespace

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << "checked " << checked << " coordinates, max rel error " << max_rel_error << ", " << failures.size()
     << " failing";
  if (skipped) os << ", " << skipped << " skipped near kinks";
  for (std::size_t i = 0; i < std::min<std::size_t>(failures.size(), 8); ++i) {
    const auto& f = failures[i];
    os << "\n  input " << f.input << " coord " << f.coordinate << ": analytic " << f.analytic << " numeric "
       << f.numeric << " rel " << f.rel_error;
  }
  return os.str();
}

GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, const GradCheckOptions& options) {
  std::mt19937_64 rng(options.seed);
  for (Tensor& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  Tensor y = fn(inputs);
  std::vector<float> weights(y.numel(), 1.0f);
  if (options.random_projection) {
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    for (float& w : weights) w = dist(rng);
  }
  project(y, weights).backward();
  double f_zero = 0.0;
  if (options.skip_kinks) {
    NoGradGuard guard;
    f_zero = reduce_double(fn(inputs), weights);
  }

  GradCheckReport report;
  report.judged.assign(inputs.size(), 0);
  for (std::size_t in = 0; in < inputs.size(); ++in) {
    Tensor t = inputs[in];
    std::vector<float> analytic(t.numel(), 0.0f);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());

    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords_per_input != 0 && coords.size() > options.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }

    auto data = t.mutable_data();
    // central difference at `step`; also returns the raw function values
    auto central = [&](std::size_t c, double step, double* f_plus, double* f_minus) {
      const float original = data[c];
      const float plus = static_cast<float>(original + step);
      const float minus = static_cast<float>(original - step);
      NoGradGuard guard;
      data[c] = plus;
      *f_plus = reduce_double(fn(inputs), weights);
      data[c] = minus;
      *f_minus = reduce_double(fn(inputs), weights);
      data[c] = original;
      return (*f_plus - *f_minus) / (static_cast<double>(plus) - static_cast<double>(minus));
    };
    for (std::size_t c : coords) {
      double f_plus = 0.0, f_minus = 0.0;
      const double numeric = central(c, options.step, &f_plus, &f_minus);
      if (options.skip_kinks) {
        // A kink inside [-h, h] shows up either as unequal one-sided slopes or
        // as a central estimate that moves when the step shrinks.
        const double h = options.step;
        const double fwd = (f_plus - f_zero) / h, bwd = (f_zero - f_minus) / h;
        double q_plus = 0.0, q_minus = 0.0;
        const double narrow = central(c, h / 2, &q_plus, &q_minus);
        const double scale = std::max({std::abs(fwd), std::abs(bwd), std::abs(narrow), options.floor});
        const double limit = options.tolerance / 2 * scale;
        if (std::abs(fwd - bwd) >= limit || std::abs(numeric - narrow) >= limit) {
          ++report.skipped;
          continue;
        }
      }
      const double a = analytic[c];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.checked;
      ++report.judged[in];
      if (rel >= options.tolerance) report.failures.push_back({in, c, a, numeric, rel});
    }
  }
  return report;
}

}  // namespace levit
