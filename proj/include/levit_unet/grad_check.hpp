#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "levit_unet/tensor.hpp"

namespace levit {

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-2;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-1;
  // 0 checks every coordinate; otherwise a seeded random subset per input.
  std::size_t max_coords_per_input = 0;
  // Reduce outputs with fixed random weights in [-1, 1] instead of a plain sum,
  // so ops whose plain sum is constant (softmax) still get a nonzero gradient.
  bool random_projection = true;
  std::uint64_t seed = 0x5eed;
  // Skip coordinates whose [-step, step] interval holds a kink (relu,
  // hardswish): detected when the forward and backward one-sided slopes
  // disagree, or when the central estimate changes at step/2. The analytic
  // gradient plays no part in that decision; skips are counted.
  bool skip_kinks = false;
};

struct GradCheckFailure {
  std::size_t input = 0;
  std::size_t coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;           // kink-straddling coordinates, see skip_kinks
  std::vector<std::size_t> judged;   // per input: coordinates actually compared
  std::vector<GradCheckFailure> failures;
  bool passed() const { return failures.empty(); }
  std::string summary() const;
};

/// Compares reverse-mode gradients of reduce(fn(inputs)) against central
/// finite differences. `inputs` must be leaf tensors; they are marked as
/// requiring grad and perturbed in place (restored afterwards).
GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           std::vector<Tensor> inputs, const GradCheckOptions& options = {});

}  // namespace levit
