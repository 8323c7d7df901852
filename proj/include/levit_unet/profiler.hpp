#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "levit_unet/model.hpp"

namespace levit::profile {

struct ModuleCount {
  std::string module;
  std::uint64_t value = 0;
};

struct ParamCount {
  std::uint64_t total = 0;
  std::vector<ModuleCount> by_module;  // in model order
};

/// Learnable scalars only (running statistics excluded). Modules are the
/// first two components of a tensor name, e.g. "encoder.stage2".
ParamCount count_params(const model::Model& model);

struct MacEstimate {
  std::uint64_t total = 0;
  std::vector<ModuleCount> by_module;
};

/// Closed-form multiply-accumulate count for one image of size h x w:
/// conv h'w'*c_out*c_in*k^2, linear tokens*d_in*d_out, attention products
/// heads*tq*tk*(d + d_v). Norms, activations and resizes are free.
MacEstimate estimate_macs(const model::ModelConfig& config, int h, int w);

/// Same quantity counted by the ops during an eval forward of one image.
std::uint64_t traced_macs(const model::Model& model, int h, int w);

struct FpsResult {
  double fps = 0.0;  // median images/s
  int batch = 1;
  int size = 224;
  int warmup = 0;
  int iters = 0;
  int threads = 1;
  std::vector<double> per_iter_fps;
};

FpsResult measure_fps(const model::Model& model, int size, int batch, int warmup, int iters);

struct ProfileRow {
  std::string variant;
  bool conv_only = false;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  FpsResult fps;                       // single-threaded
  std::optional<FpsResult> fps_multi;  // when more than one thread is allowed
};

/// Fixed-width table plus one "key=value" record line per row.
std::string format_profile(const std::vector<ProfileRow>& rows, const std::string& hardware_note);

}  // namespace levit::profile
