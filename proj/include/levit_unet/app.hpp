#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "levit_unet/data.hpp"
#include "levit_unet/metrics.hpp"
#include "levit_unet/model.hpp"
#include "levit_unet/profiler.hpp"

namespace levit::app {

/// Everything a run needs. File format is INI (`[section]` + `key = value`);
/// command-line flags override file values.
struct RunConfig {
  // [model]
  std::string variant = "128s";
  int num_skips = 4;
  bool conv_only = false;
  int in_channels = 3;

  // [train]
  std::optional<double> lr;  // unset: 1e-3 on synthetic data, 1e-5 on a manifest
  double weight_decay = 1e-4;
  int batch_size = 8;
  int epochs = 30;
  std::uint64_t seed = 0;
  bool augment = true;
  std::string checkpoint_dir;  // default <out>/checkpoints
  std::string resume;          // checkpoint to continue from
  double early_stop_dsc = 0.0; // stop once test DSC reaches this (0 = never)

  // [data]
  std::string manifest;     // empty: generate the synthetic set
  int input_size = 0;       // 0: synthetic size, or 224 for a manifest
  int synthetic_cases = 24;
  int synthetic_test_cases = 4;
  int synthetic_slices = 10;
  int synthetic_size = 128;
  int synthetic_classes = 3;
  std::uint64_t synthetic_seed = 0;
  std::string synthetic_dir;  // default <out>/synthetic

  // [eval]
  metrics::HdMode hd_mode = metrics::HdMode::p95;
  std::string metrics_out;  // default <out>/metrics.txt

  // [bench]
  int bench_size = 224;
  int bench_batch = 1;
  int bench_warmup = 1;
  int bench_iters = 5;
  int bench_classes = 9;

  // [run]
  std::string out = "runs/latest";

  bool synthetic() const { return manifest.empty(); }
  double effective_lr() const;
  int effective_input_size() const;
  std::string effective_checkpoint_dir() const;
  std::string effective_synthetic_dir() const;
  std::string effective_metrics_out() const;
  data::SyntheticSpec synthetic_spec() const;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  /// Sets `section.key` from text; unknown keys throw ConfigError.
  void set(const std::string& dotted_key, const std::string& value);
  std::string to_ini() const;
};

RunConfig load_run_config(const std::string& path);

/// Model configuration implied by a run (class count comes from the data).
model::ModelConfig model_config_for(const RunConfig& run, int num_classes);

/// Generates the synthetic set when no manifest is given, then loads it.
data::CaseManifest prepare_data(const RunConfig& run);

// ---- commands --------------------------------------------------------------------------------

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double train_dsc = 0.0;
  double eval_dsc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  model::ModelConfig config;
  double initial_loss = 0.0;  // first batch, before any update
  std::vector<EpochLog> epochs;
  double best_dsc = 0.0;
  double final_dsc = 0.0;
  std::string best_checkpoint;
  std::string last_checkpoint;
};

TrainResult cmd_train(const RunConfig& run, std::ostream& log);

metrics::MetricReport cmd_eval(const RunConfig& run, const std::string& checkpoint, std::ostream& out);

/// Writes `<case>_<idx>_pred.lvtr` (u8) per input image into out_dir.
std::vector<std::string> cmd_predict(const std::string& checkpoint, const std::vector<std::string>& inputs,
                                     const std::string& out_dir, int input_size, std::ostream& out);

/// Three variants x {full, conv-only}.
std::vector<profile::ProfileRow> cmd_bench(const RunConfig& run, std::ostream& out, bool measure_fps = true);

struct AblationRow {
  int num_skips = 4;
  bool conv_only = false;
  std::uint64_t params = 0;
  double dsc = 0.0;
  double hd = 0.0;
  std::string note;
};

/// num_skips 0..4 x conv_only {false, true} on the run's data.
std::vector<AblationRow> cmd_ablate(const RunConfig& run, std::ostream& out);

/// Loss after each of `steps` full-batch updates on one slice (index 0 is
/// the loss before the first update).
std::vector<double> overfit_losses(const model::ModelConfig& config, const data::SliceRecord& record, int steps,
                                   double lr, int size);

}  // namespace levit::app
