#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "levit_unet/app.hpp"
#include "levit_unet/errors.hpp"

namespace {

using levit::app::RunConfig;

// Flags shared by every subcommand. Unset flags leave the config file value alone.
struct CommonFlags {
  std::string config;
  std::optional<std::string> variant;
  std::optional<int> num_skips;
  bool conv_only = false;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> hd_mode;
  std::optional<std::string> out;
  std::optional<int> epochs;
  std::vector<std::string> sets;
};

void add_common(CLI::App* sub, CommonFlags& f) {
  sub->add_option("--config", f.config, "INI run config");
  sub->add_option("--variant", f.variant, "128s, 192 or 384");
  sub->add_option("--num-skips", f.num_skips, "skip connections used by the decoder (0-4)");
  sub->add_flag("--conv-only", f.conv_only, "drop the transformer stages");
  sub->add_option("--seed", f.seed, "run seed");
  sub->add_option("--hd-mode", f.hd_mode, "max or p95");
  sub->add_option("--out", f.out, "run directory (predict: output directory)");
  sub->add_option("--epochs", f.epochs, "training epochs");
  sub->add_option("--set", f.sets, "override any config key, e.g. --set train.lr=0.001");
}

RunConfig resolve(const CommonFlags& f) {
  RunConfig run = f.config.empty() ? RunConfig{} : levit::app::load_run_config(f.config);
  for (const auto& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw levit::ConfigError("--set expects key=value, got '" + kv + "'");
    run.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (f.variant) run.set("model.variant", *f.variant);
  if (f.num_skips) run.num_skips = *f.num_skips;
  if (f.conv_only) run.conv_only = true;
  if (f.seed) run.seed = *f.seed;
  if (f.hd_mode) run.set("eval.hd_mode", *f.hd_mode);
  if (f.out) run.out = *f.out;
  if (f.epochs) run.epochs = *f.epochs;
  run.validate();
  return run;
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
    if (c == '"') c = '\'';
  }
  return s;
}

int fail(const char* kind, int code, const std::string& message) {
  std::cerr << fmt::format("error kind={} message=\"{}\"\n", kind, one_line(message));
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LeViT-UNet medical image segmentation"};
  app.require_subcommand(1);

  CommonFlags train_f, eval_f, predict_f, bench_f, ablate_f;
  auto* train = app.add_subcommand("train", "train a model");
  add_common(train, train_f);
  std::optional<std::string> resume;
  train->add_option("--resume", resume, "checkpoint to continue from");

  auto* eval = app.add_subcommand("eval", "score a checkpoint on the test split");
  add_common(eval, eval_f);
  std::string eval_ckpt;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();

  auto* predict = app.add_subcommand("predict", "write label maps for image slices");
  add_common(predict, predict_f);
  std::string predict_ckpt;
  std::vector<std::string> inputs;
  int input_size = 0;
  predict->add_option("--checkpoint", predict_ckpt, "checkpoint file")->required();
  predict->add_option("--input-size", input_size, "model input side (default: the checkpoint's)");
  predict->add_option("inputs", inputs, "*_img.lvtr files or directories");

  auto* bench = app.add_subcommand("bench", "parameters, MACs and throughput for every variant");
  add_common(bench, bench_f);
  bool no_fps = false;
  bench->add_flag("--no-fps", no_fps, "skip timing");

  auto* ablate = app.add_subcommand("ablate", "train num_skips 0-4 with and without transformer stages");
  add_common(ablate, ablate_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", 2, e.what());
  }

  try {
    if (*train) {
      RunConfig run = resolve(train_f);
      if (resume) run.resume = *resume;
      const auto r = levit::app::cmd_train(run, std::cout);
      std::cout << fmt::format("best_dsc={:.6f} final_dsc={:.6f} best_checkpoint={}\n", r.best_dsc, r.final_dsc,
                               r.best_checkpoint);
    } else if (*eval) {
      const RunConfig run = resolve(eval_f);
      const auto report = levit::app::cmd_eval(run, eval_ckpt, std::cout);
      std::cout << "metrics written to " << run.effective_metrics_out() << "\n";
      (void)report;
    } else if (*predict) {
      const RunConfig run = resolve(predict_f);
      if (inputs.empty()) return fail("usage", 2, "predict needs at least one input");
      levit::app::cmd_predict(predict_ckpt, inputs, run.out, input_size, std::cout);
    } else if (*bench) {
      levit::app::cmd_bench(resolve(bench_f), std::cout, !no_fps);
    } else if (*ablate) {
      levit::app::cmd_ablate(resolve(ablate_f), std::cout);
    }
  } catch (const levit::ConfigError& e) {
    return fail("config", 2, e.what());
  } catch (const levit::InputError& e) {
    return fail("input", 3, e.what());
  } catch (const levit::FormatError& e) {
    return fail("format", 4, e.what());
  } catch (const levit::NumericError& e) {
    return fail("numeric", 5, e.what());
  } catch (const std::exception& e) {
    return fail("internal", 1, e.what());
  }
  return EXIT_SUCCESS;
}
