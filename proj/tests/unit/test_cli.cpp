#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "levit_unet/app.hpp"
#include "levit_unet/data.hpp"
#include "levit_unet/errors.hpp"

namespace fs = std::filesystem;
using levit::app::RunConfig;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / "levit_unet_test_cli" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Run {
  int code = -1;
  std::string out, err;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

Run run_cli(const std::string& args, const fs::path& dir) {
  const auto o = dir / "stdout.txt", e = dir / "stderr.txt";
  const std::string cmd = std::string("LEVIT_UNET_THREADS=1 ") + LEVIT_UNET_BIN + " " + args + " >" + o.string() +
                          " 2>" + e.string();
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(o);
  r.err = read_file(e);
  return r;
}

// tiny synthetic run: 2 cases of 2 slices at 32x32
std::string tiny_config(const fs::path& dir) {
  const auto path = dir / "tiny.ini";
  std::ofstream(path) << "[model]\nvariant = 128s\n\n[train]\nepochs = 1\nbatch_size = 2\nlr = 0.001\n\n"
                         "[data]\nsynthetic_cases = 2\nsynthetic_test_cases = 1\nsynthetic_slices = 2\n"
                         "synthetic_size = 32\nsynthetic_classes = 2\n";
  return path.string();
}

}  // namespace

TEST(RunConfig, IniOverridesDefaults) {
  auto dir = scratch("ini");
  std::ofstream(dir / "a.ini") << "[model]\nvariant = 192\nnum_skips = 2\nconv_only = true\n\n[train]\nlr = 0.01\n"
                                  "seed = 7\n\n[eval]\nhd_mode = max\n";
  auto c = levit::app::load_run_config((dir / "a.ini").string());
  EXPECT_EQ(c.variant, "192");
  EXPECT_EQ(c.num_skips, 2);
  EXPECT_TRUE(c.conv_only);
  EXPECT_DOUBLE_EQ(c.effective_lr(), 0.01);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.hd_mode, levit::metrics::HdMode::max);
  EXPECT_EQ(c.batch_size, 8);
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfig, ToIniRoundTrips) {
  RunConfig c;
  c.set("model.variant", "384");
  c.set("train.lr", "0.0005");
  c.set("train.augment", "false");
  c.set("data.synthetic_size", "64");
  c.set("eval.hd_mode", "max");
  c.set("run.out", "somewhere/else");
  auto dir = scratch("round");
  std::ofstream(dir / "c.ini") << c.to_ini();
  auto back = levit::app::load_run_config((dir / "c.ini").string());
  EXPECT_EQ(back.to_ini(), c.to_ini());
  EXPECT_EQ(back.variant, "384");
  EXPECT_FALSE(back.augment);
  EXPECT_EQ(back.effective_input_size(), 64);
}

TEST(RunConfig, RejectsUnknownAndInvalid) {
  RunConfig c;
  EXPECT_THROW(c.set("model.depth", "3"), levit::ConfigError);
  EXPECT_THROW(c.set("train.epochs", "three"), levit::ConfigError);
  EXPECT_THROW(c.set("train.augment", "maybe"), levit::ConfigError);
  EXPECT_THROW(c.set("eval.hd_mode", "mean"), levit::ConfigError);
  auto bad = [](auto edit) {
    RunConfig r;
    edit(r);
    return r;
  };
  EXPECT_THROW(bad([](RunConfig& r) { r.variant = "256"; }).validate(), levit::ConfigError);
  EXPECT_THROW(bad([](RunConfig& r) { r.num_skips = 5; }).validate(), levit::ConfigError);
  EXPECT_THROW(bad([](RunConfig& r) { r.input_size = 100; }).validate(), levit::ConfigError);
  EXPECT_THROW(bad([](RunConfig& r) { r.manifest = "/no/such/file.tsv"; }).validate(), levit::ConfigError);
  EXPECT_THROW(bad([](RunConfig& r) { r.lr = -1.0; }).validate(), levit::ConfigError);

  auto dir = scratch("bad_ini");
  std::ofstream(dir / "x.ini") << "[model]\nwidth = 3\n";
  EXPECT_THROW(levit::app::load_run_config((dir / "x.ini").string()), levit::ConfigError);
  std::ofstream(dir / "y.ini") << "[model\nvariant=128s\n";
  EXPECT_THROW(levit::app::load_run_config((dir / "y.ini").string()), levit::ConfigError);
}

TEST(RunConfig, DefaultLearningRateFollowsData) {
  RunConfig c;
  EXPECT_DOUBLE_EQ(c.effective_lr(), 1e-3);
  c.manifest = "m.tsv";
  EXPECT_DOUBLE_EQ(c.effective_lr(), 1e-5);
  EXPECT_EQ(c.effective_input_size(), 224);
}

// ---- the binary -------------------------------------------------------------------------

TEST(Cli, UsageErrorsAreOneLine) {
  auto dir = scratch("usage");
  auto r = run_cli("", dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(r.err.rfind("error kind=usage", 0), 0u) << r.err;
  r = run_cli("train --variant 999 --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error kind=config"), std::string::npos);
  EXPECT_NE(r.err.find("model.variant"), std::string::npos);
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  r = run_cli("eval --checkpoint " + (dir / "none.ckpt").string() + " --out " + (dir / "o").string(), dir);
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("error kind=input"), std::string::npos);
  r = run_cli("train --hd-mode p50", dir);
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, TrainEvalPredictEndToEnd) {
  auto dir = scratch("e2e");
  const auto cfg = tiny_config(dir);
  const auto out = dir / "run";
  auto r = run_cli("train --config " + cfg + " --seed 3 --out " + out.string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("epoch=1 "), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(out / "checkpoints" / "best.ckpt"));
  EXPECT_TRUE(fs::exists(out / "train_log.tsv"));
  EXPECT_TRUE(fs::exists(out / "config.ini"));

  const auto ckpt = (out / "checkpoints" / "best.ckpt").string();
  r = run_cli("eval --config " + cfg + " --hd-mode max --out " + out.string() + " --checkpoint " + ckpt, dir);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out / "metrics.txt"));
  EXPECT_NE(read_file(out / "metrics.txt").find("mode=max"), std::string::npos);

  const auto preds = dir / "preds";
  r = run_cli("predict --checkpoint " + ckpt + " --out " + preds.string() + " " + (out / "synthetic").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto p = levit::data::read_raw((preds / "case00_0_pred.lvtr").string());
  EXPECT_EQ(p.dtype, levit::data::DType::u8);
  EXPECT_EQ(p.dims, (std::vector<int>{32, 32}));
  for (auto v : p.u8) EXPECT_LT(v, 2);

  // resuming a finished run is a no-op that keeps the checkpoint readable
  r = run_cli("train --config " + cfg + " --seed 3 --out " + out.string() + " --resume " +
                  (out / "checkpoints" / "last.ckpt").string(),
              dir);
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST(Cli, BenchWithoutTiming) {
  auto dir = scratch("bench");
  auto r = run_cli("bench --no-fps --out " + (dir / "o").string(), dir);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* v : {"128s", "192", "384"}) EXPECT_NE(r.out.find(v), std::string::npos);
}
