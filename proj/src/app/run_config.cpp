#include <charconv>
#include <filesystem>
#include <functional>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "levit_unet/app.hpp"
#include "levit_unet/errors.hpp"

namespace levit::app {

namespace {

namespace fs = std::filesystem;

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [p, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  return v;
}

bool parse_flag(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + text + "'");
}

std::string fmt_double(double v) { return fmt::format("{}", v); }

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define LEVIT_INT_FIELD(name, member)                                                                   \
  Field {                                                                                               \
    name, [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_number<int>(k, v); }, \
        [](const RunConfig& c) { return std::to_string(c.member); }                                     \
  }
#define LEVIT_U64_FIELD(name, member)                                                                   \
  Field {                                                                                               \
    name,                                                                                               \
        [](RunConfig& c, const std::string& k, const std::string& v) {                                  \
          c.member = parse_number<std::uint64_t>(k, v);                                                 \
        },                                                                                              \
        [](const RunConfig& c) { return std::to_string(c.member); }                                     \
  }
#define LEVIT_DOUBLE_FIELD(name, member)                                                                \
  Field {                                                                                               \
    name, [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_number<double>(k, v); }, \
        [](const RunConfig& c) { return fmt_double(c.member); }                                         \
  }
#define LEVIT_BOOL_FIELD(name, member)                                                                  \
  Field {                                                                                               \
    name, [](RunConfig& c, const std::string& k, const std::string& v) { c.member = parse_flag(k, v); }, \
        [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); }                     \
  }
#define LEVIT_STRING_FIELD(name, member)                                                                \
  Field {                                                                                               \
    name, [](RunConfig& c, const std::string&, const std::string& v) { c.member = v; },                 \
        [](const RunConfig& c) { return c.member; }                                                     \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      LEVIT_STRING_FIELD("model.variant", variant),
      LEVIT_INT_FIELD("model.num_skips", num_skips),
      LEVIT_BOOL_FIELD("model.conv_only", conv_only),
      LEVIT_INT_FIELD("model.in_channels", in_channels),
      Field{"train.lr",
            [](RunConfig& c, const std::string& k, const std::string& v) { c.lr = parse_number<double>(k, v); },
            [](const RunConfig& c) { return c.lr ? fmt_double(*c.lr) : std::string(); }},
      LEVIT_DOUBLE_FIELD("train.weight_decay", weight_decay),
      LEVIT_INT_FIELD("train.batch_size", batch_size),
      LEVIT_INT_FIELD("train.epochs", epochs),
      LEVIT_U64_FIELD("train.seed", seed),
      LEVIT_BOOL_FIELD("train.augment", augment),
      LEVIT_STRING_FIELD("train.checkpoint_dir", checkpoint_dir),
      LEVIT_STRING_FIELD("train.resume", resume),
      LEVIT_DOUBLE_FIELD("train.early_stop_dsc", early_stop_dsc),
      LEVIT_STRING_FIELD("data.manifest", manifest),
      LEVIT_INT_FIELD("data.input_size", input_size),
      LEVIT_INT_FIELD("data.synthetic_cases", synthetic_cases),
      LEVIT_INT_FIELD("data.synthetic_test_cases", synthetic_test_cases),
      LEVIT_INT_FIELD("data.synthetic_slices", synthetic_slices),
      LEVIT_INT_FIELD("data.synthetic_size", synthetic_size),
      LEVIT_INT_FIELD("data.synthetic_classes", synthetic_classes),
      LEVIT_U64_FIELD("data.synthetic_seed", synthetic_seed),
      LEVIT_STRING_FIELD("data.synthetic_dir", synthetic_dir),
      Field{"eval.hd_mode",
            [](RunConfig& c, const std::string&, const std::string& v) { c.hd_mode = metrics::parse_hd_mode(v); },
            [](const RunConfig& c) { return std::string(metrics::hd_mode_name(c.hd_mode)); }},
      LEVIT_STRING_FIELD("eval.metrics_out", metrics_out),
      LEVIT_INT_FIELD("bench.size", bench_size),
      LEVIT_INT_FIELD("bench.batch", bench_batch),
      LEVIT_INT_FIELD("bench.warmup", bench_warmup),
      LEVIT_INT_FIELD("bench.iters", bench_iters),
      LEVIT_INT_FIELD("bench.num_classes", bench_classes),
      LEVIT_STRING_FIELD("run.out", out),
  };
  return table;
}

#undef LEVIT_INT_FIELD
#undef LEVIT_U64_FIELD
#undef LEVIT_DOUBLE_FIELD
#undef LEVIT_BOOL_FIELD
#undef LEVIT_STRING_FIELD

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("config key '" + key + "': " + what);
}

}  // namespace

double RunConfig::effective_lr() const { return lr ? *lr : (synthetic() ? 1e-3 : 1e-5); }

int RunConfig::effective_input_size() const {
  if (input_size > 0) return input_size;
  return synthetic() ? synthetic_size : 224;
}

std::string RunConfig::effective_checkpoint_dir() const {
  return checkpoint_dir.empty() ? (fs::path(out) / "checkpoints").string() : checkpoint_dir;
}

std::string RunConfig::effective_synthetic_dir() const {
  return synthetic_dir.empty() ? (fs::path(out) / "synthetic").string() : synthetic_dir;
}

std::string RunConfig::effective_metrics_out() const {
  return metrics_out.empty() ? (fs::path(out) / "metrics.txt").string() : metrics_out;
}

data::SyntheticSpec RunConfig::synthetic_spec() const {
  data::SyntheticSpec s;
  s.n_cases = synthetic_cases;
  s.test_cases = synthetic_test_cases;
  s.slices_per_case = synthetic_slices;
  s.size = synthetic_size;
  s.num_classes = synthetic_classes;
  s.seed = synthetic_seed;
  return s;
}

void RunConfig::validate() const {
  require(variant == "128s" || variant == "192" || variant == "384", "model.variant",
          "expected 128s, 192 or 384, got '" + variant + "'");
  require(num_skips >= 0 && num_skips <= 4, "model.num_skips", "must be in [0, 4]");
  require(in_channels >= 1, "model.in_channels", "must be >= 1");
  require(!lr || *lr > 0.0, "train.lr", "must be positive");
  require(weight_decay >= 0.0, "train.weight_decay", "must be >= 0");
  require(batch_size >= 1, "train.batch_size", "must be >= 1");
  require(epochs >= 0, "train.epochs", "must be >= 0");
  require(early_stop_dsc >= 0.0 && early_stop_dsc <= 1.0, "train.early_stop_dsc", "must be in [0, 1]");
  const int size = effective_input_size();
  require(size >= 16 && size % 16 == 0, "data.input_size", "must be a positive multiple of 16");
  if (synthetic()) {
    require(synthetic_cases >= 1, "data.synthetic_cases", "must be >= 1");
    require(synthetic_test_cases >= 0 && synthetic_test_cases <= synthetic_cases, "data.synthetic_test_cases",
            "must be in [0, synthetic_cases]");
    require(synthetic_slices >= 1, "data.synthetic_slices", "must be >= 1");
    require(synthetic_size >= 16, "data.synthetic_size", "must be >= 16");
    require(synthetic_classes >= 2 && synthetic_classes <= 255, "data.synthetic_classes", "must be in [2, 255]");
  } else {
    require(fs::exists(manifest), "data.manifest", "file '" + manifest + "' does not exist");
  }
  require(bench_size >= 16 && bench_size % 16 == 0, "bench.size", "must be a positive multiple of 16");
  require(bench_batch >= 1, "bench.batch", "must be >= 1");
  require(bench_warmup >= 0, "bench.warmup", "must be >= 0");
  require(bench_iters >= 1, "bench.iters", "must be >= 1");
  require(bench_classes >= 2, "bench.num_classes", "must be >= 2");
  require(!out.empty(), "run.out", "must not be empty");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.key == key) {
      f.set(*this, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::to_ini() const {
  std::string out, section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + ("[" + sec + "]\n");
      section = sec;
    }
    const std::string v = f.get(*this);
    if (v.empty()) {
      out += "# " + f.key.substr(dot + 1) + " =\n";
    } else {
      out += f.key.substr(dot + 1) + " = " + v + "\n";
    }
  }
  return out;
}

RunConfig load_run_config(const std::string& path) {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cannot parse config '" + path + "': " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig c;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config '" + path + "': key '" + section + "' outside any [section]");
    for (const auto& [key, value] : body) c.set(section + "." + key, value.get_value<std::string>());
  }
  return c;
}

model::ModelConfig model_config_for(const RunConfig& run, int num_classes) {
  model::ModelConfig m =
      model::ModelConfig::for_variant(run.variant, num_classes, run.in_channels, run.effective_input_size());
  m.num_skips = run.num_skips;
  m.conv_only = run.conv_only;
  m.seed = run.seed;
  m.validate();
  return m;
}

data::CaseManifest prepare_data(const RunConfig& run) {
  if (!run.synthetic()) return data::read_manifest(run.manifest);
  const std::string dir = run.effective_synthetic_dir();
  data::generate_synthetic_dataset(run.synthetic_spec(), dir);
  return data::read_manifest((fs::path(dir) / "manifest.tsv").string());
}

}  // namespace levit::app
