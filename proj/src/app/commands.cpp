#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <fmt/format.h>

#include "levit_unet/app.hpp"
#include "levit_unet/checkpoint.hpp"
#include "levit_unet/errors.hpp"
#include "levit_unet/evaluate.hpp"
#include "levit_unet/optim.hpp"
#include "levit_unet/parallel.hpp"
#include "levit_unet/simd/kernels.hpp"

namespace levit::app {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_text(const std::string& path, const std::string& text) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write '" + path + "'");
  out << text;
}

// Per-class overlap tallies for a running foreground DSC.
struct DiceTally {
  std::vector<double> inter, pred, gt;
  explicit DiceTally(int k) : inter(k, 0), pred(k, 0), gt(k, 0) {}
  void add(std::span<const std::uint8_t> p, std::span<const std::uint8_t> g) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      pred[p[i]] += 1;
      gt[g[i]] += 1;
      if (p[i] == g[i]) inter[p[i]] += 1;
    }
  }
  double mean_foreground() const {
    double s = 0;
    for (std::size_t c = 1; c < inter.size(); ++c) s += pred[c] + gt[c] > 0 ? 2 * inter[c] / (pred[c] + gt[c]) : 1.0;
    return s / static_cast<double>(inter.size() - 1);
  }
};

data::BatchOptions epoch_batches(const RunConfig& run, const model::ModelConfig& mc, int epoch) {
  data::BatchOptions o;
  o.batch_size = run.batch_size;
  o.target_size = run.effective_input_size();
  o.in_channels = mc.encoder.in_channels;
  o.shuffle = true;
  o.shuffle_seed = run.seed * 1000003ull + static_cast<std::uint64_t>(epoch);
  o.augment = run.augment;
  o.augment_seed = run.seed * 7919ull + static_cast<std::uint64_t>(epoch) * 104729ull + 1;
  return o;
}

}  // namespace

TrainResult cmd_train(const RunConfig& run, std::ostream& log) {
  run.validate();
  const data::CaseManifest manifest = prepare_data(run);
  TrainResult result;
  result.config = model_config_for(run, manifest.num_classes);
  const auto train = data::load_split(manifest, "train");
  const auto test = data::load_split(manifest, "test");
  if (train.empty()) throw InputError("manifest has no train slices");

  const std::string ckpt_dir = run.effective_checkpoint_dir();
  fs::create_directories(ckpt_dir);
  write_text((fs::path(run.out) / "config.ini").string(), run.to_ini());
  result.last_checkpoint = (fs::path(ckpt_dir) / "last.ckpt").string();
  result.best_checkpoint = (fs::path(ckpt_dir) / "best.ckpt").string();

  model::Model model = model::Model::build(result.config);
  nn::Adam adam(model.named_tensors(),
                {.lr = static_cast<float>(run.effective_lr()), .weight_decay = static_cast<float>(run.weight_decay)});
  int start_epoch = 0;
  if (!run.resume.empty()) {
    const model::Checkpoint ck = model::read_checkpoint(run.resume);
    model::restore_checkpoint(model, ck, &adam);
    if (const std::string* e = ck.meta_value("epoch")) start_epoch = std::stoi(*e);
    if (const std::string* b = ck.meta_value("best_dsc")) result.best_dsc = std::stod(*b);
    log << fmt::format("resumed from {} at epoch {}\n", run.resume, start_epoch);
  }

  auto meta = [&](int epoch, double dsc) {
    return model::KeyValues{{"epoch", std::to_string(epoch)},
                            {"seed", std::to_string(run.seed)},
                            {"eval_dsc", fmt::format("{:.6f}", dsc)},
                            {"best_dsc", fmt::format("{:.6f}", std::max(dsc, result.best_dsc))}};
  };
  if (run.epochs == 0 || start_epoch >= run.epochs) {
    model::save_checkpoint(model, result.last_checkpoint, meta(start_epoch, 0.0), &adam);
    log << "no epochs to run; wrote " << result.last_checkpoint << "\n";
    return result;
  }

  std::ofstream tsv((fs::path(run.out) / "train_log.tsv").string(), start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (start_epoch == 0) tsv << "epoch\tloss\ttrain_dsc\teval_dsc\tseconds\n";
  const int k = manifest.num_classes;
  bool first_step = start_epoch == 0;
  for (int epoch = start_epoch; epoch < run.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const data::BatchOptions opts = epoch_batches(run, result.config, epoch);
    DiceTally tally(k);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    int step = 0;
    for (const auto& ids : data::batch_order(train.size(), opts.batch_size, opts.shuffle, opts.shuffle_seed)) {
      const data::Batch batch = data::make_batch(train, ids, opts);
      const Tensor logits = model.forward(batch.images, nn::Mode::train);
      const Tensor loss = metrics::combined_loss(logits, batch.labels);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw NumericError(fmt::format("non-finite loss at epoch {} step {}; last good checkpoint: {}", epoch + 1, step,
                                       fs::exists(result.last_checkpoint) ? result.last_checkpoint : "none"));
      }
      if (first_step) {
        result.initial_loss = lv;
        log << fmt::format("initial loss {:.9g}\n", lv);
        first_step = false;
      }
      tally.add(eval::argmax_labels(logits), batch.labels);
      loss_sum += lv * static_cast<double>(ids.size());
      seen += ids.size();
      adam.zero_grad();
      loss.backward();
      adam.step();
      ++step;
    }

    EpochLog e;
    e.epoch = epoch + 1;
    e.loss = loss_sum / static_cast<double>(seen);
    e.train_dsc = tally.mean_foreground();
    if (!test.empty()) {
      e.eval_dsc =
          eval::evaluate_cases(model, test, k, manifest.spacing, run.effective_input_size(), run.hd_mode).mean_dsc;
    }
    e.seconds = seconds_since(t0);
    result.epochs.push_back(e);
    result.final_dsc = e.eval_dsc;

    model::save_checkpoint(model, result.last_checkpoint, meta(e.epoch, e.eval_dsc), &adam);
    if (e.eval_dsc > result.best_dsc || epoch == start_epoch) {
      result.best_dsc = std::max(result.best_dsc, e.eval_dsc);
      fs::copy_file(result.last_checkpoint, result.best_checkpoint, fs::copy_options::overwrite_existing);
    }
    log << fmt::format("epoch={} loss={:.6f} train_dsc={:.4f} eval_dsc={:.4f} seconds={:.1f}\n", e.epoch, e.loss,
                       e.train_dsc, e.eval_dsc, e.seconds);
    log.flush();
    tsv << fmt::format("{}\t{:.6f}\t{:.4f}\t{:.4f}\t{:.1f}\n", e.epoch, e.loss, e.train_dsc, e.eval_dsc, e.seconds);
    tsv.flush();
    if (run.early_stop_dsc > 0.0 && e.eval_dsc >= run.early_stop_dsc) {
      log << fmt::format("test DSC {:.4f} reached {:.4f}; stopping\n", e.eval_dsc, run.early_stop_dsc);
      break;
    }
  }
  return result;
}

metrics::MetricReport cmd_eval(const RunConfig& run, const std::string& checkpoint, std::ostream& out) {
  run.validate();
  if (!fs::exists(checkpoint)) throw InputError("checkpoint '" + checkpoint + "' does not exist");
  const model::Model model = model::load_checkpoint(checkpoint);
  const data::CaseManifest manifest = prepare_data(run);
  const int size = run.input_size > 0 ? run.input_size : model.config().encoder.image_size;
  const auto report = eval::evaluate_cases(model, manifest, "test", size, run.hd_mode);
  out << report.table();
  write_text(run.effective_metrics_out(), report.records());
  return report;
}

std::vector<std::string> cmd_predict(const std::string& checkpoint, const std::vector<std::string>& inputs,
                                     const std::string& out_dir, int input_size, std::ostream& out) {
  if (inputs.empty()) throw InputError("predict needs at least one input slice or directory");
  std::vector<std::string> images;
  for (const auto& in : inputs) {
    if (!fs::exists(in)) throw InputError("input '" + in + "' does not exist");
    if (fs::is_directory(in)) {
      std::vector<std::string> found;
      for (const auto& entry : fs::directory_iterator(in)) {
        const std::string name = entry.path().filename().string();
        if (name.size() > 9 && name.ends_with("_img.lvtr")) found.push_back(entry.path().string());
      }
      std::sort(found.begin(), found.end());
      images.insert(images.end(), found.begin(), found.end());
    } else {
      images.push_back(in);
    }
  }
  if (images.empty()) throw InputError("no *_img.lvtr files among the inputs");
  if (!fs::exists(checkpoint)) throw InputError("checkpoint '" + checkpoint + "' does not exist");
  const model::Model model = model::load_checkpoint(checkpoint);
  const int size = input_size > 0 ? input_size : model.config().encoder.image_size;
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  for (const auto& img : images) {
    const data::SliceRecord r = data::load_slice(img, model.config().num_classes);
    const auto pred = eval::predict_slice(model, r, size);
    const std::string path = (fs::path(out_dir) / (r.case_id + "_" + std::to_string(r.slice_index) + "_pred.lvtr")).string();
    data::write_raw_u8(path, {r.h, r.w}, pred);
    out << path << "\n";
    written.push_back(path);
  }
  return written;
}

std::vector<profile::ProfileRow> cmd_bench(const RunConfig& run, std::ostream& out, bool measure_fps) {
  run.validate();
  std::vector<profile::ProfileRow> rows;
  const int threads = max_threads();
  for (const std::string variant : {"128s", "192", "384"}) {
    for (bool conv_only : {false, true}) {
      model::ModelConfig mc = model::ModelConfig::for_variant(variant, run.bench_classes, run.in_channels, run.bench_size);
      mc.conv_only = conv_only;
      mc.seed = run.seed;
      const model::Model m = model::Model::build(mc);
      profile::ProfileRow row;
      row.variant = variant;
      row.conv_only = conv_only;
      row.params = profile::count_params(m).total;
      row.macs = profile::estimate_macs(mc, run.bench_size, run.bench_size).total;
      if (measure_fps) {
        set_max_threads(1);
        row.fps = profile::measure_fps(m, run.bench_size, run.bench_batch, run.bench_warmup, run.bench_iters);
        set_max_threads(threads);
        if (threads > 1) {
          row.fps_multi = profile::measure_fps(m, run.bench_size, run.bench_batch, run.bench_warmup, run.bench_iters);
        }
      }
      rows.push_back(row);
    }
  }
  const std::string note = fmt::format("kernels={} max_threads={} input={}x{} batch={} classes={}",
                                       simd::active_kernels().name, threads, run.bench_size, run.bench_size,
                                       run.bench_batch, run.bench_classes);
  out << profile::format_profile(rows, note);
  return rows;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& run, std::ostream& out) {
  run.validate();
  std::vector<AblationRow> rows;
  // Models with the same skip count and no transformer are identical builds,
  // so they share one training run.
  std::map<std::pair<int, bool>, std::size_t> trained;
  for (int skips = 0; skips <= 4; ++skips) {
    for (bool conv_only : {false, true}) {
      RunConfig r = run;
      r.num_skips = skips;
      r.conv_only = conv_only;
      const std::string tag = fmt::format("N{}{}", skips, conv_only ? "_conv" : "");
      r.out = (fs::path(run.out) / "ablate" / tag).string();
      r.checkpoint_dir.clear();
      r.resume.clear();
      if (run.synthetic()) r.synthetic_dir = run.effective_synthetic_dir();
      const model::ModelConfig mc = model_config_for(r, run.synthetic() ? run.synthetic_classes : 2);
      const std::pair<int, bool> key{skips, mc.has_transformer()};
      AblationRow row;
      row.num_skips = skips;
      row.conv_only = conv_only;
      if (auto it = trained.find(key); it != trained.end()) {
        row = rows[it->second];
        row.conv_only = conv_only;
        row.note = "same model as " + fmt::format("N{}{}", skips, rows[it->second].conv_only ? "_conv" : "");
        rows.push_back(row);
        continue;
      }
      out << "== " << tag << " ==\n";
      const TrainResult tr = cmd_train(r, out);
      const model::Model best = model::load_checkpoint(tr.best_checkpoint);
      const data::CaseManifest manifest = prepare_data(r);
      const auto report = eval::evaluate_cases(best, manifest, "test", r.effective_input_size(), r.hd_mode);
      row.params = profile::count_params(best).total;
      row.dsc = report.mean_dsc;
      row.hd = report.mean_hd;
      trained[key] = rows.size();
      rows.push_back(row);
    }
  }
  out << fmt::format("{:<6} {:<9} {:>10} {:>8} {:>10}  {}\n", "skips", "conv_only", "params(M)", "DSC",
                     fmt::format("HD{}", metrics::hd_mode_name(run.hd_mode)), "note");
  for (const auto& r : rows) {
    out << fmt::format("{:<6} {:<9} {:>10.3f} {:>8.4f} {:>10.2f}  {}\n", r.num_skips, r.conv_only ? "yes" : "no",
                       r.params / 1e6, r.dsc, r.hd, r.note);
  }
  for (const auto& r : rows) {
    out << fmt::format("ablation num_skips={} conv_only={} params={} dsc={:.6f} hd={:.6f}\n", r.num_skips,
                       r.conv_only ? "true" : "false", r.params, r.dsc, r.hd);
  }
  return rows;
}

std::vector<double> overfit_losses(const model::ModelConfig& config, const data::SliceRecord& record, int steps,
                                   double lr, int size) {
  model::Model model = model::Model::build(config);
  nn::Adam adam(model.named_tensors(), {.lr = static_cast<float>(lr), .weight_decay = 0.0f});
  data::BatchOptions o;
  o.batch_size = 1;
  o.target_size = size;
  o.in_channels = config.encoder.in_channels;
  o.shuffle = false;
  const data::Batch batch = data::make_batch({record}, {0}, o);
  std::vector<double> losses;
  for (int s = 0; s <= steps; ++s) {
    const Tensor loss = metrics::combined_loss(model.forward(batch.images, nn::Mode::train), batch.labels);
    losses.push_back(loss.item());
    if (s == steps) break;
    adam.zero_grad();
    loss.backward();
    adam.step();
  }
  return losses;
}

}  // namespace levit::app
