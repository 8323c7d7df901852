#include "levit_unet/evaluate.hpp"

#include <map>

#include "levit_unet/errors.hpp"

namespace levit::eval {

std::vector<std::uint8_t> argmax_labels(const Tensor& logits) {
  if (logits.rank() != 4) throw ConfigError("argmax expects [n,K,h,w], got " + shape_str(logits.shape()));
  const int n = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const float* z = logits.data().data();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(n) * hw);
  for (int b = 0; b < n; ++b) {
    const float* zb = z + static_cast<std::size_t>(b) * k * hw;
    for (int i = 0; i < hw; ++i) {
      int best = 0;
      for (int c = 1; c < k; ++c) {
        if (zb[static_cast<std::size_t>(c) * hw + i] > zb[static_cast<std::size_t>(best) * hw + i]) best = c;
      }
      out[static_cast<std::size_t>(b) * hw + i] = static_cast<std::uint8_t>(best);
    }
  }
  return out;
}

std::vector<std::uint8_t> predict_slice(const model::Model& model, const data::SliceRecord& record, int size) {
  NoGradGuard no_grad;
  data::BatchOptions o;
  o.batch_size = 1;
  o.target_size = size;
  o.in_channels = model.config().encoder.in_channels;
  o.shuffle = false;
  const data::Batch b = data::make_batch({record}, {0}, o);
  const auto labels = argmax_labels(model.forward(b.images, nn::Mode::eval));
  return data::resize_labels(labels, size, size, record.h, record.w);
}

metrics::MetricReport score_predictions(const std::vector<data::SliceRecord>& records,
                                        const std::vector<std::vector<std::uint8_t>>& predictions, int num_classes,
                                        std::array<double, 3> spacing, metrics::HdMode mode) {
  if (predictions.size() != records.size()) throw InputError("one prediction per slice is required");
  std::vector<std::string> order;
  std::map<std::string, std::pair<std::vector<metrics::IndexedSlice>, std::vector<metrics::IndexedSlice>>> by_case;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!by_case.count(r.case_id)) order.push_back(r.case_id);
    auto& [pred, gt] = by_case[r.case_id];
    pred.push_back({r.slice_index, r.h, r.w, predictions[i]});
    gt.push_back({r.slice_index, r.h, r.w, r.label});
  }
  std::vector<metrics::CaseMetrics> cases;
  for (const auto& id : order) {
    auto& [pred, gt] = by_case[id];
    const auto pv = metrics::stack_slices(std::move(pred), spacing);
    const auto gv = metrics::stack_slices(std::move(gt), spacing);
    cases.push_back(metrics::evaluate_volume(id, pv, gv, num_classes, mode));
  }
  return metrics::summarize(std::move(cases), num_classes, mode);
}

metrics::MetricReport evaluate_cases(const model::Model& model, const std::vector<data::SliceRecord>& records,
                                     int num_classes, std::array<double, 3> spacing, int size, metrics::HdMode mode) {
  if (model.config().num_classes != num_classes) {
    throw ConfigError("model predicts " + std::to_string(model.config().num_classes) + " classes, data has " +
                      std::to_string(num_classes));
  }
  std::vector<std::vector<std::uint8_t>> preds;
  preds.reserve(records.size());
  for (const auto& r : records) preds.push_back(predict_slice(model, r, size));
  return score_predictions(records, preds, num_classes, spacing, mode);
}

metrics::MetricReport evaluate_cases(const model::Model& model, const data::CaseManifest& manifest,
                                     const std::string& split, int size, metrics::HdMode mode) {
  return evaluate_cases(model, data::load_split(manifest, split), manifest.num_classes, manifest.spacing, size, mode);
}

}  // namespace levit::eval
