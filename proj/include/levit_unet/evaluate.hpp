#pragma once

#include <string>
#include <vector>

#include "levit_unet/data.hpp"
#include "levit_unet/metrics.hpp"
#include "levit_unet/model.hpp"

namespace levit::eval {

/// Argmax over classes of logits [n, K, h, w] -> n*h*w labels.
std::vector<std::uint8_t> argmax_labels(const Tensor& logits);

/// Eval-mode prediction for one slice at the model input size `size`; the
/// label map is resized (nearest) back to the slice's own resolution.
std::vector<std::uint8_t> predict_slice(const model::Model& model, const data::SliceRecord& record, int size);

/// Predicts every slice, stacks them per case in manifest order and scores
/// each case. `size` is the model input side.
metrics::MetricReport evaluate_cases(const model::Model& model, const std::vector<data::SliceRecord>& records,
                                     int num_classes, std::array<double, 3> spacing, int size, metrics::HdMode mode);

metrics::MetricReport evaluate_cases(const model::Model& model, const data::CaseManifest& manifest,
                                     const std::string& split, int size, metrics::HdMode mode);

/// Scores given predictions (same order as records) without a model.
metrics::MetricReport score_predictions(const std::vector<data::SliceRecord>& records,
                                        const std::vector<std::vector<std::uint8_t>>& predictions, int num_classes,
                                        std::array<double, 3> spacing, metrics::HdMode mode);

}  // namespace levit::eval
