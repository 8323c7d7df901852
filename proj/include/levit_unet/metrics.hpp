#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "levit_unet/tensor.hpp"

namespace levit::metrics {

// ---- loss -------------------------------------------------------------------------------

inline constexpr double kDiceEps = 1e-5;

struct LossTerms {
  double ce = 0.0;
  double dice = 0.0;
  double total = 0.0;
};

/// logits [n, K, h, w]; target holds n*h*w class indices. Returns the scalar
/// 0.5 * cross-entropy + 0.5 * soft-Dice, differentiable w.r.t. logits.
/// Throws InputError for a target value >= K.
Tensor combined_loss(const Tensor& logits, std::span<const std::uint8_t> target);

/// The two terms in double precision (no graph).
LossTerms loss_terms(const Tensor& logits, std::span<const std::uint8_t> target);

// ---- label volumes ---------------------------------------------------------------------

struct LabelVolume {
  std::array<int, 3> dims{1, 1, 1};              // d, h, w
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm along d, h, w
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2]; }
};

struct IndexedSlice {
  int index = 0;
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> labels;
};

/// Orders slices by index into a [d, h, w] volume. Indices must be exactly
/// 0..d-1; a gap or duplicate throws InputError.
LabelVolume stack_slices(std::vector<IndexedSlice> slices, std::array<double, 3> spacing);

// ---- metrics ---------------------------------------------------------------------------

/// 2|A and B| / (|A| + |B|) for class c; 1 when both are empty.
double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int cls);

enum class HdMode { max, p95 };
const char* hd_mode_name(HdMode mode);
HdMode parse_hd_mode(const std::string& text);

struct HdResult {
  double value = 0.0;
  bool sentinel = false;  // exactly one mask empty: value is the volume diagonal
};

/// Symmetric Hausdorff distance in mm between the class-c masks, via exact
/// Euclidean distance transforms. p95 takes the larger of the two directed
/// 95th percentiles (linear interpolation between order statistics).
HdResult hausdorff(const LabelVolume& pred, const LabelVolume& gt, int cls, HdMode mode);

/// Distance in mm from every voxel to the nearest voxel where mask != 0;
/// +inf everywhere when the mask is empty.
std::vector<double> distance_transform(std::span<const std::uint8_t> mask, std::array<int, 3> dims,
                                       std::array<double, 3> spacing);

/// Linear interpolation between closest ranks, q in [0, 100].
double percentile(std::vector<double> values, double q);

// ---- reports ---------------------------------------------------------------------------

struct ClassMetric {
  int cls = 0;
  double dsc = 0.0;
  double hd = 0.0;
  bool hd_sentinel = false;
};

struct CaseMetrics {
  std::string case_id;
  std::vector<ClassMetric> classes;  // foreground classes 1..K-1
};

struct MetricReport {
  HdMode mode = HdMode::p95;
  int num_classes = 2;
  std::vector<CaseMetrics> cases;
  std::vector<double> class_dsc;  // mean over cases, index 0 = class 1
  std::vector<double> class_hd;   // sentinel values left out
  double mean_dsc = 0.0;
  double mean_hd = 0.0;
  int hd_sentinels = 0;

  std::string table() const;
  /// One "key=value ..." line per case/class plus a summary line.
  std::string records() const;
};

CaseMetrics evaluate_volume(const std::string& case_id, const LabelVolume& pred, const LabelVolume& gt,
                            int num_classes, HdMode mode);

/// Aggregates: per class mean over cases, then mean over foreground classes.
MetricReport summarize(std::vector<CaseMetrics> cases, int num_classes, HdMode mode);

}  // namespace levit::metrics
