#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "levit_unet/tensor.hpp"

namespace levit::data {

// ---- raw tensor files ------------------------------------------------------------------

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

/// "LVTR" magic, u8 dtype, u32 ndim, u32 dims..., little-endian payload.
struct RawTensor {
  DType dtype = DType::f32;
  std::vector<int> dims;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;

  std::size_t numel() const;
};

void write_raw_f32(const std::string& path, const std::vector<int>& dims, std::span<const float> values);
void write_raw_u8(const std::string& path, const std::vector<int>& dims, std::span<const std::uint8_t> values);
/// FormatError with the byte offset on bad magic, dtype, dims or length.
RawTensor read_raw(const std::string& path);

// ---- slices ------------------------------------------------------------------------------

struct SliceRecord {
  std::string case_id;
  int slice_index = 0;
  int h = 0;
  int w = 0;
  std::vector<float> image;          // [h, w], in [0, 1]
  std::vector<std::uint8_t> label;   // [h, w], < K
};

/// Loads an image/label pair. Intensities are clamped to [0, 1]; a label
/// value >= num_classes is rejected.
SliceRecord load_slice(const std::string& img_path, const std::string& lbl_path, int num_classes);

/// Derives the label path and (case, index) from `<case>_<idx>_img.lvtr`.
SliceRecord load_slice(const std::string& img_path, int num_classes);

void save_slice(const SliceRecord& record, const std::string& img_path, const std::string& lbl_path);

// ---- manifest ----------------------------------------------------------------------------

struct ManifestEntry {
  std::string split;  // "train" or "test"
  std::string case_id;
  int slice_index = 0;
  std::string img_path;  // as written in the file
  std::string lbl_path;
};

/// Text file: header `K=<k>\tspacing=<z>,<y>,<x>`, then one
/// `split\tcase\tindex\timg\tlbl` line per slice. Relative paths resolve
/// against the manifest's directory.
struct CaseManifest {
  int num_classes = 2;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<ManifestEntry> entries;
  std::string base_dir;

  std::string resolve(const std::string& path) const;
  std::vector<ManifestEntry> split(const std::string& name) const;
  /// Case ids of a split, in first-appearance order.
  std::vector<std::string> case_ids(const std::string& name) const;
};

/// All-or-nothing: any malformed line, non-contiguous slice numbering or
/// missing file throws FormatError/InputError naming the file and field.
CaseManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const CaseManifest& manifest);

std::vector<SliceRecord> load_split(const CaseManifest& manifest, const std::string& split);

// ---- augmentation --------------------------------------------------------------------------

/// Flips, then rotation by angle_deg (counter-clockwise as displayed, rows
/// growing downward) about the image center. Image bilinear, label nearest,
/// outside samples become 0.
SliceRecord transform_slice(const SliceRecord& record, bool hflip, bool vflip, double angle_deg);

/// Random flips (p = 0.5 each) and a rotation uniform in [-20, 20] degrees.
SliceRecord augment(const SliceRecord& record, std::mt19937_64& rng);

// ---- batching --------------------------------------------------------------------------------

struct Batch {
  Tensor images;                     // [n, in_c, s, s]
  std::vector<std::uint8_t> labels;  // n * s * s
  std::vector<int> record_ids;
};

struct BatchOptions {
  int batch_size = 8;
  int target_size = 224;
  int in_channels = 3;
  std::uint64_t shuffle_seed = 0;
  bool shuffle = true;
  bool augment = false;
  std::uint64_t augment_seed = 0;
};

/// Record indices per batch; the last batch may be short.
std::vector<std::vector<int>> batch_order(std::size_t n_records, int batch_size, bool shuffle, std::uint64_t seed);

/// Resizes (image bilinear, label nearest) to target and replicates the
/// grayscale channel. Augmentation draws from a generator seeded per record
/// id, so results do not depend on how work is split across threads.
Batch make_batch(const std::vector<SliceRecord>& records, const std::vector<int>& ids, const BatchOptions& options);

std::vector<Batch> make_batches(const std::vector<SliceRecord>& records, const BatchOptions& options);

/// Nearest / bilinear resampling of a single [h, w] plane.
std::vector<std::uint8_t> resize_labels(std::span<const std::uint8_t> src, int h, int w, int out_h, int out_w);
std::vector<float> resize_image(std::span<const float> src, int h, int w, int out_h, int out_w);

// ---- synthetic dataset ---------------------------------------------------------------------------

struct SyntheticSpec {
  int n_cases = 24;
  int test_cases = 4;  // last cases go to the test split
  int slices_per_case = 10;
  int size = 128;
  int num_classes = 3;
  std::uint64_t seed = 0;
  std::array<double, 3> spacing{3.0, 1.0, 1.0};
  double noise_sigma = 0.1;
  // region radius bounds as fractions of the image side
  double min_radius = 0.08;
  double max_radius = 0.16;
};

/// Shape type of foreground class c (1-based): 0 ellipse, 1 rectangle, 2 ring.
int synthetic_shape(int cls);
/// Mean intensity of class c before noise.
double synthetic_intensity(int cls, int num_classes);

/// One slice, deterministic in (spec.seed, case_index, slice_index).
SliceRecord synthesize_slice(const SyntheticSpec& spec, int case_index, int slice_index);

/// Writes every slice plus `manifest.tsv` into out_dir; returns the manifest.
CaseManifest generate_synthetic_dataset(const SyntheticSpec& spec, const std::string& out_dir);

}  // namespace levit::data
