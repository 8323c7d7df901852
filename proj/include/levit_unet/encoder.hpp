#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "levit_unet/layers.hpp"
#include "levit_unet/tensor.hpp"

namespace levit::model {

struct StageConfig {
  int width = 0;
  int depth = 1;
  int heads = 1;
  int key_dim = 16;
  int mlp_ratio = 2;
  int value_ratio = 2;  // value width per head = value_ratio * key_dim
};

struct EncoderConfig {
  int in_channels = 3;
  std::array<int, 4> stem_widths{};  // C/8, C/4, C/2, C
  std::array<StageConfig, 3> stages{};
  int downsample_value_ratio = 4;
  bool downsample_mlp = true;
  /// False builds the stem only; the fused output is then the stem's 1/16 map.
  bool transformer = true;
  /// Largest input side the attention bias tables cover.
  int image_size = 224;

  int fused_channels() const;
  void validate() const;
};

/// "128s", "192" or "384". Throws ConfigError for anything else.
EncoderConfig variant_encoder(const std::string& variant, int in_channels = 3, int image_size = 224);

struct OffsetIndex {
  int query_count = 0;
  int key_count = 0;
  int n_offsets = 0;
  std::vector<int> index;                          // [query_count * key_count]
  std::vector<std::pair<int, int>> displacements;  // slot -> (drow, dcol)

  int at(int q, int k) const { return index[static_cast<std::size_t>(q) * key_count + k]; }
};

/// Queries sit on the key grid (hq == h) or on its stride-2 subsampling
/// (hq == ceil(h/2)). Slots are numbered by first appearance.
OffsetIndex build_offset_index(int h, int w, int h_q, int w_q);

/// Multi-head attention with a learned per-head bias for every relative
/// query-key displacement. With stride 2 the queries come from the even rows
/// and columns of the token grid.
struct Attention {
  nn::Linear q, k, v, proj;
  Tensor bias_table;  // [heads, n_offsets]
  int heads = 1;
  int key_dim = 1;
  int value_dim = 1;
  int stride = 1;
  std::vector<std::pair<int, int>> slots;  // sorted (drow, dcol), position = slot via slot_of

  static Attention make(int c_in, int c_out, int heads, int key_dim, int value_dim, int stride, int design_h,
                        int design_w, nn::Initializer& init);

  int n_offsets() const { return bias_table.dim(1); }
  /// Bias slot for every (query, key) pair of an h x w token grid.
  std::vector<int> index_for(int h, int w) const;
  /// tokens [n, h*w, c_in] -> [n, hq*wq, c_out]. weights, when given,
  /// receives the softmax output [n*heads, tq, tk].
  Tensor forward(const Tensor& tokens, int h, int w, Tensor* weights = nullptr) const;
  void collect(nn::TensorList& out, const std::string& prefix) const;

 private:
  std::vector<int> slot_lookup_;  // dense (drow, dcol) box -> slot
  int dr_min_ = 0, dr_max_ = 0, dc_min_ = 0, dc_max_ = 0;
};

/// Residual BN -> expand -> hardswish -> contract.
struct MlpSublayer {
  nn::BatchNorm bn;
  nn::Linear expand, contract;

  static MlpSublayer make(int width, int ratio, nn::Initializer& init);
  Tensor forward(const Tensor& z, nn::Mode mode) const;
  void collect(nn::TensorList& out, const std::string& prefix) const;
};

/// MLP sublayer followed by the attention sublayer, both residual.
struct TransformerBlock {
  MlpSublayer mlp;
  nn::BatchNorm attn_bn;
  Attention attn;

  static TransformerBlock make(const StageConfig& stage, int grid_h, int grid_w, nn::Initializer& init);
  Tensor forward(const Tensor& z, int h, int w, nn::Mode mode) const;
  void collect(nn::TensorList& out, const std::string& prefix) const;
};

/// BN -> stride-2 attention to the next width (no residual), then an optional
/// residual MLP at the new width.
struct DownsampleBlock {
  nn::BatchNorm bn;
  Attention attn;
  bool has_mlp = false;
  MlpSublayer mlp;

  static DownsampleBlock make(const StageConfig& from, const StageConfig& to, int value_ratio, bool with_mlp,
                              int grid_h, int grid_w, nn::Initializer& init);
  Tensor forward(const Tensor& z, int h, int w, nn::Mode mode) const;
  void collect(nn::TensorList& out, const std::string& prefix) const;
};

struct StemLayer {
  nn::Conv2d conv;
  nn::BatchNorm bn;
};

struct EncoderOutput {
  Tensor skip_half;
  Tensor skip_quarter;
  Tensor skip_eighth;
  Tensor stem_sixteenth;
  Tensor fused_sixteenth;
  std::array<std::pair<int, int>, 3> stage_grids{};
};

class Encoder {
 public:
  static Encoder make(const EncoderConfig& config, nn::Initializer& init);

  const EncoderConfig& config() const { return config_; }
  EncoderOutput forward(const Tensor& x, nn::Mode mode) const;
  void collect(nn::TensorList& out, const std::string& prefix) const;

  const std::vector<std::vector<TransformerBlock>>& stages() const { return stages_; }

 private:
  EncoderConfig config_;
  std::array<StemLayer, 4> stem_;
  std::vector<std::vector<TransformerBlock>> stages_;
  std::vector<DownsampleBlock> downsamples_;
};

/// Token grid side after the stride-2 step.
inline int half_ceil(int v) { return (v + 1) / 2; }

}  // namespace levit::model
