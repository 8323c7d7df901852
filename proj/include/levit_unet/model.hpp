#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "levit_unet/encoder.hpp"
#include "levit_unet/layers.hpp"

namespace levit::model {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct ModelConfig {
  std::string variant = "128s";
  int num_classes = 9;
  int num_skips = 4;
  bool conv_only = false;
  EncoderConfig encoder;
  /// 0 = no extra 3x3 conv at 1/16 before the first up block.
  int entry_width = 0;
  std::array<int, 4> decoder_widths{512, 256, 64, 64};
  std::uint64_t seed = 0;

  /// Stock configuration for a named variant.
  static ModelConfig for_variant(const std::string& variant, int num_classes = 9, int in_channels = 3,
                                 int image_size = 224);

  /// Transformer stages only exist when their output reaches the decoder.
  bool has_transformer() const { return !conv_only && num_skips == 4; }
  EncoderConfig effective_encoder() const;
  void validate() const;

  KeyValues to_key_values() const;
  static ModelConfig from_key_values(const KeyValues& kv);
  bool operator==(const ModelConfig& other) const { return to_key_values() == other.to_key_values(); }
};

struct ConvBnRelu {
  nn::Conv2d conv;
  nn::BatchNorm bn;

  static ConvBnRelu make(int c_in, int c_out, int kernel, nn::Initializer& init);
  Tensor forward(const Tensor& x, nn::Mode mode) const;
  void collect(nn::TensorList& out, const std::string& prefix) const;
};

/// x2 bilinear upsample, optional skip concat, then two conv-BN-ReLU.
struct UpBlock {
  ConvBnRelu first, second;
  int skip_channels = 0;

  static UpBlock make(int c_in, int skip_channels, int c_out, nn::Initializer& init);
  Tensor forward(const Tensor& x, const Tensor& skip, nn::Mode mode) const;
  void collect(nn::TensorList& out, const std::string& prefix) const;
};

class Decoder {
 public:
  static Decoder make(const ModelConfig& config, nn::Initializer& init);
  Tensor forward(const EncoderOutput& enc, nn::Mode mode) const;
  void collect(nn::TensorList& out, const std::string& prefix) const;

 private:
  int num_skips_ = 4;
  std::optional<ConvBnRelu> projection_;  // stem-only 1/16 input
  std::optional<ConvBnRelu> entry_;
  std::array<UpBlock, 4> blocks_;
  nn::Conv2d head_;
};

class Model {
 public:
  /// Deterministic in config.seed.
  static Model build(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Encoder& encoder() const { return encoder_; }

  /// x [n, in_c, h, w] -> logits [n, K, h, w].
  Tensor forward(const Tensor& x, nn::Mode mode) const;

  /// Every parameter and buffer, in a stable order.
  nn::TensorList named_tensors() const;

 private:
  ModelConfig config_;
  Encoder encoder_;
  Decoder decoder_;
};

inline Model build_model(const ModelConfig& config) { return Model::build(config); }

}  // namespace levit::model
