#include "levit_unet/model.hpp"

#include <charconv>
#include <map>
#include <sstream>

#include "levit_unet/errors.hpp"
#include "levit_unet/ops.hpp"

namespace levit::model {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

template <std::size_t N>
std::string join(const std::array<int, N>& v) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

long long parse_int(const std::string& key, const std::string& text) {
  long long v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || p != text.data() + text.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + text + "'");
}

template <std::size_t N>
std::array<int, N> parse_list(const std::string& key, const std::string& text) {
  std::vector<std::string> items;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) items.push_back(item);
  if (items.size() != N) {
    throw ConfigError("config key '" + key + "': expected " + std::to_string(N) + " comma-separated integers");
  }
  std::array<int, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = static_cast<int>(parse_int(key, items[i]));
  return out;
}

}  // namespace

// ---- config ---------------------------------------------------------------------------

ModelConfig ModelConfig::for_variant(const std::string& variant, int num_classes, int in_channels, int image_size) {
  ModelConfig c;
  c.variant = variant;
  c.num_classes = num_classes;
  c.encoder = variant_encoder(variant, in_channels, image_size);
  if (variant == "384") {
    c.entry_width = 192;
    c.decoder_widths = {768, 256, 64, 64};
  }
  return c;
}

EncoderConfig ModelConfig::effective_encoder() const {
  EncoderConfig e = encoder;
  e.transformer = encoder.transformer && has_transformer();
  return e;
}

void ModelConfig::validate() const {
  require(num_classes >= 2, "num_classes must be >= 2, got " + std::to_string(num_classes));
  require(num_skips >= 0 && num_skips <= 4, "num_skips must be in [0, 4], got " + std::to_string(num_skips));
  require(entry_width >= 0, "entry_width must be >= 0");
  for (int w : decoder_widths) require(w >= 1, "decoder widths must be positive");
  effective_encoder().validate();
}

KeyValues ModelConfig::to_key_values() const {
  KeyValues kv{
      {"variant", variant},
      {"num_classes", std::to_string(num_classes)},
      {"num_skips", std::to_string(num_skips)},
      {"conv_only", conv_only ? "true" : "false"},
      {"in_channels", std::to_string(encoder.in_channels)},
      {"image_size", std::to_string(encoder.image_size)},
      {"stem_widths", join(encoder.stem_widths)},
      {"transformer", encoder.transformer ? "true" : "false"},
  };
  for (int i = 0; i < 3; ++i) {
    const auto& s = encoder.stages[i];
    const std::string p = "stage" + std::to_string(i + 1) + ".";
    kv.emplace_back(p + "width", std::to_string(s.width));
    kv.emplace_back(p + "depth", std::to_string(s.depth));
    kv.emplace_back(p + "heads", std::to_string(s.heads));
    kv.emplace_back(p + "key_dim", std::to_string(s.key_dim));
    kv.emplace_back(p + "mlp_ratio", std::to_string(s.mlp_ratio));
    kv.emplace_back(p + "value_ratio", std::to_string(s.value_ratio));
  }
  kv.emplace_back("downsample_value_ratio", std::to_string(encoder.downsample_value_ratio));
  kv.emplace_back("downsample_mlp", encoder.downsample_mlp ? "true" : "false");
  kv.emplace_back("entry_width", std::to_string(entry_width));
  kv.emplace_back("decoder_widths", join(decoder_widths));
  kv.emplace_back("seed", std::to_string(seed));
  return kv;
}

ModelConfig ModelConfig::from_key_values(const KeyValues& kv) {
  std::map<std::string, std::string> m(kv.begin(), kv.end());
  ModelConfig ref;
  const KeyValues expected = ref.to_key_values();
  for (const auto& [k, v] : kv) {
    bool known = false;
    for (const auto& e : expected) known = known || e.first == k;
    require(known, "unknown model config key '" + k + "'");
  }
  for (const auto& e : expected) require(m.count(e.first) == 1, "missing model config key '" + e.first + "'");

  ModelConfig c;
  auto i = [&](const std::string& k) { return static_cast<int>(parse_int(k, m.at(k))); };
  c.variant = m.at("variant");
  c.num_classes = i("num_classes");
  c.num_skips = i("num_skips");
  c.conv_only = parse_bool("conv_only", m.at("conv_only"));
  c.encoder.in_channels = i("in_channels");
  c.encoder.image_size = i("image_size");
  c.encoder.stem_widths = parse_list<4>("stem_widths", m.at("stem_widths"));
  c.encoder.transformer = parse_bool("transformer", m.at("transformer"));
  for (int s = 0; s < 3; ++s) {
    const std::string p = "stage" + std::to_string(s + 1) + ".";
    auto& st = c.encoder.stages[s];
    st.width = i(p + "width");
    st.depth = i(p + "depth");
    st.heads = i(p + "heads");
    st.key_dim = i(p + "key_dim");
    st.mlp_ratio = i(p + "mlp_ratio");
    st.value_ratio = i(p + "value_ratio");
  }
  c.encoder.downsample_value_ratio = i("downsample_value_ratio");
  c.encoder.downsample_mlp = parse_bool("downsample_mlp", m.at("downsample_mlp"));
  c.entry_width = i("entry_width");
  c.decoder_widths = parse_list<4>("decoder_widths", m.at("decoder_widths"));
  c.seed = static_cast<std::uint64_t>(parse_int("seed", m.at("seed")));
  return c;
}

// ---- decoder --------------------------------------------------------------------------

ConvBnRelu ConvBnRelu::make(int c_in, int c_out, int kernel, nn::Initializer& init) {
  return {nn::Conv2d::make(c_in, c_out, kernel, 1, kernel / 2, false, init), nn::BatchNorm::make(c_out)};
}

Tensor ConvBnRelu::forward(const Tensor& x, nn::Mode mode) const {
  return ops::relu(bn.forward(conv.forward(x), mode));
}

void ConvBnRelu::collect(nn::TensorList& out, const std::string& prefix) const {
  conv.collect(out, prefix + ".conv");
  bn.collect(out, prefix + ".bn");
}

UpBlock UpBlock::make(int c_in, int skip_channels, int c_out, nn::Initializer& init) {
  UpBlock b;
  b.skip_channels = skip_channels;
  b.first = ConvBnRelu::make(c_in + skip_channels, c_out, 3, init);
  b.second = ConvBnRelu::make(c_out, c_out, 3, init);
  return b;
}

Tensor UpBlock::forward(const Tensor& x, const Tensor& skip, nn::Mode mode) const {
  Tensor up = ops::bilinear_resize(x, x.dim(2) * 2, x.dim(3) * 2);
  if (skip_channels > 0) up = ops::concat({up, skip}, 1);
  return second.forward(first.forward(up, mode), mode);
}

void UpBlock::collect(nn::TensorList& out, const std::string& prefix) const {
  first.collect(out, prefix + ".conv1");
  second.collect(out, prefix + ".conv2");
}

Decoder Decoder::make(const ModelConfig& config, nn::Initializer& init) {
  Decoder d;
  d.num_skips_ = config.num_skips;
  const EncoderConfig enc = config.effective_encoder();
  const auto& sw = enc.stem_widths;
  int c = enc.fused_channels();
  if (config.num_skips < 4) {
    d.projection_ = ConvBnRelu::make(sw[3], sw[3], 1, init);
    c = sw[3];
  }
  if (config.entry_width > 0) {
    d.entry_ = ConvBnRelu::make(c, config.entry_width, 3, init);
    c = config.entry_width;
  }
  // block i lands at 1/8, 1/4, 1/2, 1/1
  const std::array<int, 4> skip_width{config.num_skips >= 3 ? sw[2] : 0, config.num_skips >= 2 ? sw[1] : 0,
                                      config.num_skips >= 1 ? sw[0] : 0, 0};
  for (int i = 0; i < 4; ++i) {
    d.blocks_[i] = UpBlock::make(c, skip_width[i], config.decoder_widths[i], init);
    c = config.decoder_widths[i];
  }
  d.head_ = nn::Conv2d::make(c, config.num_classes, 1, 1, 0, true, init);
  return d;
}

Tensor Decoder::forward(const EncoderOutput& enc, nn::Mode mode) const {
  Tensor x = projection_ ? projection_->forward(enc.stem_sixteenth, mode) : enc.fused_sixteenth;
  if (entry_) x = entry_->forward(x, mode);
  const std::array<const Tensor*, 4> skips{&enc.skip_eighth, &enc.skip_quarter, &enc.skip_half, nullptr};
  for (int i = 0; i < 4; ++i) {
    const Tensor none;
    const Tensor& skip = skips[i] ? *skips[i] : none;
    if (blocks_[i].skip_channels > 0) {
      require(skip.defined() && skip.dim(1) == blocks_[i].skip_channels && skip.dim(2) == x.dim(2) * 2 &&
                  skip.dim(3) == x.dim(3) * 2,
              "decoder up block " + std::to_string(i + 1) + ": skip " + shape_str(skip.shape()) +
                  " does not fit input " + shape_str(x.shape()));
    }
    x = blocks_[i].forward(x, skip, mode);
  }
  return head_.forward(x);
}

void Decoder::collect(nn::TensorList& out, const std::string& prefix) const {
  if (projection_) projection_->collect(out, prefix + ".projection");
  if (entry_) entry_->collect(out, prefix + ".entry");
  for (int i = 0; i < 4; ++i) blocks_[i].collect(out, prefix + ".up" + std::to_string(i + 1));
  head_.collect(out, prefix + ".head");
}

// ---- model ----------------------------------------------------------------------------

Model Model::build(const ModelConfig& config) {
  config.validate();
  Model m;
  m.config_ = config;
  nn::Initializer init(config.seed);
  m.encoder_ = Encoder::make(config.effective_encoder(), init);
  m.decoder_ = Decoder::make(config, init);
  return m;
}

Tensor Model::forward(const Tensor& x, nn::Mode mode) const {
  return decoder_.forward(encoder_.forward(x, mode), mode);
}

nn::TensorList Model::named_tensors() const {
  nn::TensorList out;
  encoder_.collect(out, "encoder");
  decoder_.collect(out, "decoder");
  return out;
}

}  // namespace levit::model
