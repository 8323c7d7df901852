#include "levit_unet/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "levit_unet/errors.hpp"
#include "levit_unet/ops.hpp"

namespace levit::model {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

int query_stride(int h, int w, int h_q, int w_q) {
  if (h_q == h && w_q == w) return 1;
  require(h_q == half_ceil(h) && w_q == half_ceil(w),
          "query grid " + std::to_string(h_q) + "x" + std::to_string(w_q) + " is neither the key grid " +
              std::to_string(h) + "x" + std::to_string(w) + " nor its stride-2 subsampling");
  return 2;
}

}  // namespace

int EncoderConfig::fused_channels() const {
  int c = stem_widths[3];
  if (transformer) {
    for (const auto& s : stages) c += s.width;
  }
  return c;
}

void EncoderConfig::validate() const {
  require(in_channels >= 1, "in_channels must be >= 1");
  for (int w : stem_widths) require(w >= 1, "stem widths must be positive");
  require(image_size >= 16 && image_size % 16 == 0, "image_size must be a positive multiple of 16");
  if (!transformer) return;
  require(stages[0].width == stem_widths[3], "first stage width must equal the last stem width");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const std::string tag = "stage " + std::to_string(i + 1);
    require(s.width >= 1 && s.depth >= 1 && s.heads >= 1 && s.key_dim >= 1 && s.mlp_ratio >= 1 &&
                s.value_ratio >= 1,
            tag + ": width, depth, heads, key_dim, mlp_ratio and value_ratio must be positive");
  }
  for (std::size_t i = 0; i + 1 < stages.size(); ++i) {
    require(stages[i].width % stages[i].key_dim == 0,
            "stage " + std::to_string(i + 1) + ": width must be divisible by key_dim (downsample heads)");
  }
  require(downsample_value_ratio >= 1, "downsample_value_ratio must be positive");
}

EncoderConfig variant_encoder(const std::string& variant, int in_channels, int image_size) {
  EncoderConfig c;
  c.in_channels = in_channels;
  c.image_size = image_size;
  std::array<int, 3> widths{}, depths{}, heads{};
  int key_dim = 16;
  if (variant == "128s") {
    widths = {128, 256, 384};
    depths = {2, 3, 4};
    heads = {4, 6, 8};
  } else if (variant == "192") {
    widths = {192, 288, 384};
    depths = {4, 4, 4};
    heads = {3, 5, 6};
    key_dim = 32;
  } else if (variant == "384") {
    widths = {384, 512, 768};
    depths = {4, 4, 4};
    heads = {6, 9, 12};
    key_dim = 32;
  } else {
    throw ConfigError("unknown variant '" + variant + "' (expected 128s, 192 or 384)");
  }
  const int C = widths[0];
  c.stem_widths = {C / 8, C / 4, C / 2, C};
  for (int i = 0; i < 3; ++i) c.stages[i] = StageConfig{widths[i], depths[i], heads[i], key_dim, 2, 2};
  return c;
}

// ---- offsets --------------------------------------------------------------------------

OffsetIndex build_offset_index(int h, int w, int h_q, int w_q) {
  require(h >= 1 && w >= 1, "offset index needs a non-empty key grid");
  const int stride = query_stride(h, w, h_q, w_q);
  OffsetIndex out;
  out.query_count = h_q * w_q;
  out.key_count = h * w;
  out.index.resize(static_cast<std::size_t>(out.query_count) * out.key_count);
  // displacements span [-(h-1), stride*(h_q-1)] per axis
  const int r_lo = -(h - 1), c_lo = -(w - 1);
  const int r_span = stride * (h_q - 1) - r_lo + 1, c_span = stride * (w_q - 1) - c_lo + 1;
  std::vector<int> seen(static_cast<std::size_t>(r_span) * c_span, -1);
  for (int qi = 0; qi < h_q; ++qi) {
    for (int qj = 0; qj < w_q; ++qj) {
      const int q = qi * w_q + qj;
      for (int ki = 0; ki < h; ++ki) {
        for (int kj = 0; kj < w; ++kj) {
          const int dr = qi * stride - ki, dc = qj * stride - kj;
          int& slot = seen[static_cast<std::size_t>(dr - r_lo) * c_span + (dc - c_lo)];
          if (slot < 0) {
            slot = out.n_offsets++;
            out.displacements.emplace_back(dr, dc);
          }
          out.index[static_cast<std::size_t>(q) * out.key_count + ki * w + kj] = slot;
        }
      }
    }
  }
  return out;
}

// ---- attention ------------------------------------------------------------------------

Attention Attention::make(int c_in, int c_out, int heads, int key_dim, int value_dim, int stride, int design_h,
                          int design_w, nn::Initializer& init) {
  require(stride == 1 || stride == 2, "attention stride must be 1 or 2");
  Attention a;
  a.heads = heads;
  a.key_dim = key_dim;
  a.value_dim = value_dim;
  a.stride = stride;
  a.q = nn::Linear::make(c_in, heads * key_dim, true, init);
  a.k = nn::Linear::make(c_in, heads * key_dim, true, init);
  a.v = nn::Linear::make(c_in, heads * value_dim, true, init);
  a.proj = nn::Linear::make(heads * value_dim, c_out, true, init);

  const int hq = stride == 1 ? design_h : half_ceil(design_h);
  const int wq = stride == 1 ? design_w : half_ceil(design_w);
  const OffsetIndex design = build_offset_index(design_h, design_w, hq, wq);
  a.slots = design.displacements;
  a.bias_table = Tensor::parameter({heads, design.n_offsets},
                                   std::vector<float>(static_cast<std::size_t>(heads) * design.n_offsets, 0.0f));

  a.dr_min_ = a.dc_min_ = 0;
  a.dr_max_ = a.dc_max_ = 0;
  for (auto [dr, dc] : a.slots) {
    a.dr_min_ = std::min(a.dr_min_, dr);
    a.dr_max_ = std::max(a.dr_max_, dr);
    a.dc_min_ = std::min(a.dc_min_, dc);
    a.dc_max_ = std::max(a.dc_max_, dc);
  }
  const int cols = a.dc_max_ - a.dc_min_ + 1;
  a.slot_lookup_.assign(static_cast<std::size_t>(a.dr_max_ - a.dr_min_ + 1) * cols, -1);
  for (std::size_t s = 0; s < a.slots.size(); ++s) {
    const auto [dr, dc] = a.slots[s];
    a.slot_lookup_[static_cast<std::size_t>(dr - a.dr_min_) * cols + (dc - a.dc_min_)] = static_cast<int>(s);
  }
  return a;
}

std::vector<int> Attention::index_for(int h, int w) const {
  const int hq = stride == 1 ? h : half_ceil(h);
  const int wq = stride == 1 ? w : half_ceil(w);
  const int cols = dc_max_ - dc_min_ + 1;
  std::vector<int> index(static_cast<std::size_t>(hq) * wq * h * w);
  std::size_t pos = 0;
  for (int qi = 0; qi < hq; ++qi) {
    for (int qj = 0; qj < wq; ++qj) {
      for (int ki = 0; ki < h; ++ki) {
        for (int kj = 0; kj < w; ++kj) {
          const int dr = qi * stride - ki, dc = qj * stride - kj;
          int slot = -1;
          if (dr >= dr_min_ && dr <= dr_max_ && dc >= dc_min_ && dc <= dc_max_) {
            slot = slot_lookup_[static_cast<std::size_t>(dr - dr_min_) * cols + (dc - dc_min_)];
          }
          if (slot < 0) {
            throw ConfigError("token grid " + std::to_string(h) + "x" + std::to_string(w) +
                              " exceeds the attention bias table (built for a smaller image_size)");
          }
          index[pos++] = slot;
        }
      }
    }
  }
  return index;
}

Tensor Attention::forward(const Tensor& tokens, int h, int w, Tensor* weights) const {
  require(tokens.rank() == 3 && tokens.dim(1) == h * w,
          "attention: token count " + (tokens.rank() == 3 ? std::to_string(tokens.dim(1)) : std::string("?")) +
              " does not match the " + std::to_string(h) + "x" + std::to_string(w) + " grid");
  const Tensor xq = stride == 1 ? tokens : ops::subsample_tokens(tokens, h, w);
  const Tensor qh = ops::split_heads(q.forward(xq), heads);
  const Tensor kh = ops::split_heads(k.forward(tokens), heads);
  const Tensor vh = ops::split_heads(v.forward(tokens), heads);
  Tensor scores = ops::scale(ops::batched_matmul(qh, kh, true), 1.0f / std::sqrt(static_cast<float>(key_dim)));
  const std::vector<int> index = index_for(h, w);
  scores = ops::add_attention_bias(scores, bias_table, index);
  const Tensor attn = ops::softmax(scores, -1);
  if (weights) *weights = attn;
  const Tensor mixed = ops::merge_heads(ops::batched_matmul(attn, vh, false), heads);
  return proj.forward(ops::hardswish(mixed));
}

void Attention::collect(nn::TensorList& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  proj.collect(out, prefix + ".proj");
  out.push_back({prefix + ".bias_table", bias_table, true});
}

// ---- blocks ---------------------------------------------------------------------------

MlpSublayer MlpSublayer::make(int width, int ratio, nn::Initializer& init) {
  MlpSublayer m;
  m.bn = nn::BatchNorm::make(width);
  m.expand = nn::Linear::make(width, width * ratio, true, init);
  m.contract = nn::Linear::make(width * ratio, width, true, init);
  return m;
}

Tensor MlpSublayer::forward(const Tensor& z, nn::Mode mode) const {
  const Tensor branch = contract.forward(ops::hardswish(expand.forward(bn.forward(z, mode))));
  return ops::add(branch, z);
}

void MlpSublayer::collect(nn::TensorList& out, const std::string& prefix) const {
  bn.collect(out, prefix + ".bn");
  expand.collect(out, prefix + ".expand");
  contract.collect(out, prefix + ".contract");
}

TransformerBlock TransformerBlock::make(const StageConfig& stage, int grid_h, int grid_w, nn::Initializer& init) {
  TransformerBlock b;
  b.mlp = MlpSublayer::make(stage.width, stage.mlp_ratio, init);
  b.attn_bn = nn::BatchNorm::make(stage.width);
  b.attn = Attention::make(stage.width, stage.width, stage.heads, stage.key_dim, stage.value_ratio * stage.key_dim, 1,
                           grid_h, grid_w, init);
  return b;
}

Tensor TransformerBlock::forward(const Tensor& z, int h, int w, nn::Mode mode) const {
  const Tensor zh = mlp.forward(z, mode);
  return ops::add(attn.forward(attn_bn.forward(zh, mode), h, w), zh);
}

void TransformerBlock::collect(nn::TensorList& out, const std::string& prefix) const {
  mlp.collect(out, prefix + ".mlp");
  attn_bn.collect(out, prefix + ".attn_bn");
  attn.collect(out, prefix + ".attn");
}

DownsampleBlock DownsampleBlock::make(const StageConfig& from, const StageConfig& to, int value_ratio, bool with_mlp,
                                      int grid_h, int grid_w, nn::Initializer& init) {
  DownsampleBlock d;
  const int heads = from.width / from.key_dim;
  d.bn = nn::BatchNorm::make(from.width);
  d.attn = Attention::make(from.width, to.width, heads, from.key_dim, value_ratio * from.key_dim, 2, grid_h, grid_w,
                           init);
  d.has_mlp = with_mlp;
  if (with_mlp) d.mlp = MlpSublayer::make(to.width, to.mlp_ratio, init);
  return d;
}

Tensor DownsampleBlock::forward(const Tensor& z, int h, int w, nn::Mode mode) const {
  Tensor y = attn.forward(bn.forward(z, mode), h, w);
  if (has_mlp) y = mlp.forward(y, mode);
  return y;
}

void DownsampleBlock::collect(nn::TensorList& out, const std::string& prefix) const {
  bn.collect(out, prefix + ".bn");
  attn.collect(out, prefix + ".attn");
  if (has_mlp) mlp.collect(out, prefix + ".mlp");
}

// ---- encoder --------------------------------------------------------------------------

Encoder Encoder::make(const EncoderConfig& config, nn::Initializer& init) {
  config.validate();
  Encoder e;
  e.config_ = config;
  int c_in = config.in_channels;
  for (int i = 0; i < 4; ++i) {
    e.stem_[i].conv = nn::Conv2d::make(c_in, config.stem_widths[i], 3, 2, 1, false, init);
    e.stem_[i].bn = nn::BatchNorm::make(config.stem_widths[i]);
    c_in = config.stem_widths[i];
  }
  if (!config.transformer) return e;

  int g = config.image_size / 16;
  for (int s = 0; s < 3; ++s) {
    std::vector<TransformerBlock> blocks;
    for (int b = 0; b < config.stages[s].depth; ++b) blocks.push_back(TransformerBlock::make(config.stages[s], g, g, init));
    e.stages_.push_back(std::move(blocks));
    if (s < 2) {
      e.downsamples_.push_back(DownsampleBlock::make(config.stages[s], config.stages[s + 1],
                                                     config.downsample_value_ratio, config.downsample_mlp, g, g, init));
      g = half_ceil(g);
    }
  }
  return e;
}

EncoderOutput Encoder::forward(const Tensor& x, nn::Mode mode) const {
  require(x.rank() == 4, "encoder input must be [n, c, h, w], got " + shape_str(x.shape()));
  require(x.dim(1) == config_.in_channels, "encoder input has " + std::to_string(x.dim(1)) +
                                               " channels, model expects " + std::to_string(config_.in_channels));
  require(x.dim(2) % 16 == 0 && x.dim(3) % 16 == 0,
          "input height and width must be divisible by 16, got " + shape_str(x.shape()));

  EncoderOutput out;
  Tensor s = x;
  std::array<Tensor, 4> feats;
  for (int i = 0; i < 4; ++i) {
    s = ops::hardswish(stem_[i].bn.forward(stem_[i].conv.forward(s), mode));
    feats[i] = s;
  }
  out.skip_half = feats[0];
  out.skip_quarter = feats[1];
  out.skip_eighth = feats[2];
  out.stem_sixteenth = feats[3];
  if (!config_.transformer) {
    out.fused_sixteenth = feats[3];
    return out;
  }

  const int h16 = feats[3].dim(2), w16 = feats[3].dim(3);
  int gh = h16, gw = w16;
  Tensor t = ops::map_to_tokens(feats[3]);
  std::vector<Tensor> parts{feats[3]};
  for (int si = 0; si < 3; ++si) {
    for (const auto& block : stages_[si]) t = block.forward(t, gh, gw, mode);
    out.stage_grids[si] = {gh, gw};
    Tensor map = ops::tokens_to_map(t, gh, gw);
    parts.push_back(si == 0 ? map : ops::bilinear_resize(map, h16, w16));
    if (si < 2) {
      t = downsamples_[si].forward(t, gh, gw, mode);
      gh = half_ceil(gh);
      gw = half_ceil(gw);
    }
  }
  out.fused_sixteenth = ops::concat(parts, 1);
  return out;
}

void Encoder::collect(nn::TensorList& out, const std::string& prefix) const {
  for (int i = 0; i < 4; ++i) {
    const std::string p = prefix + ".stem." + std::to_string(i);
    stem_[i].conv.collect(out, p + ".conv");
    stem_[i].bn.collect(out, p + ".bn");
  }
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (std::size_t b = 0; b < stages_[s].size(); ++b) {
      stages_[s][b].collect(out, prefix + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b));
    }
    if (s < downsamples_.size()) downsamples_[s].collect(out, prefix + ".down" + std::to_string(s + 1));
  }
}

}  // namespace levit::model
