#include "levit_unet/profiler.hpp"

#include <algorithm>
#include <chrono>
#include <fmt/format.h>

#include "levit_unet/ops.hpp"
#include "levit_unet/parallel.hpp"

namespace levit::profile {

namespace {

void add(std::vector<ModuleCount>& rows, const std::string& module, std::uint64_t v) {
  if (!rows.empty() && rows.back().module == module) {
    rows.back().value += v;
  } else {
    rows.push_back({module, v});
  }
}

std::uint64_t u(long long v) { return static_cast<std::uint64_t>(v); }

}  // namespace

ParamCount count_params(const model::Model& model) {
  ParamCount pc;
  for (const auto& t : model.named_tensors()) {
    if (!t.trainable) continue;
    const auto first = t.name.find('.');
    const auto second = t.name.find('.', first + 1);
    add(pc.by_module, t.name.substr(0, second), t.tensor.numel());
    pc.total += t.tensor.numel();
  }
  return pc;
}

MacEstimate estimate_macs(const model::ModelConfig& config, int h, int w) {
  MacEstimate est;
  const model::EncoderConfig enc = config.effective_encoder();
  long long rh = h, rw = w;
  int c_in = enc.in_channels;
  for (int i = 0; i < 4; ++i) {
    rh = (rh + 2 - 3) / 2 + 1;
    rw = (rw + 2 - 3) / 2 + 1;
    add(est.by_module, "encoder.stem", u(rh * rw * enc.stem_widths[i] * c_in * 9));
    c_in = enc.stem_widths[i];
  }
  const long long h16 = rh, w16 = rw;

  auto mlp = [](long long n, long long c, long long r) { return u(2 * n * c * r * c); };
  auto attention = [](long long nq, long long nk, long long c_in, long long c_out, long long heads, long long d,
                      long long dv) {
    return u(nq * c_in * heads * d + nk * c_in * heads * d + nk * c_in * heads * dv + nq * heads * dv * c_out +
             heads * nq * nk * (d + dv));
  };
  if (enc.transformer) {
    long long gh = h16, gw = w16;
    for (int s = 0; s < 3; ++s) {
      const auto& st = enc.stages[s];
      const long long n = gh * gw;
      const std::string name = "encoder.stage" + std::to_string(s + 1);
      for (int b = 0; b < st.depth; ++b) {
        add(est.by_module, name, mlp(n, st.width, st.mlp_ratio));
        add(est.by_module, name,
            attention(n, n, st.width, st.width, st.heads, st.key_dim, st.value_ratio * st.key_dim));
      }
      if (s < 2) {
        const auto& nx = enc.stages[s + 1];
        const long long qh = model::half_ceil(static_cast<int>(gh)), qw = model::half_ceil(static_cast<int>(gw));
        const long long heads = st.width / st.key_dim;
        const std::string dn = "encoder.down" + std::to_string(s + 1);
        add(est.by_module, dn,
            attention(qh * qw, n, st.width, nx.width, heads, st.key_dim, enc.downsample_value_ratio * st.key_dim));
        if (enc.downsample_mlp) add(est.by_module, dn, mlp(qh * qw, nx.width, nx.mlp_ratio));
        gh = qh;
        gw = qw;
      }
    }
  }

  long long c = enc.fused_channels();
  if (config.num_skips < 4) {
    add(est.by_module, "decoder.projection", u(h16 * w16 * enc.stem_widths[3] * enc.stem_widths[3]));
    c = enc.stem_widths[3];
  }
  if (config.entry_width > 0) {
    add(est.by_module, "decoder.entry", u(h16 * w16 * config.entry_width * c * 9));
    c = config.entry_width;
  }
  const int skips[4] = {config.num_skips >= 3 ? enc.stem_widths[2] : 0, config.num_skips >= 2 ? enc.stem_widths[1] : 0,
                        config.num_skips >= 1 ? enc.stem_widths[0] : 0, 0};
  rh = h16;
  rw = w16;
  for (int i = 0; i < 4; ++i) {
    rh *= 2;
    rw *= 2;
    const long long wi = config.decoder_widths[i];
    add(est.by_module, "decoder.up" + std::to_string(i + 1), u(rh * rw * wi * 9 * (c + skips[i] + wi)));
    c = wi;
  }
  add(est.by_module, "decoder.head", u(rh * rw * config.num_classes * c));
  for (const auto& m : est.by_module) est.total += m.value;
  return est;
}

std::uint64_t traced_macs(const model::Model& model, int h, int w) {
  NoGradGuard no_grad;
  ops::MacCounter counter;
  model.forward(Tensor({1, model.config().encoder.in_channels, h, w}, 0.5f), nn::Mode::eval);
  return counter.total();
}

FpsResult measure_fps(const model::Model& model, int size, int batch, int warmup, int iters) {
  NoGradGuard no_grad;
  FpsResult r;
  r.batch = batch;
  r.size = size;
  r.warmup = warmup;
  r.iters = iters;
  r.threads = max_threads();
  const Tensor x({batch, model.config().encoder.in_channels, size, size}, 0.5f);
  for (int i = 0; i < warmup; ++i) model.forward(x, nn::Mode::eval);
  for (int i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model.forward(x, nn::Mode::eval);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    r.per_iter_fps.push_back(batch / dt.count());
  }
  if (!r.per_iter_fps.empty()) {
    std::vector<double> s = r.per_iter_fps;
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    r.fps = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
  }
  return r;
}

std::string format_profile(const std::vector<ProfileRow>& rows, const std::string& hardware_note) {
  const bool multi = std::any_of(rows.begin(), rows.end(), [](const ProfileRow& r) { return r.fps_multi.has_value(); });
  std::string out = fmt::format("{:<10} {:<9} {:>11} {:>10} {:>9}", "variant", "conv_only", "params(M)", "FLOPs(G)",
                                "FPS(1t)");
  if (multi) out += fmt::format(" {:>9}", "FPS(mt)");
  out += "\n";
  for (const auto& r : rows) {
    out += fmt::format("{:<10} {:<9} {:>11.2f} {:>10.2f} {:>9.2f}", r.variant, r.conv_only ? "yes" : "no",
                       r.params / 1e6, r.macs / 1e9, r.fps.fps);
    if (multi) out += r.fps_multi ? fmt::format(" {:>9.2f}", r.fps_multi->fps) : fmt::format(" {:>9}", "-");
    out += "\n";
  }
  out += "# " + hardware_note + "\n";
  for (const auto& r : rows) {
    for (const FpsResult* f : {&r.fps, r.fps_multi ? &*r.fps_multi : nullptr}) {
      if (!f) continue;
      out += fmt::format(
          "profile variant={} conv_only={} params={} macs={} flops_g={:.4f} fps={:.4f} batch={} size={} warmup={} "
          "iters={} threads={}\n",
          r.variant, r.conv_only ? "true" : "false", r.params, r.macs, r.macs / 1e9, f->fps, f->batch, f->size,
          f->warmup, f->iters, f->threads);
    }
  }
  return out;
}

}  // namespace levit::profile
