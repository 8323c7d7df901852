#include "levit_unet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fmt/format.h>

#include "levit_unet/errors.hpp"

namespace levit::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) on one line of
// squared distances; sample q sits at coordinate q * step.
void edt_line(double* f, int n, std::size_t stride, double step, std::vector<double>& buf, std::vector<int>& v,
              std::vector<double>& z) {
  buf.resize(n);
  v.resize(n);
  z.resize(n + 1);
  for (int i = 0; i < n; ++i) buf[i] = f[static_cast<std::size_t>(i) * stride];
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (buf[q] == kInf) continue;
    const double xq = q * step;
    while (k >= 0) {
      const double xv = v[k] * step;
      const double s = ((buf[q] + xq * xq) - (buf[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -kInf : ((buf[q] + xq * xq) - (buf[v[k - 1]] + (v[k - 1] * step) * (v[k - 1] * step))) /
                                 (2.0 * (xq - v[k - 1] * step));
    z[k + 1] = kInf;
  }
  if (k < 0) return;  // no finite sample on this line
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = q * step;
    while (z[j + 1] < xq) ++j;
    const double d = xq - v[j] * step;
    f[static_cast<std::size_t>(q) * stride] = d * d + buf[v[j]];
  }
}

std::vector<std::uint8_t> class_mask(const LabelVolume& v, int cls) {
  std::vector<std::uint8_t> m(v.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = v.labels[i] == cls ? 1 : 0;
  return m;
}

}  // namespace

LabelVolume stack_slices(std::vector<IndexedSlice> slices, std::array<double, 3> spacing) {
  if (slices.empty()) throw InputError("cannot stack an empty slice list");
  std::sort(slices.begin(), slices.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  LabelVolume vol;
  vol.dims = {static_cast<int>(slices.size()), slices[0].h, slices[0].w};
  vol.spacing = spacing;
  vol.labels.reserve(vol.size());
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const auto& s = slices[i];
    if (s.index != static_cast<int>(i)) {
      throw InputError(s.index < static_cast<int>(i) ? "duplicate slice index " + std::to_string(s.index)
                                                     : "missing slice index " + std::to_string(i));
    }
    if (s.h != vol.dims[1] || s.w != vol.dims[2] || s.labels.size() != static_cast<std::size_t>(s.h) * s.w) {
      throw InputError("slice " + std::to_string(s.index) + " is " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                       ", expected " + std::to_string(vol.dims[1]) + "x" + std::to_string(vol.dims[2]));
    }
    vol.labels.insert(vol.labels.end(), s.labels.begin(), s.labels.end());
  }
  return vol;
}

double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int cls) {
  if (pred.size() != gt.size()) {
    throw InputError("dsc: prediction has " + std::to_string(pred.size()) + " voxels, ground truth " +
                     std::to_string(gt.size()));
  }
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool pa = pred[i] == cls, gb = gt[i] == cls;
    a += pa;
    b += gb;
    both += pa && gb;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

const char* hd_mode_name(HdMode mode) { return mode == HdMode::max ? "max" : "p95"; }

HdMode parse_hd_mode(const std::string& text) {
  if (text == "max") return HdMode::max;
  if (text == "p95") return HdMode::p95;
  throw ConfigError("hd mode must be 'max' or 'p95', got '" + text + "'");
}

std::vector<double> distance_transform(std::span<const std::uint8_t> mask, std::array<int, 3> dims,
                                       std::array<double, 3> spacing) {
  const std::size_t total = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (mask.size() != total) throw InputError("distance_transform: mask size does not match dims");
  std::vector<double> f(total);
  for (std::size_t i = 0; i < total; ++i) f[i] = mask[i] ? 0.0 : kInf;
  std::vector<double> buf, z;
  std::vector<int> v;
  const int D = dims[0], H = dims[1], W = dims[2];
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int d = 0; d < D; ++d) {
    for (int y = 0; y < H; ++y) edt_line(&f[d * plane + static_cast<std::size_t>(y) * W], W, 1, spacing[2], buf, v, z);
    for (int x = 0; x < W; ++x) edt_line(&f[d * plane + x], H, W, spacing[1], buf, v, z);
  }
  if (D > 1) {
    for (std::size_t p = 0; p < plane; ++p) edt_line(&f[p], D, plane, spacing[0], buf, v, z);
  }
  for (double& x : f) x = std::sqrt(x);
  return f;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InputError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

HdResult hausdorff(const LabelVolume& pred, const LabelVolume& gt, int cls, HdMode mode) {
  if (pred.dims != gt.dims) throw InputError("hausdorff: volume shapes differ");
  if (pred.spacing != gt.spacing) throw InputError("hausdorff: volume spacings differ");
  const auto a = class_mask(pred, cls), b = class_mask(gt, cls);
  const bool a_any = std::find(a.begin(), a.end(), 1) != a.end();
  const bool b_any = std::find(b.begin(), b.end(), 1) != b.end();
  if (!a_any && !b_any) return {0.0, false};
  if (a_any != b_any) {
    double diag = 0.0;
    for (int i = 0; i < 3; ++i) diag += std::pow(pred.dims[i] * pred.spacing[i], 2);
    return {std::sqrt(diag), true};
  }
  const auto to_b = distance_transform(b, gt.dims, gt.spacing);
  const auto to_a = distance_transform(a, pred.dims, pred.spacing);
  std::vector<double> ab, ba;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]) ab.push_back(to_b[i]);
    if (b[i]) ba.push_back(to_a[i]);
  }
  if (mode == HdMode::max) {
    return {std::max(*std::max_element(ab.begin(), ab.end()), *std::max_element(ba.begin(), ba.end())), false};
  }
  return {std::max(percentile(std::move(ab), 95.0), percentile(std::move(ba), 95.0)), false};
}

CaseMetrics evaluate_volume(const std::string& case_id, const LabelVolume& pred, const LabelVolume& gt,
                            int num_classes, HdMode mode) {
  CaseMetrics cm;
  cm.case_id = case_id;
  for (int c = 1; c < num_classes; ++c) {
    const HdResult hd = hausdorff(pred, gt, c, mode);
    cm.classes.push_back({c, dsc(pred.labels, gt.labels, c), hd.value, hd.sentinel});
  }
  return cm;
}

MetricReport summarize(std::vector<CaseMetrics> cases, int num_classes, HdMode mode) {
  MetricReport r;
  r.mode = mode;
  r.num_classes = num_classes;
  r.cases = std::move(cases);
  const int fg = num_classes - 1;
  r.class_dsc.assign(fg, 0.0);
  r.class_hd.assign(fg, 0.0);
  std::vector<int> hd_count(fg, 0);
  for (const auto& cm : r.cases) {
    for (const auto& m : cm.classes) {
      r.class_dsc[m.cls - 1] += m.dsc;
      if (m.hd_sentinel) {
        ++r.hd_sentinels;
      } else {
        r.class_hd[m.cls - 1] += m.hd;
        ++hd_count[m.cls - 1];
      }
    }
  }
  int hd_classes = 0;
  for (int c = 0; c < fg; ++c) {
    if (!r.cases.empty()) r.class_dsc[c] /= static_cast<double>(r.cases.size());
    r.mean_dsc += r.class_dsc[c];
    if (hd_count[c] > 0) {
      r.class_hd[c] /= hd_count[c];
      r.mean_hd += r.class_hd[c];
      ++hd_classes;
    } else {
      r.class_hd[c] = std::nan("");
    }
  }
  if (fg > 0) r.mean_dsc /= fg;
  r.mean_hd = hd_classes > 0 ? r.mean_hd / hd_classes : std::nan("");
  return r;
}

std::string MetricReport::table() const {
  std::string out = fmt::format("{:<16}", "case");
  for (int c = 1; c < num_classes; ++c) out += fmt::format(" {:>9} {:>10}", fmt::format("dsc[{}]", c), fmt::format("hd{}[{}]", hd_mode_name(mode), c));
  out += "\n";
  auto row = [&](const std::string& name, auto dsc_of, auto hd_of) {
    std::string line = fmt::format("{:<16}", name);
    for (int c = 1; c < num_classes; ++c) line += fmt::format(" {:>9.4f} {:>10}", dsc_of(c), hd_of(c));
    return line + "\n";
  };
  for (const auto& cm : cases) {
    out += row(
        cm.case_id, [&](int c) { return cm.classes[c - 1].dsc; },
        [&](int c) {
          const auto& m = cm.classes[c - 1];
          return m.hd_sentinel ? fmt::format("{:.2f}*", m.hd) : fmt::format("{:.2f}", m.hd);
        });
  }
  out += row(
      "mean", [&](int c) { return class_dsc[c - 1]; }, [&](int c) { return fmt::format("{:.2f}", class_hd[c - 1]); });
  out += fmt::format("mean foreground DSC {:.4f}  mean HD ({}) {:.2f} mm", mean_dsc, hd_mode_name(mode), mean_hd);
  if (hd_sentinels > 0) out += fmt::format("  [{} empty-vs-nonempty HD marked * and left out of means]", hd_sentinels);
  return out + "\n";
}

std::string MetricReport::records() const {
  std::string out;
  for (const auto& cm : cases) {
    for (const auto& m : cm.classes) {
      out += fmt::format("metric case={} class={} dsc={:.6f} hd={:.6f} hd_mode={} hd_sentinel={}\n", cm.case_id, m.cls,
                         m.dsc, m.hd, hd_mode_name(mode), m.hd_sentinel ? "true" : "false");
    }
  }
  out += fmt::format("summary cases={} mean_dsc={:.6f} mean_hd={:.6f} hd_mode={} hd_sentinels={}\n", cases.size(),
                     mean_dsc, mean_hd, hd_mode_name(mode), hd_sentinels);
  return out;
}

}  // namespace levit::metrics
