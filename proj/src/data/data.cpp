#include "levit_unet/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <fmt/format.h>

#include "levit_unet/errors.hpp"
#include "levit_unet/parallel.hpp"

namespace levit::data {

static_assert(std::endian::native == std::endian::little, "tensor file I/O assumes a little-endian host");

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'L', 'V', 'T', 'R'};

void write_raw(const std::string& path, DType dtype, const std::vector<int>& dims, const void* payload,
               std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path + "' for writing");
  out.write(kMagic, 4);
  const auto code = static_cast<std::uint8_t>(dtype);
  out.write(reinterpret_cast<const char*>(&code), 1);
  const auto ndim = static_cast<std::uint32_t>(dims.size());
  out.write(reinterpret_cast<const char*>(&ndim), 4);
  for (int d : dims) {
    const auto v = static_cast<std::uint32_t>(d);
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!out) throw InputError("write to '" + path + "' failed");
}

std::size_t product(const std::vector<int>& dims) {
  std::size_t n = 1;
  for (int d : dims) n *= static_cast<std::size_t>(d);
  return n;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

int parse_int_field(const std::string& text, const std::string& where) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw FormatError(where + ": expected an integer, got '" + text + "'");
}

double parse_double_field(const std::string& text, const std::string& where) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw FormatError(where + ": expected a number, got '" + text + "'");
}

std::mt19937_64 seeded(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

}  // namespace

// ---- raw tensor files --------------------------------------------------------------------

std::size_t RawTensor::numel() const { return product(dims); }

void write_raw_f32(const std::string& path, const std::vector<int>& dims, std::span<const float> values) {
  if (product(dims) != values.size()) throw InputError("write_raw_f32: dims do not match value count");
  write_raw(path, DType::f32, dims, values.data(), values.size() * sizeof(float));
}

void write_raw_u8(const std::string& path, const std::vector<int>& dims, std::span<const std::uint8_t> values) {
  if (product(dims) != values.size()) throw InputError("write_raw_u8: dims do not match value count");
  write_raw(path, DType::u8, dims, values.data(), values.size());
}

RawTensor read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open tensor file '" + path + "'");
  const std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto fail = [&](std::size_t offset, const std::string& what) {
    throw FormatError(path + ": " + what + " at byte " + std::to_string(offset));
  };
  if (buf.size() < 9) fail(buf.size(), "file too short for header");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) fail(0, "bad magic (expected LVTR)");
  RawTensor t;
  const auto code = static_cast<std::uint8_t>(buf[4]);
  if (code > 1) fail(4, "unknown dtype code " + std::to_string(code));
  t.dtype = static_cast<DType>(code);
  std::uint32_t ndim;
  std::memcpy(&ndim, buf.data() + 5, 4);
  if (ndim == 0 || ndim > 8) fail(5, "unsupported ndim " + std::to_string(ndim));
  std::size_t pos = 9;
  if (buf.size() < pos + 4 * ndim) fail(buf.size(), "file too short for dims");
  for (std::uint32_t i = 0; i < ndim; ++i, pos += 4) {
    std::uint32_t d;
    std::memcpy(&d, buf.data() + pos, 4);
    if (d == 0 || d > (1u << 24)) fail(pos, "bad dimension " + std::to_string(d));
    t.dims.push_back(static_cast<int>(d));
  }
  const std::size_t elem = t.dtype == DType::f32 ? 4 : 1;
  const std::size_t want = t.numel() * elem;
  if (buf.size() - pos != want) {
    fail(pos, "payload is " + std::to_string(buf.size() - pos) + " bytes, dims require " + std::to_string(want));
  }
  if (t.dtype == DType::f32) {
    t.f32.resize(t.numel());
    std::memcpy(t.f32.data(), buf.data() + pos, want);
  } else {
    t.u8.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.end());
  }
  return t;
}

// ---- slices ------------------------------------------------------------------------------

SliceRecord load_slice(const std::string& img_path, const std::string& lbl_path, int num_classes) {
  const RawTensor img = read_raw(img_path);
  const RawTensor lbl = read_raw(lbl_path);
  if (img.dtype != DType::f32) throw FormatError(img_path + ": image must be f32 at byte 4");
  if (lbl.dtype != DType::u8) throw FormatError(lbl_path + ": label must be u8 at byte 4");
  if (img.dims.size() != 2 || lbl.dims != img.dims) {
    throw FormatError(img_path + ": image and label must both be [h, w] of equal size");
  }
  SliceRecord r;
  r.h = img.dims[0];
  r.w = img.dims[1];
  r.image = img.f32;
  for (float& v : r.image) v = std::isnan(v) ? 0.0f : std::clamp(v, 0.0f, 1.0f);
  r.label = lbl.u8;
  for (std::size_t i = 0; i < r.label.size(); ++i) {
    if (r.label[i] >= num_classes) {
      throw InputError(lbl_path + ": label value " + std::to_string(r.label[i]) + " at element " + std::to_string(i) +
                       " is not below K=" + std::to_string(num_classes));
    }
  }
  return r;
}

SliceRecord load_slice(const std::string& img_path, int num_classes) {
  const std::string suffix = "_img.lvtr";
  const std::string name = fs::path(img_path).filename().string();
  if (name.size() <= suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
    throw InputError("'" + img_path + "' is not named <case>_<idx>_img.lvtr");
  }
  const std::string stem = name.substr(0, name.size() - suffix.size());
  const auto us = stem.rfind('_');
  if (us == std::string::npos || us == 0) throw InputError("'" + img_path + "' is not named <case>_<idx>_img.lvtr");
  const std::string lbl_path = img_path.substr(0, img_path.size() - suffix.size()) + "_lbl.lvtr";
  SliceRecord r = load_slice(img_path, lbl_path, num_classes);
  r.case_id = stem.substr(0, us);
  try {
    r.slice_index = parse_int_field(stem.substr(us + 1), img_path);
  } catch (const FormatError& e) {
    throw InputError(e.what());
  }
  return r;
}

void save_slice(const SliceRecord& r, const std::string& img_path, const std::string& lbl_path) {
  write_raw_f32(img_path, {r.h, r.w}, r.image);
  write_raw_u8(lbl_path, {r.h, r.w}, r.label);
}

// ---- manifest ----------------------------------------------------------------------------

std::string CaseManifest::resolve(const std::string& path) const {
  const fs::path p(path);
  return p.is_absolute() || base_dir.empty() ? path : (fs::path(base_dir) / p).string();
}

std::vector<ManifestEntry> CaseManifest::split(const std::string& name) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : entries) {
    if (e.split == name) out.push_back(e);
  }
  return out;
}

std::vector<std::string> CaseManifest::case_ids(const std::string& name) const {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (e.split == name && seen.insert(e.case_id).second) ids.push_back(e.case_id);
  }
  return ids;
}

CaseManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest '" + path + "'");
  CaseManifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ":1: missing header line");
  bool have_k = false, have_spacing = false;
  for (const auto& field : split_tabs(line)) {
    const auto eq = field.find('=');
    const std::string key = field.substr(0, eq);
    const std::string value = eq == std::string::npos ? "" : field.substr(eq + 1);
    if (key == "K") {
      m.num_classes = parse_int_field(value, path + ":1: field K");
      have_k = true;
    } else if (key == "spacing") {
      std::stringstream ss(value);
      std::string part;
      int i = 0;
      while (std::getline(ss, part, ',')) {
        if (i >= 3) throw FormatError(path + ":1: field spacing: expected 3 values");
        m.spacing[i++] = parse_double_field(part, path + ":1: field spacing");
      }
      if (i != 3) throw FormatError(path + ":1: field spacing: expected 3 values");
      have_spacing = true;
    } else {
      throw FormatError(path + ":1: unknown header field '" + key + "'");
    }
  }
  if (!have_k || !have_spacing) throw FormatError(path + ":1: header needs K=<k> and spacing=<z>,<y>,<x>");
  if (m.num_classes < 2 || m.num_classes > 255) throw FormatError(path + ":1: field K must be in [2, 255]");
  for (double s : m.spacing) {
    if (!(s > 0.0)) throw FormatError(path + ":1: field spacing must be positive");
  }

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_no);
    const auto f = split_tabs(line);
    if (f.size() != 5) throw FormatError(where + ": expected 5 tab-separated fields, got " + std::to_string(f.size()));
    ManifestEntry e;
    e.split = f[0];
    if (e.split != "train" && e.split != "test") throw FormatError(where + ": field split must be train or test");
    e.case_id = f[1];
    if (e.case_id.empty()) throw FormatError(where + ": field case_id is empty");
    e.slice_index = parse_int_field(f[2], where + ": field slice_index");
    e.img_path = f[3];
    e.lbl_path = f[4];
    for (const auto* p : {&e.img_path, &e.lbl_path}) {
      if (!fs::exists(m.resolve(*p))) {
        throw InputError(where + ": field " + (p == &e.img_path ? "img_path" : "lbl_path") + ": file '" +
                         m.resolve(*p) + "' does not exist");
      }
    }
    m.entries.push_back(std::move(e));
  }

  std::map<std::pair<std::string, std::string>, std::vector<int>> per_case;
  for (const auto& e : m.entries) per_case[{e.split, e.case_id}].push_back(e.slice_index);
  for (auto& [key, idx] : per_case) {
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] != static_cast<int>(i)) {
        throw InputError(path + ": case '" + key.second + "' (" + key.first +
                         "): slice indices must be contiguous from 0, missing or repeated index " + std::to_string(i));
      }
    }
  }
  return m;
}

void write_manifest(const std::string& path, const CaseManifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path + "' for writing");
  std::ostringstream sp;
  sp.precision(17);
  sp << m.spacing[0] << ',' << m.spacing[1] << ',' << m.spacing[2];
  out << "K=" << m.num_classes << "\tspacing=" << sp.str() << "\n";
  for (const auto& e : m.entries) {
    out << e.split << '\t' << e.case_id << '\t' << e.slice_index << '\t' << e.img_path << '\t' << e.lbl_path << "\n";
  }
  if (!out) throw InputError("write to '" + path + "' failed");
}

std::vector<SliceRecord> load_split(const CaseManifest& m, const std::string& split) {
  std::vector<SliceRecord> out;
  for (const auto& e : m.split(split)) {
    SliceRecord r = load_slice(m.resolve(e.img_path), m.resolve(e.lbl_path), m.num_classes);
    r.case_id = e.case_id;
    r.slice_index = e.slice_index;
    out.push_back(std::move(r));
  }
  return out;
}

// ---- augmentation --------------------------------------------------------------------------

SliceRecord transform_slice(const SliceRecord& r, bool hflip, bool vflip, double angle_deg) {
  SliceRecord out = r;
  const int h = r.h, w = r.w;
  if (hflip || vflip) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const int sy = vflip ? h - 1 - y : y, sx = hflip ? w - 1 - x : x;
        const std::size_t d = static_cast<std::size_t>(y) * w + x, s = static_cast<std::size_t>(sy) * w + sx;
        out.image[d] = r.image[s];
        out.label[d] = r.label[s];
      }
    }
  }
  if (angle_deg == 0.0) return out;

  const SliceRecord src = out;
  const double t = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  auto pixel = [&](int y, int x) -> double {
    return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : src.image[static_cast<std::size_t>(y) * w + x];
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // inverse rotation: where does output (x, y) come from
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + dx * c - dy * s;
      const double sy = cy + dx * s + dy * c;
      const std::size_t d = static_cast<std::size_t>(y) * w + x;

      const int nx = static_cast<int>(std::lround(sx)), ny = static_cast<int>(std::lround(sy));
      out.label[d] = (nx >= 0 && nx < w && ny >= 0 && ny < h) ? src.label[static_cast<std::size_t>(ny) * w + nx] : 0;

      const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      const double v = (1 - fy) * ((1 - fx) * pixel(y0, x0) + fx * pixel(y0, x0 + 1)) +
                       fy * ((1 - fx) * pixel(y0 + 1, x0) + fx * pixel(y0 + 1, x0 + 1));
      out.image[d] = static_cast<float>(v);
    }
  }
  return out;
}

SliceRecord augment(const SliceRecord& r, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> angle(-20.0, 20.0);
  const bool hflip = coin(rng);
  const bool vflip = coin(rng);
  return transform_slice(r, hflip, vflip, angle(rng));
}

// ---- batching --------------------------------------------------------------------------------

std::vector<float> resize_image(std::span<const float> src, int h, int w, int out_h, int out_w) {
  if (h == out_h && w == out_w) return {src.begin(), src.end()};
  std::vector<float> out(static_cast<std::size_t>(out_h) * out_w);
  auto taps = [](int o, int in, int out_n) {
    double p = (o + 0.5) * in / out_n - 0.5;
    if (p < 0) p = 0;
    int i0 = std::min(static_cast<int>(p), in - 1);
    return std::tuple{i0, std::min(i0 + 1, in - 1), p - i0};
  };
  for (int y = 0; y < out_h; ++y) {
    const auto [y0, y1, ly] = taps(y, h, out_h);
    for (int x = 0; x < out_w; ++x) {
      const auto [x0, x1, lx] = taps(x, w, out_w);
      auto at = [&](int yy, int xx) { return static_cast<double>(src[static_cast<std::size_t>(yy) * w + xx]); };
      out[static_cast<std::size_t>(y) * out_w + x] =
          static_cast<float>((1 - ly) * ((1 - lx) * at(y0, x0) + lx * at(y0, x1)) +
                             ly * ((1 - lx) * at(y1, x0) + lx * at(y1, x1)));
    }
  }
  return out;
}

std::vector<std::uint8_t> resize_labels(std::span<const std::uint8_t> src, int h, int w, int out_h, int out_w) {
  if (h == out_h && w == out_w) return {src.begin(), src.end()};
  std::vector<std::uint8_t> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(static_cast<int>(std::floor((y + 0.5) * h / out_h)), h - 1);
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(static_cast<int>(std::floor((x + 0.5) * w / out_w)), w - 1);
      out[static_cast<std::size_t>(y) * out_w + x] = src[static_cast<std::size_t>(sy) * w + sx];
    }
  }
  return out;
}

std::vector<std::vector<int>> batch_order(std::size_t n_records, int batch_size, bool shuffle, std::uint64_t seed) {
  if (n_records == 0) throw InputError("cannot batch an empty record set");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<int> idx(n_records);
  for (std::size_t i = 0; i < n_records; ++i) idx[i] = static_cast<int>(i);
  if (shuffle) {
    std::mt19937_64 rng(seed);
    // Fisher-Yates with our own index draw, so the order is the same across standard libraries
    for (std::size_t i = n_records - 1; i > 0; --i) {
      const std::size_t j = rng() % (i + 1);
      std::swap(idx[i], idx[j]);
    }
  }
  std::vector<std::vector<int>> out;
  for (std::size_t s = 0; s < n_records; s += static_cast<std::size_t>(batch_size)) {
    out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                     idx.begin() + static_cast<std::ptrdiff_t>(std::min(n_records, s + batch_size)));
  }
  return out;
}

Batch make_batch(const std::vector<SliceRecord>& records, const std::vector<int>& ids, const BatchOptions& o) {
  if (o.target_size < 16 || o.target_size % 16 != 0) {
    throw ConfigError("target size must be a positive multiple of 16, got " + std::to_string(o.target_size));
  }
  const int n = static_cast<int>(ids.size()), s = o.target_size, c = o.in_channels;
  const std::size_t plane = static_cast<std::size_t>(s) * s;
  std::vector<float> images(static_cast<std::size_t>(n) * c * plane);
  Batch b;
  b.labels.resize(static_cast<std::size_t>(n) * plane);
  b.record_ids = ids;
  parallel_for(static_cast<std::size_t>(n), 1, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const SliceRecord* r = &records.at(static_cast<std::size_t>(ids[i]));
      SliceRecord aug;
      if (o.augment) {
        std::mt19937_64 rng = seeded({o.augment_seed, static_cast<std::uint64_t>(ids[i])});
        aug = augment(*r, rng);
        r = &aug;
      }
      const auto img = resize_image(r->image, r->h, r->w, s, s);
      const auto lbl = resize_labels(r->label, r->h, r->w, s, s);
      for (int ch = 0; ch < c; ++ch) std::copy(img.begin(), img.end(), images.begin() + static_cast<std::ptrdiff_t>((i * c + ch) * plane));
      std::copy(lbl.begin(), lbl.end(), b.labels.begin() + static_cast<std::ptrdiff_t>(i * plane));
    }
  });
  for (float& v : images) v = std::clamp(v, 0.0f, 1.0f);
  b.images = Tensor({n, c, s, s}, std::move(images));
  return b;
}

std::vector<Batch> make_batches(const std::vector<SliceRecord>& records, const BatchOptions& o) {
  std::vector<Batch> out;
  for (const auto& ids : batch_order(records.size(), o.batch_size, o.shuffle, o.shuffle_seed)) {
    out.push_back(make_batch(records, ids, o));
  }
  return out;
}

// ---- synthetic dataset ---------------------------------------------------------------------------

int synthetic_shape(int cls) { return (cls - 1) % 3; }

double synthetic_intensity(int cls, int num_classes) {
  if (cls == 0) return 0.1;
  return 0.3 + 0.6 * (cls - 1) / std::max(1, num_classes - 2);
}

namespace {

struct Region {
  int cls;
  double cx, cy, a, b;  // center, half extents
  double vx, vy;        // drift per slice
};

bool inside(const Region& r, double x, double y) {
  const double dx = (x - r.cx) / r.a, dy = (y - r.cy) / r.b;
  switch (synthetic_shape(r.cls)) {
    case 0:
      return dx * dx + dy * dy <= 1.0;
    case 1:
      return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
    default: {
      const double q = dx * dx + dy * dy;
      return q <= 1.0 && q >= 0.25;
    }
  }
}

double bound_radius(const Region& r) { return std::hypot(r.a, r.b); }

std::vector<Region> place_regions(const SyntheticSpec& spec, int case_index) {
  std::mt19937_64 rng = seeded({spec.seed, 0x5157ull, static_cast<std::uint64_t>(case_index)});
  const double lo = spec.min_radius * spec.size, hi = spec.max_radius * spec.size;
  std::uniform_real_distribution<double> radius(lo, hi), drift(-0.6, 0.6);
  const double travel = 0.6 * spec.slices_per_case / 2.0 + 1.0;
  for (int attempt = 0; attempt < 2000; ++attempt) {
    std::vector<Region> regions;
    bool ok = true;
    for (int c = 1; c < spec.num_classes && ok; ++c) {
      Region r{c, 0, 0, radius(rng), radius(rng), drift(rng), drift(rng)};
      const double br = bound_radius(r) + travel + 1.0;
      if (2 * br >= spec.size) {
        ok = false;
        break;
      }
      std::uniform_real_distribution<double> pos(br, spec.size - 1 - br);
      r.cx = pos(rng);
      r.cy = pos(rng);
      for (const auto& o : regions) {
        if (std::hypot(r.cx - o.cx, r.cy - o.cy) < bound_radius(r) + bound_radius(o) + 2 * travel + 2.0) ok = false;
      }
      regions.push_back(r);
    }
    if (ok) return regions;
  }
  throw InputError("image size " + std::to_string(spec.size) + " is too small to place " +
                   std::to_string(spec.num_classes - 1) + " non-overlapping regions");
}

}  // namespace

SliceRecord synthesize_slice(const SyntheticSpec& spec, int case_index, int slice_index) {
  if (spec.num_classes < 2 || spec.num_classes > 255) throw ConfigError("synthetic K must be in [2, 255]");
  if (spec.size < 16) throw InputError("synthetic image size must be >= 16");
  const std::vector<Region> base = place_regions(spec, case_index);
  const double mid = (spec.slices_per_case - 1) / 2.0;
  // regions taper toward the ends of the case, like organs across slices
  const double taper = spec.slices_per_case > 1 ? 1.0 - 0.25 * std::abs(slice_index - mid) / mid : 1.0;
  const double floor_r = spec.min_radius * spec.size;

  SliceRecord r;
  r.case_id = fmt::format("case{:02d}", case_index);
  r.slice_index = slice_index;
  r.h = r.w = spec.size;
  const std::size_t n = static_cast<std::size_t>(spec.size) * spec.size;
  r.label.assign(n, 0);
  r.image.assign(n, 0.0f);
  for (Region g : base) {
    g.cx += g.vx * (slice_index - mid);
    g.cy += g.vy * (slice_index - mid);
    g.a = std::max(floor_r, g.a * taper);
    g.b = std::max(floor_r, g.b * taper);
    for (int y = 0; y < spec.size; ++y) {
      for (int x = 0; x < spec.size; ++x) {
        if (inside(g, x, y)) r.label[static_cast<std::size_t>(y) * spec.size + x] = static_cast<std::uint8_t>(g.cls);
      }
    }
  }
  std::mt19937_64 rng = seeded({spec.seed, 0x1e15ull, static_cast<std::uint64_t>(case_index),
                                static_cast<std::uint64_t>(slice_index)});
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = synthetic_intensity(r.label[i], spec.num_classes) + noise(rng);
    r.image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return r;
}

CaseManifest generate_synthetic_dataset(const SyntheticSpec& spec, const std::string& out_dir) {
  if (spec.n_cases < 1 || spec.slices_per_case < 1) throw ConfigError("synthetic dataset needs cases and slices");
  if (spec.test_cases < 0 || spec.test_cases > spec.n_cases) throw ConfigError("test_cases must be in [0, n_cases]");
  fs::create_directories(out_dir);
  CaseManifest m;
  m.num_classes = spec.num_classes;
  m.spacing = spec.spacing;
  m.base_dir = out_dir;
  for (int c = 0; c < spec.n_cases; ++c) {
    const std::string split = c >= spec.n_cases - spec.test_cases ? "test" : "train";
    for (int s = 0; s < spec.slices_per_case; ++s) {
      const SliceRecord r = synthesize_slice(spec, c, s);
      const std::string stem = r.case_id + "_" + std::to_string(s);
      save_slice(r, (fs::path(out_dir) / (stem + "_img.lvtr")).string(), (fs::path(out_dir) / (stem + "_lbl.lvtr")).string());
      m.entries.push_back({split, r.case_id, s, stem + "_img.lvtr", stem + "_lbl.lvtr"});
    }
  }
  write_manifest((fs::path(out_dir) / "manifest.tsv").string(), m);
  return m;
}

}  // namespace levit::data
