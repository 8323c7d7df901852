#include "levit_unet/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include <boost/crc.hpp>

#include "levit_unet/errors.hpp"

namespace levit::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

using Crc32c = boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true>;

constexpr char kMagic[4] = {'L', 'V', 'T', 'U'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<char>& buffer() { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  Reader(const std::vector<char>& buf, std::size_t end) : buf_(buf), end_(end) {}
  void bytes(void* p, std::size_t n) {
    if (n > end_ - pos_) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > end_ - pos_) throw FormatError("checkpoint string overruns file at byte " + std::to_string(pos_));
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<char>& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

void write_record(Writer& w, const std::string& name, const Shape& shape, std::span<const float> data) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(shape.size()));
  for (int d : shape) w.u32(static_cast<std::uint32_t>(d));
  w.bytes(data.data(), data.size() * sizeof(float));
}

}  // namespace

const std::string* Checkpoint::meta_value(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return &v;
  }
  return nullptr;
}

void save_checkpoint(const Model& model, const std::string& path, const KeyValues& meta, const nn::Adam* optimizer) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);

  KeyValues lines = model.config().to_key_values();
  for (const auto& [k, v] : meta) lines.emplace_back("meta." + k, v);
  if (optimizer) lines.emplace_back("optim.step", std::to_string(optimizer->step_count()));
  w.u32(static_cast<std::uint32_t>(lines.size()));
  for (const auto& [k, v] : lines) w.str(k + "=" + v);

  const nn::TensorList tensors = model.named_tensors();
  std::size_t count = tensors.size();
  if (optimizer) count += 2 * optimizer->params().size();
  w.u32(static_cast<std::uint32_t>(count));
  for (const auto& t : tensors) write_record(w, t.name, t.tensor.shape(), t.tensor.data());
  if (optimizer) {
    const nn::Adam& opt = *optimizer;
    const auto& params = opt.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Shape& s = params[i].tensor.shape();
      write_record(w, "optim.m." + params[i].name, s, opt.first_moments()[i]);
      write_record(w, "optim.v." + params[i].name, s, opt.second_moments()[i]);
    }
  }

  Crc32c crc;
  crc.process_bytes(w.buffer().data(), w.buffer().size());
  w.u32(crc.checksum());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot open '" + tmp + "' for writing");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw InputError("write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint '" + path + "'");
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12) throw FormatError("checkpoint '" + path + "' is truncated (" + std::to_string(buf.size()) + " bytes)");
  if (std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError("checkpoint '" + path + "': bad magic at byte 0");

  const std::size_t body = buf.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, buf.data() + body, 4);
  Crc32c crc;
  crc.process_bytes(buf.data(), body);
  if (crc.checksum() != stored) {
    throw FormatError("checkpoint '" + path + "': CRC-32C mismatch (file corrupt or truncated)");
  }

  Reader r(buf, body);
  char magic[4];
  r.bytes(magic, 4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  }

  Checkpoint ck;
  KeyValues config_kv;
  const std::uint32_t n_lines = r.u32();
  for (std::uint32_t i = 0; i < n_lines; ++i) {
    const std::size_t at = r.pos();
    const std::string line = r.str();
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint config line without '=' at byte " + std::to_string(at));
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key.rfind("meta.", 0) == 0) {
      ck.meta.emplace_back(key.substr(5), value);
    } else if (key.rfind("optim.", 0) == 0) {
      ck.meta.emplace_back(key, value);
    } else {
      config_kv.emplace_back(std::move(key), std::move(value));
    }
  }
  ck.config = ModelConfig::from_key_values(config_kv);

  const std::uint32_t n_records = r.u32();
  for (std::uint32_t i = 0; i < n_records; ++i) {
    std::string name = r.str();
    const std::uint32_t ndim = r.u32();
    if (ndim > 8) throw FormatError("checkpoint record '" + name + "' has " + std::to_string(ndim) + " dims");
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    std::vector<float> data(shape_numel(shape));
    r.bytes(data.data(), data.size() * sizeof(float));
    ck.records.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos() != body) throw FormatError("checkpoint has trailing bytes at " + std::to_string(r.pos()));
  return ck;
}

void restore_checkpoint(Model& model, const Checkpoint& ck, nn::Adam* optimizer) {
  const KeyValues have = model.config().to_key_values(), want = ck.config.to_key_values();
  for (std::size_t i = 0; i < have.size(); ++i) {
    if (have[i].first == "seed") continue;
    if (have[i] != want[i]) {
      throw ConfigError("checkpoint config mismatch: " + have[i].first + " is " + have[i].second +
                        " in the model but " + want[i].second + " in the checkpoint");
    }
  }
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : ck.records) by_name[name] = &t;

  auto find = [&](const std::string& name, const Shape& shape) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + name + "'");
    if (it->second->shape() != shape) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second->shape()) +
                        ", model expects " + shape_str(shape));
    }
    return *it->second;
  };

  // validate everything first
  nn::TensorList tensors = model.named_tensors();
  for (const auto& t : tensors) find(t.name, t.tensor.shape());
  std::int64_t step = 0;
  if (optimizer) {
    const std::string* s = ck.meta_value("optim.step");
    if (!s) throw FormatError("checkpoint carries no optimizer state");
    step = std::stoll(*s);
    for (const auto& p : optimizer->params()) {
      find("optim.m." + p.name, p.tensor.shape());
      find("optim.v." + p.name, p.tensor.shape());
    }
  }

  for (auto& t : tensors) {
    const Tensor& src = find(t.name, t.tensor.shape());
    std::ranges::copy(src.data(), t.tensor.mutable_data().begin());
  }
  if (optimizer) {
    const auto& params = optimizer->params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor& m = find("optim.m." + params[i].name, params[i].tensor.shape());
      const Tensor& v = find("optim.v." + params[i].name, params[i].tensor.shape());
      optimizer->first_moments()[i].assign(m.data().begin(), m.data().end());
      optimizer->second_moments()[i].assign(v.data().begin(), v.data().end());
    }
    optimizer->set_step_count(step);
  }
}

Model load_checkpoint(const std::string& path, Checkpoint* decoded) {
  Checkpoint ck = read_checkpoint(path);
  Model m = Model::build(ck.config);
  restore_checkpoint(m, ck);
  if (decoded) *decoded = std::move(ck);
  return m;
}

}  // namespace levit::model
