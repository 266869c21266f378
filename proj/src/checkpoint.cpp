#include "osseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace osseg {

namespace {

constexpr char kMagic[4] = {'O', 'D', 'S', 'G'};
constexpr std::uint32_t kVersion = 1;

void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }
void put_u16(std::string& out, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}
void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

void put_tensor(std::string& out, const std::string& name, const Shape& shape,
                std::span<const float> data) {
  if (name.size() > 0xffff) throw CheckpointError("tensor name too long: " + name);
  put_u16(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put_u8(out, static_cast<std::uint8_t>(shape.size()));
  for (auto d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (float f : data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& source) : b_(bytes), src_(source) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > b_.size())
      throw CheckpointError(src_ + ": truncated while reading " + what + " at byte " +
                            std::to_string(pos_));
  }
  std::uint64_t uint(std::size_t n, const char* what) {
    need(n, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  float f32(const char* what) {
    const auto bits = static_cast<std::uint32_t>(uint(4, what));
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  bool done() const { return pos_ == b_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& b_;
  const std::string& src_;
  std::size_t pos_ = 0;
};

nlohmann::json config_json(const ModelConfig& c) {
  nlohmann::json j;
  j["num_classes"] = c.num_classes;
  j["head_kind"] = std::string(to_string(c.head_kind));
  j["backbone_widths"] = c.backbone_widths;
  j["ladder_width"] = c.ladder_width;
  j["dropout_p"] = c.dropout_p;
  j["input_channels"] = c.input_channels;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.head_kind = parse_head_kind(j.at("head_kind").get<std::string>());
  c.backbone_widths = j.at("backbone_widths").get<std::array<std::size_t, 4>>();
  c.ladder_width = j.at("ladder_width").get<std::size_t>();
  c.dropout_p = j.at("dropout_p").get<double>();
  c.input_channels = j.at("input_channels").get<std::size_t>();
  return c;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  const Model& m = ckpt.model;
  std::string out(kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(m.parameters().size() + 2 * m.batch_norms().size()));
  for (const auto& p : m.parameters()) put_tensor(out, p.name, p.value.shape(), p.value.data());
  for (const auto& b : m.batch_norms()) {
    const Shape s{b.stats.mean.size()};
    put_tensor(out, b.name + ".running_mean", s, b.stats.mean);
    put_tensor(out, b.name + ".running_var", s, b.stats.var);
  }
  nlohmann::json meta;
  meta["model"] = config_json(m.config());
  meta["seed"] = ckpt.seed;
  meta["epoch"] = ckpt.epoch;
  const std::string text = meta.dump();
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source) {
  Reader r(bytes, source);
  if (r.bytes(4, "magic") != std::string(kMagic, 4))
    throw CheckpointError(source + ": not a checkpoint (bad magic)");
  const auto version = r.uint(4, "version");
  if (version != kVersion)
    throw CheckpointError(source + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = r.uint(4, "tensor count");

  std::map<std::string, Tensor> tensors;
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto len = r.uint(2, "tensor name length");
    std::string name = r.bytes(len, "tensor name");
    const auto rank = r.uint(1, "tensor rank");
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(r.uint(4, "tensor dims"));
    const std::size_t n = shape_numel(shape);
    r.need(4 * n, "tensor data");
    std::vector<float> data(n);
    for (auto& v : data) v = r.f32("tensor data");
    if (!tensors.emplace(name, Tensor(shape, std::move(data))).second)
      throw CheckpointError(source + ": duplicate tensor " + name);
  }
  const auto meta_len = r.uint(4, "metadata length");
  const std::string text = r.bytes(meta_len, "metadata");
  if (!r.done()) throw CheckpointError(source + ": trailing bytes after metadata");

  Checkpoint ckpt;
  ModelConfig config;
  try {
    const auto meta = nlohmann::json::parse(text);
    config = config_from_json(meta.at("model"));
    ckpt.seed = meta.at("seed").get<std::uint64_t>();
    ckpt.epoch = meta.at("epoch").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(source + ": malformed metadata: " + e.what());
  }
  ckpt.model = Model::build(config, Rng(ckpt.seed));
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError(source + ": missing tensor " + name);
    if (it->second.shape() != shape)
      throw CheckpointError(source + ": tensor " + name + " has shape " +
                            shape_str(it->second.shape()) + ", model expects " + shape_str(shape));
    Tensor t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  for (auto& p : ckpt.model.parameters()) p.value = take(p.name, p.value.shape());
  for (auto& b : ckpt.model.batch_norms()) {
    const Shape s{b.stats.mean.size()};
    b.stats.mean = take(b.name + ".running_mean", s).vec();
    b.stats.var = take(b.name + ".running_var", s).vec();
  }
  if (!tensors.empty())
    throw CheckpointError(source + ": unexpected tensor " + tensors.begin()->first);
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(path + ": cannot open for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(path + ": cannot open");
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str(), path);
}

// --- key=value configuration ------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::istringstream in(text);
  std::string line;
  std::map<std::string, std::size_t> first_line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
    if (auto it = first_line.find(key); it != first_line.end())
      throw ConfigError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key +
                        "' (first set on line " + std::to_string(it->second) + ")");
    first_line[key] = lineno;
    kv.values_[key] = value;
  }
  return kv;
}

KeyValues KeyValues::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

void KeyValues::set(const std::string& key, const std::string& value) { values_[key] = value; }

const std::string& KeyValues::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(source_ + ": missing required key '" + key + "'");
  return it->second;
}

void KeyValues::check(const std::set<std::string>& allowed,
                      const std::set<std::string>& required) const {
  for (const auto& [k, v] : values_)
    if (!allowed.count(k)) throw ConfigError(source_ + ": unknown key '" + k + "'");
  for (const auto& k : required)
    if (!has(k)) throw ConfigError(source_ + ": missing required key '" + k + "'");
}

std::size_t KeyValues::get_size(const std::string& key, std::size_t fallback) const {
  if (!has(key)) return fallback;
  const auto& v = get(key);
  std::size_t pos = 0;
  unsigned long long n = 0;
  try {
    if (v.empty() || v[0] == '-') throw std::invalid_argument("negative");
    n = std::stoull(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size())
    throw ConfigError(source_ + ": key '" + key + "' expects a non-negative integer, got '" + v + "'");
  return static_cast<std::size_t>(n);
}

double KeyValues::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  const auto& v = get(key);
  std::size_t pos = 0;
  double d = 0;
  try {
    d = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos == 0 || pos != v.size())
    throw ConfigError(source_ + ": key '" + key + "' expects a number, got '" + v + "'");
  return d;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  const auto& v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(source_ + ": key '" + key + "' expects true or false, got '" + v + "'");
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const {
  return has(key) ? get(key) : fallback;
}

}  // namespace osseg
