#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "osseg/model.hpp"

namespace osseg {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  Model model;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
};

/// Layout: "ODSG", u32 version = 1, u32 tensor count, then per tensor u16
/// name length, name, u8 rank, u32 dims, little-endian float32 data; then u32
/// metadata length and UTF-8 JSON (model config, seed, epoch). Batch-norm
/// running statistics are stored as `<layer>.running_mean` / `.running_var`.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& source = "checkpoint");

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Ordered key=value pairs read from a flat config file. '#' starts a
/// comment; blank lines are skipped; duplicate keys and malformed lines are errors.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& source);
  static KeyValues from_file(const std::string& path);

  void set(const std::string& key, const std::string& value);  // later values override
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }
  const std::string& source() const { return source_; }

  /// Rejects keys outside `allowed` and reports missing `required` keys.
  void check(const std::set<std::string>& allowed, const std::set<std::string>& required) const;

  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;

 private:
  std::string source_;
  std::map<std::string, std::string> values_;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace osseg
