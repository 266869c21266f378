#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace osseg {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Explicit random state. Copying an Rng copies its position in the stream,
/// so two copies replay identical draws. `derive` gives independent child
/// streams keyed by (seed, path of tags) that do not depend on how many
/// numbers the parent has already produced.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : Rng(seed, 0) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t key() const { return key_; }

  Rng derive(std::uint64_t tag) const {
    std::uint64_t k = key_ ^ (tag + 0x9e3779b97f4a7c15ull + (key_ << 6) + (key_ >> 2));
    return Rng(seed_, k * 0xbf58476d1ce4e5b9ull + 1);
  }
  Rng derive(std::string_view tag) const { return derive(fnv1a(tag)); }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(static_cast<unsigned __int128>(engine_()) * span >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal(double mean = 0.0, double stddev = 1.0) {
    std::normal_distribution<double> dist(mean, stddev);
    return dist(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  Rng(std::uint64_t seed, std::uint64_t key) : seed_(seed), key_(key) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(key), static_cast<std::uint32_t>(key >> 32)};
    engine_.seed(seq);
  }

  std::uint64_t seed_;
  std::uint64_t key_;
  std::mt19937_64 engine_;
};

}  // namespace osseg
