#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace osseg {

/// z values.
inline constexpr std::uint8_t kOutlier = 0;
inline constexpr std::uint8_t kInlier = 1;
inline constexpr std::uint8_t kIgnore = 2;

/// Label-file conventions.
inline constexpr std::uint8_t kFileOutlier = 254;
inline constexpr std::uint8_t kFileIgnore = 255;

/// Per-pixel semantic labels y and inlier flags z for one image. y < N_C are
/// inlier classes; anything else is a non-inlier label (outlier or ignore).
struct LabelPair {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> y;
  std::vector<std::uint8_t> z;

  LabelPair() = default;
  LabelPair(std::size_t h, std::size_t w, std::uint8_t y_fill, std::uint8_t z_fill)
      : height(h), width(w), y(h * w, y_fill), z(h * w, z_fill) {}

  std::size_t size() const { return height * width; }
  std::uint8_t& y_at(std::size_t r, std::size_t c) { return y[r * width + c]; }
  std::uint8_t& z_at(std::size_t r, std::size_t c) { return z[r * width + c]; }
  std::uint8_t y_at(std::size_t r, std::size_t c) const { return y[r * width + c]; }
  std::uint8_t z_at(std::size_t r, std::size_t c) const { return z[r * width + c]; }

  bool operator==(const LabelPair&) const = default;

  /// Relabels for the (C+1)-way problem: outliers become class N_C and take
  /// part in the classification loss as ordinary members of that class.
  LabelPair cplus1(std::size_t num_classes) const {
    LabelPair out = *this;
    for (std::size_t i = 0; i < out.size(); ++i)
      if (out.z[i] == kOutlier) {
        out.y[i] = static_cast<std::uint8_t>(num_classes);
        out.z[i] = kInlier;
      }
    return out;
  }
};

/// Converts a stored label byte into (y, z).
inline void decode_label(std::uint8_t v, std::size_t num_classes, std::uint8_t& y,
                         std::uint8_t& z) {
  if (v < num_classes) {
    y = v;
    z = kInlier;
  } else if (v == kFileOutlier) {
    y = static_cast<std::uint8_t>(num_classes);
    z = kOutlier;
  } else {
    y = kFileIgnore;
    z = kIgnore;
  }
}

inline std::uint8_t encode_label(std::uint8_t y, std::uint8_t z, std::size_t num_classes) {
  if (z == kOutlier) return kFileOutlier;
  if (z == kInlier && y < num_classes) return y;
  return kFileIgnore;
}

}  // namespace osseg
