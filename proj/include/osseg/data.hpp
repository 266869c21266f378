#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "osseg/labels.hpp"
#include "osseg/rng.hpp"
#include "osseg/tensor.hpp"

namespace osseg {

/// Raised for unreadable, malformed or inconsistent data on disk.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SourceTag { inlier, negative, negative_bb, pasted };

std::string_view to_string(SourceTag tag);
SourceTag parse_source_tag(std::string_view text);

struct Box {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  bool operator==(const Box&) const = default;
};

struct Sample {
  Tensor image;  // [3,H,W], normalized
  LabelPair labels;
  SourceTag tag = SourceTag::inlier;
  std::optional<Box> box;  // annotated region of a negative_bb sample

  std::size_t height() const { return labels.height; }
  std::size_t width() const { return labels.width; }
};

inline constexpr float kMean[3] = {0.485f, 0.456f, 0.406f};
inline constexpr float kStd[3] = {0.229f, 0.224f, 0.225f};

/// [3,H,W] values in [0,255] -> per-channel (v/255 - mean)/std.
Tensor normalize(const Tensor& image_u8);
Tensor denormalize(const Tensor& image);
/// Denormalized, rounded and clamped to bytes, interleaved RGB.
std::vector<std::uint8_t> to_rgb8(const Tensor& image);
Tensor from_rgb8(std::span<const std::uint8_t> rgb, std::size_t height, std::size_t width);

/// Degradations used to build hazard subsets of an evaluation set.
enum class Hazard { none, blur, noise, overexposure, underexposure };
std::string_view to_string(Hazard h);
Hazard parse_hazard(std::string_view text);
inline constexpr Hazard kHazards[] = {Hazard::blur, Hazard::noise, Hazard::overexposure,
                                      Hazard::underexposure};

enum class DatasetKind { synthetic, directory };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic;
  std::size_t num_classes = 4;
  std::size_t image_size = 64;
  std::uint64_t seed = 0;
  SourceTag source = SourceTag::inlier;
  double noise = 10.0;             // per-pixel uniform noise amplitude (0..255 scale)
  double paste_fraction = 0.05;    // for source = pasted
  Hazard hazard = Hazard::none;
  std::string path;                // directory datasets

  void validate() const;
};

/// Bilinear resampling of an image to (height, width), half-pixel centers.
Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);

/// Inserts the negative (its box crop in bb mode) into the inlier, resized to
/// round(area_fraction * H * W) pixels with its aspect ratio kept. Pasted
/// pixels are hard-replaced and labeled y = N_C, z = 0.
Sample paste_negative(const Sample& inlier, const Sample& negative, double area_fraction,
                      std::size_t num_classes, Rng& rng);

Sample crop_sample(const Sample& s, std::size_t top, std::size_t left, std::size_t size);
Sample flip_horizontal(const Sample& s);
/// Random size x size crop, then a horizontal flip with probability 0.5.
Sample augment(const Sample& s, std::size_t crop, Rng& rng);

Sample apply_hazard(const Sample& s, Hazard hazard, Rng& rng);

/// Deterministic synthetic scenes: ToyRoads inliers (sky, road, vegetation
/// and object classes) and negatives from a disjoint palette of checkerboards,
/// stripes and noise. Pure in (spec, index).
Sample generate_synthetic(const DatasetSpec& spec, std::size_t index);

/// Finite, randomly ordered view of a source of samples. Each pass is a fresh
/// permutation derived from the seed and the pass number.
class SampleStream {
 public:
  using Fetch = std::function<Sample(std::size_t)>;

  SampleStream(Fetch fetch, std::size_t size, const Rng& rng, bool shuffle = true);

  Sample next();
  std::size_t size() const { return size_; }
  /// Samples delivered so far.
  std::size_t consumed() const { return consumed_; }

 private:
  void reshuffle();

  Fetch fetch_;
  std::size_t size_;
  Rng rng_;
  bool shuffle_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0, pass_ = 0, consumed_ = 0;
};

/// Each slot is an inlier with probability 0.5, otherwise a negative: pasted
/// into a fresh inlier when `paste` is set, a standalone negative otherwise.
std::vector<Sample> form_batch(SampleStream& inliers, SampleStream& negatives,
                               std::size_t batch_size, bool paste, std::size_t num_classes,
                               double paste_fraction, Rng& rng);

// --- disk formats ---------------------------------------------------------

struct PngImage {
  std::size_t height = 0, width = 0, channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;                 // interleaved
};

PngImage read_png(const std::string& path, std::size_t channels);
void write_png(const std::string& path, const PngImage& image);

struct ManifestEntry {
  std::string image, label, tag;
};

struct Manifest {
  std::size_t num_classes = 0;
  std::size_t image_size = 0;
  std::vector<ManifestEntry> pairs;
};

Manifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const Manifest& manifest);

/// Writes `<stem>.png` and `<stem>_label.png` into dir and returns the entry.
ManifestEntry write_sample(const std::string& dir, const std::string& stem, const Sample& s,
                           std::size_t num_classes, std::string tag);

/// Image/label pairs listed by `<path>/manifest.json`. Pairs that fail to
/// decode or disagree in size are skipped and counted.
class DirectoryDataset {
 public:
  explicit DirectoryDataset(const DatasetSpec& spec);

  std::size_t size() const { return entries_.size(); }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t warnings() const { return diagnostics_.size(); }
  const std::vector<std::string>& diagnostics() const { return diagnostics_; }
  const ManifestEntry& entry(std::size_t i) const { return entries_.at(i); }
  /// Indices of entries whose tag equals `tag`.
  std::vector<std::size_t> with_tag(std::string_view tag) const;

  Sample load(std::size_t i) const;

 private:
  std::string root_;
  std::size_t num_classes_ = 0;
  std::vector<ManifestEntry> entries_;
  std::vector<std::string> diagnostics_;
};

/// The `gen` command's work: writes `count` samples of the spec (or, for
/// an evaluation bundle, every tagged subset) plus manifest.json. Bundles get
/// `negative_factor` times as many negative images so assays have a pool to
/// sample from.
void write_dataset(const DatasetSpec& spec, const std::string& out_dir, std::size_t count,
                   bool eval_bundle, std::size_t negative_factor = 1);

}  // namespace osseg
