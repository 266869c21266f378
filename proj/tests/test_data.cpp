#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "osseg/data.hpp"

using namespace osseg;
namespace fs = std::filesystem;

namespace {

DatasetSpec toy(std::size_t size = 64, SourceTag source = SourceTag::inlier) {
  DatasetSpec s;
  s.image_size = size;
  s.source = source;
  return s;
}

std::size_t count_z(const LabelPair& l, std::uint8_t z) {
  return static_cast<std::size_t>(std::count(l.z.begin(), l.z.end(), z));
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("osseg_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Normalize, HandValues) {
  Tensor raw(Shape{3, 1, 2}, {123.675f, 255.0f, 0, 0, 0, 0});
  const Tensor n = normalize(raw);
  EXPECT_NEAR(n[0], 0.0f, 1e-5);
  EXPECT_NEAR(n[1], 2.2489f, 5e-5);
  const Tensor back = denormalize(n);
  for (std::size_t i = 0; i < raw.numel(); ++i) EXPECT_NEAR(back[i], raw[i], 1e-3);
  const Tensor n2 = normalize(back);
  for (std::size_t i = 0; i < n.numel(); ++i) EXPECT_NEAR(n2[i], n[i], 1e-5);
}

TEST(Synthetic, PureInSpecAndIndex) {
  const auto a = generate_synthetic(toy(), 17), b = generate_synthetic(toy(), 17);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(generate_synthetic(toy(), 18).image == a.image);
}

TEST(Synthetic, InlierScenesAreFullyLabeled) {
  std::vector<std::size_t> hist(4, 0);
  for (std::size_t i = 0; i < 100; ++i) {
    const auto s = generate_synthetic(toy(), i);
    ASSERT_EQ(s.labels.height, 64u);
    for (std::size_t p = 0; p < s.labels.size(); ++p) {
      ASSERT_LT(s.labels.y[p], 4);
      ASSERT_EQ(s.labels.z[p], kInlier);
      ++hist[s.labels.y[p]];
    }
  }
  for (auto h : hist) EXPECT_GT(h, 0u);
}

TEST(Synthetic, NegativesAreAllOutlier) {
  const auto s = generate_synthetic(toy(64, SourceTag::negative), 3);
  EXPECT_EQ(count_z(s.labels, kOutlier), s.labels.size());
  const auto bb = generate_synthetic(toy(64, SourceTag::negative_bb), 3);
  ASSERT_TRUE(bb.box.has_value());
  EXPECT_EQ(count_z(bb.labels, kOutlier), bb.box->height * bb.box->width);
  EXPECT_EQ(count_z(bb.labels, kIgnore), bb.labels.size() - bb.box->height * bb.box->width);
}

TEST(Synthetic, ClassCountBounds) {
  DatasetSpec s = toy();
  s.num_classes = 9;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.num_classes = 4;
  s.image_size = 48;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Paste, AreaWithinRoundingBounds) {
  const auto inlier = generate_synthetic(toy(), 0);
  for (std::size_t i = 0; i < 20; ++i) {
    Rng rng(i);
    const auto neg = generate_synthetic(toy(64, SourceTag::negative), i);
    const auto p = paste_negative(inlier, neg, 0.05, 4, rng);
    const std::size_t area = count_z(p.labels, kOutlier);
    EXPECT_GE(area, 194u);
    EXPECT_LE(area, 215u);
    EXPECT_EQ(p.tag, SourceTag::pasted);
    for (std::size_t q = 0; q < p.labels.size(); ++q)
      if (p.labels.z[q] == kOutlier) EXPECT_EQ(p.labels.y[q], 4);
  }
}

TEST(Paste, NonSquareNegativeKeepsAreaBounds) {
  const auto inlier = generate_synthetic(toy(), 0);
  Sample neg = generate_synthetic(toy(64, SourceTag::negative), 1);
  neg = crop_sample(neg, 0, 0, 64);
  Sample wide;
  wide.image = resize_bilinear(neg.image, 24, 64);
  wide.labels = LabelPair(24, 64, 4, kOutlier);
  wide.tag = SourceTag::negative;
  Rng rng(3);
  const std::size_t area = count_z(paste_negative(inlier, wide, 0.05, 4, rng).labels, kOutlier);
  EXPECT_GE(area, 194u);
  EXPECT_LE(area, 215u);
}

TEST(Paste, SinglePixel) {
  const auto inlier = generate_synthetic(toy(), 0);
  const auto neg = generate_synthetic(toy(64, SourceTag::negative), 0);
  Rng rng(1);
  EXPECT_EQ(count_z(paste_negative(inlier, neg, 1.0 / 4096, 4, rng).labels, kOutlier), 1u);
}

TEST(Paste, SameRngSamePosition) {
  const auto inlier = generate_synthetic(toy(), 0);
  const auto neg = generate_synthetic(toy(64, SourceTag::negative), 0);
  Rng a(5), b(5);
  const auto pa = paste_negative(inlier, neg, 0.05, 4, a), pb = paste_negative(inlier, neg, 0.05, 4, b);
  EXPECT_EQ(pa.labels, pb.labels);
  EXPECT_EQ(pa.box, pb.box);
}

TEST(Augment, FullCropOnlyFlips) {
  const auto s = generate_synthetic(toy(32), 2);
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed);
    const auto a = augment(s, 32, rng);
    EXPECT_TRUE(a.labels == s.labels || a.labels == flip_horizontal(s).labels);
  }
}

TEST(Augment, FlipIsInvolution) {
  const auto s = generate_synthetic(toy(32), 2);
  const auto f = flip_horizontal(flip_horizontal(s));
  EXPECT_EQ(f.image, s.image);
  EXPECT_EQ(f.labels, s.labels);
}

TEST(Augment, LabelsFollowImageOnCoordinateGrid) {
  // Channel 0 holds the row, channel 1 the column, labels the flat index.
  const std::size_t n = 16;
  Sample grid;
  grid.image = Tensor(Shape{3, n, n});
  grid.labels = LabelPair(n, n, 0, kInlier);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      grid.image[r * n + c] = static_cast<float>(r);
      grid.image[n * n + r * n + c] = static_cast<float>(c);
      grid.labels.y_at(r, c) = static_cast<std::uint8_t>(r * n + c);
    }
  std::set<bool> flips;
  for (std::uint64_t seed = 0; seed < 32; ++seed) {
    Rng rng(seed);
    const auto a = augment(grid, 10, rng);
    ASSERT_EQ(a.labels.height, 10u);
    const auto r0 = static_cast<std::size_t>(a.image[0]);
    const auto c0 = static_cast<std::size_t>(a.image[100]);
    const bool flipped = a.image[100] > a.image[101];
    flips.insert(flipped);
    for (std::size_t i = 0; i < 10; ++i)
      for (std::size_t j = 0; j < 10; ++j) {
        const auto r = static_cast<std::size_t>(a.image[i * 10 + j]);
        const auto c = static_cast<std::size_t>(a.image[100 + i * 10 + j]);
        ASSERT_EQ(a.labels.y_at(i, j), r * n + c);
        ASSERT_EQ(r, r0 + i);
        ASSERT_EQ(c, flipped ? c0 - j : c0 + j);
      }
  }
  EXPECT_EQ(flips.size(), 2u);
}

TEST(Hazard, ChangesImageNotLabels) {
  const auto s = generate_synthetic(toy(32), 4);
  for (Hazard h : kHazards) {
    Rng a(1), b(1);
    const auto x = apply_hazard(s, h, a), y = apply_hazard(s, h, b);
    EXPECT_EQ(x.labels, s.labels);
    EXPECT_EQ(x.image, y.image);
    EXPECT_FALSE(x.image == s.image) << to_string(h);
  }
}

TEST(Resize, ConstantStaysConstant) {
  const Tensor r = resize_bilinear(Tensor(Shape{3, 5, 7}, 0.25f), 11, 3);
  EXPECT_EQ(r.shape(), (Shape{3, 11, 3}));
  for (float v : r.data()) EXPECT_FLOAT_EQ(v, 0.25f);
}

class BatchMixing : public ::testing::Test {
 protected:
  void SetUp() override {
    for (std::size_t i = 0; i < 16; ++i) {
      inliers.push_back(generate_synthetic(toy(32), i));
      negatives.push_back(generate_synthetic(toy(32, SourceTag::negative), i));
    }
  }
  SampleStream stream(const std::vector<Sample>& pool, std::uint64_t seed) {
    return SampleStream([&pool](std::size_t i) { return pool[i]; }, pool.size(), Rng(seed));
  }
  std::vector<Sample> inliers, negatives;
};

TEST_F(BatchMixing, InlierShareNearHalf) {
  auto in = stream(inliers, 1), neg = stream(negatives, 2);
  Rng rng(3);
  std::size_t plain = 0, total = 0;
  for (std::size_t b = 0; b < 1000; ++b) {
    for (const auto& s : form_batch(in, neg, 8, false, 4, 0.05, rng)) {
      plain += s.tag == SourceTag::inlier;
      ++total;
    }
  }
  const double share = static_cast<double>(plain) / static_cast<double>(total);
  EXPECT_GE(share, 0.45);
  EXPECT_LE(share, 0.55);
}

TEST_F(BatchMixing, PastedSlotsMixInliersAndOutliers) {
  auto in = stream(inliers, 1), neg = stream(negatives, 2);
  Rng rng(4);
  std::size_t pasted = 0;
  for (std::size_t b = 0; b < 20; ++b)
    for (const auto& s : form_batch(in, neg, 8, true, 4, 0.05, rng)) {
      if (s.tag == SourceTag::inlier) continue;
      ++pasted;
      EXPECT_EQ(s.tag, SourceTag::pasted);
      EXPECT_GT(count_z(s.labels, kOutlier), 0u);
      EXPECT_GT(count_z(s.labels, kInlier), 0u);
    }
  EXPECT_GT(pasted, 0u);
}

TEST_F(BatchMixing, SameRngSameComposition) {
  auto run = [&] {
    auto in = stream(inliers, 1), neg = stream(negatives, 2);
    Rng rng(5);
    std::vector<LabelPair> out;
    for (std::size_t b = 0; b < 10; ++b)
      for (auto& s : form_batch(in, neg, 8, true, 4, 0.05, rng)) out.push_back(s.labels);
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST_F(BatchMixing, StreamVisitsEverySamplePerPass) {
  auto in = stream(inliers, 7);
  std::vector<LabelPair> first;
  for (std::size_t i = 0; i < 16; ++i) first.push_back(in.next().labels);
  for (const auto& s : inliers) EXPECT_NE(std::find(first.begin(), first.end(), s.labels), first.end());
  EXPECT_EQ(in.consumed(), 16u);
}

TEST(Labels, FileConventions) {
  std::uint8_t y, z;
  decode_label(255, 4, y, z);
  EXPECT_EQ(z, kIgnore);
  decode_label(254, 4, y, z);
  EXPECT_EQ(z, kOutlier);
  EXPECT_EQ(y, 4);
  decode_label(2, 4, y, z);
  EXPECT_EQ(z, kInlier);
  EXPECT_EQ(y, 2);
  decode_label(7, 4, y, z);
  EXPECT_EQ(z, kIgnore);
  EXPECT_EQ(encode_label(4, kOutlier, 4), 254);
  EXPECT_EQ(encode_label(kFileIgnore, kIgnore, 4), 255);
}

TEST(Disk, SampleRoundTrip) {
  const auto dir = scratch("roundtrip");
  const auto s = generate_synthetic(toy(32, SourceTag::negative_bb), 1);
  Manifest m{4, 32, {write_sample(dir.string(), "a", s, 4, "negative_bb")}};
  write_manifest((dir / "manifest.json").string(), m);
  DatasetSpec spec;
  spec.kind = DatasetKind::directory;
  spec.path = dir.string();
  const DirectoryDataset ds(spec);
  ASSERT_EQ(ds.size(), 1u);
  const auto back = ds.load(0);
  EXPECT_EQ(back.labels, s.labels);
  EXPECT_EQ(back.image, s.image);
  EXPECT_EQ(back.box, s.box);
}

TEST(Disk, CorruptLabelSkippedWithWarning) {
  const auto dir = scratch("corrupt");
  Manifest m{4, 32, {}};
  for (std::size_t i = 0; i < 3; ++i)
    m.pairs.push_back(write_sample(dir.string(), "s" + std::to_string(i), generate_synthetic(toy(32), i), 4, "inlier"));
  write_manifest((dir / "manifest.json").string(), m);
  std::ofstream(dir / m.pairs[1].label, std::ios::binary) << "not a png";
  DatasetSpec spec;
  spec.kind = DatasetKind::directory;
  spec.path = dir.string();
  const DirectoryDataset ds(spec);
  EXPECT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds.warnings(), 1u);
  EXPECT_NE(ds.diagnostics()[0].find(m.pairs[1].label), std::string::npos);
}

TEST(Disk, MissingManifestIsDataError) {
  DatasetSpec spec;
  spec.kind = DatasetKind::directory;
  spec.path = scratch("empty").string();
  EXPECT_THROW(DirectoryDataset{spec}, DataError);
}

TEST(Disk, RegenerationIsByteIdentical) {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  write_dataset(toy(32), a.string(), 3, true);
  write_dataset(toy(32), b.string(), 3, true);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(a)) {
    ++files;
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
  }
  EXPECT_EQ(files, 1u + 2 * 3 * (3 + 4));
}

TEST(Disk, BundleNegativeFactor) {
  const auto dir = scratch("gen_factor");
  write_dataset(toy(32), dir.string(), 2, true, 3);
  std::map<std::string, std::size_t> per_tag;
  for (const auto& e : read_manifest((dir / "manifest.json").string()).pairs) ++per_tag[e.tag];
  EXPECT_EQ(per_tag["negative"], 6u);
  EXPECT_EQ(per_tag["inlier"], 2u);
  EXPECT_EQ(per_tag["pasted"], 2u);
}

TEST(Disk, CountZeroWritesManifestOnly) {
  const auto dir = scratch("gen_zero");
  write_dataset(toy(32), dir.string(), 0, false);
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
  EXPECT_TRUE(read_manifest((dir / "manifest.json").string()).pairs.empty());
}

TEST(Disk, UnwritablePathIsDataError) {
  EXPECT_THROW(write_dataset(toy(32), "/proc/osseg_cannot_write_here", 1, false), DataError);
}
