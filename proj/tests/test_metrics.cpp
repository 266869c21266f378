#include <gtest/gtest.h>

#include <cmath>

#include "json.hpp"
#include "osseg/metrics.hpp"

using namespace osseg;

namespace {

// Mean over positives of the precision among everything scored at least as
// high as that positive.
double brute_force_ap(const std::vector<float>& s, const std::vector<std::uint8_t>& l) {
  double sum = 0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!l[i]) continue;
    ++positives;
    std::size_t above = 0, pos_above = 0;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (s[j] >= s[i]) {
        ++above;
        pos_above += l[j];
      }
    sum += static_cast<double>(pos_above) / static_cast<double>(above);
  }
  return positives ? sum / static_cast<double>(positives) : 0.0;
}

LabelPair row(std::vector<std::uint8_t> y) {
  LabelPair l(1, y.size(), 0, kInlier);
  l.y = std::move(y);
  return l;
}

}  // namespace

TEST(AveragePrecision, HandValue) {
  const std::vector<float> s{0.9f, 0.8f, 0.1f};
  const std::vector<std::uint8_t> l{1, 0, 1};
  EXPECT_NEAR(average_precision(s, l), 0.8333, 5e-5);
}

TEST(AveragePrecision, PerfectRanking) {
  const std::vector<float> s{0.1f, 0.95f, 0.2f, 0.9f};
  const std::vector<std::uint8_t> l{0, 1, 0, 1};
  EXPECT_EQ(average_precision(s, l), 1.0);
}

TEST(AveragePrecision, TiesArePessimistic) {
  const std::vector<float> s{0.5f, 0.5f};
  EXPECT_DOUBLE_EQ(average_precision(s, std::vector<std::uint8_t>{1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(average_precision(s, std::vector<std::uint8_t>{0, 1}), 0.5);
}

TEST(AveragePrecision, MatchesBruteForceOnRandomLists) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 64));
    const auto levels = rng.uniform_int(2, 10);  // few distinct values force ties
    std::vector<float> s(n);
    std::vector<std::uint8_t> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<float>(rng.uniform_int(0, levels)) / static_cast<float>(levels);
      l[i] = rng.bernoulli(0.4);
    }
    l[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n - 1)))] = 1;
    ASSERT_NEAR(average_precision(s, l), brute_force_ap(s, l), 1e-12) << "trial " << trial;
  }
}

TEST(AveragePrecision, RejectsDegenerateInput) {
  EXPECT_THROW(average_precision(std::vector<float>{0.3f}, std::vector<std::uint8_t>{0}), std::invalid_argument);
  EXPECT_THROW(average_precision(std::vector<float>{0.3f}, std::vector<std::uint8_t>{}), std::invalid_argument);
}

TEST(Assays, SingleAssayOverAllNegativesIsPlainAp) {
  Rng rng(1);
  std::vector<std::vector<float>> in(3, std::vector<float>(40)), neg(2, std::vector<float>(30));
  std::vector<float> all;
  std::vector<std::uint8_t> labels;
  for (auto& im : in)
    for (auto& v : im) v = static_cast<float>(rng.uniform());
  for (auto& im : neg)
    for (auto& v : im) v = static_cast<float>(rng.uniform() * 0.5 + 0.3);
  for (const auto& im : in)
    for (float v : im) {
      all.push_back(v);
      labels.push_back(0);
    }
  for (const auto& im : neg)
    for (float v : im) {
      all.push_back(v);
      labels.push_back(1);
    }
  const auto r = ap_assays(in, neg, 1, Rng(7));
  EXPECT_DOUBLE_EQ(r.mean, average_precision(all, labels));
  EXPECT_EQ(r.std, 0.0);
}

TEST(Assays, RandomScoresGiveHalf) {
  Rng rng(3);
  std::vector<std::vector<float>> in(10, std::vector<float>(400)), neg(40, std::vector<float>(100));
  for (auto* pool : {&in, &neg})
    for (auto& im : *pool)
      for (auto& v : im) v = static_cast<float>(rng.uniform());
  const auto r = ap_assays(in, neg, 50, Rng(11));
  EXPECT_EQ(r.per_assay.size(), 50u);
  EXPECT_GE(r.mean, 0.45);
  EXPECT_LE(r.mean, 0.55);
  const auto again = ap_assays(in, neg, 50, Rng(11));
  EXPECT_EQ(again.mean, r.mean);
  EXPECT_EQ(again.std, r.std);
}

TEST(Confusion, PerfectPrediction) {
  const std::vector<std::vector<std::uint8_t>> pred{{0, 1, 2}};
  EXPECT_DOUBLE_EQ(miou(pred, {row({0, 1, 2})}, 3).miou, 1.0);
}

TEST(Confusion, HandValue) {
  const auto r = miou({{0, 1, 1, 1}}, {row({0, 0, 1, 1})}, 2);
  EXPECT_DOUBLE_EQ(r.per_class_iou[0], 0.5);
  EXPECT_DOUBLE_EQ(r.per_class_iou[1], 2.0 / 3.0);
  EXPECT_NEAR(r.miou, 0.5833, 5e-5);
}

TEST(Confusion, IgnoredPixelsDoNotCount) {
  LabelPair gt = row({0, 0, 1, 1, 0});
  gt.z[4] = kIgnore;
  gt.y[4] = kFileIgnore;
  const double a = miou({{0, 1, 1, 1, 0}}, {gt}, 2).miou;
  const double b = miou({{0, 1, 1, 1, 1}}, {gt}, 2).miou;
  EXPECT_EQ(a, b);
}

TEST(Confusion, VoidIsAMiss) {
  const auto r = miou({{0, 2, 1, 1}}, {row({0, 0, 1, 1})}, 2);
  EXPECT_DOUBLE_EQ(r.per_class_iou[0], 0.5);
  EXPECT_DOUBLE_EQ(r.per_class_iou[1], 1.0);
}

TEST(Confusion, AbsentClassIsNan) {
  const auto r = miou({{0, 0}}, {row({0, 0})}, 3);
  EXPECT_TRUE(std::isnan(r.per_class_iou[2]));
  EXPECT_DOUBLE_EQ(r.miou, 1.0);
}

TEST(HazardDrop, Arithmetic) {
  const auto d = hazard_drop({{"blur", 0.4}, {"noise", 0.5}}, 0.5);
  EXPECT_NEAR(d.at("blur"), -20.0, 1e-12);
  EXPECT_EQ(d.at("noise"), 0.0);
}

TEST(EvalReport, JsonNullsNan) {
  EvalReport r;
  r.score_mode = "twohead";
  r.per_class_iou = {0.5, std::nan("")};
  const auto j = nlohmann::json::parse(r.to_json());
  EXPECT_TRUE(j["per_class_iou"][1].is_null());
  EXPECT_EQ(j["score_mode"], "twohead");
  EXPECT_NE(render_table({r}).find("twohead"), std::string::npos);
}
