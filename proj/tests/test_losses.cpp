#include <gtest/gtest.h>

#include <cmath>

#include "osseg/losses.hpp"

using namespace osseg;
using TD = BasicTensor<double>;

namespace {

LabelPair pixel(std::uint8_t y, std::uint8_t z) { return LabelPair(1, 1, y, z); }

// One-pixel logits [1,K,1,1].
ad::Var<double> logits(ad::Tape<double>& tape, std::vector<double> values) {
  const std::size_t k = values.size();
  return tape.constant(TD(Shape{1, k, 1, 1}, std::move(values)));
}

double value(ad::Var<double> v) { return v.value().item(); }

const std::vector<double> kOnes3{1, 1, 1};

}  // namespace

TEST(LossMc, UniformLogitsThreeClasses) {
  ad::Tape<double> tape;
  const std::vector<LabelPair> y{pixel(0, kInlier)};
  EXPECT_NEAR(value(loss_mc<double>(logits(tape, {0, 0, 0}), y, kOnes3)), 1.0986, 5e-5);
}

TEST(LossMc, GatesIgnoreAndOutlierPixels) {
  ad::Tape<double> tape;
  auto l = logits(tape, {0.3, -1, 2});
  EXPECT_EQ(value(loss_mc<double>(l, std::vector{pixel(kFileIgnore, kIgnore)}, kOnes3)), 0.0);
  EXPECT_EQ(value(loss_mc<double>(l, std::vector{pixel(3, kOutlier)}, kOnes3)), 0.0);
}

TEST(LossMc, ZeroContributorsGiveZeroGradient) {
  ad::Tape<double> tape;
  auto l = tape.variable(TD(Shape{1, 3, 1, 1}, {1, 2, 3}));
  auto loss = loss_mc<double>(l, std::vector{pixel(3, kOutlier)}, kOnes3);
  const auto grads = tape.grad(loss, {l});
  for (double g : grads[0].data()) EXPECT_EQ(g, 0.0);
}

TEST(LossMc, ClassWeightScalesPixel) {
  ad::Tape<double> tape;
  const std::vector<double> w{2, 1, 1};
  EXPECT_NEAR(value(loss_mc<double>(logits(tape, {0, 0, 0}), std::vector{pixel(0, kInlier)}, w)),
              2 * std::log(3.0), 1e-12);
}

TEST(LossMc, AveragesOverContributingPixels) {
  ad::Tape<double> tape;
  LabelPair y(1, 2, 0, kInlier);
  y.y[1] = kFileIgnore;
  y.z[1] = kIgnore;
  auto l = tape.constant(TD(Shape{1, 3, 1, 2}, {0, 5, 0, 5, 0, 5}));
  EXPECT_NEAR(value(loss_mc<double>(l, std::vector{y}, kOnes3)), std::log(3.0), 1e-12);
}

TEST(LossMl, HandValues) {
  ad::Tape<double> tape;
  EXPECT_NEAR(value(loss_ml<double>(logits(tape, {0, 0}), std::vector{pixel(0, kInlier)}, 2)), 1.3863, 5e-5);
  EXPECT_NEAR(value(loss_ml<double>(logits(tape, {0, 0}), std::vector{pixel(2, kOutlier)}, 2)), 1.3863, 5e-5);
  EXPECT_EQ(value(loss_ml<double>(logits(tape, {0, 0}), std::vector{pixel(kFileIgnore, kIgnore)}, 2)), 0.0);
}

TEST(SoftTargets, WindowCounting) {
  LabelPair all0(2, 2, 0, kInlier);
  auto t = soft_targets(all0, 2, 3);
  ASSERT_EQ(t.valid.size(), 1u);
  EXPECT_TRUE(t.valid[0]);
  EXPECT_EQ(t.dist, (std::vector<double>{1, 0, 0}));

  LabelPair mixed(2, 2, 0, kInlier);
  mixed.y[3] = 1;
  t = soft_targets(mixed, 2, 2);
  EXPECT_TRUE(t.valid[0]);
  EXPECT_DOUBLE_EQ(t.dist[0], 0.75);
  EXPECT_DOUBLE_EQ(t.dist[1], 0.25);

  LabelPair half(2, 2, 0, kInlier);
  half.y[0] = half.y[1] = 3;
  half.z[0] = half.z[1] = kOutlier;
  EXPECT_FALSE(soft_targets(half, 2, 2).valid[0]);

  LabelPair three(2, 2, 0, kInlier);
  three.y[0] = kFileIgnore;
  three.z[0] = kIgnore;
  EXPECT_TRUE(soft_targets(three, 2, 2).valid[0]);
}

TEST(LossAux, HandValues) {
  const std::vector<std::size_t> res{2};
  {
    ad::Tape<double> tape;
    const std::vector<ad::Var<double>> aux{logits(tape, {0, 0})};
    EXPECT_NEAR(value(loss_aux<double>(aux, std::vector{LabelPair(2, 2, 0, kInlier)}, res, 2)), 0.6931, 5e-5);
  }
  {
    ad::Tape<double> tape;
    LabelPair mixed(2, 2, 0, kInlier);
    mixed.y[3] = 1;
    const std::vector<ad::Var<double>> aux{logits(tape, {std::log(3.0), 0})};
    EXPECT_NEAR(value(loss_aux<double>(aux, std::vector{mixed}, res, 2)), 0.5623, 5e-5);
  }
  {
    ad::Tape<double> tape;
    const std::vector<ad::Var<double>> aux{logits(tape, {1, -1})};
    EXPECT_EQ(value(loss_aux<double>(aux, std::vector{LabelPair(2, 2, 3, kOutlier)}, res, 2)), 0.0);
  }
}

TEST(LossTh, HandValues) {
  ad::Tape<double> tape;
  EXPECT_NEAR(value(loss_th<double>(logits(tape, {0, 0}), std::vector{pixel(0, kInlier)})), 0.6931, 5e-5);
  EXPECT_EQ(value(loss_th<double>(logits(tape, {0, 0}), std::vector{pixel(kFileIgnore, kIgnore)})), 0.0);
  EXPECT_LT(value(loss_th<double>(logits(tape, {-20, 20}), std::vector{pixel(4, kOutlier)})), 1e-12);
}

TEST(LossKl, HandValues) {
  ad::Tape<double> tape;
  EXPECT_NEAR(value(loss_kl<double>(logits(tape, {0.7, 0.7, 0.7, 0.7}), std::vector{pixel(4, kOutlier)})), 0.0,
              1e-12);
  EXPECT_NEAR(value(loss_kl<double>(logits(tape, {std::log(9.0), 0}), std::vector{pixel(2, kOutlier)})), 0.5108,
              5e-5);
  EXPECT_EQ(value(loss_kl<double>(logits(tape, {3, 0}), std::vector{pixel(0, kInlier)})), 0.0);
}

TEST(InterpolateConfidence, HandValues) {
  ad::Tape<double> tape;
  auto p = tape.constant(TD(Shape{1, 2, 1, 1}, {0.2, 0.8}));
  auto onehot = tape.constant(TD(Shape{1, 2, 1, 1}, {1, 0}));
  auto c = [&](double v) { return tape.constant(TD(Shape{1, 1, 1, 1}, v)); };
  const auto mixed = interpolate_confidence<double>(p, c(0.5), onehot).value();
  EXPECT_NEAR(mixed[0], 0.6, 1e-12);
  EXPECT_NEAR(mixed[1], 0.4, 1e-12);
  EXPECT_EQ(interpolate_confidence<double>(p, c(1.0), onehot).value(), p.value());
  EXPECT_EQ(interpolate_confidence<double>(p, c(0.0), onehot).value(), onehot.value());
}

TEST(LossMcInterpolated, ZeroConfidenceGivesZeroNll) {
  ad::Tape<double> tape;
  auto c = tape.constant(TD(Shape{1, 1, 1, 1}, 0.0));
  const std::vector<double> w{1, 1};
  EXPECT_NEAR(value(loss_mc_interpolated<double>(logits(tape, {3, -2}), c, std::vector{pixel(1, kInlier)}, w)),
              0.0, 1e-12);
  auto one = tape.constant(TD(Shape{1, 1, 1, 1}, 1.0));
  EXPECT_NEAR(value(loss_mc_interpolated<double>(logits(tape, {0, 0}), one, std::vector{pixel(1, kInlier)}, w)),
              std::log(2.0), 1e-12);
}

TEST(LossConf, HandValues) {
  ad::Tape<double> tape;
  auto c = [&](double a, double b) { return tape.constant(TD(Shape{1, 1, 1, 2}, {a, b})); };
  LabelPair y(1, 2, 0, kInlier);
  EXPECT_NEAR(value(loss_conf<double>(c(1, 1), std::vector{y}, 3)), 0.0, 1e-12);
  EXPECT_NEAR(value(loss_conf<double>(c(0.5, 0.5), std::vector{y}, 3)), 0.6931, 5e-5);
  y.y[1] = 3;
  y.z[1] = kOutlier;
  EXPECT_EQ(value(loss_conf<double>(c(0.5, 0.9), std::vector{y}, 3)),
            value(loss_conf<double>(c(0.5, 0.1), std::vector{y}, 3)));
}

namespace {

// Stride-4 outputs for a 32x32 label map, all logits zero.
ModelOutput<double> zero_output(ad::Tape<double>& tape, HeadKind kind, std::size_t classes) {
  ModelOutput<double> out;
  const std::size_t cc = kind == HeadKind::cplus1 ? classes + 1 : classes;
  out.class_logits = tape.variable(TD(Shape{1, cc, 8, 8}));
  const std::size_t sizes[] = {8, 4, 2, 1};
  for (std::size_t k = 0; k < 4; ++k) out.aux_logits[k] = tape.variable(TD(Shape{1, classes, sizes[k], sizes[k]}));
  if (kind == HeadKind::twohead) out.outlier_logits = tape.variable(TD(Shape{1, 2, 8, 8}));
  if (kind == HeadKind::confidence) out.confidence = tape.constant(TD(Shape{1, 1, 8, 8}, 0.5));
  return out;
}

}  // namespace

TEST(TotalLoss, TwoHeadComposition) {
  ad::Tape<double> tape;
  const auto out = zero_output(tape, HeadKind::twohead, 3);
  const std::vector<LabelPair> y{LabelPair(32, 32, 0, kInlier)};
  LossConfig cfg;
  const auto loss = total_loss<double>(HeadKind::twohead, out, y, 3, cfg);
  const double expected = 0.6 * 1.0986 + 0.2 * 0.6931 + 0.4 * 1.0986;
  EXPECT_NEAR(value(loss.total), expected, 1e-4);
  EXPECT_NEAR(loss.components.at("mc"), 1.0986, 5e-5);
  EXPECT_NEAR(loss.components.at("th"), 0.6931, 5e-5);
  EXPECT_NEAR(loss.components.at("aux"), 1.0986, 5e-5);
}

TEST(TotalLoss, ZeroWeightsGiveZero) {
  for (auto kind : {HeadKind::multiclass, HeadKind::multilabel, HeadKind::cplus1, HeadKind::twohead,
                    HeadKind::confidence}) {
    ad::Tape<double> tape;
    const auto out = zero_output(tape, kind, 3);
    LabelPair y(32, 32, 1, kInlier);
    for (std::size_t i = 0; i < 100; ++i) {
      y.y[i] = 3;
      y.z[i] = kOutlier;
    }
    LossConfig cfg;
    cfg.lambda_mc = cfg.lambda_ml = cfg.lambda_aux = cfg.lambda_th = cfg.lambda_kl = cfg.lambda_c = 0;
    EXPECT_EQ(value(total_loss<double>(kind, out, std::vector{y}, 3, cfg).total), 0.0) << to_string(kind);
  }
}

TEST(TotalLoss, MulticlassAddsKlOnOutliers) {
  ad::Tape<double> tape;
  const auto out = zero_output(tape, HeadKind::multiclass, 3);
  LabelPair y(32, 32, 0, kInlier);
  y.y[0] = 3;
  y.z[0] = kOutlier;
  LossConfig cfg;
  cfg.lambda_aux = 0;
  const auto loss = total_loss<double>(HeadKind::multiclass, out, std::vector{y}, 3, cfg);
  EXPECT_NEAR(loss.components.at("kl"), 0.0, 1e-12);  // zero logits are uniform
  EXPECT_NEAR(value(loss.total), 0.6 * std::log(3.0), 1e-9);
}

TEST(TotalLoss, RejectsMissingHead) {
  ad::Tape<double> tape;
  const auto out = zero_output(tape, HeadKind::multiclass, 3);
  LossConfig cfg;
  EXPECT_THROW(total_loss<double>(HeadKind::twohead, out, std::vector{LabelPair(32, 32, 0, kInlier)}, 3, cfg),
               std::invalid_argument);
}

TEST(LossConfig, WeightsForCplus1AppendsOutlierWeight) {
  LossConfig cfg;
  EXPECT_EQ(cfg.weights_for(HeadKind::cplus1, 2), (std::vector<double>{1, 1, 0.05}));
  EXPECT_EQ(cfg.weights_for(HeadKind::twohead, 2), (std::vector<double>{1, 1}));
  cfg.class_weights = {1, 2};
  EXPECT_THROW(cfg.weights_for(HeadKind::multiclass, 3), std::invalid_argument);
}

TEST(AdaptLambdaC, MovesTowardBudget) {
  EXPECT_DOUBLE_EQ(adapt_lambda_c(0.1, 0.3, 0.15), 0.1 * 1.01);
  EXPECT_DOUBLE_EQ(adapt_lambda_c(0.1, 0.1, 0.15), 0.1 / 1.01);
}
