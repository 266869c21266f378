#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "json.hpp"
#include "osseg/trainer.hpp"

using namespace osseg;

namespace {

TrainConfig tiny(HeadKind kind) {
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 4;
  c.crop = 32;
  c.model.head_kind = kind;
  c.model.num_classes = 4;
  c.model.backbone_widths = {4, 6, 8, 8};
  c.model.ladder_width = 6;
  c.inliers.image_size = 32;
  c.inliers.num_classes = 4;
  c.negatives = c.inliers;
  c.negatives.source = SourceTag::negative;
  c.train_count = 8;
  c.negative_count = 8;
  return c;
}

EvalData tiny_eval() {
  DatasetSpec s;
  s.image_size = 32;
  s.seed = 9;
  return EvalData::synthetic(s, 3);
}

// Predictions that put outlier probability exactly where z = 0.
std::vector<PredictionMaps> oracle(const std::vector<Sample>& samples, std::size_t classes, bool constant) {
  std::vector<PredictionMaps> out;
  for (const auto& s : samples) {
    PredictionMaps m;
    m.num_classes = classes;
    m.height = s.height();
    m.width = s.width();
    m.class_probs = Tensor(Shape{classes, m.height, m.width});
    m.outlier_prob = Tensor(Shape{m.height, m.width});
    for (std::size_t p = 0; p < s.labels.size(); ++p) {
      m.outlier_prob[p] = constant ? 0.5f : (s.labels.z[p] == kOutlier ? 1.0f : 0.0f);
      if (s.labels.y[p] < classes) m.class_probs[s.labels.y[p] * s.labels.size() + p] = 1.0f;
      else m.class_probs[p] = 1.0f;
    }
    m.merged = merge(m.class_probs, m.outlier_prob, 0.5);
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<Parameter> params{{"w", Tensor(Shape{3}, {1, -2, 3}), false}};
  const auto before = params[0].value;
  Adam adam({1e-2}, 0.9, 0.999, 1e-8);
  for (int i = 0; i < 3; ++i) adam.step(params, {Tensor(Shape{3})});
  EXPECT_EQ(params[0].value, before);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  std::vector<Parameter> params{{"w", Tensor(Shape{2}, {0, 0}), false}};
  Adam adam({0.1}, 0.9, 0.999, 1e-8);
  adam.step(params, {Tensor(Shape{2}, {2.0f, -0.5f})});
  EXPECT_NEAR(params[0].value[0], -0.1f, 1e-6);
  EXPECT_NEAR(params[0].value[1], 0.1f, 1e-6);
}

TEST(Train, SameSeedBitIdenticalCheckpoint) {
  const auto c = tiny(HeadKind::twohead);
  EXPECT_EQ(serialize_checkpoint(train(c).checkpoint), serialize_checkpoint(train(c).checkpoint));
}

TEST(Train, DifferentSeedDifferentCheckpoint) {
  auto a = tiny(HeadKind::multiclass), b = a;
  b.seed = 1;
  EXPECT_NE(serialize_checkpoint(train(a).checkpoint), serialize_checkpoint(train(b).checkpoint));
}

TEST(Train, ZeroLearningRateKeepsParameters) {
  auto c = tiny(HeadKind::multiclass);
  c.learning_rate = 0;
  const auto trained = train(c).checkpoint.model;
  const auto init = Model::build(c.model, Rng(c.seed).derive("init"));
  for (std::size_t i = 0; i < init.parameters().size(); ++i)
    EXPECT_EQ(trained.parameters()[i].value, init.parameters()[i].value) << init.parameters()[i].name;
}

TEST(Train, LogHasOneRecordPerEpoch) {
  auto c = tiny(HeadKind::confidence);
  c.epochs = 2;
  std::ostringstream log;
  TrainHooks hooks;
  hooks.log = &log;
  const auto r = train(c, hooks);
  std::istringstream in(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["epoch"], ++n);
    for (const char* k : {"loss_total", "loss_mc", "loss_conf", "wall_seconds", "lambda_c"}) EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_EQ(n, 2u);
  EXPECT_EQ(r.checkpoint.epoch, 2u);
  EXPECT_NE(r.log.back().lambda_c, 0.1);
}

TEST(Train, EpochIsOnePassOverInliers) {
  auto c = tiny(HeadKind::multiclass);
  c.negatives_mode = NegativesMode::none;
  EXPECT_EQ(train(c).steps, 2u);
}

TEST(Train, LossDecreasesOnFixedBatch) {
  ModelConfig mc;
  mc.backbone_widths = {8, 12, 16, 16};
  mc.ladder_width = 12;
  Model model = Model::build(mc, Rng(0));
  DatasetSpec spec;
  std::vector<Sample> batch;
  std::vector<LabelPair> labels;
  for (std::size_t i = 0; i < 8; ++i) {
    batch.push_back(generate_synthetic(spec, i));
    labels.push_back(batch.back().labels);
  }
  Tensor x(Shape{8, 3, 64, 64});
  for (std::size_t i = 0; i < 8; ++i)
    std::copy(batch[i].image.data().begin(), batch[i].image.data().end(), &x[i * 3 * 64 * 64]);
  Adam adam(std::vector<double>(model.parameters().size(), 1e-3), 0.9, 0.999, 1e-8);
  LossConfig cfg;
  double previous = INFINITY;
  for (int step = 0; step < 5; ++step) {
    ad::Tape<float> tape;
    std::vector<ad::Var<float>> params;
    auto out = model.forward(tape, x, ForwardMode::train, Rng(0), &params, true);
    auto loss = total_loss<float>(HeadKind::multiclass, out, labels, 4, cfg);
    const double v = loss.total.value().item();
    EXPECT_LT(v, previous) << "step " << step;
    previous = v;
    adam.step(model.parameters(), tape.grad(loss.total, params));
  }
}

TEST(Train, TwoHeadWithoutThLossMatchesMulticlassClassHead) {
  auto th = tiny(HeadKind::twohead);
  th.loss.lambda_th = 0;
  auto mc = tiny(HeadKind::multiclass);
  mc.loss.lambda_kl = 0;
  const auto a = train(th).checkpoint.model, b = train(mc).checkpoint.model;
  for (const auto& p : b.parameters()) EXPECT_EQ(a.parameters()[a.index_of(p.name)].value, p.value) << p.name;
}

TEST(Train, RejectsBadConfig) {
  auto c = tiny(HeadKind::multiclass);
  c.batch_size = 0;
  EXPECT_THROW(train(c), std::invalid_argument);
  c = tiny(HeadKind::multiclass);
  c.crop = 48;
  EXPECT_THROW(train(c), std::invalid_argument);
}

TEST(Evaluate, PerfectScorerGivesApOne) {
  const auto data = tiny_eval();
  EvalPredictions p{oracle(data.inliers, 4, false), oracle(data.negatives, 4, false),
                    oracle(data.pasted, 4, false), {}};
  EvalConfig cfg;
  cfg.assays = 5;
  const auto r = score_predictions(data, p, 4, cfg);
  EXPECT_DOUBLE_EQ(r.ap_mean, 1.0);
  EXPECT_DOUBLE_EQ(r.pasted_ap, 1.0);
  EXPECT_DOUBLE_EQ(r.miou, 1.0);
}

TEST(Evaluate, ConstantScoresGivePositiveFraction) {
  const auto data = tiny_eval();
  EvalPredictions p{oracle(data.inliers, 4, true), oracle(data.negatives, 4, true),
                    oracle(data.pasted, 4, true), {}};
  EvalConfig cfg;
  const auto r = score_predictions(data, p, 4, cfg);
  std::size_t pos = 0, total = 0;
  for (const auto& s : data.pasted)
    for (std::size_t k = 0; k < s.labels.size(); ++k) {
      pos += s.labels.z[k] == kOutlier;
      total += s.labels.z[k] != kIgnore;
    }
  EXPECT_NEAR(r.pasted_ap, static_cast<double>(pos) / static_cast<double>(total), 1e-12);
  EXPECT_NEAR(r.ap_mean, 0.5, 0.05);
}

TEST(Evaluate, PureFunctionOfInputs) {
  auto c = tiny(HeadKind::twohead);
  Model m = train(c).checkpoint.model;
  const auto data = tiny_eval();
  EvalConfig cfg;
  cfg.mode = ScoreMode::twohead;
  cfg.assays = 4;
  EXPECT_EQ(evaluate(m, data, cfg).to_json(), evaluate(m, data, cfg).to_json());
}

TEST(Evaluate, MissingDataRejected) {
  Model m = Model::build(tiny(HeadKind::multiclass).model, Rng(0));
  auto data = tiny_eval();
  data.negatives.clear();
  EXPECT_THROW(evaluate(m, data, EvalConfig{}), DataError);
}

TEST(Evaluate, HeadScoreMismatchRejected) {
  Model m = Model::build(tiny(HeadKind::multiclass).model, Rng(0));
  EvalConfig cfg;
  cfg.mode = ScoreMode::twohead;
  EXPECT_THROW(evaluate(m, tiny_eval(), cfg), std::invalid_argument);
}

TEST(TrainConfig, StrictKeys) {
  const std::string base = "epochs = 1\nbatch_size = 4\nlearning_rate = 0.001\nseed = 3\nhead_kind = twohead\n";
  EXPECT_NO_THROW(train_config_from(KeyValues::parse(base, "cfg")));
  try {
    train_config_from(KeyValues::parse(base + "epochz = 2\n", "cfg"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("epochz"), std::string::npos);
  }
  try {
    train_config_from(KeyValues::parse("epochs = 1\nbatch_size = 4\nlearning_rate = 0.1\nhead_kind = twohead\n", "cfg"));
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("missing required key 'seed'"), std::string::npos);
  }
  EXPECT_THROW(KeyValues::parse(base + "seed = 4\n", "cfg"), ConfigError);
  EXPECT_THROW(train_config_from(KeyValues::parse(base + "paste = maybe\n", "cfg")), ConfigError);
  EXPECT_THROW(train_config_from(KeyValues::parse(base + "backbone_widths = 1,2\n", "cfg")), ConfigError);
}

TEST(TrainConfig, OverrideBeatsFile) {
  auto kv = KeyValues::parse("epochs = 1\nbatch_size = 4\nlearning_rate = 0\nseed = 3\nhead_kind = cplus1\n", "cfg");
  kv.set("seed", "11");
  const auto c = train_config_from(kv);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.learning_rate, 0.0);
  EXPECT_EQ(c.model.head_kind, HeadKind::cplus1);
}
