#include "osseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace osseg {

std::string_view to_string(NegativesMode m) {
  switch (m) {
    case NegativesMode::full: return "full";
    case NegativesMode::bb: return "bb";
    case NegativesMode::none: return "none";
  }
  return "?";
}

NegativesMode parse_negatives_mode(std::string_view text) {
  for (auto m : {NegativesMode::full, NegativesMode::bb, NegativesMode::none})
    if (to_string(m) == text) return m;
  throw std::invalid_argument("unknown negatives_mode '" + std::string(text) +
                              "' (expected full|bb|none)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be at least 2");
  if (!(learning_rate >= 0)) throw std::invalid_argument("learning_rate must be non-negative");
  if (!(pretrained_lr_divisor > 0)) throw std::invalid_argument("pretrained_lr_divisor must be positive");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1))
    throw std::invalid_argument("Adam betas must be in [0, 1)");
  if (!(threshold >= 0 && threshold <= 1)) throw std::invalid_argument("threshold must be in [0, 1]");
  if (crop == 0 || crop % 32 != 0) throw std::invalid_argument("crop must be a positive multiple of 32");
  model.validate();
  loss.validate();
  inliers.validate();
  if (crop > inliers.image_size) throw std::invalid_argument("crop exceeds image_size");
  if (negatives_mode != NegativesMode::none) negatives.validate();
  if (inliers.kind == DatasetKind::synthetic && train_count == 0)
    throw std::invalid_argument("train_count must be positive");
  if (negatives_mode != NegativesMode::none && negatives.kind == DatasetKind::synthetic &&
      negative_count == 0)
    throw std::invalid_argument("negative_count must be positive");
}

const std::set<std::string>& train_config_keys() {
  static const std::set<std::string> keys{
      "epochs", "batch_size", "learning_rate", "pretrained_lr_divisor", "adam_beta1",
      "adam_beta2", "adam_eps", "seed", "head_kind", "paste", "paste_fraction",
      "negatives_mode", "threshold", "crop", "num_classes", "backbone_widths", "ladder_width",
      "dropout_p", "lambda_mc", "lambda_ml", "lambda_aux", "lambda_th", "lambda_kl", "lambda_c",
      "class_weights", "cplus1_outlier_weight", "beta", "aux_resolutions", "image_size",
      "noise", "data_seed", "train_count", "negative_count", "data_dir", "negative_dir"};
  return keys;
}

namespace {

std::vector<double> parse_list(const KeyValues& kv, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(kv.get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    KeyValues one = KeyValues::parse("v=" + item, kv.source());
    out.push_back(one.get_double("v", 0));
  }
  if (out.empty()) throw ConfigError(kv.source() + ": key '" + key + "' expects a list");
  return out;
}

}  // namespace

DatasetSpec dataset_spec_from(const KeyValues& kv) {
  kv.check({"num_classes", "image_size", "seed", "source", "noise", "paste_fraction", "hazard"}, {});
  DatasetSpec s;
  s.num_classes = kv.get_size("num_classes", s.num_classes);
  s.image_size = kv.get_size("image_size", s.image_size);
  s.seed = kv.get_size("seed", s.seed);
  s.noise = kv.get_double("noise", s.noise);
  s.paste_fraction = kv.get_double("paste_fraction", s.paste_fraction);
  try {
    if (kv.has("source")) s.source = parse_source_tag(kv.get("source"));
    if (kv.has("hazard")) s.hazard = parse_hazard(kv.get("hazard"));
    s.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(kv.source() + ": " + e.what());
  }
  return s;
}

TrainConfig train_config_from(const KeyValues& kv) {
  kv.check(train_config_keys(), {"epochs", "batch_size", "learning_rate", "seed", "head_kind"});
  TrainConfig c;
  c.epochs = kv.get_size("epochs", c.epochs);
  c.batch_size = kv.get_size("batch_size", c.batch_size);
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.pretrained_lr_divisor = kv.get_double("pretrained_lr_divisor", c.pretrained_lr_divisor);
  c.adam_beta1 = kv.get_double("adam_beta1", c.adam_beta1);
  c.adam_beta2 = kv.get_double("adam_beta2", c.adam_beta2);
  c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
  c.seed = kv.get_size("seed", 0);
  c.paste = kv.get_bool("paste", c.paste);
  c.paste_fraction = kv.get_double("paste_fraction", c.paste_fraction);
  c.threshold = kv.get_double("threshold", c.threshold);
  c.crop = kv.get_size("crop", c.crop);
  try {
    c.model.head_kind = parse_head_kind(kv.get("head_kind"));
    c.negatives_mode = parse_negatives_mode(kv.get_string("negatives_mode", "full"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(kv.source() + ": " + e.what());
  }
  c.model.num_classes = kv.get_size("num_classes", c.model.num_classes);
  if (kv.has("backbone_widths")) {
    const auto w = parse_list(kv, "backbone_widths");
    if (w.size() != 4) throw ConfigError(kv.source() + ": backbone_widths needs 4 entries");
    for (std::size_t i = 0; i < 4; ++i) c.model.backbone_widths[i] = static_cast<std::size_t>(w[i]);
  }
  c.model.ladder_width = kv.get_size("ladder_width", c.model.ladder_width);
  c.model.dropout_p = kv.get_double("dropout_p", c.model.dropout_p);

  c.loss.lambda_mc = kv.get_double("lambda_mc", c.loss.lambda_mc);
  c.loss.lambda_ml = kv.get_double("lambda_ml", c.loss.lambda_ml);
  c.loss.lambda_aux = kv.get_double("lambda_aux", c.loss.lambda_aux);
  c.loss.lambda_th = kv.get_double("lambda_th", c.loss.lambda_th);
  c.loss.lambda_kl = kv.get_double("lambda_kl", c.loss.lambda_kl);
  c.loss.lambda_c = kv.get_double("lambda_c", c.loss.lambda_c);
  c.loss.cplus1_outlier_weight = kv.get_double("cplus1_outlier_weight", c.loss.cplus1_outlier_weight);
  c.loss.beta = kv.get_double("beta", c.loss.beta);
  if (kv.has("class_weights")) c.loss.class_weights = parse_list(kv, "class_weights");
  if (kv.has("aux_resolutions")) {
    c.loss.aux_resolutions.clear();
    for (double r : parse_list(kv, "aux_resolutions"))
      c.loss.aux_resolutions.push_back(static_cast<std::size_t>(r));
  }

  c.inliers.num_classes = c.model.num_classes;
  c.inliers.image_size = kv.get_size("image_size", c.inliers.image_size);
  c.inliers.noise = kv.get_double("noise", c.inliers.noise);
  c.inliers.seed = kv.get_size("data_seed", 0);
  c.inliers.source = SourceTag::inlier;
  c.negatives = c.inliers;
  c.negatives.source =
      c.negatives_mode == NegativesMode::bb ? SourceTag::negative_bb : SourceTag::negative;
  c.negatives.paste_fraction = c.paste_fraction;
  if (kv.has("data_dir")) {
    c.inliers.kind = DatasetKind::directory;
    c.inliers.path = kv.get("data_dir");
  }
  if (kv.has("negative_dir")) {
    c.negatives.kind = DatasetKind::directory;
    c.negatives.path = kv.get("negative_dir");
  }
  c.train_count = kv.get_size("train_count", c.train_count);
  c.negative_count = kv.get_size("negative_count", c.negative_count);
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(kv.source() + ": " + e.what());
  }
  return c;
}

std::string EpochLog::to_json() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["batches"] = batches;
  j["loss_total"] = loss_total;
  for (const auto& [k, v] : components) j["loss_" + k] = v;
  j["lambda_c"] = lambda_c;
  j["wall_seconds"] = wall_seconds;
  return j.dump();
}

Adam::Adam(std::vector<double> learning_rates, double beta1, double beta2, double eps)
    : lr_(std::move(learning_rates)), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(std::vector<Parameter>& params, const std::vector<Tensor>& grads) {
  if (params.size() != lr_.size() || grads.size() != params.size())
    throw std::invalid_argument("Adam: parameter, gradient and learning-rate counts differ");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.value.numel(), 0.0f);
      v_.emplace_back(p.value.numel(), 0.0f);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.data();
    const auto g = grads[i].data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double lr = lr_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = static_cast<float>(b1_ * m[k] + (1 - b1_) * g[k]);
      v[k] = static_cast<float>(b2_ * v[k] + (1 - b2_) * static_cast<double>(g[k]) * g[k]);
      const double update = lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
      w[k] = static_cast<float>(w[k] - update);
    }
  }
}

std::vector<Sample> load_all(const DatasetSpec& spec, std::size_t count) {
  std::vector<Sample> out;
  if (spec.kind == DatasetKind::directory) {
    DirectoryDataset ds(spec);
    for (std::size_t i = 0; i < ds.size(); ++i) out.push_back(ds.load(i));
    return out;
  }
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_synthetic(spec, i));
  return out;
}

namespace {

Tensor stack_images(const std::vector<Sample>& batch) {
  const std::size_t H = batch.front().height(), W = batch.front().width();
  Tensor x(Shape{batch.size(), 3, H, W});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].height() != H || batch[i].width() != W)
      throw ShapeError("batch mixes image sizes");
    std::copy(batch[i].image.data().begin(), batch[i].image.data().end(), &x[i * 3 * H * W]);
  }
  return x;
}

bool all_finite(const std::vector<Tensor>& ts) {
  for (const auto& t : ts)
    for (float v : t.data())
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

TrainResult train(const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  const Rng root(config.seed);
  const std::size_t N_C = config.model.num_classes;

  std::vector<Sample> inlier_pool = load_all(config.inliers, config.train_count);
  if (inlier_pool.empty()) throw DataError("no inlier training images");
  std::vector<Sample> negative_pool;
  if (config.negatives_mode != NegativesMode::none) {
    negative_pool = load_all(config.negatives, config.negative_count);
    if (negative_pool.empty()) throw DataError("no negative training images");
  }
  for (const auto& s : inlier_pool)
    if (s.height() < config.crop || s.width() < config.crop)
      throw DataError("training image smaller than the crop size");

  SampleStream inliers([&](std::size_t i) { return inlier_pool[i]; }, inlier_pool.size(),
                       root.derive("inlier-order"));
  std::optional<SampleStream> negatives;
  if (!negative_pool.empty())
    negatives.emplace([&](std::size_t i) { return negative_pool[i]; }, negative_pool.size(),
                      root.derive("negative-order"));

  TrainResult result;
  result.checkpoint.seed = config.seed;
  Model& model = result.checkpoint.model;
  model = Model::build(config.model, root.derive("init"));
  std::vector<double> rates;
  for (const auto& p : model.parameters())
    rates.push_back(p.backbone ? config.learning_rate / config.pretrained_lr_divisor
                               : config.learning_rate);
  Adam adam(rates, config.adam_beta1, config.adam_beta2, config.adam_eps);
  LossConfig loss_config = config.loss;
  const bool confidence = config.model.head_kind == HeadKind::confidence;

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch;
    const std::size_t first = inliers.consumed();
    while (inliers.consumed() - first < inlier_pool.size()) {
      Rng brng = root.derive("batch").derive(step);
      Rng mix = brng.derive("mix");
      std::vector<Sample> batch;
      if (negatives) {
        batch = form_batch(inliers, *negatives, config.batch_size, config.paste, N_C,
                           config.paste_fraction, mix);
      } else {
        for (std::size_t i = 0; i < config.batch_size; ++i) batch.push_back(inliers.next());
      }
      std::vector<LabelPair> labels;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        Rng aug = brng.derive("augment").derive(i);
        batch[i] = augment(batch[i], config.crop, aug);
        labels.push_back(batch[i].labels);
      }

      ad::Tape<float> tape;
      auto params = model.register_parameters(tape, true);
      auto x = tape.constant(stack_images(batch));
      auto out = model.forward<float>(params, x, ForwardMode::train, brng.derive("dropout"));
      TotalLossOptions opts;
      opts.interpolate_confidence = confidence && step % 2 == 1;
      auto loss = total_loss<float>(config.model.head_kind, out, labels, N_C, loss_config, opts);
      const double value = loss.total.value()[0];
      auto grads = tape.grad(loss.total, params);
      if (!std::isfinite(value) || !all_finite(grads))
        throw TrainingDiverged("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(step) + " (seed " + std::to_string(config.seed) +
                               ", batch stream key " + std::to_string(brng.key()) + ")");
      adam.step(model.parameters(), grads);

      log.loss_total += value;
      for (const auto& [k, v] : loss.components) log.components[k] += v;
      if (confidence && loss.components.count("conf"))
        loss_config.lambda_c =
            adapt_lambda_c(loss_config.lambda_c, loss.components.at("conf"), loss_config.beta);
      ++log.batches;
      ++step;
    }
    log.loss_total /= static_cast<double>(log.batches);
    for (auto& [k, v] : log.components) v /= static_cast<double>(log.batches);
    log.lambda_c = loss_config.lambda_c;
    log.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (hooks.log) *hooks.log << log.to_json() << '\n' << std::flush;
    result.log.push_back(log);
    result.checkpoint.epoch = epoch;
    if (hooks.on_epoch) hooks.on_epoch(result.checkpoint);
  }
  result.steps = step;
  return result;
}

// --- evaluation ------------------------------------------------------------

EvalData EvalData::from_directory(const DirectoryDataset& ds) {
  EvalData d;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string& tag = ds.entry(i).tag;
    if (tag == "inlier") d.inliers.push_back(ds.load(i));
    else if (tag == "negative" || tag == "negative_bb") d.negatives.push_back(ds.load(i));
    else if (tag == "pasted") d.pasted.push_back(ds.load(i));
    else if (tag.rfind("hazard_", 0) == 0) d.hazards[tag.substr(7)].push_back(ds.load(i));
  }
  return d;
}

EvalData EvalData::synthetic(const DatasetSpec& spec, std::size_t count, std::size_t negative_factor) {
  EvalData d;
  auto part = [&](SourceTag src, Hazard h, std::size_t n) {
    DatasetSpec s = spec;
    s.source = src;
    s.hazard = h;
    return load_all(s, n);
  };
  d.inliers = part(SourceTag::inlier, Hazard::none, count);
  d.negatives = part(SourceTag::negative, Hazard::none, count * negative_factor);
  d.pasted = part(SourceTag::pasted, Hazard::none, count);
  for (auto h : kHazards) d.hazards[std::string(to_string(h))] = part(SourceTag::inlier, h, count);
  return d;
}

std::vector<PredictionMaps> predict_all(Model& model, const std::vector<Sample>& samples,
                                        const EvalConfig& config) {
  std::vector<PredictionMaps> out;
  const Rng root(config.seed);
  for (std::size_t b = 0; b < samples.size(); b += config.batch_size) {
    const std::size_t e = std::min(samples.size(), b + config.batch_size);
    std::vector<Sample> chunk(samples.begin() + static_cast<long>(b),
                              samples.begin() + static_cast<long>(e));
    PredictOptions opts;
    opts.mode = config.mode;
    opts.threshold = config.threshold;
    opts.odin_temperature = config.odin_temperature;
    opts.odin_epsilon = config.odin_epsilon;
    opts.mc_passes = config.mc_passes;
    opts.rng = root.derive("predict").derive(b);
    auto maps = predict(model, stack_images(chunk), opts);
    for (auto& m : maps) out.push_back(std::move(m));
  }
  return out;
}

namespace {

std::vector<std::vector<std::uint8_t>> merged_of(const std::vector<PredictionMaps>& maps) {
  std::vector<std::vector<std::uint8_t>> out;
  for (const auto& m : maps) out.push_back(m.merged);
  return out;
}

std::vector<LabelPair> labels_of(const std::vector<Sample>& samples) {
  std::vector<LabelPair> out;
  for (const auto& s : samples) out.push_back(s.labels);
  return out;
}

/// Scores of pixels whose z equals `z`.
std::vector<float> scores_where(const PredictionMaps& m, const LabelPair& l, std::uint8_t z) {
  std::vector<float> out;
  for (std::size_t i = 0; i < l.size(); ++i)
    if (l.z[i] == z) out.push_back(m.outlier_prob[i]);
  return out;
}

}  // namespace

EvalReport score_predictions(const EvalData& data, const EvalPredictions& pred,
                             std::size_t num_classes, const EvalConfig& config) {
  if (data.inliers.empty()) throw DataError("evaluation needs inlier images");
  if (data.negatives.empty()) throw DataError("evaluation needs negative images");
  if (data.pasted.empty()) throw DataError("evaluation needs pasted images");
  if (pred.inliers.size() != data.inliers.size() || pred.negatives.size() != data.negatives.size() ||
      pred.pasted.size() != data.pasted.size())
    throw std::invalid_argument("score_predictions: prediction and data counts differ");

  EvalReport r;
  r.score_mode = std::string(to_string(config.mode));
  r.num_assays = config.assays;
  r.threshold = config.threshold;

  std::vector<std::vector<float>> inlier_scores, negative_scores;
  for (std::size_t i = 0; i < pred.inliers.size(); ++i)
    inlier_scores.push_back(scores_where(pred.inliers[i], data.inliers[i].labels, kInlier));
  for (std::size_t i = 0; i < pred.negatives.size(); ++i)
    negative_scores.push_back(scores_where(pred.negatives[i], data.negatives[i].labels, kOutlier));
  const auto assays = ap_assays(inlier_scores, negative_scores, config.assays,
                                Rng(config.seed).derive("assays"));
  r.ap_mean = assays.mean;
  r.ap_std = assays.std;

  std::vector<float> scores;
  std::vector<std::uint8_t> positive;
  for (std::size_t i = 0; i < pred.pasted.size(); ++i) {
    const auto& l = data.pasted[i].labels;
    for (std::size_t k = 0; k < l.size(); ++k)
      if (l.z[k] != kIgnore) {
        scores.push_back(pred.pasted[i].outlier_prob[k]);
        positive.push_back(l.z[k] == kOutlier);
      }
  }
  r.pasted_ap = average_precision(scores, positive);

  const auto classic = miou(merged_of(pred.inliers), labels_of(data.inliers), num_classes);
  r.per_class_iou = classic.per_class_iou;
  r.miou = classic.miou;
  r.negative_miou = miou(merged_of(pred.pasted), labels_of(data.pasted), num_classes).miou;
  for (const auto& [name, maps] : pred.hazards)
    r.hazard_miou[name] = miou(merged_of(maps), labels_of(data.hazards.at(name)), num_classes).miou;
  if (!r.hazard_miou.empty() && r.miou > 0) r.hazard_drops = hazard_drop(r.hazard_miou, r.miou);
  return r;
}

EvalReport evaluate(Model& model, const EvalData& data, const EvalConfig& config) {
  if (data.inliers.empty()) throw DataError("evaluation needs inlier images");
  if (data.negatives.empty()) throw DataError("evaluation needs negative images");
  if (data.pasted.empty()) throw DataError("evaluation needs pasted images");
  check_compatible(config.mode, model.config().head_kind);
  EvalPredictions pred;
  pred.inliers = predict_all(model, data.inliers, config);
  pred.negatives = predict_all(model, data.negatives, config);
  pred.pasted = predict_all(model, data.pasted, config);
  for (const auto& [name, samples] : data.hazards)
    if (!samples.empty()) pred.hazards[name] = predict_all(model, samples, config);
  return score_predictions(data, pred, model.config().num_classes, config);
}

}  // namespace osseg
