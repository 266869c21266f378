#pragma once

#include <functional>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "osseg/checkpoint.hpp"
#include "osseg/data.hpp"
#include "osseg/inference.hpp"
#include "osseg/losses.hpp"
#include "osseg/metrics.hpp"
#include "osseg/model.hpp"

namespace osseg {

enum class NegativesMode { full, bb, none };
std::string_view to_string(NegativesMode m);
NegativesMode parse_negatives_mode(std::string_view text);

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double learning_rate = 4e-4;
  double pretrained_lr_divisor = 4.0;  // applied to the backbone group
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool paste = true;
  double paste_fraction = 0.05;
  NegativesMode negatives_mode = NegativesMode::full;
  double threshold = 0.5;
  std::size_t crop = 64;

  ModelConfig model;  // head_kind lives here
  LossConfig loss;

  DatasetSpec inliers;    // synthetic source or directory
  DatasetSpec negatives;  // ignored when negatives_mode = none
  std::size_t train_count = 200;     // synthetic inlier images
  std::size_t negative_count = 200;  // synthetic negative images

  void validate() const;
};

/// Builds a TrainConfig from flat key=value text. Unknown keys are errors;
/// `epochs`, `batch_size`, `learning_rate`, `seed` and `head_kind` are required.
TrainConfig train_config_from(const KeyValues& kv);
/// A dataset spec file (the keys of DatasetSpec), as read by `gen`.
DatasetSpec dataset_spec_from(const KeyValues& kv);
/// The accepted keys, for diagnostics and documentation.
const std::set<std::string>& train_config_keys();

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t batches = 0;
  double loss_total = 0;
  std::map<std::string, double> components;  // batch means of the unweighted terms
  double lambda_c = 0;
  double wall_seconds = 0;

  std::string to_json() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with one learning rate per parameter.
class Adam {
 public:
  Adam(std::vector<double> learning_rates, double beta1, double beta2, double eps);

  void step(std::vector<Parameter>& params, const std::vector<Tensor>& grads);
  std::size_t steps() const { return t_; }

 private:
  std::vector<double> lr_;
  double b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  std::size_t steps = 0;
};

struct TrainHooks {
  std::ostream* log = nullptr;  // receives one JSON line per epoch
  std::function<void(const Checkpoint&)> on_epoch;
};

TrainResult train(const TrainConfig& config, const TrainHooks& hooks = {});

/// Model-free sample sources used by train() and evaluate().
std::vector<Sample> load_all(const DatasetSpec& spec, std::size_t count);

/// Everything evaluate() looks at, in memory.
struct EvalData {
  std::vector<Sample> inliers;    // classic validation scenes
  std::vector<Sample> negatives;  // whole negative images
  std::vector<Sample> pasted;     // inlier scenes with pasted negatives
  std::map<std::string, std::vector<Sample>> hazards;

  /// Groups a directory dataset by manifest tag (inlier, negative,
  /// negative_bb, pasted, hazard_*).
  static EvalData from_directory(const DirectoryDataset& ds);
  /// Synthetic evaluation bundle with `count` images per subset and
  /// `negative_factor` times as many negative images.
  static EvalData synthetic(const DatasetSpec& spec, std::size_t count, std::size_t negative_factor = 1);
};

struct EvalConfig {
  ScoreMode mode = ScoreMode::max_softmax;
  std::size_t assays = 50;
  double threshold = 0.5;
  double odin_temperature = 10.0;
  double odin_epsilon = 1e-3;
  std::size_t mc_passes = 50;
  std::uint64_t seed = 0;
  std::size_t batch_size = 8;
};

/// Predictions of every sample, in order.
std::vector<PredictionMaps> predict_all(Model& model, const std::vector<Sample>& samples,
                                        const EvalConfig& config);

/// Predictions for each subset of an EvalData, in the same order.
struct EvalPredictions {
  std::vector<PredictionMaps> inliers, negatives, pasted;
  std::map<std::string, std::vector<PredictionMaps>> hazards;
};

/// Whole-image AP over assays, pasted-object AP, and mIoU of given predictions.
EvalReport score_predictions(const EvalData& data, const EvalPredictions& predictions,
                             std::size_t num_classes, const EvalConfig& config);

EvalReport evaluate(Model& model, const EvalData& data, const EvalConfig& config);

}  // namespace osseg
