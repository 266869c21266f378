#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "osseg/model.hpp"
#include "osseg/rng.hpp"
#include "osseg/tensor.hpp"

namespace osseg {

enum class ScoreMode {
  max_softmax,
  odin,
  max_sigma,
  cplus1,
  cplus1_diff,
  twohead,
  confidence,
  mc_dropout,
};

std::string_view to_string(ScoreMode mode);
ScoreMode parse_score_mode(std::string_view text);
/// Throws unless `mode` can be evaluated on a model with head `kind`.
void check_compatible(ScoreMode mode, HeadKind kind);

/// One image's predictions.
struct PredictionMaps {
  std::size_t num_classes = 0, height = 0, width = 0;
  Tensor class_probs;                // [C,H,W], each pixel sums to 1
  Tensor outlier_prob;               // [H,W] in [0,1]
  std::vector<std::uint8_t> merged;  // H*W, N_C = void
};

// Score functions take a batch of head outputs [N,K,H,W] and return
// outlier probabilities [N,H,W].

/// Softmax along channels at temperature T (logits divided by T).
Tensor softmax_channels(const Tensor& logits, double temperature = 1.0);
/// 1 - max_c softmax(logits / T)_c.
Tensor score_max_softmax(const Tensor& logits, double temperature = 1.0);
Tensor score_max_sigma(const Tensor& logits);
/// sigma(s_outlier - max over inlier logits); the outlier logit is the last channel.
Tensor score_cplus1(const Tensor& logits);
/// (p_outlier - max_c p_c + 1) / 2 from the (C+1)-way softmax.
Tensor score_cplus1_diff(const Tensor& logits);
/// Softmax probability of channel 1.
Tensor score_twohead(const Tensor& outlier_logits);
Tensor score_confidence(const Tensor& confidence);

struct OdinResult {
  Tensor class_probs;   // from the unperturbed pass, T = 1
  Tensor outlier_prob;  // 1 - tempered max-softmax of the perturbed pass
  double mean_max_softmax_before = 0, mean_max_softmax_after = 0;
};

/// Perturbs the normalized input by eps * sign of the gradient of the summed
/// per-pixel tempered max-softmax, then rescores.
OdinResult score_odin(Model& model, const Tensor& images, double temperature, double epsilon);

struct McDropoutResult {
  Tensor class_probs;   // [N,C,H,W], mean over passes
  Tensor outlier_prob;  // [N,H,W], normalized mutual information clamped to [0,1]
};

/// (H(mean p) - mean_k H(p_k)) / log C per pixel, before clamping. Input is
/// K per-pass distributions, each [N,C,H,W].
std::vector<double> normalized_mutual_information(const std::vector<Tensor>& passes);

McDropoutResult score_mc_dropout(Model& model, const Tensor& images, std::size_t passes,
                                 const Rng& rng);

/// N_C where outlier_prob > threshold, otherwise the most probable class
/// (lowest index on ties).
std::vector<std::uint8_t> merge(const Tensor& class_probs, const Tensor& outlier_prob,
                                double threshold);

/// Bilinear upsampling of class_probs and outlier_prob by an integral
/// factor, then the merged map recomputed at full resolution.
PredictionMaps upsample_predictions(const PredictionMaps& maps, std::size_t height,
                                    std::size_t width, double threshold);

struct PredictOptions {
  ScoreMode mode = ScoreMode::max_softmax;
  double threshold = 0.5;
  double odin_temperature = 10.0;
  double odin_epsilon = 1e-3;
  std::size_t mc_passes = 50;
  Rng rng{0};
};

/// Full-resolution predictions for each image of a batch [N,3,H,W].
std::vector<PredictionMaps> predict(Model& model, const Tensor& images,
                                    const PredictOptions& options);

/// Scores as value*255 rounded; merged maps as class indices.
void write_score_png(const std::string& path, const Tensor& map);
void write_index_png(const std::string& path, const std::vector<std::uint8_t>& indices,
                     std::size_t height, std::size_t width);
/// `<base>.f32` (little-endian float32 payload) and `<base>.json` with the shape.
void write_raw_float(const std::string& base, const Tensor& map);

}  // namespace osseg
