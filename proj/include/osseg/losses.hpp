#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "osseg/autodiff.hpp"
#include "osseg/labels.hpp"
#include "osseg/model.hpp"

namespace osseg {

struct LossConfig {
  double lambda_mc = 0.6;
  double lambda_ml = 0.6;
  double lambda_aux = 0.4;
  double lambda_th = 0.2;
  double lambda_kl = 0.2;
  double lambda_c = 0.1;  // starting value; adapted during training toward beta
  std::vector<double> class_weights;  // per class; empty means all 1
  double cplus1_outlier_weight = 0.05;
  double beta = 0.15;
  std::vector<std::size_t> aux_resolutions{4, 8, 16, 32};

  void validate() const;
  /// Weights for `channels` classes; the extra class of the C+1 head gets
  /// cplus1_outlier_weight.
  std::vector<double> weights_for(HeadKind kind, std::size_t num_classes) const;
};

/// Window-wise class distributions of a label map.
struct SoftTargets {
  std::size_t height = 0, width = 0, classes = 0;
  std::vector<double> dist;   // [classes, height, width]
  std::vector<std::uint8_t> valid;  // [height, width]
};

/// Distribution over N_C classes of the valid (y < N_C) pixels in each r x r
/// window; a window is valid iff it holds more than r^2/2 valid pixels.
SoftTargets soft_targets(const LabelPair& labels, std::size_t r, std::size_t num_classes);

// Every loss is normalized by its number of contributing elements (pixels,
// windows); zero contributors give 0 with a zero gradient. Logits and label
// maps must share spatial extents.

/// Weighted negative log-likelihood over pixels with z = 1 and y < channels.
template <class T>
ad::Var<T> loss_mc(ad::Var<T> logits, std::span<const LabelPair> labels,
                   std::span<const double> class_weights);

/// Per-class binary cross-entropy. Positive for y = c, z = 1; negative for
/// other inlier classes and for outliers; z = 2 ignored.
template <class T>
ad::Var<T> loss_ml(ad::Var<T> logits, std::span<const LabelPair> labels, std::size_t num_classes);

/// Cross-entropy against soft targets at each resolution, averaged over
/// resolutions. aux_logits[k] must be at labels / resolutions[k].
template <class T>
ad::Var<T> loss_aux(std::span<const ad::Var<T>> aux_logits, std::span<const LabelPair> labels,
                    std::span<const std::size_t> resolutions, std::size_t num_classes);

/// Two-way NLL of the outlier head (channel 0 inlier, channel 1 outlier) over z <= 1.
template <class T>
ad::Var<T> loss_th(ad::Var<T> outlier_logits, std::span<const LabelPair> labels);

/// KL(U || P) over outlier pixels.
template <class T>
ad::Var<T> loss_kl(ad::Var<T> logits, std::span<const LabelPair> labels);

/// P' = c * P + (1 - c) * onehot.
template <class T>
ad::Var<T> interpolate_confidence(ad::Var<T> probs, ad::Var<T> confidence, ad::Var<T> onehot);

/// NLL of the interpolated distribution at the true class, same gating and
/// weighting as loss_mc.
template <class T>
ad::Var<T> loss_mc_interpolated(ad::Var<T> logits, ad::Var<T> confidence,
                                std::span<const LabelPair> labels,
                                std::span<const double> class_weights);

/// -log c averaged over pixels with y < N_C.
template <class T>
ad::Var<T> loss_conf(ad::Var<T> confidence, std::span<const LabelPair> labels,
                     std::size_t num_classes);

template <class T>
struct LossBreakdown {
  ad::Var<T> total;
  std::map<std::string, double> components;  // unweighted term values
};

struct TotalLossOptions {
  bool interpolate_confidence = false;  // the confidence head's every-second-batch mode
};

/// Head-specific composition of the terms above. Stride-4 outputs are
/// bilinearly upsampled to label resolution before the per-pixel terms.
/// Terms whose weight is zero are not evaluated.
template <class T>
LossBreakdown<T> total_loss(HeadKind kind, const ModelOutput<T>& output,
                            std::span<const LabelPair> labels, std::size_t num_classes,
                            const LossConfig& config, const TotalLossOptions& options = {});

/// One multiplicative step of the confidence-weight schedule.
double adapt_lambda_c(double lambda_c, double loss_c, double beta);

}  // namespace osseg
