#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "osseg/autodiff.hpp"
#include "osseg/rng.hpp"
#include "osseg/tensor.hpp"

namespace osseg {

enum class HeadKind { multiclass, multilabel, cplus1, twohead, confidence };

std::string_view to_string(HeadKind kind);
HeadKind parse_head_kind(std::string_view text);

struct ModelConfig {
  std::size_t num_classes = 4;
  HeadKind head_kind = HeadKind::multiclass;
  std::array<std::size_t, 4> backbone_widths{32, 64, 128, 128};
  std::size_t ladder_width = 64;  // channels along the upsampling path
  double dropout_p = 0.0;
  std::size_t input_channels = 3;

  /// N_C + 1 for the C+1 head, N_C otherwise.
  std::size_t class_channels() const {
    return head_kind == HeadKind::cplus1 ? num_classes + 1 : num_classes;
  }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Strides of the auxiliary outputs, finest first.
inline constexpr std::array<std::size_t, 4> kAuxStrides{4, 8, 16, 32};
inline constexpr std::size_t kOutputStride = 4;

struct Parameter {
  std::string name;
  Tensor value;
  bool backbone = false;  // trained with the reduced learning rate
};

struct BatchNormBuffer {
  std::string name;
  ad::BatchNormStats<float> stats;
};

enum class ForwardMode {
  eval,        // running batch-norm statistics, no dropout
  train,       // batch statistics, dropout active
  mc_dropout,  // running statistics, dropout active
};

template <class T>
struct ModelOutput {
  ad::Var<T> class_logits;               // [N, C or C+1, H/4, W/4]
  std::optional<ad::Var<T>> outlier_logits;  // [N, 2, H/4, W/4], two-head only
  std::optional<ad::Var<T>> confidence;      // [N, 1, H/4, W/4] in (0,1), confidence head only
  std::array<ad::Var<T>, 4> aux_logits;  // strides 4, 8, 16, 32
};

/// Ladder-style dense feature extractor: a four-stage plain convnet
/// backbone, spatial pyramid pooling over the stride-32 features, three
/// upsampling blocks with lateral connections, and the prediction heads.
class Model {
 public:
  static Model build(const ModelConfig& config, const Rng& rng);

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<BatchNormBuffer>& batch_norms() { return norms_; }
  const std::vector<BatchNormBuffer>& batch_norms() const { return norms_; }

  std::size_t parameter_count() const;
  std::size_t index_of(std::string_view name) const;
  Parameter& parameter(std::string_view name) { return params_.at(index_of(name)); }
  std::size_t norm_index(std::string_view name) const;

  /// Copies parameters onto `tape` in parameters() order.
  template <class T>
  std::vector<ad::Var<T>> register_parameters(ad::Tape<T>& tape, bool requires_grad) const;

  /// `params` must come from register_parameters on the tape that holds
  /// `image`. Batch-norm running statistics are updated in train mode when
  /// `update_stats` is set.
  template <class T>
  ModelOutput<T> forward(std::span<const ad::Var<T>> params, ad::Var<T> image, ForwardMode mode,
                         const Rng& rng, bool update_stats = true);

  /// Convenience for float inference and training on a fresh tape owned by the caller.
  ModelOutput<float> forward(ad::Tape<float>& tape, const Tensor& image, ForwardMode mode,
                             const Rng& rng, std::vector<ad::Var<float>>* params_out = nullptr,
                             bool requires_grad = false);

  /// Names of parameters that belong to a given head ("outlier", "confidence", "class").
  std::vector<std::string> head_parameter_names(std::string_view head) const;

 private:
  void add_param(std::string name, Shape shape, bool backbone, const Rng& rng, double init_std);
  void add_bias(std::string name, std::size_t n, bool backbone, float value = 0.0f);
  void add_norm(const std::string& prefix, std::size_t channels, bool backbone);

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::vector<BatchNormBuffer> norms_;
  std::map<std::string, std::size_t, std::less<>> param_index_;
  std::map<std::string, std::size_t, std::less<>> norm_index_;
};

}  // namespace osseg
