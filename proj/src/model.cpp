#include "osseg/model.hpp"

#include <cmath>
#include <stdexcept>

namespace osseg {

std::string_view to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::multiclass: return "multiclass";
    case HeadKind::multilabel: return "multilabel";
    case HeadKind::cplus1: return "cplus1";
    case HeadKind::twohead: return "twohead";
    case HeadKind::confidence: return "confidence";
  }
  return "?";
}

HeadKind parse_head_kind(std::string_view text) {
  for (auto k : {HeadKind::multiclass, HeadKind::multilabel, HeadKind::cplus1, HeadKind::twohead,
                 HeadKind::confidence})
    if (to_string(k) == text) return k;
  throw std::invalid_argument("unknown head kind '" + std::string(text) +
                              "' (expected multiclass|multilabel|cplus1|twohead|confidence)");
}

void ModelConfig::validate() const {
  if (num_classes < 2 || num_classes > 253)
    throw std::invalid_argument("num_classes must be in [2, 253]");
  if (input_channels == 0) throw std::invalid_argument("input_channels must be positive");
  if (ladder_width == 0) throw std::invalid_argument("ladder_width must be positive");
  for (auto w : backbone_widths)
    if (w == 0) throw std::invalid_argument("backbone widths must be positive");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0))
    throw std::invalid_argument("dropout_p must be in [0, 1)");
}

namespace {

std::string stage_name(std::size_t i) { return "stage" + std::to_string(i); }
std::string up_name(std::size_t i) { return "up" + std::to_string(i + 1); }
std::string aux_name(std::size_t stride) { return "aux" + std::to_string(stride); }

double he_std(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

}  // namespace

void Model::add_param(std::string name, Shape shape, bool backbone, const Rng& rng,
                      double init_std) {
  Tensor t(shape);
  Rng local = rng.derive(name);
  for (auto& v : t.data()) v = static_cast<float>(local.normal(0.0, init_std));
  param_index_[name] = params_.size();
  params_.push_back(Parameter{std::move(name), std::move(t), backbone});
}

void Model::add_bias(std::string name, std::size_t n, bool backbone, float value) {
  param_index_[name] = params_.size();
  params_.push_back(Parameter{std::move(name), Tensor(Shape{n}, value), backbone});
}

void Model::add_norm(const std::string& prefix, std::size_t channels, bool backbone) {
  add_bias(prefix + ".gamma", channels, backbone, 1.0f);
  add_bias(prefix + ".beta", channels, backbone, 0.0f);
  norm_index_[prefix] = norms_.size();
  norms_.push_back(BatchNormBuffer{
      prefix, {std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f)}});
}

Model Model::build(const ModelConfig& config, const Rng& rng) {
  config.validate();
  Model m;
  m.config_ = config;
  const auto& w = config.backbone_widths;
  const std::size_t lw = config.ladder_width;

  m.add_param("stem.conv.weight", {w[0], config.input_channels, 3, 3}, true, rng,
              he_std(config.input_channels * 9));
  m.add_norm("stem.bn", w[0], true);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t cin = i == 0 ? w[0] : w[i - 1];
    const auto s = stage_name(i);
    m.add_param(s + ".conv1.weight", {w[i], cin, 3, 3}, true, rng, he_std(cin * 9));
    m.add_norm(s + ".bn1", w[i], true);
    m.add_param(s + ".conv2.weight", {w[i], w[i], 3, 3}, true, rng, he_std(w[i] * 9));
    m.add_norm(s + ".bn2", w[i], true);
  }
  m.add_param("spp.fuse.weight", {lw, 4 * w[3], 1, 1}, false, rng, he_std(4 * w[3]));
  m.add_norm("spp.bn", lw, false);
  // up1 blends with stage2 (stride 16), up2 with stage1, up3 with stage0.
  for (std::size_t j = 0; j < 3; ++j) {
    const auto u = up_name(j);
    const std::size_t lateral = w[2 - j];
    m.add_param(u + ".lateral.weight", {lw, lateral, 1, 1}, false, rng, he_std(lateral));
    m.add_bias(u + ".lateral.bias", lw, false);
    m.add_param(u + ".blend.weight", {lw, lw, 3, 3}, false, rng, he_std(lw * 9));
    m.add_norm(u + ".bn", lw, false);
  }
  m.add_param("head.class.weight", {config.class_channels(), lw, 1, 1}, false, rng, he_std(lw));
  m.add_bias("head.class.bias", config.class_channels(), false);
  for (auto stride : kAuxStrides) {
    m.add_param(aux_name(stride) + ".weight", {config.num_classes, lw, 1, 1}, false, rng,
                he_std(lw));
    m.add_bias(aux_name(stride) + ".bias", config.num_classes, false);
  }
  if (config.head_kind == HeadKind::twohead) {
    m.add_param("head.outlier.weight", {2, lw, 1, 1}, false, rng, he_std(lw));
    m.add_bias("head.outlier.bias", 2, false);
  }
  if (config.head_kind == HeadKind::confidence) {
    m.add_param("head.confidence.weight", {1, lw, 1, 1}, false, rng, he_std(lw));
    m.add_bias("head.confidence.bias", 1, false);
  }
  return m;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

std::size_t Model::index_of(std::string_view name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end()) throw std::out_of_range("no parameter named " + std::string(name));
  return it->second;
}

std::size_t Model::norm_index(std::string_view name) const {
  auto it = norm_index_.find(name);
  if (it == norm_index_.end()) throw std::out_of_range("no batch norm named " + std::string(name));
  return it->second;
}

std::vector<std::string> Model::head_parameter_names(std::string_view head) const {
  std::vector<std::string> out;
  const std::string prefix = "head." + std::string(head) + ".";
  for (const auto& p : params_)
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p.name);
  return out;
}

template <class T>
std::vector<ad::Var<T>> Model::register_parameters(ad::Tape<T>& tape, bool requires_grad) const {
  std::vector<ad::Var<T>> vars;
  vars.reserve(params_.size());
  for (const auto& p : params_) {
    auto t = p.value.template cast<T>();
    t.set_requires_grad(requires_grad);
    vars.push_back(tape.leaf(std::move(t)));
  }
  return vars;
}

template <class T>
ModelOutput<T> Model::forward(std::span<const ad::Var<T>> params, ad::Var<T> image,
                              ForwardMode mode, const Rng& rng, bool update_stats) {
  const auto& s = image.shape();
  if (s.size() != 4 || s[1] != config_.input_channels)
    throw ShapeError("forward: expected image [N," + std::to_string(config_.input_channels) +
                     ",H,W], got " + shape_str(s));
  if (s[2] % 32 != 0 || s[3] % 32 != 0)
    throw ShapeError("forward: image height and width must be divisible by 32, got " +
                     shape_str(s));
  if (params.size() != params_.size())
    throw std::invalid_argument("forward: parameter list does not match the model");

  auto P = [&](std::string_view name) { return params[index_of(name)]; };
  const bool use_dropout = config_.dropout_p > 0.0 && mode != ForwardMode::eval;
  ad::BatchNormOptions bn_opt;
  bn_opt.training = mode == ForwardMode::train;
  bn_opt.update_running = update_stats;

  // Running statistics are held as float; non-float passes use a converted copy.
  std::vector<ad::BatchNormStats<T>> local_stats;
  if constexpr (!std::is_same_v<T, float>) {
    for (const auto& b : norms_)
      local_stats.push_back({std::vector<T>(b.stats.mean.begin(), b.stats.mean.end()),
                             std::vector<T>(b.stats.var.begin(), b.stats.var.end())});
  }
  auto stats_for = [&](std::string_view name) -> ad::BatchNormStats<T>& {
    if constexpr (std::is_same_v<T, float>) {
      return norms_[norm_index(name)].stats;
    } else {
      return local_stats[norm_index(name)];
    }
  };
  auto conv_bn_relu = [&](ad::Var<T> x, const std::string& conv, const std::string& bn,
                          std::size_t padding) {
    auto y = ad::conv2d(x, P(conv), 1, padding);
    y = ad::batch_norm(y, P(bn + ".gamma"), P(bn + ".beta"), stats_for(bn), bn_opt);
    return ad::relu(y);
  };
  auto maybe_dropout = [&](ad::Var<T> x, const std::string& site) {
    if (!use_dropout) return x;
    Rng r = rng.derive(site);
    return ad::dropout(x, config_.dropout_p, r);
  };

  auto x = conv_bn_relu(image, "stem.conv.weight", "stem.bn", 1);
  x = ad::avg_pool(x, 2);
  std::array<ad::Var<T>, 4> features;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto st = stage_name(i);
    x = conv_bn_relu(x, st + ".conv1.weight", st + ".bn1", 1);
    x = conv_bn_relu(x, st + ".conv2.weight", st + ".bn2", 1);
    x = ad::avg_pool(x, 2);
    x = maybe_dropout(x, st);
    features[i] = x;
  }

  const auto& f3 = features[3].shape();
  std::vector<ad::Var<T>> pyramid{features[3]};
  for (std::size_t grid : {1, 2, 4})
    pyramid.push_back(
        ad::grid_broadcast(ad::adaptive_avg_pool(features[3], grid), f3[2], f3[3]));
  auto spp = conv_bn_relu(ad::concat_channels<T>(pyramid), "spp.fuse.weight", "spp.bn", 0);

  std::array<ad::Var<T>, 3> ups;
  auto path = spp;
  for (std::size_t j = 0; j < 3; ++j) {
    const auto u = up_name(j);
    auto lateral = ad::add_channel_bias(ad::conv2d(features[2 - j], P(u + ".lateral.weight"), 1, 0),
                                        P(u + ".lateral.bias"));
    auto blended = ad::add(ad::bilinear_upsample(path, 2), lateral);
    path = conv_bn_relu(blended, u + ".blend.weight", u + ".bn", 1);
    path = maybe_dropout(path, u);
    ups[j] = path;
  }
  const auto& shared = ups[2];  // stride 4

  auto head = [&](ad::Var<T> feat, const std::string& prefix) {
    return ad::add_channel_bias(ad::conv2d(feat, P(prefix + ".weight"), 1, 0),
                                P(prefix + ".bias"));
  };
  ModelOutput<T> out;
  out.class_logits = head(shared, "head.class");
  const std::array<ad::Var<T>, 4> taps{ups[2], ups[1], ups[0], spp};
  for (std::size_t k = 0; k < 4; ++k) out.aux_logits[k] = head(taps[k], aux_name(kAuxStrides[k]));
  if (config_.head_kind == HeadKind::twohead) out.outlier_logits = head(shared, "head.outlier");
  if (config_.head_kind == HeadKind::confidence)
    out.confidence = ad::sigmoid(head(shared, "head.confidence"));
  return out;
}

ModelOutput<float> Model::forward(ad::Tape<float>& tape, const Tensor& image, ForwardMode mode,
                                  const Rng& rng, std::vector<ad::Var<float>>* params_out,
                                  bool requires_grad) {
  auto params = register_parameters(tape, requires_grad);
  auto x = tape.leaf(image);
  auto out = forward<float>(params, x, mode, rng);
  if (params_out) *params_out = std::move(params);
  return out;
}

template std::vector<ad::Var<float>> Model::register_parameters(ad::Tape<float>&, bool) const;
template std::vector<ad::Var<double>> Model::register_parameters(ad::Tape<double>&, bool) const;
template ModelOutput<float> Model::forward(std::span<const ad::Var<float>>, ad::Var<float>,
                                           ForwardMode, const Rng&, bool);
template ModelOutput<double> Model::forward(std::span<const ad::Var<double>>, ad::Var<double>,
                                            ForwardMode, const Rng&, bool);

}  // namespace osseg
