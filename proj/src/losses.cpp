#include "osseg/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace osseg {

void LossConfig::validate() const {
  for (double w : {lambda_mc, lambda_ml, lambda_aux, lambda_th, lambda_kl, lambda_c,
                   cplus1_outlier_weight, beta})
    if (!(w >= 0.0)) throw std::invalid_argument("loss weights must be non-negative");
  for (double w : class_weights)
    if (!(w >= 0.0)) throw std::invalid_argument("class weights must be non-negative");
}

std::vector<double> LossConfig::weights_for(HeadKind kind, std::size_t num_classes) const {
  std::vector<double> w = class_weights.empty() ? std::vector<double>(num_classes, 1.0)
                                                : class_weights;
  if (w.size() != num_classes)
    throw std::invalid_argument("class_weights has " + std::to_string(w.size()) +
                                " entries, expected " + std::to_string(num_classes));
  if (kind == HeadKind::cplus1) w.push_back(cplus1_outlier_weight);
  return w;
}

SoftTargets soft_targets(const LabelPair& labels, std::size_t r, std::size_t num_classes) {
  if (r == 0 || labels.height % r != 0 || labels.width % r != 0)
    throw ShapeError("soft_targets: label map " + std::to_string(labels.height) + "x" +
                     std::to_string(labels.width) + " not divisible by " + std::to_string(r));
  SoftTargets t;
  t.height = labels.height / r;
  t.width = labels.width / r;
  t.classes = num_classes;
  t.dist.assign(num_classes * t.height * t.width, 0.0);
  t.valid.assign(t.height * t.width, 0);
  std::vector<std::size_t> counts(num_classes);
  for (std::size_t i = 0; i < t.height; ++i)
    for (std::size_t j = 0; j < t.width; ++j) {
      std::fill(counts.begin(), counts.end(), 0);
      std::size_t valid = 0;
      for (std::size_t a = i * r; a < i * r + r; ++a)
        for (std::size_t b = j * r; b < j * r + r; ++b) {
          const auto y = labels.y_at(a, b);
          if (y < num_classes) {
            ++counts[y];
            ++valid;
          }
        }
      // strictly more than half the window
      if (2 * valid <= r * r) continue;
      t.valid[i * t.width + j] = 1;
      for (std::size_t c = 0; c < num_classes; ++c)
        t.dist[(c * t.height + i) * t.width + j] =
            static_cast<double>(counts[c]) / static_cast<double>(valid);
    }
  return t;
}

namespace {

template <class T>
void check_batch(const ad::Var<T>& logits, std::span<const LabelPair> labels, const char* what) {
  const auto& s = logits.shape();
  if (s.size() != 4 || s[0] != labels.size())
    throw ShapeError(std::string(what) + ": logits " + shape_str(s) + " do not match a batch of " +
                     std::to_string(labels.size()) + " label maps");
  for (const auto& l : labels)
    if (l.height != s[2] || l.width != s[3])
      throw ShapeError(std::string(what) + ": label map " + std::to_string(l.height) + "x" +
                       std::to_string(l.width) + " does not match logits " + shape_str(s));
}

template <class T>
ad::Var<T> weighted_sum(ad::Var<T> x, BasicTensor<T> weights, T sign) {
  auto w = x.tape->constant(std::move(weights));
  return ad::scale(ad::sum(ad::mul(x, w)), sign);
}

template <class T>
void normalize(BasicTensor<T>& w, std::size_t count) {
  if (count == 0) return;
  const T inv = T(1) / static_cast<T>(count);
  for (auto& v : w.data()) v *= inv;
}

}  // namespace

template <class T>
ad::Var<T> loss_mc(ad::Var<T> logits, std::span<const LabelPair> labels,
                   std::span<const double> class_weights) {
  check_batch(logits, labels, "loss_mc");
  const auto& s = logits.shape();
  const std::size_t channels = s[1], plane = s[2] * s[3];
  if (class_weights.size() != channels)
    throw std::invalid_argument("loss_mc: " + std::to_string(class_weights.size()) +
                                " class weights for " + std::to_string(channels) + " channels");
  BasicTensor<T> w(s);
  std::size_t count = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const auto y = labels[n].y[p];
      if (labels[n].z[p] != kInlier || y >= channels) continue;
      w[(n * channels + y) * plane + p] = static_cast<T>(class_weights[y]);
      ++count;
    }
  normalize(w, count);
  return weighted_sum(ad::log_softmax(logits, 1), std::move(w), T(-1));
}

template <class T>
ad::Var<T> loss_ml(ad::Var<T> logits, std::span<const LabelPair> labels, std::size_t num_classes) {
  check_batch(logits, labels, "loss_ml");
  const auto& s = logits.shape();
  if (s[1] != num_classes)
    throw ShapeError("loss_ml: expected " + std::to_string(num_classes) + " channels, got " +
                     shape_str(s));
  const std::size_t plane = s[2] * s[3];
  BasicTensor<T> gate(s), positive(s);
  std::size_t count = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const auto y = labels[n].y[p];
      const auto z = labels[n].z[p];
      const bool outlier = z == kOutlier;
      const bool inlier = z == kInlier && y < num_classes;
      if (!outlier && !inlier) continue;
      ++count;
      for (std::size_t c = 0; c < num_classes; ++c) gate[(n * num_classes + c) * plane + p] = 1;
      if (inlier) positive[(n * num_classes + y) * plane + p] = 1;
    }
  normalize(gate, count);
  normalize(positive, count);
  // BCE(s, t) = softplus(s) - t * s
  auto neg_part = weighted_sum(ad::softplus(logits), std::move(gate), T(1));
  auto pos_part = weighted_sum(logits, std::move(positive), T(1));
  return ad::sub(neg_part, pos_part);
}

template <class T>
ad::Var<T> loss_aux(std::span<const ad::Var<T>> aux_logits, std::span<const LabelPair> labels,
                    std::span<const std::size_t> resolutions, std::size_t num_classes) {
  if (aux_logits.size() != resolutions.size())
    throw std::invalid_argument("loss_aux: one logit map per resolution required");
  if (resolutions.empty()) throw std::invalid_argument("loss_aux: no resolutions");
  ad::Var<T> total;
  for (std::size_t k = 0; k < resolutions.size(); ++k) {
    const std::size_t r = resolutions[k];
    const auto& s = aux_logits[k].shape();
    if (s.size() != 4 || s[0] != labels.size() || s[1] != num_classes)
      throw ShapeError("loss_aux: logits " + shape_str(s) + " at resolution " + std::to_string(r));
    const std::size_t plane = s[2] * s[3];
    BasicTensor<T> w(s);
    std::size_t count = 0;
    for (std::size_t n = 0; n < s[0]; ++n) {
      const auto t = soft_targets(labels[n], r, num_classes);
      if (t.height != s[2] || t.width != s[3])
        throw ShapeError("loss_aux: logits " + shape_str(s) + " do not match resolution " +
                         std::to_string(r) + " of a " + std::to_string(labels[n].height) + "x" +
                         std::to_string(labels[n].width) + " label map");
      for (std::size_t p = 0; p < plane; ++p) {
        if (!t.valid[p]) continue;
        ++count;
        for (std::size_t c = 0; c < num_classes; ++c)
          w[(n * num_classes + c) * plane + p] = static_cast<T>(t.dist[c * plane + p]);
      }
    }
    normalize(w, count);
    auto term = weighted_sum(ad::log_softmax(aux_logits[k], 1), std::move(w), T(-1));
    total = k == 0 ? term : ad::add(total, term);
  }
  return ad::scale(total, T(1) / static_cast<T>(resolutions.size()));
}

template <class T>
ad::Var<T> loss_th(ad::Var<T> outlier_logits, std::span<const LabelPair> labels) {
  check_batch(outlier_logits, labels, "loss_th");
  const auto& s = outlier_logits.shape();
  if (s[1] != 2) throw ShapeError("loss_th: expected 2 channels, got " + shape_str(s));
  const std::size_t plane = s[2] * s[3];
  BasicTensor<T> w(s);
  std::size_t count = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const auto z = labels[n].z[p];
      if (z > kInlier) continue;
      const std::size_t target = z == kInlier ? 0 : 1;
      w[(n * 2 + target) * plane + p] = 1;
      ++count;
    }
  normalize(w, count);
  return weighted_sum(ad::log_softmax(outlier_logits, 1), std::move(w), T(-1));
}

template <class T>
ad::Var<T> loss_kl(ad::Var<T> logits, std::span<const LabelPair> labels) {
  check_batch(logits, labels, "loss_kl");
  const auto& s = logits.shape();
  const std::size_t channels = s[1], plane = s[2] * s[3];
  BasicTensor<T> w(s);
  std::size_t count = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      if (labels[n].z[p] != kOutlier) continue;
      ++count;
      for (std::size_t c = 0; c < channels; ++c)
        w[(n * channels + c) * plane + p] = T(1) / static_cast<T>(channels);
    }
  normalize(w, count);
  // KL(U || P) = -log C - (1/C) sum_c log P_c
  auto cross = weighted_sum(ad::log_softmax(logits, 1), std::move(w), T(-1));
  if (count == 0) return cross;
  return ad::add_scalar(cross, -static_cast<T>(std::log(static_cast<double>(channels))));
}

template <class T>
ad::Var<T> interpolate_confidence(ad::Var<T> probs, ad::Var<T> confidence, ad::Var<T> onehot) {
  const auto& s = probs.shape();
  if (onehot.shape() != s)
    throw ShapeError("interpolate_confidence: one-hot " + shape_str(onehot.shape()) +
                     " vs distributions " + shape_str(s));
  auto c = ad::broadcast_channels(confidence, s[1]);
  auto ones = probs.tape->constant(BasicTensor<T>(s, T(1)));
  return ad::add(ad::mul(c, probs), ad::mul(ad::sub(ones, c), onehot));
}

template <class T>
ad::Var<T> loss_mc_interpolated(ad::Var<T> logits, ad::Var<T> confidence,
                                std::span<const LabelPair> labels,
                                std::span<const double> class_weights) {
  check_batch(logits, labels, "loss_mc_interpolated");
  const auto& s = logits.shape();
  const std::size_t channels = s[1], plane = s[2] * s[3];
  if (class_weights.size() != channels)
    throw std::invalid_argument("loss_mc_interpolated: class weight count mismatch");
  BasicTensor<T> onehot(s), pixel_w(Shape{s[0], 1, s[2], s[3]}),
      fill(Shape{s[0], 1, s[2], s[3]}, T(1));
  std::size_t count = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const auto y = labels[n].y[p];
      if (labels[n].z[p] != kInlier || y >= channels) continue;
      onehot[(n * channels + y) * plane + p] = 1;
      pixel_w[n * plane + p] = static_cast<T>(class_weights[y]);
      fill[n * plane + p] = 0;
      ++count;
    }
  normalize(pixel_w, count);
  auto* tape = logits.tape;
  auto oh = tape->constant(std::move(onehot));
  auto interpolated = interpolate_confidence(ad::softmax(logits, 1), confidence, oh);
  auto picked = ad::sum_axis(ad::mul(interpolated, oh), 1);
  // ungated pixels read log(1) = 0
  picked = ad::add(picked, tape->constant(std::move(fill)));
  return weighted_sum(ad::log(picked), std::move(pixel_w), T(-1));
}

template <class T>
ad::Var<T> loss_conf(ad::Var<T> confidence, std::span<const LabelPair> labels,
                     std::size_t num_classes) {
  check_batch(confidence, labels, "loss_conf");
  const auto& s = confidence.shape();
  if (s[1] != 1) throw ShapeError("loss_conf: expected 1 channel, got " + shape_str(s));
  const std::size_t plane = s[2] * s[3];
  BasicTensor<T> w(s);
  std::size_t count = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p)
      if (labels[n].y[p] < num_classes) {
        w[n * plane + p] = 1;
        ++count;
      }
  normalize(w, count);
  return weighted_sum(ad::log(confidence), std::move(w), T(-1));
}

template <class T>
LossBreakdown<T> total_loss(HeadKind kind, const ModelOutput<T>& output,
                            std::span<const LabelPair> labels, std::size_t num_classes,
                            const LossConfig& config, const TotalLossOptions& options) {
  config.validate();
  if (labels.empty()) throw std::invalid_argument("total_loss: empty batch");
  if ((kind == HeadKind::twohead) != output.outlier_logits.has_value())
    throw std::invalid_argument("total_loss: outlier head presence does not match head kind " +
                                std::string(to_string(kind)));
  if ((kind == HeadKind::confidence) != output.confidence.has_value())
    throw std::invalid_argument("total_loss: confidence head presence does not match head kind " +
                                std::string(to_string(kind)));
  const auto& ls = output.class_logits.shape();
  const std::size_t expected_channels = kind == HeadKind::cplus1 ? num_classes + 1 : num_classes;
  if (ls.size() != 4 || ls[1] != expected_channels)
    throw std::invalid_argument("total_loss: class logits " + shape_str(ls) + " do not match head " +
                                std::string(to_string(kind)));
  const std::size_t height = labels[0].height;
  if (height % ls[2] != 0 || labels[0].width % ls[3] != 0 ||
      height / ls[2] != labels[0].width / ls[3])
    throw ShapeError("total_loss: labels are not an integral upsampling of " + shape_str(ls));
  const std::size_t factor = height / ls[2];
  auto up = [factor](ad::Var<T> v) { return factor == 1 ? v : ad::bilinear_upsample(v, factor); };

  LossBreakdown<T> out;
  ad::Var<T> total;
  auto add_term = [&](const char* name, double weight, auto&& make) {
    if (weight == 0.0) return;
    ad::Var<T> term = make();
    out.components[name] = static_cast<double>(term.value()[0]);
    auto weighted = ad::scale(term, static_cast<T>(weight));
    total = total ? ad::add(total, weighted) : weighted;
  };

  const auto weights = config.weights_for(kind, num_classes);
  switch (kind) {
    case HeadKind::multilabel:
      add_term("ml", config.lambda_ml,
               [&] { return loss_ml(up(output.class_logits), labels, num_classes); });
      break;
    case HeadKind::cplus1: {
      std::vector<LabelPair> relabeled;
      for (const auto& l : labels) relabeled.push_back(l.cplus1(num_classes));
      add_term("mc", config.lambda_mc, [&] {
        return loss_mc<T>(up(output.class_logits), relabeled, weights);
      });
      break;
    }
    case HeadKind::confidence:
      add_term("mc", config.lambda_mc, [&] {
        if (options.interpolate_confidence)
          return loss_mc_interpolated<T>(up(output.class_logits), up(*output.confidence), labels,
                                         weights);
        return loss_mc<T>(up(output.class_logits), labels, weights);
      });
      add_term("conf", config.lambda_c,
               [&] { return loss_conf(up(*output.confidence), labels, num_classes); });
      break;
    case HeadKind::multiclass:
      add_term("mc", config.lambda_mc,
               [&] { return loss_mc<T>(up(output.class_logits), labels, weights); });
      add_term("kl", config.lambda_kl, [&] { return loss_kl(up(output.class_logits), labels); });
      break;
    case HeadKind::twohead:
      add_term("mc", config.lambda_mc,
               [&] { return loss_mc<T>(up(output.class_logits), labels, weights); });
      add_term("th", config.lambda_th, [&] { return loss_th(up(*output.outlier_logits), labels); });
      break;
  }
  add_term("aux", config.lambda_aux, [&] {
    std::vector<ad::Var<T>> maps;
    for (auto r : config.aux_resolutions) {
      std::size_t k = 0;
      while (k < kAuxStrides.size() && kAuxStrides[k] != r) ++k;
      if (k == kAuxStrides.size() || !output.aux_logits[k])
        throw std::invalid_argument("total_loss: no auxiliary output at resolution " +
                                    std::to_string(r));
      maps.push_back(output.aux_logits[k]);
    }
    return loss_aux<T>(maps, labels, config.aux_resolutions, num_classes);
  });
  if (!total) total = ad::scale(ad::sum(output.class_logits), T(0));
  out.total = total;
  return out;
}

double adapt_lambda_c(double lambda_c, double loss_c, double beta) {
  return loss_c > beta ? lambda_c * 1.01 : lambda_c / 1.01;
}

#define OSSEG_INSTANTIATE(T)                                                                    \
  template ad::Var<T> loss_mc(ad::Var<T>, std::span<const LabelPair>, std::span<const double>); \
  template ad::Var<T> loss_ml(ad::Var<T>, std::span<const LabelPair>, std::size_t);            \
  template ad::Var<T> loss_aux(std::span<const ad::Var<T>>, std::span<const LabelPair>,        \
                               std::span<const std::size_t>, std::size_t);                     \
  template ad::Var<T> loss_th(ad::Var<T>, std::span<const LabelPair>);                          \
  template ad::Var<T> loss_kl(ad::Var<T>, std::span<const LabelPair>);                          \
  template ad::Var<T> interpolate_confidence(ad::Var<T>, ad::Var<T>, ad::Var<T>);               \
  template ad::Var<T> loss_mc_interpolated(ad::Var<T>, ad::Var<T>, std::span<const LabelPair>,  \
                                           std::span<const double>);                            \
  template ad::Var<T> loss_conf(ad::Var<T>, std::span<const LabelPair>, std::size_t);           \
  template LossBreakdown<T> total_loss(HeadKind, const ModelOutput<T>&,                         \
                                       std::span<const LabelPair>, std::size_t,                 \
                                       const LossConfig&, const TotalLossOptions&);
OSSEG_INSTANTIATE(float)
OSSEG_INSTANTIATE(double)
#undef OSSEG_INSTANTIATE

}  // namespace osseg
