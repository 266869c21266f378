#include "osseg/inference.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "osseg/data.hpp"

namespace osseg {

std::string_view to_string(ScoreMode mode) {
  switch (mode) {
    case ScoreMode::max_softmax: return "max-softmax";
    case ScoreMode::odin: return "odin";
    case ScoreMode::max_sigma: return "max-sigma";
    case ScoreMode::cplus1: return "cplus1";
    case ScoreMode::cplus1_diff: return "cplus1-diff";
    case ScoreMode::twohead: return "twohead";
    case ScoreMode::confidence: return "confidence";
    case ScoreMode::mc_dropout: return "mc-dropout";
  }
  return "?";
}

ScoreMode parse_score_mode(std::string_view text) {
  for (auto m : {ScoreMode::max_softmax, ScoreMode::odin, ScoreMode::max_sigma, ScoreMode::cplus1,
                 ScoreMode::cplus1_diff, ScoreMode::twohead, ScoreMode::confidence,
                 ScoreMode::mc_dropout})
    if (to_string(m) == text) return m;
  throw std::invalid_argument("unknown score mode '" + std::string(text) + "'");
}

void check_compatible(ScoreMode mode, HeadKind kind) {
  bool ok = false;
  switch (mode) {
    case ScoreMode::max_softmax:
    case ScoreMode::odin:
    case ScoreMode::mc_dropout:
      ok = kind == HeadKind::multiclass || kind == HeadKind::twohead || kind == HeadKind::confidence;
      break;
    case ScoreMode::max_sigma: ok = kind == HeadKind::multilabel; break;
    case ScoreMode::cplus1:
    case ScoreMode::cplus1_diff: ok = kind == HeadKind::cplus1; break;
    case ScoreMode::twohead: ok = kind == HeadKind::twohead; break;
    case ScoreMode::confidence: ok = kind == HeadKind::confidence; break;
  }
  if (!ok)
    throw std::invalid_argument("score mode " + std::string(to_string(mode)) +
                                " does not apply to a " + std::string(to_string(kind)) + " model");
}

namespace {

void check_nchw(const Tensor& t, const char* what) {
  if (t.rank() != 4) throw ShapeError(std::string(what) + ": expected [N,C,H,W], got " + shape_str(t.shape()));
}

/// Applies f(pixel channel values, count) -> score per pixel.
template <class F>
Tensor per_pixel(const Tensor& t, F f) {
  const auto& s = t.shape();
  const std::size_t C = s[1], plane = s[2] * s[3];
  Tensor out(Shape{s[0], s[2], s[3]});
  std::vector<double> v(C);
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      for (std::size_t c = 0; c < C; ++c) v[c] = t[(n * C + c) * plane + p];
      out[n * plane + p] = static_cast<float>(f(v));
    }
  return out;
}

double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Tensor softmax_channels(const Tensor& logits, double temperature) {
  check_nchw(logits, "softmax_channels");
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be positive");
  const auto& s = logits.shape();
  const std::size_t C = s[1], plane = s[2] * s[3];
  Tensor out(s);
  std::vector<double> e(C);
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c)
        m = std::max(m, logits[(n * C + c) * plane + p] / temperature);
      double z = 0;
      for (std::size_t c = 0; c < C; ++c) {
        e[c] = std::exp(logits[(n * C + c) * plane + p] / temperature - m);
        z += e[c];
      }
      for (std::size_t c = 0; c < C; ++c) out[(n * C + c) * plane + p] = static_cast<float>(e[c] / z);
    }
  return out;
}

Tensor score_max_softmax(const Tensor& logits, double temperature) {
  const Tensor probs = softmax_channels(logits, temperature);
  return per_pixel(probs, [](const std::vector<double>& v) {
    return 1.0 - *std::max_element(v.begin(), v.end());
  });
}

Tensor score_max_sigma(const Tensor& logits) {
  check_nchw(logits, "score_max_sigma");
  return per_pixel(logits, [](const std::vector<double>& v) {
    return 1.0 - sigmoid(*std::max_element(v.begin(), v.end()));
  });
}

Tensor score_cplus1(const Tensor& logits) {
  check_nchw(logits, "score_cplus1");
  if (logits.dim(1) < 2) throw ShapeError("score_cplus1: need at least 2 channels");
  return per_pixel(logits, [](const std::vector<double>& v) {
    const double inlier = *std::max_element(v.begin(), v.end() - 1);
    return sigmoid(v.back() - inlier);
  });
}

Tensor score_cplus1_diff(const Tensor& logits) {
  check_nchw(logits, "score_cplus1_diff");
  if (logits.dim(1) < 2) throw ShapeError("score_cplus1_diff: need at least 2 channels");
  const Tensor probs = softmax_channels(logits);
  return per_pixel(probs, [](const std::vector<double>& v) {
    const double inlier = *std::max_element(v.begin(), v.end() - 1);
    return std::clamp((v.back() - inlier + 1.0) / 2.0, 0.0, 1.0);
  });
}

Tensor score_twohead(const Tensor& outlier_logits) {
  check_nchw(outlier_logits, "score_twohead");
  if (outlier_logits.dim(1) != 2) throw ShapeError("score_twohead: expected 2 channels");
  return per_pixel(outlier_logits, [](const std::vector<double>& v) { return sigmoid(v[1] - v[0]); });
}

Tensor score_confidence(const Tensor& confidence) {
  check_nchw(confidence, "score_confidence");
  if (confidence.dim(1) != 1) throw ShapeError("score_confidence: expected 1 channel");
  return per_pixel(confidence,
                   [](const std::vector<double>& v) { return std::clamp(1.0 - v[0], 0.0, 1.0); });
}

namespace {

double mean_of(const Tensor& t) {
  double s = 0;
  for (float v : t.data()) s += v;
  return s / static_cast<double>(t.numel());
}

}  // namespace

OdinResult score_odin(Model& model, const Tensor& images, double temperature, double epsilon) {
  if (!(temperature > 0)) throw std::invalid_argument("ODIN temperature must be positive");
  if (!(epsilon >= 0)) throw std::invalid_argument("ODIN epsilon must be non-negative");
  const Rng unused(0);
  OdinResult r;
  Tensor perturbed = images;
  {
    ad::Tape<float> tape;
    auto params = model.register_parameters(tape, false);
    auto x = tape.variable(images);
    auto out = model.forward<float>(params, x, ForwardMode::eval, unused, false);
    r.class_probs = softmax_channels(out.class_logits.value());
    r.mean_max_softmax_before = 1.0 - mean_of(score_max_softmax(out.class_logits.value(), temperature));
    auto tempered = ad::scale(out.class_logits, static_cast<float>(1.0 / temperature));
    auto objective = ad::sum(ad::max(ad::softmax(tempered, 1), 1));
    const auto grads = tape.grad(objective, {x});
    const auto g = grads[0].data();
    auto px = perturbed.data();
    const auto eps = static_cast<float>(epsilon);
    for (std::size_t i = 0; i < px.size(); ++i) {
      const float sign = g[i] > 0 ? 1.0f : g[i] < 0 ? -1.0f : 0.0f;
      px[i] += eps * sign;
    }
  }
  ad::Tape<float> tape;
  auto out = model.forward(tape, perturbed, ForwardMode::eval, unused);
  r.outlier_prob = score_max_softmax(out.class_logits.value(), temperature);
  r.mean_max_softmax_after = 1.0 - mean_of(r.outlier_prob);
  return r;
}

std::vector<double> normalized_mutual_information(const std::vector<Tensor>& passes) {
  if (passes.empty()) throw std::invalid_argument("mutual information needs at least one pass");
  const auto& s = passes[0].shape();
  const std::size_t C = s[1], plane = s[2] * s[3];
  const double K = static_cast<double>(passes.size());
  const double norm = C > 1 ? std::log(static_cast<double>(C)) : 1.0;
  // Written as the mean KL of each pass from the average, which is exactly
  // zero when all passes agree (the entropy difference form is not).
  std::vector<double> out(s[0] * plane);
  std::vector<double> mean(C);
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      std::fill(mean.begin(), mean.end(), 0.0);
      for (const auto& pass : passes)
        for (std::size_t c = 0; c < C; ++c) mean[c] += pass[(n * C + c) * plane + p];
      for (auto& m : mean) m /= K;
      double mi = 0;
      for (const auto& pass : passes)
        for (std::size_t c = 0; c < C; ++c) {
          const double v = pass[(n * C + c) * plane + p];
          if (v > 0) mi += v * std::log(v / mean[c]);
        }
      out[n * plane + p] = mi / K / norm;
    }
  return out;
}

McDropoutResult score_mc_dropout(Model& model, const Tensor& images, std::size_t passes,
                                 const Rng& rng) {
  if (passes == 0) throw std::invalid_argument("MC dropout needs at least one pass");
  std::vector<Tensor> probs;
  for (std::size_t k = 0; k < passes; ++k) {
    ad::Tape<float> tape;
    auto out = model.forward(tape, images, ForwardMode::mc_dropout, rng.derive(k));
    probs.push_back(softmax_channels(out.class_logits.value()));
  }
  McDropoutResult r;
  const auto& s = probs[0].shape();
  r.class_probs = Tensor(s);
  std::vector<double> acc(probs[0].numel(), 0.0);
  for (const auto& p : probs)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
  for (std::size_t i = 0; i < acc.size(); ++i)
    r.class_probs[i] = static_cast<float>(acc[i] / static_cast<double>(passes));
  const auto mi = normalized_mutual_information(probs);
  r.outlier_prob = Tensor(Shape{s[0], s[2], s[3]});
  for (std::size_t i = 0; i < mi.size(); ++i)
    r.outlier_prob[i] = static_cast<float>(std::clamp(mi[i], 0.0, 1.0));
  return r;
}

std::vector<std::uint8_t> merge(const Tensor& class_probs, const Tensor& outlier_prob,
                                double threshold) {
  if (class_probs.rank() != 3 || outlier_prob.rank() != 2 ||
      class_probs.dim(1) != outlier_prob.dim(0) || class_probs.dim(2) != outlier_prob.dim(1))
    throw ShapeError("merge: class probabilities " + shape_str(class_probs.shape()) +
                     " do not match outlier map " + shape_str(outlier_prob.shape()));
  const std::size_t C = class_probs.dim(0), plane = outlier_prob.numel();
  std::vector<std::uint8_t> out(plane);
  for (std::size_t p = 0; p < plane; ++p) {
    if (outlier_prob[p] > threshold) {
      out[p] = static_cast<std::uint8_t>(C);
      continue;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (class_probs[c * plane + p] > class_probs[best * plane + p]) best = c;
    out[p] = static_cast<std::uint8_t>(best);
  }
  return out;
}

PredictionMaps upsample_predictions(const PredictionMaps& maps, std::size_t height,
                                    std::size_t width, double threshold) {
  if (height % maps.height != 0 || width % maps.width != 0 ||
      height / maps.height != width / maps.width)
    throw ShapeError("upsample_predictions: " + std::to_string(maps.height) + "x" +
                     std::to_string(maps.width) + " -> " + std::to_string(height) + "x" +
                     std::to_string(width) + " is not an integral upsampling");
  const std::size_t factor = height / maps.height;
  PredictionMaps out;
  out.num_classes = maps.num_classes;
  out.height = height;
  out.width = width;
  if (factor == 1) {
    out.class_probs = maps.class_probs;
    out.outlier_prob = maps.outlier_prob;
  } else {
    ad::Tape<float> tape;
    auto cp = tape.constant(maps.class_probs.reshaped({1, maps.num_classes, maps.height, maps.width}));
    auto op = tape.constant(maps.outlier_prob.reshaped({1, 1, maps.height, maps.width}));
    out.class_probs = ad::bilinear_upsample(cp, factor).value().reshaped({maps.num_classes, height, width});
    out.outlier_prob = ad::bilinear_upsample(op, factor).value().reshaped({height, width});
  }
  out.merged = merge(out.class_probs, out.outlier_prob, threshold);
  return out;
}

std::vector<PredictionMaps> predict(Model& model, const Tensor& images,
                                    const PredictOptions& options) {
  check_compatible(options.mode, model.config().head_kind);
  const std::size_t N_C = model.config().num_classes;
  Tensor class_probs, outlier;
  if (options.mode == ScoreMode::odin) {
    auto r = score_odin(model, images, options.odin_temperature, options.odin_epsilon);
    class_probs = std::move(r.class_probs);
    outlier = std::move(r.outlier_prob);
  } else if (options.mode == ScoreMode::mc_dropout) {
    auto r = score_mc_dropout(model, images, options.mc_passes, options.rng);
    class_probs = std::move(r.class_probs);
    outlier = std::move(r.outlier_prob);
  } else {
    ad::Tape<float> tape;
    auto out = model.forward(tape, images, ForwardMode::eval, options.rng);
    const Tensor& logits = out.class_logits.value();
    switch (options.mode) {
      case ScoreMode::max_softmax: outlier = score_max_softmax(logits); break;
      case ScoreMode::max_sigma: outlier = score_max_sigma(logits); break;
      case ScoreMode::cplus1: outlier = score_cplus1(logits); break;
      case ScoreMode::cplus1_diff: outlier = score_cplus1_diff(logits); break;
      case ScoreMode::twohead: outlier = score_twohead(out.outlier_logits->value()); break;
      case ScoreMode::confidence: outlier = score_confidence(out.confidence->value()); break;
      default: break;
    }
    if (model.config().head_kind == HeadKind::cplus1) {
      // class distribution over the inlier classes only
      const auto& s = logits.shape();
      Tensor inlier(Shape{s[0], N_C, s[2], s[3]});
      const std::size_t plane = s[2] * s[3];
      for (std::size_t n = 0; n < s[0]; ++n)
        std::copy_n(&logits[n * s[1] * plane], N_C * plane, &inlier[n * N_C * plane]);
      class_probs = softmax_channels(inlier);
    } else {
      class_probs = softmax_channels(logits);
    }
  }

  const auto& s = class_probs.shape();
  const std::size_t plane = s[2] * s[3];
  std::vector<PredictionMaps> result;
  for (std::size_t n = 0; n < s[0]; ++n) {
    PredictionMaps m;
    m.num_classes = N_C;
    m.height = s[2];
    m.width = s[3];
    m.class_probs = Tensor(Shape{N_C, s[2], s[3]},
                           std::vector<float>(&class_probs[n * N_C * plane],
                                              &class_probs[n * N_C * plane] + N_C * plane));
    m.outlier_prob = Tensor(Shape{s[2], s[3]}, std::vector<float>(&outlier[n * plane],
                                                                   &outlier[n * plane] + plane));
    result.push_back(upsample_predictions(m, images.dim(2), images.dim(3), options.threshold));
  }
  return result;
}

void write_score_png(const std::string& path, const Tensor& map) {
  if (map.rank() != 2) throw ShapeError("write_score_png: expected [H,W], got " + shape_str(map.shape()));
  PngImage img{map.dim(0), map.dim(1), 1, std::vector<std::uint8_t>(map.numel())};
  for (std::size_t i = 0; i < map.numel(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map[i], 0.0f, 1.0f) * 255.0f));
  write_png(path, img);
}

void write_index_png(const std::string& path, const std::vector<std::uint8_t>& indices,
                     std::size_t height, std::size_t width) {
  write_png(path, PngImage{height, width, 1, indices});
}

void write_raw_float(const std::string& base, const Tensor& map) {
  std::ofstream data(base + ".f32", std::ios::binary);
  if (!data) throw DataError(base + ".f32: cannot write");
  for (float v : map.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                static_cast<unsigned char>(bits >> 16),
                                static_cast<unsigned char>(bits >> 24)};
    data.write(reinterpret_cast<const char*>(b), 4);
  }
  nlohmann::json j;
  j["shape"] = map.shape();
  j["dtype"] = "float32";
  j["byte_order"] = "little";
  std::ofstream meta(base + ".json");
  if (!meta) throw DataError(base + ".json: cannot write");
  meta << j.dump(2) << '\n';
}

}  // namespace osseg
