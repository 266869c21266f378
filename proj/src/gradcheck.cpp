#include "osseg/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>

#include "osseg/autodiff.hpp"
#include "osseg/losses.hpp"
#include "osseg/model.hpp"

namespace osseg {

namespace {

using TD = BasicTensor<double>;
using VD = ad::Var<double>;
using Fn = std::function<VD(ad::Tape<double>&, const std::vector<VD>&)>;

struct Instance {
  std::vector<TD> inputs;
  Fn fn;
  bool sampled = false;  // probe a random subset of coordinates
};

struct Case {
  std::string name;
  std::function<Instance(Rng&)> make;
};

TD normal(Rng& rng, Shape shape, double scale = 1.0) {
  TD t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

TD uniform(Rng& rng, Shape shape, double lo, double hi) {
  TD t(std::move(shape));
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.uniform();
  return t;
}

/// Reduces a tensor to a scalar with fixed random weights, so that every
/// output element reaches the gradient with a distinct coefficient.
VD project(VD y, std::uint64_t key) {
  Rng r(key);
  TD w(y.shape());
  for (auto& v : w.data()) v = r.normal();
  return ad::sum(ad::mul(y, y.tape->constant(std::move(w))));
}

std::vector<LabelPair> random_labels(Rng& rng, std::size_t n, std::size_t h, std::size_t w,
                                     std::size_t num_classes) {
  std::vector<LabelPair> out;
  for (std::size_t i = 0; i < n; ++i) {
    LabelPair l(h, w, 0, kInlier);
    for (std::size_t p = 0; p < l.size(); ++p) {
      const double u = rng.uniform();
      if (u < 0.2) {
        l.y[p] = static_cast<std::uint8_t>(num_classes);
        l.z[p] = kOutlier;
      } else if (u < 0.3) {
        l.y[p] = kFileIgnore;
        l.z[p] = kIgnore;
      } else {
        l.y[p] = static_cast<std::uint8_t>(rng.uniform_int(0, static_cast<std::int64_t>(num_classes - 1)));
      }
    }
    out.push_back(std::move(l));
  }
  return out;
}

Case unary_case(std::string name, std::function<VD(VD)> op, double lo = 0, double hi = 0) {
  return {name, [op, lo, hi](Rng& rng) {
            Instance in;
            in.inputs.push_back(lo < hi ? uniform(rng, {2, 3, 4, 5}, lo, hi) : normal(rng, {2, 3, 4, 5}));
            const auto key = rng.next_u64();
            in.fn = [op, key](ad::Tape<double>&, const std::vector<VD>& v) { return project(op(v[0]), key); };
            return in;
          }};
}

Case binary_case(std::string name, std::function<VD(VD, VD)> op) {
  return {name, [op](Rng& rng) {
            Instance in;
            in.inputs = {normal(rng, {2, 3, 4, 5}), normal(rng, {2, 3, 4, 5})};
            const auto key = rng.next_u64();
            in.fn = [op, key](ad::Tape<double>&, const std::vector<VD>& v) {
              return project(op(v[0], v[1]), key);
            };
            return in;
          }};
}

/// One-input case with a custom shape.
Case shaped_case(std::string name, Shape shape, std::function<VD(VD)> op) {
  return {name, [shape, op](Rng& rng) {
            Instance in;
            in.inputs.push_back(normal(rng, shape));
            const auto key = rng.next_u64();
            in.fn = [op, key](ad::Tape<double>&, const std::vector<VD>& v) { return project(op(v[0]), key); };
            return in;
          }};
}

Case conv_case(std::string name, std::size_t size, std::size_t k, std::size_t stride, std::size_t pad) {
  return {name, [size, k, stride, pad](Rng& rng) {
            Instance in;
            in.inputs = {normal(rng, {2, 3, size, size}), normal(rng, {4, 3, k, k}, 0.5)};
            const auto key = rng.next_u64();
            in.fn = [key, stride, pad](ad::Tape<double>&, const std::vector<VD>& v) {
              return project(ad::conv2d(v[0], v[1], stride, pad), key);
            };
            return in;
          }};
}

/// A scalar loss of logits [N,C,H,W] and random labels.
Case loss_case(std::string name, std::size_t channels, std::size_t num_classes,
               std::function<VD(VD, const std::vector<LabelPair>&)> loss) {
  return {name, [=](Rng& rng) {
            Instance in;
            in.inputs.push_back(normal(rng, {2, channels, 4, 4}, 2.0));
            auto labels = std::make_shared<std::vector<LabelPair>>(random_labels(rng, 2, 4, 4, num_classes));
            in.fn = [labels, loss](ad::Tape<double>&, const std::vector<VD>& v) { return loss(v[0], *labels); };
            return in;
          }};
}

ModelConfig tiny_model(HeadKind kind) {
  ModelConfig c;
  c.num_classes = 3;
  c.head_kind = kind;
  c.backbone_widths = {2, 3, 3, 4};
  c.ladder_width = 3;
  return c;
}

Case total_case(std::string name, HeadKind kind, bool interpolate) {
  return {name, [=](Rng& rng) {
            auto model = std::make_shared<Model>(Model::build(tiny_model(kind), rng.derive("model")));
            Instance in;
            in.sampled = true;
            for (const auto& p : model->parameters()) in.inputs.push_back(p.value.cast<double>());
            auto image = std::make_shared<TD>(normal(rng, {2, 3, 64, 64}));
            auto labels = std::make_shared<std::vector<LabelPair>>(random_labels(rng, 2, 64, 64, 3));
            in.fn = [=](ad::Tape<double>& tape, const std::vector<VD>& params) {
              auto x = tape.constant(*image);
              auto out = model->forward<double>(params, x, ForwardMode::train, Rng(0), false);
              LossConfig cfg;
              TotalLossOptions opts;
              opts.interpolate_confidence = interpolate;
              return total_loss<double>(kind, out, *labels, 3, cfg, opts).total;
            };
            return in;
          }};
}

std::vector<Case> all_cases() {
  std::vector<Case> cs;
  cs.push_back(binary_case("add", [](VD a, VD b) { return ad::add(a, b); }));
  cs.push_back(binary_case("sub", [](VD a, VD b) { return ad::sub(a, b); }));
  cs.push_back(binary_case("mul", [](VD a, VD b) { return ad::mul(a, b); }));
  cs.push_back(unary_case("scale", [](VD a) { return ad::scale(a, 1.7); }));
  cs.push_back(unary_case("add_scalar", [](VD a) { return ad::add_scalar(a, -0.3); }));
  cs.push_back(unary_case("log", [](VD a) { return ad::log(a); }, 0.5, 2.0));
  cs.push_back(unary_case("exp", [](VD a) { return ad::exp(a); }));
  cs.push_back(unary_case("relu", [](VD a) { return ad::relu(a); }));
  cs.push_back(unary_case("sigmoid", [](VD a) { return ad::sigmoid(a); }));
  cs.push_back(unary_case("softplus", [](VD a) { return ad::softplus(a); }));
  cs.push_back(unary_case("sum", [](VD a) { return ad::scale(ad::sum(a), 0.5); }));
  cs.push_back(unary_case("mean", [](VD a) { return ad::mean(a); }));
  cs.push_back(unary_case("sum_axis", [](VD a) { return ad::sum_axis(a, 1); }));
  cs.push_back(unary_case("max", [](VD a) { return ad::max(a, 1); }));
  cs.push_back(unary_case("softmax", [](VD a) { return ad::softmax(a, 1); }));
  cs.push_back(unary_case("log_softmax", [](VD a) { return ad::log_softmax(a, 1); }));
  cs.push_back(conv_case("conv2d", 8, 3, 1, 1));
  cs.push_back(conv_case("conv2d.stride2", 9, 3, 2, 1));
  cs.push_back(conv_case("conv2d.pointwise", 8, 1, 1, 0));
  cs.push_back({"add_channel_bias", [](Rng& rng) {
                  Instance in;
                  in.inputs = {normal(rng, {2, 3, 4, 4}), normal(rng, {3})};
                  const auto key = rng.next_u64();
                  in.fn = [key](ad::Tape<double>&, const std::vector<VD>& v) {
                    return project(ad::add_channel_bias(v[0], v[1]), key);
                  };
                  return in;
                }});
  cs.push_back(shaped_case("bilinear_upsample.x2", {1, 2, 3, 3}, [](VD a) { return ad::bilinear_upsample(a, 2); }));
  cs.push_back(shaped_case("bilinear_upsample.x3", {1, 2, 3, 4}, [](VD a) { return ad::bilinear_upsample(a, 3); }));
  cs.push_back(shaped_case("avg_pool", {2, 2, 4, 6}, [](VD a) { return ad::avg_pool(a, 2); }));
  cs.push_back(shaped_case("adaptive_avg_pool", {1, 2, 5, 7}, [](VD a) { return ad::adaptive_avg_pool(a, 4); }));
  cs.push_back(shaped_case("grid_broadcast", {1, 2, 2, 2}, [](VD a) { return ad::grid_broadcast(a, 5, 7); }));
  cs.push_back({"concat_channels", [](Rng& rng) {
                  Instance in;
                  in.inputs = {normal(rng, {2, 1, 3, 3}), normal(rng, {2, 2, 3, 3}), normal(rng, {2, 3, 3, 3})};
                  const auto key = rng.next_u64();
                  in.fn = [key](ad::Tape<double>&, const std::vector<VD>& v) {
                    return project(ad::concat_channels<double>(v), key);
                  };
                  return in;
                }});
  cs.push_back(shaped_case("broadcast_channels", {2, 1, 3, 3}, [](VD a) { return ad::broadcast_channels(a, 4); }));
  cs.push_back(shaped_case("reshape", {2, 3, 4}, [](VD a) { return ad::reshape(a, {6, 4}); }));
  cs.push_back({"linear", [](Rng& rng) {
                  Instance in;
                  in.inputs = {normal(rng, {3, 5}), normal(rng, {4, 5}), normal(rng, {4})};
                  const auto key = rng.next_u64();
                  in.fn = [key](ad::Tape<double>&, const std::vector<VD>& v) {
                    return project(ad::linear(v[0], v[1], v[2]), key);
                  };
                  return in;
                }});
  for (bool training : {true, false}) {
    cs.push_back({training ? "batch_norm.train" : "batch_norm.eval", [training](Rng& rng) {
                    Instance in;
                    in.inputs = {normal(rng, {3, 4, 3, 3}), uniform(rng, {4}, 0.5, 1.5), normal(rng, {4})};
                    ad::BatchNormStats<double> stats{normal(rng, {4}).vec(), uniform(rng, {4}, 0.5, 2.0).vec()};
                    const auto key = rng.next_u64();
                    in.fn = [key, training, stats](ad::Tape<double>&, const std::vector<VD>& v) {
                      auto local = stats;
                      ad::BatchNormOptions opt;
                      opt.training = training;
                      return project(ad::batch_norm(v[0], v[1], v[2], local, opt), key);
                    };
                    return in;
                  }});
  }
  cs.push_back({"dropout", [](Rng& rng) {
                  Instance in;
                  in.inputs = {normal(rng, {2, 3, 4, 5})};
                  const Rng mask = rng.derive("mask");
                  const auto key = rng.next_u64();
                  in.fn = [key, mask](ad::Tape<double>&, const std::vector<VD>& v) {
                    Rng r = mask;
                    return project(ad::dropout(v[0], 0.3, r), key);
                  };
                  return in;
                }});

  const std::vector<double> w3{1.0, 0.5, 2.0};
  cs.push_back(loss_case("loss_mc", 3, 3, [w3](VD l, const std::vector<LabelPair>& y) {
    return loss_mc<double>(l, y, w3);
  }));
  cs.push_back(loss_case("loss_mc.cplus1", 4, 3, [](VD l, const std::vector<LabelPair>& y) {
    std::vector<LabelPair> r;
    for (const auto& p : y) r.push_back(p.cplus1(3));
    const std::vector<double> w{1.0, 1.0, 1.0, 0.05};
    return loss_mc<double>(l, r, w);
  }));
  cs.push_back(loss_case("loss_ml", 3, 3, [](VD l, const std::vector<LabelPair>& y) {
    return loss_ml<double>(l, y, 3);
  }));
  cs.push_back(loss_case("loss_th", 2, 3, [](VD l, const std::vector<LabelPair>& y) {
    return loss_th<double>(l, y);
  }));
  cs.push_back(loss_case("loss_kl", 3, 3, [](VD l, const std::vector<LabelPair>& y) {
    return loss_kl<double>(l, y);
  }));
  cs.push_back(loss_case("loss_conf", 1, 3, [](VD l, const std::vector<LabelPair>& y) {
    return loss_conf<double>(ad::sigmoid(l), y, 3);
  }));
  cs.push_back({"loss_mc_interpolated", [w3](Rng& rng) {
                  Instance in;
                  in.inputs = {normal(rng, {2, 3, 4, 4}, 2.0), normal(rng, {2, 1, 4, 4})};
                  auto labels = std::make_shared<std::vector<LabelPair>>(random_labels(rng, 2, 4, 4, 3));
                  in.fn = [labels, w3](ad::Tape<double>&, const std::vector<VD>& v) {
                    return loss_mc_interpolated<double>(v[0], ad::sigmoid(v[1]), *labels, w3);
                  };
                  return in;
                }});
  cs.push_back({"loss_aux", [](Rng& rng) {
                  Instance in;
                  in.inputs = {normal(rng, {2, 3, 4, 4}), normal(rng, {2, 3, 2, 2}), normal(rng, {2, 3, 1, 1})};
                  auto labels = std::make_shared<std::vector<LabelPair>>(random_labels(rng, 2, 8, 8, 3));
                  in.fn = [labels](ad::Tape<double>&, const std::vector<VD>& v) {
                    const std::vector<std::size_t> res{2, 4, 8};
                    return loss_aux<double>(v, *labels, res, 3);
                  };
                  return in;
                }});

  cs.push_back(total_case("total.multiclass", HeadKind::multiclass, false));
  cs.push_back(total_case("total.multilabel", HeadKind::multilabel, false));
  cs.push_back(total_case("total.cplus1", HeadKind::cplus1, false));
  cs.push_back(total_case("total.twohead", HeadKind::twohead, false));
  cs.push_back(total_case("total.confidence", HeadKind::confidence, false));
  cs.push_back(total_case("total.confidence.interpolated", HeadKind::confidence, true));
  return cs;
}

struct Eval {
  double value;
  std::uint64_t signature;
};

Eval evaluate(const Instance& in, const std::vector<TD>& xs) {
  ad::Tape<double> tape;
  std::vector<VD> vs;
  for (const auto& x : xs) vs.push_back(tape.variable(x));
  auto out = in.fn(tape, vs);
  return {out.value()[0], tape.branch_signature()};
}

}  // namespace

std::vector<std::string> gradcheck_cases() {
  std::vector<std::string> names;
  for (const auto& c : all_cases()) names.push_back(c.name);
  return names;
}

std::vector<GradcheckResult> run_gradcheck(const GradcheckOptions& options) {
  std::vector<GradcheckResult> results;
  for (const auto& c : all_cases()) {
    if (c.name.rfind(options.filter, 0) != 0) continue;
    const auto start = std::chrono::steady_clock::now();
    GradcheckResult res;
    res.name = c.name;
    for (std::size_t seed = 0; seed < options.seeds; ++seed) {
      Rng rng = Rng(seed).derive(c.name);
      const Instance in = c.make(rng);

      ad::Tape<double> tape;
      std::vector<VD> vs;
      for (const auto& x : in.inputs) vs.push_back(tape.variable(x));
      auto out = in.fn(tape, vs);
      const std::uint64_t base = tape.branch_signature();
      auto analytic = tape.grad(out, vs);
      if (options.inject_fault == c.name)
        for (auto& g : analytic)
          for (auto& v : g.data()) v *= 1.01;

      std::vector<std::pair<std::size_t, std::size_t>> coords;
      std::size_t total = 0;
      for (std::size_t k = 0; k < in.inputs.size(); ++k) total += in.inputs[k].numel();
      if (in.sampled && options.model_coordinates && options.model_coordinates < total) {
        Rng pick = rng.derive("coords");
        for (std::size_t n = 0; n < options.model_coordinates; ++n) {
          auto flat = static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(total - 1)));
          std::size_t k = 0;
          while (flat >= in.inputs[k].numel()) flat -= in.inputs[k++].numel();
          coords.emplace_back(k, flat);
        }
      } else {
        for (std::size_t k = 0; k < in.inputs.size(); ++k)
          for (std::size_t i = 0; i < in.inputs[k].numel(); ++i) coords.emplace_back(k, i);
      }

      // Sampled cases pool all coordinates into one comparison; otherwise
      // each input tensor is compared on its own scale.
      const std::size_t groups = in.sampled ? 1 : in.inputs.size();
      std::vector<double> max_diff(groups, 0.0), max_ref(groups, 0.0);
      std::vector<TD> xs = in.inputs;
      for (const auto& [k, i] : coords) {
        const double orig = xs[k][i];
        xs[k][i] = orig + options.step;
        const Eval plus = evaluate(in, xs);
        xs[k][i] = orig - options.step;
        const Eval minus = evaluate(in, xs);
        xs[k][i] = orig;
        if (plus.signature != base || minus.signature != base) {
          ++res.skipped;
          continue;
        }
        const double fd = (plus.value - minus.value) / (2 * options.step);
        const double a = analytic[k][i];
        const std::size_t g = in.sampled ? 0 : k;
        max_diff[g] = std::max(max_diff[g], std::abs(a - fd));
        max_ref[g] = std::max({max_ref[g], std::abs(fd), std::abs(a)});
        ++res.checked;
      }
      for (std::size_t g = 0; g < groups; ++g) {
        const double rel = max_diff[g] / std::max(max_ref[g], 1e-6);
        res.max_rel_error = std::max(res.max_rel_error, rel);
      }
    }
    res.passed = res.checked > 0 && res.max_rel_error < options.tolerance;
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    results.push_back(res);
  }
  return results;
}

}  // namespace osseg
