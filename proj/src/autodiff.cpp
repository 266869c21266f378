#include "osseg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "osseg/kernels.hpp"

namespace osseg::ad {

namespace {

template <class T>
using TensorT = BasicTensor<T>;

template <class T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <class T>
void require_rank4(const Var<T>& a, const char* op) {
  if (a.shape().size() != 4)
    throw ShapeError(std::string(op) + ": expected NCHW input, got " + shape_str(a.shape()));
}

struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

template <class T, class F>
Var<T> unary(Var<T> a, F&& f, std::function<void(Tape<T>&, const TensorT<T>&, std::size_t,
                                                 std::size_t)>
                                  backward) {
  TensorT<T> out(a.shape());
  const auto& x = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(x[i]);
  auto* tape = a.tape;
  const std::size_t in_id = a.id;
  const std::size_t out_id = tape->size();
  return tape->record(std::move(out), {a},
                      [backward, in_id, out_id](Tape<T>& t, const TensorT<T>& g) {
                        backward(t, g, in_id, out_id);
                      });
}

template <class T>
T stable_sigmoid(T a) {
  if (a >= 0) return T(1) / (T(1) + std::exp(-a));
  const T e = std::exp(a);
  return e / (T(1) + e);
}

struct LerpTap {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<LerpTap> lerp_table(std::size_t in, std::size_t factor) {
  std::vector<LerpTap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l = src - static_cast<double>(i0);
    taps[o] = {i0, i1, 1.0 - l, l};
  }
  return taps;
}

std::size_t cell_begin(std::size_t i, std::size_t extent, std::size_t grid) {
  return (i * extent) / grid;
}
std::size_t cell_end(std::size_t i, std::size_t extent, std::size_t grid) {
  return ((i + 1) * extent + grid - 1) / grid;
}

}  // namespace

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same(a, b, "add");
  TensorT<T> out(a.shape());
  const auto &x = a.value(), &y = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] + y[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const TensorT<T>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same(a, b, "sub");
  TensorT<T> out(a.shape());
  const auto &x = a.value(), &y = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] - y[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const TensorT<T>& g) {
    t.accumulate(ia, g);
    TensorT<T> neg(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) neg[i] = -g[i];
    t.accumulate(ib, std::move(neg));
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same(a, b, "mul");
  TensorT<T> out(a.shape());
  const auto &x = a.value(), &y = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * y[i];
  const auto ia = a.id, ib = b.id;
  return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<T>& t, const TensorT<T>& g) {
    const auto &x = t.value(ia), &y = t.value(ib);
    if (t.requires_grad(ia)) {
      TensorT<T> ga(g.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * y[i];
      t.accumulate(ia, std::move(ga));
    }
    if (t.requires_grad(ib)) {
      TensorT<T> gb(g.shape());
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * x[i];
      t.accumulate(ib, std::move(gb));
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
  return unary<T>(
      a, [factor](T v) { return v * factor; },
      [factor](Tape<T>& t, const TensorT<T>& g, std::size_t in, std::size_t) {
        TensorT<T> gi(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) gi[i] = g[i] * factor;
        t.accumulate(in, std::move(gi));
      });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
  return unary<T>(
      a, [c](T v) { return v + c; },
      [](Tape<T>& t, const TensorT<T>& g, std::size_t in, std::size_t) { t.accumulate(in, g); });
}

template <class T>
Var<T> log(Var<T> a) {
  return unary<T>(
      a, [](T v) { return std::log(v); },
      [](Tape<T>& t, const TensorT<T>& g, std::size_t in, std::size_t) {
        const auto& x = t.value(in);
        TensorT<T> gi(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) gi[i] = g[i] / x[i];
        t.accumulate(in, std::move(gi));
      });
}

template <class T>
Var<T> exp(Var<T> a) {
  return unary<T>(
      a, [](T v) { return std::exp(v); },
      [](Tape<T>& t, const TensorT<T>& g, std::size_t in, std::size_t out) {
        const auto& y = t.value(out);
        TensorT<T> gi(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) gi[i] = g[i] * y[i];
        t.accumulate(in, std::move(gi));
      });
}

template <class T>
Var<T> relu(Var<T> a) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto v : a.value().data()) h = (h ^ static_cast<std::uint64_t>(v > 0)) * 1099511628211ull;
  a.tape->note_branch(h);
  return unary<T>(
      a, [](T v) { return v > 0 ? v : T(0); },
      [](Tape<T>& t, const TensorT<T>& g, std::size_t in, std::size_t) {
        const auto& x = t.value(in);
        TensorT<T> gi(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) gi[i] = x[i] > 0 ? g[i] : T(0);
        t.accumulate(in, std::move(gi));
      });
}

template <class T>
Var<T> sigmoid(Var<T> a) {
  return unary<T>(
      a, [](T v) { return stable_sigmoid(v); },
      [](Tape<T>& t, const TensorT<T>& g, std::size_t in, std::size_t out) {
        const auto& y = t.value(out);
        TensorT<T> gi(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) gi[i] = g[i] * y[i] * (T(1) - y[i]);
        t.accumulate(in, std::move(gi));
      });
}

template <class T>
Var<T> softplus(Var<T> a) {
  return unary<T>(
      a, [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](Tape<T>& t, const TensorT<T>& g, std::size_t in, std::size_t) {
        const auto& x = t.value(in);
        TensorT<T> gi(g.shape());
        for (std::size_t i = 0; i < g.numel(); ++i) gi[i] = g[i] * stable_sigmoid(x[i]);
        t.accumulate(in, std::move(gi));
      });
}

template <class T>
Var<T> sum(Var<T> a) {
  double acc = 0;
  for (auto v : a.value().data()) acc += v;
  const auto in = a.id;
  return a.tape->record(TensorT<T>::scalar(static_cast<T>(acc)), {a},
                        [in](Tape<T>& t, const TensorT<T>& g) {
                          t.accumulate(in, TensorT<T>(t.value(in).shape(), g[0]));
                        });
}

template <class T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().numel()));
}

template <class T>
Var<T> sum_axis(Var<T> a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = 1;
  TensorT<T> out(out_shape);
  const auto& x = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t c = 0; c < sp.extent; ++c)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += x[(o * sp.extent + c) * sp.inner + i];
  const auto in = a.id;
  return a.tape->record(std::move(out), {a}, [in, sp](Tape<T>& t, const TensorT<T>& g) {
    TensorT<T> gi(t.value(in).shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t c = 0; c < sp.extent; ++c)
        for (std::size_t i = 0; i < sp.inner; ++i)
          gi[(o * sp.extent + c) * sp.inner + i] = g[o * sp.inner + i];
    t.accumulate(in, std::move(gi));
  });
}

template <class T>
Var<T> max(Var<T> a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = 1;
  TensorT<T> out(out_shape);
  std::vector<std::size_t> arg(sp.outer * sp.inner);
  const auto& x = a.value();
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      T bv = x[o * sp.extent * sp.inner + i];
      for (std::size_t c = 1; c < sp.extent; ++c) {
        const T v = x[(o * sp.extent + c) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      out[o * sp.inner + i] = bv;
      arg[o * sp.inner + i] = best;
      h = (h ^ best) * 1099511628211ull;
    }
  a.tape->note_branch(h);
  const auto in = a.id;
  return a.tape->record(std::move(out), {a},
                        [in, sp, arg = std::move(arg)](Tape<T>& t, const TensorT<T>& g) {
                          TensorT<T> gi(t.value(in).shape());
                          for (std::size_t o = 0; o < sp.outer; ++o)
                            for (std::size_t i = 0; i < sp.inner; ++i) {
                              const std::size_t c = arg[o * sp.inner + i];
                              gi[(o * sp.extent + c) * sp.inner + i] = g[o * sp.inner + i];
                            }
                          t.accumulate(in, std::move(gi));
                        });
}

template <class T>
Var<T> softmax(Var<T> logits, std::size_t axis) {
  const auto sp = split_axis(logits.shape(), axis);
  const auto& x = logits.value();
  TensorT<T> out(logits.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      T m = x[base];
      for (std::size_t c = 1; c < sp.extent; ++c) m = std::max(m, x[base + c * sp.inner]);
      T z = 0;
      for (std::size_t c = 0; c < sp.extent; ++c) {
        const T e = std::exp(x[base + c * sp.inner] - m);
        out[base + c * sp.inner] = e;
        z += e;
      }
      for (std::size_t c = 0; c < sp.extent; ++c) out[base + c * sp.inner] /= z;
    }
  const auto in = logits.id;
  const auto out_id = logits.tape->size();
  return logits.tape->record(std::move(out), {logits},
                             [in, out_id, sp](Tape<T>& t, const TensorT<T>& g) {
                               const auto& y = t.value(out_id);
                               TensorT<T> gi(y.shape());
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t i = 0; i < sp.inner; ++i) {
                                   const std::size_t base = o * sp.extent * sp.inner + i;
                                   T dot = 0;
                                   for (std::size_t c = 0; c < sp.extent; ++c)
                                     dot += g[base + c * sp.inner] * y[base + c * sp.inner];
                                   for (std::size_t c = 0; c < sp.extent; ++c) {
                                     const std::size_t k = base + c * sp.inner;
                                     gi[k] = y[k] * (g[k] - dot);
                                   }
                                 }
                               t.accumulate(in, std::move(gi));
                             });
}

template <class T>
Var<T> log_softmax(Var<T> logits, std::size_t axis) {
  const auto sp = split_axis(logits.shape(), axis);
  const auto& x = logits.value();
  TensorT<T> out(logits.shape());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      T m = x[base];
      for (std::size_t c = 1; c < sp.extent; ++c) m = std::max(m, x[base + c * sp.inner]);
      T z = 0;
      for (std::size_t c = 0; c < sp.extent; ++c) z += std::exp(x[base + c * sp.inner] - m);
      const T lse = m + std::log(z);
      for (std::size_t c = 0; c < sp.extent; ++c)
        out[base + c * sp.inner] = x[base + c * sp.inner] - lse;
    }
  const auto in = logits.id;
  const auto out_id = logits.tape->size();
  return logits.tape->record(std::move(out), {logits},
                             [in, out_id, sp](Tape<T>& t, const TensorT<T>& g) {
                               const auto& y = t.value(out_id);
                               TensorT<T> gi(y.shape());
                               for (std::size_t o = 0; o < sp.outer; ++o)
                                 for (std::size_t i = 0; i < sp.inner; ++i) {
                                   const std::size_t base = o * sp.extent * sp.inner + i;
                                   T gs = 0;
                                   for (std::size_t c = 0; c < sp.extent; ++c)
                                     gs += g[base + c * sp.inner];
                                   for (std::size_t c = 0; c < sp.extent; ++c) {
                                     const std::size_t k = base + c * sp.inner;
                                     gi[k] = g[k] - std::exp(y[k]) * gs;
                                   }
                                 }
                               t.accumulate(in, std::move(gi));
                             });
}

template <class T>
Var<T> conv2d(Var<T> input, Var<T> kernel, std::size_t stride, std::size_t padding) {
  const auto& is = input.shape();
  const auto& ks = kernel.shape();
  auto fail = [&](const std::string& why) {
    throw ShapeError("conv2d: " + why + " (input " + shape_str(is) + ", kernel " + shape_str(ks) +
                     ", stride " + std::to_string(stride) + ", padding " +
                     std::to_string(padding) + ")");
  };
  if (is.size() != 4 || ks.size() != 4) fail("expected rank-4 input and kernel");
  if (is[1] != ks[1]) fail("input channels do not match kernel");
  if (ks[2] % 2 == 0 || ks[3] % 2 == 0) fail("kernel extents must be odd");
  if (stride == 0) fail("stride must be positive");
  if (is[2] + 2 * padding < ks[2] || is[3] + 2 * padding < ks[3]) fail("kernel larger than input");
  if ((is[2] + 2 * padding - ks[2]) % stride != 0 || (is[3] + 2 * padding - ks[3]) % stride != 0)
    fail("output extent is not integral");
  kernels::ConvGeometry geo{is[0], is[1], is[2], is[3], ks[0], ks[2], ks[3], stride, padding};
  TensorT<T> out(Shape{is[0], ks[0], geo.out_height(), geo.out_width()});
  kernels::parallel::conv2d_forward<T>(geo, input.value().data(), kernel.value().data(),
                                       out.data());
  const auto ix = input.id, ik = kernel.id;
  return input.tape->record(std::move(out), {input, kernel},
                            [ix, ik, geo](Tape<T>& t, const TensorT<T>& g) {
                              if (t.requires_grad(ix)) {
                                TensorT<T> gx(t.value(ix).shape());
                                kernels::parallel::conv2d_backward_input<T>(
                                    geo, g.data(), t.value(ik).data(), gx.data());
                                t.accumulate(ix, std::move(gx));
                              }
                              if (t.requires_grad(ik)) {
                                TensorT<T> gk(t.value(ik).shape());
                                kernels::parallel::conv2d_backward_weight<T>(
                                    geo, g.data(), t.value(ix).data(), gk.data());
                                t.accumulate(ik, std::move(gk));
                              }
                            });
}

template <class T>
Var<T> add_channel_bias(Var<T> input, Var<T> bias) {
  require_rank4(input, "add_channel_bias");
  const auto& s = input.shape();
  if (bias.value().numel() != s[1])
    throw ShapeError("add_channel_bias: bias " + shape_str(bias.shape()) + " vs input " +
                     shape_str(s));
  const std::size_t plane = s[2] * s[3];
  TensorT<T> out = input.value();
  const auto& b = bias.value();
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c) {
      T* p = out.data().data() + (n * s[1] + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
    }
  const auto ix = input.id, ib = bias.id;
  return input.tape->record(std::move(out), {input, bias},
                            [ix, ib, s, plane](Tape<T>& t, const TensorT<T>& g) {
                              t.accumulate(ix, g);
                              if (!t.requires_grad(ib)) return;
                              TensorT<T> gb(t.value(ib).shape());
                              for (std::size_t n = 0; n < s[0]; ++n)
                                for (std::size_t c = 0; c < s[1]; ++c) {
                                  const T* p = g.data().data() + (n * s[1] + c) * plane;
                                  T acc = 0;
                                  for (std::size_t i = 0; i < plane; ++i) acc += p[i];
                                  gb[c] += acc;
                                }
                              t.accumulate(ib, std::move(gb));
                            });
}

template <class T>
Var<T> bilinear_upsample(Var<T> input, std::size_t factor) {
  require_rank4(input, "bilinear_upsample");
  if (factor == 0) throw ShapeError("bilinear_upsample: factor must be >= 1");
  const auto s = input.shape();
  if (factor == 1)
    return input.tape->record(input.value(), {input}, [ix = input.id](Tape<T>& t, const TensorT<T>& g) {
      t.accumulate(ix, g);
    });
  const std::size_t oh = s[2] * factor, ow = s[3] * factor;
  const auto ty = lerp_table(s[2], factor);
  const auto tx = lerp_table(s[3], factor);
  TensorT<T> out(Shape{s[0], s[1], oh, ow});
  const auto& x = input.value();
  for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc) {
    const T* src = x.data().data() + nc * s[2] * s[3];
    T* dst = out.data().data() + nc * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const auto& a = ty[y];
      const T* r0 = src + a.i0 * s[3];
      const T* r1 = src + a.i1 * s[3];
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const auto& b = tx[xx];
        const T top = static_cast<T>(b.w0) * r0[b.i0] + static_cast<T>(b.w1) * r0[b.i1];
        const T bot = static_cast<T>(b.w0) * r1[b.i0] + static_cast<T>(b.w1) * r1[b.i1];
        dst[y * ow + xx] = static_cast<T>(a.w0) * top + static_cast<T>(a.w1) * bot;
      }
    }
  }
  const auto ix = input.id;
  return input.tape->record(
      std::move(out), {input}, [ix, s, oh, ow, ty, tx](Tape<T>& t, const TensorT<T>& g) {
        TensorT<T> gi(s);
        for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc) {
          T* dst = gi.data().data() + nc * s[2] * s[3];
          const T* src = g.data().data() + nc * oh * ow;
          for (std::size_t y = 0; y < oh; ++y) {
            const auto& a = ty[y];
            for (std::size_t xx = 0; xx < ow; ++xx) {
              const auto& b = tx[xx];
              const T v = src[y * ow + xx];
              dst[a.i0 * s[3] + b.i0] += static_cast<T>(a.w0 * b.w0) * v;
              dst[a.i0 * s[3] + b.i1] += static_cast<T>(a.w0 * b.w1) * v;
              dst[a.i1 * s[3] + b.i0] += static_cast<T>(a.w1 * b.w0) * v;
              dst[a.i1 * s[3] + b.i1] += static_cast<T>(a.w1 * b.w1) * v;
            }
          }
        }
        t.accumulate(ix, std::move(gi));
      });
}

template <class T>
Var<T> avg_pool(Var<T> input, std::size_t k) {
  require_rank4(input, "avg_pool");
  const auto s = input.shape();
  if (k == 0 || s[2] % k != 0 || s[3] % k != 0)
    throw ShapeError("avg_pool: extents of " + shape_str(s) + " not divisible by " +
                     std::to_string(k));
  const std::size_t oh = s[2] / k, ow = s[3] / k;
  const T inv = T(1) / static_cast<T>(k * k);
  TensorT<T> out(Shape{s[0], s[1], oh, ow});
  const auto& x = input.value();
  for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        T acc = 0;
        for (std::size_t dy = 0; dy < k; ++dy)
          for (std::size_t dx = 0; dx < k; ++dx)
            acc += x[(nc * s[2] + y * k + dy) * s[3] + xx * k + dx];
        out[(nc * oh + y) * ow + xx] = acc * inv;
      }
  const auto ix = input.id;
  return input.tape->record(std::move(out), {input},
                            [ix, s, k, oh, ow, inv](Tape<T>& t, const TensorT<T>& g) {
                              TensorT<T> gi(s);
                              for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
                                for (std::size_t y = 0; y < oh; ++y)
                                  for (std::size_t xx = 0; xx < ow; ++xx) {
                                    const T v = g[(nc * oh + y) * ow + xx] * inv;
                                    for (std::size_t dy = 0; dy < k; ++dy)
                                      for (std::size_t dx = 0; dx < k; ++dx)
                                        gi[(nc * s[2] + y * k + dy) * s[3] + xx * k + dx] = v;
                                  }
                              t.accumulate(ix, std::move(gi));
                            });
}

template <class T>
Var<T> adaptive_avg_pool(Var<T> input, std::size_t grid) {
  require_rank4(input, "adaptive_avg_pool");
  if (grid == 0) throw ShapeError("adaptive_avg_pool: grid must be positive");
  const auto s = input.shape();
  TensorT<T> out(Shape{s[0], s[1], grid, grid});
  const auto& x = input.value();
  for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
    for (std::size_t gy = 0; gy < grid; ++gy)
      for (std::size_t gx = 0; gx < grid; ++gx) {
        const std::size_t y0 = cell_begin(gy, s[2], grid), y1 = cell_end(gy, s[2], grid);
        const std::size_t x0 = cell_begin(gx, s[3], grid), x1 = cell_end(gx, s[3], grid);
        T acc = 0;
        for (std::size_t y = y0; y < y1; ++y)
          for (std::size_t xx = x0; xx < x1; ++xx) acc += x[(nc * s[2] + y) * s[3] + xx];
        out[(nc * grid + gy) * grid + gx] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
  const auto ix = input.id;
  return input.tape->record(std::move(out), {input}, [ix, s, grid](Tape<T>& t, const TensorT<T>& g) {
    TensorT<T> gi(s);
    for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
      for (std::size_t gy = 0; gy < grid; ++gy)
        for (std::size_t gx = 0; gx < grid; ++gx) {
          const std::size_t y0 = cell_begin(gy, s[2], grid), y1 = cell_end(gy, s[2], grid);
          const std::size_t x0 = cell_begin(gx, s[3], grid), x1 = cell_end(gx, s[3], grid);
          const T v = g[(nc * grid + gy) * grid + gx] / static_cast<T>((y1 - y0) * (x1 - x0));
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t xx = x0; xx < x1; ++xx) gi[(nc * s[2] + y) * s[3] + xx] += v;
        }
    t.accumulate(ix, std::move(gi));
  });
}

template <class T>
Var<T> grid_broadcast(Var<T> cells, std::size_t height, std::size_t width) {
  require_rank4(cells, "grid_broadcast");
  const auto s = cells.shape();
  if (s[2] != s[3]) throw ShapeError("grid_broadcast: expected square grid, got " + shape_str(s));
  const std::size_t grid = s[2];
  TensorT<T> out(Shape{s[0], s[1], height, width});
  const auto& x = cells.value();
  for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t xx = 0; xx < width; ++xx)
        out[(nc * height + y) * width + xx] =
            x[(nc * grid + y * grid / height) * grid + xx * grid / width];
  const auto ix = cells.id;
  return cells.tape->record(
      std::move(out), {cells}, [ix, s, grid, height, width](Tape<T>& t, const TensorT<T>& g) {
        TensorT<T> gi(s);
        for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc)
          for (std::size_t y = 0; y < height; ++y)
            for (std::size_t xx = 0; xx < width; ++xx)
              gi[(nc * grid + y * grid / height) * grid + xx * grid / width] +=
                  g[(nc * height + y) * width + xx];
        t.accumulate(ix, std::move(gi));
      });
}

template <class T>
Var<T> concat_channels(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = parts[0].shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: incompatible shapes " + shape_str(s0) + " and " +
                       shape_str(s));
    channels += s[1];
  }
  const std::size_t plane = s0[2] * s0[3];
  TensorT<T> out(Shape{s0[0], channels, s0[2], s0[3]});
  std::vector<std::size_t> ids, widths;
  for (std::size_t n = 0; n < s0[0]; ++n) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t c = p.shape()[1];
      const T* src = p.value().data().data() + n * c * plane;
      std::copy(src, src + c * plane, out.data().data() + (n * channels + offset) * plane);
      offset += c;
    }
  }
  for (const auto& p : parts) {
    ids.push_back(p.id);
    widths.push_back(p.shape()[1]);
  }
  const std::size_t batch = s0[0];
  return parts[0].tape->record(
      std::move(out), parts,
      [ids, widths, batch, channels, plane](Tape<T>& t, const TensorT<T>& g) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (t.requires_grad(ids[k])) {
            TensorT<T> gi(t.value(ids[k]).shape());
            for (std::size_t n = 0; n < batch; ++n) {
              const T* src = g.data().data() + (n * channels + offset) * plane;
              std::copy(src, src + widths[k] * plane, gi.data().data() + n * widths[k] * plane);
            }
            t.accumulate(ids[k], std::move(gi));
          }
          offset += widths[k];
        }
      });
}

template <class T>
Var<T> broadcast_channels(Var<T> input, std::size_t channels) {
  require_rank4(input, "broadcast_channels");
  const auto s = input.shape();
  if (s[1] != 1) throw ShapeError("broadcast_channels: expected one channel, got " + shape_str(s));
  const std::size_t plane = s[2] * s[3];
  TensorT<T> out(Shape{s[0], channels, s[2], s[3]});
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(input.value().data().data() + n * plane, plane,
                  out.data().data() + (n * channels + c) * plane);
  const auto ix = input.id;
  return input.tape->record(std::move(out), {input},
                            [ix, s, channels, plane](Tape<T>& t, const TensorT<T>& g) {
                              TensorT<T> gi(s);
                              for (std::size_t n = 0; n < s[0]; ++n)
                                for (std::size_t c = 0; c < channels; ++c)
                                  for (std::size_t i = 0; i < plane; ++i)
                                    gi[n * plane + i] += g[(n * channels + c) * plane + i];
                              t.accumulate(ix, std::move(gi));
                            });
}

template <class T>
Var<T> reshape(Var<T> input, Shape shape) {
  auto out = input.value().reshaped(shape);
  const auto ix = input.id;
  return input.tape->record(std::move(out), {input}, [ix](Tape<T>& t, const TensorT<T>& g) {
    t.accumulate(ix, g.reshaped(t.value(ix).shape()));
  });
}

template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const auto &xs = x.shape(), &ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] || bias.value().numel() != ws[0])
    throw ShapeError("linear: incompatible shapes x " + shape_str(xs) + ", weight " +
                     shape_str(ws) + ", bias " + shape_str(bias.shape()));
  const std::size_t n = xs[0], in = xs[1], out_f = ws[0];
  TensorT<T> out(Shape{n, out_f});
  const auto &xv = x.value(), &wv = weight.value(), &bv = bias.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < out_f; ++o) {
      T acc = bv[o];
      for (std::size_t i = 0; i < in; ++i) acc += xv[r * in + i] * wv[o * in + i];
      out[r * out_f + o] = acc;
    }
  const auto ix = x.id, iw = weight.id, ib = bias.id;
  return x.tape->record(std::move(out), {x, weight, bias},
                        [ix, iw, ib, n, in, out_f](Tape<T>& t, const TensorT<T>& g) {
                          const auto &xv = t.value(ix), &wv = t.value(iw);
                          if (t.requires_grad(ix)) {
                            TensorT<T> gx(xv.shape());
                            for (std::size_t r = 0; r < n; ++r)
                              for (std::size_t o = 0; o < out_f; ++o)
                                for (std::size_t i = 0; i < in; ++i)
                                  gx[r * in + i] += g[r * out_f + o] * wv[o * in + i];
                            t.accumulate(ix, std::move(gx));
                          }
                          if (t.requires_grad(iw)) {
                            TensorT<T> gw(wv.shape());
                            for (std::size_t r = 0; r < n; ++r)
                              for (std::size_t o = 0; o < out_f; ++o)
                                for (std::size_t i = 0; i < in; ++i)
                                  gw[o * in + i] += g[r * out_f + o] * xv[r * in + i];
                            t.accumulate(iw, std::move(gw));
                          }
                          if (t.requires_grad(ib)) {
                            TensorT<T> gb(t.value(ib).shape());
                            for (std::size_t r = 0; r < n; ++r)
                              for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
                            t.accumulate(ib, std::move(gb));
                          }
                        });
}

template <class T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats,
                  const BatchNormOptions& options) {
  require_rank4(input, "batch_norm");
  const auto s = input.shape();
  const std::size_t channels = s[1], plane = s[2] * s[3], count = s[0] * plane;
  if (gamma.value().numel() != channels || beta.value().numel() != channels ||
      stats.mean.size() != channels || stats.var.size() != channels)
    throw ShapeError("batch_norm: parameter sizes do not match channels of " + shape_str(s));
  const auto& x = input.value();
  std::vector<T> mu(channels), inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    if (options.training) {
      double acc = 0;
      for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t i = 0; i < plane; ++i) acc += x[(n * channels + c) * plane + i];
      const double m = acc / static_cast<double>(count);
      double sq = 0;
      for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = x[(n * channels + c) * plane + i] - m;
          sq += d * d;
        }
      const double var = sq / static_cast<double>(count);
      mu[c] = static_cast<T>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + options.eps));
      if (options.update_running) {
        const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
        stats.mean[c] = static_cast<T>(options.momentum * stats.mean[c] +
                                       (1.0 - options.momentum) * m);
        stats.var[c] = static_cast<T>(options.momentum * stats.var[c] +
                                      (1.0 - options.momentum) * unbiased);
      }
    } else {
      mu[c] = stats.mean[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(stats.var[c]) + options.eps));
    }
  }
  TensorT<T> out(s);
  const auto &ga = gamma.value(), &be = beta.value();
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i)
        out[base + i] = ga[c] * ((x[base + i] - mu[c]) * inv_std[c]) + be[c];
    }
  const auto ix = input.id, ig = gamma.id, ib = beta.id;
  const bool training = options.training;
  return input.tape->record(
      std::move(out), {input, gamma, beta},
      [ix, ig, ib, s, channels, plane, count, mu, inv_std, training](Tape<T>& t,
                                                                     const TensorT<T>& g) {
        const auto& x = t.value(ix);
        const auto& ga = t.value(ig);
        TensorT<T> gx(s), gg(Shape{channels}), gb(Shape{channels});
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_g = 0, sum_gx = 0;
          for (std::size_t n = 0; n < s[0]; ++n)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t k = (n * channels + c) * plane + i;
              const double xhat = (x[k] - mu[c]) * inv_std[c];
              sum_g += g[k];
              sum_gx += g[k] * xhat;
            }
          gg[c] = static_cast<T>(sum_gx);
          gb[c] = static_cast<T>(sum_g);
          const double m = static_cast<double>(count);
          for (std::size_t n = 0; n < s[0]; ++n)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t k = (n * channels + c) * plane + i;
              if (training) {
                const double xhat = (x[k] - mu[c]) * inv_std[c];
                gx[k] = static_cast<T>(ga[c] * inv_std[c] / m *
                                       (m * g[k] - sum_g - xhat * sum_gx));
              } else {
                gx[k] = g[k] * ga[c] * inv_std[c];
              }
            }
        }
        t.accumulate(ix, std::move(gx));
        t.accumulate(ig, std::move(gg));
        t.accumulate(ib, std::move(gb));
      });
}

template <class T>
Var<T> dropout(Var<T> input, double p, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0))
    throw std::invalid_argument("dropout: probability must be in [0, 1), got " + std::to_string(p));
  const auto& x = input.value();
  std::vector<T> mask(x.numel());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& m : mask) m = rng.uniform() >= p ? keep_scale : T(0);
  TensorT<T> out(x.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] * mask[i];
  const auto ix = input.id;
  return input.tape->record(std::move(out), {input},
                            [ix, mask = std::move(mask)](Tape<T>& t, const TensorT<T>& g) {
                              TensorT<T> gi(g.shape());
                              for (std::size_t i = 0; i < g.numel(); ++i) gi[i] = g[i] * mask[i];
                              t.accumulate(ix, std::move(gi));
                            });
}

#define OSSEG_INSTANTIATE(T)                                                                   \
  template Var<T> add(Var<T>, Var<T>);                                                         \
  template Var<T> sub(Var<T>, Var<T>);                                                         \
  template Var<T> mul(Var<T>, Var<T>);                                                         \
  template Var<T> scale(Var<T>, T);                                                            \
  template Var<T> add_scalar(Var<T>, T);                                                       \
  template Var<T> log(Var<T>);                                                                 \
  template Var<T> exp(Var<T>);                                                                 \
  template Var<T> relu(Var<T>);                                                                \
  template Var<T> sigmoid(Var<T>);                                                             \
  template Var<T> softplus(Var<T>);                                                            \
  template Var<T> sum(Var<T>);                                                                 \
  template Var<T> mean(Var<T>);                                                                \
  template Var<T> sum_axis(Var<T>, std::size_t);                                               \
  template Var<T> max(Var<T>, std::size_t);                                                    \
  template Var<T> softmax(Var<T>, std::size_t);                                                \
  template Var<T> log_softmax(Var<T>, std::size_t);                                            \
  template Var<T> conv2d(Var<T>, Var<T>, std::size_t, std::size_t);                            \
  template Var<T> add_channel_bias(Var<T>, Var<T>);                                            \
  template Var<T> bilinear_upsample(Var<T>, std::size_t);                                      \
  template Var<T> avg_pool(Var<T>, std::size_t);                                               \
  template Var<T> adaptive_avg_pool(Var<T>, std::size_t);                                      \
  template Var<T> grid_broadcast(Var<T>, std::size_t, std::size_t);                            \
  template Var<T> concat_channels(std::span<const Var<T>>);                                    \
  template Var<T> broadcast_channels(Var<T>, std::size_t);                                     \
  template Var<T> reshape(Var<T>, Shape);                                                      \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                              \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, BatchNormStats<T>&,                       \
                             const BatchNormOptions&);                                         \
  template Var<T> dropout(Var<T>, double, Rng&);
OSSEG_INSTANTIATE(float)
OSSEG_INSTANTIATE(double)
#undef OSSEG_INSTANTIATE

}  // namespace osseg::ad
