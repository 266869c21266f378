#include "osseg/data.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace osseg {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string_view to_string(SourceTag tag) {
  switch (tag) {
    case SourceTag::inlier: return "inlier";
    case SourceTag::negative: return "negative";
    case SourceTag::negative_bb: return "negative_bb";
    case SourceTag::pasted: return "pasted";
  }
  return "?";
}

SourceTag parse_source_tag(std::string_view text) {
  for (auto t : {SourceTag::inlier, SourceTag::negative, SourceTag::negative_bb, SourceTag::pasted})
    if (to_string(t) == text) return t;
  throw std::invalid_argument("unknown source '" + std::string(text) +
                              "' (expected inlier|negative|negative_bb|pasted)");
}

std::string_view to_string(Hazard h) {
  switch (h) {
    case Hazard::none: return "none";
    case Hazard::blur: return "blur";
    case Hazard::noise: return "noise";
    case Hazard::overexposure: return "overexposure";
    case Hazard::underexposure: return "underexposure";
  }
  return "?";
}

Hazard parse_hazard(std::string_view text) {
  for (auto h : {Hazard::none, Hazard::blur, Hazard::noise, Hazard::overexposure,
                 Hazard::underexposure})
    if (to_string(h) == text) return h;
  throw std::invalid_argument("unknown hazard '" + std::string(text) + "'");
}

void DatasetSpec::validate() const {
  if (num_classes < 2 || num_classes > 8)
    throw std::invalid_argument("num_classes must be in [2, 8] for synthetic data");
  if (image_size == 0 || image_size % 32 != 0)
    throw std::invalid_argument("image_size must be a positive multiple of 32");
  if (!(paste_fraction > 0.0 && paste_fraction < 1.0))
    throw std::invalid_argument("paste_fraction must be in (0, 1)");
  if (!(noise >= 0.0 && noise <= 128.0)) throw std::invalid_argument("noise must be in [0, 128]");
  if (kind == DatasetKind::directory && path.empty())
    throw std::invalid_argument("directory dataset needs a path");
}

// --- pixels ----------------------------------------------------------------

Tensor normalize(const Tensor& image_u8) {
  const auto& s = image_u8.shape();
  if (s.size() != 3 || s[0] != 3) throw ShapeError("normalize: expected [3,H,W], got " + shape_str(s));
  Tensor out(s);
  const std::size_t plane = s[1] * s[2];
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[c * plane + i] = (image_u8[c * plane + i] / 255.0f - kMean[c]) / kStd[c];
  return out;
}

Tensor denormalize(const Tensor& image) {
  const auto& s = image.shape();
  if (s.size() != 3 || s[0] != 3)
    throw ShapeError("denormalize: expected [3,H,W], got " + shape_str(s));
  Tensor out(s);
  const std::size_t plane = s[1] * s[2];
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[c * plane + i] = (image[c * plane + i] * kStd[c] + kMean[c]) * 255.0f;
  return out;
}

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

std::vector<std::uint8_t> to_rgb8(const Tensor& image) {
  const Tensor raw = denormalize(image);
  const std::size_t h = raw.dim(1), w = raw.dim(2), plane = h * w;
  std::vector<std::uint8_t> rgb(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) rgb[3 * i + c] = to_byte(raw[c * plane + i]);
  return rgb;
}

Tensor from_rgb8(std::span<const std::uint8_t> rgb, std::size_t height, std::size_t width) {
  const std::size_t plane = height * width;
  if (rgb.size() != 3 * plane) throw ShapeError("from_rgb8: buffer size does not match extents");
  Tensor raw(Shape{3, height, width});
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) raw[c * plane + i] = rgb[3 * i + c];
  return normalize(raw);
}

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width) {
  const std::size_t ch = image.dim(0), ih = image.dim(1), iw = image.dim(2);
  Tensor out(Shape{ch, height, width});
  auto coord = [](std::size_t dst, std::size_t in, std::size_t out_n, std::size_t& i0,
                  std::size_t& i1, double& frac) {
    double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) /
                     static_cast<double>(out_n) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(src);
    i1 = std::min(i0 + 1, in - 1);
    frac = src - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < height; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, ih, height, y0, y1, fy);
    for (std::size_t x = 0; x < width; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, iw, width, x0, x1, fx);
      for (std::size_t c = 0; c < ch; ++c) {
        const float* p = &image[c * ih * iw];
        const double top = p[y0 * iw + x0] * (1 - fx) + p[y0 * iw + x1] * fx;
        const double bot = p[y1 * iw + x0] * (1 - fx) + p[y1 * iw + x1] * fx;
        out[(c * height + y) * width + x] = static_cast<float>(top * (1 - fy) + bot * fy);
      }
    }
  }
  return out;
}

// --- geometric transforms --------------------------------------------------

Sample paste_negative(const Sample& inlier, const Sample& negative, double area_fraction,
                      std::size_t num_classes, Rng& rng) {
  if (!(area_fraction > 0.0 && area_fraction < 1.0))
    throw std::invalid_argument("paste_negative: area_fraction must be in (0, 1)");
  const std::size_t H = inlier.height(), W = inlier.width();
  Tensor source = negative.image;
  if (negative.box) {
    const Box& b = *negative.box;
    Tensor c(Shape{3, b.height, b.width});
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < b.height; ++y)
        for (std::size_t x = 0; x < b.width; ++x)
          c[(ch * b.height + y) * b.width + x] =
              negative.image[(ch * negative.height() + b.top + y) * negative.width() + b.left + x];
    source = std::move(c);
  }
  const double sh = static_cast<double>(source.dim(1)), sw = static_cast<double>(source.dim(2));
  const double area = std::round(area_fraction * static_cast<double>(H * W));
  const double s = std::sqrt(area / (sh * sw));
  const std::size_t ph = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(sh * s)), 1, H);
  const std::size_t pw = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(sw * s)), 1, W);
  const Tensor patch = resize_bilinear(source, ph, pw);
  const auto top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(H - ph)));
  const auto left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(W - pw)));

  Sample out = inlier;
  out.tag = SourceTag::pasted;
  out.box = Box{top, left, ph, pw};
  for (std::size_t y = 0; y < ph; ++y)
    for (std::size_t x = 0; x < pw; ++x) {
      for (std::size_t ch = 0; ch < 3; ++ch)
        out.image[(ch * H + top + y) * W + left + x] = patch[(ch * ph + y) * pw + x];
      out.labels.y_at(top + y, left + x) = static_cast<std::uint8_t>(num_classes);
      out.labels.z_at(top + y, left + x) = kOutlier;
    }
  return out;
}

Sample crop_sample(const Sample& s, std::size_t top, std::size_t left, std::size_t size) {
  const std::size_t H = s.height(), W = s.width();
  if (size == 0) size = std::min(H, W);
  if (top + size > H || left + size > W)
    throw std::invalid_argument("crop of " + std::to_string(size) + " at (" + std::to_string(top) +
                                "," + std::to_string(left) + ") exceeds " + std::to_string(H) +
                                "x" + std::to_string(W));
  Sample out;
  out.tag = s.tag;
  out.image = Tensor(Shape{3, size, size});
  out.labels = LabelPair(size, size, 0, 0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      for (std::size_t c = 0; c < 3; ++c)
        out.image[(c * size + y) * size + x] = s.image[(c * H + top + y) * W + left + x];
      out.labels.y_at(y, x) = s.labels.y_at(top + y, left + x);
      out.labels.z_at(y, x) = s.labels.z_at(top + y, left + x);
    }
  if (s.box) {
    const Box& b = *s.box;
    const std::size_t y0 = std::max(b.top, top), x0 = std::max(b.left, left);
    const std::size_t y1 = std::min(b.top + b.height, top + size);
    const std::size_t x1 = std::min(b.left + b.width, left + size);
    if (y0 < y1 && x0 < x1) out.box = Box{y0 - top, x0 - left, y1 - y0, x1 - x0};
  }
  return out;
}

Sample flip_horizontal(const Sample& s) {
  const std::size_t H = s.height(), W = s.width();
  Sample out = s;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t c = 0; c < 3; ++c)
        out.image[(c * H + y) * W + x] = s.image[(c * H + y) * W + (W - 1 - x)];
      out.labels.y_at(y, x) = s.labels.y_at(y, W - 1 - x);
      out.labels.z_at(y, x) = s.labels.z_at(y, W - 1 - x);
    }
  if (s.box) out.box->left = W - s.box->left - s.box->width;
  return out;
}

Sample augment(const Sample& s, std::size_t crop, Rng& rng) {
  if (crop == 0 || crop > std::min(s.height(), s.width()))
    throw std::invalid_argument("augment: crop " + std::to_string(crop) + " does not fit " +
                                std::to_string(s.height()) + "x" + std::to_string(s.width()));
  const auto top = static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(s.height() - crop)));
  const auto left = static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(s.width() - crop)));
  Sample out = crop_sample(s, top, left, crop);
  if (rng.bernoulli(0.5)) out = flip_horizontal(out);
  return out;
}

// --- synthetic scenes --------------------------------------------------------

namespace {

using Rgb = std::array<double, 3>;

// Inlier palette by class: sky, road, vegetation, then object classes.
constexpr Rgb kClassColor[8] = {{110, 150, 215}, {105, 105, 110}, {55, 135, 50},
                                {190, 50, 40},   {225, 200, 70},  {235, 235, 235},
                                {35, 35, 45},    {140, 95, 55}};
// Negatives never use these.
constexpr Rgb kNegativeColor[6] = {{230, 30, 200}, {30, 225, 225}, {255, 140, 0},
                                   {125, 30, 185}, {255, 150, 205}, {170, 255, 40}};

class Canvas {
 public:
  Canvas(std::size_t h, std::size_t w) : h_(h), w_(w), px_(3 * h * w, 0.0) {}
  void set(std::size_t y, std::size_t x, const Rgb& c) {
    for (std::size_t k = 0; k < 3; ++k) px_[(k * h_ + y) * w_ + x] = c[k];
  }
  double& at(std::size_t k, std::size_t y, std::size_t x) { return px_[(k * h_ + y) * w_ + x]; }

  void add_noise(double amplitude, Rng& rng) {
    if (amplitude <= 0) return;
    for (auto& v : px_) v += (2.0 * rng.uniform() - 1.0) * amplitude;
  }

  /// Rounded to integers so that the 8-bit file formats store the sample exactly.
  Tensor finish() const {
    Tensor raw(Shape{3, h_, w_});
    for (std::size_t i = 0; i < px_.size(); ++i) raw[i] = static_cast<float>(to_byte(px_[i]));
    return normalize(raw);
  }

 private:
  std::size_t h_, w_;
  std::vector<double> px_;
};

Rgb shade(const Rgb& c, double f, double offset = 0.0) {
  return {c[0] * f + offset, c[1] * f + offset, c[2] * f + offset};
}

Sample inlier_scene(std::size_t S, std::size_t num_classes, double noise, Rng& rng) {
  Canvas cv(S, S);
  Sample out;
  out.tag = SourceTag::inlier;
  out.labels = LabelPair(S, S, 0, kInlier);
  auto& lab = out.labels;

  const auto horizon = static_cast<std::size_t>(
      rng.uniform_int(static_cast<std::int64_t>(S * 3 / 10), static_cast<std::int64_t>(S * 11 / 20)));
  const double sky_tint = rng.uniform() * 0.2 + 0.9;
  const double road_tint = rng.uniform() * 0.3 + 0.8;
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = 0; x < S; ++x) {
      if (y < horizon) {
        cv.set(y, x, shade(kClassColor[0], sky_tint, 35.0 * y / horizon));
        lab.y_at(y, x) = 0;
      } else {
        const double depth = static_cast<double>(y - horizon) / static_cast<double>(S - horizon);
        cv.set(y, x, shade(kClassColor[1], road_tint * (0.85 + 0.3 * depth)));
        lab.y_at(y, x) = 1;
      }
    }

  if (num_classes >= 3) {
    const auto bands = rng.uniform_int(1, 2);
    for (std::int64_t b = 0; b < bands; ++b) {
      const std::size_t above = static_cast<std::size_t>(rng.uniform_int(3, static_cast<std::int64_t>(S / 6)));
      const std::size_t below = static_cast<std::size_t>(rng.uniform_int(2, static_cast<std::int64_t>(S / 8)));
      const std::size_t len = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(S * 3 / 10), static_cast<std::int64_t>(S * 7 / 10)));
      const std::size_t x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(S - len)));
      const double fx = 0.4 + rng.uniform() * 0.6, fy = 0.5 + rng.uniform() * 0.8;
      const std::size_t y0 = horizon > above ? horizon - above : 0;
      const std::size_t y1 = std::min(S, horizon + below);
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x0 + len; ++x) {
          const double tex = 0.8 + 0.25 * std::sin(fx * x) * std::sin(fy * y);
          cv.set(y, x, shade(kClassColor[2], tex));
          lab.y_at(y, x) = 2;
        }
    }
  }

  if (num_classes >= 4) {
    const auto blobs = rng.uniform_int(1, 3);
    for (std::int64_t b = 0; b < blobs; ++b) {
      const auto cls = static_cast<std::size_t>(rng.uniform_int(3, static_cast<std::int64_t>(num_classes - 1)));
      const auto bh = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(S / 10), static_cast<std::int64_t>(S / 4)));
      const auto bw = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(S / 10), static_cast<std::int64_t>(S / 4)));
      // objects stand on the road, their base below the horizon
      const auto base = static_cast<std::size_t>(
          rng.uniform_int(static_cast<std::int64_t>(std::min(S - 1, horizon + 2)), static_cast<std::int64_t>(S - 1)));
      const std::size_t top = base + 1 >= bh ? base + 1 - bh : 0;
      const auto left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(S - bw)));
      const double tint = 0.85 + rng.uniform() * 0.3;
      for (std::size_t y = top; y <= base; ++y)
        for (std::size_t x = left; x < left + bw; ++x) {
          cv.set(y, x, shade(kClassColor[cls], tint));
          lab.y_at(y, x) = static_cast<std::uint8_t>(cls);
        }
    }
  }
  cv.add_noise(noise, rng);
  out.image = cv.finish();
  return out;
}

void paint_negative(Canvas& cv, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w,
                    Rng& rng) {
  std::array<std::size_t, 6> idx{0, 1, 2, 3, 4, 5};
  for (std::size_t i = 5; i > 0; --i)
    std::swap(idx[i], idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
  const std::size_t ncolors = static_cast<std::size_t>(rng.uniform_int(2, 3));
  const auto pattern = rng.uniform_int(0, 2);
  const auto cell = static_cast<std::size_t>(rng.uniform_int(3, 10));
  const auto period = static_cast<std::size_t>(rng.uniform_int(4, 12));
  const auto dir = rng.uniform_int(0, 2);
  const auto block = static_cast<std::size_t>(rng.uniform_int(1, 4));
  std::vector<std::size_t> blocks((h / block + 1) * (w / block + 1));
  for (auto& b : blocks) b = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(ncolors - 1)));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      std::size_t k = 0;
      if (pattern == 0) {
        k = (y / cell + x / cell) % 2;
      } else if (pattern == 1) {
        const std::size_t t = dir == 0 ? y : dir == 1 ? x : x + y;
        k = (t / period) % ncolors;
      } else {
        k = blocks[(y / block) * (w / block + 1) + x / block];
      }
      cv.set(y0 + y, x0 + x, kNegativeColor[idx[k]]);
    }
}

Sample negative_scene(std::size_t S, std::size_t num_classes, double noise, bool bb, Rng& rng) {
  Canvas cv(S, S);
  Sample out;
  out.tag = bb ? SourceTag::negative_bb : SourceTag::negative;
  out.labels = LabelPair(S, S, static_cast<std::uint8_t>(num_classes), kOutlier);
  paint_negative(cv, 0, 0, S, S, rng);
  if (bb) {
    const auto h = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(S / 3), static_cast<std::int64_t>(S * 3 / 4)));
    const auto w = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(S / 3), static_cast<std::int64_t>(S * 3 / 4)));
    const auto top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(S - h)));
    const auto left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(S - w)));
    paint_negative(cv, top, left, h, w, rng);
    out.box = Box{top, left, h, w};
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const bool inside = y >= top && y < top + h && x >= left && x < left + w;
        if (!inside) {
          out.labels.y_at(y, x) = kFileIgnore;
          out.labels.z_at(y, x) = kIgnore;
        }
      }
  }
  cv.add_noise(noise, rng);
  out.image = cv.finish();
  return out;
}

Tensor hazard_pixels(const Tensor& image, Hazard hazard, Rng& rng) {
  Tensor raw = denormalize(image);
  for (auto& v : raw.data()) v = std::round(v);
  const std::size_t H = raw.dim(1), W = raw.dim(2);
  switch (hazard) {
    case Hazard::none: break;
    case Hazard::blur: {
      constexpr double k[5] = {1 / 16.0, 4 / 16.0, 6 / 16.0, 4 / 16.0, 1 / 16.0};
      Tensor tmp = raw;
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t pass = 0; pass < 2; ++pass) {
          const Tensor src = tmp;
          for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
              double acc = 0;
              for (int d = -2; d <= 2; ++d) {
                const long yy = pass ? std::clamp<long>(static_cast<long>(y) + d, 0, H - 1) : y;
                const long xx = pass ? x : std::clamp<long>(static_cast<long>(x) + d, 0, W - 1);
                acc += k[d + 2] * src[(c * H + yy) * W + xx];
              }
              tmp[(c * H + y) * W + x] = static_cast<float>(acc);
            }
        }
      raw = tmp;
      break;
    }
    case Hazard::noise:
      for (auto& v : raw.data()) v += static_cast<float>(rng.normal(0.0, 25.0));
      break;
    case Hazard::overexposure:
      for (auto& v : raw.data()) v = v * 1.6f + 40.0f;
      break;
    case Hazard::underexposure:
      for (auto& v : raw.data()) v *= 0.35f;
      break;
  }
  for (auto& v : raw.data()) v = static_cast<float>(to_byte(v));
  return normalize(raw);
}

}  // namespace

Sample apply_hazard(const Sample& s, Hazard hazard, Rng& rng) {
  Sample out = s;
  out.image = hazard_pixels(s.image, hazard, rng);
  return out;
}

Sample generate_synthetic(const DatasetSpec& spec, std::size_t index) {
  spec.validate();
  if (spec.kind != DatasetKind::synthetic)
    throw std::invalid_argument("generate_synthetic: spec is not synthetic");
  const Rng root(spec.seed);
  const std::size_t S = spec.image_size, N = spec.num_classes;
  auto inlier_at = [&](std::size_t i) {
    Rng r = root.derive("inlier").derive(i);
    return inlier_scene(S, N, spec.noise, r);
  };
  Sample out;
  switch (spec.source) {
    case SourceTag::inlier: out = inlier_at(index); break;
    case SourceTag::negative:
    case SourceTag::negative_bb: {
      const bool bb = spec.source == SourceTag::negative_bb;
      Rng r = root.derive(bb ? "negative_bb" : "negative").derive(index);
      out = negative_scene(S, N, spec.noise, bb, r);
      break;
    }
    case SourceTag::pasted: {
      Rng r = root.derive("negative").derive(index);
      const Sample neg = negative_scene(S, N, spec.noise, false, r);
      Rng p = root.derive("paste").derive(index);
      out = paste_negative(inlier_at(index), neg, spec.paste_fraction, N, p);
      break;
    }
  }
  if (spec.hazard != Hazard::none) {
    Rng h = root.derive("hazard").derive(index);
    out = apply_hazard(out, spec.hazard, h);
  }
  return out;
}

// --- streams and batches ---------------------------------------------------

SampleStream::SampleStream(Fetch fetch, std::size_t size, const Rng& rng, bool shuffle)
    : fetch_(std::move(fetch)), size_(size), rng_(rng), shuffle_(shuffle) {
  if (size_ == 0) throw std::invalid_argument("sample stream is empty");
  reshuffle();
}

void SampleStream::reshuffle() {
  order_.resize(size_);
  for (std::size_t i = 0; i < size_; ++i) order_[i] = i;
  if (!shuffle_) return;
  Rng r = rng_.derive(pass_);
  for (std::size_t i = size_ - 1; i > 0; --i)
    std::swap(order_[i], order_[static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(i)))]);
}

Sample SampleStream::next() {
  if (cursor_ == size_) {
    cursor_ = 0;
    ++pass_;
    reshuffle();
  }
  ++consumed_;
  return fetch_(order_[cursor_++]);
}

std::vector<Sample> form_batch(SampleStream& inliers, SampleStream& negatives,
                               std::size_t batch_size, bool paste, std::size_t num_classes,
                               double paste_fraction, Rng& rng) {
  if (batch_size < 2) throw std::invalid_argument("form_batch: batch_size must be at least 2");
  std::vector<Sample> batch;
  batch.reserve(batch_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    if (rng.bernoulli(0.5)) {
      batch.push_back(inliers.next());
    } else if (paste) {
      Sample base = inliers.next();
      batch.push_back(paste_negative(base, negatives.next(), paste_fraction, num_classes, rng));
    } else {
      batch.push_back(negatives.next());
    }
  }
  return batch;
}

// --- files -----------------------------------------------------------------

PngImage read_png(const std::string& path, std::size_t channels) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw DataError(path + ": " + img.message);
  if (channels == 1 && (img.format & PNG_FORMAT_FLAG_COLOR)) {
    png_image_free(&img);
    throw DataError(path + ": expected a single-channel image");
  }
  img.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  PngImage out;
  out.height = img.height;
  out.width = img.width;
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr))
    throw DataError(path + ": " + img.message);
  return out;
}

void write_png(const std::string& path, const PngImage& image) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (image.pixels.size() != image.height * image.width * image.channels)
    throw std::invalid_argument("write_png: pixel buffer does not match extents");
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw DataError(path + ": " + img.message);
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path + ": cannot open manifest");
  Manifest m;
  try {
    const json j = json::parse(in);
    m.num_classes = j.at("num_classes").get<std::size_t>();
    m.image_size = j.value("image_size", std::size_t{0});
    for (const auto& p : j.at("pairs"))
      m.pairs.push_back({p.at("image").get<std::string>(), p.at("label").get<std::string>(),
                         p.value("tag", std::string("inlier"))});
  } catch (const json::exception& e) {
    throw DataError(path + ": malformed manifest: " + e.what());
  }
  if (m.num_classes == 0 || m.num_classes >= kFileOutlier)
    throw DataError(path + ": num_classes out of range");
  return m;
}

void write_manifest(const std::string& path, const Manifest& manifest) {
  json j;
  j["num_classes"] = manifest.num_classes;
  j["image_size"] = manifest.image_size;
  j["pairs"] = json::array();
  for (const auto& p : manifest.pairs)
    j["pairs"].push_back({{"image", p.image}, {"label", p.label}, {"tag", p.tag}});
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(path + ": cannot write manifest");
  out << j.dump(2) << '\n';
  if (!out) throw DataError(path + ": write failed");
}

ManifestEntry write_sample(const std::string& dir, const std::string& stem, const Sample& s,
                           std::size_t num_classes, std::string tag) {
  ManifestEntry e{stem + ".png", stem + "_label.png", std::move(tag)};
  write_png((fs::path(dir) / e.image).string(), {s.height(), s.width(), 3, to_rgb8(s.image)});
  PngImage label{s.height(), s.width(), 1, std::vector<std::uint8_t>(s.labels.size())};
  for (std::size_t i = 0; i < s.labels.size(); ++i)
    label.pixels[i] = encode_label(s.labels.y[i], s.labels.z[i], num_classes);
  write_png((fs::path(dir) / e.label).string(), label);
  return e;
}

DirectoryDataset::DirectoryDataset(const DatasetSpec& spec) : root_(spec.path) {
  const Manifest m = read_manifest((fs::path(root_) / "manifest.json").string());
  num_classes_ = m.num_classes;
  for (std::size_t i = 0; i < m.pairs.size(); ++i) {
    const auto& p = m.pairs[i];
    try {
      const auto img = read_png((fs::path(root_) / p.image).string(), 3);
      const auto lab = read_png((fs::path(root_) / p.label).string(), 1);
      if (img.height != lab.height || img.width != lab.width)
        throw DataError("image is " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                        " but labels are " + std::to_string(lab.height) + "x" +
                        std::to_string(lab.width));
      entries_.push_back(p);
    } catch (const DataError& e) {
      diagnostics_.push_back("skipping pair " + std::to_string(i) + " (" + p.image + ", " +
                             p.label + "): " + e.what());
    }
  }
}

std::vector<std::size_t> DirectoryDataset::with_tag(std::string_view tag) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].tag == tag) out.push_back(i);
  return out;
}

Sample DirectoryDataset::load(std::size_t i) const {
  const auto& e = entries_.at(i);
  const auto img = read_png((fs::path(root_) / e.image).string(), 3);
  const auto lab = read_png((fs::path(root_) / e.label).string(), 1);
  Sample s;
  s.image = from_rgb8(img.pixels, img.height, img.width);
  s.labels = LabelPair(lab.height, lab.width, 0, 0);
  for (std::size_t k = 0; k < lab.pixels.size(); ++k)
    decode_label(lab.pixels[k], num_classes_, s.labels.y[k], s.labels.z[k]);
  s.tag = SourceTag::inlier;
  if (e.tag == "negative" || e.tag == "negative_bb" || e.tag == "pasted")
    s.tag = parse_source_tag(e.tag);
  if (s.tag == SourceTag::negative_bb || s.tag == SourceTag::pasted) {
    // the annotated box is the extent of the outlier pixels
    std::size_t y0 = lab.height, x0 = lab.width, y1 = 0, x1 = 0;
    for (std::size_t y = 0; y < lab.height; ++y)
      for (std::size_t x = 0; x < lab.width; ++x)
        if (s.labels.z_at(y, x) == kOutlier) {
          y0 = std::min(y0, y);
          x0 = std::min(x0, x);
          y1 = std::max(y1, y + 1);
          x1 = std::max(x1, x + 1);
        }
    if (y0 < y1) s.box = Box{y0, x0, y1 - y0, x1 - x0};
  }
  return s;
}

void write_dataset(const DatasetSpec& spec, const std::string& out_dir, std::size_t count,
                   bool eval_bundle, std::size_t negative_factor) {
  spec.validate();
  if (negative_factor == 0) throw std::invalid_argument("negative_factor must be positive");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw DataError(out_dir + ": cannot create output directory");

  struct Part {
    std::string tag;
    DatasetSpec spec;
    std::size_t count;
  };
  std::vector<Part> parts;
  auto variant = [&](SourceTag src, Hazard h) {
    DatasetSpec s = spec;
    s.source = src;
    s.hazard = h;
    return s;
  };
  if (eval_bundle) {
    parts.push_back({"inlier", variant(SourceTag::inlier, Hazard::none), count});
    parts.push_back({"negative", variant(SourceTag::negative, Hazard::none), count * negative_factor});
    parts.push_back({"pasted", variant(SourceTag::pasted, Hazard::none), count});
    for (auto h : kHazards)
      parts.push_back({"hazard_" + std::string(to_string(h)), variant(SourceTag::inlier, h), count});
  } else {
    std::string tag(to_string(spec.source));
    if (spec.hazard != Hazard::none) tag = "hazard_" + std::string(to_string(spec.hazard));
    parts.push_back({tag, spec, count});
  }

  Manifest m;
  m.num_classes = spec.num_classes;
  m.image_size = spec.image_size;
  for (const auto& part : parts)
    for (std::size_t i = 0; i < part.count; ++i) {
      char stem[96];
      std::snprintf(stem, sizeof stem, "%s_%05zu", part.tag.c_str(), i);
      m.pairs.push_back(write_sample(out_dir, stem, generate_synthetic(part.spec, i),
                                     spec.num_classes, part.tag));
    }
  write_manifest((fs::path(out_dir) / "manifest.json").string(), m);
}

}  // namespace osseg
