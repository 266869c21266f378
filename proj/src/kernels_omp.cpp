#include <algorithm>
#include <vector>

#include "osseg/kernels.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace osseg::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, n));
#else
  (void)n;
#endif
}

namespace {

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
}

template <class T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const long h = static_cast<long>(g.height), w = static_cast<long>(g.width);
  const long pad = static_cast<long>(g.padding);
  for (std::size_t ci = 0; ci < g.in_channels; ++ci)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        T* row = col + ((ci * g.kernel_h + ky) * g.kernel_w + kx) * oh * ow;
        const T* plane = image + ci * g.height * g.width;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ky) - pad;
          T* out = row + y * ow;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + ow, T(0));
            continue;
          }
          const T* src = plane + iy * w;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kx) - pad;
            out[x] = (ix < 0 || ix >= w) ? T(0) : src[ix];
          }
        }
      }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t oh = g.out_height(), ow = g.out_width();
  const long h = static_cast<long>(g.height), w = static_cast<long>(g.width);
  const long pad = static_cast<long>(g.padding);
  for (std::size_t ci = 0; ci < g.in_channels; ++ci)
    for (std::size_t ky = 0; ky < g.kernel_h; ++ky)
      for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
        const T* row = col + ((ci * g.kernel_h + ky) * g.kernel_w + kx) * oh * ow;
        T* plane = image + ci * g.height * g.width;
        for (std::size_t y = 0; y < oh; ++y) {
          const long iy = static_cast<long>(y * g.stride + ky) - pad;
          if (iy < 0 || iy >= h) continue;
          T* dst = plane + iy * w;
          const T* src = row + y * ow;
          for (std::size_t x = 0; x < ow; ++x) {
            const long ix = static_cast<long>(x * g.stride + kx) - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[x];
          }
        }
      }
}

// C[m x p] = A[m x k] * B[k x p], all row-major. Each C element is summed over
// k in ascending order regardless of blocking.
template <class T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t p, const T* a, const T* b, T* c) {
  constexpr std::size_t kCols = 1024 / sizeof(T);
  alignas(64) T acc[4][kCols];
  for (std::size_t j0 = 0; j0 < p; j0 += kCols) {
    const std::size_t jn = std::min(kCols, p - j0);
    std::size_t i0 = 0;
    for (; i0 + 4 <= m; i0 += 4) {
      std::fill(&acc[0][0], &acc[0][0] + 4 * kCols, T(0));
      const T* a0 = a + i0 * k;
      const T* a1 = a0 + k;
      const T* a2 = a1 + k;
      const T* a3 = a2 + k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T* brow = b + kk * p + j0;
        const T v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
        for (std::size_t j = 0; j < jn; ++j) {
          const T bv = brow[j];
          acc[0][j] += v0 * bv;
          acc[1][j] += v1 * bv;
          acc[2][j] += v2 * bv;
          acc[3][j] += v3 * bv;
        }
      }
      for (std::size_t r = 0; r < 4; ++r) std::copy(acc[r], acc[r] + jn, c + (i0 + r) * p + j0);
    }
    for (; i0 < m; ++i0) {
      std::fill(acc[0], acc[0] + jn, T(0));
      const T* arow = a + i0 * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T* brow = b + kk * p + j0;
        const T v = arow[kk];
        for (std::size_t j = 0; j < jn; ++j) acc[0][j] += v * brow[j];
      }
      std::copy(acc[0], acc[0] + jn, c + i0 * p + j0);
    }
  }
}

// Dot product with eight independent lanes, reduced in a fixed order.
template <class T>
T dot_lanes(const T* x, const T* y, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += x[i + l] * y[i + l];
  T tail = 0;
  for (; i < n; ++i) tail += x[i] * y[i];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) +
         ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])) + tail;
}

}  // namespace

namespace parallel {

template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<T> output) {
  const std::size_t plane = g.out_height() * g.out_width();
  const std::size_t kdim = g.patch();
  const long batch = static_cast<long>(g.batch);
  const bool pointwise = is_pointwise(g);
#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : kdim * plane);
#pragma omp for schedule(static)
    for (long n = 0; n < batch; ++n) {
      const T* image = input.data() + n * g.in_channels * g.height * g.width;
      const T* b = image;
      if (!pointwise) {
        im2col(g, image, col.data());
        b = col.data();
      }
      gemm_nn(g.out_channels, kdim, plane, weight.data(), b,
              output.data() + n * g.out_channels * plane);
    }
  }
}

template <class T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output,
                           std::span<const T> weight, std::span<T> grad_input) {
  const std::size_t plane = g.out_height() * g.out_width();
  const std::size_t kdim = g.patch();
  const long batch = static_cast<long>(g.batch);
  const bool pointwise = is_pointwise(g);
  std::vector<T> wt(kdim * g.out_channels);
  for (std::size_t co = 0; co < g.out_channels; ++co)
    for (std::size_t kk = 0; kk < kdim; ++kk) wt[kk * g.out_channels + co] = weight[co * kdim + kk];
  std::fill(grad_input.begin(), grad_input.end(), T(0));
#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : kdim * plane);
#pragma omp for schedule(static)
    for (long n = 0; n < batch; ++n) {
      T* image = grad_input.data() + n * g.in_channels * g.height * g.width;
      const T* go = grad_output.data() + n * g.out_channels * plane;
      if (pointwise) {
        gemm_nn(kdim, g.out_channels, plane, wt.data(), go, image);
      } else {
        gemm_nn(kdim, g.out_channels, plane, wt.data(), go, col.data());
        col2im_add(g, col.data(), image);
      }
    }
  }
}

template <class T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_output,
                            std::span<const T> input, std::span<T> grad_weight) {
  const std::size_t plane = g.out_height() * g.out_width();
  const std::size_t kdim = g.patch();
  const long batch = static_cast<long>(g.batch);
  const bool pointwise = is_pointwise(g);
  std::vector<T> cols;
  if (!pointwise) {
    cols.resize(g.batch * kdim * plane);
#pragma omp parallel for schedule(static)
    for (long n = 0; n < batch; ++n)
      im2col(g, input.data() + n * g.in_channels * g.height * g.width,
             cols.data() + n * kdim * plane);
  }
  const T* col_base = pointwise ? input.data() : cols.data();
  const long out_channels = static_cast<long>(g.out_channels);
#pragma omp parallel for schedule(static)
  for (long co = 0; co < out_channels; ++co) {
    T* dw = grad_weight.data() + co * kdim;
    std::fill(dw, dw + kdim, T(0));
    for (long n = 0; n < batch; ++n) {
      const T* go = grad_output.data() + (n * g.out_channels + co) * plane;
      const T* col = col_base + n * kdim * plane;
      for (std::size_t kk = 0; kk < kdim; ++kk) dw[kk] += dot_lanes(go, col + kk * plane, plane);
    }
  }
}

#define OSSEG_INSTANTIATE(T)                                                                   \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>, \
                                  std::span<T>);                                               \
  template void conv2d_backward_input<T>(const ConvGeometry&, std::span<const T>,              \
                                         std::span<const T>, std::span<T>);                    \
  template void conv2d_backward_weight<T>(const ConvGeometry&, std::span<const T>,             \
                                          std::span<const T>, std::span<T>);
OSSEG_INSTANTIATE(float)
OSSEG_INSTANTIATE(double)
#undef OSSEG_INSTANTIATE

}  // namespace parallel
}  // namespace osseg::kernels
