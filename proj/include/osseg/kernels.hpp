#pragma once

#include <cstddef>
#include <span>

namespace osseg::kernels {

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride = 1, padding = 0;

  std::size_t out_height() const { return (height + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel_w) / stride + 1; }
  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::size_t input_size() const { return batch * in_channels * height * width; }
  std::size_t weight_size() const { return out_channels * patch(); }
  std::size_t output_size() const { return batch * out_channels * out_height() * out_width(); }
};

// Direct nested-loop convolution. Slow, obviously correct; the tests and the
// benchmark compare the parallel kernels against it.
namespace serial {
template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<T> output);
template <class T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output,
                           std::span<const T> weight, std::span<T> grad_input);
template <class T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_output,
                            std::span<const T> input, std::span<T> grad_weight);
}  // namespace serial

// im2col + blocked GEMM, OpenMP over images (forward, input gradient) and
// over output-channel blocks (weight gradient). Every output element is
// accumulated by one thread in a fixed order, so results do not depend on
// the thread count.
namespace parallel {
template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<T> output);
template <class T>
void conv2d_backward_input(const ConvGeometry& g, std::span<const T> grad_output,
                           std::span<const T> weight, std::span<T> grad_input);
template <class T>
void conv2d_backward_weight(const ConvGeometry& g, std::span<const T> grad_output,
                            std::span<const T> input, std::span<T> grad_weight);
}  // namespace parallel

/// Number of OpenMP threads the parallel kernels use (1 when built without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace osseg::kernels
