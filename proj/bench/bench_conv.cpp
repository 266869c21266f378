// Serial reference vs parallel im2col kernels on the layer shapes the
// default model actually runs at 64x64 input, batch 8.

#include <benchmark/benchmark.h>

#include <vector>

#include "osseg/kernels.hpp"
#include "osseg/rng.hpp"

using namespace osseg::kernels;

namespace {

ConvGeometry geometry(const benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  return ConvGeometry{8, c, hw, hw, c, 3, 3, 1, 1};
}

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  osseg::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal(0, 1));
  return v;
}

template <auto Kernel>
void forward(benchmark::State& state) {
  const auto g = geometry(state);
  const auto in = noise(g.input_size(), 1), w = noise(g.weight_size(), 2);
  std::vector<float> out(g.output_size());
  for (auto _ : state) {
    Kernel(g, std::span<const float>(in), std::span<const float>(w), std::span<float>(out));
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.output_size() * g.patch()));
}

template <auto Kernel>
void backward_weight(benchmark::State& state) {
  const auto g = geometry(state);
  const auto gy = noise(g.output_size(), 3), in = noise(g.input_size(), 4);
  std::vector<float> gw(g.weight_size());
  for (auto _ : state) {
    Kernel(g, std::span<const float>(gy), std::span<const float>(in), std::span<float>(gw));
    benchmark::DoNotOptimize(gw.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.output_size() * g.patch()));
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({32, 16})->Args({64, 8})->Args({128, 4})->Unit(benchmark::kMillisecond);
}

}  // namespace

BENCHMARK(forward<serial::conv2d_forward<float>>)->Name("conv_forward/serial")->Apply(shapes);
BENCHMARK(forward<parallel::conv2d_forward<float>>)->Name("conv_forward/parallel")->Apply(shapes);
BENCHMARK(backward_weight<serial::conv2d_backward_weight<float>>)->Name("conv_backward_weight/serial")->Apply(shapes);
BENCHMARK(backward_weight<parallel::conv2d_backward_weight<float>>)->Name("conv_backward_weight/parallel")->Apply(shapes);

BENCHMARK_MAIN();
