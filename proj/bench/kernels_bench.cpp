// Parallel kernels against their serial reference loops, on shapes that
// occur in the extractor, objectness net and comparison head.

#include <benchmark/benchmark.h>

#include "fewshot/kernels.hpp"
#include "fewshot/rng.hpp"

using namespace fewshot;
using kernels::ConvShape;

namespace {

struct ConvCase {
  ConvShape shape;
  int height, width;
};

// extractor conv4 on a 64px image, head ASPP branch (rate 4), objectness decoder.
const ConvCase kCases[] = {
    {{64, 64, 3, 1, 1, 1}, 16, 16},
    {{64, 64, 3, 1, 4, 4}, 16, 16},
    {{96, 32, 3, 1, 1, 1}, 32, 32},
};

Tensor<float> random_input(int c, int h, int w, Rng& rng) {
  Tensor<float> t(c, h, w);
  for (auto& v : t.values()) v = static_cast<float>(uniform(rng, -1, 1));
  return t;
}

template <bool Reference>
void conv_forward(benchmark::State& state) {
  const auto& cs = kCases[state.range(0)];
  Rng rng(1);
  const auto x = random_input(cs.shape.in_channels, cs.height, cs.width, rng);
  std::vector<float> w(cs.shape.weight_count(), 0.01f), b(cs.shape.out_channels, 0.0f);
  Tensor<float> y;
  for (auto _ : state) {
    if constexpr (Reference)
      kernels::reference::conv2d_forward<float>(x, w, b, cs.shape, y);
    else
      kernels::conv2d_forward<float>(x, w, b, cs.shape, y);
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(y.size()));
}

template <bool Reference>
void conv_backward(benchmark::State& state) {
  const auto& cs = kCases[state.range(0)];
  Rng rng(2);
  const auto x = random_input(cs.shape.in_channels, cs.height, cs.width, rng);
  std::vector<float> w(cs.shape.weight_count(), 0.01f), gw(w.size()), gb(cs.shape.out_channels);
  const auto gy = random_input(cs.shape.out_channels, cs.shape.out_extent(cs.height), cs.shape.out_extent(cs.width), rng);
  Tensor<float> gx;
  for (auto _ : state) {
    if constexpr (Reference)
      kernels::reference::conv2d_backward<float>(x, w, gy, cs.shape, &gx, gw, gb);
    else
      kernels::conv2d_backward<float>(x, w, gy, cs.shape, &gx, gw, gb);
    benchmark::DoNotOptimize(gx.data());
  }
}

template <bool Reference>
void bilinear(benchmark::State& state) {
  Rng rng(3);
  const auto x = random_input(1, 16, 16, rng);
  for (auto _ : state) {
    auto y = Reference ? kernels::reference::resize_bilinear(x, 64, 64) : kernels::resize_bilinear(x, 64, 64);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Reference>
void pooling(benchmark::State& state) {
  Rng rng(4);
  const auto x = random_input(64, 16, 16, rng);
  for (auto _ : state) {
    auto y = Reference ? kernels::reference::avg_pool(x, 4, 4) : kernels::avg_pool(x, 4, 4);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(conv_forward<true>)->Name("conv_forward/reference")->DenseRange(0, 2);
BENCHMARK(conv_forward<false>)->Name("conv_forward/parallel")->DenseRange(0, 2);
BENCHMARK(conv_backward<true>)->Name("conv_backward/reference")->DenseRange(0, 2);
BENCHMARK(conv_backward<false>)->Name("conv_backward/parallel")->DenseRange(0, 2);
BENCHMARK(bilinear<true>)->Name("bilinear_16_to_64/reference");
BENCHMARK(bilinear<false>)->Name("bilinear_16_to_64/parallel");
BENCHMARK(pooling<true>)->Name("avg_pool_4x4/reference");
BENCHMARK(pooling<false>)->Name("avg_pool_4x4/parallel");

BENCHMARK_MAIN();
