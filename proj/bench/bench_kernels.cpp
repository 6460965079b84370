// Reference (serial) vs parallel kernels at the reference model's shapes.
// Thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "shapprune/kernels.hpp"

namespace k = shapprune::kernels;

namespace {

std::vector<float> noise(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Second conv of the reference model on a training batch: 16 -> 32 channels at 8x8.
k::ConvGeometry conv_geometry() { return {32, 16, 8, 8, 32, 3, 1, 1}; }

struct ConvData {
  k::ConvGeometry g = conv_geometry();
  std::vector<float> x = noise(g.batch * g.in_channels * g.in_height * g.in_width, 1);
  std::vector<float> w = noise(g.out_channels * g.in_channels * g.kernel * g.kernel, 2);
  std::vector<float> b = noise(g.out_channels, 3);
  std::vector<float> y = std::vector<float>(g.batch * g.out_channels * g.out_height() * g.out_width());
  std::vector<float> gy = noise(y.size(), 4);
  std::vector<float> gx = std::vector<float>(x.size());
  std::vector<float> gw = std::vector<float>(w.size());
  std::vector<float> gb = std::vector<float>(b.size());
};

template <bool Parallel>
void BM_conv_forward(benchmark::State& state) {
  ConvData d;
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::conv2d_forward(d.g, d.x, d.w, d.b, d.y);
    else k::reference::conv2d_forward(d.g, d.x, d.w, d.b, d.y);
    benchmark::DoNotOptimize(d.y.data());
  }
}

template <bool Parallel>
void BM_conv_backward(benchmark::State& state) {
  ConvData d;
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::conv2d_backward_input(d.g, d.w, d.gy, d.gx);
      k::parallel::conv2d_backward_weight(d.g, d.x, d.gy, d.gw, d.gb);
    } else {
      k::reference::conv2d_backward_input(d.g, d.w, d.gy, d.gx);
      k::reference::conv2d_backward_weight(d.g, d.x, d.gy, d.gw, d.gb);
    }
    benchmark::DoNotOptimize(d.gx.data());
    benchmark::DoNotOptimize(d.gw.data());
  }
}

// Flattened features into the hidden dense layer: 512 -> 64.
template <bool Parallel>
void BM_dense(benchmark::State& state) {
  const std::size_t batch = 32, in = 512, out = 64;
  const auto x = noise(batch * in, 5), w = noise(out * in, 6), b = noise(out, 7), gy = noise(batch * out, 8);
  std::vector<float> y(batch * out), gx(x.size()), gw(w.size()), gb(out);
  for (auto _ : state) {
    if constexpr (Parallel) {
      k::parallel::dense_forward(x, w, b, batch, in, out, y);
      k::parallel::dense_backward(x, w, gy, batch, in, out, gx, gw, gb);
    } else {
      k::reference::dense_forward(x, w, b, batch, in, out, y);
      k::reference::dense_backward(x, w, gy, batch, in, out, gx, gw, gb);
    }
    benchmark::DoNotOptimize(gw.data());
  }
}

template <bool Parallel>
void BM_maxpool(benchmark::State& state) {
  const k::PoolGeometry g{32 * 16, 16, 16, 2};
  const auto x = noise(g.planes * g.in_height * g.in_width, 9);
  std::vector<float> y(g.planes * g.out_height() * g.out_width());
  std::vector<std::uint32_t> arg(y.size());
  for (auto _ : state) {
    if constexpr (Parallel) k::parallel::maxpool_forward(g, x, y, arg);
    else k::reference::maxpool_forward(g, x, y, arg);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_conv_forward<false>)->Name("conv_forward/reference");
BENCHMARK(BM_conv_forward<true>)->Name("conv_forward/parallel");
BENCHMARK(BM_conv_backward<false>)->Name("conv_backward/reference");
BENCHMARK(BM_conv_backward<true>)->Name("conv_backward/parallel");
BENCHMARK(BM_dense<false>)->Name("dense/reference");
BENCHMARK(BM_dense<true>)->Name("dense/parallel");
BENCHMARK(BM_maxpool<false>)->Name("maxpool/reference");
BENCHMARK(BM_maxpool<true>)->Name("maxpool/parallel");

BENCHMARK_MAIN();
