#pragma once

// Compute kernels behind the layer implementations.
//
// Two interchangeable implementations share one signature set:
//   kernels::reference  plain nested loops, single threaded; the test oracle
//   kernels::parallel   OpenMP over independent output slices, cache-friendly
//                       loop order; what the engine calls
//
// Every parallel kernel assigns each output element to exactly one thread and
// accumulates in a fixed order, so results do not depend on the thread count.
// All tensors are NCHW / row-major.

#include <cstddef>
#include <cstdint>
#include <span>

namespace shapprune::kernels {

struct ConvGeometry {
  std::size_t batch = 0;
  std::size_t in_channels = 0;
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;

  std::size_t out_height() const { return (in_height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (in_width + 2 * padding - kernel) / stride + 1; }
};

struct PoolGeometry {
  std::size_t planes = 0;  // batch * channels
  std::size_t in_height = 0;
  std::size_t in_width = 0;
  std::size_t window = 2;  // stride == window

  std::size_t out_height() const { return in_height / window; }
  std::size_t out_width() const { return in_width / window; }
};

#define SHAPPRUNE_KERNEL_SET                                                                           \
  /* y[n,o] = b[o] + sum_i x[n,i] w[o,i] */                                                            \
  void dense_forward(std::span<const float> x, std::span<const float> w, std::span<const float> b,     \
                     std::size_t batch, std::size_t in, std::size_t out, std::span<float> y);           \
  /* gx = gy w (skipped when gx empty); gw = gy^T x; gb = colsum(gy) (overwritten) */                  \
  void dense_backward(std::span<const float> x, std::span<const float> w, std::span<const float> gy,   \
                      std::size_t batch, std::size_t in, std::size_t out, std::span<float> gx,          \
                      std::span<float> gw, std::span<float> gb);                                        \
  void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> w,        \
                      std::span<const float> b, std::span<float> y);                                    \
  /* gx overwritten */                                                                                  \
  void conv2d_backward_input(const ConvGeometry& g, std::span<const float> w, std::span<const float> gy, \
                             std::span<float> gx);                                                      \
  /* gw, gb overwritten */                                                                              \
  void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x,                         \
                              std::span<const float> gy, std::span<float> gw, std::span<float> gb);     \
  /* argmax receives the flat input offset of each window maximum (first max wins) */                  \
  void maxpool_forward(const PoolGeometry& g, std::span<const float> x, std::span<float> y,            \
                       std::span<std::uint32_t> argmax);                                                \
  void maxpool_backward(const PoolGeometry& g, std::span<const float> gy,                              \
                        std::span<const std::uint32_t> argmax, std::span<float> gx);

namespace reference {
SHAPPRUNE_KERNEL_SET
}  // namespace reference

namespace parallel {
SHAPPRUNE_KERNEL_SET
/// Caps the OpenMP worker count used by these kernels (0 = runtime default).
void set_max_threads(int threads);
int max_threads();
}  // namespace parallel

#undef SHAPPRUNE_KERNEL_SET

}  // namespace shapprune::kernels
