// Straight-line serial kernels. Kept deliberately literal so they can serve
// as the oracle for kernels::parallel.

#include <algorithm>

#include "shapprune/kernels.hpp"

namespace shapprune::kernels::reference {

void dense_forward(std::span<const float> x, std::span<const float> w, std::span<const float> b,
                   std::size_t batch, std::size_t in, std::size_t out, std::span<float> y) {
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < out; ++o) {
      float acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[n * in + i] * w[o * in + i];
      y[n * out + o] = acc;
    }
}

void dense_backward(std::span<const float> x, std::span<const float> w, std::span<const float> gy,
                    std::size_t batch, std::size_t in, std::size_t out, std::span<float> gx,
                    std::span<float> gw, std::span<float> gb) {
  if (!gx.empty())
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t i = 0; i < in; ++i) {
        float acc = 0.0f;
        for (std::size_t o = 0; o < out; ++o) acc += gy[n * out + o] * w[o * in + i];
        gx[n * in + i] = acc;
      }
  for (std::size_t o = 0; o < out; ++o) {
    float bacc = 0.0f;
    for (std::size_t n = 0; n < batch; ++n) bacc += gy[n * out + o];
    gb[o] = bacc;
    for (std::size_t i = 0; i < in; ++i) {
      float acc = 0.0f;
      for (std::size_t n = 0; n < batch; ++n) acc += gy[n * out + o] * x[n * in + i];
      gw[o * in + i] = acc;
    }
  }
}

namespace {

// Input coordinate for an output position and kernel tap, or -1 when the tap
// lands in the zero padding.
long tap(std::size_t out_pos, std::size_t k, const ConvGeometry& g, std::size_t extent) {
  const long p = static_cast<long>(out_pos * g.stride + k) - static_cast<long>(g.padding);
  return (p < 0 || p >= static_cast<long>(extent)) ? -1 : p;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> w,
                    std::span<const float> b, std::span<float> y) {
  const auto oh = g.out_height(), ow = g.out_width();
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          float acc = b[o];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t kr = 0; kr < g.kernel; ++kr)
              for (std::size_t kc = 0; kc < g.kernel; ++kc) {
                const long ir = tap(r, kr, g, g.in_height), ic = tap(c, kc, g, g.in_width);
                if (ir < 0 || ic < 0) continue;
                acc += w[((o * g.in_channels + ci) * g.kernel + kr) * g.kernel + kc] *
                       x[((n * g.in_channels + ci) * g.in_height + ir) * g.in_width + ic];
              }
          y[((n * g.out_channels + o) * oh + r) * ow + c] = acc;
        }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const float> w, std::span<const float> gy,
                           std::span<float> gx) {
  const auto oh = g.out_height(), ow = g.out_width();
  std::fill(gx.begin(), gx.end(), 0.0f);
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          const float grad = gy[((n * g.out_channels + o) * oh + r) * ow + c];
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t kr = 0; kr < g.kernel; ++kr)
              for (std::size_t kc = 0; kc < g.kernel; ++kc) {
                const long ir = tap(r, kr, g, g.in_height), ic = tap(c, kc, g, g.in_width);
                if (ir < 0 || ic < 0) continue;
                gx[((n * g.in_channels + ci) * g.in_height + ir) * g.in_width + ic] +=
                    grad * w[((o * g.in_channels + ci) * g.kernel + kr) * g.kernel + kc];
              }
        }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x, std::span<const float> gy,
                            std::span<float> gw, std::span<float> gb) {
  const auto oh = g.out_height(), ow = g.out_width();
  std::fill(gw.begin(), gw.end(), 0.0f);
  std::fill(gb.begin(), gb.end(), 0.0f);
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < g.out_channels; ++o)
      for (std::size_t r = 0; r < oh; ++r)
        for (std::size_t c = 0; c < ow; ++c) {
          const float grad = gy[((n * g.out_channels + o) * oh + r) * ow + c];
          gb[o] += grad;
          for (std::size_t ci = 0; ci < g.in_channels; ++ci)
            for (std::size_t kr = 0; kr < g.kernel; ++kr)
              for (std::size_t kc = 0; kc < g.kernel; ++kc) {
                const long ir = tap(r, kr, g, g.in_height), ic = tap(c, kc, g, g.in_width);
                if (ir < 0 || ic < 0) continue;
                gw[((o * g.in_channels + ci) * g.kernel + kr) * g.kernel + kc] +=
                    grad * x[((n * g.in_channels + ci) * g.in_height + ir) * g.in_width + ic];
              }
        }
}

void maxpool_forward(const PoolGeometry& g, std::span<const float> x, std::span<float> y,
                     std::span<std::uint32_t> argmax) {
  const auto oh = g.out_height(), ow = g.out_width();
  for (std::size_t p = 0; p < g.planes; ++p)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        std::size_t best = (p * g.in_height + r * g.window) * g.in_width + c * g.window;
        for (std::size_t wr = 0; wr < g.window; ++wr)
          for (std::size_t wc = 0; wc < g.window; ++wc) {
            const std::size_t idx = (p * g.in_height + r * g.window + wr) * g.in_width + c * g.window + wc;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t out = (p * oh + r) * ow + c;
        y[out] = x[best];
        argmax[out] = static_cast<std::uint32_t>(best);
      }
}

void maxpool_backward(const PoolGeometry& g, std::span<const float> gy, std::span<const std::uint32_t> argmax,
                      std::span<float> gx) {
  std::fill(gx.begin(), gx.end(), 0.0f);
  const auto count = g.planes * g.out_height() * g.out_width();
  for (std::size_t i = 0; i < count; ++i) gx[argmax[i]] += gy[i];
}

}  // namespace shapprune::kernels::reference
