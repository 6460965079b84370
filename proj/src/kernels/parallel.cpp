#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "shapprune/kernels.hpp"

namespace shapprune::kernels::parallel {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 14;

// Output range [lo, hi) for which out*stride + k - pad stays inside [0, extent).
void valid_range(std::size_t k, std::size_t stride, std::size_t pad, std::size_t extent, std::size_t out_extent,
                 std::size_t& lo, std::size_t& hi) {
  // out*stride + k >= pad
  lo = k >= pad ? 0 : (pad - k + stride - 1) / stride;
  // out*stride + k - pad <= extent - 1
  const std::size_t limit = extent - 1 + pad;
  hi = k > limit ? 0 : std::min(out_extent, (limit - k) / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace

void set_max_threads(int threads) {
#ifdef _OPENMP
  omp_set_num_threads(threads > 0 ? threads : omp_get_num_procs());
#else
  (void)threads;
#endif
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void dense_forward(std::span<const float> x, std::span<const float> w, std::span<const float> b,
                   std::size_t batch, std::size_t in, std::size_t out, std::span<float> y) {
  const float* xp = x.data();
  const float* wp = w.data();
#pragma omp parallel for collapse(2) schedule(static) if (batch * in * out > kParallelWork)
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t o = 0; o < out; ++o) {
      const float* xr = xp + n * in;
      const float* wr = wp + o * in;
      float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      y[n * out + o] = b[o] + acc;
    }
}

void dense_backward(std::span<const float> x, std::span<const float> w, std::span<const float> gy,
                    std::size_t batch, std::size_t in, std::size_t out, std::span<float> gx,
                    std::span<float> gw, std::span<float> gb) {
  const bool big = batch * in * out > kParallelWork;
  if (!gx.empty()) {
#pragma omp parallel for schedule(static) if (big)
    for (std::size_t n = 0; n < batch; ++n) {
      float* gr = gx.data() + n * in;
      std::fill(gr, gr + in, 0.0f);
      for (std::size_t o = 0; o < out; ++o) {
        const float g = gy[n * out + o];
        if (g == 0.0f) continue;
        const float* wr = w.data() + o * in;
#pragma omp simd
        for (std::size_t i = 0; i < in; ++i) gr[i] += g * wr[i];
      }
    }
  }
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t o = 0; o < out; ++o) {
    float* gr = gw.data() + o * in;
    std::fill(gr, gr + in, 0.0f);
    float bacc = 0.0f;
    for (std::size_t n = 0; n < batch; ++n) {
      const float g = gy[n * out + o];
      bacc += g;
      if (g == 0.0f) continue;
      const float* xr = x.data() + n * in;
#pragma omp simd
      for (std::size_t i = 0; i < in; ++i) gr[i] += g * xr[i];
    }
    gb[o] = bacc;
  }
}

namespace {

// Unfolds one image [C,H,W] into cols [C*K*K, OH*OW]; padded taps are zero.
void im2col(const ConvGeometry& g, const float* in, float* cols) {
  const auto oh = g.out_height(), ow = g.out_width(), p = oh * ow;
  const auto ih = g.in_height, iw = g.in_width, k = g.kernel, s = g.stride, pad = g.padding;
  for (std::size_t ci = 0; ci < g.in_channels; ++ci)
    for (std::size_t kr = 0; kr < k; ++kr)
      for (std::size_t kc = 0; kc < k; ++kc) {
        float* row = cols + ((ci * k + kr) * k + kc) * p;
        std::fill(row, row + p, 0.0f);
        std::size_t r0, r1, c0, c1;
        valid_range(kr, s, pad, ih, oh, r0, r1);
        valid_range(kc, s, pad, iw, ow, c0, c1);
        const float* plane = in + ci * ih * iw;
        for (std::size_t r = r0; r < r1; ++r) {
          const float* src = plane + (r * s + kr - pad) * iw + kc - pad;
          float* dst = row + r * ow;
          for (std::size_t c = c0; c < c1; ++c) dst[c] = src[c * s];
        }
      }
}

// Adds cols [C*K*K, OH*OW] back into an image gradient [C,H,W].
void col2im_add(const ConvGeometry& g, const float* cols, float* out) {
  const auto oh = g.out_height(), ow = g.out_width(), p = oh * ow;
  const auto ih = g.in_height, iw = g.in_width, k = g.kernel, s = g.stride, pad = g.padding;
  for (std::size_t ci = 0; ci < g.in_channels; ++ci)
    for (std::size_t kr = 0; kr < k; ++kr)
      for (std::size_t kc = 0; kc < k; ++kc) {
        const float* row = cols + ((ci * k + kr) * k + kc) * p;
        std::size_t r0, r1, c0, c1;
        valid_range(kr, s, pad, ih, oh, r0, r1);
        valid_range(kc, s, pad, iw, ow, c0, c1);
        float* plane = out + ci * ih * iw;
        for (std::size_t r = r0; r < r1; ++r) {
          float* dst = plane + (r * s + kr - pad) * iw + kc - pad;
          const float* src = row + r * ow;
          for (std::size_t c = c0; c < c1; ++c) dst[c * s] += src[c];
        }
      }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, std::span<const float> x, std::span<const float> w,
                    std::span<const float> b, std::span<float> y) {
  const auto p = g.out_height() * g.out_width();
  const auto taps = g.in_channels * g.kernel * g.kernel;
  const auto in_size = g.in_channels * g.in_height * g.in_width;
  const bool big = g.batch * g.out_channels * p * taps > kParallelWork;
#pragma omp parallel if (big)
  {
    std::vector<float> cols(taps * p);
#pragma omp for schedule(static)
    for (std::size_t n = 0; n < g.batch; ++n) {
      im2col(g, x.data() + n * in_size, cols.data());
      std::size_t o = 0;
      // Four output channels per pass share each column load.
      for (; o + 4 <= g.out_channels; o += 4) {
        float* out0 = y.data() + (n * g.out_channels + o) * p;
        float* out1 = out0 + p;
        float* out2 = out1 + p;
        float* out3 = out2 + p;
        std::fill(out0, out0 + p, b[o]);
        std::fill(out1, out1 + p, b[o + 1]);
        std::fill(out2, out2 + p, b[o + 2]);
        std::fill(out3, out3 + p, b[o + 3]);
        const float* w0 = w.data() + o * taps;
        for (std::size_t t = 0; t < taps; ++t) {
          const float a0 = w0[t], a1 = w0[taps + t], a2 = w0[2 * taps + t], a3 = w0[3 * taps + t];
          const float* col = cols.data() + t * p;
#pragma omp simd
          for (std::size_t i = 0; i < p; ++i) {
            const float c = col[i];
            out0[i] += a0 * c;
            out1[i] += a1 * c;
            out2[i] += a2 * c;
            out3[i] += a3 * c;
          }
        }
      }
      for (; o < g.out_channels; ++o) {
        float* out = y.data() + (n * g.out_channels + o) * p;
        std::fill(out, out + p, b[o]);
        const float* wr = w.data() + o * taps;
        for (std::size_t t = 0; t < taps; ++t) {
          const float wv = wr[t];
          const float* col = cols.data() + t * p;
#pragma omp simd
          for (std::size_t i = 0; i < p; ++i) out[i] += wv * col[i];
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const float> w, std::span<const float> gy,
                           std::span<float> gx) {
  const auto p = g.out_height() * g.out_width();
  const auto taps = g.in_channels * g.kernel * g.kernel;
  const auto in_size = g.in_channels * g.in_height * g.in_width;
  const bool big = g.batch * g.out_channels * p * taps > kParallelWork;
#pragma omp parallel if (big)
  {
    std::vector<float> cols(taps * p);
#pragma omp for schedule(static)
    for (std::size_t n = 0; n < g.batch; ++n) {
      std::fill(cols.begin(), cols.end(), 0.0f);
      std::size_t o = 0;
      for (; o + 4 <= g.out_channels; o += 4) {
        const float* g0 = gy.data() + (n * g.out_channels + o) * p;
        const float* g1 = g0 + p;
        const float* g2 = g1 + p;
        const float* g3 = g2 + p;
        const float* w0 = w.data() + o * taps;
        for (std::size_t t = 0; t < taps; ++t) {
          const float a0 = w0[t], a1 = w0[taps + t], a2 = w0[2 * taps + t], a3 = w0[3 * taps + t];
          float* col = cols.data() + t * p;
#pragma omp simd
          for (std::size_t i = 0; i < p; ++i) col[i] += a0 * g0[i] + a1 * g1[i] + a2 * g2[i] + a3 * g3[i];
        }
      }
      for (; o < g.out_channels; ++o) {
        const float* grad = gy.data() + (n * g.out_channels + o) * p;
        const float* wr = w.data() + o * taps;
        for (std::size_t t = 0; t < taps; ++t) {
          const float wv = wr[t];
          float* col = cols.data() + t * p;
#pragma omp simd
          for (std::size_t i = 0; i < p; ++i) col[i] += wv * grad[i];
        }
      }
      float* out = gx.data() + n * in_size;
      std::fill(out, out + in_size, 0.0f);
      col2im_add(g, cols.data(), out);
    }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const float> x, std::span<const float> gy,
                            std::span<float> gw, std::span<float> gb) {
  const auto p = g.out_height() * g.out_width();
  const auto taps = g.in_channels * g.kernel * g.kernel;
  const auto in_size = g.in_channels * g.in_height * g.in_width;
  const bool big = g.batch * g.out_channels * p * taps > kParallelWork;
  std::vector<float> cols(g.batch * taps * p);
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t n = 0; n < g.batch; ++n) im2col(g, x.data() + n * in_size, cols.data() + n * taps * p);
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    float* wr = gw.data() + o * taps;
    std::fill(wr, wr + taps, 0.0f);
    float bacc = 0.0f;
    for (std::size_t n = 0; n < g.batch; ++n) {
      const float* grad = gy.data() + (n * g.out_channels + o) * p;
      for (std::size_t i = 0; i < p; ++i) bacc += grad[i];
      const float* col_n = cols.data() + n * taps * p;
      std::size_t t = 0;
      for (; t + 4 <= taps; t += 4) {
        const float* c0 = col_n + t * p;
        const float* c1 = c0 + p;
        const float* c2 = c1 + p;
        const float* c3 = c2 + p;
        float a0 = 0.0f, a1 = 0.0f, a2 = 0.0f, a3 = 0.0f;
#pragma omp simd reduction(+ : a0, a1, a2, a3)
        for (std::size_t i = 0; i < p; ++i) {
          const float gv = grad[i];
          a0 += gv * c0[i];
          a1 += gv * c1[i];
          a2 += gv * c2[i];
          a3 += gv * c3[i];
        }
        wr[t] += a0;
        wr[t + 1] += a1;
        wr[t + 2] += a2;
        wr[t + 3] += a3;
      }
      for (; t < taps; ++t) {
        const float* col = col_n + t * p;
        float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
        for (std::size_t i = 0; i < p; ++i) acc += grad[i] * col[i];
        wr[t] += acc;
      }
    }
    gb[o] = bacc;
  }
}

void maxpool_forward(const PoolGeometry& g, std::span<const float> x, std::span<float> y,
                     std::span<std::uint32_t> argmax) {
  const auto oh = g.out_height(), ow = g.out_width(), win = g.window;
#pragma omp parallel for schedule(static) if (g.planes * g.in_height * g.in_width > kParallelWork)
  for (std::size_t p = 0; p < g.planes; ++p)
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        std::size_t best = (p * g.in_height + r * win) * g.in_width + c * win;
        float best_v = x[best];
        for (std::size_t wr = 0; wr < win; ++wr) {
          const std::size_t base = (p * g.in_height + r * win + wr) * g.in_width + c * win;
          for (std::size_t wc = 0; wc < win; ++wc)
            if (x[base + wc] > best_v) {
              best_v = x[base + wc];
              best = base + wc;
            }
        }
        const std::size_t out = (p * oh + r) * ow + c;
        y[out] = best_v;
        argmax[out] = static_cast<std::uint32_t>(best);
      }
}

void maxpool_backward(const PoolGeometry& g, std::span<const float> gy, std::span<const std::uint32_t> argmax,
                      std::span<float> gx) {
  const auto per_in = g.in_height * g.in_width;
  const auto per_out = g.out_height() * g.out_width();
  // Windows do not overlap, so each plane is written by one thread only.
#pragma omp parallel for schedule(static) if (g.planes * per_in > kParallelWork)
  for (std::size_t p = 0; p < g.planes; ++p) {
    std::fill(gx.data() + p * per_in, gx.data() + (p + 1) * per_in, 0.0f);
    for (std::size_t i = p * per_out; i < (p + 1) * per_out; ++i) gx[argmax[i]] += gy[i];
  }
}

}  // namespace shapprune::kernels::parallel
