#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "shapprune/model.hpp"
#include "shapprune/tensor.hpp"

namespace testing {

using shapprune::Shape;
using shapprune::Tensor;

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Layers with seeded random parameters.
inline shapprune::Conv2dLayer conv(std::size_t in, std::size_t out, std::size_t k, std::size_t s, std::size_t p,
                                   std::uint64_t seed) {
  return {in, out, k, s, p, random_tensor({out, in, k, k}, seed, -0.5f, 0.5f), random_tensor({out}, seed + 1, -0.1f, 0.1f)};
}
inline shapprune::DenseLayer dense(std::size_t in, std::size_t out, std::uint64_t seed) {
  return {in, out, random_tensor({out, in}, seed, -0.5f, 0.5f), random_tensor({out}, seed + 1, -0.1f, 0.1f)};
}
inline shapprune::BatchNormLayer bn(std::size_t c, std::uint64_t seed) {
  return {c, 0.1f, 1e-5f, random_tensor({c}, seed, 0.5f, 1.5f), random_tensor({c}, seed + 1, -0.2f, 0.2f),
          random_tensor({c}, seed + 2, -0.1f, 0.1f), random_tensor({c}, seed + 3, 0.5f, 1.5f)};
}

/// ||a - b|| / max(||a||, ||b||, floor), the vector relative error.
inline double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

/// Central differences of `f` with respect to every entry of `x`.
inline std::vector<double> numeric_gradient(Tensor& x, const std::function<double()>& f, float eps = 1e-3f) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float keep = x[i];
    x[i] = keep + eps;
    const double up = f();
    x[i] = keep - eps;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2.0 * static_cast<double>(eps));
  }
  return g;
}

inline std::vector<double> as_double(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace testing
