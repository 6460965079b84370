#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "shapprune/errors.hpp"
#include "shapprune/trigger_reverse.hpp"
#include "support.hpp"

using namespace shapprune;
using testing::as_double;
using testing::conv;
using testing::dense;
using testing::numeric_gradient;
using testing::random_tensor;
using testing::relative_error;

namespace {

// No ReLU or pooling, so the objective is smooth in the trigger parameters.
Model smooth_model() {
  return Model({3, 4, 4}, 3, {conv(3, 2, 3, 1, 1, 11), FlattenLayer{}, dense(32, 3, 12)});
}

// Predicts `cls` for every input.
Model constant_model(int cls) {
  DenseLayer d{48, 3, Tensor({3, 48}, 0.0f), Tensor({3}, 0.0f)};
  d.bias[static_cast<std::size_t>(cls)] = 8.0f;
  return Model({3, 4, 4}, 3, {FlattenLayer{}, d});
}

ReverseConfig quick(std::size_t iterations) {
  ReverseConfig c;
  c.iterations = iterations;
  return c;
}

}  // namespace

TEST_CASE("trigger gradients match central differences") {
  const Model m = smooth_model();
  const Tensor images = random_tensor({4, 3, 4, 4}, 2, 0.0f, 1.0f);
  Tensor mask_raw = random_tensor({1, 4, 4}, 3, -2.0f, 2.0f);
  Tensor pattern_raw = random_tensor({3, 4, 4}, 4, -2.0f, 2.0f);
  for (double lambda : {0.0, 0.05}) {
    const auto obj = reverse_objective(m, images, mask_raw, pattern_raw, lambda, 1);
    CHECK(obj.objective == doctest::Approx(obj.ce + lambda * obj.l1).epsilon(1e-12));
    const auto f = [&] { return reverse_objective(m, images, mask_raw, pattern_raw, lambda, 1, false).objective; };
    // The objective is smooth, so a wide stencil keeps float roundoff out of the comparison.
    CHECK(relative_error(as_double(obj.grad_mask.data()), numeric_gradient(mask_raw, f, 1e-2f)) < 1e-3);
    CHECK(relative_error(as_double(obj.grad_pattern.data()), numeric_gradient(pattern_raw, f, 1e-2f)) < 1e-3);
  }
}

TEST_CASE("objective parts are computed independently") {
  const Model m = smooth_model();
  const Tensor images = random_tensor({4, 3, 4, 4}, 2, 0.0f, 1.0f);
  const Tensor mask_raw = random_tensor({1, 4, 4}, 3, -2.0f, 2.0f);
  const Tensor pattern_raw = random_tensor({3, 4, 4}, 4, -2.0f, 2.0f);
  const auto obj = reverse_objective(m, images, mask_raw, pattern_raw, 0.1, 2, false);
  double l1 = 0.0;
  for (std::size_t i = 0; i < mask_raw.size(); ++i) l1 += 1.0 / (1.0 + std::exp(-static_cast<double>(mask_raw[i])));
  CHECK(obj.l1 == doctest::Approx(l1).epsilon(1e-6));
  CHECK(obj.grad_mask.empty());
}

TEST_CASE("reverse keeps the mask in range and tracks the best iterate") {
  const Model m = smooth_model();
  const Tensor images = random_tensor({5, 3, 4, 4}, 6, 0.0f, 1.0f);
  for (auto opt : {ReverseOptimizer::Adam, ReverseOptimizer::GradientDescent}) {
    auto c = quick(60);
    c.optimizer = opt;
    const auto t = reverse_trigger_for_class(m, images, c, 2);
    CHECK(t.target_class == 2);
    REQUIRE(t.loss_trace.size() == 60);
    for (float v : t.mask.data()) CHECK((v >= 0.0f && v <= 1.0f));
    for (float v : t.pattern.data()) CHECK((v >= 0.0f && v <= 1.0f));
    CHECK(t.l1_norm == doctest::Approx(mask_l1(t.mask)).epsilon(1e-12));
    const auto best = std::min_element(t.loss_trace.begin(), t.loss_trace.end());
    CHECK(t.best_objective == *best);
    CHECK(t.best_iteration == static_cast<std::size_t>(best - t.loss_trace.begin()));
    CHECK(t.best_objective <= t.loss_trace.front());
  }
}

TEST_CASE("zero lambda on a model that already predicts the class") {
  const Model m = constant_model(1);
  const Tensor images = random_tensor({3, 3, 4, 4}, 6, 0.0f, 1.0f);
  auto c = quick(30);
  c.lambda = 0.0;
  const auto t = reverse_trigger_for_class(m, images, c, 1);
  // the logits ignore the input, so the objective is the constant cross-entropy
  const double ce = -std::log(std::exp(8.0) / (std::exp(8.0) + 2.0));
  for (double v : t.loss_trace) CHECK(v == doctest::Approx(ce).epsilon(1e-5));
}

TEST_CASE("reverse_all is deterministic and covers every class") {
  const Model m = smooth_model();
  const Tensor images = random_tensor({3, 3, 4, 4}, 6, 0.0f, 1.0f);
  const auto a = reverse_all(m, images, quick(20));
  const auto b = reverse_all(m, images, quick(20));
  CHECK(a.complete());
  REQUIRE(a.triggers.size() == 3);
  for (int c = 0; c < 3; ++c) CHECK(a.triggers[static_cast<std::size_t>(c)].target_class == c);
  CHECK(a.norms() == b.norms());
  CHECK(a.triggers[1].mask == b.triggers[1].mask);
}

TEST_CASE("invalid reverse requests are rejected") {
  const Model m = smooth_model();
  const Tensor images = random_tensor({2, 3, 4, 4}, 6, 0.0f, 1.0f);
  CHECK_THROWS_AS(reverse_trigger_for_class(m, images, quick(0), 0), InvalidArgument);
  auto c = quick(5);
  c.lambda = -1.0;
  CHECK_THROWS_AS(reverse_trigger_for_class(m, images, c, 0), InvalidArgument);
  CHECK_THROWS_AS(reverse_trigger_for_class(m, images, quick(5), 3), InvalidArgument);
  CHECK_THROWS_AS(reverse_trigger_for_class(m, Tensor({0, 3, 4, 4}), quick(5), 0), ShapeError);
}

TEST_CASE("a diverging objective is reported per class") {
  Model m = smooth_model();
  std::get<DenseLayer>(m.layers()[2]).weight[0] = NAN;
  const Tensor images = random_tensor({2, 3, 4, 4}, 6, 0.0f, 1.0f);
  CHECK_THROWS_AS(reverse_trigger_for_class(m, images, quick(5), 0), NumericError);
  const auto all = reverse_all(m, images, quick(5));
  CHECK_FALSE(all.complete());
  CHECK(all.failures.size() == 3);
}
