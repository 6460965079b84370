#include <cmath>

#include "doctest.h"
#include "shapprune/datafree.hpp"
#include "shapprune/errors.hpp"
#include "support.hpp"

using namespace shapprune;
using testing::as_double;
using testing::bn;
using testing::conv;
using testing::dense;
using testing::numeric_gradient;
using testing::random_tensor;
using testing::relative_error;

namespace {

// Batchnorm on image and feature inputs with nothing piecewise in front of either.
Model bn_model() {
  return Model({2, 4, 4}, 3,
               {conv(2, 3, 3, 1, 1, 1), bn(3, 5), FlattenLayer{}, dense(48, 4, 9), bn(4, 13), ReluLayer{},
                dense(4, 3, 17)});
}

// Reference statistics of x at channel-major layout [N, C, ...].
void channel_stats(const Tensor& x, std::vector<double>& mean, std::vector<double>& var) {
  const std::size_t n = x.dim(0), c = x.dim(1), inner = x.size() / (n * c);
  mean.assign(c, 0.0);
  var.assign(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < inner; ++i) {
        const double v = x[(b * c + k) * inner + i];
        s += v;
        s2 += v * v;
      }
    const double cnt = static_cast<double>(n * inner);
    mean[k] = s / cnt;
    var[k] = s2 / cnt - mean[k] * mean[k];
  }
}

}  // namespace

TEST_CASE("variation, norm and prior on small images") {
  const Tensor ramp({1, 2, 2}, std::vector<float>{0, 1, 0, 1});
  CHECK(variation_loss(ramp) == 2.0);
  CHECK(norm_loss(ramp) == 2.0);
  CHECK(prior_loss(ramp, 1.0, 0.0) == 2.0);
  CHECK(prior_loss(ramp, 0.5, 0.25) == doctest::Approx(0.5 * 2 + 0.25 * 2));
  CHECK(variation_loss(Tensor({3, 5, 5}, 0.7f)) == 0.0);
  CHECK(prior_loss(Tensor({3, 5, 5}, 0.0f), 1.0, 1.0) == 0.0);
  // a batch gives the mean over its images
  Tensor batch({2, 1, 2, 2}, std::vector<float>{0, 1, 0, 1, 0, 0, 0, 0});
  CHECK(prior_loss(batch, 1.0, 1.0) == doctest::Approx((2.0 + 2.0) / 2.0));
}

TEST_CASE("prior gradient matches central differences") {
  Tensor x = random_tensor({2, 3, 5, 4}, 3, 0.0f, 1.0f);
  const auto g = prior_loss_gradient(x, 0.3, 0.7);
  const auto num = numeric_gradient(x, [&] { return prior_loss(x, 0.3, 0.7); });
  CHECK(relative_error(as_double(g.data()), num) < 1e-3);
}

TEST_CASE("batch statistics are taken at each batchnorm input") {
  const Model m = bn_model();
  const Tensor x = random_tensor({6, 2, 4, 4}, 4, 0.0f, 1.0f);
  const auto stats = batch_bn_statistics(m, x);
  REQUIRE(stats.size() == 2);
  CHECK(stats[0].layer == 1);
  CHECK(stats[1].layer == 4);
  // the first batchnorm sees the conv output
  const Model prefix({2, 4, 4}, 3, {m.layers()[0], FlattenLayer{}, dense(48, 3, 1)});
  std::vector<Tensor> outs(3);
  forward_from(prefix, 0, x, &outs);
  std::vector<double> mean, var;
  channel_stats(outs[0], mean, var);
  for (std::size_t c = 0; c < 3; ++c) {
    CHECK(stats[0].mean[c] == doctest::Approx(mean[c]).epsilon(1e-5));
    CHECK(stats[0].var[c] == doctest::Approx(var[c]).epsilon(1e-4));
  }
}

TEST_CASE("bn loss vanishes when the recorded statistics are the batch's own") {
  Model m = bn_model();
  const Tensor x = random_tensor({6, 2, 4, 4}, 4, 0.0f, 1.0f);
  CHECK(bn_loss(m, x) > 0.0);
  for (int pass = 0; pass < 2; ++pass) {
    const auto stats = batch_bn_statistics(m, x);
    for (const auto& s : stats) {
      auto& l = std::get<BatchNormLayer>(m.layers()[s.layer]);
      for (std::size_t c = 0; c < s.mean.size(); ++c) {
        l.running_mean[c] = static_cast<float>(s.mean[c]);
        l.running_var[c] = static_cast<float>(s.var[c]);
      }
    }
  }
  CHECK(bn_loss(m, x) < 1e-10);
}

TEST_CASE("bn loss is the squared distance of means plus variances") {
  const Model m = bn_model();
  const Tensor x = random_tensor({5, 2, 4, 4}, 8, 0.0f, 1.0f);
  double expected = 0.0;
  for (const auto& s : batch_bn_statistics(m, x)) {
    const auto& l = std::get<BatchNormLayer>(m.layers()[s.layer]);
    for (std::size_t c = 0; c < s.mean.size(); ++c)
      expected += std::pow(s.mean[c] - l.running_mean[c], 2) + std::pow(s.var[c] - l.running_var[c], 2);
  }
  CHECK(bn_loss(m, x) == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("bn loss gradient matches central differences") {
  const Model m = bn_model();
  Tensor x = random_tensor({4, 2, 4, 4}, 12, 0.0f, 1.0f);
  const auto g = bn_loss_gradient(m, x);
  const auto num = numeric_gradient(x, [&] { return bn_loss(m, x); });
  CHECK(relative_error(as_double(g.data()), num) < 1e-3);
}

TEST_CASE("batches of one and models without batchnorm are rejected") {
  const Model m = bn_model();
  CHECK_THROWS_AS(bn_loss(m, random_tensor({1, 2, 4, 4}, 1)), InvalidArgument);
  const Model plain({2, 4, 4}, 3, {FlattenLayer{}, dense(32, 3, 1)});
  CHECK_THROWS_AS(bn_loss(plain, random_tensor({3, 2, 4, 4}, 1)), InvalidArgument);
  RecoveryConfig c;
  c.labels = {1};
  c.per_label = 1;
  CHECK_THROWS_AS(recover_images(m, c), InvalidArgument);
}

TEST_CASE("total loss is the weighted sum of independently computed parts") {
  const Model m = bn_model();
  const Tensor x = random_tensor({4, 2, 4, 4}, 3, 0.0f, 1.0f);
  const std::vector<int> y{0, 1, 2, 0};
  RecoveryConfig c;
  c.alpha = 0.7;
  c.beta = 3.0;
  c.gamma = 0.2;
  c.alpha1 = 0.1;
  c.alpha2 = 0.01;
  const auto t = total_loss(m, x, y, c);
  const double ce = cross_entropy(forward(m, x), y).loss;
  CHECK(t.ce == doctest::Approx(ce).epsilon(1e-12));
  CHECK(t.bn == doctest::Approx(bn_loss(m, x)).epsilon(1e-12));
  CHECK(t.prior == doctest::Approx(prior_loss(x, 0.1, 0.01)).epsilon(1e-12));
  CHECK(t.total == doctest::Approx(0.7 * ce + 3.0 * t.bn + 0.2 * t.prior).epsilon(1e-12));
  CHECK(t.ce >= 0.0);
  CHECK(t.bn >= 0.0);
  CHECK(t.prior >= 0.0);
}

TEST_CASE("recovery is deterministic, labelled and in range") {
  const Model m = bn_model();
  RecoveryConfig c;
  c.per_label = 2;
  c.iterations = 15;
  const auto a = recover_images(m, c);
  const auto b = recover_images(m, c);
  CHECK(a.images.images == b.images.images);
  CHECK(a.images.labels == std::vector<int>{0, 1, 2, 0, 1, 2});
  CHECK(a.trace.size() == 15);
  for (float v : a.images.images.data()) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK(a.final_loss.total < a.trace.front().total);
}

TEST_CASE("a dominant norm prior drives the images to zero") {
  const Model m = bn_model();
  RecoveryConfig c;
  c.alpha = 0.0;
  c.beta = 0.0;
  c.gamma = 1.0;
  c.alpha1 = 0.0;
  c.alpha2 = 1.0;
  c.per_label = 1;
  c.iterations = 100;
  const auto r = recover_images(m, c);
  double peak = 0.0;
  for (float v : r.images.images.data()) peak = std::max(peak, static_cast<double>(v));
  CHECK(peak < 0.01);
}

TEST_CASE("invalid recovery configs are rejected") {
  const Model m = bn_model();
  RecoveryConfig c;
  c.beta = -1.0;
  CHECK_THROWS_AS(validate(c, m), InvalidArgument);
  c = {};
  c.labels = {3};
  CHECK_THROWS_AS(validate(c, m), InvalidArgument);
  c = {};
  c.iterations = 0;
  CHECK_THROWS_AS(validate(c, m), InvalidArgument);
  c = {};
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(validate(c, m), InvalidArgument);
}
