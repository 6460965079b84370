#include <algorithm>
#include <set>

#include "doctest.h"
#include "shapprune/attack.hpp"
#include "shapprune/errors.hpp"
#include "shapprune/train.hpp"
#include "support.hpp"

using namespace shapprune;
using testing::random_tensor;

namespace {

Tensor filled(Shape shape, float v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data()) x = v;
  return t;
}

}  // namespace

TEST_CASE("synthetic data is deterministic and balanced") {
  const SyntheticSpec spec{10, 20, 16, 3, 4, 0.08f};
  const auto a = make_synthetic_dataset(spec);
  const auto b = make_synthetic_dataset(spec);
  CHECK(a.images == b.images);
  CHECK(a.labels == b.labels);
  CHECK(a.images.shape() == Shape{200, 3, 16, 16});
  for (int c = 0; c < 10; ++c) CHECK(std::count(a.labels.begin(), a.labels.end(), c) == 20);
  for (float v : a.images.data()) REQUIRE((v >= 0.0f && v <= 1.0f));
  auto other = spec;
  other.seed = 5;
  CHECK_FALSE(make_synthetic_dataset(other).images == a.images);
}

TEST_CASE("a fresh reference model learns the synthetic classes") {
  const auto train = make_synthetic_dataset({10, 200, 16, 3, 1, 0.08f});
  const auto test = make_synthetic_dataset({10, 100, 16, 3, 2, 0.08f});
  TrainConfig c;
  c.epochs = 15;
  c.weight_decay = 1e-3f;
  const Model m = train_sgd(make_reference_model(train.image_shape(), 10, 11), train, c);
  CHECK(accuracy(m, test) >= 0.95);
}

TEST_CASE("degenerate synthetic specs are rejected") {
  CHECK_THROWS_AS(make_synthetic_dataset({1, 10, 16, 3, 1, 0.1f}), InvalidArgument);
  CHECK_THROWS_AS(make_synthetic_dataset({10, 10, 4, 3, 1, 0.1f}), InvalidArgument);
  CHECK_THROWS_AS(make_synthetic_dataset({10, 0, 16, 3, 1, 0.1f}), InvalidArgument);
  CHECK_THROWS_AS(make_synthetic_dataset({kSyntheticFamilies + 1, 10, 16, 3, 1, 0.1f}), InvalidArgument);
}

TEST_CASE("trigger blending arithmetic") {
  const Tensor img = filled({3, 4, 4}, 0.2f);
  const Tensor pattern = filled({3, 4, 4}, 1.0f);
  CHECK(inject_trigger(img, filled({1, 4, 4}, 0.0f), pattern) == img);
  CHECK(inject_trigger(img, filled({1, 4, 4}, 1.0f), pattern) == pattern);
  const Tensor half = inject_trigger(img, filled({1, 4, 4}, 0.5f), pattern);
  for (float v : half.data()) CHECK(v == doctest::Approx(0.6f));
  CHECK_THROWS_AS(inject_trigger(img, filled({1, 3, 4}, 0.5f), pattern), ShapeError);
}

TEST_CASE("binary masks make injection idempotent") {
  const auto trig = make_patch_trigger({3, 16, 16}, 3, 0, 9);
  const Tensor x = random_tensor({4, 3, 16, 16}, 1, 0.0f, 1.0f);
  const Tensor once = inject_trigger(x, trig);
  CHECK(inject_trigger(once, trig) == once);
  std::size_t on = 0;
  for (float m : trig.mask.data()) {
    CHECK((m == 0.0f || m == 1.0f));
    on += m == 1.0f;
  }
  CHECK(on == 9);
  // bottom-right corner
  CHECK(trig.mask[15 * 16 + 15] == 1.0f);
  CHECK(trig.mask[12 * 16 + 12] == 0.0f);
}

TEST_CASE("poisoning selects floor(ratio n) non-target images") {
  const auto train = make_synthetic_dataset({10, 200, 16, 3, 2, 0.08f});
  const auto test = make_synthetic_dataset({10, 20, 16, 3, 3, 0.08f});
  const auto trig = make_patch_trigger(train.image_shape(), 3, 0, 7);
  const auto p = poison_dataset(train, test, {trig, 0.01, 5});
  CHECK(p.poisoned_indices.size() == 20);
  CHECK(std::is_sorted(p.poisoned_indices.begin(), p.poisoned_indices.end()));
  CHECK(p.train.size() == train.size());
  const std::set<std::size_t> poisoned(p.poisoned_indices.begin(), p.poisoned_indices.end());
  const std::size_t plane = 16 * 16, image = 3 * plane;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (poisoned.count(i)) {
      CHECK(train.labels[i] != 0);
      CHECK(p.train.labels[i] == 0);
    } else {
      CHECK(p.train.labels[i] == train.labels[i]);
    }
    // clean bytes survive outside the mask support
    for (std::size_t k = 0; k < image; ++k)
      if (trig.mask[k % plane] == 0.0f) REQUIRE(p.train.images[i * image + k] == train.images[i * image + k]);
  }
  CHECK(p.clean_test.images == test.images);
  CHECK(p.triggered_test.size() == 180);
  for (int y : p.triggered_test.labels) CHECK(y != 0);
  CHECK_THROWS_AS(poison_dataset(train, test, {trig, 0.0001, 5}), InvalidArgument);
  CHECK_THROWS_AS(poison_dataset(train, test, {trig, 1.0, 5}), InvalidArgument);
}

TEST_CASE("few-shot split gives exactly per_class images of each class") {
  const auto data = make_synthetic_dataset({10, 20, 16, 3, 2, 0.08f});
  const auto s = few_shot_split(data, 10, 1, 3);
  CHECK(s.defender.size() == 10);
  CHECK(s.evaluation.size() == 190);
  std::vector<int> labels = s.defender.labels;
  std::sort(labels.begin(), labels.end());
  CHECK(labels == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  CHECK(few_shot_split(data, 10, 1, 3).defender.images == s.defender.images);
  CHECK_THROWS_AS(few_shot_split(data, 10, 21, 3), InvalidArgument);
}

TEST_CASE("triggered copy drops target-class images") {
  const auto data = make_synthetic_dataset({4, 5, 16, 3, 2, 0.08f});
  const auto trig = make_patch_trigger(data.image_shape(), 3, 2, 1);
  const auto t = triggered_copy(data, trig.mask, trig.pattern, 2);
  CHECK(t.size() == 15);
  for (int y : t.labels) CHECK(y != 2);
}
