#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "doctest.h"
#include "shapprune/errors.hpp"
#include "shapprune/shapley.hpp"
#include "support.hpp"

using namespace shapprune;
using testing::random_tensor;

namespace {

std::size_t members(std::span<const std::uint8_t> alive) {
  return static_cast<std::size_t>(std::count(alive.begin(), alive.end(), std::uint8_t{1}));
}

FunctionGame additive(std::vector<double> w) {
  const std::size_t n = w.size();
  return FunctionGame(n, [w](std::span<const std::uint8_t> a) {
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += a[i] ? w[i] : 0.0;
    return s;
  });
}

FunctionGame majority(std::size_t n) {
  return FunctionGame(n, [n](std::span<const std::uint8_t> a) { return 2 * members(a) > n ? 1.0 : 0.0; });
}

// Player 0 holds the left glove, players 1 and 2 right gloves.
FunctionGame glove() {
  return FunctionGame(3, [](std::span<const std::uint8_t> a) { return a[0] && (a[1] || a[2]) ? 1.0 : 0.0; });
}

// Monotone game with values in [0,1]: a random nonnegative weight per subset, accumulated over subsets.
FunctionGame random_monotone(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> w(std::size_t{1} << n);
  for (auto& v : w) v = u(rng);
  std::vector<double> value(w.size(), 0.0);
  for (std::size_t s = 0; s < w.size(); ++s)
    for (std::size_t t = 0; t <= s; ++t)
      if ((t & s) == t) value[s] += w[t];
  const double top = value.back();
  for (auto& v : value) v /= top;
  return FunctionGame(n, [value](std::span<const std::uint8_t> a) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s |= std::size_t{a[i]} << i;
    return value[s];
  });
}

// Adds a player that never changes the value.
FunctionGame with_dummy(FunctionGame g) {
  const std::size_t n = g.player_count() + 1;
  return FunctionGame(n, [g](std::span<const std::uint8_t> a) { return g.value(a.first(a.size() - 1)); });
}

std::vector<double> enumerate_all_orders(const CoalitionGame& g) {
  GameWalk walk(g);
  ShapleyTable table(MetricKind::Asr, plain_players(g.player_count()));
  std::vector<std::size_t> order(g.player_count());
  std::iota(order.begin(), order.end(), 0);
  do {
    commit(table, walk_permutation(walk, order, 0.0, DiscardMode::Discard));
  } while (std::next_permutation(order.begin(), order.end()));
  std::vector<double> out;
  for (std::size_t i = 0; i < table.size(); ++i) out.push_back(table.estimate(i));
  return out;
}

double full_value(const CoalitionGame& g, bool everyone) {
  std::vector<std::uint8_t> a(g.player_count(), everyone ? 1 : 0);
  return g.value(a);
}

ShapleyTable table_with(std::vector<double> estimates) {
  ShapleyTable t(MetricKind::Asr, plain_players(estimates.size()));
  for (std::size_t i = 0; i < estimates.size(); ++i) {
    t.sum[i] = estimates[i];
    t.count[i] = 1;
  }
  t.iterations = 1;
  return t;
}

class FlakyWalk final : public PruningWalk {
 public:
  FlakyWalk(const CoalitionGame& g, std::size_t fail_on_reset) : inner_(g), fail_(fail_on_reset) {}
  std::size_t player_count() const override { return inner_.player_count(); }
  double reset() override {
    if (++resets_ == fail_) throw NumericError("metric evaluation failed");
    return inner_.reset();
  }
  double prune(std::size_t p) override { return inner_.prune(p); }

 private:
  GameWalk inner_;
  std::size_t fail_;
  std::size_t resets_ = 0;
};

}  // namespace

TEST_CASE("exact Shapley values of textbook games") {
  auto phi = exact_shapley(additive({0.1, 0.25, 0.4, 0.05}));
  CHECK(phi[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(phi[1] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(phi[2] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(phi[3] == doctest::Approx(0.05).epsilon(1e-12));

  const FunctionGame sym(3, [](std::span<const std::uint8_t> a) { return static_cast<double>(members(a)) / 3.0; });
  for (double v : exact_shapley(sym)) CHECK(std::abs(v - 1.0 / 3.0) < 1e-12);
  for (double v : exact_shapley(majority(3))) CHECK(std::abs(v - 1.0 / 3.0) < 1e-12);

  phi = exact_shapley(glove());
  CHECK(std::abs(phi[0] - 2.0 / 3.0) < 1e-12);
  CHECK(std::abs(phi[1] - 1.0 / 6.0) < 1e-12);
  CHECK(std::abs(phi[2] - 1.0 / 6.0) < 1e-12);
}

TEST_CASE("exact oracle rejects oversized and empty games") {
  CHECK_THROWS_AS(exact_shapley(majority(kExactShapleyMaxPlayers + 1)), InvalidArgument);
  CHECK_THROWS_AS(exact_shapley(FunctionGame(0, [](auto) { return 0.0; })), InvalidArgument);
}

TEST_CASE("efficiency, symmetry and dummy axioms") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const auto g = random_monotone(5, seed);
    const auto phi = exact_shapley(g);
    CHECK(std::abs(std::accumulate(phi.begin(), phi.end(), 0.0) - (full_value(g, true) - full_value(g, false))) < 1e-9);
    const auto d = with_dummy(g);
    const auto pd = exact_shapley(d);
    CHECK(std::abs(pd.back()) < 1e-9);
    for (std::size_t i = 0; i < phi.size(); ++i) CHECK(std::abs(pd[i] - phi[i]) < 1e-9);
  }
  // Players 1 and 2 are interchangeable in the glove game and in this weighted game.
  const FunctionGame w(4, [](std::span<const std::uint8_t> a) {
    return std::min(1.0, 0.5 * a[0] + 0.3 * (a[1] + a[2]) + 0.1 * a[3] * a[0]);
  });
  const auto phi = exact_shapley(w);
  CHECK(std::abs(phi[1] - phi[2]) < 1e-9);
}

TEST_CASE("walking every permutation reproduces the exact values") {
  std::vector<FunctionGame> games{additive({0.2, 0.1, 0.3, 0.4}), majority(5), glove(),
                                  with_dummy(majority(4)), random_monotone(6, 7), random_monotone(4, 8)};
  for (const auto& g : games) {
    const auto exact = exact_shapley(g);
    const auto walked = enumerate_all_orders(g);
    for (std::size_t i = 0; i < exact.size(); ++i) CHECK(std::abs(exact[i] - walked[i]) < 1e-9);
  }
}

TEST_CASE("Monte Carlo estimate converges on the 4-player majority game") {
  const auto g = majority(4);
  GameWalk walk(g);
  ShapleyConfig c;
  c.iterations = 5000;
  c.tau = 0.0;
  c.policy = PermutationPolicy::uniform();
  c.top_k = 1;
  const auto table = estimate_shapley(walk, plain_players(4), MetricKind::Asr, c);
  const auto exact = exact_shapley(g);
  CHECK(table.iterations == 5000);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(table.estimate(i) - exact[i]) < 0.02);
}

TEST_CASE("additive marginals are order independent under any threshold and policy") {
  const std::vector<double> w{0.3, 0.05, 0.25, 0.4};
  const auto g = additive(w);
  GameWalk walk(g);
  for (double tau : {0.0, 0.2, 0.5}) {
    ShapleyConfig c;
    c.iterations = 60;
    c.tau = tau;
    c.top_k = 1;
    c.policy.warmup_iters = 5;
    c.policy.epsilon = {{5, 0.0}};
    estimate_shapley(walk, plain_players(4), MetricKind::Asr, c, [&](std::size_t, std::span<const Sample> s) {
      for (const auto& x : s) CHECK(x.value == doctest::Approx(w[x.player]).epsilon(1e-12));
    });
  }
}

TEST_CASE("warmup permutations are uniform") {
  ShapleyTable t(MetricKind::Asr, plain_players(4));
  PermutationPolicy p;
  p.warmup_iters = 30;
  std::mt19937_64 rng(5);
  std::map<std::vector<std::size_t>, int> seen;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) ++seen[sample_permutation(p, t, 1, 2, rng)];
  REQUIRE(seen.size() == 24);
  const double expected = draws / 24.0;
  double chi2 = 0.0;
  for (const auto& [order, count] : seen) chi2 += (count - expected) * (count - expected) / expected;
  // 23 degrees of freedom, 0.999 quantile
  CHECK(chi2 < 49.73);
}

TEST_CASE("epsilon zero puts the current top group first") {
  const auto t = table_with({0.1, 0.9, 0.3, 0.8, 0.0, 0.2});
  PermutationPolicy p;
  p.warmup_iters = 1;
  p.epsilon = {{1, 0.0}};
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto o = sample_permutation(p, t, 2, 2, rng);
    CHECK(std::set<std::size_t>(o.begin(), o.begin() + 2) == std::set<std::size_t>{1, 3});
  }
}

TEST_CASE("epsilon one puts the others first and unvisited players rank last") {
  auto t = table_with({0.1, 0.9, 0.3, 0.8});
  t.count[2] = 0;
  t.sum[2] = 0.0;
  PermutationPolicy p;
  p.warmup_iters = 1;
  p.epsilon = {{1, 1.0}};
  std::mt19937_64 rng(4);
  for (int i = 0; i < 50; ++i) {
    const auto o = sample_permutation(p, t, 2, 3, rng);
    // top group by estimate: 1, 3, then 0; the unvisited player 2 is an "other"
    CHECK(o[0] == 2);
  }
  CHECK(p.epsilon_at(1) == 1.0);
}

TEST_CASE("default epsilon schedule") {
  const PermutationPolicy p;
  CHECK(p.warmup_iters == 30);
  CHECK(p.epsilon_at(35) == 0.5);
  CHECK(p.epsilon_at(40) == 0.5);
  CHECK(p.epsilon_at(41) == 0.3);
  CHECK(p.epsilon_at(50) == 0.3);
  const ShapleyConfig c;
  CHECK(c.tau == 0.2);
  CHECK(c.iterations == 50);
}

TEST_CASE("discarding keeps the threshold-free prefix bit for bit") {
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const auto g = random_monotone(6, seed);
    GameWalk walk(g);
    std::vector<std::size_t> order(6);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), std::mt19937_64(seed));
    const auto full = walk_permutation(walk, order, 0.0, DiscardMode::Discard);
    const auto cut = walk_permutation(walk, order, 0.2, DiscardMode::Discard);
    REQUIRE(full.size() == 6);
    REQUIRE(cut.size() <= full.size());
    for (std::size_t i = 0; i < cut.size(); ++i) {
      CHECK(cut[i].player == full[i].player);
      CHECK(cut[i].value == full[i].value);
    }
    const auto zero = walk_permutation(walk, order, 0.2, DiscardMode::ZeroFill);
    REQUIRE(zero.size() == 6);
    for (std::size_t i = cut.size(); i < 6; ++i) CHECK(zero[i].value == 0.0);
  }
}

TEST_CASE("discarded players get no sample and stay unvisited") {
  // Pruning player 0 alone drops the metric to zero.
  const FunctionGame g(3, [](std::span<const std::uint8_t> a) { return a[0] ? 1.0 : 0.0; });
  GameWalk walk(g);
  const std::vector<std::size_t> order{0, 1, 2};
  const auto s = walk_permutation(walk, order, 0.2, DiscardMode::Discard);
  REQUIRE(s.size() == 1);
  ShapleyTable t(MetricKind::Asr, plain_players(3));
  commit(t, s);
  CHECK(t.visited(0));
  CHECK_FALSE(t.visited(1));
  CHECK_THROWS_AS(t.estimate(1), InvalidArgument);
  CHECK(t.ranking() == std::vector<std::size_t>{0});
  CHECK_THROWS_AS(top_k(t, 2), InvalidArgument);
  CHECK(to_json(t)["neurons"][1]["estimate"].is_null());
}

TEST_CASE("top_k breaks ties by neuron id") {
  const auto t = table_with({0.5, 0.5, 0.1});
  CHECK(top_k(t, 2) == std::vector<NeuronId>{{0, 0}, {0, 1}});
  CHECK_THROWS_AS(top_k(t, 0), InvalidArgument);
  CHECK_THROWS_AS(top_k(t, 4), InvalidArgument);
}

TEST_CASE("mixture selection intersects ASR top-k with Acc bottom-l") {
  const auto asr = table_with({0.9, 0.8, 0.1, 0.7});
  const auto acc = table_with({0.05, 0.6, 0.0, 0.01});
  const auto m = mixture_select(asr, acc, 3, 3);
  // neuron 1 is accuracy-critical, so it is dropped despite its ASR rank
  CHECK(m.neurons == std::vector<NeuronId>{{0, 0}, {0, 3}});
  CHECK(m.shortfall);
  const auto all = mixture_select(asr, acc, 2, 4);
  CHECK(all.neurons == std::vector<NeuronId>{{0, 0}, {0, 1}});
  CHECK_FALSE(all.shortfall);
  CHECK_THROWS_AS(mixture_select(asr, acc, 2, 0), InvalidArgument);
  CHECK_THROWS_AS(mixture_select(asr, table_with({0.0, 0.1}), 1, 1), InvalidArgument);
}

TEST_CASE("a failing walk aborts only its own iteration") {
  const auto g = additive({0.4, 0.3, 0.3});
  FlakyWalk walk(g, 3);
  ShapleyConfig c;
  c.iterations = 5;
  c.tau = 0.0;
  c.top_k = 1;
  const auto t = estimate_shapley(walk, plain_players(3), MetricKind::Asr, c);
  CHECK(t.iterations == 4);
  CHECK(t.aborted == std::vector<std::size_t>{3});
  for (std::size_t i = 0; i < 3; ++i) CHECK(t.count[i] == 4);
}

TEST_CASE("estimation is deterministic and validated") {
  const auto g = random_monotone(5, 3);
  GameWalk walk(g);
  ShapleyConfig c;
  c.iterations = 60;
  c.top_k = 2;
  c.seed = 17;
  const auto a = estimate_shapley(walk, plain_players(5), MetricKind::Acc, c);
  const auto b = estimate_shapley(walk, plain_players(5), MetricKind::Acc, c);
  CHECK(a.sum == b.sum);
  CHECK(a.count == b.count);
  c.tau = 1.5;
  CHECK_THROWS_AS(estimate_shapley(walk, plain_players(5), MetricKind::Acc, c), InvalidArgument);
  c.tau = 0.2;
  c.top_k = 6;
  CHECK_THROWS_AS(estimate_shapley(walk, plain_players(5), MetricKind::Acc, c), InvalidArgument);
  c.top_k = 2;
  CHECK_THROWS_AS(estimate_shapley(walk, plain_players(4), MetricKind::Acc, c), InvalidArgument);
}

TEST_CASE("table and config survive JSON") {
  auto t = table_with({0.5, 0.25, -0.125});
  t.count[1] = 0;
  t.aborted = {2};
  const auto back = shapley_table_from_json(to_json(t));
  CHECK(back.players == t.players);
  CHECK(back.sum == t.sum);
  CHECK(back.count == t.count);
  CHECK(back.aborted == t.aborted);
  CHECK(back.metric == t.metric);
  ShapleyConfig c;
  c.tau = 0.3;
  c.discard = DiscardMode::ZeroFill;
  c.policy.epsilon = {{10, 0.4}};
  CHECK(to_json(shapley_config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("incremental model walk matches from-scratch evaluation") {
  const Model m = make_reference_model({3, 16, 16}, 10, 2);
  LabeledSet data{random_tensor({40, 3, 16, 16}, 4, 0.0f, 1.0f), {}};
  const auto pred = predict(m, data.images);
  // labels from the unpruned model so the walk starts at 1 and has room to fall
  data.labels = pred;
  ModelWalk walk(m, data, MetricKind::Acc);
  CHECK(walk.reset() == 1.0);
  std::vector<std::size_t> order(m.neuron_count());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), std::mt19937_64(9));
  std::vector<NeuronId> dead;
  for (std::size_t i = 0; i < 40; ++i) {
    const double incremental = walk.prune(order[i]);
    dead.push_back(m.neuron(order[i]));
    CHECK(incremental == accuracy(apply_prune_mask(m, dead), data));
  }
  CHECK(walk.reset() == 1.0);

  ModelWalk asr(m, data, MetricKind::Asr, 3);
  std::size_t hits = static_cast<std::size_t>(std::count(pred.begin(), pred.end(), 3));
  CHECK(asr.reset() == static_cast<double>(hits) / 40.0);
  CHECK_THROWS_AS(ModelWalk(m, data, MetricKind::Asr, 10), InvalidArgument);
}
