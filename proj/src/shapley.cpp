#include "shapprune/shapley.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "shapprune/errors.hpp"
#include "shapprune/rng.hpp"

namespace shapprune {

std::vector<double> exact_shapley(const CoalitionGame& game) {
  const std::size_t n = game.player_count();
  if (n == 0) throw InvalidArgument("game has no players");
  if (n > kExactShapleyMaxPlayers)
    throw InvalidArgument("exact Shapley enumeration supports at most " + std::to_string(kExactShapleyMaxPlayers) +
                          " players, got " + std::to_string(n));
  const std::size_t subsets = std::size_t{1} << n;
  std::vector<double> value(subsets);
  std::vector<std::uint8_t> alive(n);
  for (std::size_t s = 0; s < subsets; ++s) {
    for (std::size_t i = 0; i < n; ++i) alive[i] = (s >> i) & 1u;
    value[s] = game.value(alive);
  }
  std::vector<double> fact(n + 1, 1.0);
  for (std::size_t i = 1; i <= n; ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
  std::vector<double> weight(n);
  for (std::size_t c = 0; c < n; ++c) weight[c] = fact[c] * fact[n - c - 1] / fact[n - 1];

  std::vector<double> phi(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t bit = std::size_t{1} << i;
    double total = 0.0;
    for (std::size_t s = 0; s < subsets; ++s) {
      if (s & bit) continue;
      total += weight[std::popcount(s)] * (value[s | bit] - value[s]);
    }
    phi[i] = total / static_cast<double>(n);
  }
  return phi;
}

double GameWalk::reset() {
  std::fill(alive_.begin(), alive_.end(), 1);
  return game_.value(alive_);
}

double GameWalk::prune(std::size_t player) {
  alive_.at(player) = 0;
  return game_.value(alive_);
}

const char* metric_name(MetricKind kind) { return kind == MetricKind::Asr ? "asr" : "acc"; }

MetricKind metric_from_name(const std::string& name) {
  if (name == "asr") return MetricKind::Asr;
  if (name == "acc") return MetricKind::Acc;
  throw InvalidArgument("unknown metric '" + name + "' (expected asr or acc)");
}

ModelWalk::ModelWalk(const Model& model, const LabeledSet& data, MetricKind kind, int target)
    : base_(model), work_(model), data_(data), kind_(kind), target_(target) {
  validate(data_);
  if (data_.empty()) throw InvalidArgument("metric dataset is empty");
  if (target < 0 || static_cast<std::size_t>(target) >= model.class_count())
    throw InvalidArgument("target class outside the model's classes");
  base_outputs_.resize(model.layers().size());
  const Tensor logits = forward_from(base_, 0, data_.images, &base_outputs_);
  base_score_ = score(logits);
}

double ModelWalk::score(const Tensor& logits) const {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const auto row = logits.row(b);
    const auto pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    hits += kind_ == MetricKind::Asr ? pred == target_ : pred == data_.labels[b];
  }
  (void)k;
  return static_cast<double>(hits) / static_cast<double>(n);
}

double ModelWalk::reset() {
  work_.set_prune_mask(base_.prune_mask());
  outputs_ = base_outputs_;
  return base_score_;
}

double ModelWalk::prune(std::size_t player) {
  const NeuronId id = work_.neuron(player);
  work_.set_alive(player, false);
  const std::size_t site = work_.mask_site(id.layer);
  apply_mask_at(work_, site, outputs_[site]);
  if (site + 1 == work_.layers().size()) return score(outputs_[site]);
  return score(forward_from(work_, site + 1, outputs_[site], &outputs_));
}

ShapleyTable::ShapleyTable(MetricKind kind, std::vector<NeuronId> ids)
    : metric(kind), players(std::move(ids)), sum(players.size(), 0.0), count(players.size(), 0) {}

double ShapleyTable::estimate(std::size_t i) const {
  if (count.at(i) == 0) throw InvalidArgument("player " + std::to_string(i) + " was never visited");
  return sum[i] / static_cast<double>(count[i]);
}

std::size_t ShapleyTable::visited_count() const {
  return static_cast<std::size_t>(std::count_if(count.begin(), count.end(), [](auto c) { return c > 0; }));
}

std::vector<std::size_t> ShapleyTable::ranking() const {
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < size(); ++i)
    if (count[i] > 0) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ea = estimate(a), eb = estimate(b);
    if (ea != eb) return ea > eb;
    return players[a] < players[b];
  });
  return order;
}

std::vector<NeuronId> plain_players(std::size_t n) {
  std::vector<NeuronId> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = {0, i};
  return out;
}

double PermutationPolicy::epsilon_at(std::size_t t) const {
  double eps = 1.0;
  for (const auto& step : epsilon)
    if (t > step.after) eps = step.epsilon;
  return eps;
}

PermutationPolicy PermutationPolicy::uniform() {
  PermutationPolicy p;
  p.kind = Kind::Uniform;
  return p;
}

void validate(const ShapleyConfig& config, std::size_t players) {
  if (config.iterations == 0) throw InvalidArgument("Shapley estimation needs at least one iteration");
  if (!(config.tau >= 0.0 && config.tau <= 1.0)) throw InvalidArgument("discard threshold tau must lie in [0,1]");
  if (config.top_k == 0) throw InvalidArgument("top_k must be positive");
  if (config.top_k > players) throw InvalidArgument("top_k exceeds the player count");
  if (config.bottom_l > players) throw InvalidArgument("bottom_l exceeds the player count");
  const auto& p = config.policy;
  if (p.kind == PermutationPolicy::Kind::EpsilonGreedy) {
    if (p.warmup_iters == 0) throw InvalidArgument("epsilon-greedy warmup must be at least one iteration");
    if (p.top_group > players) throw InvalidArgument("top group larger than the player count");
    for (const auto& s : p.epsilon)
      if (!(s.epsilon >= 0.0 && s.epsilon <= 1.0)) throw InvalidArgument("epsilon must lie in [0,1]");
  }
}

std::vector<std::size_t> sample_permutation(const PermutationPolicy& policy, const ShapleyTable& table,
                                            std::size_t t, std::size_t top_group, std::mt19937_64& rng) {
  const std::size_t n = table.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (policy.kind == PermutationPolicy::Kind::Uniform || t <= policy.warmup_iters) {
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  std::vector<std::size_t> ranked = table.ranking();
  std::vector<std::uint8_t> in_rank(n, 0);
  for (auto i : ranked) in_rank[i] = 1;
  for (std::size_t i = 0; i < n; ++i)
    if (!in_rank[i]) ranked.push_back(i);
  const std::size_t m = std::min(top_group, n);
  std::vector<std::size_t> top(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(m));
  std::vector<std::size_t> others(ranked.begin() + static_cast<std::ptrdiff_t>(m), ranked.end());
  std::sort(top.begin(), top.end());
  std::sort(others.begin(), others.end());

  std::bernoulli_distribution exploit(1.0 - policy.epsilon_at(t));
  auto take = [&](std::vector<std::size_t>& group) {
    std::uniform_int_distribution<std::size_t> pick(0, group.size() - 1);
    const std::size_t j = pick(rng);
    const std::size_t player = group[j];
    group[j] = group.back();
    group.pop_back();
    return player;
  };
  order.clear();
  while (!top.empty() || !others.empty()) {
    if (others.empty() || (!top.empty() && exploit(rng))) {
      order.push_back(take(top));
    } else {
      order.push_back(take(others));
    }
  }
  return order;
}

std::vector<Sample> walk_permutation(PruningWalk& walk, std::span<const std::size_t> order, double tau,
                                     DiscardMode mode) {
  std::vector<Sample> samples;
  samples.reserve(order.size());
  double before = walk.reset();
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (before < tau) {
      if (mode == DiscardMode::ZeroFill)
        for (std::size_t r = k; r < order.size(); ++r) samples.push_back({order[r], 0.0});
      break;
    }
    const double after = walk.prune(order[k]);
    samples.push_back({order[k], before - after});
    before = after;
  }
  return samples;
}

void commit(ShapleyTable& table, std::span<const Sample> samples) {
  for (const auto& s : samples) {
    table.sum.at(s.player) += s.value;
    ++table.count[s.player];
  }
  ++table.iterations;
}

ShapleyTable estimate_shapley(PruningWalk& walk, std::vector<NeuronId> players, MetricKind kind,
                              const ShapleyConfig& config, const SampleObserver& observer) {
  const std::size_t n = walk.player_count();
  if (players.size() != n) throw InvalidArgument("player list does not match the game");
  validate(config, n);
  ShapleyTable table(kind, std::move(players));
  const std::size_t top_group = config.policy.top_group ? config.policy.top_group : std::min(n, 2 * config.top_k);
  for (std::size_t t = 1; t <= config.iterations; ++t) {
    std::mt19937_64 rng(derive_seed(config.seed, t));
    const auto order = sample_permutation(config.policy, table, t, top_group, rng);
    std::vector<Sample> samples;
    try {
      samples = walk_permutation(walk, order, config.tau, config.discard);
    } catch (const Error&) {
      table.aborted.push_back(t);
      continue;
    }
    commit(table, samples);
    if (observer) observer(t, samples);
  }
  return table;
}

ShapleyTable estimate_shapley(const Model& model, const LabeledSet& data, MetricKind kind, int target,
                              const ShapleyConfig& config, const SampleObserver& observer) {
  ModelWalk walk(model, data, kind, target);
  return estimate_shapley(walk, model.neurons(), kind, config, observer);
}

std::vector<NeuronId> top_k(const ShapleyTable& table, std::size_t k) {
  if (k == 0) throw InvalidArgument("k must be positive");
  const auto ranked = table.ranking();
  if (k > ranked.size())
    throw InvalidArgument("k = " + std::to_string(k) + " exceeds the " + std::to_string(ranked.size()) +
                          " visited players");
  std::vector<NeuronId> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back(table.players[ranked[i]]);
  return out;
}

MixtureSelection mixture_select(const ShapleyTable& asr, const ShapleyTable& acc, std::size_t k,
                                std::size_t bottom_l) {
  if (asr.players != acc.players) throw InvalidArgument("ASR and Acc tables cover different neurons");
  if (bottom_l == 0) throw InvalidArgument("bottom_l must be positive");
  const auto top = top_k(asr, k);
  auto acc_rank = acc.ranking();
  std::stable_sort(acc_rank.begin(), acc_rank.end(), [&](std::size_t a, std::size_t b) {
    const double ea = acc.estimate(a), eb = acc.estimate(b);
    if (ea != eb) return ea < eb;
    return acc.players[a] < acc.players[b];
  });
  if (acc_rank.size() > bottom_l) acc_rank.resize(bottom_l);
  std::vector<NeuronId> bottom;
  for (auto i : acc_rank) bottom.push_back(acc.players[i]);
  MixtureSelection out;
  for (const auto& id : top)
    if (std::find(bottom.begin(), bottom.end(), id) != bottom.end()) out.neurons.push_back(id);
  out.shortfall = out.neurons.size() < k;
  return out;
}

nlohmann::json to_json(const ShapleyTable& table) {
  nlohmann::json neurons = nlohmann::json::array();
  for (std::size_t i = 0; i < table.size(); ++i) {
    nlohmann::json e{{"layer", table.players[i].layer},
                     {"channel", table.players[i].channel},
                     {"sum", table.sum[i]},
                     {"count", table.count[i]}};
    e["estimate"] = table.count[i] ? nlohmann::json(table.estimate(i)) : nlohmann::json(nullptr);
    neurons.push_back(std::move(e));
  }
  return {{"metric", metric_name(table.metric)},
          {"iterations", table.iterations},
          {"aborted", table.aborted},
          {"visited", table.visited_count()},
          {"neurons", neurons}};
}

nlohmann::json to_json(const ShapleyConfig& c) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : c.policy.epsilon) steps.push_back({{"after", s.after}, {"epsilon", s.epsilon}});
  return {{"iterations", c.iterations},
          {"tau", c.tau},
          {"seed", c.seed},
          {"top_k", c.top_k},
          {"bottom_l", c.bottom_l},
          {"discard", c.discard == DiscardMode::Discard ? "discard" : "zero_fill"},
          {"policy",
           {{"kind", c.policy.kind == PermutationPolicy::Kind::Uniform ? "uniform" : "epsilon_greedy"},
            {"warmup_iters", c.policy.warmup_iters},
            {"epsilon", steps},
            {"top_group", c.policy.top_group}}}};
}

ShapleyTable shapley_table_from_json(const nlohmann::json& j) {
  try {
    std::vector<NeuronId> ids;
    for (const auto& e : j.at("neurons")) ids.push_back({e.at("layer").get<std::size_t>(), e.at("channel").get<std::size_t>()});
    ShapleyTable t(metric_from_name(j.at("metric").get<std::string>()), std::move(ids));
    std::size_t i = 0;
    for (const auto& e : j.at("neurons")) {
      t.sum[i] = e.at("sum").get<double>();
      t.count[i] = e.at("count").get<std::uint64_t>();
      ++i;
    }
    t.iterations = j.at("iterations").get<std::size_t>();
    t.aborted = j.value("aborted", std::vector<std::size_t>{});
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed Shapley table: ") + e.what());
  }
}

ShapleyConfig shapley_config_from_json(const nlohmann::json& j) {
  ShapleyConfig c;
  try {
    c.iterations = j.value("iterations", c.iterations);
    c.tau = j.value("tau", c.tau);
    c.seed = j.value("seed", c.seed);
    c.top_k = j.value("top_k", c.top_k);
    c.bottom_l = j.value("bottom_l", c.bottom_l);
    const auto discard = j.value("discard", std::string("discard"));
    if (discard == "discard") {
      c.discard = DiscardMode::Discard;
    } else if (discard == "zero_fill") {
      c.discard = DiscardMode::ZeroFill;
    } else {
      throw InvalidArgument("discard must be 'discard' or 'zero_fill'");
    }
    if (j.contains("policy")) {
      const auto& p = j["policy"];
      const auto kind = p.value("kind", std::string("epsilon_greedy"));
      if (kind == "uniform") {
        c.policy.kind = PermutationPolicy::Kind::Uniform;
      } else if (kind == "epsilon_greedy") {
        c.policy.kind = PermutationPolicy::Kind::EpsilonGreedy;
      } else {
        throw InvalidArgument("policy kind must be 'uniform' or 'epsilon_greedy'");
      }
      c.policy.warmup_iters = p.value("warmup_iters", c.policy.warmup_iters);
      c.policy.top_group = p.value("top_group", c.policy.top_group);
      if (p.contains("epsilon")) {
        c.policy.epsilon.clear();
        for (const auto& s : p["epsilon"])
          c.policy.epsilon.push_back({s.at("after").get<std::size_t>(), s.at("epsilon").get<double>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("malformed Shapley config: ") + e.what());
  }
  return c;
}

}  // namespace shapprune
