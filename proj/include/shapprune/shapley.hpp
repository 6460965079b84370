#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "shapprune/model.hpp"
#include "shapprune/train.hpp"

namespace shapprune {

/// A cooperative game over players 0..n-1; `alive[i] != 0` marks members.
class CoalitionGame {
 public:
  virtual ~CoalitionGame() = default;
  virtual std::size_t player_count() const = 0;
  virtual double value(std::span<const std::uint8_t> alive) const = 0;
};

/// Game given by a callable.
class FunctionGame final : public CoalitionGame {
 public:
  using Fn = std::function<double(std::span<const std::uint8_t>)>;
  FunctionGame(std::size_t n, Fn fn) : n_(n), fn_(std::move(fn)) {}
  std::size_t player_count() const override { return n_; }
  double value(std::span<const std::uint8_t> alive) const override { return fn_(alive); }

 private:
  std::size_t n_;
  Fn fn_;
};

inline constexpr std::size_t kExactShapleyMaxPlayers = 12;

/// phi_i = 1/n * sum over C not containing i of c!(n-c-1)!/(n-1)! * (m(C+i) - m(C)).
std::vector<double> exact_shapley(const CoalitionGame& game);

/// Sequential pruning session: starts from the full coalition and removes
/// one player at a time.
class PruningWalk {
 public:
  virtual ~PruningWalk() = default;
  virtual std::size_t player_count() const = 0;
  /// Restores the full coalition and returns its metric.
  virtual double reset() = 0;
  /// Removes `player` from the current coalition and returns the new metric.
  virtual double prune(std::size_t player) = 0;
};

class GameWalk final : public PruningWalk {
 public:
  explicit GameWalk(const CoalitionGame& game) : game_(game), alive_(game.player_count(), 1) {}
  std::size_t player_count() const override { return game_.player_count(); }
  double reset() override;
  double prune(std::size_t player) override;

 private:
  const CoalitionGame& game_;
  std::vector<std::uint8_t> alive_;
};

enum class MetricKind { Asr, Acc };
const char* metric_name(MetricKind kind);
MetricKind metric_from_name(const std::string& name);

/// Model metric under cumulative neuron pruning. Every layer output is cached;
/// pruning a neuron zeroes its channel at the mask site and reruns only the
/// layers after it. Players are flat neuron indices.
class ModelWalk final : public PruningWalk {
 public:
  /// Acc: fraction of `data` classified as its label. Asr: fraction of `data`
  /// classified as `target` (data should hold triggered non-target images).
  ModelWalk(const Model& model, const LabeledSet& data, MetricKind kind, int target = 0);
  std::size_t player_count() const override { return base_.neuron_count(); }
  double reset() override;
  double prune(std::size_t player) override;

 private:
  double score(const Tensor& logits) const;

  Model base_;
  Model work_;
  LabeledSet data_;
  MetricKind kind_;
  int target_;
  std::vector<Tensor> base_outputs_;
  std::vector<Tensor> outputs_;
  double base_score_ = 0.0;
};

/// Running per-player sums of marginal contributions.
struct ShapleyTable {
  MetricKind metric = MetricKind::Asr;
  std::vector<NeuronId> players;
  std::vector<double> sum;
  std::vector<std::uint64_t> count;
  std::size_t iterations = 0;  // completed
  std::vector<std::size_t> aborted;  // 1-based iterations whose walk failed

  ShapleyTable() = default;
  ShapleyTable(MetricKind kind, std::vector<NeuronId> ids);
  std::size_t size() const noexcept { return players.size(); }
  bool visited(std::size_t i) const { return count.at(i) > 0; }
  /// sum/count; throws InvalidArgument for an unvisited player.
  double estimate(std::size_t i) const;
  std::size_t visited_count() const;
  /// Visited players by estimate descending, ties by smaller NeuronId.
  std::vector<std::size_t> ranking() const;
};

/// Players 0..n-1 as NeuronId{0, i}, for games that are not models.
std::vector<NeuronId> plain_players(std::size_t n);

struct EpsilonStep {
  std::size_t after = 0;  // applies to iterations t > after
  double epsilon = 0.0;
};

struct PermutationPolicy {
  enum class Kind { Uniform, EpsilonGreedy } kind = Kind::EpsilonGreedy;
  std::size_t warmup_iters = 30;  // t <= warmup: uniform
  std::vector<EpsilonStep> epsilon{{30, 0.5}, {40, 0.3}};
  std::size_t top_group = 0;  // m_top; 0 means 2 * top_k

  double epsilon_at(std::size_t t) const;
  static PermutationPolicy uniform();
};

enum class DiscardMode {
  Discard,   // players after the stop get no sample
  ZeroFill,  // players after the stop get a zero sample
};

struct ShapleyConfig {
  std::size_t iterations = 50;
  double tau = 0.2;
  PermutationPolicy policy;
  DiscardMode discard = DiscardMode::Discard;
  std::uint64_t seed = 1;
  std::size_t top_k = 2;
  std::size_t bottom_l = 0;  // 0 means half the players (mixture selection)
};

void validate(const ShapleyConfig& config, std::size_t players);

/// t is 1-based. Uniform up to the warmup; afterwards the permutation is built
/// front to back, drawing from the unplaced members of the current top group
/// with probability 1 - epsilon(t), otherwise from the unplaced others.
std::vector<std::size_t> sample_permutation(const PermutationPolicy& policy, const ShapleyTable& table,
                                            std::size_t t, std::size_t top_group, std::mt19937_64& rng);

struct Sample {
  std::size_t player;
  double value;
};

/// Walks `order` from the full coalition and returns each walked player's
/// marginal m(before) - m(after). The walk stops once the metric is below tau;
/// in ZeroFill mode the remaining players get 0.
std::vector<Sample> walk_permutation(PruningWalk& walk, std::span<const std::size_t> order, double tau,
                                     DiscardMode mode);

/// Adds samples to the table; counts one completed iteration.
void commit(ShapleyTable& table, std::span<const Sample> samples);

using SampleObserver = std::function<void(std::size_t iteration, std::span<const Sample>)>;

/// R iterations of policy draw + walk. Iteration t uses an RNG seeded from
/// (seed, t). A walk that throws leaves the table untouched and is listed
/// in `aborted`.
ShapleyTable estimate_shapley(PruningWalk& walk, std::vector<NeuronId> players, MetricKind kind,
                              const ShapleyConfig& config, const SampleObserver& observer = {});

/// Model game convenience: ASR on triggered images or Acc on clean images.
ShapleyTable estimate_shapley(const Model& model, const LabeledSet& data, MetricKind kind, int target,
                              const ShapleyConfig& config, const SampleObserver& observer = {});

std::vector<NeuronId> top_k(const ShapleyTable& table, std::size_t k);

struct MixtureSelection {
  std::vector<NeuronId> neurons;  // ASR-rank order
  bool shortfall = false;         // fewer than k neurons survived the intersection
};

/// Visited neurons in both the ASR top-k and the Acc bottom-l.
MixtureSelection mixture_select(const ShapleyTable& asr, const ShapleyTable& acc, std::size_t k,
                                std::size_t bottom_l);

nlohmann::json to_json(const ShapleyTable& table);
nlohmann::json to_json(const ShapleyConfig& config);
ShapleyTable shapley_table_from_json(const nlohmann::json& j);
ShapleyConfig shapley_config_from_json(const nlohmann::json& j);

}  // namespace shapprune
