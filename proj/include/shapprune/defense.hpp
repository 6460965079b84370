#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "shapprune/detect.hpp"
#include "shapprune/model.hpp"
#include "shapprune/shapley.hpp"
#include "shapprune/train.hpp"
#include "shapprune/trigger_reverse.hpp"

namespace shapprune {

/// ceil(0.01 * n), at least 1.
std::size_t default_top_k(std::size_t neuron_count);

enum class Selector { TopK, Mixture };

/// Fine-tuning defaults for the defender's handful of images: batchnorm
/// running statistics stay frozen.
TrainConfig default_finetune_config();

struct DefenseConfig {
  ReverseConfig reverse;
  double p = 0.99;
  ShapleyConfig shapley;  // top_k == 0 resolves to default_top_k(n)
  Selector selector = Selector::TopK;
  TrainConfig finetune = default_finetune_config();
  bool force = false;  // mitigate even when detection says clean
  /// Leave the target class out of fine-tuning. Recovered images of that
  /// class carry the trigger, so data-free runs set this.
  bool tune_without_target = false;
};

/// Copy of `config` with top_k and bottom_l resolved for `model`.
ShapleyConfig resolve_shapley(const ShapleyConfig& config, const Model& model);

/// Flagged class with the smallest norm; when nothing is flagged, the
/// smallest-norm class if `force`, otherwise nullopt.
std::optional<int> choose_target(const DetectionReport& report, bool force);

struct ShapleyTables {
  ShapleyTable asr;
  std::optional<ShapleyTable> acc;  // mixture selection only
};

LabeledSet without_class(const LabeledSet& set, int label);

/// ASR on the defender images (target class excluded) carrying the reversed
/// trigger; with the mixture selector also Acc on the clean non-target defender images.
ShapleyTables shapley_stage(const Model& model, const LabeledSet& defender, const TriggerSpec& trigger,
                            const ShapleyConfig& config, Selector selector);

struct Selection {
  std::vector<NeuronId> neurons;
  bool shortfall = false;
};

Selection select_neurons(const ShapleyTables& tables, const ShapleyConfig& resolved, Selector selector);

struct Mitigation {
  Selection selection;
  Model pruned;
  Model finetuned;
};

/// Prunes the selection and fine-tunes on the defender images only.
Mitigation mitigate_stage(const Model& model, const LabeledSet& defender, Selection selection,
                          const TrainConfig& finetune);

struct DefenseOutcome {
  ReverseAll triggers;
  DetectionReport detection;
  std::optional<int> target;
  std::optional<ShapleyTables> tables;
  std::optional<Mitigation> mitigation;  // absent when nothing was done
};

/// Reverse, detect, estimate, select, prune, fine-tune; uses only `defender`.
DefenseOutcome defend(const Model& model, const LabeledSet& defender, const DefenseConfig& config);

}  // namespace shapprune
