#include "shapprune/defense.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "shapprune/attack.hpp"
#include "shapprune/errors.hpp"

namespace shapprune {

std::size_t default_top_k(std::size_t neuron_count) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(0.01 * static_cast<double>(neuron_count))));
}

TrainConfig default_finetune_config() {
  TrainConfig c;
  c.learning_rate = 0.01f;
  c.epochs = 20;
  c.batch_size = 32;
  c.momentum = 0.9f;
  c.batchnorm = BatchNormUpdate::Frozen;
  return c;
}

ShapleyConfig resolve_shapley(const ShapleyConfig& config, const Model& model) {
  ShapleyConfig c = config;
  const std::size_t n = model.neuron_count();
  if (c.top_k == 0) c.top_k = default_top_k(n);
  if (c.bottom_l == 0) c.bottom_l = (n + 1) / 2;
  validate(c, n);
  return c;
}

std::optional<int> choose_target(const DetectionReport& report, bool force) {
  if (auto t = report.primary_target()) return static_cast<int>(*t);
  if (!force || report.norms.empty()) return std::nullopt;
  const auto it = std::min_element(report.norms.begin(), report.norms.end());
  return static_cast<int>(it - report.norms.begin());
}

LabeledSet without_class(const LabeledSet& set, int label) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < set.size(); ++i)
    if (set.labels[i] != label) rows.push_back(i);
  return set.subset(rows);
}

ShapleyTables shapley_stage(const Model& model, const LabeledSet& defender, const TriggerSpec& trigger,
                            const ShapleyConfig& config, Selector selector) {
  const ShapleyConfig c = resolve_shapley(config, model);
  const LabeledSet triggered = triggered_copy(defender, trigger.mask, trigger.pattern, trigger.target_class);
  ShapleyTables out{estimate_shapley(model, triggered, MetricKind::Asr, trigger.target_class, c), std::nullopt};
  if (selector == Selector::Mixture) {
    // Target-class images are left out: recovered ones tend to carry the
    // backdoor shortcut, which would make backdoor neurons look accuracy-critical.
    out.acc = estimate_shapley(model, without_class(defender, trigger.target_class), MetricKind::Acc,
                               trigger.target_class, c);
  }
  return out;
}

Selection select_neurons(const ShapleyTables& tables, const ShapleyConfig& resolved, Selector selector) {
  if (selector == Selector::TopK) return {top_k(tables.asr, resolved.top_k), false};
  if (!tables.acc) throw InvalidArgument("mixture selection needs an Acc Shapley table");
  const MixtureSelection m = mixture_select(tables.asr, *tables.acc, resolved.top_k, resolved.bottom_l);
  return {m.neurons, m.shortfall};
}

Mitigation mitigate_stage(const Model& model, const LabeledSet& defender, Selection selection,
                          const TrainConfig& finetune) {
  Mitigation m;
  m.pruned = apply_prune_mask(model, selection.neurons);
  m.finetuned = train_sgd(m.pruned, defender, finetune);
  m.selection = std::move(selection);
  return m;
}

DefenseOutcome defend(const Model& model, const LabeledSet& defender, const DefenseConfig& config) {
  validate(defender);
  DefenseOutcome out;
  out.triggers = reverse_all(model, defender.images, config.reverse);
  if (!out.triggers.complete()) {
    std::string msg = "trigger reverse failed for";
    for (const auto& f : out.triggers.failures) msg += " class " + std::to_string(f.target_class) + " (" + f.message + ")";
    throw NumericError(msg);
  }
  out.detection = detect(out.triggers.norms(), config.p);
  out.target = choose_target(out.detection, config.force);
  if (!out.target) return out;
  const TriggerSpec& trigger = out.triggers.triggers.at(static_cast<std::size_t>(*out.target));
  const ShapleyConfig resolved = resolve_shapley(config.shapley, model);
  out.tables = shapley_stage(model, defender, trigger, resolved, config.selector);
  const LabeledSet tune = config.tune_without_target ? without_class(defender, *out.target) : defender;
  out.mitigation = mitigate_stage(model, tune, select_neurons(*out.tables, resolved, config.selector), config.finetune);
  return out;
}

}  // namespace shapprune
