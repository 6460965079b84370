#include "shapprune/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include "shapprune/checkpoint.hpp"
#include "shapprune/errors.hpp"
#include "shapprune/image_io.hpp"

namespace shapprune {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Datasets {
  LabeledSet train;
  LabeledSet test;
};

Datasets load_data(const PipelineConfig& c) {
  if (c.data.source == DataConfig::Source::Synthetic)
    return {make_synthetic_dataset(c.data.train), make_synthetic_dataset(c.data.test)};
  return {read_idx_dataset(c.data.train_images, c.data.train_labels),
          read_idx_dataset(c.data.test_images, c.data.test_labels)};
}

LabeledSet load_test(const PipelineConfig& c) {
  if (c.data.source == DataConfig::Source::Synthetic) return make_synthetic_dataset(c.data.test);
  return read_idx_dataset(c.data.test_images, c.data.test_labels);
}

Trigger ground_truth_trigger(const PipelineConfig& c, const Shape& image_shape) {
  return make_patch_trigger(image_shape, c.attack.patch, c.attack.target_class, c.attack.trigger_seed);
}

// Defender images and the held-out evaluation split.
struct Split {
  LabeledSet defender;
  LabeledSet evaluation;
  LabeledSet triggered;  // evaluation with the ground-truth trigger, target class excluded
};

Split make_split(const PipelineConfig& c, const RunLayout& layout, bool need_defender = true) {
  const LabeledSet test = load_test(c);
  Split s;
  if (c.datafree) {
    if (need_defender) s.defender = read_idx_dataset(layout.recovered_images(), layout.recovered_labels());
    s.evaluation = test;
  } else {
    auto fs = few_shot_split(test, c.data.classes, c.defender_per_class, c.defender_seed);
    s.defender = std::move(fs.defender);
    s.evaluation = std::move(fs.evaluation);
  }
  const Trigger gt = ground_truth_trigger(c, test.image_shape());
  s.triggered = triggered_copy(s.evaluation, gt.mask, gt.pattern, gt.target_class);
  return s;
}

struct Rates {
  double acc = 0.0;
  double asr = 0.0;
};

Rates rates(const Model& model, const Split& split, int target) {
  return {accuracy(model, split.evaluation), attack_success_rate(model, split.triggered, target)};
}

json neurons_json(const std::vector<NeuronId>& ids) {
  json out = json::array();
  for (const auto& id : ids) out.push_back({{"layer", id.layer}, {"channel", id.channel}});
  return out;
}

json config_echo(const PipelineConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return j;
}

std::string relative_name(const RunLayout& layout, const std::filesystem::path& p) {
  const auto rel = p.lexically_relative(layout.root);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return p.generic_string();
}

json seeds_json(const PipelineConfig& c) {
  return {{"data_train", c.data.train.seed}, {"data_test", c.data.test.seed},
          {"trigger", c.attack.trigger_seed}, {"poison", c.attack.poison_seed},
          {"model", c.attack.model_seed},     {"train", c.attack.train.seed},
          {"defender", c.defender_seed},      {"reverse", c.reverse.seed},
          {"shapley", c.shapley.seed},        {"recovery", c.recovery.seed},
          {"finetune", c.finetune.seed}};
}

// JSON artifacts are hashed without their timing fields so reruns hash alike.
std::string artifact_sha256(const std::filesystem::path& p) {
  if (p.extension() == ".json") return sha256_hex(strip_timing(read_json(p)).dump());
  return file_sha256(p);
}

void write_manifest(const PipelineConfig& c, const RunLayout& layout, const std::string& stage,
                    const std::vector<std::filesystem::path>& inputs, const std::vector<std::filesystem::path>& outputs,
                    double seconds) {
  json in = json::object(), out = json::object();
  for (const auto& p : inputs) in[relative_name(layout, p)] = artifact_sha256(p);
  for (const auto& p : outputs) out[relative_name(layout, p)] = artifact_sha256(p);
  json m{{"stage", stage},
         {"tool", "shapprune"},
         {"version", kToolVersion},
         {"checkpoint_format", kCheckpointVersion},
         {"compiler", __VERSION__},
         {"config_sha256", config_hash(c)},
         {"seeds", seeds_json(c)},
         {"inputs", in},
         {"outputs", out},
         {"timing", {{"seconds", seconds}}}};
  write_json(layout.dir(stage) / "manifest.json", m);
}

std::filesystem::path checkpoint_path(const RunLayout& layout, const StageOptions& o) {
  return o.checkpoint.value_or(layout.checkpoint());
}

// Runs a stage body, tagging every failure with the stage name.
template <class F>
int run_stage(const std::string& stage, F&& body) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

ReverseAll read_triggers(const std::filesystem::path& path) {
  const json j = read_json(path);
  ReverseAll all;
  try {
    for (const auto& t : j.at("triggers")) all.triggers.push_back(trigger_from_json(t));
    for (const auto& f : j.at("failures"))
      all.failures.push_back({f.at("class").get<int>(), f.at("message").get<std::string>()});
  } catch (const json::exception& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
  return all;
}

json epochs_json(const std::vector<EpochStats>& epochs) {
  json out = json::array();
  for (const auto& e : epochs)
    out.push_back({{"epoch", e.epoch}, {"loss", e.mean_loss}, {"train_accuracy", e.train_accuracy}});
  return out;
}

}  // namespace

json to_json(const TriggerSpec& t) {
  return {{"class", t.target_class},
          {"l1_norm", t.l1_norm},
          {"iterations", t.loss_trace.size()},
          {"best_iteration", t.best_iteration},
          {"best_objective", t.best_objective},
          {"final_objective", t.loss_trace.empty() ? 0.0 : t.loss_trace.back()},
          {"mask_shape", t.mask.shape()},
          {"pattern_shape", t.pattern.shape()},
          {"mask", t.mask.storage()},
          {"pattern", t.pattern.storage()}};
}

TriggerSpec trigger_from_json(const json& j) {
  try {
    TriggerSpec t;
    t.target_class = j.at("class").get<int>();
    t.mask = Tensor(j.at("mask_shape").get<Shape>(), j.at("mask").get<std::vector<float>>());
    t.pattern = Tensor(j.at("pattern_shape").get<Shape>(), j.at("pattern").get<std::vector<float>>());
    t.l1_norm = mask_l1(t.mask);
    t.best_iteration = j.at("best_iteration").get<std::size_t>();
    t.best_objective = j.at("best_objective").get<double>();
    return t;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("malformed trigger record: ") + e.what());
  }
}

int cmd_attack(const PipelineConfig& c, const StageOptions&) {
  return run_stage("attack", [&] {
    const auto t0 = Clock::now();
    const RunLayout layout{c.output_dir};
    std::filesystem::create_directories(layout.dir("attack"));
    const Datasets data = load_data(c);
    const Trigger trigger = ground_truth_trigger(c, data.train.image_shape());

    LabeledSet training = data.train;
    std::vector<std::size_t> poisoned;
    if (c.attack.poison) {
      PoisonedData pd = poison_dataset(data.train, data.test, {trigger, c.attack.injection_ratio, c.attack.poison_seed});
      training = std::move(pd.train);
      poisoned = std::move(pd.poisoned_indices);
    }
    std::vector<EpochStats> epochs;
    Model model = make_reference_model(data.train.image_shape(), c.data.classes, c.attack.model_seed);
    model = train_sgd(std::move(model), training, c.attack.train, [&](const EpochStats& e) { epochs.push_back(e); });

    const LabeledSet triggered = triggered_copy(data.test, trigger.mask, trigger.pattern, trigger.target_class);
    const auto ckpt = layout.checkpoint();
    save_checkpoint(model, ckpt);
    const auto mask_file = layout.dir("attack") / "trigger_mask.pgm";
    const auto pattern_file = layout.dir("attack") / "trigger_pattern.ppm";
    write_pgm(mask_file, trigger.mask);
    write_image(pattern_file, trigger.pattern);
    const auto report_file = layout.dir("attack") / "attack.json";
    write_json(report_file, {{"poison", c.attack.poison},
                             {"target_class", c.attack.target_class},
                             {"train_size", training.size()},
                             {"poisoned_count", poisoned.size()},
                             {"poisoned_indices", poisoned},
                             {"test_acc", accuracy(model, data.test)},
                             {"test_asr", attack_success_rate(model, triggered, trigger.target_class)},
                             {"neuron_count", model.neuron_count()},
                             {"epochs", epochs_json(epochs)},
                             {"config", config_echo(c)}});
    write_manifest(c, layout, "attack", {}, {ckpt, mask_file, pattern_file, report_file}, seconds_since(t0));
    return int{kExitOk};
  });
}

int cmd_reverse(const PipelineConfig& c, const StageOptions& o) {
  return run_stage("reverse", [&] {
    const auto t0 = Clock::now();
    const RunLayout layout{c.output_dir};
    const auto dir = layout.dir("reverse");
    std::filesystem::create_directories(dir);
    const auto ckpt = checkpoint_path(layout, o);
    const Model model = load_checkpoint(ckpt);
    std::vector<std::filesystem::path> outputs;

    LabeledSet defender;
    if (c.datafree) {
      const Recovery rec = recover_images(model, c.recovery);
      write_idx_dataset(layout.recovered_images(), layout.recovered_labels(), rec.images);
      outputs.push_back(layout.recovered_images());
      outputs.push_back(layout.recovered_labels());
      std::filesystem::create_directories(dir / "recovered");
      json images = json::array();
      for (std::size_t i = 0; i < rec.images.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof name, "image_%03zu_label_%d.%s", i, rec.images.labels[i],
                      rec.images.images.dim(1) == 3 ? "ppm" : "pgm");
        const Tensor img(rec.images.image_shape(),
                         std::vector<float>(rec.images.images.row(i).begin(), rec.images.images.row(i).end()));
        write_image(dir / "recovered" / name, img);
        images.push_back({{"file", std::string("recovered/") + name}, {"label", rec.images.labels[i]}});
      }
      const auto& f = rec.final_loss;
      const auto manifest = dir / "recovery.json";
      write_json(manifest, {{"images", images},
                            {"final_losses", {{"total", f.total}, {"ce", f.ce}, {"bn", f.bn}, {"prior", f.prior}}},
                            {"iterations", rec.trace.size()},
                            {"config", to_json(c.recovery)}});
      outputs.push_back(manifest);
      defender = rec.images;
    } else {
      defender = make_split(c, layout).defender;
    }

    const ReverseAll all = reverse_all(model, defender.images, c.reverse);
    json triggers = json::array(), failures = json::array();
    for (const auto& t : all.triggers) {
      triggers.push_back(to_json(t));
      const auto m = dir / ("class_" + std::to_string(t.target_class) + "_mask.pgm");
      const auto p = dir / ("class_" + std::to_string(t.target_class) + "_pattern." +
                            (t.pattern.dim(0) == 3 ? "ppm" : "pgm"));
      write_pgm(m, t.mask);
      write_image(p, t.pattern);
      outputs.push_back(m);
      outputs.push_back(p);
    }
    for (const auto& f : all.failures) failures.push_back({{"class", f.target_class}, {"message", f.message}});
    write_json(layout.triggers(), {{"triggers", triggers}, {"failures", failures}, {"config", to_json(c.reverse)}});
    outputs.push_back(layout.triggers());
    write_manifest(c, layout, "reverse", {ckpt}, outputs, seconds_since(t0));
    if (!all.complete()) {
      std::string msg = "trigger reverse failed for";
      for (const auto& f : all.failures) msg += " class " + std::to_string(f.target_class) + " (" + f.message + ")";
      throw NumericError(msg);
    }
    return int{kExitOk};
  });
}

int cmd_detect(const PipelineConfig& c, const StageOptions&) {
  return run_stage("detect", [&] {
    const auto t0 = Clock::now();
    const RunLayout layout{c.output_dir};
    std::filesystem::create_directories(layout.dir("detect"));
    const ReverseAll all = read_triggers(layout.triggers());
    if (!all.complete()) throw InvalidArgument("trigger set is incomplete; rerun reverse");
    const DetectionReport report = detect(all.norms(), c.p);
    write_json(layout.detection(), to_json(report));
    if (report.warning) std::cerr << "[detect] warning: " << *report.warning << '\n';
    write_manifest(c, layout, "detect", {layout.triggers()}, {layout.detection()}, seconds_since(t0));
    return int{kExitOk};
  });
}

int cmd_shapley(const PipelineConfig& c, const StageOptions& o) {
  return run_stage("shapley", [&] {
    const auto t0 = Clock::now();
    const RunLayout layout{c.output_dir};
    std::filesystem::create_directories(layout.dir("shapley"));
    const auto ckpt = checkpoint_path(layout, o);
    const Model model = load_checkpoint(ckpt);
    const DetectionReport report = detection_from_json(read_json(layout.detection()));
    const auto target = choose_target(report, o.force);
    if (!target) {
      std::cerr << "[shapley] detection verdict is clean; nothing to estimate (use --force to override)\n";
      return int{kExitOk};
    }
    const ReverseAll all = read_triggers(layout.triggers());
    const TriggerSpec& trigger = all.triggers.at(static_cast<std::size_t>(*target));
    const LabeledSet defender = make_split(c, layout).defender;
    const ShapleyConfig resolved = resolve_shapley(c.shapley, model);
    const Selector selector = c.effective_selector();
    const ShapleyTables tables = shapley_stage(model, defender, trigger, resolved, selector);

    std::vector<std::filesystem::path> outputs;
    auto emit = [&](const ShapleyTable& t) {
      json j = to_json(t);
      j["target_class"] = *target;
      j["config"] = to_json(resolved);
      write_json(layout.table(t.metric), j);
      outputs.push_back(layout.table(t.metric));
    };
    emit(tables.asr);
    if (tables.acc) emit(*tables.acc);
    std::vector<std::filesystem::path> inputs{ckpt, layout.triggers(), layout.detection()};
    if (c.datafree) inputs.insert(inputs.end(), {layout.recovered_images(), layout.recovered_labels()});
    write_manifest(c, layout, "shapley", inputs, outputs, seconds_since(t0));
    return int{kExitOk};
  });
}

int cmd_mitigate(const PipelineConfig& c, const StageOptions& o) {
  return run_stage("mitigate", [&] {
    const auto t0 = Clock::now();
    const RunLayout layout{c.output_dir};
    const auto dir = layout.dir("mitigate");
    std::filesystem::create_directories(dir);
    const auto ckpt = checkpoint_path(layout, o);
    const Model model = load_checkpoint(ckpt);
    const DetectionReport report = detection_from_json(read_json(layout.detection()));
    const auto target = choose_target(report, o.force);
    const Split split = make_split(c, layout, target.has_value());
    const Rates before = rates(model, split, c.attack.target_class);
    const Selector selector = c.effective_selector();

    json r{{"verdict", report.poisoned() ? "poisoned" : "clean"},
           {"forced", o.force && !report.poisoned()},
           {"selector", selector == Selector::TopK ? "top_k" : "mixture"},
           {"neuron_count", model.neuron_count()},
           {"acc_before", before.acc},
           {"asr_before", before.asr},
           {"evaluation_size", split.evaluation.size()},
           {"detection", to_json(report)},
           {"config", config_echo(c)},
           {"config_sha256", config_hash(c)}};
    std::vector<std::filesystem::path> inputs{ckpt, layout.detection()}, outputs;

    if (!target) {
      r["mitigated"] = false;
      r["target_class"] = nullptr;
      r["pruned"] = json::array();
      r["pruned_fraction"] = 0.0;
      r["shortfall"] = false;
      r["acc_pruned"] = before.acc;
      r["asr_pruned"] = before.asr;
      r["acc_after"] = before.acc;
      r["asr_after"] = before.asr;
      r["timing"] = {{"mitigate_s", seconds_since(t0)}};
      write_json(layout.report(), r);
      outputs.push_back(layout.report());
      write_manifest(c, layout, "mitigate", inputs, outputs, seconds_since(t0));
      return int{kExitOk};
    }

    ShapleyTables tables{shapley_table_from_json(read_json(layout.table(MetricKind::Asr))), std::nullopt};
    inputs.push_back(layout.table(MetricKind::Asr));
    if (selector == Selector::Mixture) {
      tables.acc = shapley_table_from_json(read_json(layout.table(MetricKind::Acc)));
      inputs.push_back(layout.table(MetricKind::Acc));
    }
    if (c.datafree) inputs.insert(inputs.end(), {layout.recovered_images(), layout.recovered_labels()});
    const ShapleyConfig resolved = resolve_shapley(c.shapley, model);
    // Recovered images of the flagged class carry the trigger; fine-tuning on them re-teaches the backdoor.
    const LabeledSet tune = c.datafree ? without_class(split.defender, *target) : split.defender;
    const Mitigation m = mitigate_stage(model, tune, select_neurons(tables, resolved, selector), c.finetune);
    const Rates pruned = rates(m.pruned, split, c.attack.target_class);
    const Rates after = rates(m.finetuned, split, c.attack.target_class);

    const auto pruned_ckpt = dir / "model_pruned.ckpt", final_ckpt = dir / "model_mitigated.ckpt";
    save_checkpoint(m.pruned, pruned_ckpt);
    save_checkpoint(m.finetuned, final_ckpt);
    outputs.insert(outputs.end(), {pruned_ckpt, final_ckpt});
    r["mitigated"] = true;
    r["target_class"] = *target;
    r["pruned"] = neurons_json(m.selection.neurons);
    r["pruned_fraction"] =
        static_cast<double>(m.selection.neurons.size()) / static_cast<double>(model.neuron_count());
    r["shortfall"] = m.selection.shortfall;
    r["acc_pruned"] = pruned.acc;
    r["asr_pruned"] = pruned.asr;
    r["acc_after"] = after.acc;
    r["asr_after"] = after.asr;

    if (o.plot) {
      const auto csv_path = dir / "pruning_curve.csv";
      std::ofstream csv(csv_path, std::ios::trunc);
      if (!csv) throw IoError("cannot open " + csv_path.string());
      csv << "pruned,acc,asr\n";
      const auto ranked = tables.asr.ranking();
      const std::size_t steps = std::min(c.plot_neurons, ranked.size());
      Model curve = model;
      for (std::size_t k = 0; k <= steps; ++k) {
        if (k > 0) curve.set_alive(model.neuron_index(tables.asr.players[ranked[k - 1]]), false);
        const Rates rk = rates(curve, split, c.attack.target_class);
        csv << k << ',' << rk.acc << ',' << rk.asr << '\n';
      }
      csv.close();
      outputs.push_back(csv_path);
    }
    r["timing"] = {{"mitigate_s", seconds_since(t0)}};
    write_json(layout.report(), r);
    outputs.push_back(layout.report());
    write_manifest(c, layout, "mitigate", inputs, outputs, seconds_since(t0));
    return int{kExitMitigated};
  });
}

int cmd_full(const PipelineConfig& c, const StageOptions& o) {
  const RunLayout layout{c.output_dir};
  json timing = json::object();
  auto timed = [&](const char* name, auto&& fn) {
    const auto t0 = Clock::now();
    const int code = fn(c, o);
    timing[std::string(name) + "_s"] = seconds_since(t0);
    return code;
  };
  if (!o.checkpoint) timed("attack", cmd_attack);
  timed("reverse", cmd_reverse);
  timed("detect", cmd_detect);
  const DetectionReport report = detection_from_json(read_json(layout.detection()));
  if (choose_target(report, o.force)) timed("shapley", cmd_shapley);
  const int code = timed("mitigate", cmd_mitigate);

  json r = read_json(layout.report());
  r["timing"] = timing;
  write_json(layout.report(), r);
  write_json(layout.root / "manifest.json", {{"stage", "full"},
                                             {"tool", "shapprune"},
                                             {"version", kToolVersion},
                                             {"config_sha256", config_hash(c)},
                                             {"seeds", seeds_json(c)},
                                             {"exit_code", code},
                                             {"report_sha256", artifact_sha256(layout.report())},
                                             {"timing", timing}});
  return code;
}

}  // namespace shapprune
