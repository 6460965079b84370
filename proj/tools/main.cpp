#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "shapprune/errors.hpp"
#include "shapprune/kernels.hpp"
#include "shapprune/pipeline.hpp"

using namespace shapprune;

namespace {

struct Overrides {
  std::optional<double> p, lambda, tau;
  std::optional<std::size_t> rounds, top_k;
  std::optional<std::string> budget, selector;
};

void apply(PipelineConfig& c, const Overrides& o) {
  if (o.p) c.p = *o.p;
  if (o.lambda) c.reverse.lambda = static_cast<float>(*o.lambda);
  if (o.tau) c.shapley.tau = *o.tau;
  if (o.rounds) c.shapley.iterations = *o.rounds;
  if (o.top_k) c.shapley.top_k = *o.top_k;
  if (o.budget) {
    if (*o.budget == "datafree") {
      c.datafree = true;
    } else {
      std::size_t pos = 0;
      const auto n = std::stoul(*o.budget, &pos);
      if (pos != o.budget->size() || n == 0) throw InvalidArgument("--budget must be a positive count or 'datafree'");
      c.datafree = false;
      c.defender_per_class = n;
    }
  }
  if (o.selector) c.selector = *o.selector == "mixture" ? Selector::Mixture : Selector::TopK;
  // Round-trip through JSON so overrides get the same validation as the file.
  c = config_from_json(to_json(c));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot backdoor detection and Shapley pruning for small CNNs"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(kToolVersion));

  std::string config_path, out_dir, checkpoint;
  int jobs = 0;
  StageOptions opts;
  Overrides ov;
  app.add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  app.add_option("-o,--out", out_dir, "output directory (overrides the config)");
  app.add_option("-j,--jobs", jobs, "worker threads, 0 = OpenMP default")->check(CLI::NonNegativeNumber);
  app.add_flag("--force", opts.force, "prune the smallest-norm class even when detection is clean");
  app.add_flag("--plot", opts.plot, "write mitigate/pruning_curve.csv");
  app.add_option("--checkpoint", checkpoint, "model checkpoint instead of <out>/attack/model.ckpt")
      ->check(CLI::ExistingFile);
  app.add_option("--p", ov.p, "detection confidence");
  app.add_option("--lambda", ov.lambda, "mask L1 weight for trigger reverse");
  app.add_option("--tau", ov.tau, "Shapley walk stop threshold");
  app.add_option("--rounds", ov.rounds, "Shapley permutations");
  app.add_option("--top-k", ov.top_k, "neurons to prune (0 = 1% of the network)");
  app.add_option("--budget", ov.budget, "defender images per class, or 'datafree'");
  app.add_option("--selector", ov.selector, "top_k or mixture")->check(CLI::IsMember({"top_k", "mixture"}));

  const std::pair<const char*, int (*)(const PipelineConfig&, const StageOptions&)> commands[] = {
      {"attack", cmd_attack},     {"reverse", cmd_reverse},   {"detect", cmd_detect},
      {"shapley", cmd_shapley},   {"mitigate", cmd_mitigate}, {"full", cmd_full}};
  const char* help[] = {"train the (possibly poisoned) model", "reverse one trigger per class",
                        "flag anomalously small triggers",      "estimate neuron Shapley values",
                        "prune and fine-tune",                  "run every stage"};
  for (std::size_t i = 0; i < std::size(commands); ++i) app.add_subcommand(commands[i].first, help[i]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  PipelineConfig config;
  try {
    if (!config_path.empty()) config = load_config(config_path);
    if (!out_dir.empty()) config.output_dir = out_dir;
    apply(config, ov);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  if (!checkpoint.empty()) opts.checkpoint = checkpoint;
  kernels::parallel::set_max_threads(jobs);

  for (const auto& [name, fn] : commands) {
    if (!app.got_subcommand(name)) continue;
    try {
      const int code = fn(config, opts);
      std::cout << name << ": done (exit " << code << "), artifacts in " << config.output_dir.string() << '\n';
      return code;
    } catch (const StageError& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitFailure;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return kExitFailure;
    }
  }
  return kExitUsage;
}
