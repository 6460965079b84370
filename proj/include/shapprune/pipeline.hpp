#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "shapprune/attack.hpp"
#include "shapprune/datafree.hpp"
#include "shapprune/defense.hpp"
#include "shapprune/shapley.hpp"
#include "shapprune/train.hpp"
#include "shapprune/trigger_reverse.hpp"

namespace shapprune {

inline constexpr const char* kToolVersion = "1.0.0";

struct DataConfig {
  enum class Source { Synthetic, Idx } source = Source::Synthetic;
  SyntheticSpec train{10, 500, 16, 3, 1, 0.08f};
  SyntheticSpec test{10, 100, 16, 3, 2, 0.08f};
  std::filesystem::path train_images, train_labels, test_images, test_labels;  // Idx source
  std::size_t classes = 10;                                                   // Idx source
};

struct AttackConfig {
  bool poison = true;  // false trains a clean control model
  int target_class = 0;
  std::size_t patch = 3;
  std::uint64_t trigger_seed = 7;
  double injection_ratio = 0.01;
  std::uint64_t poison_seed = 3;
  std::uint64_t model_seed = 11;
  TrainConfig train{0.05f, 15, 32, 5, 0.9f, 1e-3f, BatchNormUpdate::Batch};
};

struct PipelineConfig {
  std::filesystem::path output_dir = "run";
  DataConfig data;
  AttackConfig attack;
  bool datafree = false;
  std::size_t defender_per_class = 1;
  std::uint64_t defender_seed = 4;
  ReverseConfig reverse;
  double p = 0.99;
  ShapleyConfig shapley{50, 0.2, {}, DiscardMode::Discard, 1, 0, 0};
  std::optional<Selector> selector;  // default: top-k few-shot, mixture data-free
  RecoveryConfig recovery;
  TrainConfig finetune = default_finetune_config();
  std::size_t plot_neurons = 20;

  Selector effective_selector() const { return selector.value_or(datafree ? Selector::Mixture : Selector::TopK); }
  DefenseConfig defense(bool force) const;
};

/// Missing fields keep their defaults; unknown fields are rejected.
PipelineConfig config_from_json(const nlohmann::json& j);
PipelineConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const PipelineConfig& config);
/// SHA-256 hex of the canonical JSON form of the resolved config.
std::string config_hash(const PipelineConfig& config);
std::string sha256_hex(std::string_view bytes);
std::string file_sha256(const std::filesystem::path& path);

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const ReverseConfig& c);
nlohmann::json to_json(const RecoveryConfig& c);

/// A failure tagged with the pipeline stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& message)
      : std::runtime_error("[" + stage + "] " + message), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

enum ExitCode : int { kExitOk = 0, kExitMitigated = 2, kExitUsage = 3, kExitFailure = 4 };

struct StageOptions {
  bool force = false;
  bool plot = false;
  std::optional<std::filesystem::path> checkpoint;  // overrides <out>/attack/model.ckpt
};

/// Fixed artifact locations under the output directory.
struct RunLayout {
  std::filesystem::path root;
  std::filesystem::path dir(const std::string& stage) const { return root / stage; }
  std::filesystem::path checkpoint() const { return root / "attack" / "model.ckpt"; }
  std::filesystem::path triggers() const { return root / "reverse" / "triggers.json"; }
  std::filesystem::path recovered_images() const { return root / "reverse" / "recovered_images.idx"; }
  std::filesystem::path recovered_labels() const { return root / "reverse" / "recovered_labels.idx"; }
  std::filesystem::path detection() const { return root / "detect" / "detection.json"; }
  std::filesystem::path table(MetricKind kind) const {
    return root / "shapley" / (std::string("shapley_") + metric_name(kind) + ".json");
  }
  std::filesystem::path report() const { return root / "mitigate" / "report.json"; }
};

int cmd_attack(const PipelineConfig& config, const StageOptions& options);
int cmd_reverse(const PipelineConfig& config, const StageOptions& options);
int cmd_detect(const PipelineConfig& config, const StageOptions& options);
int cmd_shapley(const PipelineConfig& config, const StageOptions& options);
/// Exit 2 after pruning and fine-tuning; 0 when detection is clean and not forced.
int cmd_mitigate(const PipelineConfig& config, const StageOptions& options);
/// Every stage in order; 0 when clean (nothing pruned), 2 when mitigated.
int cmd_full(const PipelineConfig& config, const StageOptions& options);

/// Reads a JSON file, throwing IoError/InvalidArgument with the path.
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
/// Recursively drops every "timing" member.
nlohmann::json strip_timing(nlohmann::json j);

nlohmann::json to_json(const TriggerSpec& t);
TriggerSpec trigger_from_json(const nlohmann::json& j);

}  // namespace shapprune
