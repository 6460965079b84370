#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "shapprune/errors.hpp"
#include "shapprune/pipeline.hpp"

using namespace shapprune;
using nlohmann::json;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "shapprune_test_pipeline" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Small enough to run every stage in a few seconds.
json tiny_config() {
  return json::parse(R"({
    "data": {"classes": 4, "train": {"per_class": 50, "seed": 1}, "test": {"per_class": 15, "seed": 2}},
    "attack": {"injection_ratio": 0.05, "train": {"epochs": 3}},
    "reverse": {"iterations": 15},
    "shapley": {"iterations": 4},
    "recovery": {"iterations": 5, "per_label": 2},
    "finetune": {"epochs": 1}
  })");
}

PipelineConfig tiny(const std::filesystem::path& out, bool datafree = false) {
  json j = tiny_config();
  j["output_dir"] = out.string();
  if (datafree) j["defender"] = {{"budget", "datafree"}};
  return config_from_json(j);
}

json stripped(const std::filesystem::path& p) { return strip_timing(read_json(p)); }

}  // namespace

TEST_CASE("unknown and malformed config fields are rejected") {
  CHECK_THROWS_AS(config_from_json(json{{"bogus", 1}}), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(json{{"shapley", {{"R", 5}}}}), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(json{{"detect", {{"p", 1.0}}}}), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(json{{"detect", {{"p", "high"}}}}), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(json{{"defender", {{"budget", "some"}}}}), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(json{{"defender", {{"budget", 0}}}}), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(json{{"reverse", {{"optimizer", "lbfgs"}}}}), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(json{{"attack", {{"target_class", 10}}}}), InvalidArgument);
  CHECK_THROWS_AS(config_from_json(json{{"data", {{"source", "csv"}}}}), InvalidArgument);
}

TEST_CASE("defaults and selector resolution") {
  const auto c = config_from_json(json::object());
  CHECK(c.p == 0.99);
  CHECK(c.shapley.tau == 0.2);
  CHECK(c.shapley.iterations == 50);
  CHECK(c.defender_per_class == 1);
  CHECK(c.effective_selector() == Selector::TopK);
  const auto df = config_from_json(json{{"defender", {{"budget", "datafree"}}}});
  CHECK(df.datafree);
  CHECK(df.effective_selector() == Selector::Mixture);
  CHECK(df.defense(false).tune_without_target);
  CHECK_FALSE(c.defense(false).tune_without_target);
}

TEST_CASE("config round trips and hashes independently of the output directory") {
  json j = tiny_config();
  j["shapley"]["selector"] = "mixture";
  j["reverse"]["optimizer"] = "gd";
  const auto c = config_from_json(j);
  CHECK(to_json(config_from_json(to_json(c))) == to_json(c));
  auto moved = c;
  moved.output_dir = "/elsewhere";
  CHECK(config_hash(moved) == config_hash(c));
  auto changed = c;
  changed.shapley.tau = 0.3;
  CHECK(config_hash(changed) != config_hash(c));
}

TEST_CASE("SHA-256 of a known message") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("timing fields are stripped at any depth") {
  const json j{{"a", 1}, {"timing", 2}, {"b", {{"timing", {{"x", 1}}}, {"c", json::array({json{{"timing", 3}, {"d", 4}}})}}}};
  CHECK(strip_timing(j) == json{{"a", 1}, {"b", {{"c", json::array({json{{"d", 4}}})}}}});
}

TEST_CASE("stages fail with their stage tag") {
  const auto c = tiny(fresh_dir("missing"));
  try {
    cmd_reverse(c, {});
    FAIL("reverse ran without a checkpoint");
  } catch (const StageError& e) {
    CHECK(e.stage() == "reverse");
  }
  CHECK_THROWS_AS(cmd_detect(c, {}), StageError);
  CHECK_THROWS_AS(cmd_mitigate(c, {}), StageError);
}

TEST_CASE("a forced tiny run mitigates and reproduces byte for byte") {
  const auto a = fresh_dir("run_a"), b = fresh_dir("run_b");
  StageOptions forced;
  forced.force = true;
  CHECK(cmd_full(tiny(a), forced) == kExitMitigated);
  CHECK(cmd_full(tiny(b), forced) == kExitMitigated);
  for (const std::string stage : {"attack", "reverse", "detect", "shapley", "mitigate"})
    CHECK_MESSAGE(stripped(a / stage / "manifest.json") == stripped(b / stage / "manifest.json"), stage);
  for (const std::string f : {"attack/attack.json", "reverse/triggers.json", "detect/detection.json",
                              "shapley/shapley_asr.json", "mitigate/report.json", "manifest.json"})
    CHECK_MESSAGE(stripped(a / f) == stripped(b / f), f);
  for (const char* f : {"attack/model.ckpt", "mitigate/model_mitigated.ckpt"})
    CHECK(file_sha256(a / f) == file_sha256(b / f));
  const json r = read_json(a / "mitigate/report.json");
  CHECK(r["forced"] == true);
  CHECK(r["mitigated"] == true);
  CHECK(r["pruned"].size() == 2);  // ceil(0.01 * 112)
  CHECK(r.contains("asr_pruned"));
  CHECK(r.contains("asr_after"));
  CHECK(r["config_sha256"] == config_hash(tiny(a)));
}

TEST_CASE("stages can be rerun one at a time on a checkpoint") {
  const auto a = fresh_dir("stages");
  const auto c = tiny(a);
  CHECK(cmd_attack(c, {}) == kExitOk);
  CHECK(cmd_reverse(c, {}) == kExitOk);
  CHECK(cmd_detect(c, {}) == kExitOk);
  const json detection = read_json(a / "detect/detection.json");
  StageOptions forced;
  forced.force = true;
  CHECK(cmd_shapley(c, forced) == kExitOk);
  CHECK(cmd_mitigate(c, forced) == kExitMitigated);
  // a clean verdict without --force leaves the model alone
  if (detection["verdict"] == "clean") CHECK(cmd_mitigate(c, {}) == kExitOk);
}

TEST_CASE("data-free runs never need the defender's images") {
  const auto a = fresh_dir("datafree");
  StageOptions forced;
  forced.force = true;
  CHECK(cmd_full(tiny(a, true), forced) == kExitMitigated);
  CHECK(std::filesystem::exists(a / "reverse/recovered_images.idx"));
  CHECK(std::filesystem::exists(a / "shapley/shapley_acc.json"));
  const json r = read_json(a / "mitigate/report.json");
  CHECK(r["selector"] == "mixture");
}
