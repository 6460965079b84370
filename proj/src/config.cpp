#include <openssl/evp.h>

#include <fstream>
#include <initializer_list>
#include <iterator>
#include <set>
#include <string>

#include "shapprune/errors.hpp"
#include "shapprune/pipeline.hpp"

namespace shapprune {

namespace {

using nlohmann::json;

void only_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw InvalidArgument("config: '" + where + "' must be an object");
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw InvalidArgument("config: unknown field '" + where + "." + k + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

const char* batchnorm_name(BatchNormUpdate b) { return b == BatchNormUpdate::Batch ? "batch" : "frozen"; }

TrainConfig train_from_json(const json& j, TrainConfig c, const std::string& where) {
  only_keys(j, where, {"learning_rate", "epochs", "batch_size", "seed", "momentum", "weight_decay", "batchnorm"});
  read(j, "learning_rate", c.learning_rate);
  read(j, "epochs", c.epochs);
  read(j, "batch_size", c.batch_size);
  read(j, "seed", c.seed);
  read(j, "momentum", c.momentum);
  read(j, "weight_decay", c.weight_decay);
  if (j.contains("batchnorm")) {
    const auto b = j["batchnorm"].get<std::string>();
    if (b == "batch") {
      c.batchnorm = BatchNormUpdate::Batch;
    } else if (b == "frozen") {
      c.batchnorm = BatchNormUpdate::Frozen;
    } else {
      throw InvalidArgument("config: " + where + ".batchnorm must be 'batch' or 'frozen'");
    }
  }
  if (c.batch_size == 0) throw InvalidArgument("config: " + where + ".batch_size must be positive");
  return c;
}

SyntheticSpec synthetic_from_json(const json& j, SyntheticSpec s, const std::string& where) {
  only_keys(j, where, {"per_class", "seed"});
  read(j, "per_class", s.per_class);
  read(j, "seed", s.seed);
  return s;
}

json synthetic_json(const SyntheticSpec& s) { return {{"per_class", s.per_class}, {"seed", s.seed}}; }

}  // namespace

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},   {"batch_size", c.batch_size},
          {"seed", c.seed},                   {"momentum", c.momentum}, {"weight_decay", c.weight_decay},
          {"batchnorm", batchnorm_name(c.batchnorm)}};
}

json to_json(const ReverseConfig& c) {
  return {{"lambda", c.lambda},
          {"iterations", c.iterations},
          {"learning_rate", c.learning_rate},
          {"optimizer", c.optimizer == ReverseOptimizer::Adam ? "adam" : "gd"},
          {"seed", c.seed}};
}

json to_json(const RecoveryConfig& c) {
  return {{"alpha", c.alpha},         {"beta", c.beta},         {"gamma", c.gamma},
          {"alpha1", c.alpha1},       {"alpha2", c.alpha2},     {"labels", c.labels},
          {"per_label", c.per_label}, {"iterations", c.iterations}, {"learning_rate", c.learning_rate},
          {"seed", c.seed}};
}

DefenseConfig PipelineConfig::defense(bool force) const {
  DefenseConfig d;
  d.reverse = reverse;
  d.p = p;
  d.shapley = shapley;
  d.selector = effective_selector();
  d.finetune = finetune;
  d.force = force;
  d.tune_without_target = datafree;
  return d;
}

PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  try {
    only_keys(j, "config", {"output_dir", "data", "attack", "defender", "reverse", "detect", "shapley", "recovery",
                            "finetune", "plot_neurons"});
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    read(j, "plot_neurons", c.plot_neurons);

    if (j.contains("data")) {
      const auto& d = j["data"];
      const auto source = d.value("source", std::string("synthetic"));
      if (source == "synthetic") {
        only_keys(d, "data", {"source", "classes", "image_size", "channels", "noise", "train", "test"});
        for (auto* s : {&c.data.train, &c.data.test}) {
          read(d, "classes", s->classes);
          read(d, "image_size", s->image_size);
          read(d, "channels", s->channels);
          read(d, "noise", s->noise);
        }
        if (d.contains("train")) c.data.train = synthetic_from_json(d["train"], c.data.train, "data.train");
        if (d.contains("test")) c.data.test = synthetic_from_json(d["test"], c.data.test, "data.test");
        c.data.classes = c.data.train.classes;
      } else if (source == "idx") {
        only_keys(d, "data", {"source", "classes", "train_images", "train_labels", "test_images", "test_labels"});
        c.data.source = DataConfig::Source::Idx;
        c.data.classes = d.at("classes").get<std::size_t>();
        c.data.train_images = d.at("train_images").get<std::string>();
        c.data.train_labels = d.at("train_labels").get<std::string>();
        c.data.test_images = d.at("test_images").get<std::string>();
        c.data.test_labels = d.at("test_labels").get<std::string>();
      } else {
        throw InvalidArgument("config: data.source must be 'synthetic' or 'idx'");
      }
    }

    if (j.contains("attack")) {
      const auto& a = j["attack"];
      only_keys(a, "attack", {"poison", "target_class", "patch", "trigger_seed", "injection_ratio", "poison_seed",
                              "model_seed", "train"});
      read(a, "poison", c.attack.poison);
      read(a, "target_class", c.attack.target_class);
      read(a, "patch", c.attack.patch);
      read(a, "trigger_seed", c.attack.trigger_seed);
      read(a, "injection_ratio", c.attack.injection_ratio);
      read(a, "poison_seed", c.attack.poison_seed);
      read(a, "model_seed", c.attack.model_seed);
      if (a.contains("train")) c.attack.train = train_from_json(a["train"], c.attack.train, "attack.train");
    }

    if (j.contains("defender")) {
      const auto& d = j["defender"];
      only_keys(d, "defender", {"budget", "seed"});
      read(d, "seed", c.defender_seed);
      if (d.contains("budget")) {
        if (d["budget"].is_string()) {
          if (d["budget"].get<std::string>() != "datafree")
            throw InvalidArgument("config: defender.budget must be a positive count or 'datafree'");
          c.datafree = true;
        } else {
          c.defender_per_class = d["budget"].get<std::size_t>();
          if (c.defender_per_class == 0) throw InvalidArgument("config: defender.budget must be at least 1");
        }
      }
    }

    if (j.contains("reverse")) {
      const auto& r = j["reverse"];
      only_keys(r, "reverse", {"lambda", "iterations", "learning_rate", "optimizer", "seed"});
      read(r, "lambda", c.reverse.lambda);
      read(r, "iterations", c.reverse.iterations);
      read(r, "learning_rate", c.reverse.learning_rate);
      read(r, "seed", c.reverse.seed);
      if (r.contains("optimizer")) {
        const auto o = r["optimizer"].get<std::string>();
        if (o == "adam") {
          c.reverse.optimizer = ReverseOptimizer::Adam;
        } else if (o == "gd") {
          c.reverse.optimizer = ReverseOptimizer::GradientDescent;
        } else {
          throw InvalidArgument("config: reverse.optimizer must be 'adam' or 'gd'");
        }
      }
    }

    if (j.contains("detect")) {
      only_keys(j["detect"], "detect", {"p"});
      read(j["detect"], "p", c.p);
    }

    if (j.contains("shapley")) {
      json s = j["shapley"];
      only_keys(s, "shapley",
                {"iterations", "tau", "seed", "top_k", "bottom_l", "discard", "policy", "selector"});
      if (s.contains("selector")) {
        const auto sel = s["selector"].get<std::string>();
        if (sel == "top_k") {
          c.selector = Selector::TopK;
        } else if (sel == "mixture") {
          c.selector = Selector::Mixture;
        } else {
          throw InvalidArgument("config: shapley.selector must be 'top_k' or 'mixture'");
        }
        s.erase("selector");
      }
      if (s.contains("policy"))
        only_keys(s["policy"], "shapley.policy", {"kind", "warmup_iters", "epsilon", "top_group"});
      c.shapley = shapley_config_from_json(s);
      if (!j["shapley"].contains("top_k")) c.shapley.top_k = 0;
    }

    if (j.contains("recovery")) {
      const auto& r = j["recovery"];
      only_keys(r, "recovery", {"alpha", "beta", "gamma", "alpha1", "alpha2", "labels", "per_label", "iterations",
                                "learning_rate", "seed"});
      read(r, "alpha", c.recovery.alpha);
      read(r, "beta", c.recovery.beta);
      read(r, "gamma", c.recovery.gamma);
      read(r, "alpha1", c.recovery.alpha1);
      read(r, "alpha2", c.recovery.alpha2);
      read(r, "labels", c.recovery.labels);
      read(r, "per_label", c.recovery.per_label);
      read(r, "iterations", c.recovery.iterations);
      read(r, "learning_rate", c.recovery.learning_rate);
      read(r, "seed", c.recovery.seed);
    }

    if (j.contains("finetune")) c.finetune = train_from_json(j["finetune"], c.finetune, "finetune");
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  if (!(c.p > 0.0 && c.p < 1.0)) throw InvalidArgument("config: detect.p must lie in (0,1)");
  if (c.attack.poison && !(c.attack.injection_ratio > 0.0 && c.attack.injection_ratio < 1.0))
    throw InvalidArgument("config: attack.injection_ratio must lie in (0,1)");
  if (c.attack.target_class < 0 || static_cast<std::size_t>(c.attack.target_class) >= c.data.classes)
    throw InvalidArgument("config: attack.target_class outside the class range");
  if (c.reverse.iterations == 0) throw InvalidArgument("config: reverse.iterations must be positive");
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) { return config_from_json(read_json(path)); }

json to_json(const PipelineConfig& c) {
  json data;
  if (c.data.source == DataConfig::Source::Synthetic) {
    data = {{"source", "synthetic"},
            {"classes", c.data.train.classes},
            {"image_size", c.data.train.image_size},
            {"channels", c.data.train.channels},
            {"noise", c.data.train.noise},
            {"train", synthetic_json(c.data.train)},
            {"test", synthetic_json(c.data.test)}};
  } else {
    data = {{"source", "idx"},
            {"classes", c.data.classes},
            {"train_images", c.data.train_images.string()},
            {"train_labels", c.data.train_labels.string()},
            {"test_images", c.data.test_images.string()},
            {"test_labels", c.data.test_labels.string()}};
  }
  json shapley = to_json(c.shapley);
  shapley["selector"] = c.effective_selector() == Selector::TopK ? "top_k" : "mixture";
  return {{"output_dir", c.output_dir.string()},
          {"data", data},
          {"attack",
           {{"poison", c.attack.poison},
            {"target_class", c.attack.target_class},
            {"patch", c.attack.patch},
            {"trigger_seed", c.attack.trigger_seed},
            {"injection_ratio", c.attack.injection_ratio},
            {"poison_seed", c.attack.poison_seed},
            {"model_seed", c.attack.model_seed},
            {"train", to_json(c.attack.train)}}},
          {"defender",
           {{"budget", c.datafree ? json("datafree") : json(c.defender_per_class)}, {"seed", c.defender_seed}}},
          {"reverse", to_json(c.reverse)},
          {"detect", {{"p", c.p}}},
          {"shapley", shapley},
          {"recovery", to_json(c.recovery)},
          {"finetune", to_json(c.finetune)},
          {"plot_neurons", c.plot_neurons}};
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("SHA-256 computation failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

std::string config_hash(const PipelineConfig& config) {
  json j = to_json(config);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InvalidArgument(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

json strip_timing(json j) {
  if (j.is_object()) {
    j.erase("timing");
    for (auto& [k, v] : j.items()) v = strip_timing(v);
  } else if (j.is_array()) {
    for (auto& v : j) v = strip_timing(v);
  }
  return j;
}

}  // namespace shapprune
