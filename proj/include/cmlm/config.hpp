#pragma once

// Flat JSON run configuration shared by every command. Unknown keys are
// rejected by name; the resolved document (defaults filled in) is what
// reports echo back.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmlm/encoder.hpp"
#include "cmlm/metrics.hpp"
#include "cmlm/objectives.hpp"
#include "cmlm/training.hpp"
#include "json.hpp"

namespace cmlm {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class TaskKind { kSeparable, kDomainShift };

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "separable") return TaskKind::kSeparable;
  if (s == "domain-shift") return TaskKind::kDomainShift;
  throw ConfigError("unknown task '" + s + "' (expected separable or domain-shift)");
}
inline std::string to_string(TaskKind k) { return k == TaskKind::kSeparable ? "separable" : "domain-shift"; }

/// Default post-training and fine-tuning epochs per subset size.
struct Schedule {
  std::size_t subset_size, post_epochs, fine_tune_epochs;
};
inline constexpr Schedule kSchedules[] = {{20, 200, 350}, {100, 50, 100}, {1000, 5, 10}};

struct RunConfig {
  TaskKind task = TaskKind::kSeparable;
  std::uint64_t seed = 42;
  std::vector<std::uint64_t> seeds = {31, 42, 53};
  std::size_t num_subsets = 5;
  std::size_t subset_size = 100;
  std::size_t dev_size = 500;
  std::size_t train_pool_size = 2000;
  std::size_t eval_pool_size = 1000;
  std::size_t unlabeled_pool_size = 0;
  /// Unlabeled examples to post-train on; 0 means the subset's own texts.
  std::size_t unlabeled_count = 0;

  std::size_t vocab_size = 2000;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t hidden = 64;
  std::size_t ffn = 256;
  std::size_t max_len = 64;
  double dropout = 0.1;

  double lr = 1e-5;
  std::optional<std::size_t> epochs;
  std::size_t batch_size = 16;
  double post_lr = 1e-5;
  std::optional<std::size_t> post_epochs;
  std::size_t post_batch_size = 8;

  double alpha = 0.5;
  double p_m = 0.15;
  double p_c = 0.7;
  std::size_t k = 1;
  double tau = kDefaultTemperature;
  ClVariant cl_variant = ClVariant::kSimSiam;
  std::string objective = "cmlm";
  double weight_decay = 0.01;
  std::size_t checkpoint_interval = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;
  double eda_rate = 0.1;
  Metric metric = Metric::kAccuracy;

  /// Fills unset epoch counts from the default schedule for `subset_size`.
  void resolve() {
    for (const auto& s : kSchedules) {
      if (s.subset_size != subset_size) continue;
      if (!epochs) epochs = s.fine_tune_epochs;
      if (!post_epochs) post_epochs = s.post_epochs;
    }
    if (!epochs || !post_epochs)
      throw ConfigError("no default epoch schedule for subset_size " + std::to_string(subset_size) +
                        "; set epochs and post_epochs explicitly");
  }

  EncoderConfig encoder(std::size_t vocab, std::size_t num_classes) const {
    EncoderConfig e;
    e.layers = layers;
    e.heads = heads;
    e.hidden = hidden;
    e.ffn = ffn;
    e.vocab = vocab;
    e.max_len = max_len;
    e.num_classes = num_classes;
    e.dropout = dropout;
    return e;
  }

  TrainConfig fine_tune() const {
    TrainConfig t = shared();
    t.lr = lr;
    t.epochs = epochs.value_or(0);
    t.batch_size = batch_size;
    t.objective = Objective{ObjectiveKind::kNone, {}};
    return t;
  }

  TrainConfig post_train() const {
    TrainConfig t = shared();
    t.lr = post_lr;
    t.epochs = post_epochs.value_or(0);
    t.batch_size = post_batch_size;
    t.objective = Objective::parse(objective);
    return t;
  }

  void validate() const {
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (num_subsets == 0) throw ConfigError("num_subsets must be at least 1");
    if (subset_size == 0) throw ConfigError("subset_size must be at least 1");
    if (subset_size > train_pool_size)
      throw ConfigError("subset_size " + std::to_string(subset_size) + " exceeds train_pool_size " +
                        std::to_string(train_pool_size));
    if (dev_size == 0 || dev_size >= eval_pool_size)
      throw ConfigError("dev_size must be positive and leave test examples in eval_pool_size");
    if (unlabeled_count > unlabeled_pool_size)
      throw ConfigError("unlabeled_count " + std::to_string(unlabeled_count) + " exceeds unlabeled_pool_size " +
                        std::to_string(unlabeled_pool_size));
    if (!(post_lr > 0.0)) throw ConfigError("post_lr must be positive");
    if (post_batch_size == 0) throw ConfigError("post_batch_size must be at least 1");
    try {
      encoder(vocab_size, 2).validate();
      fine_tune().validate();
      post_train().validate();
    } catch (const ConfigError&) {
      throw;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }

 private:
  TrainConfig shared() const {
    TrainConfig t;
    t.alpha = alpha;
    t.p_m = p_m;
    t.p_c = p_c;
    t.k = k;
    t.tau = tau;
    t.cl_variant = cl_variant;
    t.seed = seed;
    t.weight_decay = weight_decay;
    t.dropout = dropout;
    t.checkpoint_interval = checkpoint_interval;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.adam_eps = adam_eps;
    t.grad_clip = grad_clip;
    t.eda_rate = eda_rate;
    t.metric = metric;
    return t;
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["task"] = to_string(c.task);
  j["seed"] = c.seed;
  j["seeds"] = c.seeds;
  j["num_subsets"] = c.num_subsets;
  j["subset_size"] = c.subset_size;
  j["dev_size"] = c.dev_size;
  j["train_pool_size"] = c.train_pool_size;
  j["eval_pool_size"] = c.eval_pool_size;
  j["unlabeled_pool_size"] = c.unlabeled_pool_size;
  j["unlabeled_count"] = c.unlabeled_count;
  j["vocab_size"] = c.vocab_size;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["hidden"] = c.hidden;
  j["ffn"] = c.ffn;
  j["max_len"] = c.max_len;
  j["dropout"] = c.dropout;
  j["lr"] = c.lr;
  j["epochs"] = c.epochs ? nlohmann::json(*c.epochs) : nlohmann::json(nullptr);
  j["batch_size"] = c.batch_size;
  j["post_lr"] = c.post_lr;
  j["post_epochs"] = c.post_epochs ? nlohmann::json(*c.post_epochs) : nlohmann::json(nullptr);
  j["post_batch_size"] = c.post_batch_size;
  j["alpha"] = c.alpha;
  j["p_m"] = c.p_m;
  j["p_c"] = c.p_c;
  j["K"] = c.k;
  j["tau"] = c.tau;
  j["cl_variant"] = to_string(c.cl_variant);
  j["objective"] = c.objective;
  j["weight_decay"] = c.weight_decay;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["adam_eps"] = c.adam_eps;
  j["grad_clip"] = c.grad_clip;
  j["eda_rate"] = c.eda_rate;
  j["metric"] = to_string(c.metric);
  return j;
}

namespace detail {

template <typename V>
V config_value(const nlohmann::json& j, const std::string& key) {
  try {
    if constexpr (std::is_same_v<V, std::size_t> || std::is_same_v<V, std::uint64_t>) {
      if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0))
        throw ConfigError("config key '" + key + "' must be a non-negative integer");
    } else if constexpr (std::is_same_v<V, double>) {
      if (!j.is_number()) throw ConfigError("config key '" + key + "' must be a number");
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!j.is_string()) throw ConfigError("config key '" + key + "' must be a string");
    }
    return j.get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

}  // namespace detail

/// Builds a config from a flat JSON object. Keys absent from the document
/// keep their defaults; `seed` falls back to `env_seed` when absent.
inline RunConfig config_from_json(const nlohmann::json& j, std::optional<std::uint64_t> env_seed = std::nullopt) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  if (env_seed) c.seed = *env_seed;
  const auto known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ConfigError("unknown config key '" + key + "'");
    using detail::config_value;
    if (key == "task") c.task = parse_task_kind(config_value<std::string>(value, key));
    else if (key == "seed") c.seed = config_value<std::uint64_t>(value, key);
    else if (key == "seeds") {
      if (!value.is_array()) throw ConfigError("config key 'seeds' must be an array of integers");
      c.seeds.clear();
      for (const auto& s : value) c.seeds.push_back(config_value<std::uint64_t>(s, key));
    }
    else if (key == "num_subsets") c.num_subsets = config_value<std::size_t>(value, key);
    else if (key == "subset_size") c.subset_size = config_value<std::size_t>(value, key);
    else if (key == "dev_size") c.dev_size = config_value<std::size_t>(value, key);
    else if (key == "train_pool_size") c.train_pool_size = config_value<std::size_t>(value, key);
    else if (key == "eval_pool_size") c.eval_pool_size = config_value<std::size_t>(value, key);
    else if (key == "unlabeled_pool_size") c.unlabeled_pool_size = config_value<std::size_t>(value, key);
    else if (key == "unlabeled_count") c.unlabeled_count = config_value<std::size_t>(value, key);
    else if (key == "vocab_size") c.vocab_size = config_value<std::size_t>(value, key);
    else if (key == "layers") c.layers = config_value<std::size_t>(value, key);
    else if (key == "heads") c.heads = config_value<std::size_t>(value, key);
    else if (key == "hidden") c.hidden = config_value<std::size_t>(value, key);
    else if (key == "ffn") c.ffn = config_value<std::size_t>(value, key);
    else if (key == "max_len") c.max_len = config_value<std::size_t>(value, key);
    else if (key == "dropout") c.dropout = config_value<double>(value, key);
    else if (key == "lr") c.lr = config_value<double>(value, key);
    else if (key == "epochs") c.epochs = value.is_null() ? std::nullopt : std::optional(config_value<std::size_t>(value, key));
    else if (key == "batch_size") c.batch_size = config_value<std::size_t>(value, key);
    else if (key == "post_lr") c.post_lr = config_value<double>(value, key);
    else if (key == "post_epochs") c.post_epochs = value.is_null() ? std::nullopt : std::optional(config_value<std::size_t>(value, key));
    else if (key == "post_batch_size") c.post_batch_size = config_value<std::size_t>(value, key);
    else if (key == "alpha") c.alpha = config_value<double>(value, key);
    else if (key == "p_m") c.p_m = config_value<double>(value, key);
    else if (key == "p_c") c.p_c = config_value<double>(value, key);
    else if (key == "K") c.k = config_value<std::size_t>(value, key);
    else if (key == "tau") c.tau = config_value<double>(value, key);
    else if (key == "cl_variant") {
      try {
        c.cl_variant = parse_cl_variant(config_value<std::string>(value, key));
      } catch (const ConfigError&) {
        throw;
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    else if (key == "objective") c.objective = config_value<std::string>(value, key);
    else if (key == "weight_decay") c.weight_decay = config_value<double>(value, key);
    else if (key == "checkpoint_interval") c.checkpoint_interval = config_value<std::size_t>(value, key);
    else if (key == "beta1") c.beta1 = config_value<double>(value, key);
    else if (key == "beta2") c.beta2 = config_value<double>(value, key);
    else if (key == "adam_eps") c.adam_eps = config_value<double>(value, key);
    else if (key == "grad_clip") c.grad_clip = config_value<double>(value, key);
    else if (key == "eda_rate") c.eda_rate = config_value<double>(value, key);
    else if (key == "metric") {
      try {
        c.metric = parse_metric(config_value<std::string>(value, key));
      } catch (const ConfigError&) {
        throw;
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
  }
  c.resolve();
  c.validate();
  return c;
}

/// CMLM_SEED, if set to an unsigned integer.
inline std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("CMLM_SEED");
  if (!v || !*v) return std::nullopt;
  std::size_t used = 0;
  unsigned long long s = 0;
  try {
    s = std::stoull(v, &used);
  } catch (const std::exception&) {
    throw ConfigError(std::string("CMLM_SEED must be an unsigned integer, got '") + v + "'");
  }
  if (used != std::string(v).size() || v[0] == '-')
    throw ConfigError(std::string("CMLM_SEED must be an unsigned integer, got '") + v + "'");
  return s;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return config_from_json(j, env_seed());
}

/// 64-bit FNV-1a of the compact resolved config, as 16 hex digits.
inline std::string config_fingerprint(const RunConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : to_json(c).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[i] = digits[h & 0xf];
  return out;
}

}  // namespace cmlm
