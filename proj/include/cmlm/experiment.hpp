#pragma once

// Synthetic tasks, the few-shot protocol (subsets x seeds, mean and
// population std), and parameter sweeps over it.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstdint>
#include <ctime>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "cmlm/config.hpp"
#include "cmlm/encoder.hpp"
#include "cmlm/metrics.hpp"
#include "cmlm/rng.hpp"
#include "cmlm/text.hpp"
#include "cmlm/training.hpp"
#include "json.hpp"

namespace cmlm {

// ---------------------------------------------------------------------------
// Synthetic tasks

struct SyntheticSizes {
  std::size_t train_pool = 1000;
  std::size_t eval_pool = 1000;
  std::size_t unlabeled = 0;
};

struct SyntheticTask {
  std::string name;
  TaskKind kind = TaskKind::kSeparable;
  std::size_t num_classes = 2;
  LabelSet labels;
  std::vector<LabeledExample> train_pool;
  std::vector<LabeledExample> eval_pool;
  std::vector<LabeledExample> unlabeled;  // labels are -1

  /// Texts the vocabulary may be built from: everything except the
  /// evaluation pool.
  std::vector<std::string> corpus() const {
    std::vector<std::string> out;
    for (const auto* set : {&train_pool, &unlabeled})
      for (const auto& x : *set) out.push_back(x.text_a);
    return out;
  }
};

namespace detail {

inline std::vector<std::string> word_list(const std::string& prefix, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

/// Cumulative Zipf(1) weights over `ranks.size()` words, where word i has
/// rank ranks[i].
inline std::vector<double> zipf_cdf(const std::vector<std::size_t>& ranks) {
  std::vector<double> cdf(ranks.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < ranks.size(); ++i) cdf[i] = acc += 1.0 / static_cast<double>(ranks[i] + 1);
  for (auto& x : cdf) x /= acc;
  return cdf;
}

inline std::size_t draw(const std::vector<double>& cdf, Rng& rng) {
  const double u = uniform01(rng);
  return std::min<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin(), cdf.size() - 1);
}

inline std::string join(const std::vector<std::string>& words) {
  std::string s;
  for (const auto& w : words) {
    if (!s.empty()) s += ' ';
    s += w;
  }
  return s;
}

}  // namespace detail

/// "separable": each class owns a disjoint set of signal words and every
/// sentence carries at least one of them, so the Bayes-optimal accuracy
/// is 1.
///
/// "domain-shift": each class owns a set of topic words that appear with
/// moderate probability (some sentences carry none); filler words follow a
/// Zipf profile. The unlabeled pool is drawn from the same classes with the
/// filler ranks rotated, so vocabulary overlaps but frequencies differ.
inline SyntheticTask make_synthetic_task(TaskKind kind, const SyntheticSizes& sizes, Rng& rng) {
  SyntheticTask task;
  task.kind = kind;
  task.name = "synthetic-" + to_string(kind);
  task.num_classes = 2;
  task.labels = LabelSet({"0", "1"});

  const bool separable = kind == TaskKind::kSeparable;
  const std::size_t n_filler = separable ? 30 : 48;
  const std::size_t n_signal = separable ? 6 : 16;
  const double signal_rate = separable ? 0.3 : 0.2;
  const std::size_t min_len = separable ? 5 : 6, max_len = separable ? 10 : 12;

  const auto filler = detail::word_list("w", n_filler);
  std::vector<std::vector<std::string>> signal;
  for (std::size_t c = 0; c < task.num_classes; ++c) signal.push_back(detail::word_list("c" + std::to_string(c) + "t", n_signal));

  std::vector<std::size_t> labeled_ranks(n_filler), shifted_ranks(n_filler);
  for (std::size_t i = 0; i < n_filler; ++i) {
    labeled_ranks[i] = i;
    shifted_ranks[i] = (i + n_filler / 2) % n_filler;
  }
  const auto labeled_cdf = detail::zipf_cdf(labeled_ranks);
  const auto shifted_cdf = detail::zipf_cdf(shifted_ranks);

  auto sentence = [&](int label, const std::vector<double>& cdf) {
    const std::size_t len = min_len + uniform_index(rng, max_len - min_len + 1);
    std::vector<std::string> words;
    bool has_signal = false;
    for (std::size_t i = 0; i < len; ++i) {
      if (bernoulli(rng, signal_rate)) {
        words.push_back(signal[label][uniform_index(rng, n_signal)]);
        has_signal = true;
      } else {
        words.push_back(separable ? filler[uniform_index(rng, n_filler)] : filler[detail::draw(cdf, rng)]);
      }
    }
    if (separable && !has_signal) words[uniform_index(rng, len)] = signal[label][uniform_index(rng, n_signal)];
    return detail::join(words);
  };
  auto labeled = [&](std::size_t n) {
    std::vector<LabeledExample> out;
    for (std::size_t i = 0; i < n; ++i) {
      const int label = static_cast<int>(uniform_index(rng, task.num_classes));
      out.push_back({sentence(label, labeled_cdf), std::nullopt, label});
    }
    return out;
  };
  task.train_pool = labeled(sizes.train_pool);
  task.eval_pool = labeled(sizes.eval_pool);
  for (std::size_t i = 0; i < sizes.unlabeled; ++i) {
    const int hidden = static_cast<int>(uniform_index(rng, task.num_classes));
    task.unlabeled.push_back({sentence(hidden, separable ? labeled_cdf : shifted_cdf), std::nullopt, -1});
  }
  return task;
}

inline SyntheticTask make_task(const RunConfig& c) {
  Rng rng = derive_rng(c.seed, {0x7a5c});
  return make_synthetic_task(c.task, {c.train_pool_size, c.eval_pool_size, c.unlabeled_pool_size}, rng);
}

// ---------------------------------------------------------------------------
// Protocol

/// ft (no post-training), tapt, cmlm, or cssl:<augmenter>.
struct Method {
  std::string name;
  Objective objective;
  bool post_trains() const { return objective.kind != ObjectiveKind::kNone; }

  static Method parse(const std::string& s) {
    if (s == "ft") return {s, Objective{ObjectiveKind::kNone, {}}};
    if (s == "scl") throw std::invalid_argument("method 'scl' is unsupported (out of scope)");
    if (s == "none") throw std::invalid_argument("unknown method 'none' (expected ft, tapt, cmlm or cssl:<augmenter>)");
    try {
      return {s, Objective::parse(s)};
    } catch (const std::invalid_argument&) {
      if (s.rfind("cssl:", 0) == 0) throw;
      throw std::invalid_argument("unknown method '" + s + "' (expected ft, tapt, cmlm or cssl:<augmenter>)");
    }
  }
};

struct RunRecord {
  std::uint64_t seed = 0;
  std::size_t subset = 0;
  double value = 0.0;
};

struct ExperimentReport {
  std::string task;
  std::string method;
  std::size_t subset_size = 0;
  Metric metric = Metric::kAccuracy;
  std::vector<RunRecord> records;
  double mean = 0.0;
  double std_dev = 0.0;
  std::string config_fingerprint;
  std::string timestamp;
  nlohmann::json config;
  /// Per subset, the classes it never samples.
  std::vector<std::vector<int>> missing_classes;

  nlohmann::json to_json() const {
    nlohmann::json recs = nlohmann::json::array();
    for (const auto& r : records)
      recs.push_back({{"seed", r.seed}, {"subset", r.subset}, {"metric", cmlm::to_string(metric)}, {"value", r.value}});
    nlohmann::json missing = nlohmann::json::array();
    for (std::size_t s = 0; s < missing_classes.size(); ++s)
      if (!missing_classes[s].empty()) missing.push_back({{"subset", s}, {"classes", missing_classes[s]}});
    return {{"task", task},
            {"method", method},
            {"subset_size", subset_size},
            {"records", recs},
            {"mean", mean},
            {"std", std_dev},
            {"std_kind", "population"},
            {"config_fingerprint", config_fingerprint},
            {"timestamp", timestamp},
            {"config", config},
            {"missing_classes", missing}};
  }
};

/// Mean and population standard deviation.
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("mean_std: no values");
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size()))};
}

/// Current UTC time, or SOURCE_DATE_EPOCH when set so reruns can be
/// byte-identical.
inline std::string utc_timestamp() {
  std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  if (const char* fixed = std::getenv("SOURCE_DATE_EPOCH"); fixed && *fixed) {
    try {
      now = static_cast<std::time_t>(std::stoll(fixed));
    } catch (const std::exception&) {
      throw std::invalid_argument(std::string("SOURCE_DATE_EPOCH must be an integer, got '") + fixed + "'");
    }
  }
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Everything a single (subset, seed) run needs, shared read-only across
/// runs.
struct ProtocolData {
  SyntheticTask task;
  Vocabulary vocab;
  FewShotSplit split;
  std::vector<EncodedExample> dev;
  std::vector<EncodedExample> test;
};

inline ProtocolData prepare_protocol(const RunConfig& c) {
  ProtocolData d;
  d.task = make_task(c);
  d.vocab = build_vocab(d.task.corpus(), c.vocab_size);
  Rng split_rng = derive_rng(c.seed, {0x5b17});
  d.split = sample_few_shot(d.task.train_pool, d.task.eval_pool, c.subset_size, c.num_subsets, split_rng, c.dev_size);
  d.dev = encode_examples(d.split.dev, d.vocab, c.max_len);
  d.test = encode_examples(d.split.test, d.vocab, c.max_len);
  return d;
}

/// One run: fresh encoder from `seed`, optional post-training on the
/// subset's texts (or the first `unlabeled_count` unlabeled examples),
/// fine-tuning with dev selection, then the test metric.
inline double run_single(const RunConfig& c, const Method& method, const ProtocolData& d, std::size_t subset,
                         std::uint64_t seed) {
  Rng init_rng = derive_rng(seed, {detail::kInitStream});
  auto params = init_params<float>(c.encoder(d.vocab.size(), d.task.num_classes), init_rng);
  const auto& examples = d.split.subsets.at(subset);
  if (method.post_trains()) {
    TrainConfig post = c.post_train();
    post.objective = method.objective;
    post.seed = seed;
    std::vector<TokenSequence> texts;
    if (c.unlabeled_count > 0) {
      for (std::size_t i = 0; i < c.unlabeled_count; ++i) texts.push_back(encode(d.task.unlabeled.at(i), d.vocab, c.max_len));
    } else {
      for (const auto& x : examples) texts.push_back(encode(x, d.vocab, c.max_len));
    }
    post_train(params, texts, d.vocab, post);
  }
  TrainConfig ft = c.fine_tune();
  ft.seed = seed;
  auto result = fine_tune(params, encode_examples(examples, d.vocab, c.max_len), d.dev, ft);
  return evaluate(result.best, d.test, c.metric);
}

/// Runs every (subset, seed) pair, optionally on `jobs` threads. Records
/// are ordered by subset then seed regardless of scheduling; any failed run
/// aborts the whole report.
inline ExperimentReport run_protocol(const RunConfig& c, const std::string& method_name, std::size_t jobs = 1) {
  c.validate();
  const Method method = Method::parse(method_name);
  const ProtocolData d = prepare_protocol(c);

  const std::size_t n = c.num_subsets * c.seeds.size();
  std::vector<double> values(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        values[i] = run_single(c, method, d, i / c.seeds.size(), c.seeds[i % c.seeds.size()]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  ExperimentReport r;
  r.task = d.task.name;
  r.method = method.name;
  r.subset_size = c.subset_size;
  r.metric = c.metric;
  for (std::size_t i = 0; i < n; ++i) r.records.push_back({c.seeds[i % c.seeds.size()], i / c.seeds.size(), values[i]});
  std::tie(r.mean, r.std_dev) = mean_std(values);
  r.config = to_json(c);
  r.config_fingerprint = config_fingerprint(c);
  r.timestamp = utc_timestamp();
  for (const auto& s : d.split.subsets) r.missing_classes.push_back(missing_classes(s, d.task.num_classes));
  return r;
}

// ---------------------------------------------------------------------------
// Sweeps

enum class SweepAxis { kUnlabeledCount, kK, kAlpha, kPc };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "unlabeled_count") return SweepAxis::kUnlabeledCount;
  if (s == "K") return SweepAxis::kK;
  if (s == "alpha") return SweepAxis::kAlpha;
  if (s == "p_c") return SweepAxis::kPc;
  throw std::invalid_argument("unknown sweep axis '" + s + "' (expected unlabeled_count, K, alpha or p_c)");
}

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::kUnlabeledCount: return "unlabeled_count";
    case SweepAxis::kK: return "K";
    case SweepAxis::kAlpha: return "alpha";
    case SweepAxis::kPc: return "p_c";
  }
  return "";
}

inline RunConfig with_axis(RunConfig c, SweepAxis axis, double value) {
  auto count = [&](const char* what) {
    if (!(value >= 0.0) || value != std::floor(value))
      throw std::invalid_argument(std::string(what) + " values must be non-negative integers");
    return static_cast<std::size_t>(value);
  };
  switch (axis) {
    case SweepAxis::kUnlabeledCount: c.unlabeled_count = count("unlabeled_count"); break;
    case SweepAxis::kK: c.k = count("K"); break;
    case SweepAxis::kAlpha: c.alpha = value; break;
    case SweepAxis::kPc: c.p_c = value; break;
  }
  c.validate();
  return c;
}

/// One protocol run per value; each row summarizes its report.
inline nlohmann::json sweep(const RunConfig& base, SweepAxis axis, const std::vector<double>& values,
                            const std::string& method, std::size_t jobs = 1) {
  if (values.empty()) throw std::invalid_argument("sweep: no values");
  std::vector<RunConfig> configs;
  for (double v : values) configs.push_back(with_axis(base, axis, v));
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto report = run_protocol(configs[i], method, jobs);
    rows.push_back({{"axis", to_string(axis)},
                    {"value", values[i]},
                    {"method", report.method},
                    {"subset_size", report.subset_size},
                    {"records", report.records.size()},
                    {"mean", report.mean},
                    {"std", report.std_dev},
                    {"std_kind", "population"},
                    {"config_fingerprint", report.config_fingerprint}});
  }
  return rows;
}

}  // namespace cmlm
