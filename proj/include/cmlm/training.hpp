#pragma once

// AdamW, the post-training loop (CMLM / TAPT / CSSL), fine-tuning with a
// classification head, and the binary checkpoint format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cmlm/autograd.hpp"
#include "cmlm/encoder.hpp"
#include "cmlm/masking.hpp"
#include "cmlm/metrics.hpp"
#include "cmlm/objectives.hpp"
#include "cmlm/rng.hpp"
#include "cmlm/text.hpp"
#include "json.hpp"

namespace cmlm {

// ---------------------------------------------------------------------------
// Configuration

enum class ObjectiveKind { kCmlm, kTapt, kCssl, kNone };

struct Objective {
  ObjectiveKind kind = ObjectiveKind::kCmlm;
  std::string augmenter;  // set for kCssl

  static Objective parse(const std::string& s) {
    if (s == "cmlm") return {ObjectiveKind::kCmlm, {}};
    if (s == "tapt") return {ObjectiveKind::kTapt, {}};
    if (s == "none") return {ObjectiveKind::kNone, {}};
    if (s.rfind("cssl:", 0) == 0) {
      const std::string aug = s.substr(5);
      augmenter_for(aug);  // throws on unknown names
      return {ObjectiveKind::kCssl, aug};
    }
    throw std::invalid_argument("unknown objective '" + s + "' (expected cmlm, tapt, cssl:<augmenter> or none)");
  }
  std::string str() const {
    switch (kind) {
      case ObjectiveKind::kCmlm: return "cmlm";
      case ObjectiveKind::kTapt: return "tapt";
      case ObjectiveKind::kCssl: return "cssl:" + augmenter;
      case ObjectiveKind::kNone: return "none";
    }
    return "none";
  }
};

struct TrainConfig {
  double lr = 1e-5;
  std::size_t epochs = 5;
  std::size_t batch_size = 8;
  double alpha = 0.5;
  double p_m = 0.15;
  double p_c = 0.7;
  std::size_t k = 1;
  double tau = kDefaultTemperature;
  ClVariant cl_variant = ClVariant::kSimSiam;
  Objective objective;
  std::uint64_t seed = 42;
  double weight_decay = 0.01;
  double dropout = 0.1;
  std::size_t checkpoint_interval = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  double eda_rate = 0.1;
  Metric metric = Metric::kAccuracy;

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be at least 1");
    if (checkpoint_interval == 0) throw std::invalid_argument("train config: checkpoint_interval must be at least 1");
    if (k == 0) throw std::invalid_argument("train config: K must be at least 1");
    if (!(alpha >= 0.0)) throw std::invalid_argument("train config: alpha must be non-negative");
    if (!(tau > 0.0)) throw std::invalid_argument("train config: tau must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("train config: weight_decay must be non-negative");
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("train config: grad_clip must be non-negative");
    require_probability("p_m", p_m);
    require_probability("p_c", p_c);
    require_probability("eda_rate", eda_rate);
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("train config: dropout must lie in [0, 1)");
  }
};

// ---------------------------------------------------------------------------
// AdamW

template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

struct AdamHyper {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One AdamW update over named parameters using their current gradients.
/// Decoupled decay p <- p - lr * wd * p is applied before the Adam step.
template <typename T>
void adamw_step(const std::vector<std::pair<std::string, ag::Tensor<T>>>& params, AdamState<T>& state,
                const AdamHyper& h) {
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.size(), T(0));
      state.v.emplace_back(p.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adamw_step: optimizer state does not match parameters");
  for (std::size_t t = 0; t < params.size(); ++t) {
    const auto& [name, p] = params[t];
    if (state.m[t].size() != p.size()) throw ag::ShapeError("adamw_step: state shape mismatch for " + name);
    if (p.has_grad())
      for (T g : p.grad())
        if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient in parameter " + name);
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  const T decay = T(1.0 - h.lr * h.weight_decay);
  for (std::size_t t = 0; t < params.size(); ++t) {
    ag::Tensor<T> p = params[t].second;
    auto w = p.mutable_values();
    const bool has_grad = p.has_grad();
    auto& m = state.m[t];
    auto& v = state.v[t];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T g = has_grad ? p.grad()[i] : T(0);
      if (h.weight_decay != 0.0) w[i] *= decay;
      m[i] = T(h.beta1) * m[i] + T(1.0 - h.beta1) * g;
      v[i] = T(h.beta2) * v[i] + T(1.0 - h.beta2) * g * g;
      const T mhat = m[i] / T(bc1);
      const T vhat = v[i] / T(bc2);
      w[i] -= T(h.lr) * mhat / (std::sqrt(vhat) + T(h.eps));
    }
  }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
template <typename T>
void clip_grad_norm(const std::vector<std::pair<std::string, ag::Tensor<T>>>& params, double max_norm) {
  double ss = 0.0;
  for (const auto& [name, p] : params)
    if (p.has_grad())
      for (T g : p.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(ss);
  if (norm <= max_norm || norm == 0.0) return;
  const T s = T(max_norm / norm);
  for (auto [name, p] : params)
    if (p.has_grad())
      for (auto& g : p.mutable_grad()) g *= s;
}

inline AdamHyper adam_hyper(const TrainConfig& c) {
  return {c.lr, c.beta1, c.beta2, c.adam_eps, c.weight_decay};
}

// ---------------------------------------------------------------------------
// Post-training

struct PostTrainResult {
  std::vector<double> total_trace;
  std::vector<double> mlm_trace;
  std::vector<double> cl_trace;
  std::size_t steps = 0;
};

namespace detail {

// Stream tags keep masking, shuffling and dropout randomness independent,
// so e.g. T^0 of a sequence does not depend on how many CRM views follow.
enum StreamTag : std::uint64_t { kShuffleStream = 1, kMaskStream = 2, kDropoutStream = 3, kInitStream = 4 };

inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  Rng rng = derive_rng(seed, {kShuffleStream, epoch});
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  return order;
}

template <typename T>
ag::Tensor<T> encode_view(const EncoderParams<T>& params, std::span<const int> ids, std::uint64_t seed,
                          std::size_t step, std::size_t slot, std::size_t view) {
  Rng drop = derive_rng(seed, {kDropoutStream, step, slot, view});
  return encode_tokens(params, ids, ForwardMode{&drop});
}

}  // namespace detail

/// Post-trains `params` in place on unlabeled sequences with the configured
/// objective and returns the per-step loss traces.
template <typename T>
PostTrainResult post_train(EncoderParams<T>& params, const std::vector<TokenSequence>& data, const Vocabulary& vocab,
                           const TrainConfig& cfg) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("post_train: empty dataset");
  if (cfg.objective.kind == ObjectiveKind::kNone) throw std::invalid_argument("post_train: objective 'none' has nothing to train");
  params.config.dropout = cfg.dropout;
  const auto named = params.named();
  AdamState<T> opt;
  const AdamHyper hyper = adam_hyper(cfg);
  std::optional<Augmenter> augmenter;
  if (cfg.objective.kind == ObjectiveKind::kCssl)
    augmenter = augmenter_for(cfg.objective.augmenter, AugmenterParams{cfg.p_m, cfg.p_c, cfg.eda_rate, {}});

  PostTrainResult res;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(cfg.seed, epoch, data.size());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      params.zero_grad();
      ag::Tensor<T> total, mlm_value, cl_value;

      if (augmenter) {
        std::vector<std::vector<ag::Tensor<T>>> pooled(2);
        for (std::size_t j = start; j < end; ++j) {
          Rng mask_rng = derive_rng(cfg.seed, {detail::kMaskStream, epoch, order[j]});
          const ViewPair views = (*augmenter)(data[order[j]], vocab, mask_rng);
          pooled[0].push_back(pool_first(detail::encode_view(params, views.first, cfg.seed, step, j - start, 0)));
          pooled[1].push_back(pool_first(detail::encode_view(params, views.second, cfg.seed, step, j - start, 1)));
        }
        total = cl_value = cssl_loss(stack_views(pooled), cfg.cl_variant, cfg.tau, params);
      } else {
        const bool with_cl = cfg.objective.kind == ObjectiveKind::kCmlm;
        // Re-mask the whole batch with a fresh stream if nothing was selected.
        std::vector<std::vector<ag::Tensor<T>>> pooled;
        std::vector<ag::Tensor<T>> hidden0;
        std::vector<std::vector<int>> labels;
        for (std::uint64_t attempt = 0;; ++attempt) {
          std::vector<CrmBatch> masked;
          std::size_t selected = 0;
          for (std::size_t j = start; j < end; ++j) {
            Rng mask_rng = attempt == 0 ? derive_rng(cfg.seed, {detail::kMaskStream, epoch, order[j]})
                                        : derive_rng(cfg.seed, {detail::kMaskStream, epoch, order[j], attempt});
            CrmBatch b;
            if (with_cl)
              b = make_crm_batch(data[order[j]], cfg.k, cfg.p_m, cfg.p_c, vocab, mask_rng);
            else
              b.anchor = drm(data[order[j]], cfg.p_m, vocab, mask_rng);
            selected += b.anchor.pattern.selected_count();
            masked.push_back(std::move(b));
          }
          if (selected > 0) {
            pooled.assign(with_cl ? cfg.k + 1 : 1, {});
            for (std::size_t j = 0; j < masked.size(); ++j) {
              auto H0 = detail::encode_view(params, masked[j].anchor.corrupted, cfg.seed, step, j, 0);
              hidden0.push_back(H0);
              labels.push_back(masked[j].anchor.labels);
              if (!with_cl) continue;
              pooled[0].push_back(pool_first(H0));
              for (std::size_t k = 0; k < cfg.k; ++k)
                pooled[k + 1].push_back(
                    pool_first(detail::encode_view(params, masked[j].views[k].corrupted, cfg.seed, step, j, k + 1)));
            }
            break;
          }
          if (attempt >= 64) throw std::runtime_error("post_train: could not select any masked position in batch");
        }
        mlm_value = mlm_loss(hidden0, labels, params);
        if (with_cl) {
          auto parts = combine_losses(mlm_value, contrastive_loss(stack_views(pooled), cfg.cl_variant, cfg.tau, params),
                                      cfg.alpha);
          cl_value = parts.cl;
          total = parts.total;
        } else {
          total = mlm_value;
        }
      }

      ag::backward(total);
      if (cfg.grad_clip > 0.0) clip_grad_norm(named, cfg.grad_clip);
      adamw_step(named, opt, hyper);
      res.total_trace.push_back(static_cast<double>(total.item()));
      res.mlm_trace.push_back(mlm_value.defined() ? static_cast<double>(mlm_value.item()) : 0.0);
      res.cl_trace.push_back(cl_value.defined() ? static_cast<double>(cl_value.item()) : 0.0);
    }
  }
  res.steps = step;
  return res;
}

// ---------------------------------------------------------------------------
// Fine-tuning

struct EncodedExample {
  TokenSequence seq;
  int label = 0;
};

inline std::vector<EncodedExample> encode_examples(const std::vector<LabeledExample>& xs, const Vocabulary& vocab,
                                                   std::size_t max_len) {
  std::vector<EncodedExample> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back({encode(x, vocab, max_len), x.label});
  return out;
}

template <typename T>
std::vector<int> predict(const EncoderParams<T>& params, const std::vector<EncodedExample>& xs) {
  std::vector<int> out;
  out.reserve(xs.size());
  for (const auto& x : xs) {
    auto logits = classify(params, pool_first(encode_tokens(params, x.seq.ids)));
    const auto v = logits.values();
    out.push_back(static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin()));
  }
  return out;
}

template <typename T>
double evaluate(const EncoderParams<T>& params, const std::vector<EncodedExample>& xs, Metric metric) {
  std::vector<int> gold;
  for (const auto& x : xs) gold.push_back(x.label);
  return score(metric, predict(params, xs), gold);
}

/// Index of the largest value; the earliest wins ties.
inline std::size_t select_best(std::span<const double> metrics) {
  if (metrics.empty()) throw std::invalid_argument("select_best: no evaluations");
  std::size_t best = 0;
  for (std::size_t i = 1; i < metrics.size(); ++i)
    if (metrics[i] > metrics[best]) best = i;
  return best;
}

template <typename T>
struct FineTuneResult {
  EncoderParams<T> best;
  double best_metric = 0.0;
  std::size_t best_step = 0;
  std::vector<std::pair<std::size_t, double>> evaluations;  // (step, dev metric)
  std::vector<double> loss_trace;
};

/// Trains the classifier head and encoder on uncorrupted sequences. The dev
/// set is scored every `checkpoint_interval` steps and after the final
/// step; the best-scoring snapshot (earliest on ties) is returned.
template <typename T>
FineTuneResult<T> fine_tune(EncoderParams<T>& params, const std::vector<EncodedExample>& train,
                            const std::vector<EncodedExample>& dev, const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty() || dev.empty()) throw std::invalid_argument("fine_tune: train and dev sets must be non-empty");
  for (const auto* set : {&train, &dev})
    for (const auto& x : *set)
      if (x.label < 0 || static_cast<std::size_t>(x.label) >= params.config.num_classes)
        throw std::invalid_argument("fine_tune: label " + std::to_string(x.label) + " outside the classifier's " +
                                    std::to_string(params.config.num_classes) + " classes");
  params.config.dropout = cfg.dropout;
  const auto named = params.named();
  AdamState<T> opt;
  const AdamHyper hyper = adam_hyper(cfg);
  FineTuneResult<T> res;
  std::vector<double> scores;
  auto checkpoint = [&](std::size_t step) {
    const double m = evaluate(params, dev, cfg.metric);
    res.evaluations.emplace_back(step, m);
    scores.push_back(m);
    if (scores.size() == 1 || m > res.best_metric) {
      res.best = params.clone();
      res.best_metric = m;
      res.best_step = step;
    }
  };

  std::size_t step = 0;
  bool evaluated_last = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = detail::epoch_order(cfg.seed, epoch, train.size());
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      params.zero_grad();
      std::vector<ag::Tensor<T>> losses;
      for (std::size_t j = start; j < end; ++j) {
        const auto& x = train[order[j]];
        auto h = pool_first(detail::encode_view(params, x.seq.ids, cfg.seed, step, j - start, 0));
        auto logits = classify(params, h);
        const int target[] = {x.label};
        losses.push_back(ag::cross_entropy(ag::reshape(logits, {1, logits.size()}), std::span<const int>(target)));
      }
      auto loss = ag::mean(ag::concat(losses, 0));
      ag::backward(loss);
      if (cfg.grad_clip > 0.0) clip_grad_norm(named, cfg.grad_clip);
      adamw_step(named, opt, hyper);
      res.loss_trace.push_back(static_cast<double>(loss.item()));
      ++step;
      evaluated_last = step % cfg.checkpoint_interval == 0;
      if (evaluated_last) checkpoint(step);
    }
  }
  if (!evaluated_last) checkpoint(step);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: "CMLMCKPT" | u8 version (1) | u32 LE header length | UTF-8 JSON
// header | float32 LE payloads in manifest order.

inline constexpr char kCheckpointMagic[8] = {'C', 'M', 'L', 'M', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointFormatError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"layers", c.layers},   {"heads", c.heads},     {"hidden", c.hidden},
          {"ffn", c.ffn},         {"vocab", c.vocab},     {"max_len", c.max_len},
          {"num_classes", c.num_classes}, {"dropout", c.dropout}, {"layer_norm_eps", c.layer_norm_eps}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.layers = j.at("layers").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.ffn = j.at("ffn").get<std::size_t>();
  c.vocab = j.at("vocab").get<std::size_t>();
  c.max_len = j.at("max_len").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  return c;
}

struct Checkpoint {
  std::uint8_t format_version = kCheckpointVersion;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t step = 0;
  std::string rng_state;
  std::vector<std::string> vocab;
  std::vector<std::string> labels;
  EncoderParams<float> params;
};

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  nlohmann::json header;
  header["config"] = ck.config;
  header["encoder"] = to_json(ck.params.config);
  header["step"] = ck.step;
  header["rng_state"] = ck.rng_state;
  header["vocab"] = ck.vocab;
  header["labels"] = ck.labels;
  auto manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  const auto named = ck.params.named();
  for (const auto& [name, t] : named) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size() * sizeof(float);
  }
  header["tensors"] = manifest;
  const std::string text = header.dump();

  std::string bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  bytes.push_back(static_cast<char>(ck.format_version));
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
  bytes += text;
  bytes.reserve(bytes.size() + offset);
  for (const auto& [name, t] : named)
    for (float x : t.values()) {
      const auto u = std::bit_cast<std::uint32_t>(x);
      for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
    }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t kPrefix = sizeof kCheckpointMagic + 1 + 4;
  if (bytes.size() < sizeof kCheckpointMagic || bytes.compare(0, sizeof kCheckpointMagic, kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointFormatError(path + ": bad magic bytes, not a checkpoint");
  if (bytes.size() < kPrefix) throw CheckpointFormatError(path + ": truncated header");
  Checkpoint ck;
  ck.format_version = static_cast<std::uint8_t>(bytes[sizeof kCheckpointMagic]);
  if (ck.format_version != kCheckpointVersion)
    throw CheckpointVersionError(path + ": unsupported format version " + std::to_string(ck.format_version) +
                                 " (expected " + std::to_string(kCheckpointVersion) + ")");
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i)
    len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[sizeof kCheckpointMagic + 1 + i])) << (8 * i);
  if (bytes.size() < kPrefix + len) throw CheckpointFormatError(path + ": truncated header");
  nlohmann::json header;
  EncoderConfig enc;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPrefix, bytes.begin() + kPrefix + len);
    ck.config = header.at("config");
    ck.step = header.at("step").get<std::uint64_t>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.vocab = header.at("vocab").get<std::vector<std::string>>();
    ck.labels = header.at("labels").get<std::vector<std::string>>();
    enc = encoder_config_from_json(header.at("encoder"));
    enc.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointFormatError(path + ": malformed header: " + e.what());
  } catch (const std::invalid_argument& e) {
    throw CheckpointFormatError(path + ": invalid encoder config: " + e.what());
  }
  Rng dummy(0);
  ck.params = init_params<float>(enc, dummy);
  const auto named = ck.params.named();
  const auto& manifest = header.at("tensors");
  if (!manifest.is_array()) throw CheckpointFormatError(path + ": tensor manifest is not an array");
  const std::size_t payload = kPrefix + len;
  std::size_t matched = 0;
  for (const auto& entry : manifest) {
    std::string name;
    ag::Shape shape;
    std::uint64_t offset = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<ag::Shape>();
      offset = entry.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointFormatError(path + ": malformed manifest entry: " + e.what());
    }
    auto it = std::find_if(named.begin(), named.end(), [&](const auto& p) { return p.first == name; });
    if (it == named.end()) throw CheckpointShapeError(path + ": unexpected tensor '" + name + "'");
    ag::Tensor<float> t = it->second;
    if (t.shape() != shape)
      throw CheckpointShapeError(path + ": tensor '" + name + "' has shape " + ag::shape_str(shape) +
                                 " but the recorded config implies " + ag::shape_str(t.shape()));
    const std::size_t nbytes = t.size() * sizeof(float);
    if (offset > bytes.size() || bytes.size() - payload < offset + nbytes)
      throw CheckpointFormatError(path + ": truncated payload for tensor '" + name + "'");
    auto vals = t.mutable_values();
    const char* src = bytes.data() + payload + offset;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(src[4 * i + b])) << (8 * b);
      vals[i] = std::bit_cast<float>(u);
    }
    ++matched;
  }
  if (matched != named.size()) {
    for (const auto& [name, t] : named) {
      const bool present = std::any_of(manifest.begin(), manifest.end(),
                                       [&](const auto& e) { return e.at("name").template get<std::string>() == name; });
      if (!present) throw CheckpointShapeError(path + ": tensor '" + name + "' missing from manifest");
    }
    throw CheckpointShapeError(path + ": duplicate tensors in manifest");
  }
  return ck;
}

}  // namespace cmlm
