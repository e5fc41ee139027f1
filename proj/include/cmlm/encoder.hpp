#pragma once

// Small post-layer-norm transformer encoder.
//
//   X = tok_emb[ids] + pos_emb[0..N)
//   per layer:  X = LN(X + Attn(X));  X = LN(X + W2 gelu(W1 X))
//
// Attention excludes PAD keys. The MLM output projection is tied to the
// token embedding; the classifier head and the SimSiam predictor live here
// too so a checkpoint carries the whole learnable state.

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cmlm/autograd.hpp"
#include "cmlm/rng.hpp"
#include "cmlm/text.hpp"

namespace cmlm {

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t hidden = 64;
  std::size_t ffn = 256;
  std::size_t vocab = 2000;
  std::size_t max_len = 64;
  std::size_t num_classes = 2;
  double dropout = 0.1;
  double layer_norm_eps = 1e-5;

  void validate() const {
    if (layers == 0 || heads == 0 || hidden == 0 || ffn == 0)
      throw std::invalid_argument("encoder config: layers, heads, hidden and ffn must be positive");
    if (hidden % heads != 0)
      throw std::invalid_argument("encoder config: hidden " + std::to_string(hidden) + " not divisible by heads " +
                                  std::to_string(heads));
    if (max_len < 3) throw std::invalid_argument("encoder config: max_len must be at least 3");
    if (vocab <= static_cast<std::size_t>(Vocabulary::kNumSpecial))
      throw std::invalid_argument("encoder config: vocab must exceed the special tokens");
    if (num_classes < 2) throw std::invalid_argument("encoder config: num_classes must be at least 2");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("encoder config: dropout must lie in [0, 1)");
    if (!(layer_norm_eps > 0.0)) throw std::invalid_argument("encoder config: layer_norm_eps must be positive");
  }
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <typename T>
struct EncoderLayer {
  // No key bias: it shifts every score of a query equally, which softmax
  // ignores.
  ag::Tensor<T> wq, bq, wk, wv, bv, wo, bo;
  ag::Tensor<T> ln1_gain, ln1_bias;
  ag::Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  ag::Tensor<T> ln2_gain, ln2_bias;
};

template <typename T>
struct EncoderParams {
  EncoderConfig config;
  ag::Tensor<T> token_embedding;     // [V, d]
  ag::Tensor<T> position_embedding;  // [max_len, d]
  std::vector<EncoderLayer<T>> layers;
  ag::Tensor<T> mlm_bias;            // [V]
  ag::Tensor<T> classifier_w;        // [d, C]
  ag::Tensor<T> classifier_b;        // [C]
  ag::Tensor<T> predictor_w1;        // [d, d]
  ag::Tensor<T> predictor_w2;        // [d, d]

  /// Every learnable tensor with a stable name, in a fixed order.
  std::vector<std::pair<std::string, ag::Tensor<T>>> named() const {
    std::vector<std::pair<std::string, ag::Tensor<T>>> out;
    out.emplace_back("token_embedding", token_embedding);
    out.emplace_back("position_embedding", position_embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      out.emplace_back(p + "attn.wq", L.wq);
      out.emplace_back(p + "attn.bq", L.bq);
      out.emplace_back(p + "attn.wk", L.wk);
      out.emplace_back(p + "attn.wv", L.wv);
      out.emplace_back(p + "attn.bv", L.bv);
      out.emplace_back(p + "attn.wo", L.wo);
      out.emplace_back(p + "attn.bo", L.bo);
      out.emplace_back(p + "ln1.gain", L.ln1_gain);
      out.emplace_back(p + "ln1.bias", L.ln1_bias);
      out.emplace_back(p + "ffn.w1", L.ffn_w1);
      out.emplace_back(p + "ffn.b1", L.ffn_b1);
      out.emplace_back(p + "ffn.w2", L.ffn_w2);
      out.emplace_back(p + "ffn.b2", L.ffn_b2);
      out.emplace_back(p + "ln2.gain", L.ln2_gain);
      out.emplace_back(p + "ln2.bias", L.ln2_bias);
    }
    out.emplace_back("mlm_bias", mlm_bias);
    out.emplace_back("classifier.w", classifier_w);
    out.emplace_back("classifier.b", classifier_b);
    out.emplace_back("predictor.w1", predictor_w1);
    out.emplace_back("predictor.w2", predictor_w2);
    return out;
  }

  std::vector<ag::Tensor<T>> tensors() const {
    std::vector<ag::Tensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (auto t : tensors()) t.zero_grad();
  }

  /// Tensors are shared handles; this copies the values into fresh leaves.
  EncoderParams clone() const { return map([](const ag::Tensor<T>& t) { return t.clone(); }); }

  template <typename U>
  EncoderParams<U> cast() const {
    return map_to<U>([](const ag::Tensor<T>& t) { return t.template cast<U>(true); });
  }

 private:
  template <typename F>
  EncoderParams map(F f) const {
    return map_to<T>(f);
  }
  template <typename U, typename F>
  EncoderParams<U> map_to(F f) const {
    EncoderParams<U> o;
    o.config = config;
    o.token_embedding = f(token_embedding);
    o.position_embedding = f(position_embedding);
    for (const auto& L : layers) {
      EncoderLayer<U> M;
      M.wq = f(L.wq), M.bq = f(L.bq), M.wk = f(L.wk);
      M.wv = f(L.wv), M.bv = f(L.bv), M.wo = f(L.wo), M.bo = f(L.bo);
      M.ln1_gain = f(L.ln1_gain), M.ln1_bias = f(L.ln1_bias);
      M.ffn_w1 = f(L.ffn_w1), M.ffn_b1 = f(L.ffn_b1), M.ffn_w2 = f(L.ffn_w2), M.ffn_b2 = f(L.ffn_b2);
      M.ln2_gain = f(L.ln2_gain), M.ln2_bias = f(L.ln2_bias);
      o.layers.push_back(std::move(M));
    }
    o.mlm_bias = f(mlm_bias);
    o.classifier_w = f(classifier_w);
    o.classifier_b = f(classifier_b);
    o.predictor_w1 = f(predictor_w1);
    o.predictor_w2 = f(predictor_w2);
    return o;
  }
};

inline constexpr double kInitStd = 0.02;

/// Weights ~ Normal(0, 0.02); biases 0; layer-norm gains 1.
template <typename T>
EncoderParams<T> init_params(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  std::normal_distribution<double> normal(0.0, kInitStd);
  const std::size_t d = cfg.hidden;
  auto weight = [&](ag::Shape s) {
    std::vector<T> v(ag::shape_size(s));
    for (auto& x : v) x = static_cast<T>(normal(rng));
    return ag::Tensor<T>::from(std::move(s), std::move(v), true);
  };
  auto zeros = [](ag::Shape s) { return ag::Tensor<T>::zeros(std::move(s), true); };
  auto ones = [](ag::Shape s) { return ag::Tensor<T>::filled(std::move(s), T(1), true); };

  EncoderParams<T> p;
  p.config = cfg;
  p.token_embedding = weight({cfg.vocab, d});
  p.position_embedding = weight({cfg.max_len, d});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    EncoderLayer<T> L;
    L.wq = weight({d, d}), L.bq = zeros({d});
    L.wk = weight({d, d});
    L.wv = weight({d, d}), L.bv = zeros({d});
    L.wo = weight({d, d}), L.bo = zeros({d});
    L.ln1_gain = ones({d}), L.ln1_bias = zeros({d});
    L.ffn_w1 = weight({d, cfg.ffn}), L.ffn_b1 = zeros({cfg.ffn});
    L.ffn_w2 = weight({cfg.ffn, d}), L.ffn_b2 = zeros({d});
    L.ln2_gain = ones({d}), L.ln2_bias = zeros({d});
    p.layers.push_back(std::move(L));
  }
  p.mlm_bias = zeros({cfg.vocab});
  p.classifier_w = weight({d, cfg.num_classes});
  p.classifier_b = zeros({cfg.num_classes});
  p.predictor_w1 = weight({d, d});
  p.predictor_w2 = weight({d, d});
  return p;
}

/// Dropout is applied iff `rng` is non-null and the config rate is positive.
struct ForwardMode {
  Rng* dropout_rng = nullptr;
  bool train() const { return dropout_rng != nullptr; }
};

inline constexpr double kAttentionMaskValue = -1e9;

namespace detail {

template <typename T>
ag::Tensor<T> maybe_dropout(const ag::Tensor<T>& x, double rate, const ForwardMode& mode) {
  if (!mode.train() || rate == 0.0) return x;
  return ag::dropout(x, rate, *mode.dropout_rng);
}

template <typename T>
ag::Tensor<T> affine_norm(const ag::Tensor<T>& x, const ag::Tensor<T>& gain, const ag::Tensor<T>& bias, double eps) {
  return ag::add(ag::mul(ag::layer_norm(x, T(eps)), gain), bias);
}

}  // namespace detail

/// Per-token representations H [N, d] for a token id sequence.
template <typename T>
ag::Tensor<T> encode_tokens(const EncoderParams<T>& p, std::span<const int> ids, ForwardMode mode = {}) {
  const auto& cfg = p.config;
  const std::size_t n = ids.size(), d = cfg.hidden, heads = cfg.heads, dh = d / heads;
  if (n == 0) throw std::invalid_argument("encode_tokens: empty sequence");
  if (n > cfg.max_len)
    throw std::length_error("encode_tokens: sequence length " + std::to_string(n) + " exceeds max_len " +
                            std::to_string(cfg.max_len));

  // Additive key mask: 0 for real tokens, large negative for PAD.
  std::vector<T> key_mask(n);
  for (std::size_t j = 0; j < n; ++j) key_mask[j] = ids[j] == Vocabulary::kPad ? T(kAttentionMaskValue) : T(0);
  const auto mask = ag::Tensor<T>::from({n}, std::move(key_mask));

  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  auto x = ag::add(ag::embedding_lookup(p.token_embedding, ids), ag::gather_rows(p.position_embedding, std::span<const std::size_t>(positions)));
  x = detail::maybe_dropout(x, cfg.dropout, mode);

  const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));
  for (const auto& L : p.layers) {
    auto q = ag::add(ag::matmul(x, L.wq), L.bq);
    auto k = ag::matmul(x, L.wk);
    auto v = ag::add(ag::matmul(x, L.wv), L.bv);
    std::vector<ag::Tensor<T>> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = ag::slice_cols(q, h * dh, (h + 1) * dh);
      auto kh = ag::slice_cols(k, h * dh, (h + 1) * dh);
      auto vh = ag::slice_cols(v, h * dh, (h + 1) * dh);
      auto scores = ag::add(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt_dh), mask);
      auto attn = detail::maybe_dropout(ag::softmax(scores), cfg.dropout, mode);
      head_out.push_back(ag::matmul(attn, vh));
    }
    auto attn_out = ag::add(ag::matmul(ag::concat(head_out, 1), L.wo), L.bo);
    attn_out = detail::maybe_dropout(attn_out, cfg.dropout, mode);
    x = detail::affine_norm(ag::add(x, attn_out), L.ln1_gain, L.ln1_bias, cfg.layer_norm_eps);

    auto ff = ag::gelu(ag::add(ag::matmul(x, L.ffn_w1), L.ffn_b1));
    ff = ag::add(ag::matmul(ff, L.ffn_w2), L.ffn_b2);
    ff = detail::maybe_dropout(ff, cfg.dropout, mode);
    x = detail::affine_norm(ag::add(x, ff), L.ln2_gain, L.ln2_bias, cfg.layer_norm_eps);
  }
  return x;
}

/// First-token representation h = H[0].
template <typename T>
ag::Tensor<T> pool_first(const ag::Tensor<T>& H) {
  if (H.rank() != 2 || H.dim(0) == 0) throw ag::ShapeError("pool_first: expected [N>=1, d], got " + ag::shape_str(H.shape()));
  return ag::row(H, 0);
}

/// Classifier logits [C] from the pooled representation.
template <typename T>
ag::Tensor<T> classify(const EncoderParams<T>& p, const ag::Tensor<T>& h) {
  auto h2 = ag::reshape(h, {1, h.size()});
  return ag::reshape(ag::add(ag::matmul(h2, p.classifier_w), p.classifier_b), {p.config.num_classes});
}

/// Attention probabilities of one layer/head in eval mode, for inspection.
template <typename T>
std::vector<T> attention_weights(const EncoderParams<T>& p, std::span<const int> ids, std::size_t layer, std::size_t head) {
  // Re-run the stack up to `layer` and expose that layer's softmax.
  EncoderParams<T> prefix = p;
  prefix.layers.assign(p.layers.begin(), p.layers.begin() + static_cast<std::ptrdiff_t>(layer));
  const std::size_t n = ids.size(), d = p.config.hidden, dh = d / p.config.heads;
  ag::Tensor<T> x;
  if (layer == 0) {
    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = i;
    x = ag::add(ag::embedding_lookup(p.token_embedding, ids), ag::gather_rows(p.position_embedding, std::span<const std::size_t>(positions)));
  } else {
    x = encode_tokens(prefix, ids);
  }
  std::vector<T> key_mask(n);
  for (std::size_t j = 0; j < n; ++j) key_mask[j] = ids[j] == Vocabulary::kPad ? T(kAttentionMaskValue) : T(0);
  const auto& L = p.layers.at(layer);
  auto q = ag::slice_cols(ag::add(ag::matmul(x, L.wq), L.bq), head * dh, (head + 1) * dh);
  auto k = ag::slice_cols(ag::matmul(x, L.wk), head * dh, (head + 1) * dh);
  auto scores = ag::add(ag::scale(ag::matmul_nt(q, k), T(1) / std::sqrt(T(dh))), ag::Tensor<T>::from({n}, std::move(key_mask)));
  auto a = ag::softmax(scores);
  return {a.values().begin(), a.values().end()};
}

}  // namespace cmlm
