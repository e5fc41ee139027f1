#pragma once

// Token-level (MLM) and sequence-level (SimCLR, SimSiam) objectives and
// their combinations.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmlm/autograd.hpp"
#include "cmlm/encoder.hpp"
#include "cmlm/masking.hpp"

namespace cmlm {

enum class ClVariant { kSimSiam, kSimClr };

inline ClVariant parse_cl_variant(const std::string& s) {
  if (s == "simsiam") return ClVariant::kSimSiam;
  if (s == "simclr") return ClVariant::kSimClr;
  throw std::invalid_argument("unknown contrastive variant '" + s + "' (expected simsiam or simclr)");
}
inline std::string to_string(ClVariant v) { return v == ClVariant::kSimSiam ? "simsiam" : "simclr"; }

inline constexpr double kDefaultTemperature = 0.1;

/// Pooled representations: views[0] holds the anchors h_b^0 as a [B, d]
/// matrix, views[k] the k-th masked view of the same B sequences.
template <typename T>
struct ContrastiveBatch {
  std::vector<ag::Tensor<T>> views;

  std::size_t batch() const { return views.at(0).dim(0); }
  std::size_t num_views() const { return views.size() - 1; }

  void validate() const {
    if (views.size() < 2) throw std::invalid_argument("contrastive batch: need the anchor view and K >= 1 views");
    const auto& s = views[0].shape();
    if (s.size() != 2 || s[0] == 0) throw ag::ShapeError("contrastive batch: views must be [B>=1, d], got " + ag::shape_str(s));
    for (const auto& v : views)
      if (v.shape() != s) ag::shape_fail("contrastive batch", s, v.shape());
    for (const auto& v : views)
      for (T x : v.values())
        if (!std::isfinite(x)) throw std::domain_error("contrastive batch: non-finite representation");
  }
};

/// Stacks per-sequence pooled vectors `pooled[k][b]` ([d] each) into a batch.
template <typename T>
ContrastiveBatch<T> stack_views(const std::vector<std::vector<ag::Tensor<T>>>& pooled) {
  ContrastiveBatch<T> out;
  for (const auto& view : pooled) {
    std::vector<ag::Tensor<T>> rows;
    for (const auto& h : view) rows.push_back(ag::reshape(h, {1, h.size()}));
    out.views.push_back(ag::concat(rows, 0));
  }
  return out;
}

template <typename T>
struct LossBreakdown {
  ag::Tensor<T> mlm;
  ag::Tensor<T> cl;
  ag::Tensor<T> total;
  double alpha = 0.0;
};

/// Cross-entropy over the vocabulary at every labelled position (MASK, KEEP
/// and RANDOM alike), averaged within each sequence and then across the
/// sequences that have at least one labelled position. Logits use the
/// token embedding as the output projection plus `bias`.
template <typename T>
ag::Tensor<T> mlm_loss(const std::vector<ag::Tensor<T>>& hidden, const std::vector<std::vector<int>>& labels,
                       const ag::Tensor<T>& embedding, const ag::Tensor<T>& bias) {
  if (hidden.size() != labels.size())
    throw std::invalid_argument("mlm_loss: " + std::to_string(hidden.size()) + " sequences but " +
                                std::to_string(labels.size()) + " label rows");
  std::vector<ag::Tensor<T>> per_seq;
  for (std::size_t b = 0; b < hidden.size(); ++b) {
    if (labels[b].size() != hidden[b].dim(0))
      throw ag::ShapeError("mlm_loss: label row " + std::to_string(b) + " has length " +
                           std::to_string(labels[b].size()) + " for hidden " + ag::shape_str(hidden[b].shape()));
    std::vector<std::size_t> rows;
    std::vector<int> targets;
    for (std::size_t i = 0; i < labels[b].size(); ++i)
      if (labels[b][i] != kIgnoreLabel) rows.push_back(i), targets.push_back(labels[b][i]);
    if (rows.empty()) continue;
    auto picked = ag::gather_rows(hidden[b], std::span<const std::size_t>(rows));
    auto logits = ag::add(ag::matmul_nt(picked, embedding), bias);
    per_seq.push_back(ag::reshape(ag::mean(ag::cross_entropy(logits, std::span<const int>(targets))), {1}));
  }
  if (per_seq.empty()) throw std::invalid_argument("mlm_loss: no selected positions in the batch");
  return ag::mean(ag::concat(per_seq, 0));
}

template <typename T>
ag::Tensor<T> mlm_loss(const std::vector<ag::Tensor<T>>& hidden, const std::vector<std::vector<int>>& labels,
                       const EncoderParams<T>& params) {
  return mlm_loss(hidden, labels, params.token_embedding, params.mlm_bias);
}

/// (u/|u|) . (v/|v|) for rank-1 tensors of equal length.
template <typename T>
ag::Tensor<T> cosine_sim(const ag::Tensor<T>& u, const ag::Tensor<T>& v) {
  if (u.rank() != 1 || u.shape() != v.shape()) ag::shape_fail("cosine_sim", u.shape(), v.shape());
  return ag::sum(ag::mul(ag::l2_normalize(u), ag::l2_normalize(v)));
}

namespace detail {

// Row-wise dot products of two [B, d] matrices -> [B].
template <typename T>
ag::Tensor<T> row_dot(const ag::Tensor<T>& a, const ag::Tensor<T>& b) {
  auto ones = ag::Tensor<T>::filled({a.dim(1), 1}, T(1));
  return ag::reshape(ag::matmul(ag::mul(a, b), ones), {a.dim(0)});
}

}  // namespace detail

/// -1/(K B) sum_k sum_b log( exp(sim(h_b^k, h_b^0)/tau) /
///                           sum_i exp(sim(h_i^k, h_b^0)/tau) )
/// The denominator ranges over the view-k representations of all B
/// sequences (including the positive) against the anchor h_b^0.
template <typename T>
ag::Tensor<T> simclr_loss(const ContrastiveBatch<T>& batch, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("simclr_loss: temperature must be positive");
  batch.validate();
  const std::size_t B = batch.batch(), K = batch.num_views();
  std::vector<int> targets(B);
  for (std::size_t b = 0; b < B; ++b) targets[b] = static_cast<int>(b);
  auto anchors = ag::l2_normalize(batch.views[0]);
  std::vector<ag::Tensor<T>> terms;
  for (std::size_t k = 1; k <= K; ++k) {
    // sims[b][i] = sim(h_i^k, h_b^0)
    auto sims = ag::scale(ag::matmul_nt(anchors, ag::l2_normalize(batch.views[k])), T(1.0 / tau));
    for (T s : sims.values())
      if (!std::isfinite(s)) throw std::domain_error("simclr_loss: non-finite similarity");
    terms.push_back(ag::cross_entropy(sims, std::span<const int>(targets)));
  }
  return ag::mean(ag::concat(terms, 0));
}

/// z = W2 gelu(W1 h), applied row-wise to a [B, d] matrix.
template <typename T>
ag::Tensor<T> simsiam_predict(const ag::Tensor<T>& h, const ag::Tensor<T>& w1, const ag::Tensor<T>& w2) {
  return ag::matmul(ag::gelu(ag::matmul(h, w1)), w2);
}

/// Per-pair SimSiam values exp(-(D(z_b^k, h_b^0) + D(z_b^0, h_b^k)) / 2),
/// k-major, as a [K * B] tensor. Predictions come from `online`; targets
/// from `targets` pass through stop_gradient. Both batches must have the
/// same shape.
template <typename T>
ag::Tensor<T> simsiam_pairs(const ContrastiveBatch<T>& online, const ContrastiveBatch<T>& targets,
                            const ag::Tensor<T>& w1, const ag::Tensor<T>& w2) {
  online.validate();
  targets.validate();
  if (online.views.size() != targets.views.size() || online.views[0].shape() != targets.views[0].shape())
    ag::shape_fail("simsiam_loss", online.views[0].shape(), targets.views[0].shape());
  const std::size_t K = online.num_views();
  std::vector<ag::Tensor<T>> z_hat, h_hat;
  for (std::size_t k = 0; k <= K; ++k) {
    z_hat.push_back(ag::l2_normalize(simsiam_predict(online.views[k], w1, w2)));
    h_hat.push_back(ag::l2_normalize(ag::stop_gradient(targets.views[k])));
  }
  std::vector<ag::Tensor<T>> pairs;
  for (std::size_t k = 1; k <= K; ++k) {
    auto d_sum = ag::add(detail::row_dot(z_hat[k], h_hat[0]), detail::row_dot(z_hat[0], h_hat[k]));
    pairs.push_back(ag::exp(ag::scale(d_sum, T(-0.5))));
  }
  return ag::concat(pairs, 0);
}

/// 1/(K B) sum_k sum_b exp(-(D(z_b^k, h_b^0) + D(z_b^0, h_b^k)) / 2) with
/// D(z, h) = sim(z, stop_gradient(h)).
template <typename T>
ag::Tensor<T> simsiam_loss(const ContrastiveBatch<T>& batch, const ag::Tensor<T>& w1, const ag::Tensor<T>& w2) {
  return ag::mean(simsiam_pairs(batch, batch, w1, w2));
}

/// Variant where the stop-gradient targets come from a separate batch.
template <typename T>
ag::Tensor<T> simsiam_loss(const ContrastiveBatch<T>& online, const ContrastiveBatch<T>& targets,
                           const ag::Tensor<T>& w1, const ag::Tensor<T>& w2) {
  return ag::mean(simsiam_pairs(online, targets, w1, w2));
}

template <typename T>
ag::Tensor<T> contrastive_loss(const ContrastiveBatch<T>& batch, ClVariant variant, double tau,
                               const EncoderParams<T>& params) {
  return variant == ClVariant::kSimSiam ? simsiam_loss(batch, params.predictor_w1, params.predictor_w2)
                                        : simclr_loss(batch, tau);
}

/// total = mlm + alpha * cl.
template <typename T>
LossBreakdown<T> combine_losses(const ag::Tensor<T>& mlm, const ag::Tensor<T>& cl, double alpha) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("cmlm_loss: alpha must be non-negative");
  return {mlm, cl, ag::add(mlm, ag::scale(cl, T(alpha))), alpha};
}

template <typename T>
LossBreakdown<T> cmlm_loss(const std::vector<ag::Tensor<T>>& hidden0, const std::vector<std::vector<int>>& labels,
                           const ContrastiveBatch<T>& batch, double alpha, ClVariant variant, double tau,
                           const EncoderParams<T>& params) {
  if (!(alpha >= 0.0)) throw std::invalid_argument("cmlm_loss: alpha must be non-negative");
  auto mlm = mlm_loss(hidden0, labels, params);
  auto cl = contrastive_loss(batch, variant, tau, params);
  return combine_losses(mlm, cl, alpha);
}

/// Contrastive loss alone over augmenter view pairs (anchor + one view).
template <typename T>
ag::Tensor<T> cssl_loss(const ContrastiveBatch<T>& pairs, ClVariant variant, double tau, const EncoderParams<T>& params) {
  if (pairs.views.size() != 2)
    throw std::invalid_argument("cssl_loss: expected exactly 2 views per sequence, got " + std::to_string(pairs.views.size()));
  return contrastive_loss(pairs, variant, tau, params);
}

}  // namespace cmlm
