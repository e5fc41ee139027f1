#pragma once

// Finite-difference audits of every primitive, every objective and the
// full encoder at 64-bit precision. Used by the test suites and by the
// `grad-check` command.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cmlm/autograd.hpp"
#include "cmlm/encoder.hpp"
#include "cmlm/objectives.hpp"
#include "cmlm/rng.hpp"

namespace cmlm::audit {

inline constexpr double kStep = 1e-5;
inline constexpr double kPrimitiveTolerance = 1e-6;
inline constexpr double kCompositeTolerance = 1e-4;

struct AuditResult {
  std::string name;
  ag::GradCheckResult check;
  double tolerance = 0.0;
  bool passed() const { return check.max_relative_error < tolerance; }
};

using D = double;
using TensorD = ag::Tensor<D>;

inline TensorD random_tensor(ag::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool grad = true) {
  std::vector<D> v(ag::shape_size(shape));
  for (auto& x : v) x = lo + (hi - lo) * uniform01(rng);
  return TensorD::from(std::move(shape), std::move(v), grad);
}

/// sum(w * x) for a fixed random weight tensor w, so that no output
/// direction is degenerate (e.g. softmax rows summing to one).
inline TensorD weighted_sum(const TensorD& x, std::uint64_t seed) {
  Rng rng(seed);
  return ag::sum(ag::mul(x, random_tensor(x.shape(), rng, -1.0, 1.0, false)));
}

inline std::size_t extent(Rng& rng) { return 2 + uniform_index(rng, 7); }  // 2..8

inline AuditResult run(std::string name, std::function<TensorD()> f, std::vector<TensorD> params, double tol) {
  return {std::move(name), ag::finite_diff_check<D>(f, std::move(params), kStep), tol};
}

inline std::vector<AuditResult> primitives(std::uint64_t seed = 7) {
  Rng rng(seed);
  std::vector<AuditResult> out;
  const double tol = kPrimitiveTolerance;
  {
    const std::size_t m = extent(rng), k = extent(rng), n = extent(rng);
    auto a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    out.push_back(run("matmul", [=] { return weighted_sum(ag::matmul(a, b), 1); }, {a, b}, tol));
  }
  {
    const std::size_t m = extent(rng), k = extent(rng), n = extent(rng);
    auto a = random_tensor({m, k}, rng), b = random_tensor({n, k}, rng);
    out.push_back(run("matmul_nt", [=] { return weighted_sum(ag::matmul_nt(a, b), 2); }, {a, b}, tol));
  }
  {
    const std::size_t m = extent(rng), n = extent(rng);
    auto a = random_tensor({m, n}, rng), b = random_tensor({m, n}, rng), bias = random_tensor({n}, rng);
    out.push_back(run("add", [=] { return weighted_sum(ag::add(ag::add(a, b), bias), 3); }, {a, b, bias}, tol));
    out.push_back(run("sub", [=] { return weighted_sum(ag::sub(a, b), 4); }, {a, b}, tol));
    out.push_back(run("mul", [=] { return weighted_sum(ag::mul(ag::mul(a, b), bias), 5); }, {a, b, bias}, tol));
    out.push_back(run("scale", [=] { return weighted_sum(ag::scale(a, 1.7), 6); }, {a}, tol));
    out.push_back(run("exp", [=] { return weighted_sum(ag::exp(a), 7); }, {a}, tol));
    out.push_back(run("transpose", [=] { return weighted_sum(ag::transpose(a), 8); }, {a}, tol));
    out.push_back(run("reshape", [=] { return weighted_sum(ag::reshape(a, {n, m}), 9); }, {a}, tol));
    out.push_back(run("softmax", [=] { return weighted_sum(ag::softmax(a), 10); }, {a}, tol));
    out.push_back(run("gelu", [=] { return weighted_sum(ag::gelu(ag::scale(a, 3.0)), 11); }, {a}, tol));
    out.push_back(run("l2_normalize", [=] { return weighted_sum(ag::l2_normalize(a), 13); }, {a}, tol));
    out.push_back(run("mean", [=] { return ag::mean(ag::mul(a, a)); }, {a}, tol));
    out.push_back(run("sum", [=] { return ag::sum(ag::mul(a, b)); }, {a, b}, tol));
    out.push_back(run("dropout", [=] {
      Rng frozen(99);
      return weighted_sum(ag::dropout(a, 0.3, frozen), 14);
    }, {a}, tol));
    out.push_back(run("slice_cols", [=] { return weighted_sum(ag::slice_cols(a, 1, n), 15); }, {a}, tol));
    std::vector<std::size_t> rows = {m - 1, 0, m - 1};
    out.push_back(run("gather_rows", [=] { return weighted_sum(ag::gather_rows(a, std::span<const std::size_t>(rows)), 16); }, {a}, tol));
    out.push_back(run("concat", [=] {
      return ag::add(weighted_sum(ag::concat<D>({a, b}, 0), 17), weighted_sum(ag::concat<D>({a, b}, 1), 18));
    }, {a, b}, tol));
  }
  {
    // Over two features the normalized output saturates at +-1 and its
    // derivative is eps-sized, so the normalized axis is at least 3 wide.
    const std::size_t m = extent(rng), n = 3 + uniform_index(rng, 6);
    auto a = random_tensor({m, n}, rng);
    out.push_back(run("layer_norm", [=] { return weighted_sum(ag::layer_norm(a, 1e-5), 12); }, {a}, tol));
  }
  {
    const std::size_t m = extent(rng), n = extent(rng);
    auto a = random_tensor({m, n}, rng, 0.5, 2.0);
    out.push_back(run("log", [=] { return weighted_sum(ag::log(a), 19); }, {a}, tol));
  }
  {
    const std::size_t v = extent(rng), d = extent(rng), n = extent(rng);
    auto table = random_tensor({v, d}, rng);
    std::vector<int> ids(n);
    for (auto& id : ids) id = static_cast<int>(uniform_index(rng, v));
    out.push_back(run("embedding_lookup", [=] { return weighted_sum(ag::embedding_lookup(table, std::span<const int>(ids)), 20); }, {table}, tol));
  }
  {
    const std::size_t m = extent(rng), v = extent(rng);
    auto logits = random_tensor({m, v}, rng, -2.0, 2.0);
    std::vector<int> t(m);
    for (auto& x : t) x = static_cast<int>(uniform_index(rng, v));
    out.push_back(run("cross_entropy", [=] { return weighted_sum(ag::cross_entropy(logits, std::span<const int>(t)), 21); }, {logits}, tol));
  }
  {
    // Audited on the differentiable path only: the stopped operand is a
    // snapshot taken at the base point, so its value does not move under
    // perturbation.
    const std::size_t n = extent(rng);
    auto a = random_tensor({n}, rng);
    const auto snapshot = ag::stop_gradient(a);
    out.push_back(run("stop_gradient", [=] {
      return ag::add(weighted_sum(a, 22), ag::sum(ag::mul(a, ag::stop_gradient(snapshot))));
    }, {a}, tol));
  }
  return out;
}

/// Small randomized encoder used by the composite audits: L=2, A=2, d=8,
/// V=32, max_len=8. Values are spread well beyond the training initializer
/// so that no gradient is vanishingly small.
inline EncoderParams<D> audit_encoder(std::uint64_t seed) {
  EncoderConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.hidden = 8;
  cfg.ffn = 16;
  cfg.vocab = 32;
  cfg.max_len = 8;
  cfg.num_classes = 2;
  cfg.dropout = 0.0;
  Rng rng(seed);
  auto p = init_params<D>(cfg, rng);
  for (auto& [name, t] : p.named()) {
    auto v = t.mutable_values();
    const bool gain = name.find("gain") != std::string::npos;
    for (auto& x : v) x = (gain ? 1.0 : 0.0) + (uniform01(rng) - 0.5) * (gain ? 0.6 : 1.0);
  }
  return p;
}

inline std::vector<int> audit_ids(Rng& rng, std::size_t n = 6, bool pad_tail = true) {
  std::vector<int> ids(n);
  ids[0] = Vocabulary::kBos;
  for (std::size_t i = 1; i < n; ++i) ids[i] = Vocabulary::kNumSpecial + static_cast<int>(uniform_index(rng, 32 - Vocabulary::kNumSpecial));
  if (pad_tail) ids[n - 1] = Vocabulary::kPad;
  return ids;
}

inline ContrastiveBatch<D> constant_copy(const ContrastiveBatch<D>& b) {
  ContrastiveBatch<D> out;
  for (const auto& v : b.views) out.views.push_back(ag::stop_gradient(v));
  return out;
}

inline std::vector<AuditResult> encoder(std::uint64_t seed = 11) {
  auto p = audit_encoder(seed);
  Rng rng(seed + 1);
  const auto ids = audit_ids(rng);
  return {run("encoder/pool_first/squared_norm", [=] {
    auto h = pool_first(encode_tokens(p, std::span<const int>(ids)));
    return ag::sum(ag::mul(h, h));
  }, p.tensors(), kCompositeTolerance)};
}

inline std::vector<AuditResult> objectives(std::uint64_t seed = 13) {
  Rng rng(seed);
  std::vector<AuditResult> out;
  const double tol = kCompositeTolerance;
  const std::size_t B = 2, d = 8, V = 32, N = 6;

  {
    std::vector<TensorD> hidden = {random_tensor({N, d}, rng), random_tensor({N, d}, rng)};
    auto emb = random_tensor({V, d}, rng), bias = random_tensor({V}, rng);
    std::vector<std::vector<int>> labels(B, std::vector<int>(N, kIgnoreLabel));
    labels[0][1] = 7, labels[0][3] = 12, labels[1][2] = 30;
    std::vector<TensorD> ps = hidden;
    ps.push_back(emb), ps.push_back(bias);
    out.push_back(run("mlm_loss", [=] { return mlm_loss(hidden, labels, emb, bias); }, ps, tol));
  }
  {
    ContrastiveBatch<D> batch{{random_tensor({B, d}, rng), random_tensor({B, d}, rng)}};
    out.push_back(run("simclr_loss", [=] { return simclr_loss(batch, kDefaultTemperature); }, batch.views, tol));
    auto w1 = random_tensor({d, d}, rng), w2 = random_tensor({d, d}, rng);
    const auto frozen = constant_copy(batch);
    std::vector<TensorD> ps = batch.views;
    ps.push_back(w1), ps.push_back(w2);
    out.push_back(run("simsiam_loss", [=] { return simsiam_loss(batch, frozen, w1, w2); }, ps, tol));
  }

  // Full compositions through the encoder: B=2 sequences, K=1 view each.
  auto p = audit_encoder(seed + 2);
  std::vector<std::vector<int>> anchors, views, labels;
  for (std::size_t b = 0; b < B; ++b) {
    auto ids = audit_ids(rng);
    auto a = ids, v = ids;
    std::vector<int> lab(N, kIgnoreLabel);
    lab[1] = ids[1], a[1] = Vocabulary::kMask;
    lab[3] = ids[3], a[3] = Vocabulary::kNumSpecial + 1;
    v[2] = Vocabulary::kMask, v[4] = Vocabulary::kMask;
    anchors.push_back(a), views.push_back(v), labels.push_back(lab);
  }
  auto encode_batch = [anchors, views](const EncoderParams<D>& params, std::vector<TensorD>& hidden0) {
    std::vector<std::vector<TensorD>> pooled(2);
    for (std::size_t b = 0; b < anchors.size(); ++b) {
      auto H0 = encode_tokens(params, std::span<const int>(anchors[b]));
      hidden0.push_back(H0);
      pooled[0].push_back(pool_first(H0));
      pooled[1].push_back(pool_first(encode_tokens(params, std::span<const int>(views[b]))));
    }
    return stack_views(pooled);
  };
  std::vector<TensorD> base_hidden;
  const auto frozen = constant_copy(encode_batch(p, base_hidden));
  const double alpha = 0.5;
  out.push_back(run("cmlm_loss/simsiam", [=] {
    std::vector<TensorD> hidden0;
    auto batch = encode_batch(p, hidden0);
    auto cl = simsiam_loss(batch, frozen, p.predictor_w1, p.predictor_w2);
    return combine_losses(mlm_loss(hidden0, labels, p), cl, alpha).total;
  }, p.tensors(), tol));
  out.push_back(run("cmlm_loss/simclr", [=] {
    std::vector<TensorD> hidden0;
    auto batch = encode_batch(p, hidden0);
    return cmlm_loss(hidden0, labels, batch, alpha, ClVariant::kSimClr, kDefaultTemperature, p).total;
  }, p.tensors(), tol));
  return out;
}

inline std::vector<AuditResult> by_scope(const std::string& scope) {
  if (scope == "primitives") return primitives();
  if (scope == "objectives") return objectives();
  if (scope == "encoder") return encoder();
  if (scope == "all") {
    auto out = primitives();
    for (auto& r : objectives()) out.push_back(std::move(r));
    for (auto& r : encoder()) out.push_back(std::move(r));
    return out;
  }
  throw std::invalid_argument("unknown grad-check scope '" + scope + "' (expected primitives, objectives, encoder or all)");
}

}  // namespace cmlm::audit
