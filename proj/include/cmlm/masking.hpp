#pragma once

// Dynamic random masking, complementary random masking and the sequence
// augmenters used for contrastive post-training.
//
// Each masking call consumes a single rng stream, advanced position by
// position in index order: first the selection draws, then one or two
// replacement draws per selected position.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cmlm/rng.hpp"
#include "cmlm/text.hpp"

namespace cmlm {

enum class MaskAction : std::uint8_t { kMask, kKeep, kRandom };

inline constexpr double kMaskShare = 0.8;
inline constexpr double kKeepShare = 0.1;
/// Label value at positions that carry no MLM target.
inline constexpr int kIgnoreLabel = -100;

struct MaskPattern {
  std::vector<std::uint8_t> selected;
  /// Defined exactly where `selected` is set.
  std::vector<std::optional<MaskAction>> action;

  std::size_t selected_count() const {
    return static_cast<std::size_t>(std::count(selected.begin(), selected.end(), 1));
  }
  std::vector<std::size_t> selected_positions() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < selected.size(); ++i)
      if (selected[i]) out.push_back(i);
    return out;
  }
};

struct MaskedSequence {
  std::vector<int> corrupted;
  MaskPattern pattern;
  std::vector<int> labels;
};

struct Replacement {
  MaskAction action;
  int id;  // the id written at the position; for kKeep, unused
};

inline void require_probability(const char* what, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string(what) + " must lie in [0, 1]");
}

/// BERT replacement rule, independently per selected position: [MASK] with
/// probability 0.8, unchanged with 0.1, a uniformly drawn non-special
/// vocabulary id with 0.1.
inline std::vector<Replacement> apply_replacement(std::size_t num_selected, const Vocabulary& vocab, Rng& rng) {
  if (vocab.num_regular() == 0)
    throw std::invalid_argument("apply_replacement: vocabulary has no non-special tokens");
  std::vector<Replacement> out;
  out.reserve(num_selected);
  for (std::size_t i = 0; i < num_selected; ++i) {
    const double u = uniform01(rng);
    if (u < kMaskShare) {
      out.push_back({MaskAction::kMask, Vocabulary::kMask});
    } else if (u < kMaskShare + kKeepShare) {
      out.push_back({MaskAction::kKeep, -1});
    } else {
      const auto id = Vocabulary::kNumSpecial + static_cast<int>(uniform_index(rng, vocab.num_regular()));
      out.push_back({MaskAction::kRandom, id});
    }
  }
  return out;
}

namespace detail {

// Applies replacements at the selected positions of `seq`.
inline MaskedSequence realize(const TokenSequence& seq, std::vector<std::uint8_t> selected, const Vocabulary& vocab,
                              Rng& rng) {
  MaskedSequence out;
  out.corrupted = seq.ids;
  out.labels.assign(seq.size(), kIgnoreLabel);
  out.pattern.action.assign(seq.size(), std::nullopt);
  const auto count = static_cast<std::size_t>(std::count(selected.begin(), selected.end(), 1));
  const auto reps = apply_replacement(count, vocab, rng);
  std::size_t r = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!selected[i]) continue;
    const auto& rep = reps[r++];
    out.pattern.action[i] = rep.action;
    out.labels[i] = seq.ids[i];
    if (rep.action != MaskAction::kKeep) out.corrupted[i] = rep.id;
  }
  out.pattern.selected = std::move(selected);
  return out;
}

}  // namespace detail

/// Dynamic random masking: every maskable position is selected
/// independently with probability `p_m`.
inline MaskedSequence drm(const TokenSequence& seq, double p_m, const Vocabulary& vocab, Rng& rng) {
  require_probability("p_m", p_m);
  std::vector<std::uint8_t> selected(seq.size(), 0);
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (seq.maskable[i]) selected[i] = bernoulli(rng, p_m);
  return detail::realize(seq, std::move(selected), vocab, rng);
}

/// Complementary random masking: a maskable position is selected with
/// probability `p_c` if `base` did not select it, and never otherwise.
inline MaskedSequence crm(const TokenSequence& seq, const MaskPattern& base, double p_c, const Vocabulary& vocab,
                          Rng& rng) {
  require_probability("p_c", p_c);
  if (base.selected.size() != seq.size())
    throw std::invalid_argument("crm: base pattern has length " + std::to_string(base.selected.size()) +
                                ", sequence has length " + std::to_string(seq.size()));
  std::vector<std::uint8_t> selected(seq.size(), 0);
  for (std::size_t i = 0; i < seq.size(); ++i)
    if (seq.maskable[i] && !base.selected[i]) selected[i] = bernoulli(rng, p_c);
  return detail::realize(seq, std::move(selected), vocab, rng);
}

struct CrmBatch {
  MaskedSequence anchor;               // T^0
  std::vector<MaskedSequence> views;   // T^1 .. T^K
};

/// T^0 = drm(seq), then K complementary views against T^0's selection. T^0
/// is always drawn first from `rng`.
inline CrmBatch make_crm_batch(const TokenSequence& seq, std::size_t k, double p_m, double p_c,
                               const Vocabulary& vocab, Rng& rng) {
  if (k == 0) throw std::invalid_argument("make_crm_batch: K must be at least 1");
  CrmBatch out;
  out.anchor = drm(seq, p_m, vocab, rng);
  out.views.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.views.push_back(crm(seq, out.anchor.pattern, p_c, vocab, rng));
  return out;
}

// ---------------------------------------------------------------------------
// EDA-style augmentation

enum class EdaOp { kDelete, kSwap, kInsert, kSynonym };

/// Token id -> candidate replacement ids.
using SynonymTable = std::map<int, std::vector<int>>;

/// Applies `op` to ceil(rate * maskable) positions of the content region.
/// Specials stay where the layout puts them; the sequence keeps its length.
inline TokenSequence eda_apply(const TokenSequence& seq, EdaOp op, double rate, Rng& rng,
                               const SynonymTable& synonyms = {}) {
  require_probability("eda rate", rate);
  const std::size_t n_ops = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(seq.maskable_count())));
  if (n_ops == 0) return seq;
  auto segs = segments(seq);
  auto content = [&] {
    std::size_t n = 0;
    for (const auto& s : segs) n += s.size();
    return n;
  };
  // Picks a uniformly random content position as (segment, offset).
  auto pick = [&](std::size_t total) {
    std::size_t r = uniform_index(rng, total);
    for (std::size_t s = 0; s < segs.size(); ++s) {
      if (r < segs[s].size()) return std::pair{s, r};
      r -= segs[s].size();
    }
    return std::pair{segs.size() - 1, std::size_t{0}};
  };
  for (std::size_t step = 0; step < n_ops; ++step) {
    const std::size_t total = content();
    if (total == 0) break;
    switch (op) {
      case EdaOp::kDelete: {
        auto [s, i] = pick(total);
        if (segs[s].size() > 1) segs[s].erase(segs[s].begin() + static_cast<std::ptrdiff_t>(i));
        break;
      }
      case EdaOp::kSwap: {
        auto [s, i] = pick(total);
        const std::size_t j = uniform_index(rng, segs[s].size());
        std::swap(segs[s][i], segs[s][j]);
        break;
      }
      case EdaOp::kInsert: {
        const std::size_t used = 1 + (segs.size() - 1) + total;
        auto [s, i] = pick(total);
        const int token = segs[s][i];
        const std::size_t at = uniform_index(rng, segs[s].size() + 1);
        if (used < seq.size()) segs[s].insert(segs[s].begin() + static_cast<std::ptrdiff_t>(at), token);
        break;
      }
      case EdaOp::kSynonym: {
        auto [s, i] = pick(total);
        auto it = synonyms.find(segs[s][i]);
        if (it != synonyms.end() && !it->second.empty())
          segs[s][i] = it->second[uniform_index(rng, it->second.size())];
        break;
      }
    }
  }
  return layout_segments(segs, seq.size());
}

/// One uniformly chosen EDA operation (deletion, swap, insertion, synonym
/// substitution) applied at the given rate.
inline TokenSequence eda_augment(const TokenSequence& seq, double rate, Rng& rng, const SynonymTable& synonyms = {}) {
  require_probability("eda rate", rate);
  const auto op = static_cast<EdaOp>(uniform_index(rng, 4));
  return eda_apply(seq, op, rate, rng, synonyms);
}

// ---------------------------------------------------------------------------
// Pair augmenters

struct ViewPair {
  std::vector<int> first;
  std::vector<int> second;
};

struct AugmenterParams {
  double p_m = 0.15;
  double p_c = 0.7;
  double eda_rate = 0.1;
  SynonymTable synonyms;
};

/// Produces two token-id views of a sequence.
class Augmenter {
 public:
  using Fn = std::function<ViewPair(const TokenSequence&, const Vocabulary&, Rng&)>;
  Augmenter(std::string name, Fn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
  const std::string& name() const { return name_; }
  ViewPair operator()(const TokenSequence& seq, const Vocabulary& vocab, Rng& rng) const {
    return fn_(seq, vocab, rng);
  }

 private:
  std::string name_;
  Fn fn_;
};

inline const std::vector<std::string>& augmenter_names() {
  static const std::vector<std::string> names = {"crm-pair", "drm-pair", "eda-pair", "identity"};
  return names;
}

inline Augmenter augmenter_for(const std::string& name, AugmenterParams params = {}) {
  if (name == "crm-pair")
    return Augmenter(name, [params](const TokenSequence& seq, const Vocabulary& vocab, Rng& rng) {
      auto batch = make_crm_batch(seq, 1, params.p_m, params.p_c, vocab, rng);
      return ViewPair{std::move(batch.anchor.corrupted), std::move(batch.views[0].corrupted)};
    });
  if (name == "drm-pair")
    return Augmenter(name, [params](const TokenSequence& seq, const Vocabulary& vocab, Rng& rng) {
      auto a = drm(seq, params.p_m, vocab, rng);
      auto b = drm(seq, params.p_m, vocab, rng);
      return ViewPair{std::move(a.corrupted), std::move(b.corrupted)};
    });
  if (name == "eda-pair")
    return Augmenter(name, [params](const TokenSequence& seq, const Vocabulary&, Rng& rng) {
      auto a = eda_augment(seq, params.eda_rate, rng, params.synonyms);
      auto b = eda_augment(seq, params.eda_rate, rng, params.synonyms);
      return ViewPair{std::move(a.ids), std::move(b.ids)};
    });
  if (name == "identity")
    return Augmenter(name, [](const TokenSequence& seq, const Vocabulary&, Rng&) { return ViewPair{seq.ids, seq.ids}; });
  throw std::invalid_argument("unsupported augmenter '" + name + "' (expected crm-pair, drm-pair, eda-pair or identity)");
}

// ---------------------------------------------------------------------------
// Debug rendering

/// Aligned rows, one per sequence, with selected positions in brackets.
inline std::string format_masked_rows(const TokenSequence& original, const CrmBatch& batch, const Vocabulary& vocab) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> names = {"orig", "T0"};
  auto render = [&](const std::vector<int>& ids, const std::vector<std::uint8_t>* sel) {
    std::vector<std::string> cells;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == Vocabulary::kPad && original.ids[i] == Vocabulary::kPad) break;
      std::string cell = vocab.token(ids[i]);
      if (sel && (*sel)[i]) cell = "[" + cell + "]";
      cells.push_back(std::move(cell));
    }
    return cells;
  };
  rows.push_back(render(original.ids, nullptr));
  rows.push_back(render(batch.anchor.corrupted, &batch.anchor.pattern.selected));
  for (std::size_t k = 0; k < batch.views.size(); ++k) {
    names.push_back("T" + std::to_string(k + 1));
    rows.push_back(render(batch.views[k].corrupted, &batch.views[k].pattern.selected));
  }
  std::size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  std::vector<std::size_t> width(cols, 0);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  std::ostringstream os;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    os << names[r] << std::string(6 - names[r].size(), ' ');
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      os << rows[r][c];
      if (c + 1 < rows[r].size()) os << std::string(width[c] - rows[r][c].size() + 1, ' ');
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace cmlm
