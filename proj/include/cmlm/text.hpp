#pragma once

// Whitespace tokenization, vocabularies, sequence layout and few-shot
// subset sampling.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cmlm/rng.hpp"
#include "json.hpp"

namespace cmlm {

/// Lowercased whitespace-delimited tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kSep = 1;
  static constexpr int kMask = 2;
  static constexpr int kPad = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecial = 5;

  static const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> s = {"<s>", "</s>", "<mask>", "<pad>", "<unk>"};
    return s;
  }

  Vocabulary() : Vocabulary(special_tokens()) {}

  /// `tokens[i]` becomes id i. The first five entries must be the special
  /// tokens in order; duplicates are rejected.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    const auto& sp = special_tokens();
    if (tokens_.size() < sp.size() || !std::equal(sp.begin(), sp.end(), tokens_.begin()))
      throw std::invalid_argument("vocabulary must start with <s> </s> <mask> <pad> <unk>");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw std::invalid_argument("vocabulary: duplicate token '" + tokens_[i] + "'");
    }
  }

  std::size_t size() const { return tokens_.size(); }
  int id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static bool is_special(int id) { return id >= 0 && id < kNumSpecial; }
  std::size_t num_regular() const { return tokens_.size() - kNumSpecial; }

  /// One token per line; line number is the id.
  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocabulary file " + path);
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) throw std::runtime_error("failed writing vocabulary file " + path);
  }
  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read vocabulary file " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return Vocabulary(std::move(tokens));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Keeps the `max_size - 5` most frequent tokens, ties broken
/// lexicographically, after the five specials.
inline Vocabulary build_vocab(const std::vector<std::string>& corpus, std::size_t max_size) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  if (max_size <= static_cast<std::size_t>(Vocabulary::kNumSpecial))
    throw std::invalid_argument("build_vocab: max_size must exceed the 5 special tokens");
  std::map<std::string, std::size_t> counts;
  const auto& sp = Vocabulary::special_tokens();
  for (const auto& line : corpus)
    for (auto& t : tokenize(line))
      if (std::find(sp.begin(), sp.end(), t) == sp.end()) ++counts[t];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = sp;
  const std::size_t keep = std::min(ranked.size(), max_size - Vocabulary::kNumSpecial);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(ranked[i].first);
  return Vocabulary(std::move(tokens));
}

struct TokenSequence {
  std::vector<int> ids;
  /// 1 where masking and augmentation may touch the token.
  std::vector<std::uint8_t> maskable;

  std::size_t size() const { return ids.size(); }
  std::size_t maskable_count() const {
    return static_cast<std::size_t>(std::count(maskable.begin(), maskable.end(), 1));
  }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Maskable flags follow from ids: everything but BOS, SEP and PAD.
inline TokenSequence make_sequence(std::vector<int> ids) {
  TokenSequence s;
  s.maskable.resize(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i)
    s.maskable[i] = ids[i] != Vocabulary::kBos && ids[i] != Vocabulary::kSep && ids[i] != Vocabulary::kPad;
  s.ids = std::move(ids);
  return s;
}

/// Content tokens of each segment (one or two), without specials or padding.
inline std::vector<std::vector<int>> segments(const TokenSequence& seq) {
  std::vector<std::vector<int>> segs(1);
  for (std::size_t i = 1; i < seq.ids.size(); ++i) {
    const int id = seq.ids[i];
    if (id == Vocabulary::kPad) break;
    if (id == Vocabulary::kSep) {
      segs.emplace_back();
      continue;
    }
    segs.back().push_back(id);
  }
  return segs;
}

/// Lays out [BOS, a..., (SEP, b...)?] and pads to `max_len`.
inline TokenSequence layout_segments(const std::vector<std::vector<int>>& segs, std::size_t max_len) {
  std::vector<int> ids{Vocabulary::kBos};
  for (std::size_t s = 0; s < segs.size(); ++s) {
    if (s > 0) ids.push_back(Vocabulary::kSep);
    ids.insert(ids.end(), segs[s].begin(), segs[s].end());
  }
  if (ids.size() > max_len) throw std::length_error("layout_segments: content exceeds max_len");
  ids.resize(max_len, Vocabulary::kPad);
  return make_sequence(std::move(ids));
}

struct LabeledExample {
  std::string text_a;
  std::optional<std::string> text_b;
  int label = 0;
  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

/// [BOS, a, (SEP, b)?, PAD...]. When the pair does not fit, tokens are
/// dropped from the tail of the longer segment (the second on ties).
inline TokenSequence encode(const LabeledExample& ex, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 3) throw std::invalid_argument("encode: max_len must be at least 3");
  std::vector<std::vector<int>> segs;
  auto to_ids = [&](const std::string& text) {
    std::vector<int> ids;
    for (const auto& t : tokenize(text)) ids.push_back(vocab.id(t));
    return ids;
  };
  segs.push_back(to_ids(ex.text_a));
  if (ex.text_b) segs.push_back(to_ids(*ex.text_b));
  const std::size_t budget = max_len - segs.size();  // BOS plus optional SEP
  auto total = [&] {
    std::size_t n = 0;
    for (const auto& s : segs) n += s.size();
    return n;
  };
  while (total() > budget) {
    auto& longer = (segs.size() == 2 && segs[1].size() >= segs[0].size()) ? segs[1] : segs[0];
    longer.pop_back();
  }
  return layout_segments(segs, max_len);
}

/// Space-joined tokens of the content region.
inline std::string decode(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const int id = seq.ids[i];
    if (id == Vocabulary::kBos || id == Vocabulary::kPad) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

/// Class names in first-seen order, shared across the files of one task.
class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i) index_[names_[i]] = static_cast<int>(i);
  }
  int intern(const std::string& name) {
    auto [it, inserted] = index_.emplace(name, static_cast<int>(names_.size()));
    if (inserted) names_.push_back(name);
    return it->second;
  }
  std::optional<int> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, int> index_;
};

/// Reads one JSON object per line with `text_a`, optional `text_b`, and a
/// string or integer `label`. Blank lines are skipped. New labels are added
/// to `labels` unless `frozen`, in which case unknown labels are an error.
inline std::vector<LabeledExample> read_jsonl(const std::string& path, LabelSet& labels, bool frozen = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto where = [&] { return path + ":" + std::to_string(lineno) + ": "; };
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(where() + e.what());
    }
    if (!j.is_object() || !j.contains("text_a") || !j["text_a"].is_string())
      throw std::runtime_error(where() + "missing string field text_a");
    LabeledExample ex;
    ex.text_a = j["text_a"].get<std::string>();
    if (j.contains("text_b") && !j["text_b"].is_null()) {
      if (!j["text_b"].is_string()) throw std::runtime_error(where() + "text_b must be a string");
      ex.text_b = j["text_b"].get<std::string>();
    }
    if (!j.contains("label")) throw std::runtime_error(where() + "missing field label");
    std::string name;
    if (j["label"].is_string())
      name = j["label"].get<std::string>();
    else if (j["label"].is_number_integer())
      name = std::to_string(j["label"].get<long long>());
    else
      throw std::runtime_error(where() + "label must be a string or integer");
    if (frozen) {
      auto id = labels.find(name);
      if (!id) throw std::runtime_error(where() + "unknown label '" + name + "'");
      ex.label = *id;
    } else {
      ex.label = labels.intern(name);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline void write_jsonl(const std::string& path, const std::vector<LabeledExample>& examples,
                        const LabelSet& labels) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["text_a"] = ex.text_a;
    if (ex.text_b) j["text_b"] = *ex.text_b;
    if (ex.label >= 0) j["label"] = labels.names().at(static_cast<std::size_t>(ex.label));
    out << j.dump() << '\n';
  }
}

/// Unlabeled text: the same line format with `label` optional and ignored.
/// Examples carry label -1.
inline std::vector<LabeledExample> read_unlabeled_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path + ":" + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(where + e.what());
    }
    if (!j.is_object() || !j.contains("text_a") || !j["text_a"].is_string())
      throw std::runtime_error(where + "missing string field text_a");
    LabeledExample ex;
    ex.text_a = j["text_a"].get<std::string>();
    if (j.contains("text_b") && j["text_b"].is_string()) ex.text_b = j["text_b"].get<std::string>();
    ex.label = -1;
    out.push_back(std::move(ex));
  }
  return out;
}

struct FewShotSplit {
  std::vector<std::vector<LabeledExample>> subsets;
  std::vector<LabeledExample> dev;
  std::vector<LabeledExample> test;
  std::size_t subset_size = 0;
  std::size_t subset_count = 0;
};

inline constexpr std::size_t kDefaultDevSize = 500;

/// Draws `num_subsets` training subsets of exactly `size` examples from
/// `train_pool` with replacement, then splits `eval_pool` into a dev set of
/// `dev_size` examples (or all, if fewer), drawn without replacement, and a
/// test set holding the rest. All subsets share dev and test.
inline FewShotSplit sample_few_shot(const std::vector<LabeledExample>& train_pool,
                                    const std::vector<LabeledExample>& eval_pool, std::size_t size,
                                    std::size_t num_subsets, Rng& rng,
                                    std::size_t dev_size = kDefaultDevSize) {
  if (size == 0) throw std::invalid_argument("sample_few_shot: subset size must be positive");
  if (num_subsets == 0) throw std::invalid_argument("sample_few_shot: need at least one subset");
  if (train_pool.size() < size)
    throw std::invalid_argument("sample_few_shot: train pool has " + std::to_string(train_pool.size()) +
                                " examples, fewer than subset size " + std::to_string(size));
  FewShotSplit split;
  split.subset_size = size;
  split.subset_count = num_subsets;
  for (std::size_t s = 0; s < num_subsets; ++s) {
    auto& subset = split.subsets.emplace_back();
    subset.reserve(size);
    for (std::size_t i = 0; i < size; ++i) subset.push_back(train_pool[uniform_index(rng, train_pool.size())]);
  }
  std::vector<std::size_t> order(eval_pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  const std::size_t n_dev = std::min(dev_size, eval_pool.size());
  if (n_dev == eval_pool.size())
    throw std::invalid_argument("sample_few_shot: evaluation pool of " + std::to_string(eval_pool.size()) +
                                " leaves no test examples after a dev set of " + std::to_string(dev_size));
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_dev ? split.dev : split.test).push_back(eval_pool[order[i]]);
  return split;
}

/// Classes in [0, num_classes) with no example in `subset`.
inline std::vector<int> missing_classes(const std::vector<LabeledExample>& subset, std::size_t num_classes) {
  std::vector<bool> seen(num_classes, false);
  for (const auto& ex : subset)
    if (ex.label >= 0 && static_cast<std::size_t>(ex.label) < num_classes) seen[ex.label] = true;
  std::vector<int> out;
  for (std::size_t c = 0; c < num_classes; ++c)
    if (!seen[c]) out.push_back(static_cast<int>(c));
  return out;
}

}  // namespace cmlm
