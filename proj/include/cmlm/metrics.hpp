#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>

namespace cmlm {

enum class Metric { kAccuracy, kMcc };

inline Metric parse_metric(const std::string& s) {
  if (s == "acc") return Metric::kAccuracy;
  if (s == "mcc") return Metric::kMcc;
  throw std::invalid_argument("unknown metric '" + s + "' (expected acc or mcc)");
}
inline std::string to_string(Metric m) { return m == Metric::kAccuracy ? "acc" : "mcc"; }

inline void require_paired(const char* what, std::span<const int> preds, std::span<const int> golds) {
  if (preds.empty()) throw std::invalid_argument(std::string(what) + ": no predictions");
  if (preds.size() != golds.size())
    throw std::invalid_argument(std::string(what) + ": " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(golds.size()) + " labels");
}

inline double accuracy(std::span<const int> preds, std::span<const int> golds) {
  require_paired("accuracy", preds, golds);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += preds[i] == golds[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

/// Matthews correlation for binary labels {0, 1}, with 1 as the positive
/// class. Returns 0 when any marginal count is zero.
inline double mcc(std::span<const int> preds, std::span<const int> golds) {
  require_paired("mcc", preds, golds);
  double tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], g = golds[i];
    if ((p != 0 && p != 1) || (g != 0 && g != 1)) throw std::invalid_argument("mcc: labels must be binary (0 or 1)");
    if (p == 1 && g == 1) ++tp;
    else if (p == 0 && g == 0) ++tn;
    else if (p == 1) ++fp;
    else ++fn;
  }
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(denom);
}

inline double score(Metric m, std::span<const int> preds, std::span<const int> golds) {
  return m == Metric::kAccuracy ? accuracy(preds, golds) : mcc(preds, golds);
}

}  // namespace cmlm
