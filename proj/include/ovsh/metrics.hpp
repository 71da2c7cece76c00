#pragma once

// Recall, amalgam hallucination rate and their ratio, plus binary detection
// scores. Decoding is exact-match greedy on the full target sequence.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "ovsh/decoding.hpp"
#include "ovsh/synthdata.hpp"

namespace ovsh {

struct HalluMetrics {
  double rr = 0;
  double hr = 0;
  std::optional<double> rhr;  // empty when rr == 0
};

/// How a rare-branch output counts towards the hallucination rate.
enum class HalluMode {
  amalgam,    // output equals the popular answer C
  any_wrong,  // output differs from the gold answer E
};

inline TokenSeq decode_answer(const ProbOracle& oracle, const Query& q) {
  return greedy_decode(oracle, q.prompt, static_cast<int>(q.gold.size()));
}

inline double recall_rate(const ProbOracle& oracle, std::span<const Query> popular) {
  if (popular.empty()) throw InputError("recall_rate needs at least one query");
  std::size_t hits = 0;
  for (const auto& q : popular) hits += decode_answer(oracle, q) == q.gold;
  return double(hits) / double(popular.size());
}

inline bool is_hallucination(const TokenSeq& output, const Query& q, HalluMode mode = HalluMode::amalgam) {
  if (mode == HalluMode::any_wrong) return output != q.gold;
  if (!q.amalgam) throw InputError("rare query lacks an amalgam target");
  return output == *q.amalgam;
}

inline double hallucination_rate(const ProbOracle& oracle, std::span<const Query> rare,
                                 HalluMode mode = HalluMode::amalgam) {
  if (rare.empty()) throw InputError("hallucination_rate needs at least one query");
  std::size_t hits = 0;
  for (const auto& q : rare) hits += is_hallucination(decode_answer(oracle, q), q, mode);
  return double(hits) / double(rare.size());
}

inline std::optional<double> relative_hr(double hr, double rr) {
  if (!(rr >= 0 && rr <= 1 && hr >= 0 && hr <= 1)) throw InputError("rates must lie in [0, 1]");
  if (rr == 0) return std::nullopt;
  return hr / rr;
}

inline HalluMetrics evaluate(const ProbOracle& oracle, std::span<const Query> popular, std::span<const Query> rare,
                             HalluMode mode = HalluMode::amalgam) {
  HalluMetrics m;
  m.rr = recall_rate(oracle, popular);
  m.hr = hallucination_rate(oracle, rare, mode);
  m.rhr = relative_hr(m.hr, m.rr);
  return m;
}

struct DetectionScores {
  double precision = 0, recall = 0, f1 = 0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline DetectionScores detection_f1(const std::vector<bool>& flags, const std::vector<bool>& labels) {
  if (flags.size() != labels.size()) throw InputError("flags and labels differ in length");
  DetectionScores s;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (flags[i] && labels[i]) ++s.tp;
    else if (flags[i]) ++s.fp;
    else if (labels[i]) ++s.fn;
    else ++s.tn;
  }
  s.precision = s.tp + s.fp ? double(s.tp) / double(s.tp + s.fp) : 0.0;
  s.recall = s.tp + s.fn ? double(s.tp) / double(s.tp + s.fn) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

}  // namespace ovsh
