#pragma once

// Self-contrastive decoding. Over the plausible set of the full prompt,
// non-escape tokens are scored by the log-ratio ln p(y|x) - ln p(y|x'), and
// escape tokens by max(ln p(y|x) - max_nonescape_score, 0). The next token is
// drawn greedily from the softmax of those scores.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "ovsh/decoding.hpp"
#include "ovsh/guardrail.hpp"

namespace ovsh {

struct ScdConfig {
  DetectorConfig detector{};
  std::int32_t max_len = 1;
  bool recompute_vtop_each_step = true;
  bool redetect_each_step = false;  // re-run detection on the growing prefix to pick x'
  std::vector<TokenId> stop;        // tokens that end generation (not emitted)

  void validate() const {
    detector.validate();
    if (max_len < 1) throw ConfigError("max_len must be >= 1");
  }
};

struct ScdAdjusted {
  std::vector<TokenId> support;  // = vtop
  std::vector<double> score;     // adjusted log-score per support token
  std::vector<double> dist;      // full-vocabulary distribution, zero off-support
  bool fallback = false;         // every plausible token escaped; p_full restricted to vtop was used
};

inline ScdAdjusted scd_adjust(std::span<const double> p_full, std::span<const double> p_dropped,
                              const TokenSet& vtop, const TokenSet& vesc) {
  if (p_full.size() != p_dropped.size()) throw InputError("distribution sizes differ");
  if (vtop.empty()) throw InputError("empty plausible set");
  for (auto v : vesc)
    if (!std::binary_search(vtop.begin(), vtop.end(), v)) throw InputError("escape token outside the plausible set");

  ScdAdjusted out;
  out.support = vtop;
  out.score.resize(vtop.size());
  out.dist.assign(p_full.size(), 0.0);
  constexpr double tiny = std::numeric_limits<double>::min();

  auto escaped = [&](TokenId v) { return std::binary_search(vesc.begin(), vesc.end(), v); };
  double max_contrast = -std::numeric_limits<double>::infinity();
  bool any_contrast = false;
  for (std::size_t i = 0; i < vtop.size(); ++i) {
    const auto v = std::size_t(vtop[i]);
    if (!(p_full[v] > 0)) throw InputError("p_full must be positive on the plausible set");
    if (escaped(vtop[i])) continue;
    out.score[i] = std::log(p_full[v]) - std::log(std::max(p_dropped[v], tiny));
    max_contrast = std::max(max_contrast, out.score[i]);
    any_contrast = true;
  }

  if (!any_contrast) {
    out.fallback = true;
    double sum = 0;
    for (std::size_t i = 0; i < vtop.size(); ++i) {
      const auto v = std::size_t(vtop[i]);
      out.score[i] = std::log(p_full[v]);
      sum += p_full[v];
    }
    for (auto v : vtop) out.dist[std::size_t(v)] = p_full[std::size_t(v)] / sum;
    return out;
  }

  for (std::size_t i = 0; i < vtop.size(); ++i)
    if (escaped(vtop[i])) out.score[i] = std::max(std::log(p_full[std::size_t(vtop[i])]) - max_contrast, 0.0);

  const double mx = *std::max_element(out.score.begin(), out.score.end());
  double sum = 0;
  for (std::size_t i = 0; i < vtop.size(); ++i) sum += out.dist[std::size_t(vtop[i])] = std::exp(out.score[i] - mx);
  for (auto v : vtop) out.dist[std::size_t(v)] /= sum;
  return out;
}

struct ScdOutput {
  TokenSeq tokens;
  bool contrasted = false;      // the SCD path was taken
  std::int32_t fallbacks = 0;   // steps that hit the all-escaped fallback
};

inline ScdOutput scd_decode_ex(const ProbOracle& oracle, std::span<const TokenId> x, const DetectionResult& det,
                               const ScdConfig& cfg) {
  cfg.validate();
  ScdOutput out;
  if (!det.flagged || !det.best()) {
    out.tokens = greedy_decode(oracle, x, cfg.max_len, cfg.stop);
    return out;
  }
  out.contrasted = true;
  TokenSeq full(x.begin(), x.end());
  TokenSeq dropped = det.best()->dropped_prompt;
  TokenSet vtop, vesc;
  for (std::int32_t step = 0; step < cfg.max_len && full.size() <= oracle.max_prefix(); ++step) {
    if (cfg.redetect_each_step && step > 0) {
      auto redo = detect(oracle, full, cfg.detector);
      if (redo.best()) dropped = redo.best()->dropped_prompt;
    }
    const auto p_full = oracle.next_dist(full);
    const auto p_drop = oracle.next_dist(dropped);
    if (step == 0 || cfg.recompute_vtop_each_step) {
      vtop = plausible_set(p_full, cfg.detector.apc_ratio);
      vesc = escape_set(vtop, plausible_set(p_drop, cfg.detector.apc_ratio));
    }
    const auto adj = scd_adjust(p_full, p_drop, vtop, vesc);
    out.fallbacks += adj.fallback;
    const TokenId t = argmax_token(adj.dist);
    if (std::find(cfg.stop.begin(), cfg.stop.end(), t) != cfg.stop.end()) break;
    out.tokens.push_back(t);
    full.push_back(t);
    dropped.push_back(t);
  }
  return out;
}

inline TokenSeq scd_decode(const ProbOracle& oracle, std::span<const TokenId> x, const DetectionResult& det,
                           const ScdConfig& cfg) {
  return scd_decode_ex(oracle, x, det, cfg).tokens;
}

}  // namespace ovsh
