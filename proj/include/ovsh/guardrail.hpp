#pragma once

// Training-free overshadowing detection. Each prompt position is dropped in
// turn; the full-prompt and dropped-prompt next-token distributions are
// compared over the adaptive plausibility set with positive PMI, and escape
// tokens (plausible only under the full prompt) are penalized:
//
//   F_i = agg_{y in V_top} max(0, -ln(0.5 + 0.5 p(y|x'_i) / p(y|x)))
//         + sum_{y in V_esc} ln(alpha / p(y|x)),   alpha = beta * min_{V_top} p(y|x)
//
// The prompt is flagged when max_i F_i >= gamma.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "ovsh/tinylm.hpp"

namespace ovsh {

enum class Aggregation { mean, sum };

struct DetectorConfig {
  double apc_ratio = 0.1;
  double beta = 0.5;
  double gamma = 0.0;
  std::int32_t drop_width = 1;
  Aggregation aggregation = Aggregation::mean;

  void validate() const {
    if (!(apc_ratio > 0 && apc_ratio <= 1)) throw ConfigError("apc_ratio must lie in (0, 1]");
    if (!(beta > 0 && beta <= 1)) throw ConfigError("beta must lie in (0, 1]");
    if (drop_width < 1) throw ConfigError("drop_width must be >= 1");
    if (std::isnan(gamma)) throw ConfigError("gamma must not be NaN");
  }
};

using TokenSet = std::vector<TokenId>;  // sorted ascending

inline void check_distribution(std::span<const double> dist) {
  if (dist.empty()) throw InputError("empty distribution");
  double sum = 0;
  for (double p : dist) {
    if (!(p >= 0) || !std::isfinite(p)) throw InputError("distribution has a negative or non-finite entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw InputError("distribution does not sum to 1");
}

/// Tokens whose probability is at least `apc_ratio` times the maximum.
inline TokenSet plausible_set(std::span<const double> dist, double apc_ratio) {
  check_distribution(dist);
  if (!(apc_ratio > 0 && apc_ratio <= 1)) throw InputError("apc_ratio must lie in (0, 1]");
  const double threshold = apc_ratio * *std::max_element(dist.begin(), dist.end());
  TokenSet out;
  for (std::size_t v = 0; v < dist.size(); ++v)
    if (dist[v] >= threshold) out.push_back(static_cast<TokenId>(v));
  return out;
}

/// PMI between a next token and the dropped-position indicator; natural log,
/// bounded above by ln 2.
inline double pmi_token(double p_full, double p_dropped) {
  if (!(p_full > 0)) throw InputError("pmi_token requires p_full > 0");
  if (!(p_dropped >= 0)) throw InputError("pmi_token requires p_dropped >= 0");
  return -std::log(0.5 + 0.5 * (p_dropped / p_full));
}

inline double ppmi_token(double p_full, double p_dropped) { return std::max(0.0, pmi_token(p_full, p_dropped)); }

inline TokenSet escape_set(const TokenSet& vtop_full, const TokenSet& vtop_dropped) {
  TokenSet out;
  std::set_difference(vtop_full.begin(), vtop_full.end(), vtop_dropped.begin(), vtop_dropped.end(),
                      std::back_inserter(out));
  return out;
}

inline double epm_penalty(std::span<const double> p_full, const TokenSet& vtop_full, const TokenSet& vesc,
                          double beta) {
  if (vesc.empty()) return 0.0;
  if (vtop_full.empty()) throw InputError("escape tokens without a plausible set");
  double min_p = std::numeric_limits<double>::infinity();
  for (auto v : vtop_full) min_p = std::min(min_p, p_full[std::size_t(v)]);
  const double alpha = beta * min_p;
  double total = 0;
  for (auto v : vesc) {
    if (!std::binary_search(vtop_full.begin(), vtop_full.end(), v))
      throw InputError("escape token outside the plausible set");
    total += std::log(alpha / p_full[std::size_t(v)]);
  }
  return total;
}

/// Score of one comparison between full and dropped distributions.
struct Contrast {
  double score = 0;
  double ppmi = 0;
  double penalty = 0;
  TokenSet vtop;
  TokenSet vesc;
};

inline Contrast contrast_score(std::span<const double> p_full, std::span<const double> p_dropped,
                               const DetectorConfig& cfg) {
  if (p_full.size() != p_dropped.size()) throw InputError("distribution sizes differ");
  Contrast c;
  c.vtop = plausible_set(p_full, cfg.apc_ratio);
  c.vesc = escape_set(c.vtop, plausible_set(p_dropped, cfg.apc_ratio));
  double acc = 0;
  for (auto v : c.vtop) acc += ppmi_token(p_full[std::size_t(v)], p_dropped[std::size_t(v)]);
  c.ppmi = cfg.aggregation == Aggregation::mean ? acc / double(c.vtop.size()) : acc;
  c.penalty = epm_penalty(p_full, c.vtop, c.vesc, cfg.beta);
  c.score = c.ppmi + c.penalty;
  return c;
}

/// Prompt with tokens [pos, pos + width) removed.
inline TokenSeq drop_span(std::span<const TokenId> x, std::size_t pos, std::size_t width) {
  TokenSeq out(x.begin(), x.begin() + std::ptrdiff_t(pos));
  const auto end = std::min(x.size(), pos + width);
  out.insert(out.end(), x.begin() + std::ptrdiff_t(end), x.end());
  return out;
}

struct PositionScore {
  std::int32_t position = 0;
  double score = 0;
  std::int32_t escape_count = 0;
  TokenSeq dropped_prompt;
};

/// Score for dropping position `i`, given the precomputed full distribution.
/// Empty when the drop would leave nothing.
inline std::optional<PositionScore> position_score(const ProbOracle& oracle, std::span<const TokenId> x,
                                                   std::span<const double> p_full, std::size_t i,
                                                   const DetectorConfig& cfg) {
  if (i >= x.size()) throw InputError("drop position out of range");
  const auto width = std::size_t(cfg.drop_width);
  if (width >= x.size()) return std::nullopt;
  if (i + width > x.size()) return std::nullopt;
  PositionScore ps;
  ps.position = static_cast<std::int32_t>(i);
  ps.dropped_prompt = drop_span(x, i, width);
  const auto p_drop = oracle.next_dist(ps.dropped_prompt);
  const auto c = contrast_score(p_full, p_drop, cfg);
  ps.score = c.score;
  ps.escape_count = static_cast<std::int32_t>(c.vesc.size());
  return ps;
}

inline std::optional<PositionScore> position_score(const ProbOracle& oracle, std::span<const TokenId> x,
                                                   std::size_t i, const DetectorConfig& cfg) {
  const auto p_full = oracle.next_dist(x);
  return position_score(oracle, x, p_full, i, cfg);
}

struct DetectionResult {
  std::vector<PositionScore> per_position;
  double f_max = -std::numeric_limits<double>::infinity();
  std::int32_t argmax_position = -1;  // -1 when no position could be scored
  bool flagged = false;

  const PositionScore* best() const {
    for (const auto& p : per_position)
      if (p.position == argmax_position) return &p;
    return nullptr;
  }
};

/// Re-applies a threshold to an existing result.
inline void apply_threshold(DetectionResult& r, double gamma) { r.flagged = r.argmax_position >= 0 && r.f_max >= gamma; }

inline DetectionResult detect(const ProbOracle& oracle, std::span<const TokenId> x, const DetectorConfig& cfg) {
  cfg.validate();
  if (x.size() < 2) throw InputError("detect needs a prompt of at least two tokens");
  const auto p_full = oracle.next_dist(x);
  DetectionResult r;
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto ps = position_score(oracle, x, p_full, i, cfg);
    if (!ps) continue;
    if (ps->score > r.f_max || r.argmax_position < 0) {
      r.f_max = ps->score;
      r.argmax_position = ps->position;
    }
    r.per_position.push_back(std::move(*ps));
  }
  apply_threshold(r, cfg.gamma);
  return r;
}

}  // namespace ovsh
