#pragma once

#include <algorithm>
#include <span>
#include <vector>

#include "ovsh/common.hpp"
#include "ovsh/tinylm.hpp"

namespace ovsh {

/// Index of the largest entry; ties go to the lowest index.
inline TokenId argmax_token(std::span<const double> p) {
  if (p.empty()) throw InputError("empty distribution");
  return static_cast<TokenId>(std::max_element(p.begin(), p.end()) - p.begin());
}

/// Greedy continuation of `prompt`. Generation stops after `max_len` tokens,
/// when a token from `stop` is produced (not emitted), or when the oracle's
/// context is full.
inline TokenSeq greedy_decode(const ProbOracle& oracle, std::span<const TokenId> prompt, int max_len,
                              std::span<const TokenId> stop = {}) {
  if (max_len < 1) throw InputError("max_len must be >= 1");
  if (prompt.empty()) throw InputError("empty prompt");
  TokenSeq seq(prompt.begin(), prompt.end());
  TokenSeq out;
  while (int(out.size()) < max_len && seq.size() <= oracle.max_prefix()) {
    const auto p = oracle.next_dist(seq);
    const TokenId t = argmax_token(p);
    if (std::find(stop.begin(), stop.end(), t) != stop.end()) break;
    out.push_back(t);
    seq.push_back(t);
  }
  return out;
}

}  // namespace ovsh
