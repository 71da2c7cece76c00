#pragma once

#include <functional>
#include <map>
#include <vector>

#include "ovsh/tinylm.hpp"

namespace ovsh::testing {

/// Oracle backed by a function of the prefix.
class FnOracle final : public ProbOracle {
 public:
  using Fn = std::function<std::vector<double>(std::span<const TokenId>)>;
  FnOracle(std::int32_t vocab, Fn fn) : vocab_(vocab), fn_(std::move(fn)) {}
  std::vector<double> next_dist(std::span<const TokenId> prefix) const override { return fn_(prefix); }
  std::int32_t vocab_size() const override { return vocab_; }

 private:
  std::int32_t vocab_;
  Fn fn_;
};

/// Oracle that puts all mass on one token.
inline std::vector<double> one_hot(std::int32_t vocab, TokenId t, double mass = 1.0) {
  std::vector<double> p(std::size_t(vocab), (1.0 - mass) / double(vocab - 1));
  p[std::size_t(t)] = mass;
  return p;
}

/// Oracle with a lookup table over exact prefixes and a fallback distribution.
class TableOracle final : public ProbOracle {
 public:
  TableOracle(std::int32_t vocab, std::vector<double> fallback) : vocab_(vocab), fallback_(std::move(fallback)) {}
  void set(TokenSeq prefix, std::vector<double> dist) { table_[std::move(prefix)] = std::move(dist); }
  std::vector<double> next_dist(std::span<const TokenId> prefix) const override {
    auto it = table_.find(TokenSeq(prefix.begin(), prefix.end()));
    return it == table_.end() ? fallback_ : it->second;
  }
  std::int32_t vocab_size() const override { return vocab_; }

 private:
  std::int32_t vocab_;
  std::vector<double> fallback_;
  std::map<TokenSeq, std::vector<double>> table_;
};

}  // namespace ovsh::testing
