#pragma once

// Synthetic multi-condition corpora: each group holds a popular branch
// (A+B -> C, repeated m times) and a rare branch (A+D -> E, repeated n times).

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ovsh/common.hpp"

namespace ovsh {

struct Vocab {
  std::int32_t size = 0;
  TokenId pad_id = 0;
  TokenId sep_id = 1;

  TokenId first_content() const noexcept { return 2; }
  std::int32_t content_count() const noexcept { return size - 2; }
  bool is_reserved(TokenId t) const noexcept { return t == pad_id || t == sep_id; }

  friend bool operator==(const Vocab&, const Vocab&) = default;
};

inline Vocab build_vocab(std::int32_t size) {
  if (size < 16) throw ConfigError("vocab size must be >= 16, got " + std::to_string(size));
  return Vocab{size, 0, 1};
}

struct GroupConfig {
  std::int32_t len_a = 10;
  std::int32_t len_b = 1;
  std::int32_t len_t = 1;
  std::int32_t m = 100;
  std::int32_t n = 1;

  double length_ratio() const noexcept { return double(len_a) / double(len_b); }
  double imbalance_ratio() const noexcept { return double(m) / double(n); }

  void validate() const {
    if (len_a < 1 || len_b < 1 || len_t < 1)
      throw ConfigError("group lengths must all be >= 1");
    if (n < 1 || m < n) throw ConfigError("group counts must satisfy m >= n >= 1");
  }

  friend bool operator==(const GroupConfig&, const GroupConfig&) = default;
};

struct DatasetConfig {
  std::int32_t vocab_size = 1000;
  std::int32_t groups = 50;
  GroupConfig group{};
  std::uint64_t seed = 0;

  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct ConditionGroup {
  std::int32_t id = 0;
  TokenSeq a, b, d;
  TokenSeq c, e;

  TokenSeq popular_prompt(const Vocab& v) const { return join(a, b, v.sep_id); }
  TokenSeq rare_prompt(const Vocab& v) const { return join(a, d, v.sep_id); }

  friend bool operator==(const ConditionGroup&, const ConditionGroup&) = default;

 private:
  static TokenSeq join(const TokenSeq& x, const TokenSeq& y, TokenId sep) {
    TokenSeq out;
    out.reserve(x.size() + y.size() + 1);
    out.insert(out.end(), x.begin(), x.end());
    out.insert(out.end(), y.begin(), y.end());
    out.push_back(sep);
    return out;
  }
};

enum class Branch { popular, rare };

inline const char* to_string(Branch b) noexcept { return b == Branch::popular ? "popular" : "rare"; }

struct Sample {
  TokenSeq prompt;
  TokenSeq target;
  std::int32_t group = 0;
  Branch branch = Branch::popular;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct SyntheticDataset {
  Vocab vocab;
  DatasetConfig config;
  std::vector<ConditionGroup> groups;
  std::vector<Sample> samples;

  friend bool operator==(const SyntheticDataset&, const SyntheticDataset&) = default;
};

namespace detail {

inline TokenSeq draw_tokens(const Vocab& v, std::int32_t len, std::mt19937_64& rng) {
  std::uniform_int_distribution<TokenId> dist(v.first_content(), v.size - 1);
  TokenSeq out(static_cast<std::size_t>(len));
  for (auto& t : out) t = dist(rng);
  return out;
}

inline constexpr int kMaxRetries = 1000;

}  // namespace detail

inline ConditionGroup generate_group(const Vocab& vocab, const GroupConfig& cfg,
                                     std::mt19937_64& rng) {
  cfg.validate();
  ConditionGroup g;
  g.a = detail::draw_tokens(vocab, cfg.len_a, rng);
  g.c = detail::draw_tokens(vocab, cfg.len_t, rng);
  g.b = detail::draw_tokens(vocab, cfg.len_b, rng);
  g.d = detail::draw_tokens(vocab, cfg.len_b, rng);
  for (int tries = 0; g.d == g.b; ++tries) {
    if (tries == detail::kMaxRetries) throw GenerationError("could not draw distinct infix conditions");
    g.d = detail::draw_tokens(vocab, cfg.len_b, rng);
  }
  g.e = detail::draw_tokens(vocab, cfg.len_t, rng);
  for (int tries = 0; g.e == g.c; ++tries) {
    if (tries == detail::kMaxRetries) throw GenerationError("could not draw distinct targets");
    g.e = detail::draw_tokens(vocab, cfg.len_t, rng);
  }
  return g;
}

inline SyntheticDataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.groups < 1) throw ConfigError("group count must be >= 1");
  cfg.group.validate();
  SyntheticDataset ds;
  ds.vocab = build_vocab(cfg.vocab_size);
  ds.config = cfg;

  std::mt19937_64 rng(cfg.seed);
  std::set<TokenSeq> seen_prompts;
  for (std::int32_t gi = 0; gi < cfg.groups; ++gi) {
    for (int tries = 0;; ++tries) {
      if (tries == detail::kMaxRetries)
        throw GenerationError("prompt prefixes exhausted at group " + std::to_string(gi));
      ConditionGroup g = generate_group(ds.vocab, cfg.group, rng);
      g.id = gi;
      auto pop = g.popular_prompt(ds.vocab);
      auto rare = g.rare_prompt(ds.vocab);
      if (seen_prompts.count(pop) || seen_prompts.count(rare)) continue;
      seen_prompts.insert(pop);
      seen_prompts.insert(rare);
      ds.groups.push_back(std::move(g));
      break;
    }
  }

  ds.samples.reserve(std::size_t(cfg.groups) * std::size_t(cfg.group.m + cfg.group.n));
  for (const auto& g : ds.groups) {
    for (std::int32_t i = 0; i < cfg.group.m; ++i)
      ds.samples.push_back({g.popular_prompt(ds.vocab), g.c, g.id, Branch::popular});
    for (std::int32_t i = 0; i < cfg.group.n; ++i)
      ds.samples.push_back({g.rare_prompt(ds.vocab), g.e, g.id, Branch::rare});
  }
  std::shuffle(ds.samples.begin(), ds.samples.end(), rng);
  return ds;
}

/// Evaluation query. Rare-branch queries carry the popular answer of the same
/// group as `amalgam`.
struct Query {
  TokenSeq prompt;
  TokenSeq gold;
  std::optional<TokenSeq> amalgam;
  std::int32_t group = 0;

  friend bool operator==(const Query&, const Query&) = default;
};

struct EvalSplit {
  std::vector<Sample> train;
  std::vector<Query> popular;
  std::vector<Query> rare;
};

// Evaluation runs on training prompts: overshadowing is measured on the
// memorized distribution itself.
inline EvalSplit eval_split(const SyntheticDataset& ds) {
  EvalSplit out;
  out.train = ds.samples;
  for (const auto& g : ds.groups) {
    out.popular.push_back({g.popular_prompt(ds.vocab), g.c, std::nullopt, g.id});
    out.rare.push_back({g.rare_prompt(ds.vocab), g.e, g.c, g.id});
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence

inline constexpr std::uint32_t kDatasetVersion = 1;

inline nlohmann::json to_json(const DatasetConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"groups", c.groups},
          {"len_a", c.group.len_a},
          {"len_b", c.group.len_b},
          {"len_t", c.group.len_t},
          {"m", c.group.m},
          {"n", c.group.n},
          {"seed", c.seed}};
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.vocab_size = j.at("vocab_size").get<std::int32_t>();
  c.groups = j.at("groups").get<std::int32_t>();
  c.group.len_a = j.at("len_a").get<std::int32_t>();
  c.group.len_b = j.at("len_b").get<std::int32_t>();
  c.group.len_t = j.at("len_t").get<std::int32_t>();
  c.group.m = j.at("m").get<std::int32_t>();
  c.group.n = j.at("n").get<std::int32_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

inline void write_dataset(const SyntheticDataset& ds, std::ostream& os) {
  nlohmann::json header = {{"version", kDatasetVersion}, {"config", to_json(ds.config)}};
  os << header.dump() << '\n';
  for (const auto& s : ds.samples) {
    nlohmann::json row = {{"prompt", s.prompt},
                          {"target", s.target},
                          {"group", s.group},
                          {"branch", to_string(s.branch)}};
    os << row.dump() << '\n';
  }
}

inline void save_dataset(const SyntheticDataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset(ds, os);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline SyntheticDataset read_dataset(std::istream& is) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) throw ParseError("missing header", 1);
  ++lineno;

  SyntheticDataset ds;
  try {
    auto header = nlohmann::json::parse(line);
    auto version = header.at("version").get<std::uint32_t>();
    if (version != kDatasetVersion) throw VersionError("unsupported dataset file", version, kDatasetVersion);
    ds.config = dataset_config_from_json(header.at("config"));
    ds.vocab = build_vocab(ds.config.vocab_size);
    ds.config.group.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad header: ") + e.what(), lineno);
  } catch (const ConfigError& e) {
    throw ParseError(std::string("bad header config: ") + e.what(), lineno);
  }

  const auto& gc = ds.config.group;
  const std::size_t pop_len = std::size_t(gc.len_a + gc.len_b + 1);
  std::map<std::int32_t, ConditionGroup> groups;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) throw ParseError("empty record", lineno);
    Sample s;
    try {
      auto row = nlohmann::json::parse(line);
      s.prompt = row.at("prompt").get<TokenSeq>();
      s.target = row.at("target").get<TokenSeq>();
      s.group = row.at("group").get<std::int32_t>();
      auto branch = row.at("branch").get<std::string>();
      if (branch == "popular") s.branch = Branch::popular;
      else if (branch == "rare") s.branch = Branch::rare;
      else throw ParseError("unknown branch '" + branch + "'", lineno);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), lineno);
    }
    if (s.prompt.size() != pop_len || s.target.size() != std::size_t(gc.len_t) ||
        s.prompt.back() != ds.vocab.sep_id)
      throw ParseError("record shape does not match header config", lineno);
    if (s.group < 0 || s.group >= ds.config.groups) throw ParseError("group id out of range", lineno);

    auto& g = groups[s.group];
    g.id = s.group;
    TokenSeq a(s.prompt.begin(), s.prompt.begin() + gc.len_a);
    TokenSeq infix(s.prompt.begin() + gc.len_a, s.prompt.end() - 1);
    if (!g.a.empty() && g.a != a) throw ParseError("inconsistent prefix within group", lineno);
    g.a = a;
    auto& cond = s.branch == Branch::popular ? g.b : g.d;
    auto& tgt = s.branch == Branch::popular ? g.c : g.e;
    if ((!cond.empty() && cond != infix) || (!tgt.empty() && tgt != s.target))
      throw ParseError("inconsistent condition or target within group", lineno);
    cond = infix;
    tgt = s.target;
    ds.samples.push_back(std::move(s));
  }

  const std::size_t expected = std::size_t(ds.config.groups) * std::size_t(gc.m + gc.n);
  if (ds.samples.size() != expected)
    throw ParseError("truncated dataset: expected " + std::to_string(expected) + " records, got " +
                         std::to_string(ds.samples.size()),
                     lineno + 1);
  for (auto& [id, g] : groups) {
    if (g.b.empty() || g.d.empty()) throw ParseError("group " + std::to_string(id) + " lacks a branch", lineno);
    ds.groups.push_back(std::move(g));
  }
  if (ds.groups.size() != std::size_t(ds.config.groups)) throw ParseError("missing groups", lineno);
  return ds;
}

inline SyntheticDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_dataset(is);
}

}  // namespace ovsh
