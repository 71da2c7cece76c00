#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "ovsh/synthdata.hpp"

using namespace ovsh;

namespace {

DatasetConfig small_config(std::uint64_t seed = 7) {
  DatasetConfig c;
  c.vocab_size = 200;
  c.groups = 12;
  c.group = {4, 2, 1, 9, 2};
  c.seed = seed;
  return c;
}

std::string serialize(const SyntheticDataset& ds) {
  std::ostringstream os;
  write_dataset(ds, os);
  return os.str();
}

}  // namespace

TEST(BuildVocab, ReservesTwoLowestIds) {
  auto v = build_vocab(1000);
  EXPECT_EQ(v.size, 1000);
  EXPECT_EQ(v.pad_id, 0);
  EXPECT_EQ(v.sep_id, 1);
  EXPECT_EQ(build_vocab(16).content_count(), 14);
  EXPECT_THROW(build_vocab(8), ConfigError);
}

TEST(GenerateGroup, ShapeFollowsConfig) {
  auto v = build_vocab(1000);
  std::mt19937_64 rng(1);
  GroupConfig cfg{10, 1, 1, 100, 1};
  auto g = generate_group(v, cfg, rng);
  EXPECT_EQ(g.a.size(), 10u);
  EXPECT_EQ(g.b.size(), 1u);
  EXPECT_EQ(g.d.size(), 1u);
  EXPECT_EQ(g.c.size(), 1u);
  EXPECT_EQ(g.e.size(), 1u);
  EXPECT_DOUBLE_EQ(cfg.length_ratio(), 10.0);
  EXPECT_NE(g.b, g.d);
  EXPECT_NE(g.c, g.e);
  EXPECT_DOUBLE_EQ((GroupConfig{1, 1, 1, 10, 1}).length_ratio(), 1.0);
}

TEST(GenerateGroup, DeterministicForSeed) {
  auto v = build_vocab(100);
  GroupConfig cfg{5, 2, 3, 4, 1};
  std::mt19937_64 r1(42), r2(42);
  EXPECT_EQ(generate_group(v, cfg, r1), generate_group(v, cfg, r2));
}

TEST(GenerateGroup, RejectsInvalidConfig) {
  auto v = build_vocab(100);
  std::mt19937_64 rng(0);
  EXPECT_THROW(generate_group(v, GroupConfig{0, 1, 1, 1, 1}, rng), ConfigError);
  EXPECT_THROW(generate_group(v, GroupConfig{1, 1, 1, 1, 2}, rng), ConfigError);
}

TEST(GenerateGroup, TinyVocabEventuallyFails) {
  // 14 content ids, one-token prefixes: at most 14 * 14 distinct prompts, so
  // 200 groups cannot all have unique (A,B) and (A,D) prefixes.
  DatasetConfig c;
  c.vocab_size = 16;
  c.groups = 200;
  c.group = {1, 1, 1, 1, 1};
  EXPECT_THROW(generate_dataset(c), GenerationError);
}

TEST(GenerateDataset, CountsMatchConfig) {
  DatasetConfig c;
  c.groups = 50;
  c.group.m = 100;
  c.group.n = 1;
  auto ds = generate_dataset(c);
  EXPECT_EQ(ds.samples.size(), 5050u);
  std::size_t pop = 0, rare = 0;
  for (const auto& s : ds.samples) (s.branch == Branch::popular ? pop : rare)++;
  EXPECT_EQ(pop, 5000u);
  EXPECT_EQ(rare, 50u);
  EXPECT_DOUBLE_EQ((GroupConfig{10, 1, 1, 10, 1}).imbalance_ratio(), 10.0);
}

TEST(GenerateDataset, InvariantsHoldAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto cfg = small_config(seed);
    auto ds = generate_dataset(cfg);
    const auto& gc = cfg.group;

    std::map<std::int32_t, std::pair<int, int>> per_group;
    std::map<TokenSeq, TokenSeq> gold;
    for (const auto& s : ds.samples) {
      auto& counts = per_group[s.group];
      (s.branch == Branch::popular ? counts.first : counts.second)++;
      ASSERT_EQ(s.prompt.size(), std::size_t(gc.len_a + gc.len_b + 1));
      ASSERT_EQ(s.prompt.back(), ds.vocab.sep_id);
      for (std::size_t i = 0; i + 1 < s.prompt.size(); ++i) ASSERT_FALSE(ds.vocab.is_reserved(s.prompt[i]));
      for (auto t : s.target) ASSERT_FALSE(ds.vocab.is_reserved(t));
      auto [it, inserted] = gold.emplace(s.prompt, s.target);
      ASSERT_EQ(it->second, s.target) << "prompt has two gold targets";
    }
    ASSERT_EQ(per_group.size(), std::size_t(cfg.groups));
    for (const auto& [id, counts] : per_group) {
      EXPECT_EQ(counts.first, gc.m);
      EXPECT_EQ(counts.second, gc.n);
    }
    // Every group contributes exactly two distinct prompts.
    EXPECT_EQ(gold.size(), std::size_t(2 * cfg.groups));
    for (const auto& g : ds.groups) {
      EXPECT_NE(g.b, g.d);
      EXPECT_NE(g.c, g.e);
      EXPECT_DOUBLE_EQ(double(g.a.size()) / double(g.b.size()), gc.length_ratio());
    }
  }
}

TEST(GenerateDataset, SameSeedSameBytes) {
  auto a = serialize(generate_dataset(small_config(3)));
  auto b = serialize(generate_dataset(small_config(3)));
  auto c = serialize(generate_dataset(small_config(4)));
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(EvalSplit, OneQueryPerGroupPerBranch) {
  auto ds = generate_dataset(DatasetConfig{});
  auto split = eval_split(ds);
  EXPECT_EQ(split.train.size(), ds.samples.size());
  ASSERT_EQ(split.popular.size(), 50u);
  ASSERT_EQ(split.rare.size(), 50u);
  for (std::size_t i = 0; i < ds.groups.size(); ++i) {
    const auto& g = ds.groups[i];
    EXPECT_EQ(split.popular[i].gold, g.c);
    EXPECT_FALSE(split.popular[i].amalgam.has_value());
    EXPECT_EQ(split.rare[i].gold, g.e);
    ASSERT_TRUE(split.rare[i].amalgam.has_value());
    EXPECT_EQ(*split.rare[i].amalgam, g.c);
    EXPECT_EQ(split.rare[i].prompt, g.rare_prompt(ds.vocab));
  }
}

TEST(EvalSplit, EmptyGroupsGiveEmptyQueries) {
  SyntheticDataset ds;
  ds.vocab = build_vocab(16);
  auto split = eval_split(ds);
  EXPECT_TRUE(split.popular.empty());
  EXPECT_TRUE(split.rare.empty());
}

TEST(DatasetFile, RoundTripIsIdentity) {
  auto ds = generate_dataset(small_config());
  auto path = std::filesystem::temp_directory_path() / "ovsh_roundtrip.jsonl";
  save_dataset(ds, path.string());
  auto back = load_dataset(path.string());
  EXPECT_EQ(back, ds);
  std::filesystem::remove(path);
}

TEST(DatasetFile, HeaderLayout) {
  auto text = serialize(generate_dataset(small_config()));
  auto first = text.substr(0, text.find('\n'));
  auto header = nlohmann::json::parse(first);
  EXPECT_EQ(header.at("version"), 1);
  EXPECT_EQ(header.at("config").at("groups"), 12);
  auto second = nlohmann::json::parse(text.substr(first.size() + 1, text.find('\n', first.size() + 1) - first.size() - 1));
  EXPECT_TRUE(second.contains("prompt"));
  EXPECT_TRUE(second.at("branch") == "popular" || second.at("branch") == "rare");
}

TEST(DatasetFile, TruncatedFileReportsLine) {
  auto text = serialize(generate_dataset(small_config()));
  auto cut = text.substr(0, text.size() / 2);
  cut = cut.substr(0, cut.rfind('\n') + 1);
  std::istringstream is(cut);
  try {
    read_dataset(is);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_GT(e.line(), 1u);
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(DatasetFile, MalformedRecordReportsLine) {
  auto text = serialize(generate_dataset(small_config()));
  auto pos = text.find('\n');
  pos = text.find('\n', pos + 1);
  text.insert(pos + 1, "{not json}\n");
  std::istringstream is(text);
  try {
    read_dataset(is);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(DatasetFile, VersionMismatchIsVersioned) {
  auto text = serialize(generate_dataset(small_config()));
  auto pos = text.find("\"version\":1");
  ASSERT_NE(pos, std::string::npos);
  text.replace(pos, 11, "\"version\":2");
  std::istringstream is(text);
  try {
    read_dataset(is);
    FAIL() << "expected VersionError";
  } catch (const VersionError& e) {
    EXPECT_EQ(e.found(), 2u);
    EXPECT_EQ(e.expected(), 1u);
  }
}
