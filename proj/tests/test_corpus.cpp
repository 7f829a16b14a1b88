#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include "currseq/corpus.hpp"
#include "currseq/pool_io.hpp"
#include "currseq/sampling.hpp"

using namespace currseq;

namespace {

Utterance words(std::size_t n, const std::string& stem = "w") {
  Utterance u;
  for (std::size_t i = 0; i < n; ++i) u.tokens.push_back(stem + std::to_string(i));
  return u;
}

PairPool numbered_pool(std::size_t n, PoolLabel label = PoolLabel::Short) {
  PairPool pool{label, {}, {}};
  for (std::size_t i = 0; i < n; ++i) {
    pool.pairs.push_back(DialoguePair::of(Utterance::from_line("p" + std::to_string(i)), Utterance::from_line("q")));
  }
  return pool;
}

std::size_t index_of(const DialoguePair& p) { return std::stoul(p.source.tokens[0].substr(1)); }

}  // namespace

TEST(ClassifyLength, ClassBoundaries) {
  const std::vector<std::string> how{"how", "are", "you"};
  EXPECT_EQ(classify_length(how), LengthClass::Short);
  EXPECT_EQ(classify_word_count(1), LengthClass::Short);
  EXPECT_EQ(classify_word_count(4), LengthClass::Short);
  EXPECT_EQ(classify_word_count(5), LengthClass::Medium);
  EXPECT_EQ(classify_word_count(10), LengthClass::Medium);
  EXPECT_EQ(classify_word_count(11), LengthClass::Long);
  EXPECT_EQ(classify_word_count(16), LengthClass::Long);
  EXPECT_EQ(classify_word_count(17), LengthClass::Overlong);
}

TEST(ClassifyLength, EmptyIsInvalid) {
  EXPECT_THROW(classify_length(std::vector<std::string>{}), InvalidUtterance);
}

TEST(ClassifyLength, ClassesPartitionWordCounts) {
  for (std::size_t n = 1; n <= 40; ++n) {
    int matches = 0;
    matches += n >= 1 && n <= 4;
    matches += n >= 5 && n <= 10;
    matches += n >= 11 && n <= 16;
    matches += n > 16;
    ASSERT_EQ(matches, 1);
    const auto c = classify_word_count(n);
    const bool consistent = (c == LengthClass::Short && n <= 4) || (c == LengthClass::Medium && n >= 5 && n <= 10) ||
                            (c == LengthClass::Long && n >= 11 && n <= 16) || (c == LengthClass::Overlong && n > 16);
    EXPECT_TRUE(consistent) << n;
  }
}

TEST(Utterance, LowercasesAndSplitsOnWhitespace) {
  const auto u = Utterance::from_line("  Hello\tWORLD  again\r");
  EXPECT_EQ(u.tokens, (std::vector<std::string>{"hello", "world", "again"}));
  EXPECT_THROW(Utterance::from_line(" \t "), InvalidUtterance);
}

TEST(ParseConversations, BlankLinesSeparateConversations) {
  std::istringstream in("hi\nhello\n\nbye\n");
  const auto convs = parse_conversations(in);
  ASSERT_EQ(convs.size(), 2u);
  EXPECT_EQ(convs[0].size(), 2u);
  EXPECT_EQ(convs[0][1].tokens[0], "hello");
  EXPECT_EQ(convs[1][0].tokens[0], "bye");
}

TEST(ParseConversations, EmptyInputAndEofTermination) {
  std::istringstream empty("");
  EXPECT_TRUE(parse_conversations(empty).empty());
  std::istringstream noblank("A\nB\nC");
  const auto convs = parse_conversations(noblank);
  ASSERT_EQ(convs.size(), 1u);
  EXPECT_EQ(convs[0].size(), 3u);
  EXPECT_EQ(convs[0][0].tokens[0], "a");
  std::istringstream blanks("\n\n \nx\n\n\n");
  EXPECT_EQ(parse_conversations(blanks).size(), 1u);
}

TEST(ParseConversations, InvalidUtf8ReportsLine) {
  std::istringstream in("fine\nstill fine\nbad \xC3\x28 byte\n");
  try {
    parse_conversations(in);
    FAIL() << "expected CorpusDecodeError";
  } catch (const CorpusDecodeError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  std::istringstream ok("caf\xC3\xA9 \xE2\x82\xAC\n");
  EXPECT_NO_THROW(parse_conversations(ok));
  std::istringstream overlong("\xC0\xAF\n");
  EXPECT_THROW(parse_conversations(overlong), CorpusDecodeError);
}

TEST(ExtractPairs, SuccessiveUtterancesWithinConversation) {
  const Conversation abc{Utterance::from_line("a"), Utterance::from_line("b"), Utterance::from_line("c")};
  const auto pairs = extract_pairs(abc);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].source.text(), "a");
  EXPECT_EQ(pairs[0].target.text(), "b");
  EXPECT_EQ(pairs[1].source.text(), "b");
  EXPECT_EQ(pairs[1].target.text(), "c");
  EXPECT_TRUE(extract_pairs(Conversation{Utterance::from_line("a")}).empty());

  std::istringstream two("a\nb\n\nc\n");
  const auto pools = build_pools(two);
  ASSERT_EQ(pools.cross.size(), 1u);
  EXPECT_EQ(pools.cross.pairs[0].key(), "a\tb");
}

TEST(BuildPools, Dispositions) {
  PoolBuilder b;
  EXPECT_EQ(b.add(DialoguePair::of(words(3), words(4))), Disposition::ShortPool);
  EXPECT_EQ(b.add(DialoguePair::of(words(3), words(8))), Disposition::CrossOnly);
  EXPECT_EQ(b.add(DialoguePair::of(words(3), words(17))), Disposition::Discarded);
  EXPECT_EQ(b.add(DialoguePair::of(words(10), words(5))), Disposition::MediumPool);
  EXPECT_EQ(b.add(DialoguePair::of(words(16), words(11))), Disposition::LongPool);
  const auto pools = std::move(b).finish();
  EXPECT_EQ(pools.of(LengthClass::Short).size(), 1u);
  EXPECT_EQ(pools.of(LengthClass::Medium).size(), 1u);
  EXPECT_EQ(pools.of(LengthClass::Long).size(), 1u);
  EXPECT_EQ(pools.cross.size(), 4u);
  EXPECT_EQ(pools.counts.discarded, 1u);
  EXPECT_EQ(pools.counts.cross_only, 1u);
  for (const auto& p : pools.length) EXPECT_NO_THROW(check_pool_membership(p));
  EXPECT_NO_THROW(check_pool_membership(pools.cross));
}

TEST(BuildPools, DispositionAccountingIsComplete) {
  KeyedRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<DialoguePair> pairs;
    for (int i = 0; i < 300; ++i) {
      pairs.push_back(DialoguePair::of(words(1 + rng.below(22)), words(1 + rng.below(22))));
    }
    const auto pools = build_pools(pairs);
    const auto& c = pools.counts;
    EXPECT_EQ(c.total(), pairs.size());
    EXPECT_EQ(pools.cross.size(), c.cross_total());
    EXPECT_EQ(pools.of(LengthClass::Short).size() + pools.of(LengthClass::Medium).size() +
                  pools.of(LengthClass::Long).size() + c.cross_only + c.discarded,
              pairs.size());
    std::set<std::string> cross_keys;
    for (const auto& p : pools.cross.pairs) cross_keys.insert(p.key());
    for (const auto& pool : pools.length) {
      for (const auto& p : pool.pairs) EXPECT_TRUE(cross_keys.contains(p.key()));
    }
  }
}

TEST(SampleUniform, EdgeCases) {
  const auto pool = numbered_pool(50);
  const auto all = sample_uniform(pool, 50, 3);
  std::vector<std::size_t> idx;
  for (const auto& p : all.pairs) idx.push_back(index_of(p));
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(idx[i], i);

  EXPECT_TRUE(sample_uniform(pool, 0, 3).empty());
  EXPECT_EQ(sample_uniform(pool, 17, 9).pairs, sample_uniform(pool, 17, 9).pairs);
  EXPECT_NE(sample_uniform(pool, 17, 9).pairs, sample_uniform(pool, 17, 10).pairs);

  try {
    sample_uniform(pool, 51, 1);
    FAIL();
  } catch (const InsufficientPairs& e) {
    EXPECT_EQ(e.have(), 50u);
    EXPECT_EQ(e.want(), 51u);
  }
}

TEST(SampleUniform, InclusionFrequenciesAreUniform) {
  const std::size_t pool_size = 100, n = 10, seeds = 2000;
  const auto pool = numbered_pool(pool_size);
  std::vector<double> hits(pool_size, 0.0);
  std::vector<double> first_slot(pool_size, 0.0);
  for (std::uint64_t s = 0; s < seeds; ++s) {
    const auto sample = sample_uniform(pool, n, s);
    for (const auto& p : sample.pairs) hits[index_of(p)] += 1;
    first_slot[index_of(sample.pairs[0])] += 1;
  }
  const double p = static_cast<double>(n) / pool_size;
  const double mean = seeds * p;
  const double sigma = std::sqrt(seeds * p * (1 - p));
  for (double h : hits) EXPECT_LT(std::abs(h - mean), 5 * sigma);
  double chi2 = 0;
  for (double h : hits) chi2 += (h - mean) * (h - mean) / (sigma * sigma);
  const double dof = pool_size - 1;
  EXPECT_LT(chi2, dof + 5 * std::sqrt(2 * dof));
  // Output order is shuffled: each pair is equally likely to come first.
  const double mean_first = static_cast<double>(seeds) / pool_size;
  const double sigma_first = std::sqrt(seeds * (1.0 / pool_size) * (1 - 1.0 / pool_size));
  for (double h : first_slot) EXPECT_LT(std::abs(h - mean_first), 5 * sigma_first);
}

TEST(MixSet, CompositionFollowsRemainderConvention) {
  EXPECT_EQ(mix_counts(9), (std::array<std::size_t, 3>{3, 3, 3}));
  EXPECT_EQ(mix_counts(10), (std::array<std::size_t, 3>{4, 3, 3}));
  EXPECT_EQ(mix_counts(11), (std::array<std::size_t, 3>{4, 4, 3}));
  EXPECT_EQ(mix_counts(0), (std::array<std::size_t, 3>{0, 0, 0}));

  PoolBuilder b;
  for (int i = 0; i < 40; ++i) {
    b.add(DialoguePair::of(words(2, "s" + std::to_string(i)), words(3)));
    b.add(DialoguePair::of(words(6, "m" + std::to_string(i)), words(7)));
    b.add(DialoguePair::of(words(12, "l" + std::to_string(i)), words(13)));
  }
  const auto pools = std::move(b).finish();
  for (std::size_t n = 0; n <= 100; ++n) {
    const auto mix = build_mix_set(pools.of(LengthClass::Short), pools.of(LengthClass::Medium),
                                   pools.of(LengthClass::Long), n, 17 + n);
    ASSERT_EQ(mix.size(), n);
    std::array<std::size_t, 3> got{};
    for (const auto& p : mix.pairs) ++got[static_cast<std::size_t>(p.source_class)];
    EXPECT_EQ(got, mix_counts(n));
    EXPECT_LE(*std::max_element(got.begin(), got.end()) - *std::min_element(got.begin(), got.end()), 1u);
    EXPECT_NO_THROW(check_pool_membership(mix));
  }
  EXPECT_THROW(build_mix_set(pools.of(LengthClass::Short), pools.of(LengthClass::Medium),
                             pools.of(LengthClass::Long), 121, 1),
               InsufficientPairs);
}

TEST(MixSet, OrderIsShuffled) {
  PoolBuilder b;
  for (int i = 0; i < 30; ++i) {
    b.add(DialoguePair::of(words(2, "s" + std::to_string(i)), words(3)));
    b.add(DialoguePair::of(words(6, "m" + std::to_string(i)), words(7)));
    b.add(DialoguePair::of(words(12, "l" + std::to_string(i)), words(13)));
  }
  const auto pools = std::move(b).finish();
  const auto mix = build_mix_set(pools.of(LengthClass::Short), pools.of(LengthClass::Medium),
                                 pools.of(LengthClass::Long), 60, 4);
  // Not grouped by class: count class changes between neighbours.
  int changes = 0;
  for (std::size_t i = 1; i < mix.size(); ++i) changes += mix.pairs[i].source_class != mix.pairs[i - 1].source_class;
  EXPECT_GT(changes, 10);
}

TEST(CrossSet, RespectsLimitAndComposition) {
  PoolBuilder b;
  KeyedRng rng(8);
  for (int i = 0; i < 3000; ++i) {
    b.add(DialoguePair::of(words(1 + rng.below(16), "a" + std::to_string(i)), words(1 + rng.below(16))));
  }
  const auto pools = std::move(b).finish();
  const auto five = build_cross_set(pools.cross, 5, 1);
  ASSERT_EQ(five.size(), 5u);
  for (const auto& p : five.pairs) {
    EXPECT_LE(p.source.size(), 16u);
    EXPECT_LE(p.target.size(), 16u);
  }
  EXPECT_EQ(build_cross_set(pools.cross, pools.cross.size(), 2).size(), pools.cross.size());

  // Composition of (source class, target class) cells over 10 seeds.
  std::map<std::pair<int, int>, double> pool_share, sampled;
  for (const auto& p : pools.cross.pairs) {
    pool_share[{int(p.source_class), int(p.target_class)}] += 1.0 / pools.cross.size();
  }
  const std::size_t n = 1000;
  for (std::uint64_t s = 0; s < 10; ++s) {
    for (const auto& p : build_cross_set(pools.cross, n, s).pairs) sampled[{int(p.source_class), int(p.target_class)}] += 1;
  }
  double chi2 = 0;
  for (const auto& [cell, share] : pool_share) {
    const double expected = share * n * 10;
    chi2 += (sampled[cell] - expected) * (sampled[cell] - expected) / expected;
  }
  const double dof = static_cast<double>(pool_share.size() - 1);
  EXPECT_LT(chi2, dof + 5 * std::sqrt(2 * dof));
}

TEST(SplitHoldout, HeldOutPairsNeverReachTraining) {
  auto pool = numbered_pool(200);
  pool.pairs.push_back(pool.pairs[3]);  // duplicate dialogue
  const auto split = split_holdout(pool, 40, 12);
  EXPECT_EQ(split.holdout.size(), 40u);
  std::set<std::string> held;
  for (const auto& p : split.holdout.pairs) held.insert(p.key());
  for (const auto& p : split.remainder.pairs) EXPECT_FALSE(held.contains(p.key()));
  EXPECT_GE(split.remainder.size(), 200u - 40u);
}

TEST(PoolFiles, RoundTripWithManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "currseq_pool_test";
  std::filesystem::remove_all(dir);
  std::istringstream corpus("how are you\nfine thanks\nand you\n\nlong time no see my friend\nyes it has been a while\n");
  auto pools = build_pools(corpus, "toy", "digest");
  write_pool(dir / "short.tsv", pools.of(LengthClass::Short));
  const auto back = read_pool(dir / "short.tsv");
  EXPECT_EQ(back.label, PoolLabel::Short);
  EXPECT_EQ(back.pairs, pools.of(LengthClass::Short).pairs);
  EXPECT_EQ(back.manifest.counts, pools.counts);
  EXPECT_EQ(read_text_file(dir / "short.tsv"), "how are you\tfine thanks\nfine thanks\tand you\n");

  write_text_file(dir / "bad.tsv", "one two three four five\tsix\n");
  write_text_file(dir / "bad.tsv.manifest.json", R"({"class":"short"})");
  EXPECT_THROW(read_pool(dir / "bad.tsv"), FormatError);
  EXPECT_THROW(read_pool(dir / "missing.tsv"), IoError);
  std::filesystem::remove_all(dir);
}
