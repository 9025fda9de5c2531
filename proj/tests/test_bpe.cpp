#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "subtag/bpe.hpp"
#include "subtag/unicode.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace subtag;
using bpe::Symbol;

namespace {

Symbol u(const std::string &s) { return unicode::decode(s); }

bpe::BpeModel learn_toy(std::size_t extra_merges) {
  // Alphabet of "low low lower": ▁ e l o r w.
  return bpe::learn(std::vector<std::string>{"low low lower"}, 6 + extra_merges);
}

std::vector<std::string> random_texts(Rng &rng, std::size_t alphabet, std::size_t max_chars) {
  std::vector<std::string> texts;
  std::string text;
  const std::size_t length = 1 + rng.uniform_index(max_chars);
  for (std::size_t i = 0; i < length; ++i) {
    if (!text.empty() && text.back() != ' ' && rng.bernoulli(0.2))
      text += ' ';
    else
      text += static_cast<char>('a' + rng.uniform_index(alphabet));
  }
  texts.push_back(text);
  return texts;
}

}  // namespace

TEST(BpeLearn, FirstMergeOfToyCorpus) {
  const auto m = learn_toy(1);
  EXPECT_EQ(m.alphabet().size(), 6u);
  ASSERT_EQ(m.merges().size(), 1u);
  EXPECT_EQ(m.merges()[0], (bpe::Merge{u("▁"), u("l")}));
}

TEST(BpeLearn, ThreeMergesOfToyCorpus) {
  const auto m = learn_toy(3);
  const std::vector<bpe::Merge> expected{{u("▁"), u("l")}, {u("▁l"), u("o")}, {u("▁lo"), u("w")}};
  EXPECT_EQ(m.merges(), expected);
  EXPECT_EQ(bpe::segment_word(m, "low"), std::vector<std::string>{"▁low"});
  EXPECT_EQ(bpe::segment_word(m, "lower"), (std::vector<std::string>{"▁low", "e", "r"}));
}

TEST(BpeLearn, TargetEqualToAlphabetGivesNoMerges) {
  const auto m = learn_toy(0);
  EXPECT_TRUE(m.merges().empty());
  EXPECT_EQ(bpe::segment_word(m, "low"), (std::vector<std::string>{"▁", "l", "o", "w"}));
}

TEST(BpeLearn, Errors) {
  EXPECT_THROW(bpe::learn(std::vector<std::string>{}, 10), EmptyCorpusError);
  EXPECT_THROW(bpe::learn(std::vector<std::string>{"   "}, 10), EmptyCorpusError);
  EXPECT_THROW(bpe::learn(std::vector<std::string>{"low"}, 3), ConfigError);
}

TEST(BpeLearn, StopsWhenNoPairRepeats) {
  const auto m = bpe::learn(std::vector<std::string>{"abc"}, 100);
  EXPECT_TRUE(m.merges().empty());
}

TEST(BpeLearn, VocabAccounting) {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const auto texts = random_texts(rng, 6, 200);
    const auto m = bpe::learn(texts, 40);
    EXPECT_EQ(m.vocab().size(), m.alphabet().size() + m.merges().size());
    EXPECT_LE(m.vocab().size(), 40u);
    std::set<Symbol> distinct(m.vocab().begin(), m.vocab().end());
    EXPECT_EQ(distinct.size(), m.vocab().size());
  }
}

TEST(BpeLearn, MatchesBruteForceOracle) {
  Rng rng(2024);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t alphabet = 2 + rng.uniform_index(9);
    const auto texts = random_texts(rng, alphabet, 200);
    const std::size_t target = 1 + alphabet + rng.uniform_index(60);
    std::map<std::u32string, uint64_t> counts;
    for (const auto &[w, c] : bpe::count_words(texts)) counts[u(w)] += c;
    const auto expected = oracle::brute_force_bpe(counts, target);
    std::set<Symbol> alpha;
    for (const auto &[w, c] : counts)
      for (char32_t ch : w) alpha.insert(Symbol(1, ch));
    if (target < alpha.size() + 1) continue;
    const auto m = bpe::learn(texts, target);
    EXPECT_EQ(m.merges(), expected.merges) << "trial " << trial;
  }
}

TEST(BpeLearn, PrefixProperty) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto texts = random_texts(rng, 5, 200);
    const auto big = bpe::learn(texts, 60);
    const auto small = bpe::learn(texts, 20);
    ASSERT_LE(small.merges().size(), big.merges().size());
    for (std::size_t i = 0; i < small.merges().size(); ++i) EXPECT_EQ(small.merges()[i], big.merges()[i]);
  }
}

TEST(BpeLearn, MergePrecedenceMarkerFirst) {
  EXPECT_TRUE(bpe::merge_precedes({u("▁"), u("l")}, {u("l"), u("o")}));
  EXPECT_TRUE(bpe::merge_precedes({u("▁lo"), u("w")}, {u("o"), u("w")}));
  EXPECT_TRUE(bpe::merge_precedes({u("a"), u("bc")}, {u("ab"), u("c")}));
  EXPECT_FALSE(bpe::merge_precedes({u("b"), u("a")}, {u("a"), u("b")}));
}

TEST(BpeSegment, NoMergesSplitsCharacters) {
  const bpe::BpeModel m({u("▁"), u("a"), u("b")}, {});
  EXPECT_EQ(bpe::segment_word(m, "ab"), (std::vector<std::string>{"▁", "a", "b"}));
}

TEST(BpeSegment, UnknownCharactersStaySingletons) {
  const auto m = learn_toy(3);
  EXPECT_EQ(bpe::segment_word(m, "lowß"), (std::vector<std::string>{"▁low", "ß"}));
}

TEST(BpeSegment, LeftmostAmongEqualRanks) {
  const bpe::BpeModel m({u("▁"), u("a")}, {{u("a"), u("a")}});
  EXPECT_EQ(bpe::segment_word(m, "aaa"), (std::vector<std::string>{"▁", "aa", "a"}));
}

TEST(BpeSegment, FirstSubwordIndices) {
  const bpe::BpeModel m({u("▁"), u("a"), u("b"), u("c")}, {{u("▁"), u("a")}});
  const auto seg = bpe::segment(m, std::vector<std::string>{"ab", "abc"});
  EXPECT_EQ(seg.first_index, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(seg.total(), 5u);
  const auto single = bpe::segment(learn_toy(3), std::vector<std::string>{"low", "low", "low"});
  EXPECT_EQ(single.first_index, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(BpeSegment, RoundTripRandomUnicode) {
  const std::vector<std::string> chars{"a", "b", "é", "Ж", "中", "🙂", "▁", "_", "ä"};
  Rng rng(8);
  std::vector<std::string> corpus;
  for (int i = 0; i < 50; ++i) {
    std::string text;
    for (int w = 0; w < 6; ++w) {
      for (std::size_t k = 0; k <= rng.uniform_index(5); ++k) text += chars[rng.uniform_index(chars.size())];
      text += ' ';
    }
    corpus.push_back(text);
  }
  const auto m = bpe::learn(corpus, 80);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::string> tokens;
    for (int w = 0; w < 4; ++w) {
      std::string tok;
      for (std::size_t k = 0; k <= rng.uniform_index(6); ++k) tok += chars[rng.uniform_index(chars.size())];
      tokens.push_back(tok);
    }
    const auto seg = bpe::segment(m, tokens);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      EXPECT_GE(seg.pieces[t].size(), 1u);
      EXPECT_EQ(bpe::join_pieces(seg.pieces[t]), tokens[t]);
    }
  }
}

TEST(BpeTruncate, IdentityZeroAndToy) {
  const auto m = learn_toy(3);
  EXPECT_EQ(bpe::truncate(m, 3), m);
  EXPECT_TRUE(bpe::truncate(m, 0).merges().empty());
  EXPECT_EQ(bpe::truncate(m, 0).alphabet(), m.alphabet());
  EXPECT_EQ(bpe::segment_word(bpe::truncate(m, 1), "low"), (std::vector<std::string>{"▁l", "o", "w"}));
  EXPECT_THROW(bpe::truncate(m, 4), RangeError);
}

TEST(BpeTruncate, MonotoneSegmentLength) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto texts = random_texts(rng, 4, 200);
    const auto m = bpe::learn(texts, 50);
    for (const auto &[word, c] : bpe::count_words(texts)) {
      std::size_t previous = SIZE_MAX;
      for (std::size_t k = 0; k <= m.merges().size(); ++k) {
        const auto n = bpe::segment_word(bpe::truncate(m, k), word).size();
        EXPECT_LE(n, previous);
        previous = n;
      }
    }
  }
}

TEST(BpeModel, InvalidMergesRejected) {
  EXPECT_THROW(bpe::BpeModel({u("a")}, {}), ConfigError);
  EXPECT_THROW(bpe::BpeModel({u("▁"), u("a")}, {{u("a"), u("b")}}), ConfigError);
  EXPECT_THROW(bpe::BpeModel({u("▁"), u("a")}, {{u("a"), u("a")}, {u("a"), u("a")}}), ConfigError);
}

TEST(BpeStats, HistogramTotals) {
  const bpe::BpeModel chars({u("▁"), u("a"), u("b")}, {});
  const auto h = bpe::symbol_length_stats(chars);
  EXPECT_EQ(h.at(1), 2u);
  EXPECT_EQ(h.at(0), 1u);
  const auto toy_stats = bpe::symbol_length_stats(learn_toy(3));
  EXPECT_EQ(toy_stats.at(3), 1u);
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = bpe::learn(random_texts(rng, 7, 200), 50);
    std::size_t total = 0;
    for (const auto &[len, c] : bpe::symbol_length_stats(m)) total += c;
    EXPECT_EQ(total, m.vocab().size());
  }
}

TEST(BpeFile, RoundTrip) {
  const auto m = bpe::learn(std::vector<std::string>{"Straße straße STRASSE Ж жук жуки 中文 中文字"}, 30);
  std::ostringstream out;
  bpe::save(m, out);
  EXPECT_EQ(out.str().rfind("#bpe v1 marker=▁ alphabet=" + std::to_string(m.alphabet().size()) + "\n", 0), 0u);
  std::istringstream in(out.str());
  EXPECT_EQ(bpe::load(in), m);
  fixtures::TempDir dir;
  bpe::save(m, dir.file("m.bpe"));
  EXPECT_EQ(bpe::load(dir.file("m.bpe")), m);
}

TEST(BpeFile, MalformedInputs) {
  auto load = [](const std::string &text) {
    std::istringstream in(text);
    return bpe::load(in);
  };
  EXPECT_THROW(load(""), ParseError);
  EXPECT_THROW(load("#bpe v2 marker=▁ alphabet=2\n#alphabet ▁ a\n"), ParseError);
  EXPECT_THROW(load("#bpe v1 marker=▁ alphabet=3\n#alphabet ▁ a\n"), ParseError);
  EXPECT_THROW(load("#bpe v1 marker=▁ alphabet=2\n#alphabet ▁ a\na\n"), ParseError);
  EXPECT_THROW(load("#bpe v1 marker=▁ alphabet=2\n#alphabet ▁ a\na b\n"), ParseError);
}

TEST(BpeDeterminism, IdenticalMergeLists) {
  Rng rng(77);
  const auto texts = random_texts(rng, 8, 200);
  EXPECT_EQ(bpe::learn(texts, 40).merges(), bpe::learn(texts, 40).merges());
}
