#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "subtag/corpus.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace subtag;

namespace {

TaggedCorpus parse(const std::string &text, Task task = Task::ner) {
  std::istringstream in(text);
  return parse_conll_tsv(in, task, "xx");
}

TaggedCorpus numbered_corpus(std::size_t n) {
  std::vector<LabeledSentence> s;
  for (std::size_t i = 0; i < n; ++i) s.push_back({{"w" + std::to_string(i), "O"}});
  return make_corpus("xx", Task::ner, s);
}

std::multiset<std::string> first_tokens(const TaggedCorpus &c) {
  std::multiset<std::string> out;
  for (const auto &s : c.sentences) out.insert(s.tokens[0].text);
  return out;
}

}  // namespace

TEST(ConllTsv, ReadsOneSentence) {
  const auto c = parse("Magnus\tB-PER\nCarlsen\tI-PER\nplayed\tO\n\n");
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.sentences[0].size(), 3u);
  EXPECT_EQ(c.tagset.names(), (std::vector<std::string>{"B-PER", "I-PER", "O"}));
  EXPECT_EQ(c.label_names(c.sentences[0]), (std::vector<std::string>{"B-PER", "I-PER", "O"}));
}

TEST(ConllTsv, BlankLinesSeparateSentences) {
  const auto c = parse("a\tO\n\nb\tO\nc\tO");
  EXPECT_EQ(c.size(), 2u);
  EXPECT_EQ(c.token_count(), 3u);
}

TEST(ConllTsv, MissingTabIsParseErrorWithLine) {
  try {
    parse("a\tO\ntoken_without_tab\n");
    FAIL();
  } catch (const ParseError &e) {
    EXPECT_EQ(e.line(), 2u);
  }
}

TEST(ConllTsv, EmptyTokenAndEmptyFile) {
  EXPECT_THROW(parse("\tO\n"), ParseError);
  EXPECT_THROW(parse(""), EmptyCorpusError);
  EXPECT_THROW(parse("\n\n"), EmptyCorpusError);
}

TEST(ConllTsv, CrLfAndMissingFinalNewline) {
  const auto c = parse("a\tO\r\nb\tB-LOC");
  EXPECT_EQ(c.token_count(), 2u);
  EXPECT_EQ(c.sentences[0].tokens[1].text, "b");
}

TEST(ConllTsv, Iob1IsConvertedToIob2) {
  const auto c = parse("a\tI-PER\nb\tI-PER\nc\tB-PER\nd\tO\ne\tI-LOC\n");
  EXPECT_EQ(c.label_names(c.sentences[0]),
            (std::vector<std::string>{"B-PER", "I-PER", "B-PER", "O", "B-LOC"}));
}

TEST(ConllTsv, RejectsMalformedNerLabel) { EXPECT_THROW(parse("a\tPER\n"), ParseError); }

TEST(ConllTsv, PosLabelsAreFree) {
  const auto c = parse("a\tNOUN\n", Task::pos);
  EXPECT_EQ(c.tagset.names(), std::vector<std::string>{"NOUN"});
}

TEST(ConllTsv, RoundTripRandomUnicodeCorpora) {
  const std::vector<std::string> letters{"a", "Z", "é", "ß", "Ж", "ж", "中", "ا", "🙂", "Ω"};
  const std::vector<std::string> labels{"O", "B-PER", "I-PER", "B-LOC"};
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<LabeledSentence> sentences(1 + rng.uniform_index(5));
    for (auto &s : sentences) {
      const std::size_t n = 1 + rng.uniform_index(6);
      for (std::size_t i = 0; i < n; ++i) {
        std::string tok;
        for (std::size_t k = 0; k <= rng.uniform_index(4); ++k) tok += letters[rng.uniform_index(letters.size())];
        s.emplace_back(tok, labels[rng.uniform_index(labels.size())]);
      }
    }
    const auto original = make_corpus("xx", Task::ner, sentences);
    std::ostringstream out;
    write_conll_tsv(original, out);
    const auto back = parse(out.str());
    ASSERT_EQ(back.size(), original.size());
    EXPECT_EQ(back.tagset, original.tagset);
    for (std::size_t i = 0; i < back.size(); ++i) {
      EXPECT_EQ(back.label_names(back.sentences[i]), original.label_names(original.sentences[i]));
      for (std::size_t t = 0; t < back.sentences[i].size(); ++t)
        EXPECT_EQ(back.sentences[i].tokens[t].text, original.sentences[i].tokens[t].text);
    }
  }
}

TEST(ConllTsv, ReadFromFileAndMissingFile) {
  fixtures::TempDir dir;
  const auto path = dir.write("a.tsv", "x\tO\n");
  EXPECT_EQ(read_conll_tsv(path).size(), 1u);
  EXPECT_THROW(read_conll_tsv(dir.file("missing.tsv")), IoError);
}

TEST(Conllu, ReadsFormAndUpos) {
  std::istringstream in(
      "# sent_id = 1\n"
      "1\tI\tI\tPRON\t_\t_\t2\tnsubj\t_\t_\n"
      "2\tplayed\tplay\tVERB\t_\t_\t0\troot\t_\t_\n"
      "3-4\tdu\t_\t_\t_\t_\t_\t_\t_\t_\n"
      "3\tde\tde\tADP\t_\t_\t2\tcase\t_\t_\n"
      "4\tle\tle\tDET\t_\t_\t2\tdet\t_\t_\n"
      "4.1\tx\tx\tX\t_\t_\t_\t_\t_\t_\n"
      "\n");
  const auto c = parse_conllu_pos(in, "xx");
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c.task, Task::pos);
  ASSERT_EQ(c.sentences[0].size(), 4u);
  EXPECT_EQ(c.sentences[0].tokens[1].text, "played");
  EXPECT_EQ(c.label_names(c.sentences[0])[1], "VERB");
  EXPECT_EQ(c.sentences[0].tokens[2].text, "de");
}

TEST(Conllu, ShortLineIsParseError) {
  std::istringstream in("1\tplayed\tplay\tVERB\n");
  EXPECT_THROW(parse_conllu_pos(in), ParseError);
}

TEST(SampleParagraphs, CapAboveSizeReturnsAll) {
  std::vector<std::string> p;
  for (int i = 0; i < 10; ++i) p.push_back("p" + std::to_string(i));
  const auto s = sample_paragraphs(p, 500000, 1);
  EXPECT_EQ(std::multiset<std::string>(s.begin(), s.end()), std::multiset<std::string>(p.begin(), p.end()));
}

TEST(SampleParagraphs, DeterministicAndMatchesOracle) {
  std::vector<std::string> p;
  for (int i = 0; i < 1000; ++i) p.push_back("p" + std::to_string(i));
  const auto a = sample_paragraphs(p, 100, 42);
  EXPECT_EQ(a, sample_paragraphs(p, 100, 42));
  EXPECT_NE(a, sample_paragraphs(p, 100, 43));
  const auto positions = oracle::sample_positions(p.size(), 100, 42);
  ASSERT_EQ(a.size(), positions.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], p[positions[i]]);
  EXPECT_EQ(std::set<std::string>(a.begin(), a.end()).size(), 100u);
}

TEST(SampleParagraphs, Errors) {
  EXPECT_THROW(sample_paragraphs({}, 10, 1), EmptyCorpusError);
  EXPECT_THROW(sample_paragraphs({"a"}, 0, 1), ConfigError);
}

TEST(Split, FloorSizes) {
  const auto s = split(numbered_corpus(10), {});
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.dev.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
}

TEST(Split, DeterministicPartition) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const auto corpus = numbered_corpus(3 + rng.uniform_index(60));
    SplitSpec spec;
    spec.seed = rng.next();
    const auto a = split(corpus, spec);
    const auto b = split(corpus, spec);
    EXPECT_EQ(first_tokens(a.dev), first_tokens(b.dev));
    auto all = first_tokens(a.train);
    for (const auto &t : first_tokens(a.dev)) all.insert(t);
    for (const auto &t : first_tokens(a.test)) all.insert(t);
    EXPECT_EQ(all, first_tokens(corpus));
    EXPECT_EQ(std::set<std::string>(all.begin(), all.end()).size(), corpus.size());
  }
}

TEST(Split, Errors) {
  EXPECT_THROW(split(numbered_corpus(2), {}), DataError);
  EXPECT_THROW(split(numbered_corpus(10), {0.5, 0.5, 0.5, 0}), ConfigError);
  EXPECT_THROW(split(numbered_corpus(10), {1.0, 0.0, 0.0, 0}), ConfigError);
}

TEST(Folds, OneFoldEqualsSplit) {
  const auto corpus = numbered_corpus(30);
  SplitSpec spec;
  spec.seed = 5;
  const auto folds = make_folds(corpus, 1, spec);
  ASSERT_EQ(folds.size(), 1u);
  EXPECT_EQ(first_tokens(folds[0].dev), first_tokens(split(corpus, spec).dev));
  EXPECT_THROW(make_folds(corpus, 0, spec), ConfigError);
}

TEST(Folds, TenFoldsUsuallyDistinctDevSets) {
  std::size_t distinct = 0;
  for (uint64_t c = 0; c < 100; ++c) {
    const auto folds = make_folds(numbered_corpus(100), 10, {0.8, 0.1, 0.1, c * 31});
    std::set<std::multiset<std::string>> devs;
    for (const auto &f : folds) devs.insert(first_tokens(f.dev));
    distinct += devs.size() == 10;
  }
  EXPECT_GE(distinct, 99u);
}
