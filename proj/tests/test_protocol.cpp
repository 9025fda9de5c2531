#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include "subtag/protocol.hpp"
#include "support/oracles.hpp"
#include "support/synthetic.hpp"
#include "support/temp_dir.hpp"

using namespace subtag;
using namespace subtag::protocol;

namespace {

Manifest manifest_text(const std::string &text, const std::string &base = {}) {
  std::istringstream in(text);
  return manifest_from_sections(parse_manifest(in), base);
}

}  // namespace

TEST(Buckets, Boundaries) {
  EXPECT_EQ(bucket(1), ResourceBucket::low);
  EXPECT_EQ(bucket(9999), ResourceBucket::low);
  EXPECT_EQ(bucket(10000), ResourceBucket::medium);
  EXPECT_EQ(bucket(100000), ResourceBucket::medium);
  EXPECT_EQ(bucket(100001), ResourceBucket::high);
  EXPECT_EQ(fold_count(ResourceBucket::low), 10u);
  EXPECT_EQ(fold_count(ResourceBucket::medium), 5u);
  EXPECT_EQ(fold_count(ResourceBucket::high), 3u);
  EXPECT_EQ(to_string(ResourceBucket::medium), "medium");
}

TEST(VocabGrid, DefaultsAndValidation) {
  EXPECT_EQ(VocabGrid().sizes(), (std::vector<std::size_t>{1000, 3000, 5000, 10000, 25000, 50000, 100000}));
  EXPECT_EQ(VocabGrid::shared_paper().sizes(), (std::vector<std::size_t>{100000, 320000, 1000000}));
  EXPECT_EQ(VocabGrid::shared_desk().sizes(), (std::vector<std::size_t>{2000, 5000, 10000}));
  EXPECT_EQ(VocabGrid({3000, 1000, 3000}).sizes(), (std::vector<std::size_t>{1000, 3000}));
  EXPECT_THROW(VocabGrid(std::vector<std::size_t>{}), ConfigError);
  EXPECT_THROW(VocabGrid({0}), ConfigError);
}

TEST(GridSearch, StubbedScores) {
  auto stub = [](std::map<std::size_t, double> s) {
    return [s](std::size_t v, std::size_t) { return s.at(v); };
  };
  EXPECT_EQ(grid_search_vocab(VocabGrid({1000, 3000}), 2, stub({{1000, 0.8}, {3000, 0.9}})).best, 3000u);
  EXPECT_EQ(grid_search_vocab(VocabGrid({1000, 3000}), 2, stub({{1000, 0.9}, {3000, 0.9}})).best, 1000u);
  EXPECT_EQ(grid_search_vocab(VocabGrid({5000}), 1, stub({{5000, 0.1}})).best, 5000u);
}

TEST(GridSearch, AveragesFoldsAndNamesFailingCell) {
  const auto r = grid_search_vocab(VocabGrid({1, 2}), 3, [](std::size_t v, std::size_t f) {
    return v == 1 ? 0.5 : (f == 0 ? 0.9 : 0.3);
  });
  EXPECT_NEAR(r.mean_scores.at(2), 0.5, 1e-15);
  EXPECT_EQ(r.fold_scores.at(2).size(), 3u);
  EXPECT_EQ(r.best, 1u);
  try {
    grid_search_vocab(VocabGrid({1, 2}), 3, [](std::size_t v, std::size_t f) -> double {
      if (v == 2 && f == 1) throw DataError("boom");
      return 0.0;
    });
    FAIL();
  } catch (const Error &e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
    EXPECT_NE(std::string(e.what()).find("vocab size 2, fold 1"), std::string::npos);
  }
}

TEST(SelectVocabSize, WorkedExample) {
  VocabSizeTable t;
  t.add(500, 1000);
  t.add(800, 1000);
  t.add(50000, 25000);
  EXPECT_DOUBLE_EQ(t.medians().at(1000), 650.0);
  EXPECT_DOUBLE_EQ(t.medians().at(25000), 50000.0);
  EXPECT_EQ(select_vocab_size(t, 1000), 1000u);
  VocabSizeTable lower(MedianRule::lower);
  for (const auto &r : t.records()) lower.add(r);
  EXPECT_DOUBLE_EQ(lower.medians().at(1000), 500.0);
  EXPECT_EQ(select_vocab_size(lower, 1000), 1000u);
}

TEST(SelectVocabSize, TrivialCasesAndTies) {
  VocabSizeTable one;
  one.add(123, 5000);
  EXPECT_EQ(select_vocab_size(one, 1), 5000u);
  EXPECT_EQ(select_vocab_size(one, 1000000), 5000u);
  VocabSizeTable tie;
  tie.add(100, 3000);
  tie.add(300, 1000);
  EXPECT_EQ(select_vocab_size(tie, 200), 1000u);
  EXPECT_THROW(select_vocab_size(VocabSizeTable{}, 10), ConfigError);
}

TEST(SelectVocabSize, MatchesOracleOnRandomTables) {
  const std::vector<std::size_t> grid{1000, 3000, 5000, 10000, 25000, 50000, 100000};
  Rng rng(1000);
  for (int trial = 0; trial < 1000; ++trial) {
    const bool lower = rng.bernoulli(0.5);
    VocabSizeTable t(lower ? MedianRule::lower : MedianRule::midpoint);
    std::vector<std::pair<std::size_t, std::size_t>> records;
    for (std::size_t i = 0; i <= rng.uniform_index(12); ++i) {
      const std::size_t n = 1 + rng.uniform_index(rng.bernoulli(0.5) ? 100 : 200000);
      const std::size_t v = grid[rng.uniform_index(grid.size())];
      t.add(n, v);
      records.emplace_back(n, v);
    }
    const std::size_t query = 1 + rng.uniform_index(200000);
    const auto got = select_vocab_size(t, query);
    ASSERT_EQ(got, oracle::brute_select(records, query, lower)) << trial;
    EXPECT_NE(std::find(grid.begin(), grid.end(), got), grid.end());
  }
}

TEST(Multilingual, CapAndPooling) {
  const fixtures::ToyGrammar g(17, 50);
  const auto big = fixtures::synthetic_corpus(g, 0, 5000, 1);
  const auto small = fixtures::synthetic_corpus(g, 1, 100, 1);
  const auto capped = cap_corpus(big, 3000, 4);
  EXPECT_EQ(capped.size(), 3000u);
  EXPECT_EQ(cap_corpus(small, 3000, 4).size(), 100u);
  EXPECT_EQ(sentence_texts(capped), sentence_texts(cap_corpus(big, 3000, 4)));
  EXPECT_THROW(cap_corpus(big, 0, 1), ConfigError);

  std::vector<std::string> texts = sentence_texts(small);
  const auto model = bpe::learn(texts, 80);
  auto cfg = tagger::make_profile("desk", Task::ner, {}, 1);
  cfg.encoders[0].hidden = 2;
  cfg.encoders[0].embedding_dim = 2;
  cfg.meta_hidden = 2;
  tagger::TrainSchedule s;
  s.epochs = 0;
  MultilingualOptions opt;
  opt.dev_cap = 10;
  const auto r = train_multilingual({big, small}, {small, small}, model, cfg, s, opt);
  EXPECT_EQ(r.pooled_order.size(), 3100u);
  EXPECT_EQ(r.pooled_counts.at("x0"), 3000u);
  EXPECT_EQ(r.pooled_counts.at("x1"), 100u);
  const auto again = train_multilingual({big, small}, {small, small}, model, cfg, s, opt);
  EXPECT_EQ(r.pooled_order, again.pooled_order);
  opt.seed = 2;
  EXPECT_NE(r.pooled_order, train_multilingual({big, small}, {small, small}, model, cfg, s, opt).pooled_order);
}

TEST(Multilingual, BatchesRespectCap) {
  const fixtures::ToyGrammar g(17, 50);
  const auto a = fixtures::synthetic_corpus(g, 0, 60, 1);
  const auto b = fixtures::synthetic_corpus(g, 1, 20, 1);
  std::vector<std::string> texts = sentence_texts(a);
  for (const auto &t : sentence_texts(b)) texts.push_back(t);
  auto cfg = tagger::make_profile("desk", Task::ner, {}, 1);
  cfg.encoders[0].hidden = 3;
  cfg.meta_hidden = 3;
  tagger::TrainSchedule s;
  s.epochs = 1;
  s.batch_size = 8;
  MultilingualOptions opt;
  opt.cap = 25;
  const auto r = train_multilingual({a, b}, {a, b}, bpe::learn(texts, 120), cfg, s, opt);
  std::map<std::string, std::size_t> totals;
  for (const auto &batch : r.training.batch_languages)
    for (const auto &[lang, n] : batch) totals[lang] += n;
  EXPECT_EQ(totals.at("x0"), 25u);
  EXPECT_EQ(totals.at("x1"), 20u);
}

TEST(Multilingual, InconsistentInventoryIsConfigError) {
  const auto a = make_corpus("a", Task::ner, {{{"x", "B-PER"}}});
  const auto b = make_corpus("b", Task::ner, {{{"x", "B-LOC"}}});
  const auto model = bpe::learn(std::vector<std::string>{"x x"}, 3);
  auto cfg = tagger::make_profile("desk", Task::ner, {}, 1);
  EXPECT_THROW(train_multilingual({a, b}, {a, b}, model, cfg, {}), ConfigError);
}

TEST(Manifest, ParsesSectionsAndKeys) {
  const auto m = manifest_text(
      "# comment\n"
      "[experiment]\n"
      "name = demo\n"
      "task = ner\n"
      "encoders = bpe, char, shape\n"
      "output = out\n"
      "grid = 300, 100\n"
      "folds = 2\n"
      "seeds = 1, 2\n"
      "epochs = 4\n"
      "shape = off\n"
      "[language de]\n"
      "train = de.tsv\n",
      "/data");
  EXPECT_EQ(m.name, "demo");
  EXPECT_TRUE(m.encoders.chars);
  EXPECT_TRUE(m.encoders.shape);
  EXPECT_EQ(m.grid.sizes(), (std::vector<std::size_t>{100, 300}));
  EXPECT_EQ(*m.folds, 2u);
  EXPECT_EQ(m.seeds, (std::vector<uint64_t>{1, 2}));
  EXPECT_EQ(m.schedule.epochs, 4u);
  ASSERT_EQ(m.languages.size(), 1u);
  EXPECT_EQ(m.resolve(m.languages[0].train), "/data/de.tsv");
  EXPECT_EQ(method_name(m.encoders), "bpe+char+shape");
}

TEST(Manifest, EmptyManifestListsMissingFields) {
  try {
    manifest_text("[experiment]\n");
    FAIL();
  } catch (const ConfigError &e) {
    const std::string msg = e.what();
    for (const char *field : {"name", "task", "encoders", "output", "no [language] sections"})
      EXPECT_NE(msg.find(field), std::string::npos) << field;
  }
  EXPECT_THROW(manifest_text(""), ConfigError);
  EXPECT_THROW(manifest_text("key = value\n"), ParseError);
  EXPECT_THROW(manifest_text("[experiment\n"), ParseError);
}

TEST(Manifest, CollectsInvalidValues) {
  try {
    manifest_text(
        "[experiment]\nname = x\ntask = ner\nencoders = bpe, ngram-word\noutput = o\nepochs = many\n"
        "typo = 1\n[language aa]\nformat = xml\n");
    FAIL();
  } catch (const ConfigError &e) {
    const std::string msg = e.what();
    for (const char *part : {"encoders", "epochs", "typo", "train", "format"})
      EXPECT_NE(msg.find(part), std::string::npos) << part;
  }
}

TEST(Experiment, SingleLanguageRunAndIdempotentRerun) {
  fixtures::TempDir dir;
  const fixtures::ToyGrammar g(17, 30);
  write_conll_tsv(fixtures::synthetic_corpus(g, 0, 60, 3), dir.file("xx.tsv"));
  const std::string manifest =
      "[experiment]\nname = tiny\ntask = ner\nencoders = bpe\noutput = out\ngrid = 40, 60\nfolds = 1\n"
      "epochs = 1\nbatch-size = 16\n[language xx]\ntrain = xx.tsv\n";
  {
    std::ofstream(dir.file("m.ini")) << manifest;
  }
  const auto m = load_manifest(dir.file("m.ini"));
  const auto first = run_experiment(m);
  ASSERT_EQ(first.scores.rows.size(), 1u);
  EXPECT_EQ(first.scores.rows[0].language, "xx");
  EXPECT_EQ(first.scores.rows[0].method, "bpe");
  EXPECT_EQ(first.scores.rows[0].bucket, "low");
  EXPECT_EQ(first.cells_trained, 2u);
  EXPECT_GT(first.training_steps, 0u);
  ASSERT_EQ(first.best_vocab.size(), 1u);
  for (const char *f : {"scores.csv", "best_vocab.csv", "cells.csv", "sorted_scores.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir.file(std::string("out/") + f))) << f;

  const auto second = run_experiment(m);
  EXPECT_EQ(second.training_steps, 0u);
  EXPECT_EQ(second.cells_trained, 0u);
  EXPECT_EQ(second.cells_skipped, 2u);
  EXPECT_EQ(second.scores.rows[0].score, first.scores.rows[0].score);

  {
    std::ofstream(dir.file("m.ini")) << manifest << "";
    std::ofstream(dir.file("m2.ini")) << std::string(manifest).replace(manifest.find("epochs = 1"), 10, "epochs = 2");
  }
  const auto edited = run_experiment(load_manifest(dir.file("m2.ini")));
  EXPECT_EQ(edited.cells_trained, 2u);
}

TEST(Experiment, MissingCorpusIsIoError) {
  fixtures::TempDir dir;
  const auto m = manifest_text(
      "[experiment]\nname = x\ntask = ner\nencoders = bpe\noutput = " + dir.file("out") +
      "\n[language xx]\ntrain = " + dir.file("none.tsv") + "\n");
  EXPECT_THROW(run_experiment(m), IoError);
}
