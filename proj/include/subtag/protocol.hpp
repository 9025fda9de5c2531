#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "subtag/bpe.hpp"
#include "subtag/corpus.hpp"
#include "subtag/error.hpp"
#include "subtag/metrics.hpp"
#include "subtag/random.hpp"
#include "subtag/shapes.hpp"
#include "subtag/tagger.hpp"

namespace subtag::protocol {

// ---------------------------------------------------------------------------
// Resource buckets

enum class ResourceBucket { low, medium, high };

inline std::string to_string(ResourceBucket b) {
  switch (b) {
    case ResourceBucket::low:
      return "low";
    case ResourceBucket::medium:
      return "medium";
    case ResourceBucket::high:
      return "high";
  }
  return "?";
}

inline ResourceBucket bucket(std::size_t instances) {
  if (instances < 10000) return ResourceBucket::low;
  if (instances <= 100000) return ResourceBucket::medium;
  return ResourceBucket::high;
}

inline std::size_t fold_count(ResourceBucket b) {
  switch (b) {
    case ResourceBucket::low:
      return 10;
    case ResourceBucket::medium:
      return 5;
    case ResourceBucket::high:
      return 3;
  }
  return 3;
}

// ---------------------------------------------------------------------------
// Vocabulary grids

class VocabGrid {
 public:
  VocabGrid() : VocabGrid(std::vector<std::size_t>{1000, 3000, 5000, 10000, 25000, 50000, 100000}) {}

  explicit VocabGrid(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
    if (sizes_.empty()) throw ConfigError("vocabulary grid is empty");
    for (auto v : sizes_)
      if (v == 0) throw ConfigError("vocabulary sizes must be positive");
    std::sort(sizes_.begin(), sizes_.end());
    sizes_.erase(std::unique(sizes_.begin(), sizes_.end()), sizes_.end());
  }

  /// Shared multilingual vocabularies.
  static VocabGrid shared_paper() { return VocabGrid({100000, 320000, 1000000}); }
  static VocabGrid shared_desk() { return VocabGrid({2000, 5000, 10000}); }

  const std::vector<std::size_t> &sizes() const noexcept { return sizes_; }
  std::size_t largest() const { return sizes_.back(); }

 private:
  std::vector<std::size_t> sizes_;
};

// ---------------------------------------------------------------------------
// Grid search

struct GridResult {
  std::map<std::size_t, std::vector<double>> fold_scores;
  std::map<std::size_t, double> mean_scores;
  std::size_t best = 0;
};

/// Returns the size with the highest score; ties go to the smaller size.
inline std::size_t best_size(const std::map<std::size_t, double> &mean_scores) {
  if (mean_scores.empty()) throw ConfigError("no scores to choose from");
  std::size_t best = mean_scores.begin()->first;
  double best_score = mean_scores.begin()->second;
  for (const auto &[v, s] : mean_scores)
    if (s > best_score) {
      best = v;
      best_score = s;
    }
  return best;
}

/// Scores one (vocabulary size, fold) cell.
using FoldScorer = std::function<double(std::size_t vocab_size, std::size_t fold)>;

/// Search skeleton: mean dev score per size over folds. A failing cell is
/// reported with its size and fold, keeping the original error category.
inline GridResult grid_search_vocab(const VocabGrid &grid, std::size_t folds, const FoldScorer &scorer) {
  if (folds < 1) throw ConfigError("fold count must be at least 1");
  GridResult result;
  for (std::size_t v : grid.sizes()) {
    auto &scores = result.fold_scores[v];
    for (std::size_t f = 0; f < folds; ++f) {
      try {
        scores.push_back(scorer(v, f));
      } catch (const Error &e) {
        throw Error(e.kind(), e.category(),
                    "vocab size " + std::to_string(v) + ", fold " + std::to_string(f) + ": " + e.what());
      }
    }
    result.mean_scores[v] = metrics::macro_average(scores);
  }
  result.best = best_size(result.mean_scores);
  return result;
}

struct GridSearchConfig {
  tagger::TaggerConfig tagger;
  tagger::TrainSchedule schedule;
  SplitSpec split;
  std::optional<std::size_t> folds;  // overrides the bucket's fold count
  std::vector<std::string> bpe_texts;  // raw text for BPE; the corpus itself when empty
};

/// BPE is learned once up to the largest grid size; smaller sizes are
/// prefixes of that merge list.
inline GridResult grid_search_vocab(const TaggedCorpus &corpus, const VocabGrid &grid,
                                    const GridSearchConfig &cfg) {
  const std::size_t n = cfg.folds.value_or(fold_count(bucket(corpus.size())));
  const auto splits = make_folds(corpus, n, cfg.split);
  const bpe::BpeModel full = cfg.bpe_texts.empty() ? bpe::learn(corpus, grid.largest())
                                                   : bpe::learn(cfg.bpe_texts, grid.largest());
  return grid_search_vocab(grid, n, [&](std::size_t v, std::size_t f) {
    const auto &s = splits[f];
    auto model = tagger::build_tagger<float>(cfg.tagger, {&s.train}, bpe::truncate_to_vocab(full, v));
    auto trained = tagger::train(model, s.train, s.dev, cfg.schedule);
    return trained.best_dev;
  });
}

// ---------------------------------------------------------------------------
// Vocabulary-size selection

enum class MedianRule { midpoint, lower };

/// Median of a non-empty list; even counts use the mean of the two middle
/// values or the lower one.
inline double median(std::vector<std::size_t> values, MedianRule rule = MedianRule::midpoint) {
  if (values.empty()) throw ConfigError("median of no values");
  std::sort(values.begin(), values.end());
  const std::size_t k = values.size();
  if (k % 2 == 1 || rule == MedianRule::lower) return static_cast<double>(values[(k - 1) / 2]);
  return (static_cast<double>(values[k / 2 - 1]) + static_cast<double>(values[k / 2])) / 2.0;
}

struct VocabRecord {
  std::string language;
  std::size_t instances = 0;  // N_l
  std::size_t best_size = 0;  // v_l
};

class VocabSizeTable {
 public:
  explicit VocabSizeTable(MedianRule rule = MedianRule::midpoint) : rule_(rule) {}

  void add(VocabRecord r) { records_.push_back(std::move(r)); }
  void add(std::size_t instances, std::size_t best_size) { add({"", instances, best_size}); }

  const std::vector<VocabRecord> &records() const noexcept { return records_; }
  bool empty() const noexcept { return records_.empty(); }
  MedianRule rule() const noexcept { return rule_; }

  /// Median dataset size per chosen vocabulary size.
  std::map<std::size_t, double> medians() const {
    std::map<std::size_t, std::vector<std::size_t>> by_size;
    for (const auto &r : records_) by_size[r.best_size].push_back(r.instances);
    std::map<std::size_t, double> out;
    for (const auto &[v, ns] : by_size) out[v] = median(ns, rule_);
    return out;
  }

 private:
  MedianRule rule_;
  std::vector<VocabRecord> records_;
};

/// The size whose median dataset size is closest to `instances`; ties go to
/// the smaller size.
inline std::size_t select_vocab_size(const VocabSizeTable &table, std::size_t instances) {
  if (table.empty()) throw ConfigError("vocabulary-size table is empty");
  const double n = static_cast<double>(instances);
  std::optional<std::size_t> best;
  double best_distance = 0.0;
  for (const auto &[v, m] : table.medians()) {
    const double d = std::abs(n - m);
    if (!best || d < best_distance) {
      best = v;
      best_distance = d;
    }
  }
  return *best;
}

// ---------------------------------------------------------------------------
// Multilingual training

/// Seeded uniform subsample of min(N, cap) sentences, kept in corpus order.
inline TaggedCorpus cap_corpus(const TaggedCorpus &corpus, std::size_t cap, uint64_t seed) {
  if (cap < 1) throw ConfigError("instance cap must be at least 1");
  if (corpus.size() <= cap) return corpus;
  std::vector<std::size_t> idx(corpus.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < cap; ++i) std::swap(idx[i], idx[i + rng.uniform_index(idx.size() - i)]);
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  std::vector<Sentence> out;
  out.reserve(cap);
  for (auto i : idx) out.push_back(corpus.sentences[i]);
  return corpus.with_sentences(std::move(out));
}

inline void check_shared_inventory(const std::vector<const TaggedCorpus *> &corpora) {
  if (corpora.empty()) throw EmptyCorpusError("no corpora");
  const auto &first = *corpora.front();
  for (const auto *c : corpora) {
    if (c->task != first.task)
      throw ConfigError("corpus '" + c->language + "' has task " + to_string(c->task) + ", expected " +
                        to_string(first.task));
    if (!(c->tagset == first.tagset))
      throw ConfigError("label inventory of '" + c->language + "' differs from '" + first.language + "'");
  }
}

struct MultilingualOptions {
  std::size_t cap = 3000;
  std::size_t dev_cap = 3000;  // per-language cap on the pooled dev set
  uint64_t seed = 1;
};

struct MultilingualResult {
  tagger::TrainResult<float> training;
  std::map<std::string, std::size_t> pooled_counts;
  std::vector<std::string> pooled_order;  // language of each pooled training instance
};

/// One model over all languages: per-language capped subsamples pooled and
/// shuffled, a shared subword model and one label inventory.
inline MultilingualResult train_multilingual(const std::vector<TaggedCorpus> &train_sets,
                                             const std::vector<TaggedCorpus> &dev_sets,
                                             const bpe::BpeModel &shared, const tagger::TaggerConfig &cfg,
                                             const tagger::TrainSchedule &schedule,
                                             const MultilingualOptions &opt = {}) {
  std::vector<const TaggedCorpus *> all;
  for (const auto &c : train_sets) all.push_back(&c);
  for (const auto &c : dev_sets) all.push_back(&c);
  check_shared_inventory(all);

  std::vector<TaggedCorpus> capped;
  for (std::size_t l = 0; l < train_sets.size(); ++l)
    capped.push_back(cap_corpus(train_sets[l], opt.cap, opt.seed + l));
  std::vector<const TaggedCorpus *> vocab_sources;
  for (const auto &c : capped) vocab_sources.push_back(&c);
  const auto model = tagger::build_tagger<float>(cfg, vocab_sources, shared);

  MultilingualResult result{{model, {}, 0, -1.0, 0, {}}, {}, {}};
  std::vector<tagger::Instance> train_pool;
  for (const auto &c : capped) {
    auto inst = model.prepare(c);
    result.pooled_counts[c.language] += inst.size();
    std::move(inst.begin(), inst.end(), std::back_inserter(train_pool));
  }
  Rng rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  rng.shuffle(train_pool);
  for (const auto &i : train_pool) result.pooled_order.push_back(i.language);

  std::vector<tagger::Instance> dev_pool;
  for (std::size_t l = 0; l < dev_sets.size(); ++l) {
    auto inst = model.prepare(cap_corpus(dev_sets[l], opt.dev_cap, opt.seed + 7919 * (l + 1)));
    std::move(inst.begin(), inst.end(), std::back_inserter(dev_pool));
  }
  result.training = tagger::train(model, train_pool, dev_pool, train_sets.front().task, schedule);
  return result;
}

// ---------------------------------------------------------------------------
// Manifests

inline uint64_t fnv1a(std::string_view data, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

inline std::string read_file(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// A parsed manifest: "[name]" or "[name argument]" section headers, then
/// "key = value" lines; '#' starts a comment line.
struct ManifestSection {
  std::string name;
  std::string argument;
  std::map<std::string, std::string> values;
  std::size_t line = 0;
};

inline std::vector<ManifestSection> parse_manifest(std::istream &in) {
  std::vector<ManifestSection> sections;
  std::string line;
  std::size_t line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ParseError("unterminated section header", line_no);
      const std::string inner = trim(line.substr(1, line.size() - 2));
      ManifestSection s;
      s.line = line_no;
      const auto sp = inner.find_first_of(" \t");
      s.name = inner.substr(0, sp);
      if (sp != std::string::npos) s.argument = trim(inner.substr(sp));
      if (s.name.empty()) throw ParseError("empty section name", line_no);
      sections.push_back(std::move(s));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value", line_no);
    if (sections.empty()) throw ParseError("key outside of a section", line_no);
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ParseError("empty key", line_no);
    if (!sections.back().values.emplace(key, trim(line.substr(eq + 1))).second)
      throw ParseError("duplicate key '" + key + "'", line_no);
  }
  return sections;
}

struct LanguageEntry {
  std::string language;
  std::string train;
  std::string format = "tsv";
  std::string sample;  // capitalization sample; the corpus tokens when empty
  std::string bpe_text;
};

/// Experiment settings. Keys match the CLI flags of the same name.
struct Manifest {
  std::string name;
  Task task = Task::ner;
  std::string profile = "desk";
  tagger::EncoderSelection encoders;
  std::string shape = "auto";  // auto | on | off
  double shape_threshold = shapes::ShapePolicy::kDefaultThreshold;
  std::vector<uint64_t> seeds{1};
  std::string output;
  VocabGrid grid;
  std::optional<std::size_t> folds;
  SplitSpec split;
  tagger::TrainSchedule schedule;
  std::vector<LanguageEntry> languages;
  std::string base_dir;  // relative paths resolve against this

  std::string resolve(const std::string &path) const {
    if (path.empty() || std::filesystem::path(path).is_absolute() || base_dir.empty()) return path;
    return (std::filesystem::path(base_dir) / path).string();
  }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string &s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename N>
N parse_number(const std::string &key, const std::string &value) {
  try {
    std::size_t used = 0;
    N out{};
    if constexpr (std::is_floating_point_v<N>)
      out = static_cast<N>(std::stod(value, &used));
    else {
      if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
      out = static_cast<N>(std::stoull(value, &used));
    }
    if (used != value.size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception &) {
    throw ConfigError("'" + key + "': invalid number '" + value + "'");
  }
}

}  // namespace detail

inline tagger::EncoderSelection parse_encoders(const std::string &list) {
  tagger::EncoderSelection sel{false, false, false, false};
  for (const auto &e : detail::split_list(list)) {
    if (e == "bpe")
      sel.bpe = true;
    else if (e == "char")
      sel.chars = true;
    else if (e == "shape")
      sel.shape = true;
    else if (e == "ngram-word")
      sel.word = true;
    else
      throw ConfigError("unknown encoder '" + e + "' (expected bpe, char, shape, ngram-word)");
  }
  if (!sel.bpe && !sel.chars && !sel.shape && !sel.word) throw ConfigError("no encoders selected");
  if (sel.word) throw ConfigError("ngram-word is not available in experiment manifests");
  return sel;
}

inline std::string method_name(const tagger::EncoderSelection &sel) {
  std::string out;
  auto add = [&](bool on, const char *name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add(sel.bpe, "bpe");
  add(sel.chars, "char");
  add(sel.shape, "shape");
  add(sel.word, "ngram-word");
  return out;
}

/// Validates every section and key; all problems are collected into one
/// config error.
inline Manifest manifest_from_sections(const std::vector<ManifestSection> &sections,
                                       const std::string &base_dir = {}) {
  Manifest m;
  m.base_dir = base_dir;
  std::vector<std::string> problems;
  const ManifestSection *exp = nullptr;
  for (const auto &s : sections) {
    if (s.name == "experiment") {
      if (exp) problems.push_back("line " + std::to_string(s.line) + ": duplicate [experiment] section");
      exp = &s;
    } else if (s.name != "language") {
      problems.push_back("line " + std::to_string(s.line) + ": unknown section [" + s.name + "]");
    }
  }
  if (!exp) problems.push_back("missing [experiment] section");
  auto guarded = [&](const std::string &key, auto &&fn) {
    try {
      fn();
    } catch (const Error &e) {
      problems.push_back(key + ": " + e.what());
    }
  };
  if (exp) {
    static const std::set<std::string> known{"name",     "task",          "profile",    "encoders",
                                             "shape",    "shape-threshold", "seeds",    "output",
                                             "grid",     "folds",         "split",      "epochs",
                                             "batch-size", "learning-rate", "clip-norm", "patience"};
    for (const auto &[k, v] : exp->values)
      if (!known.count(k)) problems.push_back("[experiment]: unknown key '" + k + "'");
    for (const char *req : {"name", "task", "encoders", "output"})
      if (!exp->values.count(req)) problems.push_back("[experiment]: missing field '" + std::string(req) + "'");
    const auto &v = exp->values;
    auto get = [&](const std::string &k) -> const std::string * {
      auto it = v.find(k);
      return it == v.end() ? nullptr : &it->second;
    };
    if (auto p = get("name")) m.name = *p;
    if (auto p = get("task")) guarded("task", [&] { m.task = parse_task(*p); });
    if (auto p = get("profile")) {
      m.profile = *p;
      guarded("profile", [&] { tagger::make_profile(m.profile, m.task, {}); });
    }
    if (auto p = get("encoders")) guarded("encoders", [&] { m.encoders = parse_encoders(*p); });
    if (auto p = get("shape")) {
      if (*p != "auto" && *p != "on" && *p != "off") problems.push_back("shape: expected auto, on or off");
      m.shape = *p;
    }
    if (auto p = get("shape-threshold"))
      guarded("shape-threshold", [&] {
        m.shape_threshold = detail::parse_number<double>("shape-threshold", *p);
        shapes::ShapePolicy check(m.shape_threshold);
      });
    if (auto p = get("seeds"))
      guarded("seeds", [&] {
        m.seeds.clear();
        for (const auto &s : detail::split_list(*p)) m.seeds.push_back(detail::parse_number<uint64_t>("seeds", s));
        if (m.seeds.empty()) throw ConfigError("no seeds given");
      });
    if (auto p = get("output")) m.output = *p;
    if (auto p = get("grid"))
      guarded("grid", [&] {
        std::vector<std::size_t> sizes;
        for (const auto &s : detail::split_list(*p)) sizes.push_back(detail::parse_number<std::size_t>("grid", s));
        m.grid = VocabGrid(sizes);
      });
    if (auto p = get("folds"))
      if (*p != "auto")
        guarded("folds", [&] {
          m.folds = detail::parse_number<std::size_t>("folds", *p);
          if (*m.folds < 1) throw ConfigError("must be at least 1");
        });
    if (auto p = get("split"))
      guarded("split", [&] {
        const auto parts = detail::split_list(*p);
        if (parts.size() != 3) throw ConfigError("expected train,dev,test fractions");
        m.split.train = detail::parse_number<double>("split", parts[0]);
        m.split.dev = detail::parse_number<double>("split", parts[1]);
        m.split.test = detail::parse_number<double>("split", parts[2]);
        m.split.validate();
      });
    if (auto p = get("epochs")) guarded("epochs", [&] { m.schedule.epochs = detail::parse_number<std::size_t>("epochs", *p); });
    if (auto p = get("batch-size"))
      guarded("batch-size", [&] {
        m.schedule.batch_size = detail::parse_number<std::size_t>("batch-size", *p);
        if (m.schedule.batch_size < 1) throw ConfigError("must be at least 1");
      });
    if (auto p = get("learning-rate"))
      guarded("learning-rate", [&] { m.schedule.learning_rate = detail::parse_number<double>("learning-rate", *p); });
    if (auto p = get("clip-norm"))
      guarded("clip-norm", [&] { m.schedule.clip_norm = detail::parse_number<double>("clip-norm", *p); });
    if (auto p = get("patience"))
      guarded("patience", [&] { m.schedule.patience = detail::parse_number<std::size_t>("patience", *p); });
  }
  std::set<std::string> seen;
  for (const auto &s : sections) {
    if (s.name != "language") continue;
    const std::string where = "[language " + s.argument + "] (line " + std::to_string(s.line) + ")";
    if (s.argument.empty()) problems.push_back(where + ": missing language code");
    if (!seen.insert(s.argument).second) problems.push_back(where + ": duplicate language");
    LanguageEntry e;
    e.language = s.argument;
    for (const auto &[k, v] : s.values) {
      if (k == "train")
        e.train = v;
      else if (k == "format")
        e.format = v;
      else if (k == "sample")
        e.sample = v;
      else if (k == "bpe-text")
        e.bpe_text = v;
      else
        problems.push_back(where + ": unknown key '" + k + "'");
    }
    if (e.train.empty()) problems.push_back(where + ": missing field 'train'");
    if (e.format != "tsv" && e.format != "conllu") problems.push_back(where + ": format must be tsv or conllu");
    m.languages.push_back(std::move(e));
  }
  if (m.languages.empty()) problems.push_back("no [language] sections");
  if (!problems.empty()) {
    std::string msg = "invalid manifest: ";
    for (std::size_t i = 0; i < problems.size(); ++i) msg += (i ? "; " : "") + problems[i];
    throw ConfigError(msg);
  }
  return m;
}

inline Manifest load_manifest(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  return manifest_from_sections(parse_manifest(in), std::filesystem::path(path).parent_path().string());
}

// ---------------------------------------------------------------------------
// Experiment runner

struct RunOptions {
  std::size_t jobs = 1;
  std::ostream *log = nullptr;
};

struct CellResult {
  std::string language;
  std::size_t vocab_size = 0;
  std::size_t fold = 0;
  uint64_t seed = 0;
  double dev = 0.0;
  double test = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  bool skipped = false;
  std::size_t steps = 0;
};

struct ExperimentReport {
  metrics::ScoreReport scores;
  std::vector<VocabRecord> best_vocab;
  std::vector<CellResult> cells;
  std::size_t cells_trained = 0;
  std::size_t cells_skipped = 0;
  std::size_t training_steps = 0;
};

namespace detail {

struct PreparedLanguage {
  LanguageEntry entry;
  TaggedCorpus corpus;
  std::string content_hash;
  std::vector<Split> folds;
  std::optional<bpe::BpeModel> full_bpe;
  bool shape = false;
  tagger::EncoderSelection encoders;
};

struct CellTask {
  std::size_t lang = 0;
  std::size_t vocab_size = 0;
  std::size_t fold = 0;
  uint64_t seed = 0;
  std::string key;
};

inline std::string cell_description(const Manifest &m, const PreparedLanguage &p, const CellTask &c) {
  std::ostringstream d;
  d << std::setprecision(17) << "language=" << p.entry.language << "\ncorpus=" << p.content_hash
    << "\ntask=" << to_string(m.task) << "\nprofile=" << m.profile << "\nencoders=" << method_name(p.encoders)
    << "\nvocab=" << c.vocab_size << "\nfold=" << c.fold << "\nfolds=" << p.folds.size() << "\nseed=" << c.seed
    << "\nsplit=" << m.split.train << ',' << m.split.dev << ',' << m.split.test << "\nepochs=" << m.schedule.epochs
    << "\nbatch-size=" << m.schedule.batch_size << "\nlearning-rate=" << m.schedule.learning_rate
    << "\nclip-norm=" << m.schedule.clip_norm << "\npatience=" << m.schedule.patience
    << "\ngrid-max=" << m.grid.largest() << '\n';
  return d.str();
}

inline std::optional<CellResult> read_marker(const std::string &path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  CellResult r;
  std::string key;
  int fields = 0;
  while (in >> key) {
    if (key == "dev") in >> r.dev, ++fields;
    else if (key == "test") in >> r.test, ++fields;
    else if (key == "precision") in >> r.precision, ++fields;
    else if (key == "recall") in >> r.recall, ++fields;
  }
  if (fields != 4) return std::nullopt;
  return r;
}

}  // namespace detail

/// Runs every (language, vocabulary size, fold, seed) cell, selects v_l per
/// language by mean dev score and reports the mean test score at v_l.
/// Completed cells leave a marker named after a hash of their settings and
/// input data; re-runs read the marker instead of training.
inline ExperimentReport run_experiment(const Manifest &m, const RunOptions &opt = {}) {
  namespace fs = std::filesystem;
  if (m.output.empty()) throw ConfigError("manifest has no output directory");
  const fs::path out_dir = m.resolve(m.output);
  fs::create_directories(out_dir / "cells");
  fs::create_directories(out_dir / "models");
  auto log = [&](const std::string &line) {
    if (opt.log) *opt.log << line << '\n';
  };

  std::vector<detail::PreparedLanguage> langs;
  for (const auto &e : m.languages) {
    detail::PreparedLanguage p;
    p.entry = e;
    const std::string path = m.resolve(e.train);
    const std::string content = read_file(path);
    std::istringstream in(content);
    p.corpus = e.format == "conllu" ? parse_conllu_pos(in, e.language) : parse_conll_tsv(in, m.task, e.language);
    if (p.corpus.task != m.task) throw ConfigError("corpus '" + e.language + "' does not match the task");
    p.content_hash = hex64(fnv1a(content));
    if (!e.bpe_text.empty()) p.content_hash += ":" + hex64(fnv1a(read_file(m.resolve(e.bpe_text))));
    p.folds = make_folds(p.corpus, m.folds.value_or(fold_count(bucket(p.corpus.size()))), m.split);
    p.encoders = m.encoders;
    if (m.encoders.shape) {
      if (m.shape == "auto") {
        std::string sample;
        if (!e.sample.empty()) {
          sample = read_file(m.resolve(e.sample));
        } else {
          for (const auto &t : sentence_texts(p.corpus)) sample += t + "\n";
        }
        shapes::ShapePolicy policy(m.shape_threshold);
        p.shape = policy.observe(e.language, sample);
      } else {
        p.shape = m.shape == "on";
      }
      p.encoders.shape = p.shape;
      if (!p.encoders.bpe && !p.encoders.chars && !p.encoders.shape)
        throw ConfigError("language '" + e.language + "' has no encoders left after the shape decision");
    }
    p.content_hash += ":" + method_name(p.encoders);
    langs.push_back(std::move(p));
  }

  std::vector<detail::CellTask> tasks;
  for (std::size_t l = 0; l < langs.size(); ++l)
    for (std::size_t v : m.grid.sizes())
      for (std::size_t f = 0; f < langs[l].folds.size(); ++f)
        for (uint64_t s : m.seeds) {
          detail::CellTask t{l, v, f, s, {}};
          t.key = hex64(fnv1a(detail::cell_description(m, langs[l], t)));
          tasks.push_back(std::move(t));
        }

  // BPE is learned lazily, only for languages that have pending cells.
  std::vector<bool> needs_bpe(langs.size(), false);
  for (const auto &t : tasks)
    if (m.encoders.bpe && !fs::exists(out_dir / "cells" / (t.key + ".done"))) needs_bpe[t.lang] = true;
  for (std::size_t l = 0; l < langs.size(); ++l) {
    if (!needs_bpe[l]) continue;
    auto &p = langs[l];
    p.full_bpe = p.entry.bpe_text.empty() ? bpe::learn(p.corpus, m.grid.largest())
                                          : bpe::learn(read_paragraphs(m.resolve(p.entry.bpe_text)), m.grid.largest());
  }

  std::vector<CellResult> results(tasks.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  std::vector<std::string> errors(tasks.size());
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const auto &t = tasks[i];
      const auto &p = langs[t.lang];
      CellResult r;
      const fs::path marker = out_dir / "cells" / (t.key + ".done");
      try {
        if (auto done = detail::read_marker(marker.string())) {
          r = *done;
          r.skipped = true;
        } else {
          const auto &s = p.folds[t.fold];
          auto cfg = tagger::make_profile(m.profile, m.task, p.encoders, t.seed);
          std::optional<bpe::BpeModel> model_bpe;
          if (p.encoders.bpe) model_bpe = bpe::truncate_to_vocab(*p.full_bpe, t.vocab_size);
          auto model = tagger::build_tagger<float>(cfg, {&s.train}, model_bpe);
          auto sched = m.schedule;
          sched.seed = t.seed;
          sched.record_batches = false;
          auto trained = tagger::train(model, s.train, s.dev, sched);
          const auto test = trained.model.prepare(s.test);
          const auto gold = tagger::gold_labels(trained.model, test);
          const auto pred = tagger::predict(trained.model, test);
          r.dev = trained.best_dev;
          if (m.task == Task::ner) {
            const auto prf = metrics::entity_f1(gold, pred);
            r.test = prf.f1;
            r.precision = prf.precision;
            r.recall = prf.recall;
          } else {
            r.test = metrics::token_accuracy(gold, pred);
            r.precision = r.recall = r.test;
          }
          r.steps = trained.steps;
          tagger::save(trained.model, (out_dir / "models" / (t.key + ".model")).string());
          const fs::path tmp = marker.string() + ".tmp";
          {
            std::ofstream mk(tmp);
            mk << std::setprecision(17) << "dev " << r.dev << "\ntest " << r.test << "\nprecision " << r.precision
               << "\nrecall " << r.recall << '\n';
            if (!mk) throw IoError("cannot write marker '" + tmp.string() + "'");
          }
          fs::rename(tmp, marker);
        }
      } catch (const std::exception &e) {
        errors[i] = std::string(e.what());
        if (const auto *err = dynamic_cast<const Error *>(&e)) errors[i] = err->category() + ": " + errors[i];
        continue;
      }
      r.language = p.entry.language;
      r.vocab_size = t.vocab_size;
      r.fold = t.fold;
      r.seed = t.seed;
      results[i] = r;
      std::lock_guard lock(log_mutex);
      std::ostringstream line;
      line << std::setprecision(4) << (r.skipped ? "skip " : "done ") << r.language << " v=" << r.vocab_size
           << " fold=" << r.fold << " seed=" << r.seed << " dev=" << r.dev << " test=" << r.test;
      log(line.str());
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opt.jobs, tasks.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto &th : pool) th.join();
  }
  for (std::size_t i = 0; i < tasks.size(); ++i)
    if (!errors[i].empty())
      throw TrainingError("cell " + langs[tasks[i].lang].entry.language + " vocab size " +
                          std::to_string(tasks[i].vocab_size) + ", fold " + std::to_string(tasks[i].fold) +
                          ", seed " + std::to_string(tasks[i].seed) + ": " + errors[i]);

  ExperimentReport report;
  report.cells = results;
  for (const auto &r : results) {
    (r.skipped ? report.cells_skipped : report.cells_trained) += 1;
    report.training_steps += r.steps;
  }
  for (std::size_t l = 0; l < langs.size(); ++l) {
    const auto &p = langs[l];
    std::map<std::size_t, std::vector<double>> dev, test, prec, rec;
    for (const auto &r : results)
      if (r.language == p.entry.language) {
        dev[r.vocab_size].push_back(r.dev);
        test[r.vocab_size].push_back(r.test);
        prec[r.vocab_size].push_back(r.precision);
        rec[r.vocab_size].push_back(r.recall);
      }
    std::map<std::size_t, double> mean_dev;
    for (const auto &[v, s] : dev) mean_dev[v] = metrics::macro_average(s);
    const std::size_t best = best_size(mean_dev);
    report.best_vocab.push_back({p.entry.language, p.corpus.size(), best});
    report.scores.rows.push_back({p.entry.language, method_name(p.encoders), to_string(bucket(p.corpus.size())),
                                  p.corpus.size(), metrics::macro_average(test[best]),
                                  metrics::macro_average(prec[best]), metrics::macro_average(rec[best])});
  }

  {
    std::ofstream out(out_dir / "scores.csv");
    out << "language,method,bucket,instances,score,precision,recall\n" << std::setprecision(17);
    for (const auto &r : report.scores.rows)
      out << r.language << ',' << r.method << ',' << r.bucket << ',' << r.instances << ',' << r.score << ','
          << r.precision << ',' << r.recall << '\n';
  }
  {
    std::ofstream out(out_dir / "best_vocab.csv");
    out << "language,N_l,v_l\n";
    for (const auto &r : report.best_vocab) out << r.language << ',' << r.instances << ',' << r.best_size << '\n';
  }
  {
    std::ofstream out(out_dir / "cells.csv");
    out << "language,vocab_size,fold,seed,dev,test\n" << std::setprecision(17);
    for (const auto &r : results)
      out << r.language << ',' << r.vocab_size << ',' << r.fold << ',' << r.seed << ',' << r.dev << ',' << r.test
          << '\n';
  }
  {
    std::ofstream out(out_dir / "sorted_scores.csv");
    metrics::export_sorted_scores(report.scores, out);
  }
  return report;
}

}  // namespace subtag::protocol
