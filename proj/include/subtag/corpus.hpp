#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "subtag/error.hpp"
#include "subtag/random.hpp"
#include "subtag/unicode.hpp"

namespace subtag {

enum class Task { ner, pos };

inline std::string to_string(Task task) { return task == Task::ner ? "ner" : "pos"; }

inline Task parse_task(std::string_view name) {
  if (name == "ner") return Task::ner;
  if (name == "pos") return Task::pos;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected ner or pos)");
}

struct Token {
  std::string text;
  std::optional<int> label;
};

struct Sentence {
  std::vector<Token> tokens;

  std::size_t size() const noexcept { return tokens.size(); }
};

/// Ordered label inventory. Identifiers are positions in code-point order of
/// the label names, so two corpora with the same label set agree on ids.
class LabelSet {
 public:
  LabelSet() = default;

  template <typename Range>
  explicit LabelSet(const Range &names) : names_(std::begin(names), std::end(names)) {
    std::sort(names_.begin(), names_.end());
    names_.erase(std::unique(names_.begin(), names_.end()), names_.end());
  }

  std::size_t size() const noexcept { return names_.size(); }
  bool empty() const noexcept { return names_.empty(); }
  const std::vector<std::string> &names() const noexcept { return names_; }
  const std::string &name(int id) const { return names_.at(static_cast<std::size_t>(id)); }

  std::optional<int> find(std::string_view name) const {
    auto it = std::lower_bound(names_.begin(), names_.end(), name);
    if (it == names_.end() || *it != name) return std::nullopt;
    return static_cast<int>(it - names_.begin());
  }

  int id(std::string_view name) const {
    if (auto found = find(name)) return *found;
    throw DataError("label '" + std::string(name) + "' is not in the tag set");
  }

  bool contains(std::string_view name) const { return find(name).has_value(); }

  bool operator==(const LabelSet &other) const = default;

 private:
  std::vector<std::string> names_;
};

struct TaggedCorpus {
  std::string language;
  std::vector<Sentence> sentences;
  LabelSet tagset;
  Task task = Task::ner;
  std::string source;

  std::size_t size() const noexcept { return sentences.size(); }
  bool empty() const noexcept { return sentences.empty(); }

  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto &s : sentences) n += s.size();
    return n;
  }

  /// Label names of one sentence. Unlabeled tokens raise DataError.
  std::vector<std::string> label_names(const Sentence &sentence) const {
    std::vector<std::string> out;
    out.reserve(sentence.size());
    for (const auto &tok : sentence.tokens) {
      if (!tok.label) throw DataError("token '" + tok.text + "' has no label");
      out.push_back(tagset.name(*tok.label));
    }
    return out;
  }

  /// Same language/tagset/task, different sentences.
  TaggedCorpus with_sentences(std::vector<Sentence> subset) const {
    TaggedCorpus out;
    out.language = language;
    out.sentences = std::move(subset);
    out.tagset = tagset;
    out.task = task;
    out.source = source;
    return out;
  }
};

using LabeledSentence = std::vector<std::pair<std::string, std::string>>;

namespace detail {

inline bool valid_iob_label(std::string_view label) {
  if (label == "O") return true;
  return label.size() > 2 && (label.substr(0, 2) == "B-" || label.substr(0, 2) == "I-");
}

inline std::string_view iob_type(std::string_view label) {
  return label == "O" ? std::string_view{} : label.substr(2);
}

}  // namespace detail

/// Rewrites IOB1 (or ill-formed IOB2) sequences into IOB2: an I-X that does
/// not continue an X span becomes B-X.
inline void to_iob2(std::vector<std::string> &labels) {
  std::string_view previous_type;
  for (auto &label : labels) {
    if (label == "O") {
      previous_type = {};
      continue;
    }
    const auto type = detail::iob_type(label);
    if (label[0] == 'I' && type != previous_type) label[0] = 'B';
    previous_type = detail::iob_type(label);
  }
}

inline void check_token_text(const std::string &text, std::size_t line) {
  if (text.empty()) throw ParseError("empty token", line);
  if (unicode::contains_space(text)) throw ParseError("token contains whitespace", line);
}

/// Builds a corpus from (token, label) pairs: validates tokens, converts NER
/// labels to IOB2 and interns the labels.
inline TaggedCorpus make_corpus(std::string language, Task task,
                                const std::vector<LabeledSentence> &sentences,
                                const std::vector<std::size_t> &line_numbers = {}) {
  std::vector<std::vector<std::string>> labels;
  labels.reserve(sentences.size());
  std::vector<std::string> all_labels;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const std::size_t line = s < line_numbers.size() ? line_numbers[s] : 0;
    if (sentences[s].empty()) throw ParseError("empty sentence", line);
    std::vector<std::string> seq;
    for (const auto &[text, label] : sentences[s]) {
      check_token_text(text, line);
      if (task == Task::ner && !detail::valid_iob_label(label))
        throw ParseError("label '" + label + "' is not an IOB label", line);
      if (label.empty()) throw ParseError("empty label", line);
      seq.push_back(label);
    }
    if (task == Task::ner) to_iob2(seq);
    all_labels.insert(all_labels.end(), seq.begin(), seq.end());
    labels.push_back(std::move(seq));
  }
  TaggedCorpus corpus;
  corpus.language = std::move(language);
  corpus.task = task;
  corpus.tagset = LabelSet(all_labels);
  corpus.sentences.reserve(sentences.size());
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    Sentence sentence;
    for (std::size_t t = 0; t < sentences[s].size(); ++t)
      sentence.tokens.push_back(Token{sentences[s][t].first, corpus.tagset.id(labels[s][t])});
    corpus.sentences.push_back(std::move(sentence));
  }
  return corpus;
}

inline std::ifstream open_input(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return in;
}

inline std::ofstream open_output(const std::string &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  return out;
}

inline void strip_cr(std::string &line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

/// Reads "token<TAB>label" lines; blank lines separate sentences.
inline TaggedCorpus parse_conll_tsv(std::istream &in, Task task = Task::ner,
                                    std::string language = {}) {
  std::vector<LabeledSentence> sentences;
  std::vector<std::size_t> first_lines;
  LabeledSentence current;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) {
      if (!current.empty()) sentences.push_back(std::move(current));
      current.clear();
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected token<TAB>label", line_no);
    std::string text = line.substr(0, tab);
    std::string label = line.substr(tab + 1);
    if (label.find('\t') != std::string::npos) throw ParseError("too many columns", line_no);
    if (label.empty()) throw ParseError("empty label", line_no);
    check_token_text(text, line_no);
    if (task == Task::ner && !detail::valid_iob_label(label))
      throw ParseError("label '" + label + "' is not an IOB label", line_no);
    if (current.empty()) first_lines.push_back(line_no);
    current.emplace_back(std::move(text), std::move(label));
  }
  if (!current.empty()) sentences.push_back(std::move(current));
  if (sentences.empty()) throw EmptyCorpusError("no sentences in input");
  return make_corpus(std::move(language), task, sentences, first_lines);
}

inline TaggedCorpus read_conll_tsv(const std::string &path, Task task = Task::ner,
                                   std::string language = {}) {
  auto in = open_input(path);
  try {
    auto corpus = parse_conll_tsv(in, task, std::move(language));
    corpus.source = path;
    return corpus;
  } catch (const ParseError &e) {
    throw ParseError(path + ": " + e.what());
  } catch (const EmptyCorpusError &) {
    throw EmptyCorpusError("'" + path + "' contains no sentences");
  }
}

inline void write_conll_tsv(const TaggedCorpus &corpus, std::ostream &out) {
  for (std::size_t s = 0; s < corpus.sentences.size(); ++s) {
    if (s > 0) out << '\n';
    const auto &sentence = corpus.sentences[s];
    const auto labels = corpus.label_names(sentence);
    for (std::size_t t = 0; t < sentence.size(); ++t)
      out << sentence.tokens[t].text << '\t' << labels[t] << '\n';
  }
}

inline void write_conll_tsv(const TaggedCorpus &corpus, const std::string &path) {
  auto out = open_output(path);
  write_conll_tsv(corpus, out);
}

/// CoNLL-U reader keeping FORM (column 2) and UPOS (column 4).
inline TaggedCorpus parse_conllu_pos(std::istream &in, std::string language = {}) {
  std::vector<LabeledSentence> sentences;
  LabeledSentence current;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) {
      if (!current.empty()) sentences.push_back(std::move(current));
      current.clear();
      continue;
    }
    if (line[0] == '#') continue;
    std::vector<std::string> columns;
    std::size_t start = 0;
    while (true) {
      const auto tab = line.find('\t', start);
      columns.push_back(line.substr(start, tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (columns.size() < 10) throw ParseError("expected 10 CoNLL-U columns", line_no);
    const auto &id = columns[0];
    if (id.find('-') != std::string::npos || id.find('.') != std::string::npos) continue;
    check_token_text(columns[1], line_no);
    if (columns[3].empty()) throw ParseError("empty UPOS", line_no);
    current.emplace_back(columns[1], columns[3]);
  }
  if (!current.empty()) sentences.push_back(std::move(current));
  if (sentences.empty()) throw EmptyCorpusError("no sentences in input");
  return make_corpus(std::move(language), Task::pos, sentences);
}

inline TaggedCorpus read_conllu_pos(const std::string &path, std::string language = {}) {
  auto in = open_input(path);
  try {
    auto corpus = parse_conllu_pos(in, std::move(language));
    corpus.source = path;
    return corpus;
  } catch (const ParseError &e) {
    throw ParseError(path + ": " + e.what());
  } catch (const EmptyCorpusError &) {
    throw EmptyCorpusError("'" + path + "' contains no sentences");
  }
}

/// Raw corpus: one paragraph per line; blank lines are dropped.
inline std::vector<std::string> read_paragraphs(const std::string &path) {
  auto in = open_input(path);
  std::vector<std::string> paragraphs;
  std::string line;
  while (std::getline(in, line)) {
    strip_cr(line);
    if (!line.empty()) paragraphs.push_back(line);
  }
  return paragraphs;
}

/// Uniform sample without replacement of min(cap, |corpus|) paragraphs, in
/// random order (partial Fisher-Yates).
inline std::vector<std::string> sample_paragraphs(const std::vector<std::string> &corpus,
                                                  std::size_t cap, uint64_t seed) {
  if (cap < 1) throw ConfigError("sample cap must be at least 1");
  if (corpus.empty()) throw EmptyCorpusError("cannot sample from an empty corpus");
  const std::size_t n = corpus.size();
  const std::size_t k = std::min(cap, n);
  std::vector<std::size_t> index(n);
  for (std::size_t i = 0; i < n; ++i) index[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + rng.uniform_index(n - i);
    std::swap(index[i], index[j]);
  }
  std::vector<std::string> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(corpus[index[i]]);
  return out;
}

struct SplitSpec {
  double train = 0.8;
  double dev = 0.1;
  double test = 0.1;
  uint64_t seed = 0;

  void validate() const {
    for (double f : {train, dev, test})
      if (!(f > 0.0 && f < 1.0)) throw ConfigError("split fractions must lie in (0,1)");
    if (std::abs(train + dev + test - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1");
  }
};

struct Split {
  TaggedCorpus train;
  TaggedCorpus dev;
  TaggedCorpus test;
};

/// Sentence-level random partition. Dev and test sizes are floor(n * fraction);
/// the remainder goes to train. Each part keeps the original sentence order.
inline Split split(const TaggedCorpus &corpus, const SplitSpec &spec) {
  spec.validate();
  const std::size_t n = corpus.size();
  if (n < 3) throw DataError("splitting needs at least 3 sentences, got " + std::to_string(n));
  const auto floor_size = [n](double f) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9));
  };
  const std::size_t n_dev = floor_size(spec.dev);
  const std::size_t n_test = floor_size(spec.test);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  rng.shuffle(order);

  auto take = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
    std::sort(idx.begin(), idx.end());
    std::vector<Sentence> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(corpus.sentences[i]);
    return corpus.with_sentences(std::move(out));
  };
  Split result;
  result.dev = take(0, n_dev);
  result.test = take(n_dev, n_dev + n_test);
  result.train = take(n_dev + n_test, n);
  return result;
}

/// n independent random splits; fold i is seeded with spec.seed + i.
inline std::vector<Split> make_folds(const TaggedCorpus &corpus, std::size_t n,
                                     const SplitSpec &spec) {
  if (n < 1) throw ConfigError("fold count must be at least 1");
  std::vector<Split> folds;
  folds.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    SplitSpec fold_spec = spec;
    fold_spec.seed = spec.seed + i;
    folds.push_back(split(corpus, fold_spec));
  }
  return folds;
}

/// Whitespace-joined token texts, one string per sentence.
inline std::vector<std::string> sentence_texts(const TaggedCorpus &corpus) {
  std::vector<std::string> out;
  out.reserve(corpus.size());
  for (const auto &s : corpus.sentences) {
    std::string line;
    for (std::size_t t = 0; t < s.size(); ++t) {
      if (t > 0) line += ' ';
      line += s.tokens[t].text;
    }
    out.push_back(std::move(line));
  }
  return out;
}

}  // namespace subtag
