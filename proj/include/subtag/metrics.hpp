#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "subtag/corpus.hpp"
#include "subtag/error.hpp"

namespace subtag::metrics {

struct Span {
  std::string type;
  std::size_t start = 0;
  std::size_t end = 0;  // inclusive

  auto operator<=>(const Span &) const = default;
};

/// Maximal B-/I- runs of one type. An I-X that does not continue an X span
/// opens a new one (CoNLL repair convention).
inline std::set<Span> extract_spans(const std::vector<std::string> &labels) {
  std::set<Span> spans;
  bool open = false;
  Span current;
  auto close = [&] {
    if (open) spans.insert(current);
    open = false;
  };
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::string &label = labels[i];
    const bool begin = label.size() > 2 && label.compare(0, 2, "B-") == 0;
    const bool inside = label.size() > 2 && label.compare(0, 2, "I-") == 0;
    if (!begin && !inside) {
      close();
      continue;
    }
    const std::string type = label.substr(2);
    if (inside && open && current.type == type) {
      current.end = i;
      continue;
    }
    close();
    current = Span{type, i, i};
    open = true;
  }
  close();
  return spans;
}

struct PrfScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t correct = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
};

/// Counts-to-score conventions: no spans on either side is a perfect score;
/// otherwise an empty side scores 0.
inline PrfScore prf_from_counts(std::size_t correct, std::size_t predicted, std::size_t gold) {
  PrfScore s;
  s.correct = correct;
  s.predicted = predicted;
  s.gold = gold;
  if (predicted == 0 && gold == 0) {
    s.precision = s.recall = s.f1 = 1.0;
    return s;
  }
  s.precision = predicted == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(predicted);
  s.recall = gold == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(gold);
  s.f1 = s.precision + s.recall == 0.0
             ? 0.0
             : 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

using LabelSequences = std::vector<std::vector<std::string>>;

/// Exact-match (type, start, end) entity scores over a set of sentences.
inline PrfScore entity_f1(const LabelSequences &gold, const LabelSequences &predicted) {
  if (gold.size() != predicted.size())
    throw DataError("gold has " + std::to_string(gold.size()) + " sentences, predictions " +
                    std::to_string(predicted.size()));
  std::size_t correct = 0, n_pred = 0, n_gold = 0;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    if (gold[s].size() != predicted[s].size())
      throw DataError("sentence " + std::to_string(s) + " length mismatch: gold " +
                      std::to_string(gold[s].size()) + ", predicted " +
                      std::to_string(predicted[s].size()));
    const auto g = extract_spans(gold[s]);
    const auto p = extract_spans(predicted[s]);
    n_gold += g.size();
    n_pred += p.size();
    for (const auto &span : p) correct += g.count(span);
  }
  return prf_from_counts(correct, n_pred, n_gold);
}

inline double token_accuracy(const LabelSequences &gold, const LabelSequences &predicted) {
  if (gold.size() != predicted.size())
    throw DataError("gold has " + std::to_string(gold.size()) + " sentences, predictions " +
                    std::to_string(predicted.size()));
  std::size_t match = 0, total = 0;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    if (gold[s].size() != predicted[s].size())
      throw DataError("sentence " + std::to_string(s) + " length mismatch");
    for (std::size_t t = 0; t < gold[s].size(); ++t) {
      match += gold[s][t] == predicted[s][t];
      ++total;
    }
  }
  if (total == 0) throw DataError("no tokens to score");
  return static_cast<double>(match) / static_cast<double>(total);
}

inline LabelSequences label_sequences(const TaggedCorpus &corpus) {
  LabelSequences out;
  out.reserve(corpus.size());
  for (const auto &s : corpus.sentences) out.push_back(corpus.label_names(s));
  return out;
}

/// Task-appropriate headline score: entity F1 for NER, accuracy for POS.
inline double task_score(Task task, const LabelSequences &gold, const LabelSequences &predicted) {
  return task == Task::ner ? entity_f1(gold, predicted).f1 : token_accuracy(gold, predicted);
}

enum class EntropyUnit { span_types, tags };

inline double entropy_of_counts(const std::map<std::string, std::size_t> &counts) {
  std::size_t total = 0;
  for (const auto &[k, c] : counts) total += c;
  if (total == 0) throw UndefinedEntropyError("no labeled items to measure");
  double h = 0.0;
  for (const auto &[k, c] : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

/// Entropy (nats) of the label distribution: span types for NER (O is not a
/// type), all tags for POS unless overridden.
inline double tag_entropy(const TaggedCorpus &corpus, std::optional<EntropyUnit> unit = {}) {
  if (corpus.empty()) throw UndefinedEntropyError("empty corpus");
  const EntropyUnit u =
      unit.value_or(corpus.task == Task::ner ? EntropyUnit::span_types : EntropyUnit::tags);
  std::map<std::string, std::size_t> counts;
  for (const auto &s : corpus.sentences) {
    const auto labels = corpus.label_names(s);
    if (u == EntropyUnit::span_types) {
      for (const auto &span : extract_spans(labels)) ++counts[span.type];
    } else {
      for (const auto &l : labels) ++counts[l];
    }
  }
  return entropy_of_counts(counts);
}

struct ScoreRow {
  std::string language;
  std::string method;
  std::string bucket;
  std::size_t instances = 0;
  double score = 0.0;  // F1 for NER, accuracy for POS
  double precision = 0.0;
  double recall = 0.0;
};

struct ScoreReport {
  std::vector<ScoreRow> rows;

  double macro_average(const std::string &method) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto &r : rows)
      if (r.method == method) {
        sum += r.score;
        ++n;
      }
    if (n == 0) throw DataError("no scores for method '" + method + "'");
    return sum / static_cast<double>(n);
  }

  std::vector<std::string> methods() const {
    std::vector<std::string> out;
    for (const auto &r : rows)
      if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
    return out;
  }
};

inline double macro_average(const std::vector<double> &scores) {
  if (scores.empty()) throw DataError("macro average of no scores");
  double sum = 0.0;
  for (double s : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

/// One column per method holding its per-language scores in descending
/// order; row i holds the i-th best score of every method.
inline void export_sorted_scores(const ScoreReport &report, std::ostream &out) {
  const auto methods = report.methods();
  std::vector<std::vector<double>> columns;
  std::size_t rows = 0;
  for (const auto &m : methods) {
    std::vector<double> col;
    for (const auto &r : report.rows)
      if (r.method == m) col.push_back(r.score);
    std::sort(col.begin(), col.end(), std::greater<>());
    rows = std::max(rows, col.size());
    columns.push_back(std::move(col));
  }
  out << "rank";
  for (const auto &m : methods) out << ',' << m;
  out << '\n';
  out << std::setprecision(17);
  for (std::size_t i = 0; i < rows; ++i) {
    out << i + 1;
    for (const auto &col : columns) {
      out << ',';
      if (i < col.size()) out << col[i];
    }
    out << '\n';
  }
}

inline std::string export_sorted_scores(const ScoreReport &report) {
  std::ostringstream out;
  export_sorted_scores(report, out);
  return out.str();
}

}  // namespace subtag::metrics
