#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <exception>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "subtag/corpus.hpp"
#include "subtag/error.hpp"
#include "subtag/random.hpp"
#include "subtag/unicode.hpp"

namespace subtag::embeddings {

/// Sparse co-occurrence counts over an interned symbol inventory.
class CooccurrenceTable {
 public:
  CooccurrenceTable(std::size_t window = 10, bool symmetric = true)
      : window_(window), symmetric_(symmetric) {}

  std::size_t window() const noexcept { return window_; }
  bool symmetric() const noexcept { return symmetric_; }
  const std::vector<std::string> &symbols() const noexcept { return symbols_; }
  /// Non-zero entries keyed by (row, column) symbol ids, in sorted order.
  const std::map<std::pair<int, int>, double> &entries() const noexcept { return entries_; }
  std::size_t nonzeros() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  int intern(const std::string &symbol) {
    auto [it, inserted] = index_.emplace(symbol, static_cast<int>(symbols_.size()));
    if (inserted) symbols_.push_back(symbol);
    return it->second;
  }

  std::optional<int> find(const std::string &symbol) const {
    auto it = index_.find(symbol);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  void add(int i, int j, double weight) { entries_[{i, j}] += weight; }

  double at(const std::string &a, const std::string &b) const {
    auto i = find(a), j = find(b);
    if (!i || !j) return 0.0;
    auto it = entries_.find({*i, *j});
    return it == entries_.end() ? 0.0 : it->second;
  }

 private:
  std::size_t window_;
  bool symmetric_;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
  std::map<std::pair<int, int>, double> entries_;
};

/// Adds weight (1/delta with distance weighting, else 1) to X[s_t, s_t+delta]
/// for every offset 1 <= delta <= window, mirrored when symmetric. Symbols in
/// `inventory` are interned first so they get ids even if they never occur.
inline CooccurrenceTable build_cooccurrence(const std::vector<std::vector<std::string>> &corpus,
                                            std::size_t window, bool symmetric,
                                            bool distance_weighting,
                                            const std::vector<std::string> &inventory = {}) {
  if (window == 0) throw ConfigError("co-occurrence window must be at least 1");
  CooccurrenceTable table(window, symmetric);
  for (const auto &s : inventory) table.intern(s);
  for (const auto &seq : corpus) {
    std::vector<int> ids;
    ids.reserve(seq.size());
    for (const auto &s : seq) ids.push_back(table.intern(s));
    for (std::size_t t = 0; t < ids.size(); ++t) {
      for (std::size_t d = 1; d <= window && t + d < ids.size(); ++d) {
        const double w = distance_weighting ? 1.0 / static_cast<double>(d) : 1.0;
        table.add(ids[t], ids[t + d], w);
        if (symmetric) table.add(ids[t + d], ids[t], w);
      }
    }
  }
  return table;
}

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  explicit EmbeddingTable(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return symbols_.size(); }
  const std::vector<std::string> &symbols() const noexcept { return symbols_; }

  void add(const std::string &symbol, std::vector<double> values) {
    if (values.size() != dim_)
      throw DataError("vector for '" + symbol + "' has dimension " + std::to_string(values.size()) +
                      ", expected " + std::to_string(dim_));
    if (!index_.emplace(symbol, symbols_.size()).second)
      throw DataError("duplicate symbol '" + symbol + "'");
    symbols_.push_back(symbol);
    data_.insert(data_.end(), values.begin(), values.end());
  }

  bool contains(const std::string &symbol) const { return index_.count(symbol) != 0; }

  std::span<const double> vector(std::size_t i) const {
    return {data_.data() + i * dim_, dim_};
  }

  std::span<const double> vector(const std::string &symbol) const {
    auto it = index_.find(symbol);
    if (it == index_.end()) throw DataError("no vector for '" + symbol + "'");
    return vector(it->second);
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<double> data_;
};

// Text format: "count dim" header, then "symbol v1 ... vd" per line with
// 9 significant digits.
inline void write_embeddings(const EmbeddingTable &table, std::ostream &out) {
  out << table.size() << ' ' << table.dim() << '\n';
  char buf[32];
  for (std::size_t i = 0; i < table.size(); ++i) {
    out << table.symbols()[i];
    for (double v : table.vector(i)) {
      std::snprintf(buf, sizeof buf, " %.9g", v);
      out << buf;
    }
    out << '\n';
  }
}

inline void write_embeddings(const EmbeddingTable &table, const std::string &path) {
  auto out = open_output(path);
  write_embeddings(table, out);
}

inline EmbeddingTable read_embeddings(std::istream &in) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  strip_cr(line);
  std::istringstream header(line);
  std::size_t count = 0, dim = 0;
  if (!(header >> count >> dim) || dim == 0) throw ParseError("expected 'count dimension'", 1);
  EmbeddingTable table(dim);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string symbol;
    fields >> symbol;
    std::vector<double> values;
    for (std::string v; fields >> v;) {
      char *end = nullptr;
      const double x = std::strtod(v.c_str(), &end);
      if (end == v.c_str() || *end != '\0') throw ParseError("bad number '" + v + "'", line_no);
      values.push_back(x);
    }
    if (values.size() != dim)
      throw ParseError("expected " + std::to_string(dim) + " values, found " +
                           std::to_string(values.size()),
                       line_no);
    try {
      table.add(symbol, std::move(values));
    } catch (const DataError &e) {
      throw ParseError(e.what(), line_no);
    }
  }
  if (table.size() != count)
    throw ParseError("header announces " + std::to_string(count) + " vectors, found " +
                     std::to_string(table.size()));
  return table;
}

inline EmbeddingTable read_embeddings(const std::string &path) {
  auto in = open_input(path);
  return read_embeddings(in);
}

// ---------------------------------------------------------------------------
// GloVe: weighted least squares on log co-occurrence counts.

struct GloveConfig {
  std::size_t dim = 100;
  std::size_t epochs = 25;
  double learning_rate = 0.05;
  double x_max = 100.0;
  double alpha = 0.75;
  uint64_t seed = 1;
  // >1 enables unsynchronized parallel updates; results are then not
  // reproducible run to run.
  std::size_t threads = 1;
};

/// f(x) = (x/x_max)^alpha below x_max, 1 above.
inline double glove_weight(double x, double x_max, double alpha) {
  if (x <= 0.0) return 0.0;
  return x < x_max ? std::pow(x / x_max, alpha) : 1.0;
}

/// Main vectors, context vectors and both bias vectors; rows are symbols.
struct GloveParams {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::vector<double> w, wc, b, bc;

  double *row(std::vector<double> &m, std::size_t i) { return m.data() + i * dim; }
  const double *row(const std::vector<double> &m, std::size_t i) const { return m.data() + i * dim; }
};

/// Uniform in [-0.5/d, 0.5/d] for every parameter.
inline GloveParams glove_init(std::size_t n, std::size_t dim, uint64_t seed) {
  GloveParams p;
  p.n = n;
  p.dim = dim;
  Rng rng(seed);
  const double r = 0.5 / static_cast<double>(dim);
  auto fill = [&](std::vector<double> &v, std::size_t count) {
    v.resize(count);
    for (auto &x : v) x = rng.uniform(-r, r);
  };
  fill(p.w, n * dim);
  fill(p.wc, n * dim);
  fill(p.b, n);
  fill(p.bc, n);
  return p;
}

inline double glove_residual(const GloveParams &p, int i, int j, double x) {
  const double *wi = p.row(p.w, static_cast<std::size_t>(i));
  const double *wj = p.row(p.wc, static_cast<std::size_t>(j));
  double dot = 0.0;
  for (std::size_t k = 0; k < p.dim; ++k) dot += wi[k] * wj[k];
  return dot + p.b[static_cast<std::size_t>(i)] + p.bc[static_cast<std::size_t>(j)] - std::log(x);
}

/// J = sum over non-zero X_ij of f(X_ij) (w_i . wc_j + b_i + bc_j - ln X_ij)^2.
inline double glove_loss(const CooccurrenceTable &table, const GloveParams &p, double x_max,
                         double alpha) {
  double loss = 0.0;
  for (const auto &[ij, x] : table.entries()) {
    const double r = glove_residual(p, ij.first, ij.second, x);
    loss += glove_weight(x, x_max, alpha) * r * r;
  }
  return loss;
}

/// Full-batch analytic gradient of glove_loss, same layout as the parameters.
inline GloveParams glove_gradient(const CooccurrenceTable &table, const GloveParams &p,
                                  double x_max, double alpha) {
  GloveParams g;
  g.n = p.n;
  g.dim = p.dim;
  g.w.assign(p.w.size(), 0.0);
  g.wc.assign(p.wc.size(), 0.0);
  g.b.assign(p.b.size(), 0.0);
  g.bc.assign(p.bc.size(), 0.0);
  for (const auto &[ij, x] : table.entries()) {
    const auto i = static_cast<std::size_t>(ij.first);
    const auto j = static_cast<std::size_t>(ij.second);
    const double c = 2.0 * glove_weight(x, x_max, alpha) * glove_residual(p, ij.first, ij.second, x);
    const double *wi = p.row(p.w, i);
    const double *wj = p.row(p.wc, j);
    double *gi = g.row(g.w, i);
    double *gj = g.row(g.wc, j);
    for (std::size_t k = 0; k < p.dim; ++k) {
      gi[k] += c * wj[k];
      gj[k] += c * wi[k];
    }
    g.b[i] += c;
    g.bc[j] += c;
  }
  return g;
}

struct GloveResult {
  EmbeddingTable table;
  GloveParams params;
  std::vector<double> epoch_loss;  // loss after each epoch
  double initial_loss = 0.0;
};

namespace detail {

struct AdagradState {
  std::vector<double> w, wc, b, bc;
};

inline void glove_step(GloveParams &p, AdagradState &g2, const CooccurrenceTable &table, int i_,
                       int j_, double x, const GloveConfig &cfg) {
  const auto i = static_cast<std::size_t>(i_);
  const auto j = static_cast<std::size_t>(j_);
  const double r = glove_residual(p, i_, j_, x);
  if (!std::isfinite(r))
    throw DivergenceError("non-finite GloVe loss at entry (" + table.symbols()[i] + ", " +
                          table.symbols()[j] + ")");
  const double c = 2.0 * glove_weight(x, cfg.x_max, cfg.alpha) * r;
  double *wi = p.row(p.w, i);
  double *wj = p.row(p.wc, j);
  double *si = g2.w.data() + i * p.dim;
  double *sj = g2.wc.data() + j * p.dim;
  for (std::size_t k = 0; k < p.dim; ++k) {
    const double gi = c * wj[k];
    const double gj = c * wi[k];
    wi[k] -= cfg.learning_rate * gi / std::sqrt(si[k]);
    wj[k] -= cfg.learning_rate * gj / std::sqrt(sj[k]);
    si[k] += gi * gi;
    sj[k] += gj * gj;
  }
  p.b[i] -= cfg.learning_rate * c / std::sqrt(g2.b[i]);
  p.bc[j] -= cfg.learning_rate * c / std::sqrt(g2.bc[j]);
  g2.b[i] += c * c;
  g2.bc[j] += c * c;
}

}  // namespace detail

/// AdaGrad over shuffled non-zero entries. Final vector per symbol is the sum
/// of its main and context vectors.
inline GloveResult train_glove(const CooccurrenceTable &table, const GloveConfig &cfg) {
  if (table.empty()) throw EmptyCorpusError("co-occurrence table is empty");
  if (cfg.dim < 1) throw ConfigError("embedding dimension must be at least 1");
  const std::size_t n = table.symbols().size();
  GloveResult result;
  result.params = glove_init(n, cfg.dim, cfg.seed);
  GloveParams &p = result.params;
  detail::AdagradState g2{std::vector<double>(p.w.size(), 1.0), std::vector<double>(p.wc.size(), 1.0),
                          std::vector<double>(n, 1.0), std::vector<double>(n, 1.0)};

  struct Cell {
    int i, j;
    double x;
  };
  std::vector<Cell> cells;
  cells.reserve(table.nonzeros());
  for (const auto &[ij, x] : table.entries()) cells.push_back({ij.first, ij.second, x});

  Rng rng(cfg.seed ^ 0x5bd1e995ULL);
  result.initial_loss = glove_loss(table, p, cfg.x_max, cfg.alpha);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(cells);
    if (cfg.threads <= 1) {
      for (const auto &c : cells) detail::glove_step(p, g2, table, c.i, c.j, c.x, cfg);
    } else {
      std::vector<std::thread> workers;
      std::vector<std::exception_ptr> errors(cfg.threads);
      const std::size_t chunk = (cells.size() + cfg.threads - 1) / cfg.threads;
      for (std::size_t t = 0; t < cfg.threads; ++t) {
        workers.emplace_back([&, t] {
          try {
            const std::size_t lo = t * chunk, hi = std::min(cells.size(), lo + chunk);
            for (std::size_t k = lo; k < hi; ++k)
              detail::glove_step(p, g2, table, cells[k].i, cells[k].j, cells[k].x, cfg);
          } catch (...) {
            errors[t] = std::current_exception();
          }
        });
      }
      for (auto &w : workers) w.join();
      for (auto &e : errors)
        if (e) std::rethrow_exception(e);
    }
    const double loss = glove_loss(table, p, cfg.x_max, cfg.alpha);
    if (!std::isfinite(loss))
      throw DivergenceError("non-finite GloVe loss after epoch " + std::to_string(epoch + 1));
    result.epoch_loss.push_back(loss);
  }

  result.table = EmbeddingTable(cfg.dim);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(cfg.dim);
    for (std::size_t k = 0; k < cfg.dim; ++k) v[k] = p.w[i * cfg.dim + k] + p.wc[i * cfg.dim + k];
    result.table.add(table.symbols()[i], std::move(v));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Character-ngram composition: w = z_w + sum over g in G_w of z_g.

inline constexpr std::size_t kMinNgram = 3;
inline constexpr std::size_t kMaxNgram = 6;

/// Distinct character ngrams (3..6 code points) of "<word>", in order of
/// first occurrence.
inline std::vector<std::string> char_ngrams(const std::string &word, std::size_t n_min = kMinNgram,
                                            std::size_t n_max = kMaxNgram) {
  const std::u32string bounded = U"<" + unicode::decode(word) + U">";
  std::vector<std::string> out;
  std::unordered_map<std::string, bool> seen;
  for (std::size_t start = 0; start < bounded.size(); ++start) {
    for (std::size_t n = n_min; n <= n_max && start + n <= bounded.size(); ++n) {
      std::string g = unicode::encode(std::u32string_view(bounded).substr(start, n));
      if (seen.emplace(g, true).second) out.push_back(std::move(g));
    }
  }
  return out;
}

class NgramInventory {
 public:
  explicit NgramInventory(std::size_t dim = 0) : dim_(dim) {}

  std::size_t dim() const noexcept { return dim_; }
  std::size_t word_count() const noexcept { return words_.size(); }
  std::size_t ngram_count() const noexcept { return ngrams_.size(); }

  void add_word(const std::string &word, std::vector<double> v) {
    check_dim(v);
    words_[word] = std::move(v);
  }

  void add_ngram(const std::string &ngram, std::vector<double> v) {
    check_dim(v);
    const auto n = unicode::length(ngram);
    if (n < kMinNgram || n > kMaxNgram)
      throw DataError("ngram '" + ngram + "' has length " + std::to_string(n) + " outside [3,6]");
    ngrams_[ngram] = std::move(v);
  }

  const std::vector<double> *word(const std::string &w) const {
    auto it = words_.find(w);
    return it == words_.end() ? nullptr : &it->second;
  }

  const std::vector<double> *ngram(const std::string &g) const {
    auto it = ngrams_.find(g);
    return it == ngrams_.end() ? nullptr : &it->second;
  }

  const std::map<std::string, std::vector<double>> &ngrams() const noexcept { return ngrams_; }

 private:
  void check_dim(const std::vector<double> &v) const {
    if (v.size() != dim_)
      throw DataError("vector dimension " + std::to_string(v.size()) + " != " + std::to_string(dim_));
  }

  std::size_t dim_;
  std::map<std::string, std::vector<double>> words_;
  std::map<std::string, std::vector<double>> ngrams_;
};

/// z_w (zero for out-of-vocabulary words) plus the vectors of the word's
/// ngrams that the inventory knows.
inline std::vector<double> compose_ngram_word(const NgramInventory &inv, const std::string &word) {
  std::vector<double> out(inv.dim(), 0.0);
  if (const auto *zw = inv.word(word)) out = *zw;
  for (const auto &g : char_ngrams(word))
    if (const auto *zg = inv.ngram(g))
      for (std::size_t k = 0; k < out.size(); ++k) out[k] += (*zg)[k];
  return out;
}

// Joint word/ngram training goes through GloVe on sequences in which every
// word is followed by its ngrams; symbols are tagged to keep the namespaces
// apart.
inline constexpr std::string_view kWordTag = "w|";
inline constexpr std::string_view kNgramTag = "g|";

/// Expands sentences into tagged word + ngram symbol sequences, dropping
/// ngrams seen fewer than min_count times.
inline std::vector<std::vector<std::string>> ngram_sequences(
    const std::vector<std::vector<std::string>> &sentences, std::size_t min_count = 1) {
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto &s : sentences)
    for (const auto &w : s)
      for (const auto &g : char_ngrams(w)) ++counts[g];
  std::vector<std::vector<std::string>> out;
  out.reserve(sentences.size());
  for (const auto &s : sentences) {
    std::vector<std::string> seq;
    for (const auto &w : s) {
      seq.push_back(std::string(kWordTag) + w);
      for (const auto &g : char_ngrams(w))
        if (counts[g] >= min_count) seq.push_back(std::string(kNgramTag) + g);
    }
    out.push_back(std::move(seq));
  }
  return out;
}

/// Splits a table trained on ngram_sequences() output back into an inventory.
inline NgramInventory inventory_from_table(const EmbeddingTable &table) {
  NgramInventory inv(table.dim());
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto &s = table.symbols()[i];
    const auto v = table.vector(i);
    std::vector<double> values(v.begin(), v.end());
    if (s.compare(0, kWordTag.size(), kWordTag) == 0)
      inv.add_word(s.substr(kWordTag.size()), std::move(values));
    else if (s.compare(0, kNgramTag.size(), kNgramTag) == 0)
      inv.add_ngram(s.substr(kNgramTag.size()), std::move(values));
  }
  return inv;
}

}  // namespace subtag::embeddings
