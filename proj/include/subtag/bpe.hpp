#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "subtag/corpus.hpp"
#include "subtag/error.hpp"
#include "subtag/unicode.hpp"

namespace subtag::bpe {

/// Word-boundary marker; it starts every word as a symbol of its own.
inline constexpr char32_t kMarker = U'▁';

using Symbol = std::u32string;
using Merge = std::pair<Symbol, Symbol>;

namespace detail {

// Sort weight of a code point. The marker sorts before every other
// character; everything else compares by code point.
inline uint64_t weight(char32_t c, char32_t marker) {
  return c == marker ? 0 : static_cast<uint64_t>(c) + 1;
}

// Lexicographic comparison of (a1 + a2) against (b1 + b2) without allocating.
inline int compare_concat(const Symbol &a1, const Symbol &a2, const Symbol &b1, const Symbol &b2,
                          char32_t marker) {
  const std::size_t na = a1.size() + a2.size();
  const std::size_t nb = b1.size() + b2.size();
  const std::size_t n = std::min(na, nb);
  for (std::size_t i = 0; i < n; ++i) {
    const char32_t ca = i < a1.size() ? a1[i] : a2[i - a1.size()];
    const char32_t cb = i < b1.size() ? b1[i] : b2[i - b1.size()];
    if (ca != cb) return weight(ca, marker) < weight(cb, marker) ? -1 : 1;
  }
  if (na == nb) return 0;
  return na < nb ? -1 : 1;
}

inline bool symbol_less(const Symbol &a, const Symbol &b, char32_t marker) {
  return compare_concat(a, {}, b, {}, marker) < 0;
}

struct PairHash {
  std::size_t operator()(const Merge &m) const noexcept {
    const std::size_t h1 = std::hash<Symbol>{}(m.first);
    const std::size_t h2 = std::hash<Symbol>{}(m.second);
    return h1 ^ (h2 + 0x9e3779b97f4a7c15ULL + (h1 << 6) + (h1 >> 2));
  }
};

}  // namespace detail

/// Ordering used to break frequency ties between candidate merges: smaller
/// concatenated symbol first, then smaller left operand.
inline bool merge_precedes(const Merge &a, const Merge &b, char32_t marker = kMarker) {
  const int c = detail::compare_concat(a.first, a.second, b.first, b.second, marker);
  if (c != 0) return c < 0;
  return detail::symbol_less(a.first, b.first, marker);
}

class BpeModel {
 public:
  BpeModel() : BpeModel({Symbol(1, kMarker)}, {}) {}

  BpeModel(std::vector<Symbol> alphabet, std::vector<Merge> merges, char32_t marker = kMarker)
      : marker_(marker), alphabet_(std::move(alphabet)), merges_(std::move(merges)) {
    std::sort(alphabet_.begin(), alphabet_.end(),
              [this](const Symbol &a, const Symbol &b) { return detail::symbol_less(a, b, marker_); });
    alphabet_.erase(std::unique(alphabet_.begin(), alphabet_.end()), alphabet_.end());
    build();
  }

  char32_t marker() const noexcept { return marker_; }
  const std::vector<Symbol> &alphabet() const noexcept { return alphabet_; }
  const std::vector<Merge> &merges() const noexcept { return merges_; }
  /// Alphabet followed by merge outputs in rank order.
  const std::vector<Symbol> &vocab() const noexcept { return vocab_; }
  std::size_t vocab_size() const noexcept { return vocab_.size(); }

  std::optional<std::size_t> rank(const Symbol &left, const Symbol &right) const {
    auto it = ranks_.find(Merge{left, right});
    if (it == ranks_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(const Symbol &symbol) const { return vocab_set_.count(symbol) != 0; }

  /// Marker + characters, then repeatedly apply the lowest-rank merge
  /// (leftmost occurrence) until none applies.
  std::vector<Symbol> segment_symbols(std::u32string_view word) const {
    std::vector<Symbol> parts;
    parts.reserve(word.size() + 1);
    parts.emplace_back(1, marker_);
    for (char32_t c : word) parts.emplace_back(1, c);
    while (parts.size() > 1) {
      std::size_t best_rank = SIZE_MAX;
      std::size_t best_pos = 0;
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        auto r = rank(parts[i], parts[i + 1]);
        if (r && *r < best_rank) {
          best_rank = *r;
          best_pos = i;
        }
      }
      if (best_rank == SIZE_MAX) break;
      parts[best_pos] += parts[best_pos + 1];
      parts.erase(parts.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
    }
    return parts;
  }

  bool operator==(const BpeModel &other) const {
    return marker_ == other.marker_ && alphabet_ == other.alphabet_ && merges_ == other.merges_;
  }

 private:
  void build() {
    vocab_ = alphabet_;
    vocab_set_ = std::unordered_set<Symbol>(alphabet_.begin(), alphabet_.end());
    if (!vocab_set_.count(Symbol(1, marker_)))
      throw ConfigError("BPE alphabet must contain the word-boundary marker");
    ranks_.clear();
    for (std::size_t r = 0; r < merges_.size(); ++r) {
      const auto &[left, right] = merges_[r];
      if (!vocab_set_.count(left) || !vocab_set_.count(right))
        throw ConfigError("merge " + std::to_string(r) + " uses an unknown operand");
      Symbol out = left + right;
      if (!vocab_set_.insert(out).second)
        throw ConfigError("merge " + std::to_string(r) + " repeats an existing symbol");
      vocab_.push_back(std::move(out));
      ranks_.emplace(merges_[r], r);
    }
  }

  char32_t marker_;
  std::vector<Symbol> alphabet_;
  std::vector<Merge> merges_;
  std::vector<Symbol> vocab_;
  std::unordered_set<Symbol> vocab_set_;
  std::unordered_map<Merge, std::size_t, detail::PairHash> ranks_;
};

using WordCounts = std::map<std::string, uint64_t>;

inline WordCounts count_words(const std::vector<std::string> &texts) {
  WordCounts counts;
  for (const auto &text : texts)
    for (auto &word : unicode::split_whitespace(text)) ++counts[word];
  return counts;
}

inline WordCounts count_words(const TaggedCorpus &corpus) {
  WordCounts counts;
  for (const auto &s : corpus.sentences)
    for (const auto &t : s.tokens) ++counts[t.text];
  return counts;
}

/// Greedy merge learning over a word-frequency table. Each step merges the
/// most frequent adjacent pair (ties: merge_precedes) whose output is not yet
/// a symbol. Stops at target_vocab_size symbols or when no pair occurs twice.
inline BpeModel learn(const WordCounts &counts, std::size_t target_vocab_size,
                      char32_t marker = kMarker) {
  if (counts.empty()) throw EmptyCorpusError("cannot learn BPE from an empty corpus");

  std::vector<Symbol> symbols;
  std::unordered_map<Symbol, int> symbol_id;
  auto intern = [&](const Symbol &s) {
    auto [it, inserted] = symbol_id.emplace(s, static_cast<int>(symbols.size()));
    if (inserted) symbols.push_back(s);
    return it->second;
  };

  std::vector<std::vector<int>> words;
  std::vector<int64_t> freq;
  intern(Symbol(1, marker));
  for (const auto &[word, count] : counts) {
    std::vector<int> seq{symbol_id.at(Symbol(1, marker))};
    for (char32_t c : unicode::decode(word)) {
      if (unicode::is_space(c)) throw DataError("word contains whitespace");
      seq.push_back(intern(Symbol(1, c)));
    }
    words.push_back(std::move(seq));
    freq.push_back(static_cast<int64_t>(count));
  }
  const std::vector<Symbol> alphabet = symbols;
  if (target_vocab_size < alphabet.size())
    throw ConfigError("target vocabulary size " + std::to_string(target_vocab_size) +
                      " is below the alphabet size " + std::to_string(alphabet.size()));

  using PairKey = uint64_t;
  auto key_of = [](int a, int b) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) | static_cast<uint32_t>(b);
  };
  auto left_of = [](PairKey k) { return static_cast<int>(k >> 32); };
  auto right_of = [](PairKey k) { return static_cast<int>(k & 0xffffffffu); };

  std::unordered_map<PairKey, int64_t> pair_count;
  std::unordered_map<PairKey, std::unordered_set<int>> pair_words;
  for (int w = 0; w < static_cast<int>(words.size()); ++w) {
    const auto &seq = words[static_cast<std::size_t>(w)];
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      const PairKey k = key_of(seq[i], seq[i + 1]);
      pair_count[k] += freq[static_cast<std::size_t>(w)];
      pair_words[k].insert(w);
    }
  }

  struct Entry {
    int64_t count;
    PairKey pair;
  };
  auto entry_less = [&](const Entry &a, const Entry &b) {
    if (a.count != b.count) return a.count > b.count;
    if (a.pair == b.pair) return false;
    return merge_precedes({symbols[static_cast<std::size_t>(left_of(a.pair))],
                           symbols[static_cast<std::size_t>(right_of(a.pair))]},
                          {symbols[static_cast<std::size_t>(left_of(b.pair))],
                           symbols[static_cast<std::size_t>(right_of(b.pair))]},
                          marker);
  };
  std::set<Entry, decltype(entry_less)> queue(entry_less);
  for (const auto &[k, c] : pair_count)
    if (c >= 2) queue.insert({c, k});

  std::unordered_set<PairKey> blocked;
  std::vector<Merge> merges;
  while (symbols.size() < target_vocab_size && !queue.empty()) {
    const Entry best = *queue.begin();
    queue.erase(queue.begin());
    const int a = left_of(best.pair);
    const int b = right_of(best.pair);
    Symbol merged = symbols[static_cast<std::size_t>(a)] + symbols[static_cast<std::size_t>(b)];
    if (symbol_id.count(merged)) {
      blocked.insert(best.pair);
      continue;
    }
    const int c = intern(merged);
    merges.emplace_back(symbols[static_cast<std::size_t>(a)], symbols[static_cast<std::size_t>(b)]);

    std::unordered_map<PairKey, int64_t> before;
    auto touch = [&](PairKey k, int64_t delta) {
      auto it = pair_count.find(k);
      const int64_t old = it == pair_count.end() ? 0 : it->second;
      before.emplace(k, old);
      if (it == pair_count.end())
        pair_count.emplace(k, delta);
      else
        it->second += delta;
    };

    std::vector<int> affected(pair_words[best.pair].begin(), pair_words[best.pair].end());
    std::sort(affected.begin(), affected.end());
    for (int w : affected) {
      auto &seq = words[static_cast<std::size_t>(w)];
      const int64_t f = freq[static_cast<std::size_t>(w)];
      bool present = false;
      for (std::size_t i = 0; i + 1 < seq.size(); ++i)
        if (seq[i] == a && seq[i + 1] == b) present = true;
      if (!present) continue;
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) touch(key_of(seq[i], seq[i + 1]), -f);
      std::vector<int> next;
      next.reserve(seq.size());
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i + 1 < seq.size() && seq[i] == a && seq[i + 1] == b) {
          next.push_back(c);
          ++i;
        } else {
          next.push_back(seq[i]);
        }
      }
      seq = std::move(next);
      for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
        const PairKey k = key_of(seq[i], seq[i + 1]);
        touch(k, f);
        pair_words[k].insert(w);
      }
    }
    for (const auto &[k, old] : before) {
      if (k == best.pair) continue;
      const int64_t now = pair_count[k];
      if (old == now) continue;
      if (old >= 2) queue.erase({old, k});
      if (now >= 2 && !blocked.count(k)) queue.insert({now, k});
    }
    pair_count.erase(best.pair);
    pair_words.erase(best.pair);
  }
  return BpeModel(alphabet, std::move(merges), marker);
}

inline BpeModel learn(const std::vector<std::string> &texts, std::size_t target_vocab_size,
                      char32_t marker = kMarker) {
  return learn(count_words(texts), target_vocab_size, marker);
}

inline BpeModel learn(const TaggedCorpus &corpus, std::size_t target_vocab_size,
                      char32_t marker = kMarker) {
  return learn(count_words(corpus), target_vocab_size, marker);
}

inline std::vector<std::string> segment_word(const BpeModel &model, std::string_view word) {
  std::vector<std::string> out;
  for (const auto &s : model.segment_symbols(unicode::decode(word))) out.push_back(unicode::encode(s));
  return out;
}

struct Segmentation {
  std::vector<std::vector<std::string>> pieces;  // per token
  std::vector<std::size_t> first_index;          // into the flattened sequence

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto &p : pieces) n += p.size();
    return n;
  }

  std::vector<std::string> flattened() const {
    std::vector<std::string> out;
    for (const auto &p : pieces) out.insert(out.end(), p.begin(), p.end());
    return out;
  }
};

inline Segmentation segment(const BpeModel &model, const std::vector<std::string> &tokens) {
  Segmentation seg;
  std::size_t offset = 0;
  for (const auto &tok : tokens) {
    auto parts = segment_word(model, tok);
    seg.first_index.push_back(offset);
    offset += parts.size();
    seg.pieces.push_back(std::move(parts));
  }
  return seg;
}

inline Segmentation segment(const BpeModel &model, const Sentence &sentence) {
  std::vector<std::string> tokens;
  tokens.reserve(sentence.size());
  for (const auto &t : sentence.tokens) tokens.push_back(t.text);
  return segment(model, tokens);
}

/// Inverse of segment_word: concatenate and drop the leading marker.
inline std::string join_pieces(const std::vector<std::string> &pieces, char32_t marker = kMarker) {
  std::string joined;
  for (const auto &p : pieces) joined += p;
  const std::string m = unicode::encode(marker);
  if (joined.compare(0, m.size(), m) == 0) joined.erase(0, m.size());
  return joined;
}

inline BpeModel truncate(const BpeModel &model, std::size_t k) {
  if (k > model.merges().size())
    throw RangeError("cannot keep " + std::to_string(k) + " merges of " +
                     std::to_string(model.merges().size()));
  std::vector<Merge> kept(model.merges().begin(),
                          model.merges().begin() + static_cast<std::ptrdiff_t>(k));
  return BpeModel(model.alphabet(), std::move(kept), model.marker());
}

/// Truncates to the given vocabulary size (alphabet + merges), clamped to
/// the merges the model has.
inline BpeModel truncate_to_vocab(const BpeModel &model, std::size_t vocab_size) {
  const std::size_t a = model.alphabet().size();
  const std::size_t k = vocab_size <= a ? 0 : std::min(vocab_size - a, model.merges().size());
  return truncate(model, k);
}

/// Histogram of symbol lengths in code points, marker excluded (so the bare
/// marker has length 0). Counts sum to vocab_size().
inline std::map<std::size_t, std::size_t> symbol_length_stats(const BpeModel &model) {
  std::map<std::size_t, std::size_t> hist;
  for (const auto &s : model.vocab()) {
    const auto n = static_cast<std::size_t>(
        std::count_if(s.begin(), s.end(), [&](char32_t c) { return c != model.marker(); }));
    ++hist[n];
  }
  return hist;
}

// Merge-list file:
//   #bpe v1 marker=▁ alphabet=<N>
//   #alphabet <sym> <sym> ...
//   left right        (one merge per line, rank = order)
inline void save(const BpeModel &model, std::ostream &out) {
  out << "#bpe v1 marker=" << unicode::encode(model.marker())
      << " alphabet=" << model.alphabet().size() << '\n';
  out << "#alphabet";
  for (const auto &s : model.alphabet()) out << ' ' << unicode::encode(s);
  out << '\n';
  for (const auto &[l, r] : model.merges())
    out << unicode::encode(l) << ' ' << unicode::encode(r) << '\n';
}

inline void save(const BpeModel &model, const std::string &path) {
  auto out = open_output(path);
  save(model, out);
}

inline BpeModel load(std::istream &in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("missing BPE header", 1);
  strip_cr(line);
  const std::string prefix = "#bpe v1 marker=";
  if (line.compare(0, prefix.size(), prefix) != 0) throw ParseError("bad BPE header", 1);
  const auto space = line.find(" alphabet=", prefix.size());
  if (space == std::string::npos) throw ParseError("bad BPE header", 1);
  const auto marker_text = unicode::decode(line.substr(prefix.size(), space - prefix.size()));
  if (marker_text.size() != 1) throw ParseError("marker must be one character", 1);
  std::size_t alphabet_size = 0;
  try {
    alphabet_size = std::stoul(line.substr(space + 10));
  } catch (const std::exception &) {
    throw ParseError("bad alphabet size", 1);
  }

  if (!std::getline(in, line)) throw ParseError("missing #alphabet line", 2);
  ++line_no;
  strip_cr(line);
  const std::string alpha_prefix = "#alphabet";
  if (line.compare(0, alpha_prefix.size(), alpha_prefix) != 0)
    throw ParseError("missing #alphabet line", line_no);
  std::vector<Symbol> alphabet;
  std::istringstream alpha(line.substr(alpha_prefix.size()));
  for (std::string s; alpha >> s;) alphabet.push_back(unicode::decode(s));
  if (alphabet.size() != alphabet_size)
    throw ParseError("alphabet has " + std::to_string(alphabet.size()) + " symbols, header says " +
                         std::to_string(alphabet_size),
                     line_no);

  std::vector<Merge> merges;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    const auto sp = line.find(' ');
    if (sp == std::string::npos || sp == 0 || sp + 1 == line.size() ||
        line.find(' ', sp + 1) != std::string::npos)
      throw ParseError("expected 'left right'", line_no);
    merges.emplace_back(unicode::decode(line.substr(0, sp)), unicode::decode(line.substr(sp + 1)));
  }
  try {
    return BpeModel(std::move(alphabet), std::move(merges), marker_text[0]);
  } catch (const ConfigError &e) {
    throw ParseError(std::string("inconsistent merge list: ") + e.what());
  }
}

inline BpeModel load(const std::string &path) {
  auto in = open_input(path);
  return load(in);
}

}  // namespace subtag::bpe
