#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "subtag/bpe.hpp"
#include "subtag/corpus.hpp"
#include "subtag/embeddings.hpp"
#include "subtag/error.hpp"
#include "subtag/metrics.hpp"
#include "subtag/nn.hpp"
#include "subtag/random.hpp"
#include "subtag/shapes.hpp"
#include "subtag/unicode.hpp"

namespace subtag::tagger {

using nn::Mat;

enum class EncoderKind { subword_bilstm, char_rnn, shape_rnn, word_lookup };

inline std::string to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::subword_bilstm:
      return "subword_bilstm";
    case EncoderKind::char_rnn:
      return "char_rnn";
    case EncoderKind::shape_rnn:
      return "shape_rnn";
    case EncoderKind::word_lookup:
      return "word_lookup";
  }
  return "?";
}

inline EncoderKind parse_encoder_kind(std::string_view name) {
  for (auto k : {EncoderKind::subword_bilstm, EncoderKind::char_rnn, EncoderKind::shape_rnn,
                 EncoderKind::word_lookup})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown encoder kind '" + std::string(name) + "'");
}

struct EncoderSpec {
  EncoderKind kind = EncoderKind::subword_bilstm;
  std::size_t embedding_dim = 12;
  std::size_t hidden = 32;
  std::size_t layers = 1;
  double dropout = 0.0;

  void validate() const {
    if (embedding_dim < 1) throw ConfigError(to_string(kind) + ": embedding dimension must be >= 1");
    if (hidden < 1) throw ConfigError(to_string(kind) + ": hidden size must be >= 1");
    if (layers < 1) throw ConfigError(to_string(kind) + ": layer count must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError(to_string(kind) + ": dropout must lie in [0,1)");
  }

  bool operator==(const EncoderSpec &) const = default;
};

struct TaggerConfig {
  std::vector<EncoderSpec> encoders;
  std::size_t meta_hidden = 32;
  std::size_t meta_layers = 2;
  double dropout = 0.5;  // meta-LSTM inputs and classifier input
  uint64_t seed = 1;
  std::string profile = "desk";

  void validate() const {
    if (encoders.empty()) throw ConfigError("tagger needs at least one encoder");
    for (const auto &e : encoders) e.validate();
    if (meta_hidden < 1 || meta_layers < 1) throw ConfigError("meta-LSTM sizes must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0,1)");
  }

  bool uses(EncoderKind kind) const {
    return std::any_of(encoders.begin(), encoders.end(), [&](const auto &e) { return e.kind == kind; });
  }
};

struct EncoderSelection {
  bool bpe = true;
  bool chars = false;
  bool shape = false;
  bool word = false;
};

/// Hyper-parameter profiles. "paper" and "paper-multi" carry the published
/// monolingual / multilingual sizes; "desk" and "desk-multi" divide every
/// dimension by 8 for CPU-scale runs.
inline TaggerConfig make_profile(std::string_view profile, Task task, EncoderSelection use,
                                 uint64_t seed = 1) {
  struct Sizes {
    std::size_t bpe_emb, bpe_hidden, char_emb, char_hidden, shape_emb, shape_hidden, word_emb,
        word_hidden, meta_hidden;
    double ner_dropout;
  };
  const Sizes mono{100, 256, 50, 256, 50, 256, 300, 256, 256, 0.5};
  const Sizes multi{300, 1024, 100, 512, 50, 256, 300, 256, 1024, 0.4};
  Sizes s;
  std::size_t divisor = 1;
  if (profile == "paper") {
    s = mono;
  } else if (profile == "paper-multi") {
    s = multi;
  } else if (profile == "desk") {
    s = mono;
    divisor = 8;
  } else if (profile == "desk-multi") {
    s = multi;
    divisor = 8;
  } else {
    throw ConfigError("unknown profile '" + std::string(profile) + "'");
  }
  auto d = [divisor](std::size_t v) { return std::max<std::size_t>(1, v / divisor); };
  const double dropout = task == Task::ner ? s.ner_dropout : 0.2;

  TaggerConfig cfg;
  cfg.profile = std::string(profile);
  cfg.seed = seed;
  cfg.dropout = dropout;
  cfg.meta_hidden = d(s.meta_hidden);
  cfg.meta_layers = 2;
  if (use.bpe)
    cfg.encoders.push_back({EncoderKind::subword_bilstm, d(s.bpe_emb), d(s.bpe_hidden), 2, dropout});
  if (use.word)
    cfg.encoders.push_back({EncoderKind::word_lookup, d(s.word_emb), d(s.word_hidden), 2, dropout});
  if (use.chars)
    cfg.encoders.push_back({EncoderKind::char_rnn, d(s.char_emb), d(s.char_hidden), 1, dropout});
  if (use.shape)
    cfg.encoders.push_back({EncoderKind::shape_rnn, d(s.shape_emb), d(s.shape_hidden), 1, dropout});
  cfg.validate();
  return cfg;
}

/// String inventory with "<unk>" at id 0.
class Vocab {
 public:
  static constexpr int kUnk = 0;

  Vocab() { add("<unk>"); }

  int add(const std::string &item) {
    auto [it, inserted] = index_.emplace(item, static_cast<int>(items_.size()));
    if (inserted) items_.push_back(item);
    return it->second;
  }

  int id(const std::string &item) const {
    auto it = index_.find(item);
    return it == index_.end() ? kUnk : it->second;
  }

  std::size_t size() const noexcept { return items_.size(); }
  const std::vector<std::string> &items() const noexcept { return items_; }

 private:
  std::vector<std::string> items_;
  std::unordered_map<std::string, int> index_;
};

/// An embedding table followed by a stacked BiLSTM. Sequence-level encoders
/// (subwords, words) run over the whole sentence and keep the state of each
/// token's first unit; token-level encoders (characters, shapes) run per
/// token and concatenate the final states of both directions.
struct Encoder {
  EncoderSpec spec;
  Vocab vocab;
  std::size_t embedding = 0;  // dim x |vocab|
  nn::BiLstmStack stack;

  std::size_t width() const { return stack.output_width(); }
  bool token_level() const {
    return spec.kind == EncoderKind::char_rnn || spec.kind == EncoderKind::shape_rnn;
  }
};

/// A sentence converted to unit ids for every encoder of one model.
struct Instance {
  std::vector<std::string> tokens;
  std::vector<std::vector<std::vector<int>>> units;  // [encoder][token][unit]
  std::vector<int> labels;                           // model label ids, -1 = unlabeled
  std::string language;

  std::size_t size() const noexcept { return tokens.size(); }
};

/// Encoder states for the whole sequence are mapped back onto gold tokens by
/// taking the state of each token's first subword.
template <typename T>
Mat<T> align_first_subword(const Mat<T> &states, const std::vector<std::size_t> &first_index) {
  Mat<T> out(states.rows(), static_cast<Eigen::Index>(first_index.size()));
  for (std::size_t t = 0; t < first_index.size(); ++t) {
    if (first_index[t] >= static_cast<std::size_t>(states.cols()))
      throw InternalError("first-subword index " + std::to_string(first_index[t]) +
                          " out of range for " + std::to_string(states.cols()) + " states");
    out.col(static_cast<Eigen::Index>(t)) = states.col(static_cast<Eigen::Index>(first_index[t]));
  }
  return out;
}

inline std::vector<std::size_t> first_unit_indices(const std::vector<std::vector<int>> &units) {
  std::vector<std::size_t> first;
  std::size_t offset = 0;
  for (const auto &u : units) {
    first.push_back(offset);
    offset += u.size();
  }
  return first;
}

template <typename T>
class TaggerModel {
 public:
  TaggerConfig config;
  LabelSet labels;
  std::optional<bpe::BpeModel> subwords;
  std::vector<Encoder> encoders;
  nn::BiLstmStack meta;
  std::size_t out_w = 0;  // K x 2H
  std::size_t out_b = 0;  // K x 1
  nn::ParamStore<T> params;

  /// Lays out parameters for the given vocabularies and initialises them
  /// from config.seed.
  static TaggerModel create(TaggerConfig cfg, LabelSet label_set,
                            std::optional<bpe::BpeModel> bpe_model, std::vector<Vocab> vocabs) {
    cfg.validate();
    if (label_set.empty()) throw ConfigError("label inventory is empty");
    if (vocabs.size() != cfg.encoders.size())
      throw InternalError("one vocabulary per encoder expected");
    if (cfg.uses(EncoderKind::subword_bilstm) && !bpe_model)
      throw ConfigError("subword encoder requires a BPE model");
    TaggerModel m;
    m.config = std::move(cfg);
    m.labels = std::move(label_set);
    m.subwords = std::move(bpe_model);
    std::size_t meta_in = 0;
    for (std::size_t e = 0; e < m.config.encoders.size(); ++e) {
      Encoder enc;
      enc.spec = m.config.encoders[e];
      enc.vocab = std::move(vocabs[e]);
      const std::string name = "enc" + std::to_string(e) + "." + to_string(enc.spec.kind);
      enc.embedding = m.params.add(name + ".emb", static_cast<Eigen::Index>(enc.spec.embedding_dim),
                                   static_cast<Eigen::Index>(enc.vocab.size()));
      enc.stack = nn::BiLstmStack::create(m.params, name + ".lstm", enc.spec.embedding_dim,
                                          enc.spec.hidden, enc.spec.layers, enc.spec.dropout);
      meta_in += enc.width();
      m.encoders.push_back(std::move(enc));
    }
    m.meta = nn::BiLstmStack::create(m.params, "meta", meta_in, m.config.meta_hidden,
                                     m.config.meta_layers, m.config.dropout);
    const auto k = static_cast<Eigen::Index>(m.labels.size());
    m.out_w = m.params.add("out.W", k, static_cast<Eigen::Index>(m.meta.output_width()));
    m.out_b = m.params.add("out.b", k, 1);
    m.initialize();
    return m;
  }

  void initialize() {
    Rng rng(config.seed);
    for (const auto &enc : encoders) {
      nn::init_fan_in(params.values[enc.embedding], enc.spec.embedding_dim, rng);
      enc.stack.initialize(params, rng);
    }
    meta.initialize(params, rng);
    nn::init_fan_in(params.values[out_w], meta.output_width(), rng);
    params.values[out_b].setZero();
  }

  std::size_t representation_width() const {
    std::size_t w = 0;
    for (const auto &e : encoders) w += e.width();
    return w;
  }

  /// Converts tokens into unit ids for every encoder.
  Instance prepare(const std::vector<std::string> &tokens,
                   std::unordered_map<std::string, std::vector<int>> *subword_cache = nullptr) const {
    if (tokens.empty()) throw DataError("cannot tag an empty sentence");
    Instance inst;
    inst.tokens = tokens;
    inst.labels.assign(tokens.size(), -1);
    for (const auto &enc : encoders) {
      std::vector<std::vector<int>> units;
      units.reserve(tokens.size());
      for (const auto &tok : tokens) units.push_back(token_units(enc, tok, subword_cache));
      inst.units.push_back(std::move(units));
    }
    return inst;
  }

  Instance prepare(const Sentence &sentence, const LabelSet &source_labels,
                   std::unordered_map<std::string, std::vector<int>> *cache = nullptr) const {
    std::vector<std::string> tokens;
    for (const auto &t : sentence.tokens) tokens.push_back(t.text);
    Instance inst = prepare(tokens, cache);
    for (std::size_t i = 0; i < sentence.size(); ++i) {
      const auto &label = sentence.tokens[i].label;
      if (!label) continue;
      const auto id = labels.find(source_labels.name(*label));
      if (!id)
        throw ConfigError("label '" + source_labels.name(*label) + "' is not in the model's inventory");
      inst.labels[i] = *id;
    }
    return inst;
  }

  std::vector<Instance> prepare(const TaggedCorpus &corpus) const {
    std::unordered_map<std::string, std::vector<int>> cache;
    std::vector<Instance> out;
    out.reserve(corpus.size());
    for (const auto &s : corpus.sentences) {
      out.push_back(prepare(s, corpus.tagset, &cache));
      out.back().language = corpus.language;
    }
    return out;
  }

  template <typename U>
  TaggerModel<U> cast() const {
    TaggerModel<U> m;
    m.config = config;
    m.labels = labels;
    m.subwords = subwords;
    m.encoders = encoders;
    m.meta = meta;
    m.out_w = out_w;
    m.out_b = out_b;
    m.params = params.template cast<U>();
    return m;
  }

 private:
  std::vector<int> token_units(const Encoder &enc, const std::string &tok,
                               std::unordered_map<std::string, std::vector<int>> *cache) const {
    std::vector<int> ids;
    switch (enc.spec.kind) {
      case EncoderKind::subword_bilstm: {
        if (cache) {
          auto it = cache->find(tok);
          if (it != cache->end()) return it->second;
        }
        for (const auto &piece : bpe::segment_word(*subwords, tok)) ids.push_back(enc.vocab.id(piece));
        if (cache) cache->emplace(tok, ids);
        break;
      }
      case EncoderKind::char_rnn:
        for (char32_t c : unicode::decode(tok)) ids.push_back(enc.vocab.id(unicode::encode(c)));
        break;
      case EncoderKind::shape_rnn:
        for (char32_t c : unicode::decode(shapes::word_shape(tok)))
          ids.push_back(enc.vocab.id(unicode::encode(c)));
        break;
      case EncoderKind::word_lookup:
        ids.push_back(enc.vocab.id(tok));
        break;
    }
    return ids;
  }
};

/// Vocabulary of one encoder, collected from the given corpora.
inline Vocab build_vocab(EncoderKind kind, const std::vector<const TaggedCorpus *> &corpora,
                         const std::optional<bpe::BpeModel> &bpe_model) {
  Vocab v;
  if (kind == EncoderKind::subword_bilstm) {
    for (const auto &s : bpe_model->vocab()) v.add(unicode::encode(s));
    return v;
  }
  std::map<std::string, bool> items;
  for (const auto *c : corpora)
    for (const auto &s : c->sentences)
      for (const auto &t : s.tokens) {
        if (kind == EncoderKind::word_lookup) {
          items[t.text] = true;
        } else {
          const std::string text = kind == EncoderKind::shape_rnn ? shapes::word_shape(t.text) : t.text;
          for (char32_t ch : unicode::decode(text)) items[unicode::encode(ch)] = true;
        }
      }
  for (const auto &[item, _] : items) v.add(item);
  return v;
}

/// Builds a model whose vocabularies cover the given corpora and whose label
/// inventory is the union of their tag sets. Word-lookup embeddings start
/// from ngram composition and subword embeddings from pretrained vectors
/// when those are supplied with a matching dimension.
template <typename T>
TaggerModel<T> build_tagger(const TaggerConfig &cfg, const std::vector<const TaggedCorpus *> &corpora,
                            std::optional<bpe::BpeModel> bpe_model,
                            const embeddings::NgramInventory *ngrams = nullptr,
                            const embeddings::EmbeddingTable *subword_vectors = nullptr) {
  if (corpora.empty()) throw EmptyCorpusError("no corpora to build a tagger from");
  std::vector<std::string> names;
  for (const auto *c : corpora) names.insert(names.end(), c->tagset.names().begin(), c->tagset.names().end());
  std::vector<Vocab> vocabs;
  for (const auto &e : cfg.encoders) vocabs.push_back(build_vocab(e.kind, corpora, bpe_model));
  auto model = TaggerModel<T>::create(cfg, LabelSet(names), std::move(bpe_model), std::move(vocabs));
  for (const auto &enc : model.encoders) {
    auto &emb = model.params.values[enc.embedding];
    if (enc.spec.kind == EncoderKind::word_lookup && ngrams) {
      if (ngrams->dim() != enc.spec.embedding_dim)
        throw ConfigError("ngram inventory dimension does not match the word encoder");
      for (std::size_t i = 1; i < enc.vocab.size(); ++i) {
        const auto v = embeddings::compose_ngram_word(*ngrams, enc.vocab.items()[i]);
        for (std::size_t k = 0; k < v.size(); ++k)
          emb(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = static_cast<T>(v[k]);
      }
    }
    if (enc.spec.kind == EncoderKind::subword_bilstm && subword_vectors) {
      if (subword_vectors->dim() != enc.spec.embedding_dim)
        throw ConfigError("pretrained subword vectors do not match the subword encoder dimension");
      for (std::size_t i = 1; i < enc.vocab.size(); ++i) {
        const auto &sym = enc.vocab.items()[i];
        if (!subword_vectors->contains(sym)) continue;
        const auto v = subword_vectors->vector(sym);
        for (std::size_t k = 0; k < v.size(); ++k)
          emb(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) = static_cast<T>(v[k]);
      }
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <typename T>
struct EncoderCache {
  std::vector<int> ids;                    // sequence-level: flattened unit ids
  std::vector<std::size_t> first;          // sequence-level: first unit per token
  nn::BiLstmCache<T> sequence;             // sequence-level
  std::vector<std::vector<int>> token_ids; // token-level
  std::vector<nn::BiLstmCache<T>> tokens;  // token-level
};

template <typename T>
Mat<T> gather_columns(const Mat<T> &table, const std::vector<int> &ids) {
  Mat<T> out(table.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = table.col(ids[i]);
  return out;
}

template <typename T>
Mat<T> encoder_forward(const nn::ParamStore<T> &params, const Encoder &enc,
                       const std::vector<std::vector<int>> &units, const nn::PassContext &ctx,
                       EncoderCache<T> &cache) {
  const auto &table = params.values[enc.embedding];
  const auto n_tokens = static_cast<Eigen::Index>(units.size());
  if (!enc.token_level()) {
    cache.ids.clear();
    for (const auto &u : units) cache.ids.insert(cache.ids.end(), u.begin(), u.end());
    cache.first = first_unit_indices(units);
    const Mat<T> states = nn::bilstm_forward(params, enc.stack, gather_columns(table, cache.ids), ctx, cache.sequence);
    return align_first_subword(states, cache.first);
  }
  const auto H = static_cast<Eigen::Index>(enc.stack.forward.back().hidden);
  Mat<T> out(2 * H, n_tokens);
  cache.token_ids = units;
  cache.tokens.resize(units.size());
  for (Eigen::Index t = 0; t < n_tokens; ++t) {
    const auto &ids = units[static_cast<std::size_t>(t)];
    const Mat<T> states =
        nn::bilstm_forward(params, enc.stack, gather_columns(table, ids), ctx, cache.tokens[static_cast<std::size_t>(t)]);
    out.col(t).head(H) = states.col(states.cols() - 1).head(H);
    out.col(t).tail(H) = states.col(0).tail(H);
  }
  return out;
}

template <typename T>
void encoder_backward(const nn::ParamStore<T> &params, nn::Gradients<T> &grads, const Encoder &enc,
                      const EncoderCache<T> &cache, const Mat<T> &d_out) {
  auto &g_table = grads[enc.embedding];
  if (!enc.token_level()) {
    Mat<T> d_states = Mat<T>::Zero(static_cast<Eigen::Index>(enc.width()),
                                   static_cast<Eigen::Index>(cache.ids.size()));
    for (std::size_t t = 0; t < cache.first.size(); ++t)
      d_states.col(static_cast<Eigen::Index>(cache.first[t])) += d_out.col(static_cast<Eigen::Index>(t));
    const Mat<T> d_x = nn::bilstm_backward(params, grads, enc.stack, cache.sequence, d_states);
    for (std::size_t i = 0; i < cache.ids.size(); ++i) g_table.col(cache.ids[i]) += d_x.col(static_cast<Eigen::Index>(i));
    return;
  }
  const auto H = static_cast<Eigen::Index>(enc.stack.forward.back().hidden);
  for (std::size_t t = 0; t < cache.token_ids.size(); ++t) {
    const auto &ids = cache.token_ids[t];
    const auto L = static_cast<Eigen::Index>(ids.size());
    Mat<T> d_states = Mat<T>::Zero(2 * H, L);
    d_states.col(L - 1).head(H) = d_out.col(static_cast<Eigen::Index>(t)).head(H);
    d_states.col(0).tail(H) += d_out.col(static_cast<Eigen::Index>(t)).tail(H);
    const Mat<T> d_x = nn::bilstm_backward(params, grads, enc.stack, cache.tokens[t], d_states);
    for (std::size_t i = 0; i < ids.size(); ++i) g_table.col(ids[i]) += d_x.col(static_cast<Eigen::Index>(i));
  }
}

template <typename T>
struct ForwardCache {
  std::vector<EncoderCache<T>> encoders;
  nn::BiLstmCache<T> meta;
  Mat<T> meta_out;   // classifier input after dropout
  Mat<T> out_mask;   // empty when no dropout
  Eigen::MatrixXd probs;
};

template <typename T>
void check_finite(const Mat<T> &m, const std::string &layer) {
  if (!m.allFinite()) throw NumericError("non-finite activation in " + layer);
}

/// Per-encoder token representations, each width_e x tokens.
template <typename T>
std::vector<Mat<T>> encode(const TaggerModel<T> &model, const Instance &inst,
                           const nn::PassContext &ctx = {},
                           std::vector<EncoderCache<T>> *caches = nullptr) {
  std::vector<EncoderCache<T>> local;
  auto &cs = caches ? *caches : local;
  cs.resize(model.encoders.size());
  std::vector<Mat<T>> reps;
  for (std::size_t e = 0; e < model.encoders.size(); ++e) {
    reps.push_back(encoder_forward(model.params, model.encoders[e], inst.units[e], ctx, cs[e]));
    check_finite(reps.back(), "encoder " + std::to_string(e) + " (" + to_string(model.encoders[e].spec.kind) + ")");
  }
  return reps;
}

/// Softmax over labels for every token (labels x tokens, double precision).
template <typename T>
Eigen::MatrixXd forward(const TaggerModel<T> &model, const Instance &inst, const nn::PassContext &ctx = {},
                        ForwardCache<T> *cache = nullptr) {
  ForwardCache<T> local;
  auto &c = cache ? *cache : local;
  const auto reps = encode(model, inst, ctx, &c.encoders);
  const auto n = static_cast<Eigen::Index>(inst.size());
  Mat<T> joined(static_cast<Eigen::Index>(model.representation_width()), n);
  Eigen::Index row = 0;
  for (const auto &r : reps) {
    joined.middleRows(row, r.rows()) = r;
    row += r.rows();
  }
  c.meta_out = nn::bilstm_forward(model.params, model.meta, joined, ctx, c.meta);
  check_finite(c.meta_out, "meta-LSTM");
  c.out_mask.resize(0, 0);
  if (ctx.dropout_active(model.config.dropout)) {
    c.out_mask = nn::dropout_mask<T>(c.meta_out.rows(), c.meta_out.cols(), model.config.dropout, *ctx.rng);
    c.meta_out = c.meta_out.cwiseProduct(c.out_mask);
  }
  Mat<T> logits = model.params.values[model.out_w] * c.meta_out;
  logits.colwise() += model.params.values[model.out_b].col(0);
  check_finite(logits, "classifier");
  Eigen::MatrixXd z = logits.template cast<double>();
  for (Eigen::Index t = 0; t < n; ++t) {
    auto col = z.col(t);
    col.array() -= col.maxCoeff();
    col = col.array().exp().matrix();
    col /= col.sum();
  }
  c.probs = z;
  return z;
}

inline constexpr double kProbabilityClamp = 1e-9;

/// Mean negative log-likelihood of the gold labels; probabilities are
/// clamped to [1e-9, 1 - 1e-9].
inline double cross_entropy(const std::vector<Eigen::MatrixXd> &probs,
                            const std::vector<std::vector<int>> &gold) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < probs.size(); ++s)
    for (std::size_t t = 0; t < gold[s].size(); ++t) {
      const double p = std::clamp(probs[s](gold[s][t], static_cast<Eigen::Index>(t)), kProbabilityClamp,
                                  1.0 - kProbabilityClamp);
      total -= std::log(p);
      ++count;
    }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

template <typename T>
struct LossGrad {
  double loss = 0.0;
  std::size_t tokens = 0;
  nn::Gradients<T> grads;
};

/// Mean token cross-entropy over the batch and its gradient with respect to
/// every parameter.
template <typename T>
LossGrad<T> loss_and_gradients(const TaggerModel<T> &model, const std::vector<const Instance *> &batch,
                               const nn::PassContext &ctx = {}) {
  LossGrad<T> out;
  out.grads = model.params.zeros_like();
  for (const auto *inst : batch)
    for (std::size_t t = 0; t < inst->size(); ++t)
      if (inst->labels[t] < 0) throw DataError("token '" + inst->tokens[t] + "' has no label");
  for (const auto *inst : batch) out.tokens += inst->size();
  if (out.tokens == 0) return out;
  const double scale = 1.0 / static_cast<double>(out.tokens);
  double total = 0.0;
  for (const auto *inst : batch) {
    ForwardCache<T> cache;
    const auto probs = forward(model, *inst, ctx, &cache);
    const auto n = static_cast<Eigen::Index>(inst->size());
    Eigen::MatrixXd d_logits = probs;
    for (Eigen::Index t = 0; t < n; ++t) {
      const int y = inst->labels[static_cast<std::size_t>(t)];
      total -= std::log(std::clamp(probs(y, t), kProbabilityClamp, 1.0 - kProbabilityClamp));
      d_logits(y, t) -= 1.0;
    }
    const Mat<T> dz = (d_logits * scale).template cast<T>();
    out.grads[model.out_w].noalias() += dz * cache.meta_out.transpose();
    out.grads[model.out_b] += dz.rowwise().sum();
    Mat<T> d_meta = model.params.values[model.out_w].transpose() * dz;
    if (cache.out_mask.size() > 0) d_meta = d_meta.cwiseProduct(cache.out_mask);
    const Mat<T> d_joined = nn::bilstm_backward(model.params, out.grads, model.meta, cache.meta, d_meta);
    Eigen::Index row = 0;
    for (std::size_t e = 0; e < model.encoders.size(); ++e) {
      const auto w = static_cast<Eigen::Index>(model.encoders[e].width());
      encoder_backward(model.params, out.grads, model.encoders[e], cache.encoders[e],
                       Mat<T>(d_joined.middleRows(row, w)));
      row += w;
    }
  }
  out.loss = total * scale;
  return out;
}

template <typename T>
std::vector<int> argmax_labels(const Eigen::MatrixXd &probs) {
  std::vector<int> out;
  for (Eigen::Index t = 0; t < probs.cols(); ++t) {
    Eigen::Index best;
    probs.col(t).maxCoeff(&best);
    out.push_back(static_cast<int>(best));
  }
  return out;
}

/// Greedy per-token decoding.
template <typename T>
std::vector<std::string> predict(const TaggerModel<T> &model, const Instance &inst) {
  std::vector<std::string> out;
  for (int id : argmax_labels<T>(forward(model, inst))) out.push_back(model.labels.name(id));
  return out;
}

template <typename T>
metrics::LabelSequences predict(const TaggerModel<T> &model, const std::vector<Instance> &instances) {
  metrics::LabelSequences out;
  out.reserve(instances.size());
  for (const auto &inst : instances) out.push_back(predict(model, inst));
  return out;
}

template <typename T>
metrics::LabelSequences gold_labels(const TaggerModel<T> &model, const std::vector<Instance> &instances) {
  metrics::LabelSequences out;
  for (const auto &inst : instances) {
    std::vector<std::string> seq;
    for (int id : inst.labels) {
      if (id < 0) throw DataError("unlabeled token in evaluation data");
      seq.push_back(model.labels.name(id));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

template <typename T>
double evaluate(const TaggerModel<T> &model, const std::vector<Instance> &instances, Task task) {
  return metrics::task_score(task, gold_labels(model, instances), predict(model, instances));
}

// ---------------------------------------------------------------------------
// Training

struct TrainSchedule {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double clip_norm = 5.0;
  std::size_t patience = 5;
  uint64_t seed = 1;
  bool record_batches = true;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_score = 0.0;
};

template <typename T>
struct TrainResult {
  TaggerModel<T> model;  // best dev checkpoint
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 0 = no epoch ran
  double best_dev = -1.0;
  std::size_t steps = 0;
  std::vector<std::map<std::string, std::size_t>> batch_languages;
};

/// Mini-batch Adam with global-norm clipping and early stopping on the dev
/// score. Returns the checkpoint of the best epoch.
template <typename T>
TrainResult<T> train(const TaggerModel<T> &initial, const std::vector<Instance> &train_set,
                     const std::vector<Instance> &dev_set, Task task, const TrainSchedule &schedule) {
  TrainResult<T> result{initial, {}, 0, -1.0, 0, {}};
  if (schedule.epochs == 0) return result;
  if (train_set.empty()) throw EmptyCorpusError("training set is empty");
  if (dev_set.empty()) throw EmptyCorpusError("development set is empty");
  if (schedule.batch_size < 1) throw ConfigError("batch size must be at least 1");

  TaggerModel<T> model = initial;
  nn::Adam<T> adam(model.params, nn::AdamConfig{schedule.learning_rate});
  Rng rng(schedule.seed);
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= schedule.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      std::vector<const Instance *> batch;
      std::map<std::string, std::size_t> langs;
      for (std::size_t i = start; i < std::min(order.size(), start + schedule.batch_size); ++i) {
        batch.push_back(&train_set[order[i]]);
        ++langs[train_set[order[i]].language];
      }
      nn::PassContext ctx{true, &rng};
      auto lg = loss_and_gradients(model, batch, ctx);
      if (!std::isfinite(lg.loss))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches + 1));
      nn::clip_gradients(lg.grads, schedule.clip_norm);
      adam.step(model.params, lg.grads);
      loss_sum += lg.loss;
      ++batches;
      ++result.steps;
      if (schedule.record_batches) result.batch_languages.push_back(std::move(langs));
    }
    const double dev = evaluate(model, dev_set, task);
    result.history.push_back({epoch, loss_sum / static_cast<double>(batches), dev});
    if (dev > result.best_dev) {
      result.best_dev = dev;
      result.best_epoch = epoch;
      result.model = model;
      since_best = 0;
    } else if (++since_best >= schedule.patience) {
      break;
    }
  }
  return result;
}

template <typename T>
TrainResult<T> train(const TaggerModel<T> &initial, const TaggedCorpus &train_corpus,
                     const TaggedCorpus &dev_corpus, const TrainSchedule &schedule) {
  if (train_corpus.empty() || dev_corpus.empty()) throw EmptyCorpusError("training needs non-empty corpora");
  return train(initial, initial.prepare(train_corpus), initial.prepare(dev_corpus), train_corpus.task, schedule);
}

/// Every label of the corpus must exist in the model's inventory.
template <typename T>
void check_label_compatibility(const TaggerModel<T> &model, const TaggedCorpus &corpus) {
  for (const auto &name : corpus.tagset.names())
    if (!model.labels.contains(name))
      throw ConfigError("label '" + name + "' of corpus '" + corpus.language +
                        "' is not in the model's label inventory");
}

/// Continues training all parameters on one language's data.
template <typename T>
TrainResult<T> finetune(const TaggerModel<T> &model, const TaggedCorpus &target_train,
                        const TaggedCorpus &target_dev, const TrainSchedule &schedule) {
  check_label_compatibility(model, target_train);
  check_label_compatibility(model, target_dev);
  return train(model, target_train, target_dev, schedule);
}

// ---------------------------------------------------------------------------
// Serialization: "SUBTAG-TAGGER v1" line, JSON metadata length line, JSON
// metadata, then every tensor as little-endian float32 in column-major order.

inline constexpr std::string_view kModelMagic = "SUBTAG-TAGGER";
inline constexpr int kModelVersion = 1;

namespace detail {

inline nlohmann::json config_to_json(const TaggerConfig &cfg) {
  nlohmann::json encs = nlohmann::json::array();
  for (const auto &e : cfg.encoders)
    encs.push_back({{"kind", to_string(e.kind)},
                    {"embedding_dim", e.embedding_dim},
                    {"hidden", e.hidden},
                    {"layers", e.layers},
                    {"dropout", e.dropout}});
  return {{"encoders", encs},
          {"meta_hidden", cfg.meta_hidden},
          {"meta_layers", cfg.meta_layers},
          {"dropout", cfg.dropout},
          {"seed", cfg.seed},
          {"profile", cfg.profile}};
}

inline TaggerConfig config_from_json(const nlohmann::json &j) {
  TaggerConfig cfg;
  for (const auto &e : j.at("encoders"))
    cfg.encoders.push_back({parse_encoder_kind(e.at("kind").get<std::string>()),
                            e.at("embedding_dim").get<std::size_t>(), e.at("hidden").get<std::size_t>(),
                            e.at("layers").get<std::size_t>(), e.at("dropout").get<double>()});
  cfg.meta_hidden = j.at("meta_hidden").get<std::size_t>();
  cfg.meta_layers = j.at("meta_layers").get<std::size_t>();
  cfg.dropout = j.at("dropout").get<double>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.profile = j.at("profile").get<std::string>();
  return cfg;
}

inline void put_f32(std::ostream &out, float v) {
  const auto bits = std::bit_cast<uint32_t>(v);
  const char bytes[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                         static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
  out.write(bytes, 4);
}

inline float get_f32(std::istream &in) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char *>(bytes), 4)) throw LoadError("truncated tensor data");
  const uint32_t bits = static_cast<uint32_t>(bytes[0]) | (static_cast<uint32_t>(bytes[1]) << 8) |
                        (static_cast<uint32_t>(bytes[2]) << 16) | (static_cast<uint32_t>(bytes[3]) << 24);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

template <typename T>
void save(const TaggerModel<T> &model, std::ostream &out) {
  nlohmann::json meta;
  meta["config"] = detail::config_to_json(model.config);
  meta["labels"] = model.labels.names();
  if (model.subwords) {
    std::vector<std::string> alphabet;
    for (const auto &s : model.subwords->alphabet()) alphabet.push_back(unicode::encode(s));
    nlohmann::json merges = nlohmann::json::array();
    for (const auto &[l, r] : model.subwords->merges())
      merges.push_back({unicode::encode(l), unicode::encode(r)});
    meta["bpe"] = {{"marker", unicode::encode(model.subwords->marker())}, {"alphabet", alphabet}, {"merges", merges}};
  } else {
    meta["bpe"] = nullptr;
  }
  nlohmann::json vocabs = nlohmann::json::array();
  for (const auto &e : model.encoders) vocabs.push_back(e.vocab.items());
  meta["vocabs"] = vocabs;
  nlohmann::json tensors = nlohmann::json::array();
  for (std::size_t p = 0; p < model.params.size(); ++p)
    tensors.push_back({{"name", model.params.names[p]},
                       {"rows", model.params.values[p].rows()},
                       {"cols", model.params.values[p].cols()}});
  meta["tensors"] = tensors;
  const std::string text = meta.dump();
  out << kModelMagic << " v" << kModelVersion << '\n' << text.size() << '\n' << text;
  for (const auto &v : model.params.values)
    for (Eigen::Index i = 0; i < v.size(); ++i) detail::put_f32(out, static_cast<float>(v.data()[i]));
  if (!out) throw IoError("failed to write model");
}

template <typename T>
void save(const TaggerModel<T> &model, const std::string &path) {
  auto out = open_output(path);
  save(model, out);
}

template <typename T>
TaggerModel<T> load(std::istream &in) {
  std::string line;
  if (!std::getline(in, line)) throw LoadError("empty model file");
  const std::string expected = std::string(kModelMagic) + " v" + std::to_string(kModelVersion);
  if (line.compare(0, kModelMagic.size(), kModelMagic) != 0) throw LoadError("not a tagger model file");
  if (line != expected) throw LoadError("unsupported model version '" + line + "'");
  if (!std::getline(in, line)) throw LoadError("truncated header");
  std::size_t length = 0;
  try {
    length = std::stoul(line);
  } catch (const std::exception &) {
    throw LoadError("corrupted header");
  }
  if (length > (std::size_t{1} << 31)) throw LoadError("corrupted header");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw LoadError("truncated metadata");
  try {
    const auto meta = nlohmann::json::parse(text);
    TaggerConfig cfg = detail::config_from_json(meta.at("config"));
    LabelSet labels(meta.at("labels").get<std::vector<std::string>>());
    std::optional<bpe::BpeModel> subwords;
    if (!meta.at("bpe").is_null()) {
      const auto &b = meta.at("bpe");
      std::vector<bpe::Symbol> alphabet;
      for (const auto &s : b.at("alphabet")) alphabet.push_back(unicode::decode(s.get<std::string>()));
      std::vector<bpe::Merge> merges;
      for (const auto &m : b.at("merges"))
        merges.emplace_back(unicode::decode(m.at(0).get<std::string>()), unicode::decode(m.at(1).get<std::string>()));
      const auto marker = unicode::decode(b.at("marker").get<std::string>());
      if (marker.size() != 1) throw LoadError("bad BPE marker");
      subwords = bpe::BpeModel(std::move(alphabet), std::move(merges), marker[0]);
    }
    std::vector<Vocab> vocabs;
    for (const auto &items : meta.at("vocabs")) {
      Vocab v;
      const auto list = items.get<std::vector<std::string>>();
      if (list.empty() || list[0] != "<unk>") throw LoadError("vocabulary must start with <unk>");
      for (std::size_t i = 1; i < list.size(); ++i) v.add(list[i]);
      vocabs.push_back(std::move(v));
    }
    auto model = TaggerModel<T>::create(cfg, labels, std::move(subwords), std::move(vocabs));
    const auto &tensors = meta.at("tensors");
    if (tensors.size() != model.params.size()) throw LoadError("tensor count mismatch");
    for (std::size_t p = 0; p < model.params.size(); ++p) {
      const auto &t = tensors[p];
      auto &v = model.params.values[p];
      if (t.at("name").get<std::string>() != model.params.names[p] || t.at("rows").get<Eigen::Index>() != v.rows() ||
          t.at("cols").get<Eigen::Index>() != v.cols())
        throw LoadError("tensor layout mismatch at '" + model.params.names[p] + "'");
    }
    for (auto &v : model.params.values)
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(detail::get_f32(in));
    return model;
  } catch (const nlohmann::json::exception &e) {
    throw LoadError(std::string("corrupted metadata: ") + e.what());
  } catch (const ConfigError &e) {
    throw LoadError(std::string("inconsistent model: ") + e.what());
  }
}

template <typename T>
TaggerModel<T> load(const std::string &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return load<T>(in);
}

}  // namespace subtag::tagger
