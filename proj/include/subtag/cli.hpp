#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "subtag/bpe.hpp"
#include "subtag/corpus.hpp"
#include "subtag/embeddings.hpp"
#include "subtag/error.hpp"
#include "subtag/metrics.hpp"
#include "subtag/protocol.hpp"
#include "subtag/shapes.hpp"
#include "subtag/tagger.hpp"
#include "subtag/unicode.hpp"

namespace subtag::cli {

inline constexpr std::string_view kVersion = "1.0.0";

inline std::string version_text() {
  std::ostringstream out;
  out << "subtag " << kVersion << " (bpe merges v1, tagger container v" << tagger::kModelVersion
      << ", embeddings text v1)";
  return out.str();
}

namespace detail {

struct Streams {
  std::istream &in;
  std::ostream &out;
  std::ostream &err;
  bool verbose = false;

  void log(const std::string &line) const {
    if (verbose) err << line << '\n';
  }
};

inline TaggedCorpus read_labeled(const std::string &path, const std::string &format, Task task,
                                 const std::string &language = {}) {
  if (format == "conllu") return read_conllu_pos(path, language);
  return read_conll_tsv(path, task, language);
}

inline void add_format(CLI::App *sub, std::string &format) {
  sub->add_option("--format", format, "Labeled data format")->check(CLI::IsMember({"tsv", "conllu"}));
}

inline void add_task(CLI::App *sub, std::string &task) {
  sub->add_option("--task", task, "Tagging task")->check(CLI::IsMember({"ner", "pos"}));
}

struct ScheduleFlags {
  tagger::TrainSchedule schedule;

  void add(CLI::App *sub) {
    sub->add_option("--epochs", schedule.epochs, "Maximum training epochs");
    sub->add_option("--batch-size", schedule.batch_size, "Sentences per mini-batch")->check(CLI::PositiveNumber);
    sub->add_option("--learning-rate", schedule.learning_rate, "Adam step size")->check(CLI::PositiveNumber);
    sub->add_option("--clip-norm", schedule.clip_norm, "Global gradient-norm clip")->check(CLI::PositiveNumber);
    sub->add_option("--patience", schedule.patience, "Epochs without dev improvement before stopping");
    sub->add_option("--seed", schedule.seed, "Random seed");
  }
};

inline void log_history(const Streams &io, const std::vector<tagger::EpochRecord> &history) {
  for (const auto &h : history) {
    std::ostringstream line;
    line << "epoch " << h.epoch << " loss " << h.train_loss << " dev " << h.dev_score;
    io.log(line.str());
  }
}

/// Reads token-per-line input (an optional second column is ignored) into
/// sentences separated by blank lines.
inline std::vector<std::vector<std::string>> read_token_lines(std::istream &in) {
  std::vector<std::vector<std::string>> sentences;
  std::vector<std::string> current;
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
    std::string token = line.substr(0, line.find('\t'));
    if (token.empty()) throw ParseError("empty token", line_no);
    if (unicode::contains_space(token)) throw ParseError("token contains whitespace", line_no);
    current.push_back(std::move(token));
  }
  if (!current.empty()) sentences.push_back(std::move(current));
  return sentences;
}

inline std::vector<std::vector<std::string>> segment_paragraphs(const bpe::BpeModel &model,
                                                                const std::vector<std::string> &paragraphs) {
  std::vector<std::vector<std::string>> out;
  for (const auto &p : paragraphs) {
    const auto tokens = unicode::split_whitespace(p);
    if (tokens.empty()) continue;
    out.push_back(bpe::segment(model, tokens).flattened());
  }
  return out;
}

inline protocol::VocabSizeTable read_vocab_table(const std::string &path, protocol::MedianRule rule) {
  auto in = open_input(path);
  protocol::VocabSizeTable table(rule);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    strip_cr(line);
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) cols.push_back(col);
    if (line_no == 1 && cols.size() == 3 && cols[1] == "N_l") continue;
    if (cols.size() != 3) throw ParseError("expected language,N_l,v_l", line_no);
    try {
      std::size_t used_n = 0, used_v = 0;
      const auto n = std::stoull(cols[1], &used_n);
      const auto v = std::stoull(cols[2], &used_v);
      if (used_n != cols[1].size() || used_v != cols[2].size()) throw std::invalid_argument("trailing");
      table.add({cols[0], n, v});
    } catch (const std::exception &) {
      throw ParseError("invalid number", line_no);
    }
  }
  return table;
}

}  // namespace detail

/// Runs one command line. Results go to `out`; diagnostics and errors go to
/// `err` only. Returns the process exit code.
inline int run_cli(int argc, const char *const *argv, std::istream &in, std::ostream &out, std::ostream &err) {
  CLI::App app{"Subword vocabularies, embeddings and neural sequence taggers", "subtag"};
  app.set_version_flag("--version", version_text());
  app.require_subcommand(0, 1);
  app.fallthrough();
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Progress messages on standard error");

  // learn-bpe
  std::size_t vocab_size = 0;
  std::string input, output, model_path;
  std::size_t max_paragraphs = 500000;
  uint64_t seed = 1;
  auto *learn_bpe = app.add_subcommand("learn-bpe", "Learn a BPE merge list from raw text");
  learn_bpe->add_option("--vocab-size", vocab_size, "Target vocabulary size (alphabet + merges)")->required();
  learn_bpe->add_option("--input", input, "Raw text, one paragraph per line")->required();
  learn_bpe->add_option("--output", output, "Merge-list file")->required();
  learn_bpe->add_option("--max-paragraphs", max_paragraphs, "Paragraph sample cap")->check(CLI::PositiveNumber);
  learn_bpe->add_option("--seed", seed, "Sampling seed");

  // segment
  bool use_stdin = false;
  auto *segment_cmd = app.add_subcommand("segment", "Segment whitespace-tokenized text");
  segment_cmd->add_option("--model", model_path, "Merge-list file")->required();
  auto *seg_stdin = segment_cmd->add_flag("--stdin", use_stdin, "Read standard input (default)");
  segment_cmd->add_option("--input", input, "Input file")->excludes(seg_stdin);

  // shape / cap-ratio
  std::vector<std::string> words;
  auto *shape_cmd = app.add_subcommand("shape", "Print word shapes");
  shape_cmd->add_option("--word", words, "Word to map (repeatable)")->required();
  std::optional<double> threshold;
  auto *cap_cmd = app.add_subcommand("cap-ratio", "Capitalization ratio of a text sample");
  cap_cmd->add_option("--input", input, "Text sample")->required();
  cap_cmd->add_option("--threshold", threshold, "Also print the shape-feature decision")
      ->check(CLI::Range(0.0, 1.0));

  // train-embeddings
  embeddings::GloveConfig glove;
  std::size_t window = 10;
  bool no_distance_weighting = false, ngram_mode = false;
  std::size_t min_count = 1;
  auto *emb_cmd = app.add_subcommand("train-embeddings", "Train GloVe vectors over segmented text");
  emb_cmd->add_option("--model", model_path, "Merge-list file (subword mode)");
  emb_cmd->add_option("--input", input, "Raw text, one paragraph per line")->required();
  emb_cmd->add_option("--output", output, "Embedding text file")->required();
  emb_cmd->add_option("--dim", glove.dim, "Vector dimension")->check(CLI::PositiveNumber);
  emb_cmd->add_option("--epochs", glove.epochs, "Passes over the co-occurrence entries");
  emb_cmd->add_option("--seed", glove.seed, "Random seed");
  emb_cmd->add_option("--learning-rate", glove.learning_rate, "AdaGrad step size")->check(CLI::PositiveNumber);
  emb_cmd->add_option("--x-max", glove.x_max, "Weighting cutoff")->check(CLI::PositiveNumber);
  emb_cmd->add_option("--alpha", glove.alpha, "Weighting exponent")->check(CLI::PositiveNumber);
  emb_cmd->add_option("--threads", glove.threads, "Worker threads; >1 is not reproducible")
      ->check(CLI::PositiveNumber);
  emb_cmd->add_option("--window", window, "Context window")->check(CLI::PositiveNumber);
  emb_cmd->add_flag("--no-distance-weighting", no_distance_weighting, "Weight all offsets by 1");
  emb_cmd->add_flag("--ngrams", ngram_mode, "Train word and character-ngram vectors instead of subwords");
  emb_cmd->add_option("--min-count", min_count, "Minimum ngram count (ngram mode)");
  emb_cmd->add_option("--max-paragraphs", max_paragraphs, "Paragraph sample cap")->check(CLI::PositiveNumber);

  // train-tagger / finetune / predict
  std::string train_path, dev_path, format = "tsv", task_name = "ner", profile = "desk";
  std::string ngram_vectors, subword_vectors;
  bool use_bpe = false, use_char = false, use_shape = false, use_word = false;
  detail::ScheduleFlags sched;
  auto *train_cmd = app.add_subcommand("train-tagger", "Train a sequence tagger");
  train_cmd->add_option("--train", train_path, "Training data")->required();
  train_cmd->add_option("--dev", dev_path, "Development data for early stopping")->required();
  train_cmd->add_option("--output", output, "Model file")->required();
  train_cmd->add_option("--bpe", model_path, "Merge-list file");
  train_cmd->add_option("--vocab-size", vocab_size, "Learn BPE from the training data instead");
  detail::add_format(train_cmd, format);
  detail::add_task(train_cmd, task_name);
  train_cmd->add_option("--profile", profile, "Hyper-parameter profile")
      ->check(CLI::IsMember({"desk", "desk-multi", "paper", "paper-multi"}));
  train_cmd->add_flag("--use-bpe", use_bpe, "Subword BiLSTM encoder (default when none is chosen)");
  train_cmd->add_flag("--use-char", use_char, "Character RNN encoder");
  train_cmd->add_flag("--use-shape", use_shape, "Word-shape RNN encoder");
  train_cmd->add_flag("--use-ngram-word", use_word, "Word encoder over ngram-composed vectors");
  train_cmd->add_option("--ngram-vectors", ngram_vectors, "Vectors from train-embeddings --ngrams");
  train_cmd->add_option("--subword-vectors", subword_vectors, "Pretrained subword vectors");
  sched.add(train_cmd);

  std::string target_model;
  auto *ft_cmd = app.add_subcommand("finetune", "Continue training a model on one language");
  ft_cmd->add_option("--model", model_path, "Model file")->required();
  ft_cmd->add_option("--train", train_path, "Target-language training data")->required();
  ft_cmd->add_option("--dev", dev_path, "Target-language development data")->required();
  ft_cmd->add_option("--output", output, "Finetuned model file")->required();
  detail::add_format(ft_cmd, format);
  detail::add_task(ft_cmd, task_name);
  detail::ScheduleFlags ft_sched;
  ft_sched.add(ft_cmd);

  auto *predict_cmd = app.add_subcommand("predict", "Tag token-per-line input");
  predict_cmd->add_option("--model", model_path, "Model file")->required();
  auto *pred_stdin = predict_cmd->add_flag("--stdin", use_stdin, "Read standard input (default)");
  predict_cmd->add_option("--input", input, "Token-per-line file")->excludes(pred_stdin);
  predict_cmd->add_option("--output", output, "Output file (standard output by default)");

  // evaluate
  std::string gold_path, pred_path;
  auto *eval_cmd = app.add_subcommand("evaluate", "Score predictions against gold labels");
  detail::add_task(eval_cmd, task_name);
  eval_cmd->add_option("--gold", gold_path, "Gold TSV")->required();
  eval_cmd->add_option("--pred", pred_path, "Predicted TSV")->required();

  // select-vocab-size
  std::string table_path, median_rule = "midpoint";
  std::size_t size = 0;
  auto *select_cmd = app.add_subcommand("select-vocab-size", "Pick a BPE vocabulary size for a dataset size");
  select_cmd->add_option("--table", table_path, "CSV language,N_l,v_l (best_vocab.csv)")->required();
  select_cmd->add_option("--size", size, "Number of training instances")->required()->check(CLI::PositiveNumber);
  select_cmd->add_option("--median", median_rule, "Median for even counts")
      ->check(CLI::IsMember({"midpoint", "lower"}));

  // run-experiment
  std::string manifest_path;
  std::size_t jobs = 1;
  auto *exp_cmd = app.add_subcommand("run-experiment", "Run a manifest of experiment cells");
  exp_cmd->add_option("--manifest", manifest_path, "Manifest file")->required();
  exp_cmd->add_option("--jobs", jobs, "Cells trained in parallel")->check(CLI::PositiveNumber);

  auto *stats_cmd = app.add_subcommand("bpe-stats", "Histogram of symbol lengths");
  stats_cmd->add_option("--model", model_path, "Merge-list file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp &) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion &) {
    out << version_text() << '\n';
    return 0;
  } catch (const CLI::ParseError &e) {
    std::string msg = e.what();
    for (char &c : msg)
      if (c == '\n') c = ' ';
    err << "error: usage: " << msg << '\n';
    return 1;
  }
  if (app.get_subcommands().empty()) {
    err << app.help();
    err << "error: usage: a subcommand is required\n";
    return 1;
  }

  detail::Streams io{in, out, err, verbose};
  try {
    if (*learn_bpe) {
      const auto paragraphs = sample_paragraphs(read_paragraphs(input), max_paragraphs, seed);
      const auto model = bpe::learn(paragraphs, vocab_size);
      bpe::save(model, output);
      io.log("learned " + std::to_string(model.merges().size()) + " merges, vocabulary " +
             std::to_string(model.vocab().size()));
    } else if (*segment_cmd) {
      const auto model = bpe::load(model_path);
      std::ifstream file;
      if (!input.empty()) file = open_input(input);
      std::istream &src = input.empty() ? in : file;
      std::string line;
      while (std::getline(src, line)) {
        strip_cr(line);
        const auto tokens = unicode::split_whitespace(line);
        std::string joined;
        for (const auto &tok : tokens)
          for (const auto &piece : bpe::segment_word(model, tok)) {
            if (!joined.empty()) joined += ' ';
            joined += piece;
          }
        out << joined << '\n';
      }
    } else if (*shape_cmd) {
      for (const auto &w : words) {
        if (w.empty()) throw UsageError("--word must not be empty");
        out << shapes::word_shape(w) << '\n';
      }
    } else if (*cap_cmd) {
      auto file = open_input(input);
      std::ostringstream buf;
      buf << file.rdbuf();
      const double ratio = shapes::capitalization_ratio(buf.str());
      out << ratio << '\n';
      if (threshold) out << (ratio >= *threshold ? "shape on" : "shape off") << '\n';
    } else if (*emb_cmd) {
      const auto paragraphs = sample_paragraphs(read_paragraphs(input), max_paragraphs, glove.seed);
      std::vector<std::vector<std::string>> sequences;
      if (ngram_mode) {
        std::vector<std::vector<std::string>> tokenized;
        for (const auto &p : paragraphs) tokenized.push_back(unicode::split_whitespace(p));
        sequences = embeddings::ngram_sequences(tokenized, min_count);
      } else {
        if (model_path.empty()) throw UsageError("--model is required unless --ngrams is given");
        sequences = detail::segment_paragraphs(bpe::load(model_path), paragraphs);
      }
      const auto table = embeddings::build_cooccurrence(sequences, window, true, !no_distance_weighting);
      const auto result = embeddings::train_glove(table, glove);
      std::ostringstream line;
      line << "GloVe loss " << result.initial_loss << " -> "
           << (result.epoch_loss.empty() ? result.initial_loss : result.epoch_loss.back());
      io.log(line.str());
      embeddings::write_embeddings(result.table, output);
    } else if (*train_cmd) {
      const Task task = parse_task(task_name);
      const auto train_set = detail::read_labeled(train_path, format, task);
      const auto dev_set = detail::read_labeled(dev_path, format, task);
      if (!use_bpe && !use_char && !use_shape && !use_word) use_bpe = true;
      std::optional<bpe::BpeModel> subwords;
      if (use_bpe) {
        if (!model_path.empty() && vocab_size != 0) throw UsageError("--bpe and --vocab-size are exclusive");
        if (!model_path.empty())
          subwords = bpe::load(model_path);
        else if (vocab_size != 0)
          subwords = bpe::learn(train_set, vocab_size);
        else
          throw UsageError("the subword encoder needs --bpe or --vocab-size");
      }
      auto cfg = tagger::make_profile(profile, task, {use_bpe, use_char, use_shape, use_word}, sched.schedule.seed);
      std::optional<embeddings::NgramInventory> ngrams;
      if (!ngram_vectors.empty()) {
        if (!use_word) throw UsageError("--ngram-vectors needs --use-ngram-word");
        ngrams = embeddings::inventory_from_table(embeddings::read_embeddings(ngram_vectors));
      }
      std::optional<embeddings::EmbeddingTable> sub_vecs;
      if (!subword_vectors.empty()) sub_vecs = embeddings::read_embeddings(subword_vectors);
      auto model = tagger::build_tagger<float>(cfg, {&train_set, &dev_set}, subwords, ngrams ? &*ngrams : nullptr,
                                               sub_vecs ? &*sub_vecs : nullptr);
      auto result = tagger::train(model, train_set, dev_set, sched.schedule);
      detail::log_history(io, result.history);
      tagger::save(result.model, output);
      io.log("best dev " + std::to_string(result.best_dev) + " at epoch " + std::to_string(result.best_epoch));
    } else if (*ft_cmd) {
      const Task task = parse_task(task_name);
      const auto model = tagger::load<float>(model_path);
      const auto train_set = detail::read_labeled(train_path, format, task);
      const auto dev_set = detail::read_labeled(dev_path, format, task);
      auto result = tagger::finetune(model, train_set, dev_set, ft_sched.schedule);
      detail::log_history(io, result.history);
      tagger::save(result.model, output);
    } else if (*predict_cmd) {
      const auto model = tagger::load<float>(model_path);
      std::ifstream file;
      if (!input.empty()) file = open_input(input);
      std::istream &src = input.empty() ? in : file;
      std::ofstream out_file;
      if (!output.empty()) out_file = open_output(output);
      std::ostream &dst = output.empty() ? out : out_file;
      std::unordered_map<std::string, std::vector<int>> cache;
      bool first = true;
      for (const auto &tokens : detail::read_token_lines(src)) {
        const auto labels = tagger::predict(model, model.prepare(tokens, &cache));
        if (!first) dst << '\n';
        first = false;
        for (std::size_t i = 0; i < tokens.size(); ++i) dst << tokens[i] << '\t' << labels[i] << '\n';
      }
    } else if (*eval_cmd) {
      const Task task = parse_task(task_name);
      const auto gold = read_conll_tsv(gold_path, task);
      const auto pred = read_conll_tsv(pred_path, task);
      const auto g = metrics::label_sequences(gold);
      const auto p = metrics::label_sequences(pred);
      for (std::size_t s = 0; s < std::min(gold.size(), pred.size()); ++s)
        for (std::size_t t = 0; t < std::min(gold.sentences[s].size(), pred.sentences[s].size()); ++t)
          if (gold.sentences[s].tokens[t].text != pred.sentences[s].tokens[t].text)
            throw DataError("sentence " + std::to_string(s + 1) + ", token " + std::to_string(t + 1) +
                            ": gold '" + gold.sentences[s].tokens[t].text + "' vs predicted '" +
                            pred.sentences[s].tokens[t].text + "'");
      out << std::setprecision(17);
      if (task == Task::ner) {
        const auto prf = metrics::entity_f1(g, p);
        out << "precision\t" << prf.precision << "\nrecall\t" << prf.recall << "\nf1\t" << prf.f1 << '\n';
      } else {
        out << "accuracy\t" << metrics::token_accuracy(g, p) << '\n';
      }
    } else if (*select_cmd) {
      const auto rule = median_rule == "lower" ? protocol::MedianRule::lower : protocol::MedianRule::midpoint;
      out << protocol::select_vocab_size(detail::read_vocab_table(table_path, rule), size) << '\n';
    } else if (*exp_cmd) {
      const auto manifest = protocol::load_manifest(manifest_path);
      protocol::RunOptions opt;
      opt.jobs = jobs;
      if (verbose) opt.log = &err;
      const auto report = protocol::run_experiment(manifest, opt);
      out << "language,method,bucket,instances,score,v_l\n" << std::setprecision(17);
      for (std::size_t i = 0; i < report.scores.rows.size(); ++i) {
        const auto &r = report.scores.rows[i];
        out << r.language << ',' << r.method << ',' << r.bucket << ',' << r.instances << ',' << r.score << ','
            << report.best_vocab[i].best_size << '\n';
      }
      io.log("cells trained " + std::to_string(report.cells_trained) + ", skipped " +
             std::to_string(report.cells_skipped));
    } else if (*stats_cmd) {
      const auto model = bpe::load(model_path);
      out << "length\tcount\n";
      for (const auto &[len, count] : bpe::symbol_length_stats(model)) out << len << '\t' << count << '\n';
    }
  } catch (const Error &e) {
    err << "error: " << e.category() << ": " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error &e) {
    err << "error: io: " << e.what() << '\n';
    return 2;
  } catch (const std::bad_alloc &) {
    err << "error: runtime: out of memory\n";
    return 3;
  } catch (const std::exception &e) {
    err << "error: internal: " << e.what() << '\n';
    return 3;
  }
  out.flush();
  return 0;
}

}  // namespace subtag::cli
