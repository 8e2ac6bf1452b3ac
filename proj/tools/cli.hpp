#pragma once

// Command-line front end. Every subcommand's options live in one flat
// string map so that config files, flags, and run manifests share keys.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "blade/blade.hpp"

namespace blade::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct OptionSpec {
  std::string name;
  std::string default_value;
  std::string help;
  bool required = false;
  bool input_file = false;
};

struct Command {
  std::string name;
  std::string help;
  std::vector<OptionSpec> options;
};

class Values {
 public:
  explicit Values(std::map<std::string, std::string> v) : v_(std::move(v)) {}

  const std::string& str(const std::string& key) const { return v_.at(key); }
  bool has(const std::string& key) const { return !v_.at(key).empty(); }

  double real(const std::string& key) const {
    try {
      std::size_t used = 0;
      const double x = std::stod(str(key), &used);
      if (used != str(key).size()) throw std::invalid_argument(key);
      return x;
    } catch (const std::logic_error&) {
      throw UsageError("--" + key + " expects a number, got \"" + str(key) + "\"");
    }
  }

  std::uint64_t integer(const std::string& key) const {
    const auto& s = str(key);
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--" + key + " expects a non-negative integer, got \"" + s + "\"");
    }
    return std::stoull(s);
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw UsageError("--" + key + " expects true/false, got \"" + s + "\"");
  }

  std::vector<std::uint32_t> uint_list(const std::string& key) const {
    std::vector<std::uint32_t> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos) {
        throw UsageError("--" + key + " expects a comma-separated list of integers");
      }
      out.push_back(static_cast<std::uint32_t>(std::stoul(item)));
    }
    if (out.empty()) throw UsageError("--" + key + " is empty");
    return out;
  }

  const std::map<std::string, std::string>& all() const { return v_; }

 private:
  std::map<std::string, std::string> v_;
};

// ---------------------------------------------------------------------------
// Command table

inline std::vector<OptionSpec> common_options() {
  return {{"seed", "1", "seed for every random choice"},
          {"threads", "1", "worker cap for parallel scans"}};
}

inline std::vector<OptionSpec> training_options(bool from_checkpoint) {
  std::vector<OptionSpec> o{
      {"train", "", "training corpus (jsonl)", true, true},
      {"dev", "", "dev corpus (jsonl)", true, true},
      {"embeddings", "", "frozen embeddings for the training corpus", false, true},
      {"dev-embeddings", "", "frozen embeddings for the dev corpus", false, true},
      {"output", "", "checkpoint to write", true},
      {"log", "", "training log (default: <output>.log.jsonl)"},
      {"epochs", "20", "maximum epochs"},
      {"batch-size", "50", "mini-batch size"},
      {"dropout", "0.5", "dropout on the pooled features"},
      {"rho", "0.95", "Adadelta decay"},
      {"eps", "1e-6", "Adadelta stabilizer"},
      {"lr", "1.0", "Adadelta learning-rate multiplier"},
      {"max-len", "50", "maximum WordPieces per instance"},
      {"filter-bias", "true", "train convolution biases"},
      {"offset", "0", "decision boundary for the token-f05 dev metric"},
      {"timing", "false", "record wall-clock milliseconds in the log"},
  };
  if (from_checkpoint) {
    o.push_back({"init", "", "checkpoint to start from", true, true});
  } else {
    o.push_back({"vocab-size", "7500", "vocabulary size including pad/unk"});
    o.push_back({"dim", "300", "trainable word-embedding dimension"});
    o.push_back({"external-dim", "0", "frozen embedding dimension (0 = none)"});
    o.push_back({"widths", "1", "comma-separated filter widths"});
    o.push_back({"maps", "1000", "feature maps per width"});
  }
  return o;
}

inline std::vector<Command> command_table() {
  std::vector<Command> cmds;
  auto add = [&](std::string name, std::string help, std::vector<OptionSpec> opts) {
    auto common = common_options();
    opts.insert(opts.end(), common.begin(), common.end());
    cmds.push_back({std::move(name), std::move(help), std::move(opts)});
  };
  auto with = [](std::vector<OptionSpec> a, std::vector<OptionSpec> b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  };
  const std::vector<OptionSpec> model_input{
      {"model", "", "checkpoint", true, true},
      {"input", "", "corpus (jsonl)", true, true},
      {"embeddings", "", "frozen embeddings for --input", false, true},
      {"max-len", "50", "maximum WordPieces per instance"},
  };

  add("train", "train a sentence-level classifier",
      with(training_options(false), {{"metric", "sentence-f1", "sentence-f1 | accuracy | token-f05"}}));
  add("finetune-tokens", "fine-tune against token labels",
      with(training_options(true), {{"metric", "token-f05", "sentence-f1 | accuracy | token-f05"},
                                    {"trainable", "full", "full | cnn-only"}}));
  add("finetune-minmax", "fine-tune with the min-max token constraints",
      with(training_options(true), {{"metric", "sentence-f1", "sentence-f1 | accuracy | token-f05"},
                                    {"trainable", "cnn-only", "full | cnn-only"}}));
  add("predict", "sentence and token predictions",
      with(model_input, {{"offset", "0", "token decision boundary"},
                         {"output", "", "predictions (jsonl)", true}}));
  add("tune-offset", "tune the token decision boundary for F0.5",
      with(model_input, {{"quantiles", "1001", "grid size"},
                         {"beta", "0.5", "F-beta to maximize"},
                         {"output", "", "result (json)", true}}));
  add("build-db", "build an exemplar database from a corpus",
      with(model_input, {{"output", "", "database file", true}}));
  add("augment-db", "add exemplars from unseen data",
      with(model_input, {{"db", "", "database to extend", true, true},
                         {"tag", "augmented", "source tag for the new records"},
                         {"output", "", "database file to write", true}}));
  add("edit-db", "edit a gold label of one database record",
      {{"db", "", "database", true, true},
       {"record", "", "record index", true},
       {"field", "", "gold_sentence | gold_token", true},
       {"value", "", "0 | 1 | unknown", true},
       {"output", "", "database file to write", true}});
  add("audit", "token predictions filtered by an exemplar decision rule",
      with(model_input, {{"db", "", "exemplar database", true, true},
                         {"rule", "exa", "exa | exag | exat"},
                         {"distance-cap", "", "reject matches farther than this"},
                         {"offset", "0", "token decision boundary"},
                         {"format", "jsonl", "jsonl | text"},
                         {"output", "", "audit output", true}}));
  add("extract-features", "class-conditional ngram and sentence scores",
      with(model_input, {{"zgram", "1", "ngram size"},
                         {"mode", "total", "total | mean"},
                         {"top-k", "10", "rows per section"},
                         {"normalize", "true", "length-normalize sentence scores"},
                         {"restrict", "true", "only count sentences predicted as the class"},
                         {"drop-repeated", "false", "hide ngrams repeating the previous score"},
                         {"output", "", "text report; records go to <output>.jsonl", true}}));
  add("rerank", "pick the least-flagged candidate per group",
      with(model_input, {{"offset", "0", "token decision boundary"},
                         {"output", "", "selections (jsonl)", true}}));
  add("eval", "precision / recall / F against gold labels",
      {{"pred", "", "predictions (corpus format)", true, true},
       {"gold", "", "gold corpus", true, true},
       {"beta", "1", "F-beta"},
       {"split", "eval", "split name for the records"},
       {"output", "", "metric records (jsonl)"}});
  add("stub-embed", "deterministic hash-based embeddings for a corpus",
      {{"input", "", "corpus (jsonl)", true, true},
       {"dim", "16", "embedding dimension"},
       {"context", "0", "weight of the sentence-mean context vector"},
       {"output", "", "embedding file", true}});
  return cmds;
}

// ---------------------------------------------------------------------------
// Manifests

inline std::string file_sha256(const fs::path& path) {
  const auto bytes = read_file_bytes(path);
  return to_hex(sha256(bytes));
}

inline fs::path manifest_path(const fs::path& output) {
  auto p = output;
  p += ".manifest.json";
  return p;
}

inline nlohmann::ordered_json make_manifest(const Command& cmd, const Values& values,
                                            const std::vector<fs::path>& outputs) {
  nlohmann::ordered_json m;
  m["tool"] = "blade";
  m["version"] = std::string(kVersion);
  m["command"] = cmd.name;
  m["seed"] = values.str("seed");
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  for (const auto& [k, v] : values.all()) config[k] = v;
  m["config"] = config;
  nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
  for (const auto& o : cmd.options) {
    if (!o.input_file || !values.has(o.name)) continue;
    inputs[o.name] = {{"path", values.str(o.name)}, {"sha256", file_sha256(values.str(o.name))}};
  }
  m["inputs"] = inputs;
  nlohmann::ordered_json outs = nlohmann::ordered_json::array();
  for (const auto& p : outputs) outs.push_back(p.string());
  m["outputs"] = outs;
  return m;
}

inline void write_manifests(const Command& cmd, const Values& values,
                            const std::vector<fs::path>& outputs) {
  const auto text = make_manifest(cmd, values, outputs).dump(2) + "\n";
  for (const auto& p : outputs) write_file_atomic(manifest_path(p), text);
}

// ---------------------------------------------------------------------------
// Shared helpers

inline fs::path vocab_path(const fs::path& model) {
  auto p = model;
  p += ".vocab";
  return p;
}

struct LoadedModel {
  BladeModel model;
  Vocabulary vocab;
};

inline LoadedModel load_model(const std::string& path) {
  return {load_checkpoint(path), Vocabulary::load(vocab_path(path))};
}

inline void save_model(const fs::path& path, const BladeModel& model, const Vocabulary& vocab) {
  write_file_atomic(vocab_path(path), vocab.serialize());
  save_checkpoint(path, model);
}

inline std::optional<EmbeddingFile> maybe_embeddings(const Values& v, const std::string& key) {
  if (!v.has(key)) return std::nullopt;
  return load_embeddings(v.str(key));
}

inline std::vector<Example> examples_for(const LoadedModel& lm,
                                         std::span<const LabeledInstance> corpus,
                                         const std::optional<EmbeddingFile>& emb,
                                         std::size_t max_len) {
  return make_examples(corpus, lm.vocab, lm.model, emb ? &*emb : nullptr, max_len);
}

inline DevMetric parse_metric(const std::string& s) {
  if (s == "sentence-f1") return DevMetric::kSentenceF1;
  if (s == "accuracy") return DevMetric::kAccuracy;
  if (s == "token-f05") return DevMetric::kTokenF05;
  throw UsageError("unknown metric " + s);
}

inline RuleKind parse_rule(const std::string& s) {
  if (s == "exa") return RuleKind::kExA;
  if (s == "exag") return RuleKind::kExAG;
  if (s == "exat") return RuleKind::kExAT;
  throw UsageError("unknown rule " + s + " (expected exa, exag, or exat)");
}

inline std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string join(const std::vector<std::string>& words, std::size_t lo, std::size_t hi) {
  std::string s;
  for (std::size_t i = lo; i < hi && i < words.size(); ++i) {
    if (!s.empty()) s += ' ';
    s += words[i];
  }
  return s;
}

// ---------------------------------------------------------------------------
// Subcommands

inline std::vector<fs::path> run_training(const Command& cmd, const Values& v, std::ostream& out) {
  const bool from_checkpoint = cmd.name != "train";
  const auto train_corpus = load_corpus(v.str("train"));
  const auto dev_corpus = load_corpus(v.str("dev"));

  LoadedModel lm;
  if (from_checkpoint) {
    lm = load_model(v.str("init"));
  } else {
    lm.vocab = build_vocab(train_corpus, v.integer("vocab-size"));
    ModelShape shape;
    shape.vocab_size = static_cast<std::uint32_t>(lm.vocab.size());
    shape.word_dim = static_cast<std::uint32_t>(v.integer("dim"));
    shape.external_dim = static_cast<std::uint32_t>(v.integer("external-dim"));
    shape.widths = expand_widths(v.uint_list("widths"), static_cast<std::uint32_t>(v.integer("maps")));
    lm.model = init_model(std::move(shape), v.integer("seed"));
  }

  const auto max_len = v.integer("max-len");
  const auto train_emb = maybe_embeddings(v, "embeddings");
  const auto dev_emb = maybe_embeddings(v, "dev-embeddings");
  const auto train_set = examples_for(lm, train_corpus, train_emb, max_len);
  const auto dev_set = examples_for(lm, dev_corpus, dev_emb, max_len);

  TrainConfig cfg;
  cfg.loss = cmd.name == "finetune-tokens"   ? LossKind::kToken
             : cmd.name == "finetune-minmax" ? LossKind::kMinMax
                                             : LossKind::kSentence;
  cfg.batch_size = v.integer("batch-size");
  cfg.max_epochs = v.integer("epochs");
  cfg.dropout = v.real("dropout");
  cfg.metric = parse_metric(v.str("metric"));
  cfg.adadelta = {v.real("rho"), v.real("eps"), v.real("lr")};
  cfg.seed = v.integer("seed");
  cfg.filter_bias = v.flag("filter-bias");
  cfg.offset = v.real("offset");
  if (from_checkpoint) {
    const auto& t = v.str("trainable");
    if (t != "full" && t != "cnn-only") throw UsageError("--trainable must be full or cnn-only");
    cfg.trainable = t == "full" ? Trainable::kFull : Trainable::kCnnOnly;
  }
  if (cfg.loss == LossKind::kToken) {
    for (const auto& ex : train_set) {
      if (!ex.word_labels) throw DataError("token fine-tuning needs token_labels on every instance");
    }
  }

  const auto result = train(lm.model, train_set, dev_set, cfg);

  const fs::path output = v.str("output");
  const fs::path log_path = v.has("log") ? fs::path(v.str("log")) : fs::path(output.string() + ".log.jsonl");
  const bool timing = v.flag("timing");
  std::string log;
  for (const auto& e : result.log) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["loss"] = e.loss;
    j["dev_metric"] = e.dev_metric;
    j["wall_ms"] = timing ? nlohmann::ordered_json(e.wall_ms) : nlohmann::ordered_json(nullptr);
    log += j.dump() + '\n';
  }
  save_model(output, result.best, lm.vocab);
  write_file_atomic(log_path, log);
  out << "best epoch " << result.best_epoch << " of " << result.log.size();
  if (!result.log.empty() && result.best_epoch > 0) {
    out << ", dev " << v.str("metric") << " " << fmt2(result.log[result.best_epoch - 1].dev_metric);
  }
  out << "\n";
  if (result.warnings > 0) out << "warnings: " << result.warnings << "\n";
  return {output, log_path};
}

inline std::vector<fs::path> run_predict(const Values& v, std::ostream& out) {
  const auto lm = load_model(v.str("model"));
  const auto corpus = load_corpus(v.str("input"));
  const auto examples = examples_for(lm, corpus, maybe_embeddings(v, "embeddings"), v.integer("max-len"));
  const double offset = v.real("offset");
  std::string text;
  std::size_t positives = 0;
  for (const auto& ex : examples) {
    const auto p = predict(lm.model, ex, offset);
    auto inst = corpus[ex.source];
    std::vector<int> labels = p.tokens;
    labels.resize(inst.word_count(), 0);  // truncated words are never flagged
    inst.sentence_label = p.sentence;
    inst.token_labels = labels;
    auto j = to_json(inst);
    j["prob_positive"] = p.prob_positive;
    j["scores"] = p.word_scores;
    text += j.dump() + '\n';
    positives += static_cast<std::size_t>(p.sentence);
  }
  write_file_atomic(v.str("output"), text);
  out << "predicted " << examples.size() << " instances, " << positives << " positive\n";
  return {v.str("output")};
}

inline std::vector<fs::path> run_tune_offset(const Values& v, std::ostream& out) {
  const auto lm = load_model(v.str("model"));
  const auto corpus = load_corpus(v.str("input"), {.require_token_labels = true});
  const auto examples = examples_for(lm, corpus, maybe_embeddings(v, "embeddings"), v.integer("max-len"));
  if (examples.empty()) throw DataError("offset tuning set is empty");
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<int>> gold;
  for (const auto& ex : examples) {
    scores.push_back(predict(lm.model, ex).word_scores);
    gold.push_back(*ex.word_labels);
  }
  const auto grid = quantile_grid(scores, v.integer("quantiles"));
  const auto best = tune_offset(scores, gold, grid, v.real("beta"));
  nlohmann::ordered_json j;
  j["offset"] = best.offset;
  j["f"] = best.f;
  j["beta"] = v.real("beta");
  j["grid_size"] = grid.size();
  write_file_atomic(v.str("output"), j.dump(2) + "\n");
  out << "offset " << best.offset << " F" << v.str("beta") << " " << fmt2(best.f) << "\n";
  return {v.str("output")};
}

inline std::vector<fs::path> run_build_db(const Values& v, std::ostream& out) {
  const auto lm = load_model(v.str("model"));
  const auto corpus = load_corpus(v.str("input"));
  const auto examples = examples_for(lm, corpus, maybe_embeddings(v, "embeddings"), v.integer("max-len"));
  const auto db = build_db(lm.model, corpus, examples);
  save_db(v.str("output"), db);
  out << "database: " << db.records.size() << " records, M=" << db.dim << "\n";
  return {v.str("output")};
}

inline std::vector<fs::path> run_augment_db(const Values& v, std::ostream& out) {
  const auto lm = load_model(v.str("model"));
  auto db = load_db(v.str("db"));
  const auto before = db.records.size();
  const auto corpus = load_corpus(v.str("input"));
  const auto examples = examples_for(lm, corpus, maybe_embeddings(v, "embeddings"), v.integer("max-len"));
  augment_db(db, lm.model, corpus, examples, v.str("tag"));
  save_db(v.str("output"), db);
  out << "database: " << before << " -> " << db.records.size() << " records\n";
  return {v.str("output")};
}

inline std::vector<fs::path> run_edit_db(const Values& v, std::ostream& out) {
  auto db = load_db(v.str("db"));
  const auto& f = v.str("field");
  if (f != "gold_sentence" && f != "gold_token") {
    throw UsageError("--field must be gold_sentence or gold_token");
  }
  const auto& s = v.str("value");
  std::int8_t value;
  if (s == "0") value = 0;
  else if (s == "1") value = 1;
  else if (s == "unknown" || s == "-1") value = kUnknownLabel;
  else throw UsageError("--value must be 0, 1, or unknown");
  edit_label(db, v.integer("record"),
             f == "gold_sentence" ? LabelField::kGoldSentence : LabelField::kGoldToken, value);
  save_db(v.str("output"), db);
  out << "record " << v.str("record") << ": " << f << " = " << s << "\n";
  return {v.str("output")};
}

inline std::string label_text(std::int8_t v) { return v == kUnknownLabel ? "?" : std::to_string(v); }

inline std::vector<fs::path> run_audit(const Values& v, std::ostream& out) {
  DecisionRule rule{parse_rule(v.str("rule")), std::nullopt};
  if (v.has("distance-cap")) rule.distance_cap = v.real("distance-cap");
  const bool text_format = v.str("format") == "text";
  if (!text_format && v.str("format") != "jsonl") throw UsageError("--format must be jsonl or text");
  const double offset = v.real("offset");
  const auto lm = load_model(v.str("model"));
  const auto db = load_db(v.str("db"));
  if (db.checkpoint != fingerprint(lm.model)) {
    throw DataError("database was built with a different checkpoint");
  }
  const auto corpus = load_corpus(v.str("input"));
  const auto examples = examples_for(lm, corpus, maybe_embeddings(v, "embeddings"), v.integer("max-len"));

  std::string text;
  std::size_t raw_total = 0, admitted_total = 0;
  for (const auto& ex : examples) {
    const auto& inst = corpus[ex.source];
    const auto a = audit(lm.model, db, ex, rule, offset, v.integer("threads"));
    nlohmann::ordered_json j;
    j["id"] = inst.id;
    j["sentence_pred"] = a.sentence_pred;
    std::vector<int> raw, admitted;
    nlohmann::ordered_json matches = nlohmann::ordered_json::array();
    std::string table;
    for (std::size_t w = 0; w < a.tokens.size(); ++w) {
      const auto& t = a.tokens[w];
      raw.push_back(t.raw);
      admitted.push_back(t.admitted);
      if (!t.match) continue;
      const auto& rec = db.records[t.match->index];
      const auto text_it = db.texts.find(rec.id_hash);
      std::string ex_id = "?", ex_token = "?", ex_context;
      if (text_it != db.texts.end()) {
        const auto& words = text_it->second.tokens;
        ex_id = text_it->second.id;
        if (rec.word_index < words.size()) ex_token = words[rec.word_index];
        ex_context = join(words, 0, words.size());
      }
      nlohmann::ordered_json m;
      m["word"] = w;
      m["token"] = inst.tokens[w];
      m["admitted"] = t.admitted;
      m["record"] = t.match->index;
      m["distance"] = t.match->distance;
      m["exemplar_id"] = ex_id;
      m["exemplar_word"] = rec.word_index;
      m["exemplar_token"] = ex_token;
      m["exemplar_token_pred"] = rec.token_pred;
      m["exemplar_sentence_pred"] = rec.sentence_pred;
      m["exemplar_gold_sentence"] = rec.gold_sentence;
      m["exemplar_gold_token"] = rec.gold_token;
      m["exemplar_source"] = db.tag_name(rec.tag);
      m["exemplar_text"] = ex_context;
      matches.push_back(m);
      char dist[32];
      std::snprintf(dist, sizeof(dist), "%.4f", t.match->distance);
      table += "  word " + std::to_string(w) + " \"" + inst.tokens[w] + "\" admitted=" +
               std::to_string(t.admitted) + "\n    exemplar " + ex_id + " word " +
               std::to_string(rec.word_index) + " \"" + ex_token + "\" distance=" + dist +
               " pred(token)=" + label_text(rec.token_pred) +
               " pred(sent)=" + label_text(rec.sentence_pred) +
               " gold(sent)=" + label_text(rec.gold_sentence) +
               " gold(token)=" + label_text(rec.gold_token) + " source=" + db.tag_name(rec.tag) +
               "\n    context: " + ex_context + "\n";
    }
    raw_total += static_cast<std::size_t>(std::ranges::count(raw, 1));
    admitted_total += static_cast<std::size_t>(std::ranges::count(admitted, 1));
    if (text_format) {
      text += "[" + inst.id + "] pred(sent)=" + std::to_string(a.sentence_pred) + "\n  test: ";
      for (std::size_t w = 0; w < inst.tokens.size(); ++w) {
        if (w) text += ' ';
        const bool flagged = w < admitted.size() && admitted[w] == 1;
        text += flagged ? "_" + inst.tokens[w] + "_" : inst.tokens[w];
      }
      text += "\n" + table;
    } else {
      j["tokens"] = inst.tokens;
      j["raw"] = raw;
      j["admitted"] = admitted;
      j["matches"] = matches;
      text += j.dump() + '\n';
    }
  }
  write_file_atomic(v.str("output"), text);
  out << "raw positives " << raw_total << ", admitted " << admitted_total << " under "
      << v.str("rule") << "\n";
  return {v.str("output")};
}

inline std::vector<fs::path> run_extract(const Values& v, std::ostream& out) {
  ReportOptions opt;
  opt.top_k = v.integer("top-k");
  if (opt.top_k < 1) throw UsageError("--top-k must be >= 1");
  const auto& mode = v.str("mode");
  if (mode != "total" && mode != "mean") throw UsageError("--mode must be total or mean");
  opt.mode = mode == "total" ? NgramMode::kTotal : NgramMode::kMean;
  opt.normalize = v.flag("normalize");
  opt.drop_repeated_scores = v.flag("drop-repeated");
  const auto z = v.integer("zgram");
  if (z < 1) throw UsageError("--zgram must be >= 1");
  const auto lm = load_model(v.str("model"));
  const auto corpus = load_corpus(v.str("input"));
  const auto examples = examples_for(lm, corpus, maybe_embeddings(v, "embeddings"), v.integer("max-len"));
  const auto scored = score_instances(lm.model, corpus, examples);
  std::vector<ClassFeatures> classes;
  for (auto cls : {ScoreClass::kNegative, ScoreClass::kPositive}) {
    classes.push_back({cls, ngram_scores(scored, cls, z, opt.mode, v.flag("restrict")),
                       sentence_scores(scored, cls, opt.normalize)});
  }
  const fs::path output = v.str("output");
  const fs::path records = output.string() + ".jsonl";
  write_file_atomic(output, render_report(classes, opt));
  write_file_atomic(records, render_ngram_records(classes));
  out << "scored " << scored.size() << " instances\n";
  return {output, records};
}

inline std::vector<fs::path> run_rerank(const Values& v, std::ostream& out) {
  const auto lm = load_model(v.str("model"));
  const auto corpus = load_corpus(v.str("input"), {.require_group = true});
  const auto examples = examples_for(lm, corpus, maybe_embeddings(v, "embeddings"), v.integer("max-len"));
  const auto groups = group_candidates(corpus);
  const auto selections = rerank(lm.model, corpus, examples, groups, v.integer("seed"), v.real("offset"));
  std::string text;
  for (const auto& s : selections) {
    nlohmann::ordered_json j;
    j["group_id"] = s.group_id;
    j["chosen_id"] = s.chosen_id;
    j["detections"] = s.detections;
    j["pool_size"] = s.pool_size;
    j["pool_mean"] = s.pool_mean;
    j["pool_min"] = s.pool_min;
    text += j.dump() + '\n';
  }
  write_file_atomic(v.str("output"), text);
  const bool gold = std::ranges::all_of(selections, [&](const Selection& s) {
    return corpus[s.chosen].token_labels.has_value();
  });
  out << "groups " << selections.size();
  if (gold && !selections.empty()) {
    const auto e = rerank_eval(selections, corpus);
    out << ", mean detections " << e.mean_detections << ", token P " << fmt2(e.prf.precision)
        << " R " << fmt2(e.prf.recall) << " F0.5 " << fmt2(e.prf.f);
  }
  out << "\n";
  return {v.str("output")};
}

inline std::vector<fs::path> run_eval(const Values& v, std::ostream& out) {
  const auto pred = load_corpus(v.str("pred"));
  const auto gold = load_corpus(v.str("gold"));
  if (pred.size() != gold.size()) {
    throw DataError("prediction file has " + std::to_string(pred.size()) + " instances, gold has " +
                    std::to_string(gold.size()));
  }
  const double beta = v.real("beta");
  Confusion sent, tok;
  bool have_tokens = true;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (pred[i].id != gold[i].id) {
      throw DataError("instance " + std::to_string(i + 1) + ": prediction id " + pred[i].id +
                      " does not match gold id " + gold[i].id);
    }
    sent.add(pred[i].sentence_label, gold[i].sentence_label);
    if (pred[i].token_labels && gold[i].token_labels) {
      tok += confusion(*pred[i].token_labels, *gold[i].token_labels);
    } else {
      have_tokens = false;
    }
  }
  std::string records;
  auto emit = [&](const std::string& level, const Confusion& c) {
    const auto r = prf(c, beta);
    out << level << ": P=" << fmt2(r.precision) << " R=" << fmt2(r.recall) << " F" << v.str("beta")
        << "=" << fmt2(r.f) << " (tp=" << c.tp << " fp=" << c.fp << " fn=" << c.fn
        << " tn=" << c.tn << ")\n";
    nlohmann::ordered_json j;
    j["split"] = v.str("split");
    j["level"] = level;
    j["P"] = r.precision;
    j["R"] = r.recall;
    j["F1"] = prf(c, 1.0).f;
    j["F0.5"] = prf(c, 0.5).f;
    j["tp"] = c.tp;
    j["fp"] = c.fp;
    j["fn"] = c.fn;
    j["tn"] = c.tn;
    records += j.dump() + '\n';
  };
  if (have_tokens && !gold.empty()) emit("token", tok);
  emit("sentence", sent);
  if (!v.has("output")) return {};
  write_file_atomic(v.str("output"), records);
  return {v.str("output")};
}

inline std::vector<fs::path> run_stub_embed(const Values& v, std::ostream& out) {
  const auto corpus = load_corpus(v.str("input"));
  const auto file = stub_embeddings(corpus, static_cast<std::uint32_t>(v.integer("dim")),
                                    v.real("context"), v.integer("seed"));
  save_embeddings(v.str("output"), file);
  out << "embedded " << corpus.size() << " sentences, dim " << file.dim << "\n";
  return {v.str("output")};
}

inline std::vector<fs::path> run_command(const Command& cmd, const Values& v, std::ostream& out) {
  if (cmd.name == "train" || cmd.name == "finetune-tokens" || cmd.name == "finetune-minmax") {
    return run_training(cmd, v, out);
  }
  if (cmd.name == "predict") return run_predict(v, out);
  if (cmd.name == "tune-offset") return run_tune_offset(v, out);
  if (cmd.name == "build-db") return run_build_db(v, out);
  if (cmd.name == "augment-db") return run_augment_db(v, out);
  if (cmd.name == "edit-db") return run_edit_db(v, out);
  if (cmd.name == "audit") return run_audit(v, out);
  if (cmd.name == "extract-features") return run_extract(v, out);
  if (cmd.name == "rerank") return run_rerank(v, out);
  if (cmd.name == "eval") return run_eval(v, out);
  if (cmd.name == "stub-embed") return run_stub_embed(v, out);
  throw UsageError("unknown subcommand " + cmd.name);
}

// ---------------------------------------------------------------------------
// Dispatch

inline std::map<std::string, std::string> read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(n) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

inline std::string usage_text(const std::vector<Command>& cmds) {
  std::string s = "usage: blade <subcommand> [--config FILE] [--key value ...]\n\nsubcommands:\n";
  for (const auto& c : cmds) s += "  " + c.name + std::string(20 - std::min<std::size_t>(19, c.name.size()), ' ') + c.help + "\n";
  s += "  replay              re-run a subcommand from its run manifest (--manifest FILE)\n";
  return s;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Re-runs the recorded subcommand after checking that every input still has
// the recorded content.
inline int replay(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  if (args.size() != 3 || args[1] != "--manifest") {
    err << "usage: blade replay --manifest FILE\n";
    return kUsage;
  }
  std::ifstream in(args[2]);
  if (!in) {
    err << "cannot open manifest " << args[2] << "\n";
    return kData;
  }
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
    for (const auto& [key, rec] : m.at("inputs").items()) {
      const auto path = rec.at("path").get<std::string>();
      if (!fs::exists(path) || file_sha256(path) != rec.at("sha256").get<std::string>()) {
        err << "input --" << key << " (" << path << ") changed since the manifest was written\n";
        return kData;
      }
    }
  } catch (const std::exception& e) {
    err << "malformed manifest: " << e.what() << "\n";
    return kData;
  }
  std::vector<std::string> argv{m.at("command").get<std::string>()};
  for (const auto& [k, val] : m.at("config").items()) {
    argv.push_back("--" + k);
    argv.push_back(val.get<std::string>());
  }
  return dispatch(argv, out, err);
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  const auto cmds = command_table();
  if (args.empty() || args[0] == "--help" || args[0] == "-h") {
    (args.empty() ? err : out) << usage_text(cmds);
    return args.empty() ? kUsage : kOk;
  }
  if (args[0] == "replay") return replay(args, out, err);
  const auto it = std::ranges::find_if(cmds, [&](const Command& c) { return c.name == args[0]; });
  if (it == cmds.end()) {
    err << "unknown subcommand: " << args[0] << "\n" << usage_text(cmds);
    return kUsage;
  }
  const Command& cmd = *it;

  std::map<std::string, std::string> values;
  for (const auto& o : cmd.options) values[o.name] = o.default_value;

  CLI::App app{cmd.help, "blade " + cmd.name};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_path;
  app.add_option("--config", config_path, "key=value file; flags override its values");
  for (const auto& o : cmd.options) {
    app.add_option("--" + o.name, values[o.name], o.help)->default_str(o.default_value);
  }

  std::vector<std::string> rest(args.begin() + 1, args.end());
  std::ranges::reverse(rest);  // CLI11 consumes a reversed argument vector
  try {
    app.parse(rest);
    // Config values sit below explicit flags.
    if (!config_path.empty()) {
      for (const auto& [k, val] : read_config_file(config_path)) {
        if (!values.contains(k)) throw UsageError("unknown config key: " + k);
        if (app.get_option("--" + k)->count() == 0) values[k] = val;
      }
    }
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  for (const auto& o : cmd.options) {
    if (o.required && values[o.name].empty()) {
      err << "error: --" << o.name << " is required\n" << app.help();
      return kUsage;
    }
  }

  try {
    const Values v(values);
    const auto outputs = run_command(cmd, v, out);
    if (!outputs.empty()) write_manifests(cmd, v, outputs);
    return kOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  }
}

}  // namespace blade::cli
