#pragma once

// Exemplar auditing: a database of per-word feature-map fingerprints with
// exact Euclidean nearest-neighbor search and conjunctive decision rules.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "blade/common.hpp"
#include "blade/core.hpp"
#include "blade/dataset.hpp"
#include "blade/model.hpp"

namespace blade {

inline constexpr std::int8_t kUnknownLabel = -1;

struct ExemplarRecord {
  std::uint64_t id_hash = 0;
  std::uint32_t word_index = 0;
  std::int8_t token_pred = 0;
  std::int8_t sentence_pred = 0;
  std::int8_t gold_sentence = kUnknownLabel;
  std::int8_t gold_token = kUnknownLabel;
  std::uint16_t tag = 0;  // 0 = train, otherwise an augmentation tag
  std::vector<float> vector;

  bool operator==(const ExemplarRecord&) const = default;
};

struct DisplayText {
  std::string id;
  std::vector<std::string> tokens;
  bool operator==(const DisplayText&) const = default;
};

struct ExemplarDatabase {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t dim = 0;
  Digest checkpoint{};
  std::vector<ExemplarRecord> records;
  std::vector<std::string> tags{"train"};
  std::map<std::uint64_t, DisplayText> texts;  // display sidecar

  std::string tag_name(std::uint16_t tag) const {
    if (tag == 0) return "train";
    return "augmented:" + tags.at(tag);
  }

  bool operator==(const ExemplarDatabase&) const = default;
};

namespace detail {

inline void append_records(ExemplarDatabase& db, const BladeModel& model,
                           std::span<const LabeledInstance> corpus,
                           std::span<const Example> examples, std::uint16_t tag) {
  if (!model.all_unit_width()) {
    throw UsageError("exemplar databases require a model whose filter widths are all 1");
  }
  if (examples.size() != corpus.size()) throw DataError("examples do not match the corpus");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    const auto& inst = corpus[ex.source];
    const auto trace = forward(model, ex.indexed, ex.external);
    const auto dec = decompose(trace, model);
    const auto labels = label_tokens(dec, 0.0);
    const auto vectors = exemplar_vectors(trace);
    const int sentence_pred = predict_sentence(trace);
    const auto id_hash = fnv1a64(inst.id);
    for (std::size_t w = 0; w < vectors.size(); ++w) {
      ExemplarRecord r;
      r.id_hash = id_hash;
      r.word_index = static_cast<std::uint32_t>(w);
      r.token_pred = static_cast<std::int8_t>(labels[w]);
      r.sentence_pred = static_cast<std::int8_t>(sentence_pred);
      r.gold_sentence = static_cast<std::int8_t>(inst.sentence_label);
      r.gold_token = ex.word_labels ? static_cast<std::int8_t>((*ex.word_labels)[w]) : kUnknownLabel;
      r.tag = tag;
      r.vector.assign(vectors[w].begin(), vectors[w].end());
      db.records.push_back(std::move(r));
    }
    db.texts.try_emplace(id_hash, DisplayText{inst.id, inst.tokens});
  }
}

}  // namespace detail

// One record per kept word of every instance, predictions at offset 0.
inline ExemplarDatabase build_db(const BladeModel& model, std::span<const LabeledInstance> corpus,
                                 std::span<const Example> examples) {
  ExemplarDatabase db;
  db.dim = static_cast<std::uint32_t>(model.filters());
  db.checkpoint = fingerprint(model);
  detail::append_records(db, model, corpus, examples, 0);
  return db;
}

// Adds records for data never used in training; existing records are untouched.
inline void augment_db(ExemplarDatabase& db, const BladeModel& model,
                       std::span<const LabeledInstance> corpus, std::span<const Example> examples,
                       const std::string& tag) {
  if (fingerprint(model) != db.checkpoint) {
    throw DataError("model checkpoint does not match the database fingerprint");
  }
  if (tag.empty() || tag == "train") throw UsageError("augmentation tag must be a non-empty name other than train");
  auto it = std::ranges::find(db.tags, tag);
  std::uint16_t id;
  if (it == db.tags.end()) {
    if (db.tags.size() > std::numeric_limits<std::uint16_t>::max()) throw DataError("too many tags");
    id = static_cast<std::uint16_t>(db.tags.size());
    db.tags.push_back(tag);
  } else {
    id = static_cast<std::uint16_t>(it - db.tags.begin());
  }
  detail::append_records(db, model, corpus, examples, id);
}

enum class LabelField { kGoldSentence, kGoldToken };

inline void edit_label(ExemplarDatabase& db, std::size_t record, LabelField field,
                       std::int8_t value) {
  if (record >= db.records.size()) {
    throw DataError("record " + std::to_string(record) + " out of range (database has " +
                    std::to_string(db.records.size()) + ")");
  }
  if (value != 0 && value != 1 && value != kUnknownLabel) {
    throw DataError("label value must be 0, 1, or unknown");
  }
  auto& r = db.records[record];
  (field == LabelField::kGoldSentence ? r.gold_sentence : r.gold_token) = value;
}

struct Match {
  std::size_t index = 0;
  double distance = 0.0;
};

namespace detail {

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

struct ScanResult {
  double d2 = std::numeric_limits<double>::infinity();
  std::size_t index = 0;
};

inline ScanResult scan(const ExemplarDatabase& db, std::span<const float> query, std::size_t lo,
                       std::size_t hi) {
  ScanResult best;
  best.index = lo;
  for (std::size_t i = lo; i < hi; ++i) {
    const double d2 = squared_distance(db.records[i].vector, query);
    if (d2 < best.d2) best = {d2, i};
  }
  return best;
}

inline void check_query(const ExemplarDatabase& db, std::span<const float> query) {
  if (db.records.empty()) throw DataError("nearest-neighbor query on an empty database");
  if (query.size() != db.dim) {
    throw DataError("query has " + std::to_string(query.size()) + " components, database has " +
                    std::to_string(db.dim));
  }
}

}  // namespace detail

// Exact Euclidean nearest neighbor; ties go to the lowest record index.
// Partial scans run on up to `threads` workers and merge in index order.
inline Match nearest(const ExemplarDatabase& db, std::span<const float> query,
                     std::size_t threads = 1) {
  detail::check_query(db, query);
  const std::size_t n = db.records.size();
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, n / 1024));
  std::vector<detail::ScanResult> parts(threads);
  if (threads == 1) {
    parts[0] = detail::scan(db, query, 0, n);
  } else {
    std::vector<std::jthread> workers;
    for (std::size_t t = 0; t < threads; ++t) {
      const std::size_t lo = n * t / threads;
      const std::size_t hi = n * (t + 1) / threads;
      workers.emplace_back([&, t, lo, hi] { parts[t] = detail::scan(db, query, lo, hi); });
    }
  }
  detail::ScanResult best = parts[0];
  for (std::size_t t = 1; t < parts.size(); ++t) {
    if (parts[t].d2 < best.d2) best = parts[t];
  }
  return {best.index, std::sqrt(best.d2)};
}

// Precomputed record norms let the scan skip records whose norm alone rules
// them out (|‖r‖ - ‖q‖| <= ‖r - q‖). Survivors use the same distance routine
// as nearest(), so answers agree exactly.
class NormIndex {
 public:
  explicit NormIndex(const ExemplarDatabase& db) : db_(&db) {
    norms_.reserve(db.records.size());
    for (const auto& r : db.records) {
      double acc = 0.0;
      for (float v : r.vector) acc += static_cast<double>(v) * v;
      norms_.push_back(std::sqrt(acc));
    }
  }

  Match nearest(std::span<const float> query) const {
    detail::check_query(*db_, query);
    double qn = 0.0;
    for (float v : query) qn += static_cast<double>(v) * v;
    qn = std::sqrt(qn);
    detail::ScanResult best;
    for (std::size_t i = 0; i < norms_.size(); ++i) {
      const double gap = std::abs(norms_[i] - qn);
      // The slack absorbs rounding in the norms so no exact winner is pruned.
      if (gap * gap > best.d2 * (1.0 + 1e-9) + 1e-12) continue;
      const double d2 = detail::squared_distance(db_->records[i].vector, query);
      if (d2 < best.d2) best = {d2, i};
    }
    return {best.index, std::sqrt(best.d2)};
  }

 private:
  const ExemplarDatabase* db_;
  std::vector<double> norms_;
};

enum class RuleKind { kExA, kExAG, kExAT };

struct DecisionRule {
  RuleKind kind = RuleKind::kExA;
  std::optional<double> distance_cap;
};

// Admits a positive test prediction only when the matched exemplar was also
// predicted positive, and (ExAG) comes from a gold-positive sentence or
// (ExAT) is itself a gold-positive token. Unknown gold labels never match.
inline int apply_rule(int test_pred, const ExemplarRecord& record, double distance,
                      const DecisionRule& rule) {
  if (test_pred != 1) return 0;
  if (rule.distance_cap && distance > *rule.distance_cap) return 0;
  if (record.token_pred != 1) return 0;
  switch (rule.kind) {
    case RuleKind::kExA:
      return 1;
    case RuleKind::kExAG:
      return record.gold_sentence == 1 ? 1 : 0;
    case RuleKind::kExAT:
      return record.gold_token == 1 ? 1 : 0;
  }
  return 0;
}

struct AuditedToken {
  int raw = 0;
  int admitted = 0;
  std::optional<Match> match;  // looked up for raw positives only
};

struct AuditedInstance {
  int sentence_pred = 0;
  std::vector<AuditedToken> tokens;
};

inline std::vector<float> to_float(std::span<const double> v) {
  return std::vector<float>(v.begin(), v.end());
}

inline AuditedInstance audit(const BladeModel& model, const ExemplarDatabase& db,
                             const Example& ex, const DecisionRule& rule, double offset,
                             std::size_t threads = 1) {
  if (db.dim != model.filters()) throw DataError("database dimension does not match the model");
  const auto trace = forward(model, ex.indexed, ex.external);
  const auto dec = decompose(trace, model);
  const auto labels = label_tokens(dec, offset);
  const auto vectors = exemplar_vectors(trace);
  AuditedInstance out;
  out.sentence_pred = predict_sentence(trace);
  for (std::size_t w = 0; w < labels.size(); ++w) {
    AuditedToken tok;
    tok.raw = labels[w];
    if (tok.raw == 1) {
      const auto q = to_float(vectors[w]);
      tok.match = nearest(db, q, threads);
      tok.admitted = apply_rule(1, db.records[tok.match->index], tok.match->distance, rule);
    }
    out.tokens.push_back(tok);
  }
  return out;
}

// Binary layout: "BLEX", version u32, M u32, fingerprint[32], count u64, then
// fixed-width records (id hash u64, word u32, 4 x i8 labels, tag u16, M x f32).
inline std::vector<std::uint8_t> encode_db(const ExemplarDatabase& db) {
  ByteWriter w;
  w.put_magic("BLEX");
  w.put<std::uint32_t>(ExemplarDatabase::kVersion);
  w.put<std::uint32_t>(db.dim);
  w.put_bytes(db.checkpoint);
  w.put<std::uint64_t>(db.records.size());
  for (const auto& r : db.records) {
    if (r.vector.size() != db.dim) throw DataError("record dimension does not match the header");
    w.put<std::uint64_t>(r.id_hash);
    w.put<std::uint32_t>(r.word_index);
    w.put<std::int8_t>(r.token_pred);
    w.put<std::int8_t>(r.sentence_pred);
    w.put<std::int8_t>(r.gold_sentence);
    w.put<std::int8_t>(r.gold_token);
    w.put<std::uint16_t>(r.tag);
    for (float v : r.vector) w.put<float>(v);
  }
  return w.release();
}

inline ExemplarDatabase decode_db(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "exemplar database");
  r.expect_magic("BLEX");
  if (auto v = r.get<std::uint32_t>(); v != ExemplarDatabase::kVersion) {
    throw DataError("unsupported exemplar database version " + std::to_string(v));
  }
  ExemplarDatabase db;
  db.dim = r.get<std::uint32_t>();
  r.get_bytes(db.checkpoint);
  const auto count = r.get<std::uint64_t>();
  const std::uint64_t record_bytes = 8 + 4 + 4 + 2 + std::uint64_t{db.dim} * 4;
  if (count * record_bytes != r.remaining()) {
    throw DataError("exemplar database payload size does not match its header");
  }
  db.records.resize(count);
  for (auto& rec : db.records) {
    rec.id_hash = r.get<std::uint64_t>();
    rec.word_index = r.get<std::uint32_t>();
    rec.token_pred = r.get<std::int8_t>();
    rec.sentence_pred = r.get<std::int8_t>();
    rec.gold_sentence = r.get<std::int8_t>();
    rec.gold_token = r.get<std::int8_t>();
    rec.tag = r.get<std::uint16_t>();
    rec.vector.resize(db.dim);
    for (auto& v : rec.vector) v = r.get<float>();
  }
  return db;
}

inline std::filesystem::path db_sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".texts.jsonl";
  return p;
}

inline std::string encode_sidecar(const ExemplarDatabase& db) {
  std::string out;
  for (std::size_t i = 0; i < db.tags.size(); ++i) {
    nlohmann::json j{{"kind", "tag"}, {"tag", i}, {"name", db.tags[i]}};
    out += j.dump() + '\n';
  }
  for (const auto& [hash, text] : db.texts) {
    nlohmann::json j{{"kind", "text"}, {"id_hash", hash}, {"id", text.id}, {"tokens", text.tokens}};
    out += j.dump() + '\n';
  }
  return out;
}

inline void save_db(const std::filesystem::path& path, const ExemplarDatabase& db) {
  write_file_atomic(db_sidecar_path(path), encode_sidecar(db));
  write_file_atomic(path, encode_db(db));
}

inline ExemplarDatabase load_db(const std::filesystem::path& path) {
  auto db = decode_db(read_file_bytes(path));
  std::ifstream in(db_sidecar_path(path));
  std::string line;
  std::vector<std::string> tags;
  while (in && std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed database sidecar line");
    if (j.value("kind", "") == "tag") {
      const auto idx = j.at("tag").get<std::size_t>();
      if (tags.size() <= idx) tags.resize(idx + 1);
      tags[idx] = j.at("name").get<std::string>();
    } else if (j.value("kind", "") == "text") {
      db.texts[j.at("id_hash").get<std::uint64_t>()] =
          DisplayText{j.at("id").get<std::string>(), j.at("tokens").get<std::vector<std::string>>()};
    }
  }
  if (!tags.empty()) db.tags = std::move(tags);
  return db;
}

}  // namespace blade
