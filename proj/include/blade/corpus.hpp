#pragma once

// Corpus records, vocabulary, and WordPiece/word alignment.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "blade/common.hpp"

namespace blade {

struct LabeledInstance {
  std::string id;
  std::vector<std::string> tokens;
  // Empty means one fragment per word.
  std::vector<std::uint32_t> wordpiece_counts;
  int sentence_label = 0;
  std::optional<std::vector<int>> token_labels;
  // Candidate-group metadata, only present in reranker inputs.
  std::optional<std::string> group_id;
  std::optional<int> original_len;

  std::size_t word_count() const { return tokens.size(); }

  std::uint32_t fragments(std::size_t word) const {
    return wordpiece_counts.empty() ? 1u : wordpiece_counts[word];
  }

  std::size_t wordpiece_total() const {
    std::size_t total = 0;
    for (std::size_t w = 0; w < tokens.size(); ++w) total += fragments(w);
    return total;
  }

  bool operator==(const LabeledInstance&) const = default;
};

struct CorpusSchema {
  bool require_token_labels = false;
  // Grammar-style corpora: sentence_label == 1 iff any token label is 1.
  bool sentence_label_is_any_token = false;
  bool require_group = false;
};

namespace detail {

inline int parse_binary_label(const nlohmann::json& v, const std::string& field) {
  if (!v.is_number_integer()) throw DataError(field + " must be an integer 0 or 1");
  const auto x = v.get<long long>();
  if (x != 0 && x != 1) throw DataError(field + " outside {0,1}: " + std::to_string(x));
  return static_cast<int>(x);
}

}  // namespace detail

inline LabeledInstance parse_instance(const nlohmann::json& j, std::size_t line_no,
                                      const CorpusSchema& schema) {
  if (!j.is_object()) throw DataError("record is not an object");
  LabeledInstance inst;
  if (auto it = j.find("id"); it != j.end()) {
    if (!it->is_string()) throw DataError("id must be a string");
    inst.id = it->get<std::string>();
  } else {
    inst.id = std::to_string(line_no);
  }
  auto tokens = j.find("tokens");
  if (tokens == j.end() || !tokens->is_array()) throw DataError("missing tokens array");
  for (const auto& t : *tokens) {
    if (!t.is_string()) throw DataError("tokens must be strings");
    inst.tokens.push_back(t.get<std::string>());
  }
  auto label = j.find("sentence_label");
  if (label == j.end()) throw DataError("missing sentence_label");
  inst.sentence_label = detail::parse_binary_label(*label, "sentence_label");

  if (auto it = j.find("token_labels"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw DataError("token_labels must be an array");
    std::vector<int> labels;
    for (const auto& v : *it) labels.push_back(detail::parse_binary_label(v, "token_labels"));
    if (labels.size() != inst.tokens.size()) {
      throw DataError("token_labels length " + std::to_string(labels.size()) +
                      " does not match token count " + std::to_string(inst.tokens.size()));
    }
    inst.token_labels = std::move(labels);
  } else if (schema.require_token_labels) {
    throw DataError("missing token_labels");
  }

  if (auto it = j.find("wordpiece_counts"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw DataError("wordpiece_counts must be an array");
    for (const auto& v : *it) {
      if (!v.is_number_integer() || v.get<long long>() < 1) {
        throw DataError("wordpiece_counts must be positive integers");
      }
      inst.wordpiece_counts.push_back(v.get<std::uint32_t>());
    }
    if (inst.wordpiece_counts.size() != inst.tokens.size()) {
      throw DataError("wordpiece_counts length does not match token count");
    }
  }

  if (auto it = j.find("group_id"); it != j.end()) {
    if (!it->is_string()) throw DataError("group_id must be a string");
    inst.group_id = it->get<std::string>();
  }
  if (auto it = j.find("original_len"); it != j.end()) {
    if (!it->is_number_integer() || it->get<long long>() < 0) {
      throw DataError("original_len must be a non-negative integer");
    }
    inst.original_len = it->get<int>();
  }
  if (schema.require_group && (!inst.group_id || !inst.original_len)) {
    throw DataError("missing group_id/original_len");
  }

  if (schema.sentence_label_is_any_token && inst.token_labels) {
    const bool any = std::ranges::any_of(*inst.token_labels, [](int y) { return y == 1; });
    if (any != (inst.sentence_label == 1)) {
      throw DataError("sentence_label disagrees with token_labels");
    }
  }
  return inst;
}

inline std::vector<LabeledInstance> parse_corpus(std::istream& in,
                                                 const CorpusSchema& schema = {}) {
  std::vector<LabeledInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_instance(nlohmann::json::parse(line), line_no, schema));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<LabeledInstance> load_corpus(const std::filesystem::path& path,
                                                const CorpusSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus " + path.string());
  return parse_corpus(in, schema);
}

inline nlohmann::json to_json(const LabeledInstance& inst) {
  nlohmann::json j;
  j["id"] = inst.id;
  j["tokens"] = inst.tokens;
  j["sentence_label"] = inst.sentence_label;
  if (inst.token_labels) j["token_labels"] = *inst.token_labels;
  if (!inst.wordpiece_counts.empty()) j["wordpiece_counts"] = inst.wordpiece_counts;
  if (inst.group_id) j["group_id"] = *inst.group_id;
  if (inst.original_len) j["original_len"] = *inst.original_len;
  return j;
}

inline std::string serialize_corpus(std::span<const LabeledInstance> corpus) {
  std::string out;
  for (const auto& inst : corpus) {
    out += to_json(inst).dump();
    out += '\n';
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kUnk = 1;

  Vocabulary() : tokens_{"<pad>", "<unk>"} { reindex(); }

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2) throw DataError("vocabulary needs pad and unk entries");
    reindex();
    if (index_.size() + 2 != tokens_.size()) throw DataError("duplicate vocabulary entry");
  }

  std::size_t size() const { return tokens_.size(); }

  std::int32_t index(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(std::size_t i) const { return tokens_.at(i); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::string serialize() const {
    std::string out;
    for (const auto& t : tokens_) out += t + '\n';
    return out;
  }

  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return Vocabulary(std::move(tokens));
  }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void reindex() {
    index_.clear();
    // Reserved entries are never looked up by surface form.
    for (std::size_t i = 2; i < tokens_.size(); ++i) {
      index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
    }
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// The size-2 most frequent tokens get indices 2.., ties broken lexicographically.
inline Vocabulary build_vocab(std::span<const LabeledInstance> corpus, std::size_t size) {
  if (size < 2) throw UsageError("vocabulary size must be at least 2");
  std::map<std::string, std::size_t> counts;
  for (const auto& inst : corpus) {
    for (const auto& t : inst.tokens) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::ranges::stable_sort(ranked, [](const auto& a, const auto& b) {
    return a.second > b.second;
  });
  std::vector<std::string> tokens{"<pad>", "<unk>"};
  for (const auto& [tok, n] : ranked) {
    if (tokens.size() >= size) break;
    tokens.push_back(tok);
  }
  return Vocabulary(std::move(tokens));
}

// Half-open WordPiece range of one word.
struct WordSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const WordSpan&) const = default;
};

using Alignment = std::vector<WordSpan>;

inline Alignment make_alignment(std::span<const std::uint32_t> fragment_counts) {
  Alignment a;
  std::size_t pos = 0;
  for (auto c : fragment_counts) {
    if (c == 0) throw DataError("fragment count must be positive");
    a.push_back({pos, pos + c});
    pos += c;
  }
  return a;
}

inline std::size_t aligned_length(const Alignment& a) { return a.empty() ? 0 : a.back().end; }

inline std::vector<double> average_over_fragments(std::span<const double> scores,
                                                  const Alignment& alignment) {
  if (scores.size() != aligned_length(alignment)) {
    throw DataError("score length " + std::to_string(scores.size()) +
                    " does not match fragment total " +
                    std::to_string(aligned_length(alignment)));
  }
  std::vector<double> out;
  out.reserve(alignment.size());
  for (const auto& w : alignment) {
    double sum = 0.0;
    for (std::size_t i = w.begin; i < w.end; ++i) sum += scores[i];
    out.push_back(sum / static_cast<double>(w.size()));
  }
  return out;
}

struct IndexedInstance {
  // Vocabulary index per WordPiece position; every fragment of a word carries
  // the word's index. Padding positions hold Vocabulary::kPad.
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;  // 1 = real token, 0 = padding
  Alignment alignment;             // words kept after truncation

  std::size_t length() const { return ids.size(); }
  std::size_t unpadded_length() const { return aligned_length(alignment); }
  std::size_t word_count() const { return alignment.size(); }
};

// Truncates at a word boundary to at most max_len WordPieces, then pads at the
// end so that the sequence is at least min_len long.
inline IndexedInstance index_instance(const LabeledInstance& inst, const Vocabulary& vocab,
                                      std::size_t min_len, std::size_t max_len) {
  IndexedInstance out;
  std::size_t pos = 0;
  for (std::size_t w = 0; w < inst.word_count(); ++w) {
    const std::size_t frags = inst.fragments(w);
    if (pos + frags > max_len) break;
    out.alignment.push_back({pos, pos + frags});
    const auto id = vocab.index(inst.tokens[w]);
    for (std::size_t f = 0; f < frags; ++f) {
      out.ids.push_back(id);
      out.mask.push_back(1);
    }
    pos += frags;
  }
  while (out.ids.size() < min_len) {
    out.ids.push_back(Vocabulary::kPad);
    out.mask.push_back(0);
  }
  return out;
}

}  // namespace blade
