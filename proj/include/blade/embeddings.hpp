#pragma once

// Frozen per-WordPiece input embeddings ("BLEM" files) and a deterministic
// hash-based stub producer used when no pretrained encoder is available.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "blade/common.hpp"
#include "blade/corpus.hpp"

namespace blade {

struct SentenceEmbedding {
  std::uint64_t index = 0;
  std::vector<std::uint32_t> fragment_counts;  // one per word, sums to rows()
  std::vector<float> values;                   // rows() x dim, row-major

  std::size_t rows(std::size_t dim) const { return dim == 0 ? 0 : values.size() / dim; }
  bool operator==(const SentenceEmbedding&) const = default;
};

struct EmbeddingFile {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t dim = 0;
  std::vector<SentenceEmbedding> sentences;
  std::vector<std::string> ids;  // sidecar: sentence index -> instance id

  bool operator==(const EmbeddingFile&) const = default;
};

inline std::vector<std::uint8_t> encode_embeddings(const EmbeddingFile& file) {
  ByteWriter w;
  w.put_magic("BLEM");
  w.put<std::uint32_t>(EmbeddingFile::kVersion);
  w.put<std::uint32_t>(file.dim);
  w.put<std::uint64_t>(file.sentences.size());
  for (const auto& s : file.sentences) {
    std::uint64_t pieces = 0;
    for (auto c : s.fragment_counts) pieces += c;
    if (pieces * file.dim != s.values.size()) {
      throw DataError("embedding rows do not match fragment counts for sentence " +
                      std::to_string(s.index));
    }
    w.put<std::uint64_t>(s.index);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(pieces));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(s.fragment_counts.size()));
    for (auto c : s.fragment_counts) w.put<std::uint32_t>(c);
    for (float v : s.values) w.put<float>(v);
  }
  return w.release();
}

inline EmbeddingFile decode_embeddings(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, "embedding file");
  r.expect_magic("BLEM");
  if (auto v = r.get<std::uint32_t>(); v != EmbeddingFile::kVersion) {
    throw DataError("unsupported embedding file version " + std::to_string(v));
  }
  EmbeddingFile file;
  file.dim = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    SentenceEmbedding s;
    s.index = r.get<std::uint64_t>();
    const auto pieces = r.get<std::uint32_t>();
    const auto words = r.get<std::uint32_t>();
    std::uint64_t total = 0;
    for (std::uint32_t k = 0; k < words; ++k) {
      s.fragment_counts.push_back(r.get<std::uint32_t>());
      total += s.fragment_counts.back();
    }
    if (total != pieces) {
      throw DataError("fragment counts of sentence " + std::to_string(s.index) +
                      " do not sum to its WordPiece count");
    }
    const std::uint64_t n = static_cast<std::uint64_t>(pieces) * file.dim;
    if (r.remaining() < n * sizeof(float)) throw DataError("embedding file truncated");
    s.values.resize(n);
    r.get_bytes(std::span(reinterpret_cast<std::uint8_t*>(s.values.data()), n * sizeof(float)));
    file.sentences.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw DataError("trailing bytes after embedding payload");
  return file;
}

inline std::filesystem::path embedding_ids_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".ids";
  return p;
}

inline void save_embeddings(const std::filesystem::path& path, const EmbeddingFile& file) {
  std::string ids;
  for (std::size_t i = 0; i < file.ids.size(); ++i) {
    ids += std::to_string(i) + '\t' + file.ids[i] + '\n';
  }
  write_file_atomic(embedding_ids_path(path), ids);
  write_file_atomic(path, encode_embeddings(file));
}

inline EmbeddingFile load_embeddings(const std::filesystem::path& path) {
  auto file = decode_embeddings(read_file_bytes(path));
  std::ifstream in(embedding_ids_path(path));
  std::string line;
  while (in && std::getline(in, line)) {
    auto tab = line.find('\t');
    file.ids.push_back(tab == std::string::npos ? line : line.substr(tab + 1));
  }
  return file;
}

// Deterministic pseudo-embeddings: each (word, fragment) maps to a fixed
// vector in [-1, 1]^dim; with context_weight > 0 the sentence mean of those
// vectors is mixed in, giving rows that depend on the surrounding words.
inline EmbeddingFile stub_embeddings(std::span<const LabeledInstance> corpus, std::uint32_t dim,
                                     double context_weight = 0.0, std::uint64_t seed = 0) {
  EmbeddingFile file;
  file.dim = dim;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& inst = corpus[i];
    SentenceEmbedding s;
    s.index = i;
    std::vector<double> rows;
    for (std::size_t w = 0; w < inst.word_count(); ++w) {
      s.fragment_counts.push_back(inst.fragments(w));
      const auto base = fnv1a64(inst.tokens[w]) ^ seed;
      for (std::uint32_t f = 0; f < inst.fragments(w); ++f) {
        for (std::uint32_t d = 0; d < dim; ++d) {
          const auto h = splitmix64(base + splitmix64(f * 1315423911ULL + d));
          rows.push_back(static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0);
        }
      }
    }
    const std::size_t pieces = dim == 0 ? 0 : rows.size() / dim;
    std::vector<double> mean(dim, 0.0);
    for (std::size_t p = 0; p < pieces; ++p) {
      for (std::size_t d = 0; d < dim; ++d) mean[d] += rows[p * dim + d] / static_cast<double>(pieces);
    }
    for (std::size_t p = 0; p < pieces; ++p) {
      for (std::size_t d = 0; d < dim; ++d) {
        s.values.push_back(static_cast<float>(rows[p * dim + d] + context_weight * mean[d]));
      }
    }
    file.sentences.push_back(std::move(s));
    file.ids.push_back(inst.id);
  }
  return file;
}

// Frozen rows for one indexed instance: N x dim in doubles, padding rows zero.
inline std::vector<double> external_rows(const SentenceEmbedding& sentence, std::uint32_t dim,
                                         const LabeledInstance& inst,
                                         const IndexedInstance& indexed) {
  if (sentence.fragment_counts.size() != inst.word_count()) {
    throw DataError("embedding sentence " + std::to_string(sentence.index) + " has " +
                    std::to_string(sentence.fragment_counts.size()) + " words, instance " +
                    inst.id + " has " + std::to_string(inst.word_count()));
  }
  for (std::size_t w = 0; w < inst.word_count(); ++w) {
    if (sentence.fragment_counts[w] != inst.fragments(w)) {
      throw DataError("fragment counts of instance " + inst.id + " disagree with embeddings");
    }
  }
  std::vector<double> rows(indexed.length() * dim, 0.0);
  const std::size_t keep = indexed.unpadded_length() * dim;
  for (std::size_t i = 0; i < keep; ++i) rows[i] = sentence.values[i];
  return rows;
}

}  // namespace blade
