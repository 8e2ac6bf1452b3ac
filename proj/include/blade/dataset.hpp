#pragma once

// Model-ready examples: indexed, padded, with frozen rows and aligned labels.

#include <optional>
#include <span>
#include <vector>

#include "blade/corpus.hpp"
#include "blade/embeddings.hpp"
#include "blade/model.hpp"

namespace blade {

inline constexpr std::size_t kSentenceMaxLen = 50;
inline constexpr std::size_t kDocumentMaxLen = 350;

struct Example {
  std::size_t source = 0;  // index into the originating corpus
  IndexedInstance indexed;
  std::vector<double> external;  // N x D_e
  int sentence_label = 0;
  // Word labels for the kept (possibly truncated) words.
  std::optional<std::vector<int>> word_labels;

  std::size_t word_count() const { return indexed.word_count(); }

  // Each WordPiece inherits the label of its word; padding is -1.
  std::vector<int> wordpiece_labels() const {
    if (!word_labels) throw DataError("example has no token labels");
    std::vector<int> out(indexed.length(), -1);
    for (std::size_t w = 0; w < indexed.alignment.size(); ++w) {
      for (auto i = indexed.alignment[w].begin; i < indexed.alignment[w].end; ++i) {
        out[i] = (*word_labels)[w];
      }
    }
    return out;
  }
};

inline Example make_example(const LabeledInstance& inst, std::size_t source,
                            const Vocabulary& vocab, const BladeModel& model,
                            const SentenceEmbedding* embedding, std::uint32_t embedding_dim,
                            std::size_t max_len) {
  Example ex;
  ex.source = source;
  ex.indexed = index_instance(inst, vocab, model.max_width(), max_len);
  ex.sentence_label = inst.sentence_label;
  if (inst.token_labels) {
    ex.word_labels = std::vector<int>(inst.token_labels->begin(),
                                      inst.token_labels->begin() +
                                          static_cast<std::ptrdiff_t>(ex.indexed.word_count()));
  }
  if (model.external_dim() > 0) {
    if (embedding == nullptr) throw DataError("model needs external embeddings for " + inst.id);
    if (embedding_dim != model.external_dim()) {
      throw DataError("embedding dimension " + std::to_string(embedding_dim) +
                      " does not match the model's " + std::to_string(model.external_dim()));
    }
    ex.external = external_rows(*embedding, embedding_dim, inst, ex.indexed);
  }
  return ex;
}

// Sentence i of the embedding file pairs with instance i of the corpus.
inline std::vector<Example> make_examples(std::span<const LabeledInstance> corpus,
                                          const Vocabulary& vocab, const BladeModel& model,
                                          const EmbeddingFile* embeddings,
                                          std::size_t max_len = kSentenceMaxLen) {
  if (model.external_dim() > 0) {
    if (embeddings == nullptr) throw DataError("model needs an embedding file");
    if (embeddings->sentences.size() != corpus.size()) {
      throw DataError("embedding file has " + std::to_string(embeddings->sentences.size()) +
                      " sentences, corpus has " + std::to_string(corpus.size()));
    }
  }
  std::vector<Example> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const SentenceEmbedding* sentence = nullptr;
    if (model.external_dim() > 0) {
      sentence = &embeddings->sentences[i];
      if (i < embeddings->ids.size() && embeddings->ids[i] != corpus[i].id) {
        throw DataError("embedding sentence " + std::to_string(i) + " belongs to " +
                        embeddings->ids[i] + ", corpus has " + corpus[i].id);
      }
    }
    out.push_back(make_example(corpus[i], i, vocab, model, sentence,
                               embeddings ? embeddings->dim : 0, max_len));
  }
  return out;
}

}  // namespace blade
