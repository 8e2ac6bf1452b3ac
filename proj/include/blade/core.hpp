#pragma once

// Forward pass of the convolutional classifier and its per-token
// decomposition into class contribution scores.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "blade/common.hpp"
#include "blade/corpus.hpp"
#include "blade/model.hpp"

namespace blade {

struct ForwardTrace {
  std::size_t length = 0;  // N, padding included
  std::size_t dim = 0;     // D = D_w + D_e
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> mask;
  Alignment alignment;
  std::vector<double> input;                     // N x D, position-major
  std::vector<std::vector<double>> feature_maps;  // h_m, length N - K_m + 1
  std::vector<double> pooled;                    // g_m = max ReLU(h_m)
  std::vector<std::size_t> argmax;               // n_m, first maximal index
  std::vector<double> dropout_scale;             // 1 at inference
  std::array<double, kClasses> logits{};
  std::array<double, kClasses> probs{};

  // g_m after dropout, the value the output layer actually sees.
  double effective(std::size_t m) const { return pooled[m] * dropout_scale[m]; }

  bool operator==(const ForwardTrace&) const = default;
};

inline std::array<double, kClasses> softmax(const std::array<double, kClasses>& z) {
  const double hi = std::max(z[0], z[1]);
  const double e0 = std::exp(z[0] - hi);
  const double e1 = std::exp(z[1] - hi);
  return {e0 / (e0 + e1), e1 / (e0 + e1)};
}

namespace detail {

inline std::vector<double> assemble_input(const BladeModel& model, const IndexedInstance& inst,
                                          std::span<const double> external_rows) {
  const std::size_t n = inst.length();
  const std::size_t dw = model.word_dim();
  const std::size_t de = model.external_dim();
  if (de > 0 && external_rows.size() != n * de) {
    throw DataError("external rows: expected " + std::to_string(n) + " x " + std::to_string(de) +
                    " values, got " + std::to_string(external_rows.size()));
  }
  if (de == 0 && !external_rows.empty()) {
    throw DataError("external rows supplied to a model without external dimensions");
  }
  const auto& emb = model.params().embeddings;
  std::vector<double> input(n * model.dim());
  for (std::size_t pos = 0; pos < n; ++pos) {
    const auto id = static_cast<std::size_t>(inst.ids[pos]);
    if (id >= model.vocab_size()) throw DataError("token index outside the vocabulary");
    double* row = input.data() + pos * model.dim();
    std::copy_n(emb.data() + id * dw, dw, row);
    std::copy_n(external_rows.data() + pos * de, de, row + dw);
  }
  return input;
}

}  // namespace detail

// Forward pass with an explicit per-filter dropout scale (empty = no dropout).
inline ForwardTrace forward_with_scale(const BladeModel& model, const IndexedInstance& inst,
                                       std::span<const double> external_rows,
                                       std::span<const double> dropout_scale) {
  const std::size_t n = inst.length();
  if (n < model.max_width()) {
    throw DataError("sequence length " + std::to_string(n) + " is shorter than filter width " +
                    std::to_string(model.max_width()));
  }
  if (!dropout_scale.empty() && dropout_scale.size() != model.filters()) {
    throw DataError("dropout scale length does not match filter count");
  }
  ForwardTrace t;
  t.length = n;
  t.dim = model.dim();
  t.ids = inst.ids;
  t.mask = inst.mask;
  t.alignment = inst.alignment;
  t.input = detail::assemble_input(model, inst, external_rows);

  const std::size_t d = model.dim();
  const std::size_t m_count = model.filters();
  t.feature_maps.resize(m_count);
  t.pooled.assign(m_count, 0.0);
  t.argmax.assign(m_count, 0);
  for (std::size_t m = 0; m < m_count; ++m) {
    const std::size_t k_width = model.width(m);
    const auto w = model.filter(m);
    const double bias = model.params().filter_bias[m];
    auto& h = t.feature_maps[m];
    h.assign(n - k_width + 1, 0.0);
    for (std::size_t j = 0; j < h.size(); ++j) {
      double acc = bias;
      for (std::size_t k = 0; k < k_width; ++k) {
        const double* x = t.input.data() + (j + k) * d;
        for (std::size_t i = 0; i < d; ++i) acc += w[i * k_width + k] * x[i];
      }
      h[j] = acc;
    }
    // ReLU then maxpool; strict comparison keeps the first maximal index, and
    // an all-nonpositive map pools to 0 at index 0.
    double best = 0.0;
    std::size_t where = 0;
    for (std::size_t j = 0; j < h.size(); ++j) {
      const double r = std::max(h[j], 0.0);
      if (r > best) {
        best = r;
        where = j;
      }
    }
    t.pooled[m] = best;
    t.argmax[m] = where;
  }

  t.dropout_scale.assign(dropout_scale.begin(), dropout_scale.end());
  if (t.dropout_scale.empty()) t.dropout_scale.assign(m_count, 1.0);

  for (std::size_t c = 0; c < kClasses; ++c) {
    double z = model.params().output_bias[c];
    for (std::size_t m = 0; m < m_count; ++m) z += model.out_weight(c, m) * t.effective(m);
    t.logits[c] = z;
  }
  t.probs = softmax(t.logits);
  return t;
}

// Inference-mode forward pass; deterministic.
inline ForwardTrace forward(const BladeModel& model, const IndexedInstance& inst,
                            std::span<const double> external_rows = {}) {
  return forward_with_scale(model, inst, external_rows, {});
}

// Inverted dropout on the pooled vector.
inline std::vector<double> sample_dropout(std::size_t filters, double rate, Rng& rng) {
  std::vector<double> scale(filters, 1.0);
  if (rate <= 0.0) return scale;
  const double keep = 1.0 / (1.0 - rate);
  for (auto& s : scale) s = rng.bernoulli(rate) ? 0.0 : keep;
  return scale;
}

inline ForwardTrace forward_train(const BladeModel& model, const IndexedInstance& inst,
                                  std::span<const double> external_rows, double dropout_rate,
                                  Rng& rng) {
  const auto scale = sample_dropout(model.filters(), dropout_rate, rng);
  return forward_with_scale(model, inst, external_rows, scale);
}

inline int predict_sentence(const ForwardTrace& trace) {
  return trace.probs[1] > trace.probs[0] ? 1 : 0;
}

struct TokenDecomposition {
  // Per WordPiece position, padding included.
  std::vector<double> negative;  // s-
  std::vector<double> positive;  // s+
  std::vector<double> combined;  // s+- = s+ - s-
  std::vector<std::uint8_t> mask;
  // Per word, averaged over fragments; padding excluded.
  std::vector<double> word_negative;
  std::vector<double> word_positive;
  std::vector<double> word_combined;
  std::array<double, kClasses> bias{};

  std::size_t word_count() const { return word_combined.size(); }
};

// Credits W[c][m] * g_m to every position covered by filter m's surviving
// window, then adds b_c everywhere.
inline TokenDecomposition decompose(const ForwardTrace& trace, const BladeModel& model) {
  if (model.params().output_bias.size() != kClasses) {
    throw UsageError("decomposition requires exactly two classes");
  }
  TokenDecomposition dec;
  const std::size_t n = trace.length;
  dec.bias = {model.params().output_bias[0], model.params().output_bias[1]};
  dec.negative.assign(n, 0.0);
  dec.positive.assign(n, 0.0);
  for (std::size_t m = 0; m < model.filters(); ++m) {
    const double g = trace.effective(m);
    const double neg = model.out_weight(0, m) * g;
    const double pos = model.out_weight(1, m) * g;
    for (std::size_t k = 0; k < model.width(m); ++k) {
      dec.negative[trace.argmax[m] + k] += neg;
      dec.positive[trace.argmax[m] + k] += pos;
    }
  }
  dec.combined.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    dec.negative[i] += dec.bias[0];
    dec.positive[i] += dec.bias[1];
    dec.combined[i] = dec.positive[i] - dec.negative[i];
  }
  dec.mask = trace.mask;
  const std::size_t real = aligned_length(trace.alignment);
  dec.word_negative =
      average_over_fragments(std::span(dec.negative).first(real), trace.alignment);
  dec.word_positive =
      average_over_fragments(std::span(dec.positive).first(real), trace.alignment);
  dec.word_combined =
      average_over_fragments(std::span(dec.combined).first(real), trace.alignment);
  return dec;
}

// Word labels: positive iff s+- > offset (strict).
inline std::vector<int> label_tokens(const TokenDecomposition& dec, double offset = 0.0) {
  std::vector<int> labels;
  labels.reserve(dec.word_count());
  for (double s : dec.word_combined) labels.push_back(s > offset ? 1 : 0);
  return labels;
}

inline std::size_t count_detections(const TokenDecomposition& dec, double offset = 0.0) {
  return static_cast<std::size_t>(
      std::ranges::count_if(dec.word_combined, [&](double s) { return s > offset; }));
}

// Raw (pre-ReLU) feature-map column at each word, averaged over fragments.
// Only defined for models whose filters all have width 1.
inline std::vector<std::vector<double>> exemplar_vectors(const ForwardTrace& trace) {
  for (const auto& h : trace.feature_maps) {
    if (h.size() != trace.length) {
      throw UsageError("exemplar vectors require every filter width to be 1");
    }
  }
  const std::size_t m_count = trace.feature_maps.size();
  std::vector<std::vector<double>> out;
  out.reserve(trace.alignment.size());
  for (const auto& word : trace.alignment) {
    std::vector<double> v(m_count, 0.0);
    for (std::size_t m = 0; m < m_count; ++m) {
      double sum = 0.0;
      for (std::size_t i = word.begin; i < word.end; ++i) sum += trace.feature_maps[m][i];
      v[m] = sum / static_cast<double>(word.size());
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace blade
