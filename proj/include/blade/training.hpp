#pragma once

// Losses at sentence, token, and min-max granularity; exact gradients;
// Adadelta; and the epoch loop with dev-metric checkpoint selection.

#include <chrono>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "blade/core.hpp"
#include "blade/dataset.hpp"
#include "blade/evaluation.hpp"
#include "blade/model.hpp"

namespace blade {

enum class LossKind { kSentence, kToken, kMinMax };
enum class DevMetric { kSentenceF1, kAccuracy, kTokenF05 };
enum class Trainable { kFull, kCnnOnly };

struct AdadeltaHyper {
  double rho = 0.95;
  double eps = 1e-6;
  double lr = 1.0;
};

struct TrainConfig {
  LossKind loss = LossKind::kSentence;
  std::size_t batch_size = 50;
  std::size_t max_epochs = 20;
  double dropout = 0.5;
  DevMetric metric = DevMetric::kSentenceF1;
  AdadeltaHyper adadelta;
  std::uint64_t seed = 1;
  Trainable trainable = Trainable::kFull;
  bool filter_bias = true;
  double offset = 0.0;  // decision boundary used by the token-F0.5 dev metric
};

inline constexpr double kProbFloor = 1e-12;

// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Binary cross-entropy of sigmoid(s) against y, computed from the logit.
inline double bce_logit(double s, int y) { return y == 1 ? softplus(-s) : softplus(s); }

inline double sentence_loss(const ForwardTrace& trace, int label,
                            std::size_t* clamped = nullptr) {
  double p = trace.probs[static_cast<std::size_t>(label)];
  if (p < kProbFloor) {
    p = kProbFloor;
    if (clamped != nullptr) ++*clamped;
  }
  return -std::log(p);
}

struct LossSum {
  double sum = 0.0;
  std::size_t count = 0;
};

// Sum of per-WordPiece BCE terms over non-padding positions. `labels` is
// per position; padding entries are ignored.
inline LossSum token_loss_terms(const TokenDecomposition& dec, std::span<const int> labels) {
  if (labels.size() != dec.combined.size()) throw DataError("token labels do not match positions");
  LossSum out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!dec.mask[i]) continue;
    out.sum += bce_logit(dec.combined[i], labels[i]);
    ++out.count;
  }
  return out;
}

inline double token_loss(const TokenDecomposition& dec, std::span<const int> labels) {
  const auto t = token_loss_terms(dec, labels);
  if (t.count == 0) throw DataError("token loss over an instance with no real tokens");
  return t.sum / static_cast<double>(t.count);
}

struct MinMaxPoints {
  std::size_t min_at = 0;
  std::size_t max_at = 0;
};

inline MinMaxPoints minmax_points(const TokenDecomposition& dec) {
  bool any = false;
  MinMaxPoints p;
  for (std::size_t i = 0; i < dec.combined.size(); ++i) {
    if (!dec.mask[i]) continue;
    if (!any) {
      p = {i, i};
      any = true;
      continue;
    }
    if (dec.combined[i] < dec.combined[p.min_at]) p.min_at = i;
    if (dec.combined[i] > dec.combined[p.max_at]) p.max_at = i;
  }
  if (!any) throw DataError("min-max loss over an instance with no real tokens");
  return p;
}

// (L_min + L_max) / 2 for one instance.
inline double minmax_loss(const TokenDecomposition& dec, int label) {
  const auto p = minmax_points(dec);
  const double l_min = softplus(dec.combined[p.min_at]);
  const double l_max = bce_logit(dec.combined[p.max_at], label);
  return 0.5 * (l_min + l_max);
}

struct BatchResult {
  double loss = 0.0;
  Parameters grads;
  std::size_t clamped = 0;
};

namespace detail {

// Accumulates gradients of one instance given dL/dlogit (sentence loss) or
// dL/ds+- per position (token-level losses).
inline void backprop_instance(const BladeModel& model, const ForwardTrace& t,
                              std::span<const double> dlogit, std::span<const double> dcombined,
                              Parameters& g) {
  const std::size_t m_count = model.filters();
  const std::size_t d = model.dim();
  const std::size_t dw = model.word_dim();
  std::vector<double> dgeff(m_count, 0.0);

  if (!dlogit.empty()) {
    for (std::size_t c = 0; c < kClasses; ++c) {
      g.output_bias[c] += dlogit[c];
      for (std::size_t m = 0; m < m_count; ++m) {
        g.output_weights[c * m_count + m] += dlogit[c] * t.effective(m);
        dgeff[m] += model.out_weight(c, m) * dlogit[c];
      }
    }
  }
  if (!dcombined.empty()) {
    double dsum = 0.0;
    for (double v : dcombined) dsum += v;
    g.output_bias[1] += dsum;
    g.output_bias[0] -= dsum;
    for (std::size_t m = 0; m < m_count; ++m) {
      double covered = 0.0;
      for (std::size_t k = 0; k < model.width(m); ++k) covered += dcombined[t.argmax[m] + k];
      if (covered == 0.0) continue;
      g.output_weights[m_count + m] += covered * t.effective(m);
      g.output_weights[m] -= covered * t.effective(m);
      dgeff[m] += covered * (model.out_weight(1, m) - model.out_weight(0, m));
    }
  }

  for (std::size_t m = 0; m < m_count; ++m) {
    // ReLU gate and maxpool routing: only the surviving window gets gradient.
    if (t.pooled[m] <= 0.0) continue;
    const double dh = dgeff[m] * t.dropout_scale[m];
    if (dh == 0.0) continue;
    const std::size_t k_width = model.width(m);
    const std::size_t start = t.argmax[m];
    const auto w = model.filter(m);
    double* gw = g.filters.data() + model.filter_offset(m);
    g.filter_bias[m] += dh;
    for (std::size_t k = 0; k < k_width; ++k) {
      const std::size_t pos = start + k;
      const double* x = t.input.data() + pos * d;
      for (std::size_t i = 0; i < d; ++i) gw[i * k_width + k] += dh * x[i];
      const auto id = static_cast<std::size_t>(t.ids[pos]);
      if (id == static_cast<std::size_t>(Vocabulary::kPad)) continue;
      double* ge = g.embeddings.data() + id * dw;
      for (std::size_t i = 0; i < dw; ++i) ge[i] += dh * w[i * k_width + k];
    }
  }
}

}  // namespace detail

// Batch loss and its exact gradient. `scales` holds one dropout scale vector
// per example (empty vector or empty span = no dropout).
inline BatchResult batch_gradients(const BladeModel& model,
                                   std::span<const Example* const> batch, LossKind kind,
                                   std::span<const std::vector<double>> scales = {},
                                   bool want_grads = true) {
  if (batch.empty()) throw DataError("empty batch");
  BatchResult out;
  if (want_grads) out.grads = model.params().zeros_like();
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  std::vector<ForwardTrace> traces;
  traces.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    std::span<const double> scale;
    if (!scales.empty()) scale = scales[b];
    traces.push_back(forward_with_scale(model, batch[b]->indexed, batch[b]->external, scale));
  }

  std::size_t token_count = 0;
  if (kind == LossKind::kToken) {
    for (const auto* ex : batch) {
      for (auto m : ex->indexed.mask) token_count += m;
    }
    if (token_count == 0) throw DataError("token loss over a batch with no real tokens");
  }

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& t = traces[b];
    const auto& ex = *batch[b];
    std::array<double, kClasses> dlogit{};
    std::vector<double> dcombined;
    switch (kind) {
      case LossKind::kSentence: {
        out.loss += sentence_loss(t, ex.sentence_label, &out.clamped) * inv_batch;
        for (std::size_t c = 0; c < kClasses; ++c) {
          dlogit[c] = (t.probs[c] - (static_cast<int>(c) == ex.sentence_label ? 1.0 : 0.0)) *
                      inv_batch;
        }
        break;
      }
      case LossKind::kToken: {
        const auto dec = decompose(t, model);
        const auto labels = ex.wordpiece_labels();
        const auto terms = token_loss_terms(dec, labels);
        const double inv_tokens = 1.0 / static_cast<double>(token_count);
        out.loss += terms.sum * inv_tokens;
        dcombined.assign(t.length, 0.0);
        for (std::size_t i = 0; i < t.length; ++i) {
          if (!dec.mask[i]) continue;
          dcombined[i] = (sigmoid(dec.combined[i]) - labels[i]) * inv_tokens;
        }
        break;
      }
      case LossKind::kMinMax: {
        const auto dec = decompose(t, model);
        const auto p = minmax_points(dec);
        out.loss += minmax_loss(dec, ex.sentence_label) * inv_batch;
        dcombined.assign(t.length, 0.0);
        dcombined[p.min_at] += 0.5 * sigmoid(dec.combined[p.min_at]) * inv_batch;
        dcombined[p.max_at] +=
            0.5 * (sigmoid(dec.combined[p.max_at]) - ex.sentence_label) * inv_batch;
        break;
      }
    }
    if (want_grads) {
      detail::backprop_instance(model, t,
                                kind == LossKind::kSentence ? std::span<const double>(dlogit)
                                                            : std::span<const double>(),
                                dcombined, out.grads);
    }
  }
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
  return out;
}

inline BatchResult batch_gradients(const BladeModel& model, std::span<const Example> batch,
                                   LossKind kind, std::span<const std::vector<double>> scales = {},
                                   bool want_grads = true) {
  std::vector<const Example*> ptrs;
  for (const auto& ex : batch) ptrs.push_back(&ex);
  return batch_gradients(model, ptrs, kind, scales, want_grads);
}

inline double batch_loss(const BladeModel& model, std::span<const Example> batch, LossKind kind,
                         std::span<const std::vector<double>> scales = {}) {
  return batch_gradients(model, batch, kind, scales, false).loss;
}

// Zeroes gradients of parameters the configuration keeps frozen.
inline void apply_freeze(Parameters& grads, Trainable trainable, bool filter_bias) {
  if (trainable == Trainable::kCnnOnly) {
    std::ranges::fill(grads.embeddings, 0.0);
    std::ranges::fill(grads.output_weights, 0.0);
    std::ranges::fill(grads.output_bias, 0.0);
  }
  if (!filter_bias) std::ranges::fill(grads.filter_bias, 0.0);
}

struct AdadeltaState {
  Parameters sq_grad;
  Parameters sq_update;

  static AdadeltaState for_model(const BladeModel& model) {
    return {model.params().zeros_like(), model.params().zeros_like()};
  }
};

// E[g^2] <- rho E[g^2] + (1-rho) g^2
// dx     <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
// E[dx^2] <- rho E[dx^2] + (1-rho) dx^2;  x <- x + lr * dx
inline void adadelta_step(Parameters& params, const Parameters& grads, AdadeltaState& state,
                          const AdadeltaHyper& hyper) {
  std::vector<std::span<double>> p, eg, ex;
  std::vector<std::span<const double>> g;
  params.for_each_block([&](ParamGroup, std::span<double> b) { p.push_back(b); });
  state.sq_grad.for_each_block([&](ParamGroup, std::span<double> b) { eg.push_back(b); });
  state.sq_update.for_each_block([&](ParamGroup, std::span<double> b) { ex.push_back(b); });
  grads.for_each_block([&](ParamGroup, std::span<const double> b) { g.push_back(b); });
  for (std::size_t blk = 0; blk < p.size(); ++blk) {
    if (g[blk].size() != p[blk].size() || eg[blk].size() != p[blk].size() ||
        ex[blk].size() != p[blk].size()) {
      throw DataError("optimizer state does not match parameter shapes");
    }
    for (std::size_t i = 0; i < p[blk].size(); ++i) {
      const double gi = g[blk][i];
      eg[blk][i] = hyper.rho * eg[blk][i] + (1.0 - hyper.rho) * gi * gi;
      const double dx =
          -std::sqrt(ex[blk][i] + hyper.eps) / std::sqrt(eg[blk][i] + hyper.eps) * gi;
      ex[blk][i] = hyper.rho * ex[blk][i] + (1.0 - hyper.rho) * dx * dx;
      const double next = p[blk][i] + hyper.lr * dx;
      if (!std::isfinite(next)) throw NumericError("non-finite parameter update");
      p[blk][i] = next;
    }
  }
}

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double dev_metric = 0.0;
  double wall_ms = 0.0;
};

struct TrainResult {
  BladeModel best;
  std::size_t best_epoch = 0;  // 0 = the initial model
  std::vector<EpochLog> log;
  std::size_t warnings = 0;
};

struct Prediction {
  int sentence = 0;
  double prob_positive = 0.0;
  std::vector<int> tokens;
  std::vector<double> word_scores;  // s+- per word
};

inline Prediction predict(const BladeModel& model, const Example& ex, double offset = 0.0) {
  const auto trace = forward(model, ex.indexed, ex.external);
  const auto dec = decompose(trace, model);
  return {predict_sentence(trace), trace.probs[1], label_tokens(dec, offset), dec.word_combined};
}

// Dev metric in percent; undefined F scores (no positives anywhere) count as 0.
inline double dev_metric(const BladeModel& model, std::span<const Example> dev, DevMetric metric,
                         double offset, std::size_t* warnings = nullptr) {
  Confusion sent, tok;
  std::size_t correct = 0;
  for (const auto& ex : dev) {
    const auto p = predict(model, ex, offset);
    sent.add(p.sentence, ex.sentence_label);
    correct += p.sentence == ex.sentence_label;
    if (metric == DevMetric::kTokenF05) {
      if (!ex.word_labels) throw DataError("token-F0.5 dev metric needs token labels");
      tok += confusion(p.tokens, *ex.word_labels);
    }
  }
  switch (metric) {
    case DevMetric::kAccuracy:
      return 100.0 * static_cast<double>(correct) / static_cast<double>(dev.size());
    case DevMetric::kSentenceF1:
      if (sent.tp + sent.fn == 0 && warnings != nullptr) ++*warnings;
      return prf(sent, 1.0).f;
    case DevMetric::kTokenF05:
      if (tok.tp + tok.fn == 0 && warnings != nullptr) ++*warnings;
      return prf(tok, 0.5).f;
  }
  return 0.0;
}

// Runs up to max_epochs epochs from `initial` and returns the checkpoint with
// the best dev metric (earliest epoch on ties).
inline TrainResult train(const BladeModel& initial, std::span<const Example> train_set,
                         std::span<const Example> dev, const TrainConfig& config) {
  if (dev.empty()) throw DataError("dev set is empty");
  if (config.batch_size < 1) throw UsageError("batch size must be >= 1");
  if (config.dropout < 0.0 || config.dropout >= 1.0) throw UsageError("dropout must be in [0,1)");
  TrainResult result;
  result.best = initial;
  if (config.max_epochs == 0) return result;
  if (train_set.empty()) throw DataError("training set is empty");

  BladeModel model = initial;
  auto state = AdadeltaState::for_model(model);
  Rng rng(config.seed);
  double best_metric = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> order(train_set.size());
  std::vector<const Example*> batch;
  std::vector<std::vector<double>> scales;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + config.batch_size);
      batch.clear();
      scales.clear();
      for (std::size_t i = lo; i < hi; ++i) {
        batch.push_back(&train_set[order[i]]);
        scales.push_back(sample_dropout(model.filters(), config.dropout, rng));
      }
      auto step = batch_gradients(model, batch, config.loss, scales);
      result.warnings += step.clamped;
      apply_freeze(step.grads, config.trainable, config.filter_bias);
      adadelta_step(model.params(), step.grads, state, config.adadelta);
      loss_sum += step.loss;
      ++batches;
    }
    std::size_t warnings = 0;
    const double metric = dev_metric(model, dev, config.metric, config.offset, &warnings);
    result.warnings += warnings;
    const auto elapsed = std::chrono::duration<double, std::milli>(
        std::chrono::steady_clock::now() - start);
    result.log.push_back({epoch, loss_sum / static_cast<double>(batches), metric, elapsed.count()});
    if (metric > best_metric) {
      best_metric = metric;
      result.best = model;
      result.best_epoch = epoch;
    }
  }
  return result;
}

}  // namespace blade
