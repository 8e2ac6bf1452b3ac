#pragma once

// Precision / recall / F-beta over the positive class, baselines, and
// decision-boundary offset tuning.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "blade/common.hpp"

namespace blade {

struct Confusion {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  void add(int pred, int gold) {
    if (pred == 1 && gold == 1) ++tp;
    else if (pred == 1) ++fp;
    else if (gold == 1) ++fn;
    else ++tn;
  }

  Confusion& operator+=(const Confusion& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }

  std::uint64_t total() const { return tp + fp + fn + tn; }
  bool operator==(const Confusion&) const = default;
};

// Percent-scaled F-beta; zero when precision and recall are both zero.
inline double fbeta(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double denom = b2 * precision + recall;
  if (denom <= 0.0) return 0.0;
  return (1.0 + b2) * precision * recall / denom;
}

struct PRF {
  double precision = 0.0;  // [0, 100]
  double recall = 0.0;     // [0, 100]
  double f = 0.0;          // F-beta, [0, 100]
  double beta = 1.0;
  Confusion counts;
};

inline PRF prf(const Confusion& c, double beta) {
  PRF r;
  r.beta = beta;
  r.counts = c;
  // Undefined ratios (no predicted / no gold positives) report as 0.
  r.precision = c.tp + c.fp == 0 ? 0.0 : 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  r.recall = c.tp + c.fn == 0 ? 0.0 : 100.0 * static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  r.f = fbeta(r.precision, r.recall, beta);
  return r;
}

inline Confusion confusion(std::span<const int> pred, std::span<const int> gold) {
  if (pred.size() != gold.size()) {
    throw DataError("prediction length " + std::to_string(pred.size()) +
                    " does not match gold length " + std::to_string(gold.size()));
  }
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) c.add(pred[i], gold[i]);
  return c;
}

inline Confusion confusion(std::span<const std::vector<int>> pred,
                           std::span<const std::vector<int>> gold) {
  if (pred.size() != gold.size()) {
    throw DataError("prediction set has " + std::to_string(pred.size()) +
                    " sequences, gold has " + std::to_string(gold.size()));
  }
  Confusion c;
  for (std::size_t i = 0; i < pred.size(); ++i) c += confusion(pred[i], gold[i]);
  return c;
}

inline PRF prf(std::span<const std::vector<int>> pred, std::span<const std::vector<int>> gold,
               double beta) {
  return prf(confusion(pred, gold), beta);
}

inline PRF prf(std::span<const int> pred, std::span<const int> gold, double beta) {
  return prf(confusion(pred, gold), beta);
}

struct Baselines {
  PRF random;
  PRF majority;
};

// Fair-coin predictions, and the "majority class" baseline, which labels
// every token with the class of interest (1).
inline Baselines baselines(std::span<const std::vector<int>> gold, std::uint64_t seed,
                           double beta = 1.0) {
  std::size_t total = 0;
  for (const auto& seq : gold) total += seq.size();
  if (total == 0) throw DataError("baselines need at least one gold label");
  Rng rng(seed);
  Confusion random, constant;
  for (const auto& seq : gold) {
    for (int y : seq) {
      random.add(rng.bernoulli(0.5) ? 1 : 0, y);
      constant.add(1, y);
    }
  }
  return {prf(random, beta), prf(constant, beta)};
}

struct OffsetChoice {
  double offset = 0.0;
  double f = 0.0;
};

// Empirical quantiles of the pooled scores (nearest rank), plus 0.
inline std::vector<double> quantile_grid(std::span<const std::vector<double>> scores,
                                         std::size_t points = 1001) {
  std::vector<double> all;
  for (const auto& s : scores) all.insert(all.end(), s.begin(), s.end());
  std::vector<double> grid{0.0};
  if (!all.empty() && points > 0) {
    std::ranges::sort(all);
    const double last = static_cast<double>(all.size() - 1);
    for (std::size_t i = 0; i < points; ++i) {
      const double frac = points == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(points - 1);
      grid.push_back(all[static_cast<std::size_t>(std::llround(frac * last))]);
    }
  }
  std::ranges::sort(grid);
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

// Picks the offset maximizing token F-beta (default F0.5). Ties prefer the
// offset closest to 0, then the smaller offset.
inline OffsetChoice tune_offset(std::span<const std::vector<double>> word_scores,
                                std::span<const std::vector<int>> gold,
                                std::span<const double> grid, double beta = 0.5) {
  if (word_scores.empty() || grid.empty()) throw DataError("offset tuning needs data and a grid");
  if (word_scores.size() != gold.size()) throw DataError("score/gold instance count mismatch");
  OffsetChoice best{0.0, -1.0};
  for (double delta : grid) {
    Confusion c;
    for (std::size_t i = 0; i < word_scores.size(); ++i) {
      if (word_scores[i].size() != gold[i].size()) throw DataError("score/gold length mismatch");
      for (std::size_t w = 0; w < gold[i].size(); ++w) {
        c.add(word_scores[i][w] > delta ? 1 : 0, gold[i][w]);
      }
    }
    const double f = prf(c, beta).f;
    const bool better = f > best.f ||
                        (f == best.f && (std::abs(delta) < std::abs(best.offset) ||
                                         (std::abs(delta) == std::abs(best.offset) &&
                                          delta < best.offset)));
    if (better) best = {delta, f};
  }
  return best;
}

inline OffsetChoice tune_offset(std::span<const std::vector<double>> word_scores,
                                std::span<const std::vector<int>> gold, double beta = 0.5) {
  const auto grid = quantile_grid(word_scores);
  return tune_offset(word_scores, gold, grid, beta);
}

}  // namespace blade
