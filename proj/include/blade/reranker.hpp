#pragma once

// Detection-constrained selection among candidate completions of a prefix.

#include <cstdlib>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "blade/core.hpp"
#include "blade/dataset.hpp"
#include "blade/evaluation.hpp"

namespace blade {

struct CandidateGroup {
  std::string id;
  std::size_t original_len = 0;
  std::vector<std::size_t> candidates;  // indices into the corpus / examples
};

// Groups by group_id in order of first appearance; candidates with identical
// token sequences within a group are dropped after the first.
inline std::vector<CandidateGroup> group_candidates(std::span<const LabeledInstance> corpus) {
  std::vector<CandidateGroup> groups;
  std::map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& inst = corpus[i];
    if (!inst.group_id || !inst.original_len) {
      throw DataError("candidate " + inst.id + " lacks group_id/original_len");
    }
    auto [it, inserted] = where.try_emplace(*inst.group_id, groups.size());
    if (inserted) {
      groups.push_back({*inst.group_id, static_cast<std::size_t>(*inst.original_len), {}});
    }
    auto& g = groups[it->second];
    const bool duplicate = std::ranges::any_of(
        g.candidates, [&](std::size_t j) { return corpus[j].tokens == inst.tokens; });
    if (!duplicate) g.candidates.push_back(i);
  }
  return groups;
}

inline Rng group_rng(std::uint64_t seed, const std::string& group_id) {
  return Rng(splitmix64(seed ^ fnv1a64(group_id)));
}

struct Selection {
  std::string group_id;
  std::size_t chosen = 0;  // corpus index
  std::string chosen_id;
  std::size_t detections = 0;
  std::size_t pool_size = 0;
  double pool_mean = 0.0;
  std::size_t pool_min = 0;
  std::vector<int> tokens;  // token predictions of the chosen candidate
};

struct CandidateDetections {
  std::vector<int> labels;
  std::size_t count = 0;
  std::size_t words = 0;
};

inline std::vector<CandidateDetections> detect_all(const BladeModel& model,
                                                   std::span<const Example> examples,
                                                   double offset) {
  std::vector<CandidateDetections> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto trace = forward(model, ex.indexed, ex.external);
    const auto dec = decompose(trace, model);
    CandidateDetections d;
    d.labels = label_tokens(dec, offset);
    d.count = static_cast<std::size_t>(std::ranges::count(d.labels, 1));
    d.words = ex.word_count();
    out.push_back(std::move(d));
  }
  return out;
}

// Keeps the candidates with the fewest detections, then those closest in word
// length to the original, then picks uniformly with the group's generator.
inline Selection select_candidate(const CandidateGroup& group,
                                  std::span<const CandidateDetections> detections,
                                  std::span<const LabeledInstance> corpus, std::uint64_t seed) {
  if (group.candidates.empty()) throw DataError("candidate group " + group.id + " is empty");
  std::size_t min_count = SIZE_MAX;
  double sum = 0.0;
  for (auto i : group.candidates) {
    min_count = std::min(min_count, detections[i].count);
    sum += static_cast<double>(detections[i].count);
  }
  std::size_t best_gap = SIZE_MAX;
  std::vector<std::size_t> tied;
  for (auto i : group.candidates) {
    if (detections[i].count != min_count) continue;
    const auto len = detections[i].words;
    const std::size_t gap = len > group.original_len ? len - group.original_len
                                                     : group.original_len - len;
    if (gap < best_gap) {
      best_gap = gap;
      tied.clear();
    }
    if (gap == best_gap) tied.push_back(i);
  }
  auto rng = group_rng(seed, group.id);
  const std::size_t chosen = tied[rng.below(tied.size())];
  Selection s;
  s.group_id = group.id;
  s.chosen = chosen;
  s.chosen_id = corpus[chosen].id;
  s.detections = detections[chosen].count;
  s.pool_size = group.candidates.size();
  s.pool_mean = sum / static_cast<double>(group.candidates.size());
  s.pool_min = min_count;
  s.tokens = detections[chosen].labels;
  return s;
}

inline std::vector<Selection> rerank(const BladeModel& model,
                                     std::span<const LabeledInstance> corpus,
                                     std::span<const Example> examples,
                                     std::span<const CandidateGroup> groups, std::uint64_t seed,
                                     double offset = 0.0) {
  const auto detections = detect_all(model, examples, offset);
  std::vector<Selection> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(select_candidate(g, detections, corpus, seed));
  return out;
}

// Uniform choice per group, ignoring detections; the comparison point for
// reranking.
inline std::vector<Selection> random_selection(std::span<const CandidateGroup> groups,
                                               std::span<const CandidateDetections> detections,
                                               std::span<const LabeledInstance> corpus,
                                               std::uint64_t seed) {
  std::vector<Selection> out;
  for (const auto& g : groups) {
    if (g.candidates.empty()) throw DataError("candidate group " + g.id + " is empty");
    auto rng = group_rng(seed ^ 0x5eedULL, g.id);
    const auto chosen = g.candidates[rng.below(g.candidates.size())];
    Selection s;
    s.group_id = g.id;
    s.chosen = chosen;
    s.chosen_id = corpus[chosen].id;
    s.detections = detections[chosen].count;
    s.pool_size = g.candidates.size();
    s.tokens = detections[chosen].labels;
    out.push_back(std::move(s));
  }
  return out;
}

struct RerankEval {
  PRF prf;
  double mean_detections = 0.0;
};

inline RerankEval rerank_eval(std::span<const Selection> selections,
                              std::span<const LabeledInstance> corpus, double beta = 0.5) {
  Confusion c;
  double detections = 0.0;
  for (const auto& s : selections) {
    const auto& inst = corpus[s.chosen];
    if (!inst.token_labels) throw DataError("candidate " + inst.id + " has no gold token labels");
    const std::span<const int> gold(inst.token_labels->data(), s.tokens.size());
    c += confusion(s.tokens, gold);
    detections += static_cast<double>(s.detections);
  }
  RerankEval e;
  e.prf = prf(c, beta);
  e.mean_detections = selections.empty() ? 0.0 : detections / static_cast<double>(selections.size());
  return e;
}

}  // namespace blade
