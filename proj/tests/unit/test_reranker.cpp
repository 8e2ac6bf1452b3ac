#include <gtest/gtest.h>

#include "blade/reranker.hpp"
#include "support/fixtures.hpp"

namespace blade {
namespace {

LabeledInstance candidate(std::string id, std::string group, std::size_t len, int original) {
  LabeledInstance inst;
  inst.id = std::move(id);
  for (std::size_t i = 0; i < len; ++i) inst.tokens.push_back(inst.id + "_" + std::to_string(i));
  inst.group_id = std::move(group);
  inst.original_len = original;
  inst.token_labels = std::vector<int>(len, 0);
  return inst;
}

std::vector<CandidateDetections> counts(const std::vector<LabeledInstance>& corpus,
                                        const std::vector<std::size_t>& c) {
  std::vector<CandidateDetections> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    CandidateDetections d;
    d.count = c[i];
    d.words = corpus[i].word_count();
    d.labels.assign(d.words, 0);
    for (std::size_t k = 0; k < c[i]; ++k) d.labels[k] = 1;
    out.push_back(d);
  }
  return out;
}

TEST(Rerank, FewestDetectionsThenLength) {
  const std::vector<LabeledInstance> corpus{candidate("a", "g", 10, 10), candidate("b", "g", 9, 10),
                                            candidate("c", "g", 11, 10)};
  const auto groups = group_candidates(corpus);
  ASSERT_EQ(groups.size(), 1u);
  const auto det = counts(corpus, {3, 1, 1});
  std::set<std::size_t> seen;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto s = select_candidate(groups[0], det, corpus, seed);
    EXPECT_TRUE(s.chosen == 1 || s.chosen == 2);
    EXPECT_EQ(s.detections, 1u);
    EXPECT_EQ(s.pool_min, 1u);
    EXPECT_DOUBLE_EQ(s.pool_mean, 5.0 / 3.0);
    EXPECT_EQ(s.chosen, select_candidate(groups[0], det, corpus, seed).chosen);
    seen.insert(s.chosen);
  }
  EXPECT_EQ(seen.size(), 2u);
}

TEST(Rerank, CountDominatesLength) {
  const std::vector<LabeledInstance> corpus{candidate("a", "g", 50, 10), candidate("b", "g", 10, 10)};
  const auto groups = group_candidates(corpus);
  EXPECT_EQ(select_candidate(groups[0], counts(corpus, {0, 2}), corpus, 1).chosen, 0u);
}

TEST(Rerank, SingleCandidate) {
  const std::vector<LabeledInstance> corpus{candidate("a", "g", 4, 10)};
  const auto groups = group_candidates(corpus);
  EXPECT_EQ(select_candidate(groups[0], counts(corpus, {4}), corpus, 1).chosen, 0u);
}

TEST(Rerank, GroupsDeduplicateAndRequireMetadata) {
  auto a = candidate("a", "g1", 3, 3);
  auto b = a;
  b.id = "b";
  const auto c = candidate("c", "g2", 3, 3);
  const std::vector<LabeledInstance> corpus{a, c, b};
  const auto groups = group_candidates(corpus);
  ASSERT_EQ(groups.size(), 2u);
  EXPECT_EQ(groups[0].id, "g1");
  EXPECT_EQ(groups[0].candidates, (std::vector<std::size_t>{0}));
  auto bare = candidate("d", "g", 2, 2);
  bare.group_id.reset();
  EXPECT_THROW(group_candidates(std::vector<LabeledInstance>{bare}), DataError);
}

TEST(Rerank, EvalConventions) {
  const std::vector<LabeledInstance> corpus{candidate("a", "g", 3, 3)};
  const auto groups = group_candidates(corpus);
  const auto det = counts(corpus, {0});
  const std::vector<Selection> sel{select_candidate(groups[0], det, corpus, 1)};
  const auto e = rerank_eval(sel, corpus);
  EXPECT_EQ(e.prf.precision, 0.0);
  EXPECT_EQ(e.prf.recall, 0.0);
  EXPECT_EQ(e.prf.counts.tn, 3u);
  EXPECT_EQ(e.prf.counts.tp + e.prf.counts.fp + e.prf.counts.fn, 0u);
  EXPECT_EQ(e.mean_detections, 0.0);
}

TEST(Rerank, GroupRngDependsOnSeedAndGroup) {
  auto a = group_rng(1, "g");
  auto b = group_rng(1, "g");
  auto c = group_rng(1, "h");
  const auto x = a.next();
  EXPECT_EQ(x, b.next());
  EXPECT_NE(x, c.next());
}

}  // namespace
}  // namespace blade
