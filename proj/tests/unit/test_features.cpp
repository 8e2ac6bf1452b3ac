#include <gtest/gtest.h>

#include "blade/features.hpp"
#include "support/fixtures.hpp"
#include "support/synthetic.hpp"

namespace blade {
namespace {

ScoredInstance scored(std::string id, std::vector<std::string> words, std::vector<double> neg,
                      int predicted = 0, double b0 = 0.25) {
  ScoredInstance s;
  s.id = std::move(id);
  s.words = std::move(words);
  for (auto& v : neg) v += b0;
  s.negative = neg;
  s.positive.assign(neg.size(), 0.0);
  s.bias = {b0, 0.0};
  s.predicted = predicted;
  return s;
}

TEST(Ngrams, WindowScoresAndSentenceScore) {
  const std::vector<ScoredInstance> in{scored("a", {"x", "y", "z"}, {2, 0, 1})};
  auto two = ngram_scores(in, ScoreClass::kNegative, 2, NgramMode::kTotal);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_EQ(two[0].text, "x y");
  EXPECT_DOUBLE_EQ(two[0].total, 2.0);
  EXPECT_EQ(two[1].text, "y z");
  EXPECT_DOUBLE_EQ(two[1].total, 1.0);
  const auto three = ngram_scores(in, ScoreClass::kNegative, 3, NgramMode::kTotal);
  ASSERT_EQ(three.size(), 1u);
  EXPECT_DOUBLE_EQ(three[0].total, 3.0);
  EXPECT_TRUE(ngram_scores(in, ScoreClass::kNegative, 4, NgramMode::kTotal).empty());
  EXPECT_THROW(ngram_scores(in, ScoreClass::kNegative, 0, NgramMode::kTotal), UsageError);
}

TEST(Ngrams, TotalsAndMeansAcrossOccurrences) {
  const std::vector<ScoredInstance> in{scored("a", {"not", "good"}, {1, 1}),
                                       scored("b", {"not", "good"}, {3, 1})};
  const auto r = ngram_scores(in, ScoreClass::kNegative, 2, NgramMode::kMean);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_DOUBLE_EQ(r[0].total, 6.0);
  EXPECT_EQ(r[0].count, 2u);
  EXPECT_DOUBLE_EQ(r[0].mean(), 3.0);
}

TEST(Ngrams, RestrictionUsesPredictedClass) {
  const std::vector<ScoredInstance> in{scored("a", {"x"}, {1}, 1)};
  EXPECT_TRUE(ngram_scores(in, ScoreClass::kNegative, 1, NgramMode::kTotal).empty());
  EXPECT_EQ(ngram_scores(in, ScoreClass::kNegative, 1, NgramMode::kTotal, false).size(), 1u);
}

TEST(Ngrams, RankingTiesByText) {
  const std::vector<ScoredInstance> in{scored("a", {"b", "a", "c"}, {1, 1, 2})};
  const auto r = ngram_scores(in, ScoreClass::kNegative, 1, NgramMode::kTotal);
  EXPECT_EQ(r[0].text, "c");
  EXPECT_EQ(r[1].text, "a");
  EXPECT_EQ(r[2].text, "b");
}

TEST(Ngrams, MeanRankingMatchesTotalWhenCountsEqual) {
  const std::vector<ScoredInstance> in{scored("a", {"p", "q", "r", "s"}, {0.5, -1, 3, 2})};
  const auto total = ngram_scores(in, ScoreClass::kNegative, 1, NgramMode::kTotal);
  const auto mean = ngram_scores(in, ScoreClass::kNegative, 1, NgramMode::kMean);
  ASSERT_EQ(total.size(), mean.size());
  for (std::size_t i = 0; i < total.size(); ++i) EXPECT_EQ(total[i].text, mean[i].text);
}

TEST(Sentences, ScoresAndNormalization) {
  const std::vector<ScoredInstance> one{scored("a", {"w"}, {5})};
  const auto s1 = sentence_scores(one, ScoreClass::kNegative, true);
  EXPECT_DOUBLE_EQ(s1[0].score, 5.0);
  EXPECT_DOUBLE_EQ(s1[0].normalized, 5.0);

  const std::vector<ScoredInstance> four{scored("b", {"a", "b", "c", "d"}, {1, 2, 3, 4})};
  const auto s4 = sentence_scores(four, ScoreClass::kNegative, true);
  EXPECT_DOUBLE_EQ(s4[0].score, 10.0);
  EXPECT_DOUBLE_EQ(s4[0].normalized, 2.5);

  const std::vector<ScoredInstance> flat{scored("c", {"a", "b"}, {0, 0})};
  EXPECT_EQ(sentence_scores(flat, ScoreClass::kNegative, false)[0].score, 0.0);
}

TEST(Sentences, TelescopesToUnigrams) {
  const auto corpus = testing::trigger_corpus({}, 30, 8);
  const auto vocab = build_vocab(corpus, 300);
  const auto model = init_model(testing::unicnn_shape(vocab.size(), 8, 6), 5);
  const auto ex = make_examples(corpus, vocab, model, nullptr);
  const auto inst = score_instances(model, corpus, ex);
  for (auto cls : {ScoreClass::kNegative, ScoreClass::kPositive}) {
    const auto sentences = sentence_scores(inst, cls, false);
    for (const auto& s : sentences) {
      const auto it = std::ranges::find_if(inst, [&](const ScoredInstance& i) { return i.id == s.id; });
      double sum = 0.0;
      for (std::size_t w = 0; w < it->words.size(); ++w) sum += it->corrected(cls, w);
      EXPECT_DOUBLE_EQ(s.score, sum);
    }
  }
}

TEST(Report, LayoutAndEdgeCases) {
  const std::vector<ScoredInstance> in{scored("a", {"x", "y"}, {2, 1}),
                                       scored("b", {"x", "z"}, {1, 1})};
  ReportOptions opt;
  opt.top_k = 50;
  std::vector<ClassFeatures> classes{
      {ScoreClass::kNegative, ngram_scores(in, ScoreClass::kNegative, 1, NgramMode::kTotal),
       sentence_scores(in, ScoreClass::kNegative, true)}};
  const auto text = render_report(classes, opt);
  EXPECT_NE(text.find("-- top 3 --"), std::string::npos);
  EXPECT_NE(text.find("3.0000\t2\tx"), std::string::npos);
  EXPECT_EQ(text, render_report(classes, opt));

  const std::vector<ClassFeatures> empty{{ScoreClass::kPositive, {}, {}}};
  const auto e = render_report(empty, opt);
  EXPECT_NE(e.find("-- top 0 --"), std::string::npos);

  opt.top_k = 0;
  EXPECT_THROW(render_report(classes, opt), UsageError);
}

TEST(Report, DropRepeatedScoresIsDisplayOnly) {
  const std::vector<ScoredInstance> in{scored("a", {"p", "q", "r"}, {1, 1, 2})};
  ReportOptions opt;
  opt.drop_repeated_scores = true;
  const std::vector<ClassFeatures> classes{
      {ScoreClass::kNegative, ngram_scores(in, ScoreClass::kNegative, 1, NgramMode::kTotal), {}}};
  const auto text = render_report(classes, opt);
  EXPECT_NE(text.find("\tp\n"), std::string::npos);
  EXPECT_EQ(text.find("\tq\n"), std::string::npos);
  EXPECT_EQ(classes[0].ngrams.size(), 3u);
  const auto records = render_ngram_records(classes);
  EXPECT_EQ(std::ranges::count(records, '\n'), 3);
  EXPECT_NE(records.find(R"("ngram":"r","class":"negative","z":1,"total":2.0,"count":1,"mean":2.0)"),
            std::string::npos);
}

}  // namespace
}  // namespace blade
