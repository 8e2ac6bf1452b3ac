#pragma once

// Class-conditional ngram and sentence scoring from token contributions, for
// comparative extractive summaries.

#include <algorithm>
#include <cstdio>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "blade/core.hpp"
#include "blade/dataset.hpp"

namespace blade {

enum class ScoreClass { kNegative = 0, kPositive = 1 };
enum class NgramMode { kTotal, kMean };

inline const char* class_name(ScoreClass c) {
  return c == ScoreClass::kNegative ? "negative" : "positive";
}

// Word-level contributions of one instance plus its labels.
struct ScoredInstance {
  std::string id;
  std::vector<std::string> words;
  std::vector<double> negative;  // s- per word
  std::vector<double> positive;  // s+ per word
  std::array<double, kClasses> bias{};
  int predicted = 0;
  int gold = 0;

  // s^c_i - b_c
  double corrected(ScoreClass c, std::size_t i) const {
    return c == ScoreClass::kNegative ? negative[i] - bias[0] : positive[i] - bias[1];
  }
};

inline std::vector<ScoredInstance> score_instances(const BladeModel& model,
                                                   std::span<const LabeledInstance> corpus,
                                                   std::span<const Example> examples) {
  std::vector<ScoredInstance> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    const auto& inst = corpus[ex.source];
    const auto trace = forward(model, ex.indexed, ex.external);
    const auto dec = decompose(trace, model);
    ScoredInstance s;
    s.id = inst.id;
    s.words.assign(inst.tokens.begin(),
                   inst.tokens.begin() + static_cast<std::ptrdiff_t>(dec.word_count()));
    s.negative = dec.word_negative;
    s.positive = dec.word_positive;
    s.bias = dec.bias;
    s.predicted = predict_sentence(trace);
    s.gold = inst.sentence_label;
    out.push_back(std::move(s));
  }
  return out;
}

struct NgramScore {
  std::string text;
  ScoreClass cls = ScoreClass::kNegative;
  std::size_t z = 1;
  double total = 0.0;
  std::size_t count = 0;

  double mean() const { return total / static_cast<double>(count); }
  double score(NgramMode mode) const { return mode == NgramMode::kTotal ? total : mean(); }
};

inline void rank_ngrams(std::vector<NgramScore>& ngrams, NgramMode mode) {
  std::ranges::sort(ngrams, [mode](const NgramScore& a, const NgramScore& b) {
    const double sa = a.score(mode);
    const double sb = b.score(mode);
    if (sa != sb) return sa > sb;
    return a.text < b.text;
  });
}

// Every within-instance window of z words adds its bias-corrected sum for
// class c to the window's surface text. With restrict_to_predicted, only
// instances the model assigns to class c contribute.
inline std::vector<NgramScore> ngram_scores(std::span<const ScoredInstance> instances,
                                            ScoreClass cls, std::size_t z, NgramMode mode,
                                            bool restrict_to_predicted = true) {
  if (z < 1) throw UsageError("ngram size must be >= 1");
  std::map<std::string, NgramScore> acc;
  for (const auto& inst : instances) {
    if (restrict_to_predicted && inst.predicted != static_cast<int>(cls)) continue;
    if (inst.words.size() < z) continue;
    for (std::size_t start = 0; start + z <= inst.words.size(); ++start) {
      std::string text = inst.words[start];
      double sum = inst.corrected(cls, start);
      for (std::size_t i = start + 1; i < start + z; ++i) {
        text += ' ';
        text += inst.words[i];
        sum += inst.corrected(cls, i);
      }
      auto& entry = acc[text];
      if (entry.count == 0) {
        entry.text = text;
        entry.cls = cls;
        entry.z = z;
      }
      entry.total += sum;
      ++entry.count;
    }
  }
  std::vector<NgramScore> out;
  out.reserve(acc.size());
  for (auto& [_, v] : acc) out.push_back(std::move(v));
  rank_ngrams(out, mode);
  return out;
}

struct SentenceScore {
  std::string id;
  ScoreClass cls = ScoreClass::kNegative;
  double score = 0.0;
  double normalized = 0.0;
  int gold = 0;
  int predicted = 0;
};

// Whole-instance score sum_i (s^c_i - b_c), optionally ranked by its
// length-normalized value. Equal scores keep input order.
inline std::vector<SentenceScore> sentence_scores(std::span<const ScoredInstance> instances,
                                                  ScoreClass cls, bool normalize) {
  std::vector<SentenceScore> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) {
    if (inst.words.empty()) throw DataError("cannot score empty instance " + inst.id);
    double sum = 0.0;
    for (std::size_t i = 0; i < inst.words.size(); ++i) sum += inst.corrected(cls, i);
    out.push_back({inst.id, cls, sum, sum / static_cast<double>(inst.words.size()), inst.gold,
                   inst.predicted});
  }
  std::ranges::stable_sort(out, [normalize](const SentenceScore& a, const SentenceScore& b) {
    return normalize ? a.normalized > b.normalized : a.score > b.score;
  });
  return out;
}

struct ReportOptions {
  std::size_t top_k = 10;
  NgramMode mode = NgramMode::kTotal;
  bool normalize = true;
  // Display only: skip an ngram whose unrounded score equals the previous one shown.
  bool drop_repeated_scores = false;
};

struct ClassFeatures {
  ScoreClass cls = ScoreClass::kNegative;
  std::vector<NgramScore> ngrams;       // ranked
  std::vector<SentenceScore> sentences;  // ranked
};

namespace detail {

inline std::string fmt_score(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

inline std::vector<const NgramScore*> displayed(const std::vector<NgramScore>& ngrams,
                                                const ReportOptions& opt) {
  std::vector<const NgramScore*> out;
  for (const auto& n : ngrams) {
    if (opt.drop_repeated_scores && !out.empty() &&
        out.back()->score(opt.mode) == n.score(opt.mode)) {
      continue;
    }
    out.push_back(&n);
  }
  return out;
}

inline void ngram_rows(std::string& out, std::span<const NgramScore* const> rows, NgramMode mode) {
  for (const auto* n : rows) {
    out += "  " + fmt_score(n->score(mode)) + "\t" + std::to_string(n->count) + "\t" + n->text + "\n";
  }
}

inline void sentence_rows(std::string& out, std::span<const SentenceScore> rows, bool normalize) {
  for (const auto& s : rows) {
    out += "  " + fmt_score(normalize ? s.normalized : s.score) + "\tgold=" +
           std::to_string(s.gold) + "\tpred=" + std::to_string(s.predicted) + "\t" + s.id + "\n";
  }
}

}  // namespace detail

// Fixed-layout text report: per class, top-k and bottom-k ngrams and
// sentences, then sentences split by gold x predicted label.
inline std::string render_report(std::span<const ClassFeatures> classes, const ReportOptions& opt) {
  if (opt.top_k < 1) throw UsageError("top-k must be >= 1");
  const char* mode_name = opt.mode == NgramMode::kTotal ? "total" : "mean";
  std::string out;
  for (const auto& cf : classes) {
    const std::string cname = class_name(cf.cls);
    const auto shown = detail::displayed(cf.ngrams, opt);
    const std::size_t k = std::min(opt.top_k, shown.size());
    const std::size_t z = cf.ngrams.empty() ? 0 : cf.ngrams.front().z;
    out += "== " + cname + " class ngrams (z=" + std::to_string(z) + ", " + mode_name +
           ", score/count/ngram) ==\n";
    out += "-- top " + std::to_string(k) + " --\n";
    detail::ngram_rows(out, std::span(shown).first(k), opt.mode);
    out += "-- bottom " + std::to_string(k) + " --\n";
    std::vector<const NgramScore*> bottom(shown.end() - static_cast<std::ptrdiff_t>(k), shown.end());
    std::ranges::reverse(bottom);
    detail::ngram_rows(out, bottom, opt.mode);

    const std::size_t ks = std::min(opt.top_k, cf.sentences.size());
    out += "== " + cname + " class sentences (" + (opt.normalize ? "length-normalized" : "total") +
           ") ==\n";
    out += "-- top " + std::to_string(ks) + " --\n";
    detail::sentence_rows(out, std::span(cf.sentences).first(ks), opt.normalize);
    out += "-- bottom " + std::to_string(ks) + " --\n";
    std::vector<SentenceScore> sbottom(cf.sentences.end() - static_cast<std::ptrdiff_t>(ks),
                                       cf.sentences.end());
    std::ranges::reverse(sbottom);
    detail::sentence_rows(out, sbottom, opt.normalize);

    for (int gold = 0; gold <= 1; ++gold) {
      for (int pred = 0; pred <= 1; ++pred) {
        std::vector<SentenceScore> split;
        for (const auto& s : cf.sentences) {
          if (s.gold == gold && s.predicted == pred && split.size() < opt.top_k) split.push_back(s);
        }
        out += "-- " + cname + " sentences with gold=" + std::to_string(gold) +
               " pred=" + std::to_string(pred) + (gold != pred ? " (misclassified)" : "") +
               ": top " + std::to_string(split.size()) + " --\n";
        detail::sentence_rows(out, split, opt.normalize);
      }
    }
  }
  return out;
}

// Machine-readable variant: one JSON object per ngram.
inline std::string render_ngram_records(std::span<const ClassFeatures> classes) {
  std::string out;
  for (const auto& cf : classes) {
    for (const auto& n : cf.ngrams) {
      nlohmann::ordered_json j;
      j["ngram"] = n.text;
      j["class"] = class_name(n.cls);
      j["z"] = n.z;
      j["total"] = n.total;
      j["count"] = n.count;
      j["mean"] = n.mean();
      out += j.dump() + '\n';
    }
  }
  return out;
}

}  // namespace blade
