#include <sstream>

#include <gtest/gtest.h>

#include "cli.hpp"
#include "support/fixtures.hpp"
#include "support/synthetic.hpp"

namespace blade {
namespace {

using testing::read_text;
using testing::TempDir;

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("blade-cli");
    const auto train = testing::trigger_corpus({}, 300, 21);
    const auto dev = testing::trigger_corpus({}, 60, 22);
    testing::write_text(p("train.jsonl"), serialize_corpus(train));
    testing::write_text(p("dev.jsonl"), serialize_corpus(dev));
    const auto r = run({"train", "--train", p("train.jsonl"), "--dev", p("dev.jsonl"), "--output",
                        p("m.blmd"), "--dim", "8", "--maps", "10", "--epochs", "3"});
    ASSERT_EQ(r.code, 0) << r.err;
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::string p(const std::string& leaf) { return (*dir_ / leaf).string(); }

  static TempDir* dir_;
};

TempDir* CliTest::dir_ = nullptr;

TEST_F(CliTest, EvalOnIdenticalFiles) {
  const auto r = run({"eval", "--pred", p("dev.jsonl"), "--gold", p("dev.jsonl"), "--beta", "0.5"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("token: P=100.00 R=100.00 F0.5=100.00"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("sentence: P=100.00 R=100.00 F0.5=100.00"), std::string::npos) << r.out;
}

TEST_F(CliTest, UsageErrors) {
  auto r = run({"predict", "--model", p("m.blmd")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--input is required"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_EQ(run({}).code, 1);
  EXPECT_EQ(run({"nope"}).code, 1);
  EXPECT_EQ(run({"eval", "--pred", "a", "--gold", "b", "--bogus", "1"}).code, 1);
  EXPECT_EQ(run({"audit", "--model", p("m.blmd"), "--db", "x", "--input", "y", "--output", "z",
                 "--rule", "exq"})
                .code,
            1);
  EXPECT_EQ(run({"predict", "--help"}).code, 0);
}

TEST_F(CliTest, DataAndExitCodes) {
  EXPECT_EQ(run({"eval", "--pred", p("dev.jsonl"), "--gold", p("train.jsonl")}).code, 2);
  EXPECT_EQ(run({"predict", "--model", p("missing"), "--input", p("dev.jsonl"), "--output", p("x")}).code, 2);
  testing::write_text(p("bad.jsonl"), "{\"tokens\":[\"a\"],\"sentence_label\":5}\n");
  const auto r = run({"predict", "--model", p("m.blmd"), "--input", p("bad.jsonl"), "--output", p("x")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 1"), std::string::npos);
}

TEST_F(CliTest, ConfigFileSitsBelowFlags) {
  testing::write_text(p("c.cfg"), "# comment\nbeta = 0.5\nsplit=from-config\n");
  const auto r = run({"eval", "--config", p("c.cfg"), "--pred", p("dev.jsonl"), "--gold", p("dev.jsonl"),
                      "--split", "from-flag", "--output", p("metrics.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("F0.5="), std::string::npos);
  const auto records = read_text(p("metrics.jsonl"));
  EXPECT_NE(records.find("\"split\":\"from-flag\""), std::string::npos);
  EXPECT_NE(records.find("\"F0.5\":100.0"), std::string::npos);
  testing::write_text(p("bad.cfg"), "nonsense=1\n");
  EXPECT_EQ(run({"eval", "--config", p("bad.cfg"), "--pred", p("dev.jsonl"), "--gold", p("dev.jsonl")}).code, 1);
}

TEST_F(CliTest, PredictThenEvalRoundTrip) {
  ASSERT_EQ(run({"predict", "--model", p("m.blmd"), "--input", p("dev.jsonl"), "--output", p("pred.jsonl")}).code, 0);
  const auto pred = load_corpus(p("pred.jsonl"));
  const auto gold = load_corpus(p("dev.jsonl"));
  ASSERT_EQ(pred.size(), gold.size());
  EXPECT_EQ(pred[0].tokens, gold[0].tokens);
  EXPECT_EQ(pred[0].token_labels->size(), gold[0].tokens.size());
  EXPECT_EQ(run({"eval", "--pred", p("pred.jsonl"), "--gold", p("dev.jsonl")}).code, 0);
}

TEST_F(CliTest, ManifestsAndReplay) {
  ASSERT_EQ(run({"predict", "--model", p("m.blmd"), "--input", p("dev.jsonl"), "--output", p("r.jsonl"),
                 "--offset", "0.1"})
                .code,
            0);
  const auto manifest = nlohmann::json::parse(read_text(p("r.jsonl.manifest.json")));
  EXPECT_EQ(manifest["command"], "predict");
  EXPECT_EQ(manifest["config"]["offset"], "0.1");
  EXPECT_EQ(manifest["inputs"]["model"]["sha256"], to_hex(sha256(read_file_bytes(p("m.blmd")))));
  const auto first = read_text(p("r.jsonl"));
  std::filesystem::remove(p("r.jsonl"));
  ASSERT_EQ(run({"replay", "--manifest", p("r.jsonl.manifest.json")}).code, 0);
  EXPECT_EQ(read_text(p("r.jsonl")), first);

  // A changed input blocks replay.
  testing::write_text(p("dev2.jsonl"), read_text(p("dev.jsonl")));
  ASSERT_EQ(run({"predict", "--model", p("m.blmd"), "--input", p("dev2.jsonl"), "--output", p("r2.jsonl")}).code, 0);
  testing::write_text(p("dev2.jsonl"), "");
  EXPECT_EQ(run({"replay", "--manifest", p("r2.jsonl.manifest.json")}).code, 2);
}

TEST_F(CliTest, DatabaseWorkflow) {
  ASSERT_EQ(run({"build-db", "--model", p("m.blmd"), "--input", p("train.jsonl"), "--output", p("d.blex")}).code, 0);
  ASSERT_EQ(run({"augment-db", "--model", p("m.blmd"), "--db", p("d.blex"), "--input", p("dev.jsonl"),
                 "--tag", "dev", "--output", p("d2.blex")})
                .code,
            0);
  const auto db = load_db(p("d.blex"));
  const auto db2 = load_db(p("d2.blex"));
  EXPECT_GT(db2.records.size(), db.records.size());
  ASSERT_EQ(run({"edit-db", "--db", p("d2.blex"), "--record", "0", "--field", "gold_token", "--value",
                 "unknown", "--output", p("d3.blex")})
                .code,
            0);
  EXPECT_EQ(load_db(p("d3.blex")).records[0].gold_token, kUnknownLabel);
  EXPECT_EQ(run({"edit-db", "--db", p("d2.blex"), "--record", "999999", "--field", "gold_token",
                 "--value", "1", "--output", p("d4.blex")})
                .code,
            2);

  const auto r = run({"audit", "--model", p("m.blmd"), "--db", p("d3.blex"), "--input", p("dev.jsonl"),
                      "--rule", "exag", "--output", p("audit.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = read_text(p("audit.jsonl"));
  const auto first = nlohmann::json::parse(lines.substr(0, lines.find('\n')));
  EXPECT_EQ(first["raw"].size(), first["tokens"].size());
  EXPECT_EQ(first["admitted"].size(), first["tokens"].size());
  bool saw_match = false;
  std::istringstream in(lines);
  std::string line;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const auto& m : j["matches"]) {
      saw_match = true;
      EXPECT_TRUE(m.contains("exemplar_text"));
      EXPECT_TRUE(m.contains("distance"));
      EXPECT_TRUE(m.contains("exemplar_gold_sentence"));
    }
  }
  EXPECT_TRUE(saw_match);
  ASSERT_EQ(run({"audit", "--model", p("m.blmd"), "--db", p("d3.blex"), "--input", p("dev.jsonl"),
                 "--rule", "exat", "--format", "text", "--output", p("audit.txt")})
                .code,
            0);
  EXPECT_NE(read_text(p("audit.txt")).find("context: "), std::string::npos);
}

TEST_F(CliTest, FeaturesTuneAndStubEmbeddings) {
  ASSERT_EQ(run({"extract-features", "--model", p("m.blmd"), "--input", p("dev.jsonl"), "--zgram", "2",
                 "--top-k", "3", "--output", p("f.txt")})
                .code,
            0);
  EXPECT_NE(read_text(p("f.txt")).find("== positive class ngrams (z=2"), std::string::npos);
  EXPECT_FALSE(read_text(p("f.txt.jsonl")).empty());
  EXPECT_EQ(run({"extract-features", "--model", p("m.blmd"), "--input", p("dev.jsonl"), "--top-k", "0",
                 "--output", p("f0.txt")})
                .code,
            1);

  ASSERT_EQ(run({"tune-offset", "--model", p("m.blmd"), "--input", p("dev.jsonl"), "--output", p("o.json")}).code, 0);
  const auto o = nlohmann::json::parse(read_text(p("o.json")));
  EXPECT_TRUE(o.contains("offset"));

  ASSERT_EQ(run({"stub-embed", "--input", p("dev.jsonl"), "--dim", "4", "--output", p("e.blem")}).code, 0);
  EXPECT_EQ(load_embeddings(p("e.blem")).sentences.size(), 60u);
}

TEST_F(CliTest, TrainingWithEmbeddingsAndFinetuning) {
  ASSERT_EQ(run({"stub-embed", "--input", p("train.jsonl"), "--dim", "3", "--output", p("tr.blem")}).code, 0);
  ASSERT_EQ(run({"stub-embed", "--input", p("dev.jsonl"), "--dim", "3", "--output", p("dv.blem")}).code, 0);
  auto r = run({"train", "--train", p("train.jsonl"), "--dev", p("dev.jsonl"), "--embeddings", p("tr.blem"),
                "--dev-embeddings", p("dv.blem"), "--external-dim", "3", "--dim", "4", "--maps", "4",
                "--epochs", "1", "--output", p("e.blmd")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_checkpoint(p("e.blmd")).external_dim(), 3u);

  r = run({"finetune-tokens", "--init", p("m.blmd"), "--train", p("train.jsonl"), "--dev", p("dev.jsonl"),
           "--epochs", "1", "--output", p("ft.blmd")});
  ASSERT_EQ(r.code, 0) << r.err;
  r = run({"finetune-minmax", "--init", p("m.blmd"), "--train", p("train.jsonl"), "--dev", p("dev.jsonl"),
           "--epochs", "1", "--output", p("mm.blmd"), "--log", p("mm.log")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto log = read_text(p("mm.log"));
  EXPECT_NE(log.find("\"epoch\":1"), std::string::npos);
  EXPECT_NE(log.find("\"wall_ms\":null"), std::string::npos);
  EXPECT_EQ(read_text(p("mm.blmd.vocab")), read_text(p("m.blmd.vocab")));
}

TEST_F(CliTest, Rerank) {
  std::vector<LabeledInstance> cands;
  for (int g = 0; g < 3; ++g) {
    for (int c = 0; c < 4; ++c) {
      LabeledInstance inst;
      inst.id = "g" + std::to_string(g) + "c" + std::to_string(c);
      inst.tokens = {"w001", "w002", c % 2 ? "t1" : "w003"};
      inst.tokens.push_back("w" + std::to_string(100 + c));
      inst.token_labels = std::vector<int>{0, 0, c % 2, 0};
      inst.sentence_label = c % 2;
      inst.group_id = "g" + std::to_string(g);
      inst.original_len = 4;
      cands.push_back(inst);
    }
  }
  testing::write_text(p("cands.jsonl"), serialize_corpus(cands));
  const auto r = run({"rerank", "--model", p("m.blmd"), "--input", p("cands.jsonl"), "--output", p("sel.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("groups 3"), std::string::npos);
  EXPECT_EQ(std::ranges::count(read_text(p("sel.jsonl")), '\n'), 3);
  EXPECT_EQ(run({"rerank", "--model", p("m.blmd"), "--input", p("dev.jsonl"), "--output", p("x")}).code, 2);
}

}  // namespace
}  // namespace blade
