#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cdformer/cli.hpp"
#include "test_util.hpp"

namespace cdformer {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = 0;
  std::string out;
  std::string err;
};

Outcome cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<nlohmann::json> json_lines(const std::string& text) {
  std::vector<nlohmann::json> rows;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);)
    if (!line.empty() && line.front() == '{') rows.push_back(nlohmann::json::parse(line));
  return rows;
}

// Small model so every verb finishes quickly.
const std::vector<std::string> kTiny = {"--set",
                                        "model.dim=16",
                                        "model.heads=2",
                                        "model.queries=5",
                                        "model.ffn_hidden=32",
                                        "train.steps=12",
                                        "train.finetune_steps=4",
                                        "train.eval_episodes=3",
                                        "train.log_interval=4"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("cdformer_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  fs::path dir_;
};

TEST_F(CliTest, UsageErrorsExitWithOne) {
  EXPECT_EQ(cli({"--help"}).code, 0);
  EXPECT_EQ(cli({}).code, 1);
  EXPECT_EQ(cli({"fly"}).code, 1);
  EXPECT_EQ(cli({"eval"}).code, 1);  // --checkpoint is required
  EXPECT_EQ(cli({"train", "--set", "model.bogus=1"}).code, 1);
  EXPECT_EQ(cli({"train", "--set", "model.heads=3"}).code, 1);
  EXPECT_EQ(cli({"train", "--config", path("missing.json")}).code, 1);
  EXPECT_EQ(cli({"train", "--variant", "nope", "--out", path("r")}).code, 1);
}

TEST_F(CliTest, GenDigestIsStable) {
  auto a = cli({"gen", "--out", path("a"), "--count", "3"});
  auto b = cli({"gen", "--out", path("b"), "--count", "3"});
  ASSERT_EQ(a.code, 0) << a.err;
  const auto ja = json_lines(a.out).at(0), jb = json_lines(b.out).at(0);
  EXPECT_EQ(ja["manifest_digest"], jb["manifest_digest"]);
  // Recorded once from this generator.
  EXPECT_EQ(ja["manifest_digest"],
            "330808d16092bf97954c5cf94cbf8efa4ea16e89555c87fcb2da1a81a9a31c9e");
  EXPECT_EQ(read_episodes(path("a/episodes-novel.cdfe")).episodes.size(), 3u);
  auto other = cli({"gen", "--out", path("c"), "--count", "3", "--set", "benchmark.seed=1"});
  EXPECT_NE(json_lines(other.out).at(0)["manifest_digest"], ja["manifest_digest"]);
}

TEST_F(CliTest, GenEdgeCases) {
  auto empty = cli({"gen", "--out", path("e"), "--count", "0", "--split", "base"});
  ASSERT_EQ(empty.code, 0) << empty.err;
  EXPECT_TRUE(read_episodes(path("e/episodes-base.cdfe")).episodes.empty());
  std::ofstream(path("file")) << "x";
  auto blocked = cli({"gen", "--out", path("file/sub"), "--count", "1"});
  EXPECT_EQ(blocked.code, 3);
  EXPECT_FALSE(blocked.err.empty());
  EXPECT_EQ(cli({"gen", "--out", path("s"), "--split", "middle"}).code, 1);
}

TEST_F(CliTest, FlagsOverrideFileOverDefaults) {
  std::ofstream(path("cfg.json")) << R"({"seed": 5, "model": {"dim": 16, "heads": 2},
                                        "train": {"steps": 1, "finetune_steps": 0}})";
  auto r = cli({"train", "--config", path("cfg.json"), "--seed", "9", "--out", path("run"),
                "--set", "model.queries=4", "model.ffn_hidden=8"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("run/config.json"));
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["seed"], 9);
  EXPECT_EQ(j["model"]["dim"], 16);
  EXPECT_EQ(j["model"]["queries"], 4);
  EXPECT_EQ(j["model"]["decoder_layers"], 2);  // default
}

TEST_F(CliTest, TrainLogsFiveLossComponentsAndResumes) {
  auto r = cli(with({"train", "--out", path("run")}, kTiny));
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("run/metrics.jsonl"));
  std::stringstream ss;
  ss << in.rdbuf();
  auto rows = json_lines(ss.str());
  ASSERT_EQ(rows.size(), 16u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i]["step"], i);
    int losses = 0;
    for (const char* k : {"cls", "box", "giou", "ood", "total"}) losses += rows[i].contains(k);
    EXPECT_EQ(losses, 5);
  }
  EXPECT_EQ(rows.front()["phase"], "pretrain");
  EXPECT_EQ(rows.back()["phase"], "finetune");

  auto resumed = cli({"train", "--checkpoint", path("run/checkpoint.cdfk"), "--set",
                      "train.finetune_steps=8"});
  ASSERT_EQ(resumed.code, 0) << resumed.err;
  std::ifstream in2(path("run/metrics.jsonl"));
  std::stringstream ss2;
  ss2 << in2.rdbuf();
  rows = json_lines(ss2.str());
  ASSERT_EQ(rows.size(), 20u);
  EXPECT_EQ(rows.back()["step"], 19);
  EXPECT_EQ(load_checkpoint(path("run/checkpoint.cdfk")).step, 20u);
}

TEST_F(CliTest, TrainingIsDeterministic) {
  ASSERT_EQ(cli(with({"train", "--out", path("a")}, kTiny)).code, 0);
  ASSERT_EQ(cli(with({"train", "--out", path("b")}, kTiny)).code, 0);
  const auto a = load_checkpoint(path("a/checkpoint.cdfk"));
  const auto b = load_checkpoint(path("b/checkpoint.cdfk"));
  ASSERT_EQ(a.parameters.size(), b.parameters.size());
  for (std::size_t i = 0; i < a.parameters.size(); ++i)
    EXPECT_EQ(a.parameters[i].second.to_vector(), b.parameters[i].second.to_vector());
}

TEST_F(CliTest, OverfitModeHalvesTheLoss) {
  auto r = cli({"train", "--out", path("o"), "--set", "model.dim=32", "model.ffn_hidden=64",
                "model.queries=10", "train.overfit=true", "train.steps=300",
                "train.log_interval=300"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("o/metrics.jsonl"));
  std::stringstream ss;
  ss << in.rdbuf();
  const auto rows = json_lines(ss.str());
  ASSERT_EQ(rows.size(), 300u);
  EXPECT_EQ(rows.front()["phase"], "overfit");
  EXPECT_LE(rows.back()["total"].get<double>(), 0.5 * rows.front()["total"].get<double>());
}

TEST_F(CliTest, DivergenceExitsWithTwo) {
  auto r = cli(with({"train", "--out", path("nan")}, with(kTiny, {"model.learning_rate=1e300",
                                                                    "model.grad_clip=0"})));
  EXPECT_EQ(r.code, 2) << r.err;
  EXPECT_NE(r.err.find("non-finite"), std::string::npos);
}

TEST_F(CliTest, EvalReportReparsesLosslessly) {
  ASSERT_EQ(cli(with({"train", "--out", path("run")}, kTiny)).code, 0);
  ASSERT_EQ(cli({"gen", "--out", path("g"), "--count", "4"}).code, 0);
  auto r = cli({"eval", "--checkpoint", path("run/checkpoint.cdfk"), "--episodes",
                path("g/episodes-novel.cdfe"), "--out", path("ev"), "--threshold", "0.01"});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("ev/report.json"));
  const auto j = nlohmann::json::parse(in);
  const auto summary = summary_from_json(j);
  EXPECT_EQ(to_json(summary), j);
  EXPECT_EQ(summary.report.episode_count, 4u);
  // Barely trained: nowhere near the ground truth.
  EXPECT_LT(summary.report.map, 0.05);
  EXPECT_NE(r.out.find("confusion"), std::string::npos);
  const auto& counts = j["confusion"]["counts"];
  const auto& rows = j["confusion"]["row_normalized"];
  ASSERT_EQ(rows.size(), counts.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double total = 0.0, sum = 0.0;
    for (std::size_t k = 0; k < rows[i].size(); ++k) {
      total += counts[i][k].get<double>();
      sum += rows[i][k].get<double>();
    }
    EXPECT_NEAR(sum, total > 0 ? 1.0 : 0.0, 1e-12);
  }

  // Same checkpoint and episodes: identical report.
  auto again = cli({"eval", "--checkpoint", path("run/checkpoint.cdfk"), "--episodes",
                    path("g/episodes-novel.cdfe"), "--out", path("ev2"), "--threshold", "0.01"});
  ASSERT_EQ(again.code, 0);
  std::ifstream in2(path("ev2/report.json"));
  EXPECT_EQ(nlohmann::json::parse(in2), j);
}

TEST_F(CliTest, CorruptInputsExitWithThree) {
  ASSERT_EQ(cli(with({"train", "--out", path("run")}, kTiny)).code, 0);
  const std::string bytes = read_file(path("run/checkpoint.cdfk"));
  write_file(path("short.cdfk"), bytes.substr(0, bytes.size() / 2));
  std::string flipped = bytes;
  flipped[bytes.size() / 3] ^= 0x10;
  write_file(path("flipped.cdfk"), flipped);
  EXPECT_EQ(cli({"eval", "--checkpoint", path("short.cdfk")}).code, 3);
  EXPECT_EQ(cli({"eval", "--checkpoint", path("flipped.cdfk")}).code, 3);
  EXPECT_EQ(cli({"eval", "--checkpoint", path("absent.cdfk")}).code, 3);
  EXPECT_EQ(cli({"train", "--checkpoint", path("short.cdfk")}).code, 3);

  ASSERT_EQ(cli({"gen", "--out", path("g"), "--count", "2"}).code, 0);
  const std::string ep = read_file(path("g/episodes-novel.cdfe"));
  write_file(path("short.cdfe"), ep.substr(0, ep.size() - 5));
  EXPECT_EQ(cli({"eval", "--checkpoint", path("run/checkpoint.cdfk"), "--episodes",
                 path("short.cdfe")})
                .code,
            3);
}

TEST_F(CliTest, AblateEmitsThreeDeterministicRows) {
  auto run = [&](const std::string& out) {
    auto r = cli(with({"ablate", "--out", path(out), "--seeds", "0,1"}, kTiny));
    EXPECT_EQ(r.code, 0) << r.err;
    std::ifstream in(path(out + "/ablation.json"));
    return nlohmann::json::parse(in);
  };
  const auto a = run("a"), b = run("b");
  ASSERT_EQ(a["table"].size(), 3u);
  EXPECT_EQ(a["table"][0]["variant"], "baseline");
  EXPECT_EQ(a["table"][1]["variant"], "+OBD");
  EXPECT_EQ(a["table"][2]["variant"], "+OBD+OOD");
  EXPECT_EQ(a["runs"].size(), 6u);
  EXPECT_EQ(a["table"], b["table"]);
}

TEST_F(CliTest, GradcheckPassesAndCatchesAnInjectedSignError) {
  auto clean = cli({"gradcheck"});
  EXPECT_EQ(clean.code, 0) << clean.err;
  const auto rows = json_lines(clean.out);
  ASSERT_GT(rows.size(), 30u);
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
    EXPECT_TRUE(rows[i]["ok"].get<bool>()) << rows[i].dump();
    EXPECT_TRUE(rows[i].contains("max_rel_error"));
  }
  auto flipped = cli({"gradcheck", "--flip-sign", "softmax_rows"});
  EXPECT_EQ(flipped.code, 2);
  EXPECT_NE(flipped.err.find("softmax_rows"), std::string::npos);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c;
  c.seed = 11;
  c.model.dim = 48;
  c.model.locality_sigma = 0.2;
  c.benchmark.bg_overlap = 0.6;
  c.train.variant = "+OBD";
  RunConfig d;
  apply_json(d, to_json(c));
  EXPECT_EQ(to_json(d), to_json(c));
}

TEST(Config, RejectsUnknownAndMistypedKeys) {
  RunConfig c;
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"trian": {}})")), ConfigError);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"ood": {"tau": 1}})")), ConfigError);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"model": {"dim": -4}})")), ConfigError);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"model": {"dim": "big"}})")), ConfigError);
  EXPECT_THROW(apply_json(c, nlohmann::json::parse(R"({"model": 3})")), ConfigError);
  EXPECT_THROW(apply_override(c, "model.dim"), ConfigError);
}

TEST(Config, OverridesParseJsonValues) {
  RunConfig c;
  apply_override(c, "ood.weight=0.25");
  apply_override(c, "train.variant=baseline");
  apply_override(c, "train.overfit=true");
  EXPECT_EQ(c.model.ood_weight, 0.25);
  EXPECT_EQ(c.train.variant, "baseline");
  EXPECT_TRUE(c.train.overfit);
}

TEST(Config, ValidationCatchesInconsistentSettings) {
  RunConfig c = default_run_config();
  EXPECT_NO_THROW(c.validate());
  c.model.sequence_capacity = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c = default_run_config();
  c.model.heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = default_run_config();
  c.train.score_threshold = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PerfectDetector, ScoresFullMap) {
  BenchmarkSpec spec;
  std::vector<ScoredDetection> dets;
  std::vector<GtObject> gts;
  for (std::size_t i = 0; i < 10; ++i) {
    const Episode e = generate_episode(spec, i, Split::kNovel);
    for (std::size_t g = 0; g < e.gt.size(); ++g) {
      gts.push_back({i, e.gt.labels[g], e.gt.boxes[g]});
      dets.push_back({i, e.gt.labels[g], 0.9, e.gt.boxes[g]});
    }
  }
  const auto report = evaluate_detections(dets, gts, 10);
  EXPECT_DOUBLE_EQ(report.map, 1.0);
  EXPECT_DOUBLE_EQ(report.map50, 1.0);
}

}  // namespace
}  // namespace cdformer
