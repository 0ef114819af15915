#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "saex/cli.hpp"

using namespace saex;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "saex");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Tiny corpus plus a trained model in `dir`.
void build_pipeline(const oracle::TempDir& dir) {
  ASSERT_EQ(run_cli({"gen", "--topics", "2", "--docs", "10", "--len", "16", "--vocab-size", "80", "--dim", "8",
                     "--seed", "3", "--out", (dir / "corpus").string()})
                .code,
            0);
  ASSERT_EQ(run_cli({"train", "--train", (dir / "corpus/train.manifest").string(), "--valid",
                     (dir / "corpus/valid.manifest").string(), "--num-features", "16", "--k-init", "4", "--k", "2",
                     "--epochs", "1", "--batch-size", "16", "--seed", "3", "--out", (dir / "model").string()})
                .code,
            0);
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) { ::setenv(name, value, 1); }
  ~ScopedEnv() { ::unsetenv(name_); }

 private:
  const char* name_;
};

}  // namespace

TEST(Cli, UsageErrors) {
  auto r = run_cli({"frobnicate"});
  EXPECT_EQ(r.code, cli::kUsage);
  EXPECT_EQ(r.err.rfind("error: kind=Usage msg=", 0), 0u);
  EXPECT_EQ(run_cli({}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"train"}).code, cli::kUsage);
  EXPECT_EQ(run_cli({"report", "--in", "x", "--format", "xml"}).code, cli::kUsage);
  r = run_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("Exit codes"), std::string::npos);
}

TEST(Cli, ExitCodesByErrorKind) {
  EXPECT_EQ(cli::exit_code(ErrorKind::Io), 3);
  EXPECT_EQ(cli::exit_code(ErrorKind::BadMagic), 4);
  EXPECT_EQ(cli::exit_code(ErrorKind::SchemaMismatch), 4);
  EXPECT_EQ(cli::exit_code(ErrorKind::DimensionMismatch), 5);
  EXPECT_EQ(cli::exit_code(ErrorKind::EmptySelection), 6);
  EXPECT_EQ(cli::exit_code(ErrorKind::NonFiniteLoss), 7);
}

TEST(Cli, MissingInputIsIoWithOneLineError) {
  oracle::TempDir dir;
  const auto r = run_cli({"report", "--in", (dir / "missing.json").string()});
  EXPECT_EQ(r.code, cli::kIo);
  EXPECT_EQ(r.err.rfind("error: kind=Io msg=", 0), 0u);
  EXPECT_EQ(std::ranges::count(r.err, '\n'), 1);
}

TEST(Cli, ReportRendersTextAndCsvDeterministically) {
  oracle::TempDir dir;
  const nlohmann::json report = {
      {"version", "saex-eval/1"},
      {"methods",
       {{{"method", "MI"}, {"topic_precision", 0.5}, {"pattern_leakage", 0.0}, {"distinct_ratio", 1.0}},
        {{"method", "TopAct"}, {"topic_precision", 0.25}, {"pattern_leakage", 0.9}, {"distinct_ratio", 0.4}}}},
      {"matched_features", 2},
      {"num_features", 8}};
  cli::detail::write_json(report, dir / "r.json");
  const auto csv = run_cli({"report", "--in", (dir / "r.json").string(), "--format", "csv"});
  ASSERT_EQ(csv.code, 0);
  EXPECT_EQ(csv.out,
            "method,topic_precision,pattern_leakage,distinct_ratio\n"
            "MI,0.5,0,1\n"
            "TopAct,0.25,0.90000000000000002,0.40000000000000002\n");
  const auto text = run_cli({"report", "--in", (dir / "r.json").string()});
  EXPECT_EQ(text.out, run_cli({"report", "--in", (dir / "r.json").string()}).out);
  EXPECT_NE(text.out.find("matched features: 2 of 8"), std::string::npos);

  ASSERT_EQ(run_cli({"report", "--in", (dir / "r.json").string(), "--format", "csv", "--out",
                     (dir / "r.csv").string()})
                .code,
            0);
  EXPECT_EQ(slurp_text(dir / "r.csv"), csv.out);

  cli::detail::write_json({{"version", "saex-eval/1"}, {"methods", nlohmann::json::array()}}, dir / "empty.json");
  EXPECT_EQ(run_cli({"report", "--in", (dir / "empty.json").string(), "--format", "csv"}).out,
            "method,topic_precision,pattern_leakage,distinct_ratio\n");
  cli::detail::write_json({{"version", "other"}}, dir / "bad.json");
  EXPECT_EQ(run_cli({"report", "--in", (dir / "bad.json").string()}).code, cli::kFormat);
}

TEST(Cli, ConfigFileWithCommandLineOverride) {
  oracle::TempDir dir;
  std::ofstream(dir / "gen.cfg") << "# corpus\ntopics = 2\ndocs_per_topic=3\nlen=5\nvocab-size=40\ndim=4\nseed=1\n";
  ASSERT_EQ(run_cli({"gen", "--config", (dir / "gen.cfg").string(), "--len", "7", "--out", (dir / "c").string()}).code,
            0);
  const auto train = ActivationStore::open(dir / "c/train.manifest");
  const auto valid = ActivationStore::open(dir / "c/valid.manifest");
  EXPECT_EQ(train.total_rows() + valid.total_rows(), 2u * 3u * 7u);
  const auto echo = slurp_text(dir / "c/gen.config");
  EXPECT_NE(echo.find("len=7\n"), std::string::npos);
  EXPECT_NE(echo.find("seed=1\n"), std::string::npos);

  // The echo is itself a valid config and reproduces the corpus.
  ASSERT_EQ(run_cli({"gen", "--config", (dir / "c/gen.config").string(), "--out", (dir / "d").string()}).code, 0);
  EXPECT_EQ(slurp_text(dir / "c/train_t00.saes"), slurp_text(dir / "d/train_t00.saes"));

  std::ofstream(dir / "broken.cfg") << "no equals sign\n";
  EXPECT_EQ(run_cli({"gen", "--config", (dir / "broken.cfg").string(), "--out", (dir / "e").string()}).code,
            cli::kFormat);
}

TEST(Cli, SeedFallsBackToEnvironment) {
  oracle::TempDir dir;
  {
    ScopedEnv env("SAE_SEED", "11");
    ASSERT_EQ(run_cli({"gen", "--topics", "1", "--docs", "2", "--len", "4", "--vocab-size", "30", "--dim", "4",
                       "--out", (dir / "a").string()})
                  .code,
              0);
    EXPECT_NE(slurp_text(dir / "a/gen.config").find("seed=11\n"), std::string::npos);
    ASSERT_EQ(run_cli({"gen", "--topics", "1", "--docs", "2", "--len", "4", "--vocab-size", "30", "--dim", "4",
                       "--seed", "5", "--out", (dir / "b").string()})
                  .code,
              0);
    EXPECT_NE(slurp_text(dir / "b/gen.config").find("seed=5\n"), std::string::npos);
  }
  ScopedEnv bad("SAE_SEED", "abc");
  EXPECT_EQ(run_cli({"gen", "--out", (dir / "c").string()}).code, cli::kInvariant);
}

TEST(Cli, ZeroLearningRateKeepsLossConstant) {
  oracle::TempDir dir;
  ASSERT_EQ(run_cli({"gen", "--topics", "2", "--docs", "10", "--len", "8", "--vocab-size", "50", "--dim", "6",
                     "--out", (dir / "c").string()})
                .code,
            0);
  ASSERT_EQ(run_cli({"train", "--train", (dir / "c/train.manifest").string(), "--valid",
                     (dir / "c/valid.manifest").string(), "--num-features", "8", "--k-init", "2", "--k", "2",
                     "--epochs", "2", "--lr", "0", "--out", (dir / "m").string()})
                .code,
            0);
  const auto report = cli::detail::read_json(dir / "m/train_report.json");
  for (const auto& e : report["epochs"]) EXPECT_EQ(e["valid_loss"], report["initial_valid_loss"]);
}

TEST(Cli, ExplainSteerAndEvalPipeline) {
  oracle::TempDir dir;
  build_pipeline(dir);
  const auto model = (dir / "model/model.saem").string();
  for (const std::string method : {"mi", "topact", "n2g"}) {
    const auto out = dir / ("ex_" + method + ".jsonl");
    const auto r = run_cli({"explain", "--model", model, "--embeddings", (dir / "corpus/embeddings.saes").string(),
                            "--vocab", (dir / "corpus/vocab.txt").string(), "--shards",
                            (dir / "corpus/valid.manifest").string(), "--method", method, "--features", "0", "1",
                            "--out", out.string()});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto exs = read_explanations(out);
    ASSERT_EQ(exs.size(), 2u);
    EXPECT_EQ(exs[1].feature_id, 1u);
    EXPECT_TRUE(fs::exists(out.string() + ".config"));
  }
  EXPECT_EQ(run_cli({"explain", "--model", model, "--embeddings", (dir / "corpus/embeddings.saes").string(), "--vocab",
                     (dir / "corpus/vocab.txt").string(), "--features", "99", "--out", (dir / "x.jsonl").string()})
                .code,
            cli::kSelection);

  write_lines({R"({"feature_id": 2, "label": "safety"})", R"({"feature_id": 5, "label": "safety"})"},
              dir / "labels.jsonl");
  for (const std::string mode : {"amplify", "calibrate", "composite"}) {
    const auto r = run_cli({"steer", "--model", model, "--labels", (dir / "labels.jsonl").string(), "--select",
                            "safety", "--mode", mode, "--in", (dir / "corpus/valid.manifest").string(), "--out",
                            (dir / ("steered_" + mode)).string()});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(ActivationStore::open(dir / ("steered_" + mode) / "steered.manifest").total_rows(),
              ActivationStore::open(dir / "corpus/valid.manifest").total_rows());
  }
  const auto none = run_cli({"steer", "--model", model, "--labels", (dir / "labels.jsonl").string(), "--select",
                             "harmful", "--in", (dir / "corpus/valid.manifest").string(), "--out",
                             (dir / "s2").string()});
  EXPECT_EQ(none.code, cli::kSelection);
  EXPECT_EQ(none.err.rfind("error: kind=EmptySelection", 0), 0u);

  const auto ev = run_cli({"eval", "--corpus", (dir / "corpus").string(), "--model", model, "--out",
                           (dir / "report.json").string()});
  ASSERT_EQ(ev.code, 0) << ev.err;
  const auto report = cli::detail::read_json(dir / "report.json");
  EXPECT_EQ(report["version"], "saex-eval/1");
  EXPECT_EQ(report["provenance"]["model_seed"], 3);
  EXPECT_EQ(report["provenance"]["model"]["file"], "model.saem");
  EXPECT_EQ(run_cli({"report", "--in", (dir / "report.json").string()}).code, 0);
}

TEST(Cli, CorruptModelIsFormatError) {
  oracle::TempDir dir;
  build_pipeline(dir);
  std::ofstream(dir / "bad.saem") << "garbage";
  const auto r = run_cli({"eval", "--corpus", (dir / "corpus").string(), "--model", (dir / "bad.saem").string(),
                          "--out", (dir / "r.json").string()});
  EXPECT_EQ(r.code, cli::kFormat);
}
