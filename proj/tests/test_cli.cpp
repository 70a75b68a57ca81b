#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tcaf/checkpoint.hpp"
#include "tcaf/cli.hpp"

using namespace tcaf;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("tcaf_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    ::unsetenv(cli::kRunDirEnv);
    // The tiny config with a shorter budget.
    nlohmann::json j = nlohmann::json::parse(slurp(fs::path(TCAF_CONFIG_DIR) / "tiny.json"));
    j["train"]["epochs"] = 3;
    config_ = dir_ / "config.json";
    std::ofstream(config_) << j.dump(2);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path dir_;
  fs::path config_;
};

}  // namespace

TEST_F(CliTest, SynthIsByteIdentical) {
  ASSERT_EQ(run({"synth", "--config", config_.string(), "--out", (dir_ / "a").string()}).code, 0);
  ASSERT_EQ(run({"synth", "--config", config_.string(), "--out", (dir_ / "b").string()}).code, 0);
  for (const char* f : {"manifest.json", "features.avfb", "class_embeddings.txt"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
  ASSERT_EQ(run({"synth", "--config", config_.string(), "--seed", "5", "--out", (dir_ / "c").string()}).code, 0);
  EXPECT_NE(slurp(dir_ / "a" / "features.avfb"), slurp(dir_ / "c" / "features.avfb"));
}

TEST_F(CliTest, TrainEvalExport) {
  const fs::path run_dir = dir_ / "run";
  const Result t = run({"train", "--config", config_.string(), "--out", run_dir.string()});
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"config.json", "history.jsonl", "final.tcaf", "stage1_best.tcaf", "report.txt", "report.kv",
                        "summary.json"}) {
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  }

  // The echoed config reloads to the same effective configuration.
  const cli::RunConfig echoed = cli::load_run_config(run_dir / "config.json");
  EXPECT_EQ(cli::to_json(echoed), nlohmann::json::parse(slurp(run_dir / "config.json")));
  EXPECT_EQ(echoed.train.epochs, 3u);

  // eval at gamma 0 against the library computation on the same checkpoint.
  const Result e = run({"eval", "--config", config_.string(), "--dataset", (run_dir / "bundle").string(),
                        "--checkpoint", (run_dir / "final.tcaf").string(), "--gamma", "0", "--out",
                        (dir_ / "eval").string()});
  ASSERT_EQ(e.code, 0) << e.err;
  const DatasetBundle bundle = load_bundle(run_dir / "bundle");
  TcafModel<float> model = load_checkpoint<float>(run_dir / "final.tcaf");
  const Split s[] = {Split::test_seen}, u[] = {Split::test_unseen};
  const std::vector<int> seen = stage2_seen_classes(bundle);
  EvalOptions o;
  o.max_len = echoed.train.eval_max_len;
  const EvalReport expected = evaluate_gzsl(model, bundle, s, u, seen, 0.0, o);
  EXPECT_EQ(slurp(dir_ / "eval" / "report.kv"), expected.to_kv());

  const fs::path emb = dir_ / "emb.txt";
  const Result x = run({"export-embeddings", "--config", config_.string(), "--dataset", (run_dir / "bundle").string(),
                        "--checkpoint", (run_dir / "final.tcaf").string(), "--out", emb.string()});
  ASSERT_EQ(x.code, 0) << x.err;
  const auto table = load_word_embeddings(emb, model.config().d_out);
  EXPECT_EQ(table.size(), bundle.split(Split::test_unseen).size() + bundle.num_classes());
}

TEST_F(CliTest, TrainIsDeterministic) {
  ASSERT_EQ(run({"train", "--config", config_.string(), "--out", (dir_ / "a").string()}).code, 0);
  ASSERT_EQ(run({"train", "--config", config_.string(), "--out", (dir_ / "b").string()}).code, 0);
  for (const char* f : {"history.jsonl", "final.tcaf", "stage1_best.tcaf", "report.kv"}) {
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  }
}

TEST_F(CliTest, AblateAttentionRows) {
  const Result r = run({"ablate", "--config", config_.string(), "--axis", "attention", "--out", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string tsv = slurp(dir_ / "ablation.tsv");
  std::size_t lines = 0;
  for (char c : tsv) lines += c == '\n';
  EXPECT_EQ(lines, 7u);  // header + 6 cells
  for (const char* cell : {"cross", "self", "full", "cross-notoken", "self-notoken", "full-notoken"}) {
    EXPECT_NE(tsv.find(std::string("\t") + cell + "\t"), std::string::npos) << cell;
  }
}

TEST_F(CliTest, GradcheckPasses) {
  const Result r = run({"gradcheck", "--out", dir_.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("gradcheck passed"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir_ / "gradcheck.txt"));
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run({"bogus"}).code, 2);
  EXPECT_EQ(run({"train", "--no-such-flag"}).code, 2);
  EXPECT_EQ(run({"eval"}).code, 2);  // --checkpoint is required
  EXPECT_EQ(run({"ablate", "--axis", "sideways"}).code, 2);
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST_F(CliTest, LibraryErrorsExitOne) {
  nlohmann::json j = nlohmann::json::parse(slurp(config_));
  j["train"]["mystery"] = 1;
  const fs::path bad = dir_ / "bad.json";
  std::ofstream(bad) << j.dump();
  const Result r = run({"train", "--config", bad.string(), "--out", (dir_ / "x").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("error [config]"), std::string::npos) << r.err;

  const Result missing = run({"eval", "--config", config_.string(), "--dataset", (dir_ / "nowhere").string(),
                              "--checkpoint", config_.string()});
  EXPECT_EQ(missing.code, 1);
}

TEST(RunConfig, JsonRoundTrip) {
  cli::RunConfig c;
  c.arch.heads = 3;
  c.arch.variant = AttentionVariant::parse("self-notoken");
  c.train.adam.lr = 3.5e-4;
  c.train.loss = LossConfig::parse("reg+ce");
  c.train.modality = InputModality::visual;
  c.synth.sigma_obs = 0.37;
  c.dataset = "/data/bundle";
  const cli::RunConfig back = cli::run_config_from_json(cli::to_json(c));
  EXPECT_TRUE(back == c);
}

TEST(RunConfig, RejectsUnknownKeys) {
  EXPECT_THROW(cli::run_config_from_json(nlohmann::json::parse(R"({"arch": {"layerz": 2}})")), ConfigError);
  EXPECT_THROW(cli::run_config_from_json(nlohmann::json::parse(R"({"extra": {}})")), ConfigError);
}
