#include "mpo/digest.hpp"
#include "mpo/trainer.hpp"

#include "fixtures.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mpo {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int status = -1;
  std::string output;  // stdout and stderr
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  static fs::path dir() { return fs::temp_directory_path() / "mpo_test_cli"; }

  static CliRun run(const std::string& args) {
    const fs::path log = dir() / "last_output.txt";
    const std::string cmd =
        std::string(MPO_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    CliRun r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.output = slurp(log);
    return r;
  }

  static std::string p(const std::string& name) { return (dir() / name).string(); }

  static void SetUpTestSuite() {
    fs::remove_all(dir());
    fs::create_directories(dir());
    const WorldConfig wc = testing::tiny_world_config();
    const SynthWorld world = make_world(wc);
    TrainingConfig sft = testing::tiny_config(world, Stage::Sft);
    sft.steps = 10;
    sft.eval_interval = 5;
    sft.save(dir() / "sft.config");
    TrainingConfig mpo = testing::tiny_config(world, Stage::Mpo);
    mpo.constraints.enforce = false;
    mpo.save(dir() / "mpo.config");
  }

  static std::string world_flags() {
    const WorldConfig wc = testing::tiny_world_config();
    return "--seed " + std::to_string(wc.seed) + " --symbols " + std::to_string(wc.symbols) +
           " --speakers " + std::to_string(wc.speakers) + " --speech-count " +
           std::to_string(wc.speech_count);
  }

  /// Runs every stage into the subdirectory `tag`.
  static void pipeline(const std::string& tag) {
    fs::create_directories(dir() / tag);
    const auto t = [&](const std::string& n) { return p(tag + "/" + n); };
    ASSERT_EQ(run("make-world --out " + t("world.json") + " " + world_flags()).status, 0);
    ASSERT_EQ(run("make-corpus --world " + t("world.json") + " --train-out " + t("train.jsonl") +
                  " --heldout-out " + t("heldout.jsonl") + " --pref-out " + t("pref.jsonl") +
                  " --train-items 24 --heldout-items 6 --pref-items 10 --seed 3")
                  .status,
              0);
    CliRun r = run("sft --config " + p("sft.config") + " --world " + t("world.json") +
                " --corpus " + t("train.jsonl") + " --heldout " + t("heldout.jsonl") +
                " --out " + t("sft.ckpt"));
    ASSERT_EQ(r.status, 0) << r.output;
    r = run("gen-candidates --config " + p("mpo.config") + " --checkpoint " + t("sft.ckpt") +
            " --world " + t("world.json") + " --corpus " + t("pref.jsonl") + " --out " +
            t("cands.jsonl") + " --workers 2");
    ASSERT_EQ(r.status, 0) << r.output;
    r = run("build-prefset --config " + p("mpo.config") + " --candidates " + t("cands.jsonl") +
            " --out " + t("prefset.jsonl"));
    ASSERT_EQ(r.status, 0) << r.output;
    for (const std::string mode : {"dpo-only", "mpo", "combined-rankings"}) {
      r = run("train --mode " + mode + " --config " + p("mpo.config") + " --checkpoint " +
              t("sft.ckpt") + " --prefset " + t("prefset.jsonl") + " --world " +
              t("world.json") + " --heldout " + t("heldout.jsonl") + " --out " +
              t(mode + ".ckpt"));
      ASSERT_EQ(r.status, 0) << r.output;
      r = run("eval --checkpoint " + t(mode + ".ckpt") + " --world " + t("world.json") +
              " --heldout " + t("heldout.jsonl") + " --out " + t(mode + ".report.json"));
      ASSERT_EQ(r.status, 0) << r.output;
    }
    r = run("eval --checkpoint " + t("sft.ckpt") + " --world " + t("world.json") +
            " --heldout " + t("heldout.jsonl") + " --out " + t("sft.report.json"));
    ASSERT_EQ(r.status, 0) << r.output;
    r = run("compare --reports " + t("sft.report.json") + " " + t("dpo-only.report.json") +
            " " + t("mpo.report.json") + " " + t("combined-rankings.report.json") + " --out " +
            t("compare.csv"));
    ASSERT_EQ(r.status, 0) << r.output;
  }
};

TEST_F(Cli, VersionFlag) {
  const CliRun r = run("--version");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.output.find("0.1.0"), std::string::npos) << r.output;
}

TEST_F(Cli, MissingInputExitsTwoAndNamesThePath) {
  const CliRun r = run("make-corpus --world " + p("nope.json") + " --train-out " + p("x.jsonl") +
                    " --heldout-out " + p("y.jsonl"));
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find(p("nope.json")), std::string::npos) << r.output;
}

TEST_F(Cli, GarbledInputExitsTwo) {
  std::ofstream(dir() / "garbled.json") << "{\"format\": 12";
  const CliRun r = run("make-corpus --world " + p("garbled.json") + " --train-out " +
                    p("x.jsonl") + " --heldout-out " + p("y.jsonl"));
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find(p("garbled.json")), std::string::npos) << r.output;
}

TEST_F(Cli, ConfigValidationExitsThreeAndNamesTheField) {
  ASSERT_EQ(run("make-world --out " + p("w.json") + " " + world_flags()).status, 0);
  ASSERT_EQ(run("make-corpus --world " + p("w.json") + " --train-out " + p("t.jsonl") +
                " --heldout-out " + p("h.jsonl") + " --train-items 8 --heldout-items 2")
                .status,
            0);
  std::ofstream(dir() / "bad.config") << "schema_version = 1\nstage = sft\nbeta = -2\n";
  const CliRun r = run("sft --config " + p("bad.config") + " --world " + p("w.json") +
                    " --corpus " + p("t.jsonl") + " --out " + p("s.ckpt"));
  EXPECT_EQ(r.status, 3);
  EXPECT_NE(r.output.find("beta"), std::string::npos) << r.output;
}

TEST_F(Cli, PipelineWritesManifestsAndReplaysBitExactly) {
  pipeline("a");
  pipeline("b");
  // Per-stage CSV logs are byte-identical across reruns.
  for (const std::string f :
       {"sft.steps.csv", "sft.evals.csv", "dpo-only.steps.csv", "dpo-only.evals.csv",
        "mpo.steps.csv", "mpo.evals.csv", "combined-rankings.steps.csv",
        "combined-rankings.evals.csv", "compare.csv"}) {
    ASSERT_TRUE(fs::exists(p("a/" + f))) << f;
    EXPECT_EQ(slurp(p("a/" + f)), slurp(p("b/" + f))) << f;
  }
  EXPECT_EQ(file_sha256(p("a/mpo.ckpt")), file_sha256(p("b/mpo.ckpt")));

  std::ifstream in(p("a/mpo.ckpt.manifest.json"));
  const auto m = nlohmann::json::parse(in);
  EXPECT_EQ(m.at("command"), "train");
  EXPECT_EQ(m.at("version"), "0.1.0");
  EXPECT_FALSE(m.at("config_hash").get<std::string>().empty());
  EXPECT_EQ(m.at("inputs").at("checkpoint").at("sha256"), file_sha256(p("a/sft.ckpt")));
  bool listed = false;
  for (const auto& o : m.at("outputs")) {
    if (o.at("path") == p("a/mpo.ckpt")) {
      listed = true;
      EXPECT_EQ(o.at("sha256"), file_sha256(p("a/mpo.ckpt")));
    }
  }
  EXPECT_TRUE(listed);
  for (const std::string f : {"world.json", "train.jsonl", "sft.ckpt", "cands.jsonl",
                              "prefset.jsonl", "mpo.report.json", "compare.csv"}) {
    EXPECT_TRUE(fs::exists(p("a/" + f + ".manifest.json"))) << f;
  }
}

TEST_F(Cli, CompareRefusesDifferentHeldOutSets) {
  pipeline("c");
  ASSERT_EQ(run("make-corpus --world " + p("c/world.json") + " --train-out " +
                p("c2_train.jsonl") + " --heldout-out " + p("c2_heldout.jsonl") +
                " --train-items 4 --heldout-items 6 --seed 99")
                .status,
            0);
  ASSERT_EQ(run("eval --checkpoint " + p("c/mpo.ckpt") + " --world " + p("c/world.json") +
                " --heldout " + p("c2_heldout.jsonl") + " --out " + p("c2.report.json"))
                .status,
            0);
  const CliRun r = run("compare --reports " + p("c/sft.report.json") + " " + p("c2.report.json") +
                    " --out " + p("c2_compare.csv"));
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.output.find("digest"), std::string::npos) << r.output;
}

TEST_F(Cli, DivergenceExitsFourWithLastGoodCheckpoint) {
  pipeline("d");
  const CliRun r = run("train --mode dpo-only --config " + p("mpo.config") + " --checkpoint " +
                    p("d/sft.ckpt") + " --prefset " + p("d/prefset.jsonl") + " --world " +
                    p("d/world.json") + " --out " + p("d/boom.ckpt") +
                    " --learning-rate 1e300 --steps 50");
  EXPECT_EQ(r.status, 4) << r.output;
  EXPECT_NE(r.output.find(p("d/boom.last-good.ckpt")), std::string::npos) << r.output;
  EXPECT_TRUE(fs::exists(p("d/boom.last-good.ckpt")));
  EXPECT_NO_THROW(Policy::load(p("d/boom.last-good.ckpt")));
}

}  // namespace
}  // namespace mpo
