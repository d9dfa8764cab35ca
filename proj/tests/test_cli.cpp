#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>

#include "mcvlm/config.hpp"
#include "mcvlm/eval.hpp"
#include "support.hpp"

using namespace mcvlm;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(MCVLM_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t line_count(const fs::path& p) {
  const std::string s = bytes(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

}  // namespace

TEST(CliUsage, ExitCodes) {
  EXPECT_EQ(run(""), 1);
  EXPECT_EQ(run("frobnicate"), 1);
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run("build-dataset --out /tmp/never --concepts 5"), 1);
  EXPECT_EQ(run("build-dataset --out /tmp/never --concepts 0"), 1);
  EXPECT_EQ(run("train"), 1);  // --config is required
  EXPECT_EQ(run("train --config /no/such/file.json"), 1);
  EXPECT_FALSE(fs::exists("/tmp/never"));
}

TEST(CliUsage, ValidationFailures) {
  mcvlm::testing::TempDir dir("cli-valid");
  write_json(dir / "bad.json", json{{"colour", "red"}});
  EXPECT_EQ(run("train --config " + q(dir / "bad.json")), 2);
  write_json(dir / "ok.json", json{{"seeds", {1}}});
  EXPECT_EQ(run("ground --config " + q(dir / "ok.json") + " --tau 1.5 --image x.png"), 2);
  EXPECT_EQ(run("train --config " + q(dir / "ok.json") + " --init spectral"), 1);
  std::ofstream(dir / "broken.json") << "{";
  EXPECT_EQ(run("evaluate --config " + q(dir / "broken.json")), 2);
}

class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new mcvlm::testing::TempDir("cli");
    ASSERT_EQ(run("build-base --steps 0 --out " + q(*dir_ / "base.bin")), 0);
    ASSERT_EQ(run("build-dataset --concepts 2 --images 2 --seed 3 --out " + q(*dir_ / "scen")), 0);
    RunConfig c;
    c.scenario_dir = "scen";
    c.checkpoint_dir = "ckpt";
    c.report_dir = "reports";
    c.base_model = "base.bin";
    c.train.epochs = 1;
    c.train.k = 2;
    c.train.n = 2;
    c.seeds = {1, 2};
    write_json(*dir_ / "run.json", to_json(c));
    ASSERT_EQ(run("train --config " + q(*dir_ / "run.json")), 0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path path(const std::string& rel) { return *dir_ / rel; }
  static std::string config() { return " --config " + q(path("run.json")); }

  static mcvlm::testing::TempDir* dir_;
};

mcvlm::testing::TempDir* CliPipeline::dir_ = nullptr;

TEST_F(CliPipeline, DatasetIsValidAndDeterministic) {
  const Scenario s = load_scenario(path("scen"));
  EXPECT_EQ(s.m(), 2);
  EXPECT_EQ(s.concepts[0].train_images.size(), 2u);
  ASSERT_EQ(run("build-dataset --concepts 2 --images 2 --seed 3 --out " + q(path("again/scen"))), 0);
  EXPECT_EQ(bytes(path("scen/meta.json")), bytes(path("again/scen/meta.json")));
  EXPECT_EQ(bytes(path("scen/qa/train.json")), bytes(path("again/scen/qa/train.json")));
}

TEST_F(CliPipeline, TrainWritesOneCheckpointPerSeed) {
  for (int seed : {1, 2}) {
    const std::string stem = "ckpt/seed_" + std::to_string(seed);
    EXPECT_TRUE(fs::exists(path(stem + ".json")));
    EXPECT_TRUE(fs::exists(path(stem + ".bin")));
    EXPECT_EQ(line_count(path(stem + ".loss.txt")), 1u);
    EXPECT_EQ(load_checkpoint(path(stem)).config.seed, static_cast<std::uint64_t>(seed));
  }
}

TEST_F(CliPipeline, InitFlagSelectsRandomArm) {
  ASSERT_EQ(run("train" + config() + " --seed 9 --init random --k 3"), 0);
  const Checkpoint ck = load_checkpoint(path("ckpt/seed_9"));
  EXPECT_EQ(ck.config.init, InitMode::Random);
  EXPECT_EQ(ck.blocks[0].k(), 3);
}

TEST_F(CliPipeline, GroundDistractorAndTwoConceptImage) {
  const Scenario s = load_scenario(path("scen"));
  ASSERT_EQ(run("ground" + config() + " --image " + q(path("scen") / s.external_multi[0]) + " --out " + q(path("g_none"))), 0);
  const std::string none = bytes(path("g_none/detections.txt"));
  EXPECT_EQ(none.find(" yes "), std::string::npos) << none;
  EXPECT_EQ(bytes(path("g_none/prompt.txt")), "\n");
  EXPECT_TRUE(fs::exists(path("g_none/annotated.png")));

  ASSERT_EQ(run("ground" + config() + " --image " + q(path("scen") / s.test_multi[0].path) + " --out " + q(path("g_two"))), 0);
  const std::string prompt = bytes(path("g_two/prompt.txt"));
  EXPECT_NE(prompt.find("<sks_1> is located at \"Mark Number"), std::string::npos) << prompt;
  EXPECT_NE(prompt.find("<sks_2> is located at \"Mark Number"), std::string::npos) << prompt;
  EXPECT_EQ(line_count(path("g_two/detections.txt")), 3u);
}

TEST_F(CliPipeline, GroundMissingImageWritesNothing) {
  EXPECT_NE(run("ground" + config() + " --image " + q(path("nope.png")) + " --out " + q(path("g_missing"))), 0);
  EXPECT_FALSE(fs::exists(path("g_missing")));
}

TEST_F(CliPipeline, GroundMissingCheckpointFails) {
  EXPECT_NE(run("ground" + config() + " --seed 77 --image " + q(path("scen/test/multi/000.png")) + " --out " +
                q(path("g_nock"))),
            0);
}

TEST_F(CliPipeline, EvaluateFansOutAndAverages) {
  ASSERT_EQ(run("evaluate" + config()), 0);
  const Scenario s = load_scenario(path("scen"));
  const EvalSuite suite = compose_suite(s, RunConfig{}.eval_seed);
  const std::size_t items = suite.recognition.size() + suite.grounding.size() + suite.visual_qa.size() +
                            suite.text_qa.size() + suite.captions.size();
  std::vector<json> per_seed;
  for (int seed : {1, 2}) {
    const std::string stem = "reports/seed_" + std::to_string(seed);
    EXPECT_TRUE(fs::exists(path(stem + ".txt")));
    EXPECT_EQ(line_count(path(stem + ".audit.jsonl")), items);
    per_seed.push_back(read_json(path(stem + ".json")));
  }
  const json summary = read_json(path("reports/summary.json"));
  EXPECT_TRUE(fs::exists(path("reports/summary.txt")));
  for (const auto& [task, v] : summary.at("tasks").items())
    for (const char* col : {"single", "multi", "weighted"}) {
      const double mean = (per_seed[0]["tasks"][task][col].get<double>() + per_seed[1]["tasks"][task][col].get<double>()) / 2;
      EXPECT_NEAR(v.at(col).get<double>(), mean, 1e-12) << task << " " << col;
    }
}

TEST_F(CliPipeline, EvaluateMissingCheckpointFails) {
  EXPECT_NE(run("evaluate" + config() + " --seed 123"), 0);
}
