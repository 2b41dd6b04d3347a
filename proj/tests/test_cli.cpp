#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "emogen/cli.hpp"

namespace fs = std::filesystem;
using namespace emogen;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "emogen");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kTinyModel =
    "epochs=1\nlayers=1\nheads=2\ndim=16\nmlp=32\nvocab-size=320\ncontext=96\n";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("emogen_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::string p(const char* name) const { return (dir / name).string(); }

  // Small corpus, prompt pool, and tiny model config in the test directory.
  void make_inputs(std::size_t pairs = 240) {
    write(dir / "spec.json", "{\"scale_to\": " + std::to_string(pairs) + "}");
    write(dir / "tiny.ini", kTinyModel);
    auto r = cli({"synth-data", "--spec", p("spec.json"), "--seed", "5", "--out", p("corpus.jsonl"),
                  "--prompts-out", p("prompts.txt"), "--prompts-n", "30"});
    ASSERT_EQ(r.code, 0) << r.err;
  }

  fs::path dir;
};

}  // namespace

TEST_F(CliTest, NoArgumentsPrintsUsageAndExitsOne) {
  auto r = cli({});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  EXPECT_NE(r.err.find("synth-data"), std::string::npos);
}

TEST_F(CliTest, UnknownSubcommandExitsOne) {
  auto r = cli({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
}

TEST_F(CliTest, VersionListsFormats) {
  auto r = cli({"--version"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find(kVersion), std::string::npos);
  EXPECT_NE(r.out.find("checkpoint format 1"), std::string::npos);
  EXPECT_NE(r.out.find("emogen-oracle 1"), std::string::npos);
}

TEST_F(CliTest, StatsPrintsEightRows) {
  make_inputs(400);
  auto r = cli({"stats", "--in", p("corpus.jsonl")});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto h = scale_histogram(reference_histogram(), 400);
  std::istringstream lines(r.out);
  std::string line;
  std::getline(lines, line);
  for (auto e : kAllEmotions) {
    ASSERT_TRUE(std::getline(lines, line));
    std::istringstream row(line);
    std::string name;
    std::size_t count = 0;
    row >> name >> count;
    EXPECT_EQ(name, label(e));
    EXPECT_EQ(count, h[e]);
  }
  ASSERT_TRUE(std::getline(lines, line));
  EXPECT_EQ(line.rfind("total", 0), 0u);
}

TEST_F(CliTest, StatsReportsRejectedLines) {
  write(dir / "mixed.jsonl",
        "{\"id\":\"a\",\"prompt_text\":\"hi\",\"response_text\":\"go away\",\"response_emotion\":\"anger\"}\n"
        "{\"id\":\"b\",\"prompt_text\":\"hi\",\"response_text\":\"ok\",\"response_emotion\":\"furious\"}\n");
  auto r = cli({"stats", "--in", p("mixed.jsonl")});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.err.find("skipped line 2"), std::string::npos);
  EXPECT_NE(r.out.find("total"), std::string::npos);
}

TEST_F(CliTest, MissingCorpusIsDataError) {
  EXPECT_EQ(cli({"stats", "--in", p("absent.jsonl")}).code, 2);
}

TEST_F(CliTest, MissingRequiredOptionIsUsageError) {
  EXPECT_EQ(cli({"stats"}).code, 1);
  EXPECT_EQ(cli({"train", "--data", "x.jsonl"}).code, 1);
}

TEST_F(CliTest, MalformedSpecIsDataError) {
  write(dir / "bad.json", "{\"scale_to\": ");
  EXPECT_EQ(cli({"synth-data", "--spec", p("bad.json"), "--out", p("c.jsonl")}).code, 2);
}

TEST_F(CliTest, UnknownConfigKeyIsUsageError) {
  make_inputs();
  write(dir / "bad.ini", "epochz=3\n");
  auto r = cli({"train", "--data", p("corpus.jsonl"), "--out", p("m"), "--config", p("bad.ini")});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("epochz"), std::string::npos);
}

TEST_F(CliTest, ConfigFillsDefaultsAndFlagsWin) {
  make_inputs();
  auto r = cli({"train", "--data", p("corpus.jsonl"), "--out", p("m"), "--config", p("tiny.ini"), "--dim", "8",
                "--seed", "11", "--no-backward"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto cfg = read_flat_config(dir / "m" / kConfigFile);
  std::map<std::string, std::string> kv(cfg.begin(), cfg.end());
  EXPECT_EQ(kv.at("dim"), "8");
  EXPECT_EQ(kv.at("layers"), "1");
  EXPECT_EQ(kv.at("seed"), "11");
  EXPECT_EQ(kv.at("backward"), "false");
  EXPECT_EQ(kv.at("loss-scope"), "response_only");
  auto a = load_model_dir(dir / "m", "final");
  EXPECT_EQ(a.forward.config.model_dim, 8);
  EXPECT_FALSE(a.backward.has_value());
}

TEST_F(CliTest, RerunFromEchoedConfigIsBitwise) {
  make_inputs();
  ASSERT_EQ(cli({"train", "--data", p("corpus.jsonl"), "--out", p("a"), "--config", p("tiny.ini"), "--seed", "3"})
                .code,
            0);
  ASSERT_EQ(cli({"train", "--config", p("a/config.ini"), "--out", p("b")}).code, 0);
  for (const char* f : {"vocab.txt", "best.ckpt", "final.ckpt", "backward_final.ckpt", "oracle.txt"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
}

TEST_F(CliTest, GenerateVerboseListsCandidates) {
  make_inputs();
  ASSERT_EQ(cli({"train", "--data", p("corpus.jsonl"), "--out", p("m"), "--config", p("tiny.ini")}).code, 0);
  auto r = cli({"generate", "--model", p("m"), "--prompt", "Any news from the road?", "--emotion", "fear",
                "--candidates", "3", "--max-new-tokens", "12", "--verbose"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("rank"), std::string::npos);
  std::istringstream lines(r.out);
  std::string line;
  int ranked = 0;
  while (std::getline(lines, line)) ranked += line.rfind("1 ", 0) == 0 || line.rfind("2 ", 0) == 0 ||
                                              line.rfind("3 ", 0) == 0;
  EXPECT_EQ(ranked, 3);

  auto same = cli({"generate", "--model", p("m"), "--prompt", "Any news from the road?", "--emotion", "fear",
                   "--candidates", "3", "--max-new-tokens", "12", "--verbose"});
  EXPECT_EQ(same.out, r.out);
}

TEST_F(CliTest, GenerateRejectsBadFlags) {
  make_inputs();
  ASSERT_EQ(cli({"train", "--data", p("corpus.jsonl"), "--out", p("m"), "--config", p("tiny.ini")}).code, 0);
  auto bad = cli({"generate", "--model", p("m"), "--prompt", "hi", "--emotion", "furious"});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("surprised"), std::string::npos);
  EXPECT_EQ(cli({"generate", "--model", p("m"), "--prompt", "hi", "--emotion", "sad", "--temp", "0"}).code, 1);
  EXPECT_EQ(cli({"generate", "--model", p("missing"), "--prompt", "hi", "--emotion", "sad"}).code, 2);
}

// Runs the built binary: synth-data, train, evaluate.
TEST_F(CliTest, TrainThenEvaluateEndToEnd) {
  const std::string bin = EMOGEN_CLI_PATH;
  auto sh = [&](const std::string& args) {
    const auto cmd = "\"" + bin + "\" " + args + " >> \"" + p("log.txt") + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  write(dir / "spec.json", "{\"scale_to\": 240}");
  write(dir / "tiny.ini", kTinyModel);
  ASSERT_EQ(sh("synth-data --spec " + p("spec.json") + " --seed 9 --out " + p("corpus.jsonl") +
               " --prompts-out " + p("prompts.txt") + " --prompts-n 20"),
            0)
      << slurp(dir / "log.txt");
  ASSERT_EQ(sh("train --data " + p("corpus.jsonl") + " --out " + p("model") + " --config " + p("tiny.ini") +
               " --seed 2"),
            0)
      << slurp(dir / "log.txt");
  ASSERT_EQ(sh("evaluate --model " + p("model") + " --oracle " + p("model/oracle.txt") + " --prompts " +
               p("prompts.txt") + " --n 2 --seed 4 --candidates 2 --max-new-tokens 10 --out " + p("report")),
            0)
      << slurp(dir / "log.txt");
  EXPECT_EQ(sh(""), 1);

  const auto report = load_report(dir / "report");
  EXPECT_EQ(report.n_per_emotion, 2u);
  EXPECT_EQ(report.items.size(), 16u);
  EXPECT_EQ(report.seed, 4u);
  EXPECT_EQ(report.model_hash, checkpoint_hash(load_model_dir(dir / "model").forward,
                                               Vocabulary::load(p("model/vocab.txt")).hash()));
  EXPECT_TRUE(fs::exists(dir / "report" / "yes_rate.tsv"));
  EXPECT_TRUE(fs::exists(dir / "report" / "strength.tsv"));
  const auto cfg = read_flat_config(dir / "report" / kConfigFile);
  EXPECT_NE(std::find(cfg.begin(), cfg.end(), std::pair<std::string, std::string>{"seed", "4"}), cfg.end());

  // Same seed, same report.
  ASSERT_EQ(sh("evaluate --model " + p("model") + " --oracle " + p("model/oracle.txt") + " --prompts " +
               p("prompts.txt") + " --n 2 --seed 4 --candidates 2 --max-new-tokens 10 --out " + p("report2")),
            0);
  EXPECT_EQ(slurp(dir / "report" / "report.json"), slurp(dir / "report2" / "report.json"));
}

TEST_F(CliTest, EvaluateRandomControl) {
  make_inputs();
  ASSERT_EQ(cli({"train", "--data", p("corpus.jsonl"), "--out", p("m"), "--config", p("tiny.ini"),
                 "--no-backward"})
                .code,
            0);
  auto r = cli({"evaluate", "--model", p("m"), "--oracle", p("m/oracle.txt"), "--prompts", p("prompts.txt"),
                "--n", "3", "--generator", "random", "--out", p("rep")});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_report(dir / "rep").model_hash.rfind("random-", 0), 0u);
  EXPECT_EQ(cli({"evaluate", "--model", p("m"), "--oracle", p("m/oracle.txt"), "--prompts", p("prompts.txt"),
                 "--n", "31", "--out", p("rep2")})
                .code,
            2);
}
