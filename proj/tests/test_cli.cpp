#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

const fs::path& work() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "motormeta_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "small.json") << R"({
      "seed": 3,
      "data": {"n": 16, "stride": 256, "samples_per_task": 90},
      "optimizer": {"lr_start": 0.001, "lr_end": 0.001, "batch_size": 8},
      "pretrain": {"epochs": 2, "batches_per_epoch": 1},
      "distill": {"epochs": 2},
      "meta": {"epochs": 2, "n_way": 3, "k_shot": 2, "q_per_class": 3},
      "eval": {"k_shot": 2, "q_per_class": 3, "episodes": 5, "dump_count": 12}
    })";
    return d;
  }();
  return dir;
}

Run run(const std::string& args) {
  const auto out = work() / "stdout.txt";
  const auto err = work() / "stderr.txt";
  const std::string cmd =
      std::string(MOTORMETA_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::string small_flags(const std::string& out) {
  return "--config " + (work() / "small.json").string() + " --out " + (work() / out).string();
}

}  // namespace

TEST(Cli, NoSubcommandIsUsageError) {
  const auto r = run("");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
}

TEST(Cli, UnknownFlagPrintsUsageAndExitsOne) {
  const auto r = run("eval --bogus 3");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("bogus"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("Usage"), std::string::npos) << r.err;
}

TEST(Cli, HelpExitsZero) {
  const auto r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"gen", "pretrain", "distill", "metatrain", "eval", "sweep", "curve", "dump"})
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
}

TEST(Cli, EvalWithoutCheckpointExitsOne) {
  const auto r = run("eval " + small_flags("nockpt"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("checkpoint"), std::string::npos) << r.err;
}

TEST(Cli, BadConfigExitsOne) {
  std::ofstream(work() / "bad.json") << R"({"optimizer": {"clip_norm": -1}})";
  const auto r = run("gen --config " + (work() / "bad.json").string() + " --out " + (work() / "bad").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("clip_norm"), std::string::npos) << r.err;
}

TEST(Cli, MissingDatasetExitsOne) {
  const auto r = run("pretrain " + small_flags("empty"));
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("gen"), std::string::npos) << r.err;
}

TEST(Cli, UnwritableOutputIsRuntimeFailure) {
  std::ofstream(work() / "afile") << "x";
  const auto r = run("gen --config " + (work() / "small.json").string() + " --out " + (work() / "afile" / "sub").string());
  EXPECT_EQ(r.code, 2) << r.err;
}

TEST(Cli, SmallPipelineEndToEnd) {
  const auto flags = small_flags("pipe");
  const auto dir = work() / "pipe";
  auto r = run("gen " + flags);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "dataset" / "dataset.json"));
  EXPECT_TRUE(fs::exists(dir / "dataset" / "T4" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir / "dataset" / "T8" / "brb1.csv"));
  EXPECT_TRUE(fs::exists(dir / "run_gen.json"));

  r = run("pretrain " + flags);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "pretrain.ckpt"));
  const auto log = slurp(dir / "pretrain_log.csv");
  EXPECT_EQ(log.rfind("epoch,loss,acc,lr\n", 0), 0u);
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);

  r = run("distill " + flags + " --beta 0.5");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "distill.ckpt"));
  const auto manifest = nlohmann::json::parse(slurp(dir / "run_distill.json"));
  EXPECT_EQ(manifest["seed"], 3);
  EXPECT_EQ(manifest["config"]["data"]["n"], 16);

  r = run("metatrain " + flags + " --init " + (dir / "distill.ckpt").string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "metatrain.ckpt"));

  const auto ck = " --checkpoint " + (dir / "distill.ckpt").string();
  r = run("eval " + flags + ck);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rep = nlohmann::json::parse(slurp(dir / "eval_T4_2shot_linear.json"));
  EXPECT_EQ(rep["protocol"]["episodes"], 5);
  EXPECT_EQ(rep["protocol"]["n_way"], 6);
  EXPECT_TRUE(fs::exists(dir / "eval_T4_2shot_linear_confusion.csv"));
  EXPECT_NE(r.out.find("accuracy"), std::string::npos);

  r = run("eval " + flags + ck + " --task T4+T8 --head metric --shots 1 --ways 3");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "eval_T4+T8_1shot_metric.json"));

  r = run("sweep " + flags + ck + " --shots 2");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto sweep = nlohmann::json::parse(slurp(dir / "sweep.json"));
  ASSERT_EQ(sweep.size(), 4u);
  EXPECT_EQ(sweep[0]["label"], "clean");
  EXPECT_EQ(sweep[3]["snr_db"], 6.0);

  r = run("curve " + flags + ck + " --max-steps 3");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto curve = slurp(dir / "curve.csv");
  EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 5);

  r = run("dump " + flags + ck);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto dump = slurp(dir / "embeddings_T4.csv");
  EXPECT_EQ(std::count(dump.begin(), dump.end(), '\n'), 13);

  r = run("eval " + flags + ck + " --task T42");
  EXPECT_EQ(r.code, 1);
  r = run("eval " + flags + ck + " --shots 50");
  EXPECT_EQ(r.code, 1);
}

TEST(Cli, SeedFlagOverridesConfig) {
  const auto r = run("gen " + small_flags("seeded") + " --seed 11");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto m = nlohmann::json::parse(slurp(work() / "seeded" / "run_gen.json"));
  EXPECT_EQ(m["seed"], 11);
}
