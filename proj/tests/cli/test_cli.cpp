#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("msfcn_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliResult run(const std::string& args) const {
    const std::string cmd = "cd '" + dir_.string() + "' && '" MSFCN_CLI "' " + args + " > stdout.txt 2> stderr.txt";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(dir_ / "stdout.txt");
    r.err = slurp(dir_ / "stderr.txt");
    return r;
  }

  std::map<std::string, std::string> tree(const fs::path& root) const {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file()) files[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
    }
    return files;
  }

  fs::path dir_;
};

TEST_F(Cli, UnknownFlagOrSubcommandPrintsUsageAndExitsTwo) {
  for (const char* args : {"synth --bogus 1", "frobnicate", ""}) {
    const CliResult r = run(args);
    EXPECT_EQ(r.code, 2) << args;
    EXPECT_NE(r.err.find("Usage"), std::string::npos) << args << "\n" << r.err;
  }
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(Cli, LibraryErrorIsOneJsonLine) {
  const CliResult r = run("augment --in missing.json");
  EXPECT_EQ(r.code, 1);
  ASSERT_FALSE(r.err.empty());
  EXPECT_EQ(r.err.find('\n'), r.err.size() - 1) << r.err;
  const auto j = nlohmann::json::parse(r.err);
  EXPECT_EQ(j.at("error"), "io_error");
  EXPECT_NE(j.at("message").get<std::string>().find("missing.json"), std::string::npos);
}

TEST_F(Cli, SynthIsReproducible) {
  ASSERT_EQ(run("synth --n 10 --seed 1 --out a").code, 0);
  ASSERT_EQ(run("synth --n 10 --seed 1 --out b").code, 0);
  const auto a = tree(dir_ / "a");
  EXPECT_EQ(a.size(), 1u + 10 * 4);
  EXPECT_EQ(a, tree(dir_ / "b"));
  ASSERT_EQ(run("synth --n 10 --seed 2 --out c").code, 0);
  EXPECT_NE(a.at("images/phantom_000.pgm"), tree(dir_ / "c").at("images/phantom_000.pgm"));
}

TEST_F(Cli, AugmentExpandsTrainSplitFortyTimes) {
  ASSERT_EQ(run("synth --n 3 --test 1 --out data").code, 0);
  const CliResult r = run("augment --in data/manifest.json --out aug");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(dir_ / "aug" / "manifest.json"));
  EXPECT_EQ(j.at("entries").size(), 80u);
}

TEST_F(Cli, DescribeShowsBottleneckAtNine) {
  const CliResult r = run("describe --config default");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("256x9x9"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("3x108x108"), std::string::npos);
}

TEST_F(Cli, GradcheckPassesEveryRow) {
  const CliResult r = run("gradcheck");
  ASSERT_EQ(r.code, 0) << r.out << r.err;
  std::istringstream lines(r.out);
  std::string line;
  int rows = 0;
  std::getline(lines, line);
  while (std::getline(lines, line)) {
    if (line.rfind("all gradients agree", 0) == 0) break;
    std::istringstream cols(line);
    std::string op, shape;
    double err = 1.0;
    cols >> op >> shape >> err;
    EXPECT_LT(err, op.rfind("model:", 0) == 0 ? 1e-3 : 1e-4) << line;
    ++rows;
  }
  EXPECT_GT(rows, 15);
  EXPECT_NE(r.out.find("model:toy"), std::string::npos);
}

TEST_F(Cli, TrainEvalOnToyData) {
  ASSERT_EQ(run("synth --n 3 --test 1 --size 48 --radius-min 5 --radius-max 8 --thickness-min 2 "
                "--thickness-max 4 --jitter 1 --out data")
                .code,
            0);
  std::ofstream(dir_ / "cfg.json") << R"({"model": "toy", "max_iter": 3, "batch_size": 2,
    "train_manifest": "data/manifest.json", "test_manifest": "data/manifest.json", "output_dir": "run"})";
  const CliResult t = run("train --config cfg.json --quiet");
  ASSERT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("trained 3 iterations on 2 samples"), std::string::npos) << t.out;
  const CliResult e = run("eval --config cfg.json");
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_NE(e.out.find("cases: 1, slices: 1"), std::string::npos) << e.out;
  EXPECT_EQ(slurp(dir_ / "run" / "eval" / "report.txt"), e.out);
  EXPECT_TRUE(fs::exists(dir_ / "run" / "eval" / "report.csv"));
  const CliResult bad = run("eval --config cfg.json --checkpoint nope.msfc");
  EXPECT_EQ(bad.code, 1);
}

}  // namespace
