#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "uieforge/trainer.hpp"
#include "test_util.hpp"

using namespace uieforge;
using namespace uieforge::testing;

namespace {

struct CliResult {
  int code;
  std::string err;
};

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  CliResult run(const std::string& args) {
    const auto err = dir_ / "stderr.txt";
    const std::string cmd = "cd '" + dir_.path().string() + "' && '" UIEFORGE_CLI "' " + args + " >/dev/null 2>'" +
                            err.string() + "'";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err)};
  }
  void write_config() {
    std::ofstream(dir_ / "run.toml") << "[train]\nepochs = 2\nimage-size = 32\npatch = 16\nwidth-mult = 0.125\n"
                                        "layers = 1\nbatch = 2\nsynthetic = 3\n";
  }
  void write_images(const std::string& sub, std::size_t n) {
    std::filesystem::create_directories(dir_ / sub);
    for (const auto& s : synthetic_pairs(n, 40, 3)) write_png(dir_ / sub / (s.id + ".png"), s.raw);
  }
  TempDir dir_{"cli"};
};

}  // namespace

TEST_F(CliTest, TrainIsSeededAndEchoesReusableConfig) {
  write_config();
  ASSERT_EQ(run("train --config run.toml --out a --seed 7").code, 0);
  ASSERT_EQ(run("train --config run.toml --out b --seed 7").code, 0);
  EXPECT_TRUE(std::filesystem::exists(dir_ / "a" / "epoch-0002.ckpt"));
  EXPECT_EQ(slurp(dir_ / "a" / "train_log.csv"), slurp(dir_ / "b" / "train_log.csv"));
  ASSERT_EQ(run("train --config a/effective_config.toml --out c").code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "train_log.csv"), slurp(dir_ / "c" / "train_log.csv"));
}

TEST_F(CliTest, CommandLineOverridesConfigFile) {
  write_config();
  ASSERT_EQ(run("train --config run.toml --epochs 1 --out a").code, 0);
  EXPECT_TRUE(std::filesystem::exists(dir_ / "a" / "epoch-0001.ckpt"));
  EXPECT_FALSE(std::filesystem::exists(dir_ / "a" / "epoch-0002.ckpt"));
}

TEST_F(CliTest, ConfigErrorsExitTwoAndNameTheProblem) {
  std::ofstream(dir_ / "bad.toml") << "bogus = 1\n";
  auto r = run("train --config bad.toml --out a");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bogus"), std::string::npos) << r.err;
  r = run("train --dataset nowhere --out a");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("nowhere"), std::string::npos) << r.err;
  EXPECT_EQ(run("train --out a --frobnicate").code, 2);
}

TEST_F(CliTest, EnhanceEvalAndCheckpointErrors) {
  write_config();
  ASSERT_EQ(run("train --config run.toml --out a").code, 0);
  write_images("in", 3);
  std::ofstream(dir_ / "in" / "broken.png") << "not a png";
  ASSERT_EQ(run("enhance --checkpoint a/epoch-0002.ckpt --input in --out enh").code, 0);
  for (const auto& id : {"synthetic0", "synthetic1", "synthetic2"}) {
    const auto img = read_image(dir_ / "enh" / (std::string(id) + ".png"));
    ASSERT_TRUE(img);
    EXPECT_EQ(img->shape(), (Shape{3, 40, 40}));
  }
  const auto first = slurp(dir_ / "enh" / "synthetic0.png");
  ASSERT_EQ(run("enhance --checkpoint a/epoch-0002.ckpt --input in/synthetic0.png --out enh2").code, 0);
  EXPECT_EQ(slurp(dir_ / "enh2" / "synthetic0.png"), first);

  std::ofstream(dir_ / "corrupt.ckpt") << slurp(dir_ / "a" / "epoch-0002.ckpt").substr(0, 500);
  EXPECT_EQ(run("enhance --checkpoint corrupt.ckpt --input in --out enh3").code, 3);

  ASSERT_EQ(run("eval --enhanced enh --reference enh --out same.csv").code, 0);
  std::istringstream rows(slurp(dir_ / "same.csv"));
  std::string line;
  std::getline(rows, line);
  EXPECT_EQ(line, "image,psnr,ssim,uiqm,uciqe");
  int n = 0;
  while (std::getline(rows, line)) {
    EXPECT_NE(line.find(",100.000000,1.000000,"), std::string::npos) << line;
    ++n;
  }
  EXPECT_EQ(n, 4);  // three images plus the mean row
  ASSERT_EQ(run("eval --enhanced enh --no-reference --out nr.csv").code, 0);
  EXPECT_NE(slurp(dir_ / "nr.csv").find("synthetic0.png,,,"), std::string::npos);
  const auto r = run("eval --enhanced enh --reference in");  // broken.png has no enhanced counterpart
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("broken.png"), std::string::npos) << r.err;
}

TEST_F(CliTest, CurateAutoOnlyAndArgumentErrors) {
  write_images("src", 4);
  ASSERT_EQ(run("curate --source src --out ds --auto-only --plugin bad=false").code, 0);
  EXPECT_EQ(load_paired_dataset(dir_ / "ds", 32).size(), 4u);
  EXPECT_NE(slurp(dir_ / "ds" / "report.csv").find("source_id,winner,total,status"), std::string::npos);
  EXPECT_EQ(run("curate --source src --out ds2").code, 2);
  EXPECT_EQ(run("curate --source src --out ds3 --auto-only --plugin nameonly").code, 2);
}
