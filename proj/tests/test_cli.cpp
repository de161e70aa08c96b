#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;

namespace {

fs::path scratch() {
  static const fs::path p = [] {
    fs::path d = fs::temp_directory_path() / "diffx_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

int run(const std::string& args) {
  const std::string cmd = std::string("\"") + DIFFX_CLI + "\" " + args + " >> \"" + (scratch() / "log.txt").string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string tiny_config() {
  const fs::path p = scratch() / "tiny.cfg";
  std::ofstream(p) << "data.train = 4\ndata.val = 1\ndata.test = 2\ndata.image_size = 16\nvae.stem_width = 8\n"
                      "vae.widths = 8,16\nvae.groups = 4\nvae.lp_levels = 2\n";
  return p.string();
}

}  // namespace

TEST(Cli, HelpAndUsage) {
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("train"), 2);
  EXPECT_EQ(run("datagen --preset huge"), 2);
  EXPECT_EQ(run("datagen --config /nonexistent.cfg"), 2);
}

TEST(Cli, ConfigErrorsExitTwo) {
  const fs::path bad = scratch() / "bad.cfg";
  std::ofstream(bad) << "train.learning_rate = 1e-3\n";
  EXPECT_EQ(run("datagen --config " + bad.string() + " --out " + (scratch() / "bad").string()), 2);
  EXPECT_EQ(run("datagen --set task.modalities=rgb,sonar --out " + (scratch() / "bad").string()), 2);
}

TEST(Cli, DataErrorsExitThree) {
  const std::string out = (scratch() / "data").string();
  const std::string cfg = tiny_config();
  ASSERT_EQ(run("datagen --preset desk --config " + cfg + " --out " + out), 0);
  EXPECT_EQ(run("datagen --preset desk --config " + cfg + " --out " + out), 3);
  EXPECT_EQ(run("datagen --preset desk --config " + cfg + " --out " + out + " --force"), 0);
  EXPECT_EQ(run("train-vae --preset desk --config " + cfg + " --out " + out + " --set data.image_size=32"), 3);
}

TEST(Cli, CheckpointErrorsExitFour) {
  const std::string out = (scratch() / "ckpt").string();
  const std::string cfg = tiny_config();
  ASSERT_EQ(run("datagen --preset desk --config " + cfg + " --out " + out), 0);
  EXPECT_EQ(run("train-diffusion --preset desk --config " + cfg + " --out " + out), 4);
  EXPECT_EQ(run("sample --preset desk --config " + cfg + " --out " + out), 4);
  EXPECT_EQ(run("train-vae --preset desk --config " + cfg + " --out " + out + " --resume " + cfg), 4);
}
