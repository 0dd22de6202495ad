#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "support/evald_fixtures.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "lndetr_cli_test";

struct Result {
  int code;
  std::string out;
};

Result run(const std::string& args) {
  const auto log = kDir / "out.txt";
  const auto cmd = std::string(LNDETR_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

struct Setup {
  Setup() {
    fs::remove_all(kDir);
    fs::create_directories(kDir);
  }
};
const Setup setup;

}  // namespace

TEST_CASE("froc on the crafted fixture prints its recalls") {
  const auto f = lndetr::testing::crafted_two_volume();
  lndetr::evald::write_predictions((kDir / "pred.txt").string(), f.preds);
  lndetr::evald::write_ground_truth((kDir / "gt.txt").string(), f.gts);
  const auto r = run("froc --pred " + (kDir / "pred.txt").string() + " --gt " + (kDir / "gt.txt").string());
  CHECK(r.code == 0);
  CHECK(r.out.find("recall@0.5000FP=0.3333 recall@1.0000FP=0.6667 recall@2.0000FP=0.6667 recall@4.0000FP=0.6667") !=
        std::string::npos);
}

TEST_CASE("usage and data errors map to exit codes") {
  CHECK(run("").code == 1);
  CHECK(run("bogus").code == 1);
  CHECK(run("froc --pred a.txt").code == 1);
  CHECK(run("train --out x --no-such-flag").code == 1);
  CHECK(run("froc --pred /nonexistent/p.txt --gt /nonexistent/g.txt").code == 2);
  CHECK(run("eval --checkpoint /nonexistent.ckpt --data /nonexistent --out " + kDir.string()).code == 2);

  std::ofstream(kDir / "bad.json") << "{\"lr\": \"fast\"}";
  CHECK(run("train --config " + (kDir / "bad.json").string() + " --data d --out " + (kDir / "r").string()).code == 1);
  CHECK(run("train --data d --out " + (kDir / "r").string() + " --ablation use_cl").code == 1);
  CHECK(run("train --data /nonexistent --out " + (kDir / "r").string()).code == 2);
}

TEST_CASE("gen-data, zero-epoch train and eval run end to end") {
  const auto data = (kDir / "data").string();
  auto r = run("gen-data --out " + data + " --seed 4 --train 2 --val 1 --test 1");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(fs::path(data) / "manifest.json"));

  const auto out = (kDir / "run").string();
  r = run("train --data " + data + " --out " + out + " --epochs 0 --seed 3");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(fs::path(out) / "init.ckpt"));
  CHECK(fs::exists(fs::path(out) / "run.json"));
  CHECK(fs::exists(fs::path(out) / "config.json"));

  r = run("eval --checkpoint " + out + "/best.ckpt --data " + data + " --split val --out " + out);
  CHECK(r.code == 0);
  CHECK(fs::exists(fs::path(out) / "predictions_val.txt"));
  CHECK(r.out.find("volumes=1") != std::string::npos);

  r = run("froc --pred " + out + "/predictions_val.txt --gt " + data + "/gt_val.txt");
  CHECK(r.code == 0);
}
