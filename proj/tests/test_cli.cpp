// Drives the command-line tool as a subprocess; OODB_CLI names the binary.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>
#include <sys/wait.h>

#include "test_util.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string output;
};

Run cli(const std::string& args) {
  const char* bin = std::getenv("OODB_CLI");
  REQUIRE(bin != nullptr);
  static int n = 0;
  const fs::path log = fs::temp_directory_path() / ("oodb_cli_" + std::to_string(::getpid()) + "_" + std::to_string(n++));
  const std::string cmd = std::string("\"") + bin + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  fs::remove(log);
  return r;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

std::string small_config(const TempDir& dir) {
  const auto path = dir / "cfg.json";
  std::ofstream(path) << R"({
    "data": {"num_categories": 5, "num_conditions": 5, "cells": [0, 2, 4, 6, 8],
             "glyph_size": 6, "canvas_size": 18, "samples_per_combination": 8},
    "split": {"degrees": [2, 3, 4], "train_size": 40, "val_size": 10, "ood_size": 10},
    "network": {"channels": 2, "hidden": 4},
    "train": {"epochs": 2, "batch_size": 16}
  })";
  return path.string();
}

}  // namespace

TEST_CASE("help lists the defaults") {
  const auto r = cli("--help");
  CHECK(r.code == 0);
  CHECK(r.output.find("/train/bn_momentum = 0.99") != std::string::npos);
}

TEST_CASE("config errors exit 2 with the pointer") {
  TempDir dir;
  std::ofstream(dir / "bad.json") << R"({"train": {"epochs": "many"}})";
  const auto r = cli("train --config " + (dir / "bad.json").string() + " --split " + dir.path().string() +
                     " --out " + (dir / "o").string());
  CHECK(r.code == 2);
  CHECK(r.output.find("/train/epochs") != std::string::npos);
  CHECK(cli("gen-data --set /train/bn_momentum=3 --out " + (dir / "g").string()).code == 2);
  CHECK(cli("no-such-command").code == 2);
  CHECK(cli("train --approach best-of-three --split x --out " + (dir / "t").string()).code == 2);
}

TEST_CASE("gen-data, split, train, analyze-si") {
  TempDir dir;
  const auto cfg = small_config(dir);
  const auto data = (dir / "data").string(), split = (dir / "split").string(), run = (dir / "run").string();

  auto r = cli("gen-data --config " + cfg + " --seed 4 --out " + data);
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "data" / "images.idx"));
  CHECK(fs::exists(dir / "data" / "manifest.jsonl"));
  CHECK(read_json(dir / "data" / "effective_config.json")["data"]["seed"] == 4);

  r = cli("split --config " + cfg + " --data " + data + " --set /split/level=high --out " + split);
  REQUIRE(r.code == 0);
  CHECK(read_json(dir / "split" / "effective_config.json")["split"]["level"] == "high");

  r = cli("train --config " + cfg + " --split " + split + " --approach tuned-bn --bn-momentum 0.5 --out " + run);
  REQUIRE(r.code == 0);
  const auto eff = read_json(dir / "run" / "effective_config.json");
  CHECK(eff["train"]["bn_momentum"] == 0.5);
  CHECK(eff["train"]["tuned_bn"] == true);
  CHECK(fs::exists(dir / "run" / "model.ckpt"));
  CHECK(fs::exists(dir / "run" / "train_summary.json"));
  std::ifstream csv(dir / "run" / "epochs.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "epoch,ind_val_acc,ood_acc,ce_loss,inv_loss,restarted");

  r = cli("analyze-si --config " + cfg + " --model " + (dir / "run" / "model.ckpt").string() + " --data " + data +
          " --out " + (dir / "si").string());
  CHECK(r.code == 0);

  // Runtime failure: missing split directory.
  r = cli("train --config " + cfg + " --split " + (dir / "missing").string() + " --out " + (dir / "r2").string());
  CHECK(r.code == 1);
}
