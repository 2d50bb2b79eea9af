// Exercises the shared library through its public header only.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include <json.hpp>
#include <unistd.h>

#include "oodbench/oodbench.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Scratch {
  fs::path path;
  Scratch() {
    path = fs::temp_directory_path() / ("oodb_capi_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

json take_json(char* s) {
  REQUIRE(s != nullptr);
  auto j = json::parse(s);
  oodb_string_free(s);
  return j;
}

oodb_config* small_config() {
  oodb_config* cfg = nullptr;
  REQUIRE(oodb_config_parse(R"({
    "data": {"num_categories": 5, "num_conditions": 5, "cells": [0, 2, 4, 6, 8],
             "glyph_size": 6, "canvas_size": 18, "samples_per_combination": 8, "seed": 3},
    "split": {"degrees": [2, 3, 4], "train_size": 40, "val_size": 10, "ood_size": 10, "level": "medium", "seed": 4},
    "network": {"channels": 2, "hidden": 4},
    "train": {"epochs": 3, "batch_size": 16, "bn_momentum": 0.9, "seed": 5}
  })",
                            &cfg) == OODB_OK);
  return cfg;
}

}  // namespace

TEST_CASE("status names and version") {
  CHECK(std::string(oodb_status_name(OODB_OK)) == "ok");
  CHECK(std::string(oodb_status_name(OODB_ERR_CONFIG)) == "config");
  CHECK(std::string(oodb_version()).size() > 0);
}

TEST_CASE("config errors report the offending pointer") {
  oodb_config* cfg = nullptr;
  CHECK(oodb_config_parse(R"({"train": {"epochs": "many"}})", &cfg) == OODB_ERR_CONFIG);
  CHECK(cfg == nullptr);
  CHECK(std::string(oodb_last_error_pointer()) == "/train/epochs");
  CHECK(std::string(oodb_last_error()).find("epochs") != std::string::npos);
  CHECK(oodb_config_parse("{not json", &cfg) == OODB_ERR_CONFIG);
  CHECK(oodb_config_parse("{}", nullptr) == OODB_ERR_INVALID_ARGUMENT);

  REQUIRE(oodb_config_default(&cfg) == OODB_OK);
  CHECK(oodb_config_override(cfg, "/train/bn_momentum=0.25") == OODB_OK);
  char* text = nullptr;
  REQUIRE(oodb_config_to_json(cfg, &text) == OODB_OK);
  CHECK(take_json(text)["train"]["bn_momentum"] == 0.25);
  CHECK(oodb_config_override(cfg, "/train/bn_momentum=7") == OODB_ERR_CONFIG);
  CHECK(std::string(oodb_last_error_pointer()) == "/train/bn_momentum");
  // A rejected override leaves the config untouched.
  REQUIRE(oodb_config_to_json(cfg, &text) == OODB_OK);
  CHECK(take_json(text)["train"]["bn_momentum"] == 0.25);
  oodb_config_free(cfg);

  char* defaults = nullptr;
  REQUIRE(oodb_config_describe_defaults(&defaults) == OODB_OK);
  CHECK(std::string(defaults).find("/train/bn_momentum = 0.99") != std::string::npos);
  oodb_string_free(defaults);
}

TEST_CASE("dataset, split, train, evaluate, save and load") {
  Scratch dir;
  oodb_config* cfg = small_config();
  oodb_dataset* ds = nullptr;
  REQUIRE(oodb_generate(cfg, &ds) == OODB_OK);
  char* info = nullptr;
  REQUIRE(oodb_dataset_info(ds, &info) == OODB_OK);
  auto dj = take_json(info);
  CHECK(dj["size"] == 200);
  CHECK(dj["height"] == 18);
  REQUIRE(oodb_dataset_save(ds, (dir / "data").c_str()) == OODB_OK);
  oodb_dataset* back = nullptr;
  REQUIRE(oodb_dataset_load((dir / "data").c_str(), &back) == OODB_OK);
  REQUIRE(oodb_dataset_info(back, &info) == OODB_OK);
  CHECK(take_json(info) == dj);

  oodb_split* split = nullptr;
  REQUIRE(oodb_split_create(cfg, ds, &split) == OODB_OK);
  REQUIRE(oodb_split_info(split, &info) == OODB_OK);
  const auto sj = take_json(info);
  CHECK(sj["level"] == "medium");
  CHECK(sj["diversity"] == "3/5");
  CHECK(sj["train"] == 40);
  REQUIRE(oodb_split_save(split, (dir / "split").c_str()) == OODB_OK);
  oodb_split* split2 = nullptr;
  REQUIRE(oodb_split_load((dir / "split").c_str(), &split2) == OODB_OK);
  REQUIRE(oodb_split_info(split2, &info) == OODB_OK);
  CHECK(take_json(info) == sj);

  oodb_model* model = nullptr;
  char* summary = nullptr;
  REQUIRE(oodb_train(cfg, split2, (dir / "epochs.csv").c_str(), &model, &summary) == OODB_OK);
  const auto tj = take_json(summary);
  CHECK(tj["epochs"].size() == 3u);
  CHECK(fs::exists(dir / "epochs.csv"));
  double acc = -1.0;
  REQUIRE(oodb_evaluate(model, ds, &acc) == OODB_OK);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);

  uint64_t fp = 0, fp2 = 0;
  REQUIRE(oodb_model_fingerprint(model, &fp) == OODB_OK);
  REQUIRE(oodb_model_save(model, (dir / "m.ckpt").c_str()) == OODB_OK);
  oodb_model* loaded = nullptr;
  REQUIRE(oodb_model_load(cfg, ds, (dir / "m.ckpt").c_str(), &loaded) == OODB_OK);
  REQUIRE(oodb_model_fingerprint(loaded, &fp2) == OODB_OK);
  CHECK(fp == fp2);

  char* si = nullptr;
  REQUIRE(oodb_analyze_si(loaded, ds, &si) == OODB_OK);
  CHECK(take_json(si)["neurons"].size() == 4u);

  // Wrong architecture for the checkpoint.
  CHECK(oodb_config_override(cfg, "/network/hidden=5") == OODB_OK);
  oodb_model* wrong = nullptr;
  CHECK(oodb_model_load(cfg, ds, (dir / "m.ckpt").c_str(), &wrong) == OODB_ERR_CONSISTENCY);
  CHECK(wrong == nullptr);
  CHECK(oodb_dataset_load((dir / "nowhere").c_str(), &back) != OODB_OK);

  oodb_model_free(loaded);
  oodb_model_free(model);
  oodb_split_free(split2);
  oodb_split_free(split);
  oodb_dataset_free(back);
  oodb_dataset_free(ds);
  oodb_config_free(cfg);
}

TEST_CASE("null handles are rejected, frees accept null") {
  CHECK(oodb_dataset_info(nullptr, nullptr) == OODB_ERR_INVALID_ARGUMENT);
  CHECK(oodb_evaluate(nullptr, nullptr, nullptr) == OODB_ERR_INVALID_ARGUMENT);
  oodb_model_free(nullptr);
  oodb_dataset_free(nullptr);
  oodb_split_free(nullptr);
  oodb_config_free(nullptr);
  oodb_string_free(nullptr);
}

TEST_CASE("gradient check through the library") {
  char* out = nullptr;
  int passed = 0;
  REQUIRE(oodb_gradcheck(3, &out, &passed) == OODB_OK);
  CHECK(passed == 1);
  const auto j = take_json(out);
  CHECK(j.contains("cases"));
}
