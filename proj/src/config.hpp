#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "experiment.hpp"

namespace oodb {

constexpr int kConfigVersion = 1;

// One document for every subcommand: data, split, network, train and experiment.
struct RunConfig {
  DatasetEntry data{"grid-positions", GridSpec{}, {}, {2, 4, 8}, {240, 80, 160}};
  std::uint64_t data_seed = 0;
  DiversityLevel level = DiversityLevel::Low;
  std::uint64_t split_seed = 0;
  NetworkOptions network;
  TrainConfig train;

  std::vector<Approach> approaches = {Approach::Baseline, Approach::LateStopping, Approach::TunedBn,
                                      Approach::InvarianceLoss};
  std::vector<DiversityLevel> diversities = {DiversityLevel::Low, DiversityLevel::Medium, DiversityLevel::High};
  int n_trials = 5;
  std::uint64_t master_seed = 0;
  std::string grid_name = "full";
  HyperGrid grid = HyperGrid::full();
  int workers = 1;
  std::vector<DatasetEntry> extra_datasets;  // experiment-only datasets besides `data`
};

// Strict: unknown keys and type errors raise ConfigError naming the JSON pointer.
RunConfig parse_config(const nlohmann::json& doc);
nlohmann::json to_json(const RunConfig& config);

// Reads a JSON file (syntax errors raise ConfigError at pointer "").
nlohmann::json read_config_document(const std::filesystem::path& path);

// "<pointer>=<json value>"; a value that is not valid JSON is taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);
void apply_override(nlohmann::json& doc, const std::string& pointer, const nlohmann::json& value);

ExperimentPlan to_plan(const RunConfig& config);

// Documented defaults, one "pointer = value" per line (used by --help).
std::string describe_defaults();

}  // namespace oodb
