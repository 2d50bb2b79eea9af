#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "analysis.hpp"
#include "datagen.hpp"
#include "splits.hpp"
#include "training.hpp"

namespace oodb {

enum class Approach { Baseline, LateStopping, TunedBn, InvarianceLoss, ThreeTogether, BestOfThree };

const char* to_string(Approach a);
// Accepts both "late_stopping" and the CLI spelling "late-stopping" (and "invariance").
Approach approach_from_string(const std::string& s);

struct HyperGrid {
  std::vector<double> learning_rates;
  std::vector<double> bn_momenta;
  std::vector<double> lambdas;
  std::vector<int> refresh_intervals;

  static HyperGrid full();
  static HyperGrid fast();
  void validate() const;
};

struct HyperParams {
  double learning_rate = 1e-3;
  double bn_momentum = 0.99;
  double lambda = 0.0;
  int refresh_interval = 10;
  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

nlohmann::json to_json(const HyperParams& hp);

// Grid points in deterministic order; only the approach's own dimensions vary.
std::vector<HyperParams> grid_points(const HyperGrid& grid, Approach approach, const HyperParams& fixed = {});

// Single-approach training configuration (best_of_three has none of its own).
TrainConfig make_train_config(const TrainConfig& base, Approach approach, const HyperParams& hp,
                              std::uint64_t seed);

struct NetworkOptions {
  int channels = 16;
  int hidden = 64;
  double bn_epsilon = 1e-3;
};

struct DatasetEntry {
  std::string id = "grid-positions";
  GridSpec grid;
  std::filesystem::path source;  // existing dataset directory; empty means procedural
  std::vector<int> degrees = {2, 4, 8};
  SplitSizes sizes{240, 80, 160};
};

struct ExperimentPlan {
  std::vector<DatasetEntry> datasets;
  std::vector<DiversityLevel> diversities = {DiversityLevel::Low, DiversityLevel::Medium, DiversityLevel::High};
  std::vector<Approach> approaches = {Approach::Baseline, Approach::LateStopping, Approach::TunedBn,
                                      Approach::InvarianceLoss};
  HyperGrid grid = HyperGrid::full();
  TrainConfig base;
  NetworkOptions network;
  int n_trials = 5;
  std::uint64_t master_seed = 0;
  int workers = 1;

  void validate() const;
};

// Worker count after applying OODBENCH_DETERMINISTIC=1.
int effective_workers(int requested);

// Runs fn(0..n-1) on up to `workers` threads; fn must only touch its own slot.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

// ---- seeds ------------------------------------------------------------------------

constexpr int kReservedTrial = 1 << 20;

std::uint64_t trial_seed(std::uint64_t master_seed, const std::string& dataset_id, DiversityLevel level,
                         int trial);
// Shared by every diversity level of one trial so the ladder stays nested.
std::uint64_t ladder_seed(std::uint64_t master_seed, const std::string& dataset_id, int trial);
// The reserved trial draws its own dataset.
std::uint64_t data_seed(std::uint64_t master_seed, const std::string& dataset_id, bool reserved);

// ---- single runs ------------------------------------------------------------------

struct RunOutcome {
  bool failed = false;
  std::string error;
  double ind_val_accuracy = 0.0;
  double ood_accuracy = 0.0;
  double si_summary = 0.0;
  int restarts = 0;
  std::uint64_t checkpoint_fingerprint = 0;
};

using RunFn = std::function<RunOutcome(const TrainConfig&)>;

struct TrialContext {
  const Dataset* full = nullptr;  // activity source for SI
  SplitBundle split;
  NetworkSpec spec;
};

// Trains one configuration on a prepared split; writes epoch CSV, checkpoint
// and SI report into `dir` when it is nonempty.
RunOutcome execute_run(const TrainConfig& config, const TrialContext& ctx, const std::filesystem::path& dir);

// ---- grid search ------------------------------------------------------------------

struct GridPointResult {
  HyperParams params;
  RunOutcome outcome;
};

struct GridSearchResult {
  Approach approach = Approach::Baseline;
  HyperParams chosen;
  double best_ood_accuracy = 0.0;
  std::vector<GridPointResult> table;
  int runs = 0;
};

class SearchFailure : public Error {
 public:
  SearchFailure(const std::string& message, std::vector<GridPointResult> table)
      : Error(ErrorKind::TrainingFailed, message), table_(std::move(table)) {}
  const std::vector<GridPointResult>& table() const { return table_; }

 private:
  std::vector<GridPointResult> table_;
};

// Argmax of OoD accuracy over the points; ties go to the earliest point.
GridSearchResult grid_search(const std::vector<HyperParams>& points, Approach approach, const TrainConfig& base,
                             std::uint64_t seed, const RunFn& run, int workers = 1);

// `seed` is the reserved trial's seed, recorded alongside the table.
nlohmann::json grid_search_json(const GridSearchResult& result, std::uint64_t seed);

// ---- trials -----------------------------------------------------------------------

struct TrialResult {
  int trial = 0;
  std::uint64_t seed = 0;
  CombinationSet combos;
  RunOutcome outcome;
};

struct Aggregate {
  MeanCi ind_val_accuracy;
  MeanCi ood_accuracy;
  MeanCi si_summary;
  int successes = 0;
};

Aggregate aggregate_trials(const std::vector<TrialResult>& trials);

// ---- plan-level operations ----------------------------------------------------------

struct PlanData {
  Dataset measured;
  Dataset reserved;  // independently generated for the reserved trial
};

PlanData plan_datasets(const ExperimentPlan& plan, const DatasetEntry& entry);

// Measurement-trial seeds of a cell; fails on any collision, including with the reserved trial.
std::vector<std::uint64_t> measurement_seeds(const ExperimentPlan& plan, const std::string& dataset_id,
                                             DiversityLevel level);

// Split and network for one trial (kReservedTrial for the reserved one).
TrialContext trial_context(const ExperimentPlan& plan, const DatasetEntry& entry, const Dataset& data,
                           DiversityLevel level, int trial);

// Searches the approach's own grid on the reserved trial's split.
GridSearchResult reserved_grid_search(const ExperimentPlan& plan, const DatasetEntry& entry, const Dataset& reserved,
                                      DiversityLevel level, Approach approach, int workers);

// n_trials measurement runs sharing the cell's split seeds; `dir` receives trial<k>/.
std::vector<TrialResult> run_trials(const ExperimentPlan& plan, const DatasetEntry& entry, const Dataset& measured,
                                    DiversityLevel level, Approach approach, const HyperParams& hp,
                                    const std::filesystem::path& dir, int workers);

// ---- matrix -----------------------------------------------------------------------

struct CellResult {
  std::string dataset;
  DiversityLevel level = DiversityLevel::Low;
  Approach approach = Approach::Baseline;
  HyperParams params;
  std::optional<Approach> selected;  // best_of_three winner
  std::vector<TrialResult> trials;
  Aggregate aggregate;
};

struct DeltaRecord {
  std::string dataset;
  DiversityLevel level = DiversityLevel::Low;
  Approach approach = Approach::Baseline;
  double acc_delta = 0.0;
  double si_delta = 0.0;
  bool acc_up = false;
  bool si_up = false;
};

struct MatrixResult {
  std::vector<CellResult> cells;
  std::vector<DeltaRecord> deltas;
  std::uint64_t master_seed = 0;
  int n_trials = 0;
};

// Prepares datasets and splits, runs grid searches on the reserved trial and the
// measurement trials for every cell; writes the results tree under `out`.
MatrixResult run_matrix(const ExperimentPlan& plan, const std::filesystem::path& out);

// Δ signs against the baseline cell of the same (dataset, diversity).
std::vector<DeltaRecord> delta_records(const std::vector<CellResult>& cells);

// Indexes of the single-approach results that best_of_three picks between.
Approach pick_best_of_three(const std::map<Approach, double>& reserved_ood);

HyperParams three_together_params(const HyperParams& tuned_bn, const HyperParams& invariance);

nlohmann::json to_json(const MatrixResult& result);
MatrixResult matrix_from_json(const nlohmann::json& j);

// ---- reports ------------------------------------------------------------------------

std::string fig4_csv(const MatrixResult& result);
std::string fig5_csv(const MatrixResult& result);
// Pearson r of per-cell mean SI summary against mean OoD accuracy.
double fig5_pearson(const MatrixResult& result);
std::string table1_csv(const MatrixResult& result);
// One row per approach in first-seen order, then "total" over late_stopping,
// tuned_bn and invariance_loss.
std::string table2_csv(const MatrixResult& result);

// Writes fig4.csv, fig5.csv, fig5_pearson.csv, table1.csv, table2.csv.
void write_reports(const MatrixResult& result, const std::filesystem::path& dir);

}  // namespace oodb
