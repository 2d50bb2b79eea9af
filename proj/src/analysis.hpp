#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "datagen.hpp"
#include "network.hpp"
#include "splits.hpp"

namespace oodb {

// Mean activity per (neuron, category, condition), min-max normalized per neuron.
struct ActivityTable {
  int neurons = 0;
  int num_categories = 0;
  int num_conditions = 0;
  std::vector<double> values;  // [neuron][category][condition]
  std::vector<std::pair<double, double>> raw_range;  // per neuron, before normalization
  std::vector<bool> degenerate;
  std::vector<std::size_t> counts;  // items per (category, condition)

  double at(int neuron, int category, int condition) const {
    return values[(static_cast<std::size_t>(neuron) * num_categories + category) * num_conditions + condition];
  }
};

// Builds the normalized table from raw per-cell means laid out like `values`.
ActivityTable activity_table_from_means(int neurons, int num_categories, int num_conditions,
                                        const std::vector<double>& raw_means,
                                        std::vector<std::size_t> counts);

// Order-independent sum/count accumulator; shards can be merged in any order.
class ActivityAccumulator {
 public:
  ActivityAccumulator(int neurons, int num_categories, int num_conditions);
  void add(int category, int condition, std::span<const float> activations);
  void merge(const ActivityAccumulator& other);
  ActivityTable table() const;  // coverage error when a cell is empty

 private:
  int neurons_, categories_, conditions_;
  std::vector<double> sums_;
  std::vector<std::size_t> counts_;
};

// Eval-mode probe activations over a dataset that covers every (c, n) cell.
ActivityTable activity_table(const Model<float>& model, const Dataset& dataset);

struct NeuronScore {
  int preferred_category = 0;
  double selectivity = 0.0;
  double invariance = 0.0;
  double si = 0.0;
  bool degenerate = false;
};

std::vector<NeuronScore> neuron_scores(const ActivityTable& table);

struct SiSummary {
  double summary = 0.0;    // mean of the top ceil(fraction * N) scores
  double p80_value = 0.0;  // smallest score inside that top band
  std::size_t top_count = 0;
};

SiSummary layer_si_summary(const std::vector<NeuronScore>& scores, double top_fraction = 0.2);
SiSummary layer_si_summary(std::vector<double> si_values, double top_fraction = 0.2);

double pearson(std::span<const double> xs, std::span<const double> ys);

struct MeanCi {
  double mean = 0.0;
  double half_width = 0.0;
};

// Two-sided 97.5% Student-t quantile for `df` degrees of freedom.
double t_quantile_975(int df);
MeanCi mean_ci95(std::span<const double> values);

struct DeltaOutcome {
  bool acc_up = false;  // strict improvement of mean OoD accuracy
  bool si_up = false;   // strict improvement of the layer SI summary
};

// Strict sign of a change; exact ties count as "not up".
inline bool improved(double approach, double baseline) { return approach > baseline; }

struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 0;
  bool defined() const { return den > 0; }
  double value() const { return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0; }
  double percent() const { return 100.0 * value(); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
  friend bool operator==(const Fraction&, const Fraction&) = default;
};

struct FrequencyTable {
  Fraction p_acc_up;
  Fraction p_si_up;
  Fraction p_acc_up_given_si_up;
  Fraction p_acc_up_given_si_down;
};

FrequencyTable delta_frequency_table(const std::vector<DeltaOutcome>& outcomes);

// "75.0 (9/12)"; undefined fractions print as "undefined (0/0)".
std::string format_fraction(const Fraction& f);

std::string frequency_table_csv(const std::vector<std::pair<std::string, FrequencyTable>>& rows);

struct WinCounts {
  int wins_a = 0;
  int wins_b = 0;
  int ties = 0;
};

WinCounts pairwise_win_counts(const std::map<std::string, double>& results_a,
                              const std::map<std::string, double>& results_b);

nlohmann::json si_report_json(const ActivityTable& table, const std::vector<NeuronScore>& scores,
                              const SiSummary& summary);

}  // namespace oodb
