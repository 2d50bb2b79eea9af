#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "datagen.hpp"
#include "error.hpp"
#include "network.hpp"
#include "splits.hpp"

namespace oodb {

// ---- losses ----------------------------------------------------------------------

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad;
};

// Mean over the batch of -log softmax(logits)[label]; gradient (softmax - onehot) / batch.
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

template <typename T>
struct InvarianceResult {
  double loss = 0.0;
  Tensor<T> grad_a;  // d loss / d probe_acts
  Tensor<T> grad_b;  // d loss / d pair_probe_acts
};

// Mean over pairs of the Euclidean distance between probe activations. The
// subgradient at zero distance is taken as zero.
template <typename T>
InvarianceResult<T> invariance_loss(const Tensor<T>& probe_acts, const Tensor<T>& pair_probe_acts);

inline double total_loss(double ce, double inv, double lambda) {
  require(lambda >= 0.0, ErrorKind::InvalidArgument, "lambda must be >= 0");
  return lambda == 0.0 ? ce : ce + lambda * inv;
}

// Cross-entropy on the first labels.size() items plus lambda * invariance
// between the two halves of the probe batch when `paired` (the batch then holds
// each item followed, as a second half, by its partner).
template <typename T>
struct ObjectiveEval {
  double ce = 0.0;
  double inv = 0.0;
  double total = 0.0;
  Tensor<T> logit_grad;
  Tensor<T> probe_grad;  // empty when not paired
};

template <typename T>
ObjectiveEval<T> combined_objective(const ForwardTrace<T>& trace, std::span<const int> labels, bool paired,
                                    double lambda);

// ---- pairs -----------------------------------------------------------------------

struct PairIndex {
  std::vector<std::size_t> partner;  // per training item, an item of the same category
  int refresh_count = 0;
};

// Uniform same-category partner per item; a category with one item self-pairs.
PairIndex make_pairs(std::span<const int> labels, std::uint64_t seed);

// ---- Adam ------------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;

  void reset() {
    step = 0;
    m.clear();
    v.clear();
  }
};

// One bias-corrected Adam update over every trainable tensor.
template <typename T>
void adam_step(ParamStore<T>& store, const Gradients<T>& grads, AdamState& state, double lr);

// Same update on plain spans (moments sized on first use).
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr);

// ---- training loop ----------------------------------------------------------------

struct ApproachFlags {
  bool late_stopping = false;
  bool tuned_bn = false;
  bool invariance_loss = false;
  friend bool operator==(const ApproachFlags&, const ApproachFlags&) = default;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 100;
  int late_stopping_epochs = 1000;
  int batch_size = 32;
  double bn_momentum = 0.99;
  double lambda = 0.0;
  int pair_refresh_interval = 10;
  std::uint64_t seed = 0;
  ApproachFlags flags;
  bool restart_rule_enabled = false;
  int max_restarts = 3;

  void validate() const;
  int effective_epochs() const { return flags.late_stopping ? late_stopping_epochs : epochs; }
  bool invariance_active() const { return lambda > 0.0; }
};

struct EpochRecord {
  int epoch = 0;
  double ind_val_accuracy = 0.0;
  double ood_accuracy = 0.0;
  double train_ce_loss = 0.0;
  double train_inv_loss = 0.0;
  bool restarted = false;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainResult {
  Model<float> model;
  std::vector<EpochRecord> records;
  int restarts = 0;
  double final_learning_rate = 0.0;
  std::vector<int> pair_refresh_epochs;  // epochs (within the final attempt) where pairs were redrawn
};

class TrainingFailure : public Error {
 public:
  TrainingFailure(const std::string& message, std::vector<EpochRecord> records)
      : Error(ErrorKind::TrainingFailed, message), records_(std::move(records)) {}
  const std::vector<EpochRecord>& records() const { return records_; }

 private:
  std::vector<EpochRecord> records_;
};

struct TrainHooks {
  std::filesystem::path csv_path;  // epoch CSV, flushed per epoch; empty disables
  std::function<void(const EpochRecord&)> on_epoch;
};

TrainResult train(const TrainConfig& config, const SplitBundle& split, const NetworkSpec& spec,
                  const TrainHooks& hooks = {});

// Fraction of items whose arg-max logit (ties to the lowest index) equals the category.
double evaluate(const Model<float>& model, const Dataset& dataset, int batch_size = 256);

// Batch tensor (N, C, H, W) built from dataset items.
Tensor<float> make_batch(const Dataset& dataset, std::span<const std::size_t> indices);
Tensor<float> make_batch(const Dataset& dataset);

// Probe activations for all items, eval mode, as (N, D).
Tensor<float> probe_activations(const Model<float>& model, const Dataset& dataset, int batch_size = 256);

// Input shape (C, H, W) for a dataset.
Shape input_shape_of(const Dataset& dataset);

// Mean Euclidean distance between probe activations of same-category pairs
// drawn from `dataset` (eval mode).
double mean_pair_distance(const Model<float>& model, const Dataset& dataset, std::uint64_t seed);

// ---- gradient checks ---------------------------------------------------------------

struct GradCheckCase {
  std::string name;
  GradCheckReport report;
};

struct GradCheckSuite {
  std::vector<GradCheckCase> cases;
  double max_rel_error = 0.0;
  bool passed = false;
};

// Small float64 networks covering each layer kind, cross-entropy, the combined
// invariance objective (lambda 0.1) and a reduced mini-resnet.
GradCheckSuite gradcheck_suite(std::uint64_t seed, double h = 1e-4, double tol = 1e-4);

}  // namespace oodb
