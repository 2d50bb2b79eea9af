#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace oodb {

enum class LayerKind { Dense, Conv, BatchNorm, Relu, AvgPool, Flatten, Residual };

const char* to_string(LayerKind kind);

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  int units = 0;  // dense outputs or conv output channels
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  double momentum = 0.99;
  double epsilon = 1e-3;
  std::vector<LayerSpec> inner;  // residual body

  static LayerSpec dense(int out);
  static LayerSpec conv(int out_channels, int kernel, int stride = 1, int pad = 0);
  static LayerSpec batchnorm(double momentum = 0.99, double epsilon = 1e-3);
  static LayerSpec relu();
  static LayerSpec avgpool(int kernel);
  static LayerSpec flatten();
  static LayerSpec residual(std::vector<LayerSpec> body);

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  Shape input_shape;  // per item: (C, H, W) or (F)
  std::vector<LayerSpec> layers;
  int probe_index = -1;  // top-level relu whose output is the probe activation
  int num_classes = 0;

  // conv-BN-relu, one residual block, avgpool(2), dense(hidden)-relu (probe), dense(classes).
  static NetworkSpec mini_resnet(Shape input_shape, int num_classes, double bn_momentum = 0.99,
                                 double bn_epsilon = 1e-3, int channels = 16, int hidden = 64);

  void set_bn_momentum(double momentum);
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

enum class Mode { Train, Eval };

// Layer with resolved shapes and parameter slots.
struct Node {
  LayerKind kind = LayerKind::Relu;
  LayerSpec spec;
  Shape in_shape;
  Shape out_shape;
  int param = -1;  // first tensor index in the store
  int bn = -1;     // batch-norm slot
  std::vector<Node> inner;
};

template <typename T>
struct ParamTensor {
  std::string name;
  Tensor<T> value;
  bool trainable = true;
};

struct BnSlot {
  int running_mean = -1;  // tensor indices
  int running_var = -1;
  double momentum = 0.99;
  double epsilon = 1e-3;
};

template <typename T>
struct ParamStore {
  std::vector<ParamTensor<T>> tensors;
  std::vector<BnSlot> bn;

  std::size_t num_trainable_values() const;
  std::uint64_t fingerprint() const;  // hash of names, shapes and f32 payloads
};

template <typename T>
struct Model {
  NetworkSpec spec;
  std::vector<Node> nodes;
  ParamStore<T> store;
};

// Builds the layer plan and Glorot-uniform initial parameters.
template <typename T>
Model<T> make_model(const NetworkSpec& spec, std::uint64_t seed);

// Re-draws every parameter from `seed` and resets running statistics.
template <typename T>
void reinitialize(Model<T>& model, std::uint64_t seed);

template <typename To, typename From>
Model<To> model_cast(const Model<From>& model);

// i.i.d. uniform on [-L, L], L = sqrt(6 / (fan_in + fan_out)).
template <typename T>
Tensor<T> glorot_uniform(int fan_in, int fan_out, const Shape& shape, std::uint64_t seed);

template <typename T>
struct LayerCache {
  Tensor<T> aux;           // BN: normalized input
  std::vector<T> vec;      // BN: inverse std per channel
  std::vector<Tensor<T>> acts;  // residual body activations
  std::vector<LayerCache> inner;
};

struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;  // biased batch variance
};

template <typename T>
struct ForwardTrace {
  Mode mode = Mode::Eval;
  int probe_index = -1;
  std::vector<Tensor<T>> acts;  // acts[0] input, acts[i+1] output of layer i
  std::vector<LayerCache<T>> caches;
  std::vector<BatchStats> bn_stats;  // per BN slot, train mode only
  std::uint64_t relu_mask_hash = 0;

  bool valid() const { return !acts.empty(); }
  const Tensor<T>& logits() const { return acts.back(); }
  const Tensor<T>& probe() const { return acts.at(static_cast<std::size_t>(probe_index) + 1); }
};

struct ForwardOptions {
  bool hash_relu_masks = false;
  // Stop after the probe layer (logits are then not produced).
  bool stop_at_probe = false;
};

template <typename T>
ForwardTrace<T> forward(const Model<T>& model, const Tensor<T>& batch, Mode mode,
                        ForwardOptions options = {});

// Gradients are parallel to store.tensors; running statistics get zero tensors.
template <typename T>
using Gradients = std::vector<Tensor<T>>;

// probe_grad may be empty (no injection).
template <typename T>
Gradients<T> backward(const Model<T>& model, const ForwardTrace<T>& trace,
                      const Tensor<T>& logit_grad, const Tensor<T>& probe_grad);

// running <- (1 - momentum) * batch + momentum * running, elementwise.
void bn_update_running(std::span<float> running, std::span<const double> batch, double momentum);
void bn_update_running(std::span<double> running, std::span<const double> batch, double momentum);

// Applies bn_update_running to every BN slot with the batch statistics in `trace`.
template <typename T>
void apply_running_updates(Model<T>& model, const ForwardTrace<T>& trace);

// ---- checkpoints -------------------------------------------------------------

void save_checkpoint(const ParamStore<float>& store, const std::filesystem::path& path);
// Loads into an existing store; names and shapes must match.
void load_checkpoint(ParamStore<float>& store, const std::filesystem::path& path);
std::string checkpoint_bytes(const ParamStore<float>& store);

// ---- finite differences ---------------------------------------------------------

struct LossEval {
  double loss = 0.0;
  Tensor<double> logit_grad;
  Tensor<double> probe_grad;  // may be empty
};

using LossFn = std::function<LossEval(const ForwardTrace<double>&)>;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // perturbation flipped a relu mask
  bool passed = false;
  std::vector<std::pair<std::string, double>> per_tensor;  // max error per tensor
};

GradCheckReport finite_difference_check(Model<double>& model, const Tensor<double>& batch,
                                        const LossFn& loss_fn, double h = 1e-4, double tol = 1e-4,
                                        std::size_t coords_per_tensor = 200,
                                        std::uint64_t seed = 1);

}  // namespace oodb
