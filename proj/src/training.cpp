#include "training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "rng.hpp"

namespace oodb {

// ---- losses ----------------------------------------------------------------------

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2, ErrorKind::Shape, "logits must be (batch, classes)");
  const int n = logits.dim(0), k = logits.dim(1);
  require(static_cast<int>(labels.size()) == n, ErrorKind::Shape, "label count != batch size");
  require(n > 0, ErrorKind::InvalidArgument, "empty batch");
  LossResult<T> out;
  out.grad = Tensor<T>(logits.shape);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[i];
    require(y >= 0 && y < k, ErrorKind::InvalidArgument,
            "label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    const T* z = logits.ptr() + static_cast<std::size_t>(i) * k;
    int jmax = 0;
    for (int j = 0; j < k; ++j) {
      require(std::isfinite(static_cast<double>(z[j])), ErrorKind::Numeric, "non-finite logit");
      if (z[j] > z[jmax]) jmax = j;
    }
    const double zmax = z[jmax];
    double rest = 0.0;
    for (int j = 0; j < k; ++j)
      if (j != jmax) rest += std::exp(static_cast<double>(z[j]) - zmax);
    const double lse = zmax + std::log1p(rest);
    total += (zmax - static_cast<double>(z[y])) + std::log1p(rest);
    T* g = out.grad.ptr() + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double p = std::exp(static_cast<double>(z[j]) - lse);
      g[j] = static_cast<T>((p - (j == y ? 1.0 : 0.0)) / n);
    }
  }
  out.loss = total / n;
  return out;
}

template <typename T>
InvarianceResult<T> invariance_loss(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape && a.rank() == 2, ErrorKind::Shape,
          "invariance loss needs equal (batch, D) activations, got " + shape_string(a.shape) +
              " and " + shape_string(b.shape));
  const int n = a.dim(0), d = a.dim(1);
  require(n > 0, ErrorKind::InvalidArgument, "empty batch");
  InvarianceResult<T> out;
  out.grad_a = Tensor<T>(a.shape);
  out.grad_b = Tensor<T>(b.shape);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const T* x = a.ptr() + static_cast<std::size_t>(i) * d;
    const T* y = b.ptr() + static_cast<std::size_t>(i) * d;
    double sq = 0.0;
    for (int j = 0; j < d; ++j) {
      const double diff = static_cast<double>(x[j]) - y[j];
      sq += diff * diff;
    }
    const double dist = std::sqrt(sq);
    total += dist;
    if (dist > 0.0) {
      T* ga = out.grad_a.ptr() + static_cast<std::size_t>(i) * d;
      T* gb = out.grad_b.ptr() + static_cast<std::size_t>(i) * d;
      for (int j = 0; j < d; ++j) {
        const double g = (static_cast<double>(x[j]) - y[j]) / (dist * n);
        ga[j] = static_cast<T>(g);
        gb[j] = static_cast<T>(-g);
      }
    }
  }
  out.loss = total / n;
  return out;
}

template LossResult<float> cross_entropy<float>(const Tensor<float>&, std::span<const int>);
template LossResult<double> cross_entropy<double>(const Tensor<double>&, std::span<const int>);
template InvarianceResult<float> invariance_loss<float>(const Tensor<float>&, const Tensor<float>&);
template InvarianceResult<double> invariance_loss<double>(const Tensor<double>&, const Tensor<double>&);

template <typename T>
ObjectiveEval<T> combined_objective(const ForwardTrace<T>& trace, std::span<const int> labels, bool paired,
                                    double lambda) {
  const auto& logits = trace.logits();
  const int b = static_cast<int>(labels.size());
  const int classes = logits.dim(1);
  require(logits.dim(0) == (paired ? 2 * b : b), ErrorKind::Shape,
          "objective: batch of " + std::to_string(logits.dim(0)) + " for " + std::to_string(b) + " labels");
  ObjectiveEval<T> out;
  out.logit_grad = Tensor<T>(logits.shape);
  if (!paired) {
    auto ce = cross_entropy(logits, labels);
    out.ce = ce.loss;
    out.logit_grad = std::move(ce.grad);
    out.total = out.ce;
    return out;
  }
  Tensor<T> head({b, classes});
  std::copy(logits.data.begin(), logits.data.begin() + static_cast<std::ptrdiff_t>(head.size()), head.data.begin());
  auto ce = cross_entropy(head, labels);
  out.ce = ce.loss;
  std::copy(ce.grad.data.begin(), ce.grad.data.end(), out.logit_grad.data.begin());

  const auto& acts = trace.probe();
  const int d = static_cast<int>(acts.item_size());
  Tensor<T> ga({b, d}), gb({b, d});
  const auto half = static_cast<std::ptrdiff_t>(b) * d;
  std::copy(acts.data.begin(), acts.data.begin() + half, ga.data.begin());
  std::copy(acts.data.begin() + half, acts.data.end(), gb.data.begin());
  auto inv = invariance_loss(ga, gb);
  out.inv = inv.loss;
  out.probe_grad = Tensor<T>(acts.shape);
  const auto lam = static_cast<T>(lambda);
  for (std::ptrdiff_t k = 0; k < half; ++k) {
    out.probe_grad.data[k] = lam * inv.grad_a.data[k];
    out.probe_grad.data[half + k] = lam * inv.grad_b.data[k];
  }
  out.total = total_loss(out.ce, out.inv, lambda);
  return out;
}

template ObjectiveEval<float> combined_objective<float>(const ForwardTrace<float>&, std::span<const int>, bool,
                                                        double);
template ObjectiveEval<double> combined_objective<double>(const ForwardTrace<double>&, std::span<const int>, bool,
                                                          double);

// ---- pairs -----------------------------------------------------------------------

PairIndex make_pairs(std::span<const int> labels, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  Rng rng(seed);
  PairIndex pairs;
  pairs.partner.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& pool = members[labels[i]];
    pairs.partner[i] = pool[rng.below(pool.size())];
  }
  return pairs;
}

// ---- Adam ------------------------------------------------------------------------

namespace {

template <typename T>
void adam_update(std::span<T> params, std::span<const T> grads, std::vector<double>& m,
                 std::vector<double>& v, const AdamState& s, double lr) {
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g;
    v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    params[i] = static_cast<T>(params[i] - lr * mhat / (std::sqrt(vhat) + s.epsilon));
  }
}

}  // namespace

template <typename T>
void adam_step(ParamStore<T>& store, const Gradients<T>& grads, AdamState& state, double lr) {
  require(grads.size() == store.tensors.size(), ErrorKind::Shape, "gradient count mismatch");
  if (state.m.empty()) {
    for (const auto& t : store.tensors) {
      const std::size_t n = t.trainable ? t.value.size() : 0;
      state.m.emplace_back(n, 0.0);
      state.v.emplace_back(n, 0.0);
    }
  }
  require(state.m.size() == store.tensors.size(), ErrorKind::Shape, "Adam state mismatch");
  ++state.step;
  for (std::size_t i = 0; i < store.tensors.size(); ++i) {
    auto& t = store.tensors[i];
    if (!t.trainable) continue;
    require(grads[i].size() == t.value.size() && state.m[i].size() == t.value.size(),
            ErrorKind::Shape, "gradient shape mismatch for " + t.name);
    adam_update<T>(t.value.span(), grads[i].span(), state.m[i], state.v[i], state, lr);
  }
}

template void adam_step<float>(ParamStore<float>&, const Gradients<float>&, AdamState&, double);
template void adam_step<double>(ParamStore<double>&, const Gradients<double>&, AdamState&, double);

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr) {
  require(params.size() == grads.size(), ErrorKind::Shape, "gradient size mismatch");
  if (state.m.empty()) {
    state.m.emplace_back(params.size(), 0.0);
    state.v.emplace_back(params.size(), 0.0);
  }
  ++state.step;
  adam_update<double>(params, grads, state.m[0], state.v[0], state, lr);
}

// ---- data helpers ------------------------------------------------------------------

Shape input_shape_of(const Dataset& dataset) {
  return {dataset.channels, dataset.height, dataset.width};
}

Tensor<float> make_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  Shape shape{static_cast<int>(indices.size())};
  const auto item = input_shape_of(dataset);
  shape.insert(shape.end(), item.begin(), item.end());
  Tensor<float> batch(shape);
  const std::size_t per = dataset.image_size();
  const int h = dataset.height, w = dataset.width, c = dataset.channels;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& px = dataset.items[indices[b]].pixels;
    float* dst = batch.ptr() + b * per;
    if (c == 1) {
      std::copy(px.begin(), px.end(), dst);
    } else {
      // HWC storage to CHW tensors.
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int ch = 0; ch < c; ++ch)
            dst[(static_cast<std::size_t>(ch) * h + y) * w + x] = px[(static_cast<std::size_t>(y) * w + x) * c + ch];
    }
  }
  return batch;
}

Tensor<float> make_batch(const Dataset& dataset) {
  std::vector<std::size_t> all(dataset.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return make_batch(dataset, all);
}

double evaluate(const Model<float>& model, const Dataset& dataset, int batch_size) {
  require(!dataset.empty(), ErrorKind::InvalidArgument, "cannot evaluate on an empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t end = std::min(dataset.size(), start + static_cast<std::size_t>(batch_size));
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const auto trace = forward(model, make_batch(dataset, idx), Mode::Eval);
    const auto& logits = trace.logits();
    const int k = logits.dim(1);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* z = logits.ptr() + b * k;
      int best = 0;
      for (int j = 1; j < k; ++j)
        if (z[j] > z[best]) best = j;
      if (best == dataset.items[idx[b]].category) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

Tensor<float> probe_activations(const Model<float>& model, const Dataset& dataset, int batch_size) {
  ForwardOptions opts;
  opts.stop_at_probe = true;
  Tensor<float> out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t end = std::min(dataset.size(), start + static_cast<std::size_t>(batch_size));
    idx.clear();
    for (std::size_t i = start; i < end; ++i) idx.push_back(i);
    const auto trace = forward(model, make_batch(dataset, idx), Mode::Eval, opts);
    const auto& probe = trace.probe();
    if (out.shape.empty()) out.shape = {0, static_cast<int>(probe.item_size())};
    out.shape[0] += probe.dim(0);
    out.data.insert(out.data.end(), probe.data.begin(), probe.data.end());
  }
  return out;
}

// ---- training loop ----------------------------------------------------------------

void TrainConfig::validate() const {
  require(learning_rate > 0.0, ErrorKind::InvalidArgument, "learning_rate must be > 0");
  require(epochs >= 1 && late_stopping_epochs >= 1, ErrorKind::InvalidArgument, "epochs must be >= 1");
  require(batch_size >= 2, ErrorKind::InvalidArgument, "batch_size must be >= 2");
  require(bn_momentum >= 0.0 && bn_momentum <= 1.0, ErrorKind::InvalidArgument,
          "bn_momentum must lie in [0,1]");
  require(lambda >= 0.0, ErrorKind::InvalidArgument, "lambda must be >= 0");
  require(lambda == 0.0 || pair_refresh_interval >= 1, ErrorKind::InvalidArgument,
          "lambda > 0 requires pair_refresh_interval >= 1");
  require(max_restarts >= 0, ErrorKind::InvalidArgument, "max_restarts must be >= 0");
}

namespace {

constexpr std::uint64_t kOrderStream = 0x6f72646572ULL;
constexpr std::uint64_t kPairStream = 0x7061697273ULL;
constexpr std::uint64_t kInitStream = 0x696e6974ULL;

class EpochCsv {
 public:
  explicit EpochCsv(const std::filesystem::path& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::trunc);
    if (!out_) fail(ErrorKind::Io, "cannot write " + path.string());
    out_ << "epoch,ind_val_acc,ood_acc,ce_loss,inv_loss,restarted\n";
    out_.flush();
  }
  void write(const EpochRecord& r) {
    if (!out_.is_open()) return;
    char line[256];
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f,%.8f,%.8f,%d\n", r.epoch, r.ind_val_accuracy,
                  r.ood_accuracy, r.train_ce_loss, r.train_inv_loss, r.restarted ? 1 : 0);
    out_ << line;
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace

TrainResult train(const TrainConfig& config, const SplitBundle& split, const NetworkSpec& spec_in,
                  const TrainHooks& hooks) {
  config.validate();
  require(!split.train.empty() && !split.val.empty() && !split.ood.empty(), ErrorKind::InvalidArgument,
          "train, val and ood splits must all be nonempty");
  require(split.train.size() >= 2, ErrorKind::InvalidArgument, "training split needs >= 2 items");

  NetworkSpec spec = spec_in;
  spec.set_bn_momentum(config.bn_momentum);

  TrainResult result;
  result.model = make_model<float>(spec, hash64({config.seed, kInitStream, 0}));
  double lr = config.learning_rate;
  AdamState adam;

  const auto& train_set = split.train;
  std::vector<int> labels(train_set.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = train_set.items[i].category;
  const double chance = 1.0 / train_set.num_categories;
  const int epochs = config.effective_epochs();
  const bool use_pairs = config.invariance_active();

  EpochCsv csv(hooks.csv_path);
  PairIndex pairs;
  bool restarted_flag = false;

  for (int attempt = 0;; ++attempt) {
    bool restart = false;
    result.pair_refresh_epochs.clear();
    pairs.refresh_count = 0;
    for (int epoch = 0; epoch < epochs; ++epoch) {
      if (use_pairs && epoch % config.pair_refresh_interval == 0) {
        pairs = make_pairs(labels, hash64({config.seed, kPairStream, static_cast<std::uint64_t>(attempt),
                                           static_cast<std::uint64_t>(epoch)}));
        pairs.refresh_count = static_cast<int>(result.pair_refresh_epochs.size()) + 1;
        result.pair_refresh_epochs.push_back(epoch);
      }

      std::vector<std::size_t> order(train_set.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng order_rng(hash64({config.seed, kOrderStream, static_cast<std::uint64_t>(attempt),
                            static_cast<std::uint64_t>(epoch)}));
      order_rng.shuffle(order);

      double ce_sum = 0.0, inv_sum = 0.0;
      int steps = 0;
      const std::size_t bs = static_cast<std::size_t>(config.batch_size);
      for (std::size_t start = 0; start < order.size(); start += bs) {
        const std::size_t end = std::min(order.size(), start + bs);
        if (end - start < 2) break;  // a single-item tail cannot be batch-normalized
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
        const std::size_t b = idx.size();
        std::vector<int> batch_labels(b);
        for (std::size_t k = 0; k < b; ++k) batch_labels[k] = labels[idx[k]];
        if (use_pairs)
          for (std::size_t k = 0; k < b; ++k) idx.push_back(pairs.partner[idx[k]]);

        const auto trace = forward(result.model, make_batch(train_set, idx), Mode::Train);
        const auto obj = combined_objective(trace, std::span<const int>(batch_labels), use_pairs, config.lambda);
        const double ce = obj.ce, inv = obj.inv;
        const auto& logit_grad = obj.logit_grad;
        const auto& probe_grad = obj.probe_grad;
        const auto grads = backward(result.model, trace, logit_grad, probe_grad);
        adam_step(result.model.store, grads, adam, lr);
        apply_running_updates(result.model, trace);
        ce_sum += ce;
        inv_sum += inv;
        ++steps;
      }

      EpochRecord rec;
      rec.epoch = epoch;
      rec.ind_val_accuracy = evaluate(result.model, split.val);
      rec.ood_accuracy = evaluate(result.model, split.ood);
      rec.train_ce_loss = steps ? ce_sum / steps : 0.0;
      rec.train_inv_loss = steps ? inv_sum / steps : 0.0;
      rec.restarted = restarted_flag;
      restarted_flag = false;
      result.records.push_back(rec);
      csv.write(rec);
      if (hooks.on_epoch) hooks.on_epoch(rec);

      if (config.restart_rule_enabled && epoch >= 10 && rec.ind_val_accuracy <= 1.1 * chance) {
        if (result.restarts >= config.max_restarts)
          throw TrainingFailure("InD validation accuracy stayed at chance after " +
                                    std::to_string(result.restarts) + " restarts",
                                result.records);
        restart = true;
        break;
      }
    }
    if (!restart) break;
    ++result.restarts;
    lr *= 0.1;
    reinitialize(result.model, hash64({config.seed, kInitStream, static_cast<std::uint64_t>(result.restarts)}));
    adam.reset();
    restarted_flag = true;
  }
  result.final_learning_rate = lr;
  return result;
}

double mean_pair_distance(const Model<float>& model, const Dataset& dataset, std::uint64_t seed) {
  require(!dataset.empty(), ErrorKind::InvalidArgument, "pair distance needs a nonempty dataset");
  const auto acts = probe_activations(model, dataset);
  std::vector<int> labels(dataset.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) labels[i] = dataset.items[i].category;
  const auto pairs = make_pairs(labels, seed);
  const std::size_t width = static_cast<std::size_t>(acts.dim(1));
  double total = 0.0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const float* a = acts.ptr() + i * width;
    const float* b = acts.ptr() + pairs.partner[i] * width;
    double ss = 0.0;
    for (std::size_t k = 0; k < width; ++k) ss += (static_cast<double>(a[k]) - b[k]) * (static_cast<double>(a[k]) - b[k]);
    total += std::sqrt(ss);
  }
  return total / static_cast<double>(dataset.size());
}

// ---- gradient checks ---------------------------------------------------------------

namespace {

Tensor<double> random_batch(Shape item_shape, int n, std::uint64_t seed) {
  Shape shape{n};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());
  Tensor<double> x(shape);
  Rng rng(seed);
  for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
  return x;
}

GradCheckReport check_case(const NetworkSpec& spec, int n, bool paired, double lambda, std::uint64_t seed,
                           double h, double tol) {
  auto model = make_model<double>(spec, hash64({seed, 1}));
  // Non-trivial affine BN parameters so gamma/beta gradients are exercised away from (1, 0).
  Rng jitter(hash64({seed, 2}));
  for (auto& t : model.store.tensors)
    if (t.trainable && (t.name.ends_with(".gamma") || t.name.ends_with(".beta")))
      for (auto& v : t.value.data) v += jitter.uniform(-0.3, 0.3);
  const int total = paired ? 2 * n : n;
  const auto batch = random_batch(spec.input_shape, total, hash64({seed, 3}));
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % spec.num_classes;
  const LossFn loss = [&](const ForwardTrace<double>& trace) {
    auto obj = combined_objective(trace, std::span<const int>(labels), paired, lambda);
    return LossEval{obj.total, std::move(obj.logit_grad), std::move(obj.probe_grad)};
  };
  return finite_difference_check(model, batch, loss, h, tol, 200, hash64({seed, 4}));
}

NetworkSpec head_spec(Shape input, std::vector<LayerSpec> body, int classes = 3) {
  NetworkSpec spec;
  spec.input_shape = std::move(input);
  spec.num_classes = classes;
  spec.layers = std::move(body);
  if (spec.input_shape.size() == 3) spec.layers.push_back(LayerSpec::flatten());
  spec.layers.push_back(LayerSpec::dense(5));
  spec.layers.push_back(LayerSpec::relu());
  spec.probe_index = static_cast<int>(spec.layers.size()) - 1;
  spec.layers.push_back(LayerSpec::dense(classes));
  return spec;
}

}  // namespace

GradCheckSuite gradcheck_suite(std::uint64_t seed, double h, double tol) {
  using L = LayerSpec;
  const Shape img{2, 6, 6};
  struct Case {
    const char* name;
    NetworkSpec spec;
    bool paired;
    double lambda;
  };
  const std::vector<Case> cases = {
      {"dense", head_spec({7}, {L::dense(6), L::relu()}), false, 0.0},
      {"cross_entropy", head_spec({4}, {}), false, 0.0},
      {"conv", head_spec(img, {L::conv(3, 3, 1, 1), L::relu()}), false, 0.0},
      {"conv_stride2", head_spec(img, {L::conv(3, 3, 2, 1)}), false, 0.0},
      {"conv_valid", head_spec(img, {L::conv(2, 2, 1, 0)}), false, 0.0},
      {"batchnorm_conv", head_spec(img, {L::conv(3, 3, 1, 1), L::batchnorm(0.9), L::relu()}), false, 0.0},
      {"batchnorm_dense", head_spec({7}, {L::dense(6), L::batchnorm(0.9), L::relu()}), false, 0.0},
      {"residual",
       head_spec(img, {L::conv(3, 3, 1, 1), L::relu(),
                       L::residual({L::conv(3, 3, 1, 1), L::relu(), L::conv(3, 3, 1, 1)}), L::relu()}),
       false, 0.0},
      {"avgpool", head_spec(img, {L::conv(3, 3, 1, 1), L::relu(), L::avgpool(2)}), false, 0.0},
      {"invariance", head_spec(img, {L::conv(3, 3, 1, 1), L::batchnorm(0.9), L::relu(), L::avgpool(2)}), true,
       0.1},
      {"mini_resnet", NetworkSpec::mini_resnet({1, 8, 8}, 3, 0.9, 1e-3, 3, 6), false, 0.0},
      {"mini_resnet_invariance", NetworkSpec::mini_resnet({1, 8, 8}, 3, 0.9, 1e-3, 3, 6), true, 0.1},
  };
  GradCheckSuite suite;
  suite.passed = true;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto& c = cases[i];
    auto report = check_case(c.spec, 4, c.paired, c.lambda, hash64({seed, i}), h, tol);
    suite.max_rel_error = std::max(suite.max_rel_error, report.max_rel_error);
    suite.passed = suite.passed && report.passed;
    suite.cases.push_back({c.name, std::move(report)});
  }
  return suite;
}

}  // namespace oodb
