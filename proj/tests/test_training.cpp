#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "datagen.hpp"
#include "rng.hpp"
#include "splits.hpp"
#include "test_util.hpp"
#include "training.hpp"

using namespace oodb;

namespace {

Dataset small_grid(std::uint64_t seed, double noise = 0.05) {
  GridSpec g;
  g.num_categories = g.num_conditions = 5;
  g.cells = {0, 2, 4, 6, 8};
  g.glyph_size = 6;
  g.canvas_size = 18;
  g.samples_per_combination = 10;
  g.noise_std = noise;
  return generate_grid_positions(g, seed);
}

const SplitBundle& small_split() {
  static const SplitBundle s = make_split(small_grid(1), {2, 3, 4}, DiversityLevel::High, {60, 20, 20}, 2, 3);
  return s;
}

NetworkSpec small_net() { return NetworkSpec::mini_resnet({1, 18, 18}, 5, 0.9, 1e-3, 4, 8); }

TrainConfig quick(int epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.learning_rate = 3e-3;
  c.seed = 7;
  c.bn_momentum = 0.9;
  return c;
}

}  // namespace

TEST_CASE("cross-entropy of uniform logits is ln K") {
  const Tensor<double> z({2, 9}, 0.0);
  const std::vector<int> y = {3, 8};
  const auto r = cross_entropy(z, y);
  CHECK(r.loss == doctest::Approx(std::log(9.0)).epsilon(1e-14));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 9; ++j)
      CHECK(r.grad[static_cast<std::size_t>(i) * 9 + j] ==
            doctest::Approx((1.0 / 9.0 - (j == y[static_cast<std::size_t>(i)] ? 1.0 : 0.0)) / 2.0));
}

TEST_CASE("cross-entropy is stable for large margins") {
  Tensor<double> z({1, 3});
  z.data = {50.0, 0.0, 0.0};
  const std::vector<int> y = {0};
  const auto r = cross_entropy(z, y);
  CHECK(r.loss > 0.0);
  CHECK(r.loss < 1e-20);
  CHECK(r.loss == doctest::Approx(2.0 * std::exp(-50.0)).epsilon(1e-10));
  z.data = {1000.0, -1000.0, 0.0};
  const std::vector<int> wrong = {1};
  CHECK(cross_entropy(z, wrong).loss == doctest::Approx(2000.0));
  z.data[1] = std::numeric_limits<double>::quiet_NaN();
  CHECK(kind_of([&] { cross_entropy(z, y); }) == ErrorKind::Numeric);
  z.data[1] = std::numeric_limits<double>::infinity();
  CHECK(kind_of([&] { cross_entropy(z, y); }) == ErrorKind::Numeric);
  const std::vector<int> bad = {3};
  z.data = {0.0, 0.0, 0.0};
  CHECK(kind_of([&] { cross_entropy(z, bad); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("invariance loss values") {
  Tensor<double> a({2, 2}), b({2, 2});
  a.data = {1.0, 0.0, 0.0, 0.0};
  b.data = {0.0, 1.0, 3.0, 4.0};
  const auto r = invariance_loss(a, b);
  CHECK(r.loss == doctest::Approx((std::sqrt(2.0) + 5.0) / 2.0));
  CHECK(r.grad_a[0] == doctest::Approx(1.0 / (std::sqrt(2.0) * 2.0)));
  CHECK(r.grad_b[0] == doctest::Approx(-1.0 / (std::sqrt(2.0) * 2.0)));
  CHECK(r.grad_a[3] == doctest::Approx(-4.0 / 10.0));

  const auto same = invariance_loss(a, a);
  CHECK(same.loss == 0.0);
  for (double g : same.grad_a.data) CHECK(g == 0.0);

  CHECK(kind_of([&] { invariance_loss(a, Tensor<double>({2, 3})); }) == ErrorKind::Shape);
}

TEST_CASE("total loss") {
  CHECK(total_loss(2.0, 0.5, 0.1) == doctest::Approx(2.05));
  CHECK(total_loss(1.25, 123.0, 0.0) == 1.25);
  CHECK(kind_of([] { total_loss(1.0, 1.0, -0.1); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("pairs share the category and are reproducible") {
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) labels.push_back(i % 4);
  labels.push_back(9);  // a lone category
  const auto p = make_pairs(labels, 5);
  REQUIRE(p.partner.size() == labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) CHECK(labels[p.partner[i]] == labels[i]);
  CHECK(p.partner.back() == labels.size() - 1);
  CHECK(make_pairs(labels, 5).partner == p.partner);
  CHECK(make_pairs(labels, 6).partner != p.partner);
}

TEST_CASE("pair partners are uniform within a category") {
  const std::vector<int> labels = {0, 0, 0, 1, 1};
  int self = 0, total = 0;
  std::vector<int> hits(3);
  for (std::uint64_t seed = 0; seed < 6000; ++seed) {
    const auto p = make_pairs(labels, seed);
    ++hits[p.partner[0]];
    self += p.partner[0] == 0;
    ++total;
  }
  CHECK(std::abs(static_cast<double>(self) / total - 1.0 / 3.0) < 0.02);
  for (int h : hits) CHECK(std::abs(static_cast<double>(h) / total - 1.0 / 3.0) < 0.02);
}

TEST_CASE("first Adam step moves each parameter by about lr") {
  std::vector<double> x = {1.0, -2.0, 0.5};
  const std::vector<double> g = {0.3, -7.0, 1e-3};
  AdamState s;
  adam_step(std::span<double>(x), std::span<const double>(g), s, 0.01);
  CHECK(x[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(x[1] == doctest::Approx(-2.0 + 0.01).epsilon(1e-6));
  CHECK(x[2] == doctest::Approx(0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8)).epsilon(1e-9));

  std::vector<double> y = {4.0};
  AdamState s2;
  for (int i = 0; i < 5; ++i) adam_step(std::span<double>(y), std::vector<double>{0.0}, s2, 0.1);
  CHECK(y[0] == 4.0);
}

TEST_CASE("Adam minimizes a quadratic bowl") {
  const std::vector<double> c = {3.0, -1.0, 0.25, 10.0};
  std::vector<double> x(4, 0.0), g(4);
  AdamState s;
  for (int it = 0; it < 5000; ++it) {
    for (std::size_t i = 0; i < x.size(); ++i) g[i] = 2.0 * (x[i] - c[i]) * static_cast<double>(i + 1);
    adam_step(std::span<double>(x), std::span<const double>(g), s, 0.05);
  }
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i] == doctest::Approx(c[i]).epsilon(1e-3));
}

TEST_CASE("training produces one record per epoch and learns") {
  TempDir dir;
  TrainHooks hooks;
  hooks.csv_path = dir / "epochs.csv";
  int calls = 0;
  hooks.on_epoch = [&](const EpochRecord&) { ++calls; };
  const auto r = train(quick(12), small_split(), small_net(), hooks);
  CHECK(r.records.size() == 12u);
  CHECK(calls == 12);
  for (int i = 0; i < 12; ++i) CHECK(r.records[static_cast<std::size_t>(i)].epoch == i);
  CHECK(r.records.back().train_ce_loss < r.records.front().train_ce_loss);
  CHECK(r.records.back().ind_val_accuracy > 0.4);
  CHECK(r.restarts == 0);

  std::ifstream in(dir / "epochs.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,ind_val_acc,ood_acc,ce_loss,inv_loss,restarted");
  int rows = 0;
  while (std::getline(in, line)) {
    CHECK(line.rfind(std::to_string(rows) + ",", 0) == 0);
    CHECK(line.back() == '0');
    ++rows;
  }
  CHECK(rows == 12);
}

TEST_CASE("late stopping runs the long schedule") {
  auto c = quick(3);
  c.flags.late_stopping = true;
  c.late_stopping_epochs = 1000;
  c.batch_size = 32;
  const auto r = train(c, small_split(), NetworkSpec::mini_resnet({1, 18, 18}, 5, 0.9, 1e-3, 2, 4));
  CHECK(r.records.size() == 1000u);
  CHECK(r.records.back().epoch == 999);
}

TEST_CASE("training is deterministic for a seed") {
  auto c = quick(4);
  c.lambda = 0.1;
  c.flags.invariance_loss = true;
  const auto a = train(c, small_split(), small_net());
  const auto b = train(c, small_split(), small_net());
  CHECK(a.records == b.records);
  CHECK(a.model.store.fingerprint() == b.model.store.fingerprint());
  c.seed = 8;
  CHECK(train(c, small_split(), small_net()).model.store.fingerprint() != a.model.store.fingerprint());
}

TEST_CASE("pairs are refreshed at epoch 0 and every interval") {
  auto c = quick(7);
  c.lambda = 0.05;
  c.pair_refresh_interval = 3;
  const auto r = train(c, small_split(), small_net());
  CHECK(r.pair_refresh_epochs == std::vector<int>{0, 3, 6});
  CHECK(r.records.front().train_inv_loss > 0.0);
  const auto plain = train(quick(2), small_split(), small_net());
  CHECK(plain.pair_refresh_epochs.empty());
  for (const auto& rec : plain.records) CHECK(rec.train_inv_loss == 0.0);
}

TEST_CASE("lambda 0 with the invariance flag is the plain objective") {
  auto c = quick(3);
  c.flags.invariance_loss = true;
  c.lambda = 0.0;
  const auto a = train(c, small_split(), small_net());
  const auto b = train(quick(3), small_split(), small_net());
  CHECK(a.records == b.records);
  CHECK(a.model.store.fingerprint() == b.model.store.fingerprint());
}

TEST_CASE("bn momentum reaches the trained model") {
  auto c = quick(1);
  c.bn_momentum = 0.37;
  const auto r = train(c, small_split(), small_net());
  for (const auto& slot : r.model.store.bn) CHECK(slot.momentum == 0.37);

  c.bn_momentum = 1.0;
  c.epochs = 1;
  const auto frozen = train(c, small_split(), small_net());
  for (const auto& slot : frozen.model.store.bn) {
    for (float v : frozen.model.store.tensors[static_cast<std::size_t>(slot.running_mean)].value.data) CHECK(v == 0.0f);
    for (float v : frozen.model.store.tensors[static_cast<std::size_t>(slot.running_var)].value.data) CHECK(v == 1.0f);
  }
  c.bn_momentum = 1.5;
  CHECK(kind_of([&] { train(c, small_split(), small_net()); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("restart rule fires on chance-level validation accuracy") {
  // Blank images: every prediction is the same class, so balanced validation sits at chance.
  auto s = small_split();
  for (auto* part : {&s.train, &s.val, &s.ood})
    for (auto& it : part->items) std::fill(it.pixels.begin(), it.pixels.end(), 0.0f);
  auto c = quick(12);
  c.restart_rule_enabled = true;
  c.max_restarts = 2;
  try {
    train(c, s, small_net());
    FAIL("expected TrainingFailure");
  } catch (const TrainingFailure& e) {
    CHECK(e.kind() == ErrorKind::TrainingFailed);
    const auto& recs = e.records();
    REQUIRE(recs.size() == 33u);  // three attempts of epochs 0..10
    for (std::size_t i = 0; i < recs.size(); ++i) {
      CHECK(recs[i].epoch == static_cast<int>(i % 11));
      CHECK(recs[i].restarted == (i == 11 || i == 22));
      CHECK(recs[i].ind_val_accuracy == doctest::Approx(0.2));
    }
  }
  c.restart_rule_enabled = false;
  CHECK(train(c, s, small_net()).records.size() == 12u);
}

TEST_CASE("evaluate against a per-item oracle") {
  const auto& s = small_split();
  const auto r = train(quick(3), s, small_net());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < s.ood.size(); ++i) {
    const std::vector<std::size_t> one = {i};
    const auto t = forward(r.model, make_batch(s.ood, one), Mode::Eval);
    const auto& z = t.logits();
    int best = 0;
    for (int j = 1; j < z.dim(1); ++j)
      if (z[static_cast<std::size_t>(j)] > z[static_cast<std::size_t>(best)]) best = j;
    correct += best == s.ood.items[i].category;
  }
  const double want = static_cast<double>(correct) / static_cast<double>(s.ood.size());
  CHECK(evaluate(r.model, s.ood) == doctest::Approx(want).epsilon(1e-12));
  CHECK(evaluate(r.model, s.ood, 3) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("evaluate with constant logits picks the lowest index") {
  auto m = make_model<float>(small_net(), 1);
  for (auto& t : m.store.tensors)
    if (t.trainable) t.value.fill(0.0f);
  const auto& val = small_split().val;
  double zeros = 0;
  for (const auto& it : val.items) zeros += it.category == 0;
  CHECK(evaluate(m, val) == doctest::Approx(zeros / static_cast<double>(val.size())));
  CHECK(kind_of([&] { evaluate(m, val.empty_like()); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("a small step against the invariance gradient lowers the pair distance") {
  const auto spec = NetworkSpec::mini_resnet({1, 8, 8}, 3, 0.9, 1e-3, 3, 6);
  auto m = make_model<double>(spec, 4);
  Rng rng(2);
  Tensor<double> x({8, 1, 8, 8});
  for (auto& v : x.data) v = rng.uniform(0.0, 1.0);
  const std::vector<int> labels = {0, 1, 2, 0};
  auto inv_of = [&](const Model<double>& model) {
    return combined_objective(forward(model, x, Mode::Train), std::span<const int>(labels), true, 1.0).inv;
  };
  const double before = inv_of(m);
  const auto t = forward(m, x, Mode::Train);
  const auto obj = combined_objective(t, std::span<const int>(labels), true, 1.0);
  const auto g = backward(m, t, Tensor<double>(t.logits().shape), obj.probe_grad);
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t k = 0; k < g[i].size(); ++k) m.store.tensors[i].value[k] -= 1e-3 * g[i][k];
  CHECK(inv_of(m) < before);
}

TEST_CASE("train config validation") {
  const auto& s = small_split();
  auto bad = quick(2);
  bad.batch_size = 1;
  CHECK(kind_of([&] { train(bad, s, small_net()); }) == ErrorKind::InvalidArgument);
  bad = quick(0);
  CHECK(kind_of([&] { train(bad, s, small_net()); }) == ErrorKind::InvalidArgument);
  bad = quick(2);
  bad.lambda = -1.0;
  CHECK(kind_of([&] { train(bad, s, small_net()); }) == ErrorKind::InvalidArgument);
  auto empty = s;
  empty.ood = s.ood.empty_like();
  CHECK(kind_of([&] { train(quick(2), empty, small_net()); }) == ErrorKind::InvalidArgument);
}
