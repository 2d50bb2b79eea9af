#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "experiment.hpp"
#include "test_util.hpp"

using namespace oodb;

namespace {

CellResult cell(const std::string& ds, DiversityLevel level, Approach a, double ood, double si = 0.5) {
  CellResult c;
  c.dataset = ds;
  c.level = level;
  c.approach = a;
  c.aggregate.ood_accuracy = {ood, 0.01};
  c.aggregate.si_summary = {si, 0.01};
  c.aggregate.ind_val_accuracy = {0.9, 0.01};
  c.aggregate.successes = 5;
  return c;
}

// Published per-cell orderings of best-of-three (A), three-together (T) and baseline (C).
MatrixResult table1_fixture() {
  const std::vector<std::pair<std::string, std::vector<std::string>>> orders = {
      {"mnist", {"ACT", "ACT", "ATC"}},
      {"ilab", {"ATC", "ACT", "CTA"}},
      {"carscg", {"ACT", "ACT", "ATC"}},
      {"miscgoods", {"TAC", "TAC", "ACT"}}};
  const DiversityLevel levels[] = {DiversityLevel::Low, DiversityLevel::Medium, DiversityLevel::High};
  MatrixResult r;
  for (const auto& [ds, per_level] : orders)
    for (int l = 0; l < 3; ++l) {
      const auto& o = per_level[static_cast<std::size_t>(l)];
      for (int rank = 0; rank < 3; ++rank) {
        const double acc = 0.9 - 0.1 * rank;
        const Approach a = o[static_cast<std::size_t>(rank)] == 'A'   ? Approach::BestOfThree
                           : o[static_cast<std::size_t>(rank)] == 'T' ? Approach::ThreeTogether
                                                                      : Approach::Baseline;
        r.cells.push_back(cell(ds, levels[l], a, acc));
      }
    }
  r.deltas = delta_records(r.cells);
  return r;
}

ExperimentPlan tiny_plan() {
  ExperimentPlan p;
  DatasetEntry e;
  e.id = "tiny";
  e.grid.num_categories = e.grid.num_conditions = 5;
  e.grid.cells = {0, 2, 4, 6, 8};
  e.grid.glyph_size = 6;
  e.grid.canvas_size = 18;
  e.grid.samples_per_combination = 8;
  e.degrees = {2, 3, 4};
  e.sizes = {40, 10, 10};
  p.datasets = {e};
  p.diversities = {DiversityLevel::Low, DiversityLevel::High};
  p.approaches = {Approach::Baseline, Approach::TunedBn, Approach::ThreeTogether, Approach::BestOfThree};
  p.grid = {{1e-3}, {0.5, 0.9}, {0.1}, {2}};
  p.base.epochs = 2;
  p.base.late_stopping_epochs = 3;
  p.base.batch_size = 16;
  p.network = {2, 4, 1e-3};
  p.n_trials = 2;
  p.master_seed = 9;
  return p;
}

}  // namespace

TEST_CASE("grid cardinalities") {
  const auto full = HyperGrid::full();
  CHECK(grid_points(full, Approach::Baseline).size() == 5u);
  CHECK(grid_points(full, Approach::LateStopping).size() == 5u);
  CHECK(grid_points(full, Approach::TunedBn).size() == 25u);
  CHECK(grid_points(full, Approach::InvarianceLoss).size() == 100u);
  const auto pts = grid_points(full, Approach::InvarianceLoss);
  CHECK(std::set<std::tuple<double, double, int>>(
            [&] {
              std::set<std::tuple<double, double, int>> s;
              for (const auto& p : pts) s.insert({p.learning_rate, p.lambda, p.refresh_interval});
              return s;
            }())
            .size() == 100u);
  for (const auto& p : grid_points(full, Approach::TunedBn)) CHECK(p.lambda == 0.0);
  CHECK(grid_points(HyperGrid::fast(), Approach::InvarianceLoss).size() == 3u);
  CHECK(kind_of([] { grid_points(HyperGrid{{}, {0.9}, {0.1}, {10}}, Approach::Baseline); }) ==
        ErrorKind::InvalidArgument);
}

TEST_CASE("approach training configurations") {
  TrainConfig base;
  HyperParams hp{0.01, 0.5, 0.1, 20};
  const auto b = make_train_config(base, Approach::Baseline, hp, 3);
  CHECK(b.flags == ApproachFlags{});
  CHECK(b.bn_momentum == 0.99);
  CHECK(b.lambda == 0.0);
  CHECK(b.learning_rate == 0.01);
  CHECK(b.seed == 3u);
  CHECK(make_train_config(base, Approach::LateStopping, hp, 3).effective_epochs() == 1000);
  CHECK(make_train_config(base, Approach::TunedBn, hp, 3).bn_momentum == 0.5);
  const auto inv = make_train_config(base, Approach::InvarianceLoss, hp, 3);
  CHECK(inv.lambda == 0.1);
  CHECK(inv.pair_refresh_interval == 20);
  CHECK(inv.bn_momentum == 0.99);
  const auto all = make_train_config(base, Approach::ThreeTogether, hp, 3);
  CHECK(all.flags == ApproachFlags{true, true, true});
  CHECK(all.restart_rule_enabled);
  CHECK(all.bn_momentum == 0.5);
  CHECK(all.lambda == 0.1);
  CHECK(kind_of([&] { make_train_config(base, Approach::BestOfThree, hp, 3); }) == ErrorKind::InvalidArgument);

  const auto tt = three_together_params({1e-3, 0.1, 0.0, 10}, {1e-4, 0.99, 0.01, 50});
  CHECK(tt == HyperParams{1e-4, 0.1, 0.01, 50});
}

TEST_CASE("approach names") {
  for (Approach a : {Approach::Baseline, Approach::LateStopping, Approach::TunedBn, Approach::InvarianceLoss,
                     Approach::ThreeTogether, Approach::BestOfThree})
    CHECK(approach_from_string(to_string(a)) == a);
  CHECK(approach_from_string("late-stopping") == Approach::LateStopping);
  CHECK(approach_from_string("invariance") == Approach::InvarianceLoss);
  CHECK(kind_of([] { approach_from_string("dropout"); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("seeds: reserved trial is isolated and measurement seeds are distinct") {
  auto plan = tiny_plan();
  plan.n_trials = 50;
  std::set<std::uint64_t> all;
  for (auto level : {DiversityLevel::Low, DiversityLevel::Medium, DiversityLevel::High}) {
    const auto seeds = measurement_seeds(plan, "tiny", level);
    CHECK(seeds.size() == 50u);
    for (auto s : seeds) {
      CHECK(s != trial_seed(plan.master_seed, "tiny", level, kReservedTrial));
      all.insert(s);
    }
    CHECK(measurement_seeds(plan, "tiny", level) == seeds);
  }
  CHECK(all.size() == 150u);
  CHECK(trial_seed(1, "a", DiversityLevel::Low, 0) != trial_seed(2, "a", DiversityLevel::Low, 0));
  CHECK(trial_seed(1, "a", DiversityLevel::Low, 0) != trial_seed(1, "b", DiversityLevel::Low, 0));
  CHECK(data_seed(1, "a", true) != data_seed(1, "a", false));
  CHECK(ladder_seed(1, "a", 0) != ladder_seed(1, "a", 1));

  const auto data = plan_datasets(plan, plan.datasets[0]);
  CHECK(data.measured.size() == data.reserved.size());
  CHECK(data.measured.items != data.reserved.items);
}

TEST_CASE("trial contexts share a nested ladder across diversity levels") {
  const auto plan = tiny_plan();
  const auto data = plan_datasets(plan, plan.datasets[0]);
  const auto low = trial_context(plan, plan.datasets[0], data.measured, DiversityLevel::Low, 0);
  const auto mid = trial_context(plan, plan.datasets[0], data.measured, DiversityLevel::Medium, 0);
  const auto high = trial_context(plan, plan.datasets[0], data.measured, DiversityLevel::High, 0);
  for (const auto& p : low.split.combos.pairs) CHECK(mid.split.combos.contains(p.first, p.second));
  for (const auto& p : mid.split.combos.pairs) CHECK(high.split.combos.contains(p.first, p.second));
  CHECK(low.split.train.size() == high.split.train.size());
  CHECK(diversity(low.split.combos).str() == "2/5");
  CHECK(diversity(high.split.combos).str() == "4/5");
  CHECK(low.full == &data.measured);
}

TEST_CASE("grid search picks the best point and breaks ties early") {
  const auto pts = grid_points(HyperGrid::full(), Approach::TunedBn);
  const RunFn run = [](const TrainConfig& c) {
    RunOutcome o;
    o.ood_accuracy = c.bn_momentum == 0.5 ? 0.7 : 0.2;
    o.failed = c.learning_rate == 0.1;
    return o;
  };
  const auto r = grid_search(pts, Approach::TunedBn, TrainConfig{}, 5, run, 3);
  CHECK(r.runs == 25);
  CHECK(r.chosen.bn_momentum == 0.5);
  CHECK(r.chosen.learning_rate == 0.01);  // first non-failed lr with the best momentum
  CHECK(r.best_ood_accuracy == 0.7);
  const auto j = grid_search_json(r, 77);
  CHECK(j["table"].size() == 25u);
  CHECK(j["reserved_seed"] == 77);

  const RunFn all_fail = [](const TrainConfig&) {
    RunOutcome o;
    o.failed = true;
    return o;
  };
  CHECK(kind_of([&] { grid_search(pts, Approach::TunedBn, TrainConfig{}, 5, all_fail); }) ==
        ErrorKind::TrainingFailed);
}

TEST_CASE("best of three picks by reserved accuracy") {
  CHECK(pick_best_of_three({{Approach::LateStopping, 0.3}, {Approach::TunedBn, 0.5}, {Approach::InvarianceLoss, 0.4}}) ==
        Approach::TunedBn);
  CHECK(pick_best_of_three({{Approach::LateStopping, 0.5}, {Approach::TunedBn, 0.5}, {Approach::InvarianceLoss, 0.4}}) ==
        Approach::LateStopping);
  CHECK(kind_of([] { pick_best_of_three({{Approach::TunedBn, 0.5}}); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("delta records against the baseline") {
  std::vector<CellResult> cells = {
      cell("d", DiversityLevel::Low, Approach::Baseline, 0.5, 0.5),
      cell("d", DiversityLevel::Low, Approach::TunedBn, 0.6, 0.4),
      cell("d", DiversityLevel::Low, Approach::InvarianceLoss, 0.5, 0.7),
      cell("d", DiversityLevel::High, Approach::Baseline, 0.8, 0.5),
      cell("d", DiversityLevel::High, Approach::TunedBn, 0.7, 0.6),
      cell("d", DiversityLevel::High, Approach::InvarianceLoss, 0.9, 0.9),
  };
  const auto d = delta_records(cells);
  REQUIRE(d.size() == 4u);
  CHECK(d[0].acc_up);
  CHECK_FALSE(d[0].si_up);
  CHECK(d[0].acc_delta == doctest::Approx(0.1));
  CHECK_FALSE(d[1].acc_up);  // exact tie is not an improvement
  CHECK(d[1].si_up);
  CHECK_FALSE(d[2].acc_up);
  CHECK(d[3].acc_up);
  CHECK(d[3].si_up);

  cells.erase(cells.begin() + 3);
  CHECK(kind_of([&] { delta_records(cells); }) == ErrorKind::Config);
}

TEST_CASE("aggregate over trials skips failures") {
  std::vector<TrialResult> trials(4);
  const double ood[] = {0.2, 0.4, 0.6, 0.9};
  for (int i = 0; i < 4; ++i) trials[static_cast<std::size_t>(i)].outcome.ood_accuracy = ood[i];
  trials[3].outcome.failed = true;
  const auto a = aggregate_trials(trials);
  CHECK(a.successes == 3);
  CHECK(a.ood_accuracy.mean == doctest::Approx(0.4));
  CHECK(a.ood_accuracy.half_width == doctest::Approx(4.303 * 0.2 / std::sqrt(3.0)));
  trials[1].outcome.failed = trials[2].outcome.failed = true;
  CHECK(kind_of([&] { aggregate_trials(trials); }) == ErrorKind::TrainingFailed);
}

TEST_CASE("win counts reproduce the published comparison totals") {
  const auto csv = table1_csv(table1_fixture());
  CHECK(csv ==
        "comparison,mnist,ilab,carscg,miscgoods,total,ties\n"
        "best_of_three vs baseline,3 vs 0,2 vs 1,3 vs 0,3 vs 0,11 vs 1,0\n"
        "three_together vs baseline,1 vs 2,1 vs 2,1 vs 2,2 vs 1,5 vs 7,0\n"
        "best_of_three vs three_together,3 vs 0,2 vs 1,3 vs 0,1 vs 2,9 vs 3,0\n");
}

TEST_CASE("frequency table report pools the single approaches") {
  MatrixResult r;
  const char* ds[] = {"a", "b", "c", "d"};
  const DiversityLevel levels[] = {DiversityLevel::Low, DiversityLevel::Medium, DiversityLevel::High};
  // 12 invariance-loss cases: 10 with acc and SI up, one acc up with SI down, one both down.
  int k = 0;
  for (const char* d : ds)
    for (auto l : levels) {
      r.cells.push_back(cell(d, l, Approach::Baseline, 0.5, 0.5));
      const bool si_up = k < 10;
      const bool acc_up = k < 11;
      r.cells.push_back(cell(d, l, Approach::InvarianceLoss, acc_up ? 0.6 : 0.4, si_up ? 0.6 : 0.4));
      ++k;
    }
  r.deltas = delta_records(r.cells);
  const auto csv = table2_csv(r);
  std::istringstream in(csv);
  std::string header, row, total;
  std::getline(in, header);
  std::getline(in, row);
  std::getline(in, total);
  CHECK(row == "invariance_loss,91.7 (11/12),83.3 (10/12),100.0 (10/10),50.0 (1/2)");
  CHECK(total == "total,91.7 (11/12),83.3 (10/12),100.0 (10/10),50.0 (1/2)");
}

TEST_CASE("matrix JSON round-trip and reports") {
  TempDir dir;
  const auto r = table1_fixture();
  auto j = to_json(r);
  const auto back = matrix_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(table1_csv(back) == table1_csv(r));
  write_reports(r, dir / "reports");
  for (const char* f : {"fig4.csv", "fig5.csv", "fig5_pearson.csv", "table1.csv", "table2.csv"})
    CHECK(std::filesystem::exists(dir / "reports" / f));
  j.erase("cells");
  CHECK(kind_of([&] { matrix_from_json(j); }) == ErrorKind::Format);
}

TEST_CASE("pearson over cells") {
  MatrixResult r;
  for (int i = 0; i < 6; ++i) r.cells.push_back(cell("d", DiversityLevel::Low, Approach::Baseline, 0.1 * i, 0.2 * i + 0.1));
  CHECK(fig5_pearson(r) == doctest::Approx(1.0));
  r.cells.resize(1);
  CHECK(kind_of([&] { fig5_pearson(r); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("plan validation") {
  auto p = tiny_plan();
  p.approaches = {Approach::TunedBn};
  CHECK(kind_of([&] { p.validate(); }) == ErrorKind::Config);
  p = tiny_plan();
  p.n_trials = 1;
  CHECK(kind_of([&] { p.validate(); }) == ErrorKind::Config);
  p = tiny_plan();
  p.datasets.push_back(p.datasets[0]);
  CHECK(kind_of([&] { p.validate(); }) == ErrorKind::Config);
}

TEST_CASE("deterministic mode forces one worker") {
  ::setenv("OODBENCH_DETERMINISTIC", "1", 1);
  CHECK(effective_workers(8) == 1);
  ::unsetenv("OODBENCH_DETERMINISTIC");
  CHECK(effective_workers(8) == 8);
  CHECK(effective_workers(0) == 1);
}

TEST_CASE("tiny matrix end to end, independent of worker count") {
  TempDir dir;
  auto plan = tiny_plan();
  plan.workers = 1;
  const auto a = run_matrix(plan, dir / "w1");
  plan.workers = 4;
  const auto b = run_matrix(plan, dir / "w4");
  CHECK(to_json(a) == to_json(b));

  // 2 levels x 4 approaches, each with n_trials trials.
  CHECK(a.cells.size() == 8u);
  for (const auto& c : a.cells) {
    CHECK(c.trials.size() == 2u);
    if (c.approach == Approach::BestOfThree) {
      REQUIRE(c.selected.has_value());
      CHECK(*c.selected != Approach::Baseline);
    }
  }
  CHECK(a.deltas.size() == 6u);

  // Splits are shared by all approaches within a cell.
  std::map<std::pair<DiversityLevel, int>, CombinationSet> combos;
  for (const auto& c : a.cells)
    for (const auto& t : c.trials) {
      const auto key = std::make_pair(c.level, t.trial);
      if (combos.count(key)) CHECK(combos[key] == t.combos);
      combos[key] = t.combos;
    }
  CHECK(std::filesystem::exists(dir / "w1" / "summary.json"));
}
