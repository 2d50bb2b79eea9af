#include "experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "rng.hpp"

namespace oodb {

namespace fs = std::filesystem;

const char* to_string(Approach a) {
  switch (a) {
    case Approach::Baseline: return "baseline";
    case Approach::LateStopping: return "late_stopping";
    case Approach::TunedBn: return "tuned_bn";
    case Approach::InvarianceLoss: return "invariance_loss";
    case Approach::ThreeTogether: return "three_together";
    case Approach::BestOfThree: return "best_of_three";
  }
  return "unknown";
}

Approach approach_from_string(const std::string& s) {
  std::string k = s;
  std::replace(k.begin(), k.end(), '-', '_');
  if (k == "baseline") return Approach::Baseline;
  if (k == "late_stopping") return Approach::LateStopping;
  if (k == "tuned_bn") return Approach::TunedBn;
  if (k == "invariance_loss" || k == "invariance") return Approach::InvarianceLoss;
  if (k == "three_together") return Approach::ThreeTogether;
  if (k == "best_of_three") return Approach::BestOfThree;
  fail(ErrorKind::InvalidArgument, "unknown approach '" + s + "'");
}

HyperGrid HyperGrid::full() {
  return {{0.1, 0.01, 0.001, 0.0001, 0.00001}, {0.01, 0.1, 0.5, 0.9, 0.99}, {1.0, 0.1, 0.01, 0.001, 0.0001},
          {10, 20, 50, 100}};
}

HyperGrid HyperGrid::fast() { return {{0.001}, {0.1, 0.5, 0.99}, {1.0, 0.1, 0.01}, {10}}; }

void HyperGrid::validate() const {
  require(!learning_rates.empty() && !bn_momenta.empty() && !lambdas.empty() && !refresh_intervals.empty(),
          ErrorKind::InvalidArgument, "hyperparameter grids must be nonempty");
  for (double lr : learning_rates) require(lr > 0.0, ErrorKind::InvalidArgument, "learning rates must be > 0");
  for (double b : bn_momenta) require(b >= 0.0 && b <= 1.0, ErrorKind::InvalidArgument, "momenta must lie in [0,1]");
  for (double l : lambdas) require(l >= 0.0, ErrorKind::InvalidArgument, "lambdas must be >= 0");
  for (int t : refresh_intervals) require(t >= 1, ErrorKind::InvalidArgument, "refresh intervals must be >= 1");
}

nlohmann::json to_json(const HyperParams& hp) {
  return {{"learning_rate", hp.learning_rate},
          {"bn_momentum", hp.bn_momentum},
          {"lambda", hp.lambda},
          {"refresh_interval", hp.refresh_interval}};
}

static HyperParams params_from_json(const nlohmann::json& j) {
  HyperParams hp;
  hp.learning_rate = j.at("learning_rate").get<double>();
  hp.bn_momentum = j.at("bn_momentum").get<double>();
  hp.lambda = j.at("lambda").get<double>();
  hp.refresh_interval = j.at("refresh_interval").get<int>();
  return hp;
}

std::vector<HyperParams> grid_points(const HyperGrid& grid, Approach approach, const HyperParams& fixed) {
  grid.validate();
  std::vector<HyperParams> out;
  switch (approach) {
    case Approach::Baseline:
    case Approach::LateStopping:
      for (double lr : grid.learning_rates) {
        HyperParams hp = fixed;
        hp.learning_rate = lr;
        hp.lambda = 0.0;
        out.push_back(hp);
      }
      break;
    case Approach::TunedBn:
      for (double lr : grid.learning_rates)
        for (double b : grid.bn_momenta) {
          HyperParams hp = fixed;
          hp.learning_rate = lr;
          hp.bn_momentum = b;
          hp.lambda = 0.0;
          out.push_back(hp);
        }
      break;
    case Approach::InvarianceLoss:
      for (double lr : grid.learning_rates)
        for (double l : grid.lambdas)
          for (int t : grid.refresh_intervals) {
            HyperParams hp = fixed;
            hp.learning_rate = lr;
            hp.lambda = l;
            hp.refresh_interval = t;
            out.push_back(hp);
          }
      break;
    case Approach::ThreeTogether:
    case Approach::BestOfThree:
      fail(ErrorKind::InvalidArgument,
           std::string(to_string(approach)) + " reuses the single-approach searches and has no grid");
  }
  return out;
}

TrainConfig make_train_config(const TrainConfig& base, Approach approach, const HyperParams& hp,
                              std::uint64_t seed) {
  TrainConfig c = base;
  c.seed = seed;
  c.learning_rate = hp.learning_rate;
  c.flags = {};
  c.lambda = 0.0;
  c.restart_rule_enabled = false;
  switch (approach) {
    case Approach::Baseline: break;
    case Approach::LateStopping: c.flags.late_stopping = true; break;
    case Approach::TunedBn:
      c.flags.tuned_bn = true;
      c.bn_momentum = hp.bn_momentum;
      break;
    case Approach::InvarianceLoss:
      c.flags.invariance_loss = true;
      c.lambda = hp.lambda;
      c.pair_refresh_interval = hp.refresh_interval;
      break;
    case Approach::ThreeTogether:
      c.flags = {true, true, true};
      c.bn_momentum = hp.bn_momentum;
      c.lambda = hp.lambda;
      c.pair_refresh_interval = hp.refresh_interval;
      c.restart_rule_enabled = true;
      break;
    case Approach::BestOfThree:
      fail(ErrorKind::InvalidArgument, "best_of_three selects among single-approach configurations");
  }
  c.validate();
  return c;
}

void ExperimentPlan::validate() const {
  require(!datasets.empty(), ErrorKind::Config, "experiment needs at least one dataset");
  require(!diversities.empty(), ErrorKind::Config, "experiment needs at least one diversity level");
  require(!approaches.empty(), ErrorKind::Config, "experiment needs at least one approach");
  require(n_trials >= 2, ErrorKind::Config, "n_trials must be >= 2 for confidence intervals");
  require(workers >= 1, ErrorKind::Config, "workers must be >= 1");
  const bool has_baseline = std::count(approaches.begin(), approaches.end(), Approach::Baseline) > 0;
  require(has_baseline, ErrorKind::Config, "approach deltas need the baseline in the plan");
  std::set<std::string> ids;
  for (const auto& d : datasets) {
    require(ids.insert(d.id).second, ErrorKind::Config, "duplicate dataset id '" + d.id + "'");
    require(d.degrees.size() >= diversities.size(), ErrorKind::Config,
            "dataset '" + d.id + "' has fewer ladder degrees than requested diversities");
  }
  grid.validate();
  base.validate();
}

int effective_workers(int requested) {
  const char* det = std::getenv("OODBENCH_DETERMINISTIC");
  if (det && std::string(det) == "1") return 1;
  return std::max(1, requested);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  if (threads == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---- seeds ------------------------------------------------------------------------

static std::uint64_t id_hash(const std::string& id) { return fnv1a64(id.data(), id.size()); }

std::uint64_t trial_seed(std::uint64_t master_seed, const std::string& dataset_id, DiversityLevel level,
                         int trial) {
  return hash64({master_seed, id_hash(dataset_id), static_cast<std::uint64_t>(level) + 1,
                 static_cast<std::uint64_t>(trial)});
}

std::uint64_t ladder_seed(std::uint64_t master_seed, const std::string& dataset_id, int trial) {
  return hash64({master_seed, id_hash(dataset_id), 0x1add, static_cast<std::uint64_t>(trial)});
}

std::uint64_t data_seed(std::uint64_t master_seed, const std::string& dataset_id, bool reserved) {
  return hash64({master_seed, id_hash(dataset_id), 0xda7a, reserved ? 1u : 0u});
}

static std::uint64_t partition_seed(std::uint64_t trial) { return hash64({trial, 0x5b1e}); }
static std::uint64_t init_seed(std::uint64_t trial) { return hash64({trial, 0x1417}); }

// ---- single runs ------------------------------------------------------------------

static void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

static void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << text;
}

static std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

RunOutcome execute_run(const TrainConfig& config, const TrialContext& ctx, const fs::path& dir) {
  RunOutcome outcome;
  TrainHooks hooks;
  if (!dir.empty()) {
    fs::create_directories(dir);
    hooks.csv_path = dir / "epochs.csv";
  }
  try {
    auto result = train(config, ctx.split, ctx.spec, hooks);
    outcome.ind_val_accuracy = result.records.back().ind_val_accuracy;
    outcome.ood_accuracy = result.records.back().ood_accuracy;
    outcome.restarts = result.restarts;
    outcome.checkpoint_fingerprint = result.model.store.fingerprint();
    if (ctx.full) {
      const auto table = activity_table(result.model, *ctx.full);
      const auto scores = neuron_scores(table);
      const auto summary = layer_si_summary(scores);
      outcome.si_summary = summary.summary;
      if (!dir.empty()) write_json(dir / "si_report.json", si_report_json(table, scores, summary));
    }
    if (!dir.empty()) save_checkpoint(result.model.store, dir / "model.ckpt");
  } catch (const TrainingFailure& e) {
    outcome.failed = true;
    outcome.error = e.what();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::Numeric) throw;
    outcome.failed = true;
    outcome.error = e.what();
  }
  return outcome;
}

static nlohmann::json outcome_json(const RunOutcome& o) {
  return {{"failed", o.failed},
          {"error", o.error},
          {"ind_val_accuracy", o.ind_val_accuracy},
          {"ood_accuracy", o.ood_accuracy},
          {"si_summary", o.si_summary},
          {"restarts", o.restarts},
          {"checkpoint_fingerprint", hex64(o.checkpoint_fingerprint)}};
}

static RunOutcome outcome_from_json(const nlohmann::json& j) {
  RunOutcome o;
  o.failed = j.at("failed").get<bool>();
  o.error = j.at("error").get<std::string>();
  o.ind_val_accuracy = j.at("ind_val_accuracy").get<double>();
  o.ood_accuracy = j.at("ood_accuracy").get<double>();
  o.si_summary = j.at("si_summary").get<double>();
  o.restarts = j.at("restarts").get<int>();
  o.checkpoint_fingerprint = std::stoull(j.at("checkpoint_fingerprint").get<std::string>(), nullptr, 16);
  return o;
}

// ---- grid search ------------------------------------------------------------------

GridSearchResult grid_search(const std::vector<HyperParams>& points, Approach approach, const TrainConfig& base,
                             std::uint64_t seed, const RunFn& run, int workers) {
  require(!points.empty(), ErrorKind::InvalidArgument, "grid search needs at least one point");
  GridSearchResult result;
  result.approach = approach;
  result.table.resize(points.size());
  parallel_for(points.size(), workers, [&](std::size_t i) {
    result.table[i].params = points[i];
    result.table[i].outcome = run(make_train_config(base, approach, points[i], seed));
  });
  result.runs = static_cast<int>(points.size());
  int best = -1;
  for (std::size_t i = 0; i < result.table.size(); ++i) {
    const auto& o = result.table[i].outcome;
    if (o.failed) continue;
    if (best < 0 || o.ood_accuracy > result.table[static_cast<std::size_t>(best)].outcome.ood_accuracy)
      best = static_cast<int>(i);
  }
  if (best < 0)
    throw SearchFailure("every grid point of " + std::string(to_string(approach)) + " failed", result.table);
  result.chosen = result.table[static_cast<std::size_t>(best)].params;
  result.best_ood_accuracy = result.table[static_cast<std::size_t>(best)].outcome.ood_accuracy;
  return result;
}

nlohmann::json grid_search_json(const GridSearchResult& r, std::uint64_t seed) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& p : r.table) rows.push_back({{"params", to_json(p.params)}, {"outcome", outcome_json(p.outcome)}});
  return {{"approach", to_string(r.approach)},
          {"reserved_seed", seed},
          {"runs", r.runs},
          {"chosen", to_json(r.chosen)},
          {"best_ood_accuracy", r.best_ood_accuracy},
          {"table", rows}};
}

// ---- trials -----------------------------------------------------------------------

Aggregate aggregate_trials(const std::vector<TrialResult>& trials) {
  std::vector<double> ind, ood, si;
  for (const auto& t : trials) {
    if (t.outcome.failed) continue;
    ind.push_back(t.outcome.ind_val_accuracy);
    ood.push_back(t.outcome.ood_accuracy);
    si.push_back(t.outcome.si_summary);
  }
  require(ood.size() >= 2, ErrorKind::TrainingFailed,
          "aggregate needs >= 2 successful trials, got " + std::to_string(ood.size()));
  Aggregate a;
  a.ind_val_accuracy = mean_ci95(ind);
  a.ood_accuracy = mean_ci95(ood);
  a.si_summary = mean_ci95(si);
  a.successes = static_cast<int>(ood.size());
  return a;
}

static nlohmann::json combos_json(const CombinationSet& c) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& [cat, cond] : c.pairs) pairs.push_back({cat, cond});
  return {{"num_categories", c.num_categories}, {"num_conditions", c.num_conditions}, {"pairs", pairs}};
}

static CombinationSet combos_from_json(const nlohmann::json& j) {
  CombinationSet c;
  c.num_categories = j.at("num_categories").get<int>();
  c.num_conditions = j.at("num_conditions").get<int>();
  for (const auto& p : j.at("pairs")) c.pairs.insert({p.at(0).get<int>(), p.at(1).get<int>()});
  return c;
}

static nlohmann::json trial_json(const TrialResult& t) {
  return {{"trial", t.trial}, {"seed", t.seed}, {"combos", combos_json(t.combos)}, {"outcome", outcome_json(t.outcome)}};
}

// ---- matrix -----------------------------------------------------------------------

Approach pick_best_of_three(const std::map<Approach, double>& reserved_ood) {
  static constexpr Approach kOrder[] = {Approach::LateStopping, Approach::TunedBn, Approach::InvarianceLoss};
  std::optional<Approach> best;
  double best_acc = 0.0;
  for (Approach a : kOrder) {
    const auto it = reserved_ood.find(a);
    require(it != reserved_ood.end(), ErrorKind::InvalidArgument,
            std::string("best_of_three needs a result for ") + to_string(a));
    if (!best || it->second > best_acc) {
      best = a;
      best_acc = it->second;
    }
  }
  return *best;
}

HyperParams three_together_params(const HyperParams& tuned_bn, const HyperParams& invariance) {
  HyperParams hp = invariance;
  hp.bn_momentum = tuned_bn.bn_momentum;
  return hp;
}

std::vector<DeltaRecord> delta_records(const std::vector<CellResult>& cells) {
  std::map<std::pair<std::string, DiversityLevel>, const CellResult*> baselines;
  for (const auto& c : cells)
    if (c.approach == Approach::Baseline) baselines[{c.dataset, c.level}] = &c;
  std::vector<DeltaRecord> out;
  for (const auto& c : cells) {
    if (c.approach == Approach::Baseline) continue;
    const auto it = baselines.find({c.dataset, c.level});
    require(it != baselines.end(), ErrorKind::Config,
            "no baseline cell for " + c.dataset + "/" + to_string(c.level));
    DeltaRecord d;
    d.dataset = c.dataset;
    d.level = c.level;
    d.approach = c.approach;
    const auto& b = it->second->aggregate;
    d.acc_delta = c.aggregate.ood_accuracy.mean - b.ood_accuracy.mean;
    d.si_delta = c.aggregate.si_summary.mean - b.si_summary.mean;
    d.acc_up = improved(c.aggregate.ood_accuracy.mean, b.ood_accuracy.mean);
    d.si_up = improved(c.aggregate.si_summary.mean, b.si_summary.mean);
    out.push_back(d);
  }
  return out;
}

namespace {

NetworkSpec network_for(const Dataset& ds, const ExperimentPlan& plan) {
  return NetworkSpec::mini_resnet(input_shape_of(ds), ds.num_categories, plan.base.bn_momentum,
                                  plan.network.bn_epsilon, plan.network.channels, plan.network.hidden);
}

// Approaches whose own grid search a cell needs.
std::vector<Approach> searches_needed(const std::vector<Approach>& approaches) {
  std::set<Approach> need;
  for (Approach a : approaches) {
    switch (a) {
      case Approach::ThreeTogether: need.insert({Approach::TunedBn, Approach::InvarianceLoss}); break;
      case Approach::BestOfThree:
        need.insert({Approach::LateStopping, Approach::TunedBn, Approach::InvarianceLoss});
        break;
      default: need.insert(a);
    }
  }
  return {need.begin(), need.end()};
}

}  // namespace

PlanData plan_datasets(const ExperimentPlan& plan, const DatasetEntry& entry) {
  PlanData d;
  if (!entry.source.empty()) {
    d.measured = load_dataset(entry.source);
    d.reserved = d.measured;
  } else {
    d.measured = generate_grid_positions(entry.grid, data_seed(plan.master_seed, entry.id, false));
    d.reserved = generate_grid_positions(entry.grid, data_seed(plan.master_seed, entry.id, true));
  }
  return d;
}

std::vector<std::uint64_t> measurement_seeds(const ExperimentPlan& plan, const std::string& dataset_id,
                                             DiversityLevel level) {
  std::vector<std::uint64_t> seeds;
  std::set<std::uint64_t> seen{trial_seed(plan.master_seed, dataset_id, level, kReservedTrial)};
  for (int t = 0; t < plan.n_trials; ++t) {
    seeds.push_back(trial_seed(plan.master_seed, dataset_id, level, t));
    require(seen.insert(seeds.back()).second, ErrorKind::Consistency,
            "trial seed collision in " + dataset_id + "/" + to_string(level));
  }
  return seeds;
}

TrialContext trial_context(const ExperimentPlan& plan, const DatasetEntry& entry, const Dataset& data,
                           DiversityLevel level, int trial) {
  TrialContext ctx;
  ctx.full = &data;
  ctx.split = make_split(data, entry.degrees, level, entry.sizes, ladder_seed(plan.master_seed, entry.id, trial),
                         partition_seed(trial_seed(plan.master_seed, entry.id, level, trial)));
  ctx.spec = network_for(data, plan);
  return ctx;
}

GridSearchResult reserved_grid_search(const ExperimentPlan& plan, const DatasetEntry& entry, const Dataset& reserved,
                                      DiversityLevel level, Approach approach, int workers) {
  auto ctx = trial_context(plan, entry, reserved, level, kReservedTrial);
  ctx.full = nullptr;  // the search ranks by OoD accuracy only
  const RunFn run = [&](const TrainConfig& c) { return execute_run(c, ctx, {}); };
  const HyperParams fixed{1e-3, plan.base.bn_momentum, 0.0, plan.base.pair_refresh_interval};
  return grid_search(grid_points(plan.grid, approach, fixed), approach, plan.base,
                     init_seed(trial_seed(plan.master_seed, entry.id, level, kReservedTrial)), run, workers);
}

std::vector<TrialResult> run_trials(const ExperimentPlan& plan, const DatasetEntry& entry, const Dataset& measured,
                                    DiversityLevel level, Approach approach, const HyperParams& hp,
                                    const fs::path& dir, int workers) {
  const auto seeds = measurement_seeds(plan, entry.id, level);
  std::vector<TrialResult> trials(seeds.size());
  parallel_for(trials.size(), workers, [&](std::size_t t) {
    const auto ctx = trial_context(plan, entry, measured, level, static_cast<int>(t));
    auto& tr = trials[t];
    tr.trial = static_cast<int>(t);
    tr.seed = seeds[t];
    tr.combos = ctx.split.combos;
    const fs::path tdir = dir.empty() ? fs::path() : dir / ("trial" + std::to_string(t));
    tr.outcome = execute_run(make_train_config(plan.base, approach, hp, init_seed(tr.seed)), ctx, tdir);
    if (!tdir.empty()) write_json(tdir / "trial.json", trial_json(tr));
  });
  return trials;
}

MatrixResult run_matrix(const ExperimentPlan& plan, const fs::path& out) {
  plan.validate();
  const int workers = effective_workers(plan.workers);
  MatrixResult result;
  result.master_seed = plan.master_seed;
  result.n_trials = plan.n_trials;

  for (const auto& entry : plan.datasets) {
    const PlanData data = plan_datasets(plan, entry);
    for (DiversityLevel level : plan.diversities) {
      const fs::path cell_dir = out / "results" / entry.id / to_string(level);
      std::map<Approach, GridSearchResult> searches;
      for (Approach a : searches_needed(plan.approaches)) {
        auto r = reserved_grid_search(plan, entry, data.reserved, level, a, workers);
        fs::create_directories(cell_dir / to_string(a));
        write_json(cell_dir / to_string(a) / "grid_search.json",
                   grid_search_json(r, trial_seed(plan.master_seed, entry.id, level, kReservedTrial)));
        searches.emplace(a, std::move(r));
      }

      std::map<Approach, std::vector<TrialResult>> trial_cache;
      for (Approach a : plan.approaches) {
        CellResult cr;
        cr.dataset = entry.id;
        cr.level = level;
        cr.approach = a;
        const fs::path adir = cell_dir / to_string(a);
        if (a == Approach::BestOfThree) {
          std::map<Approach, double> reserved_ood;
          for (Approach s : {Approach::LateStopping, Approach::TunedBn, Approach::InvarianceLoss})
            reserved_ood[s] = searches.at(s).best_ood_accuracy;
          const Approach winner = pick_best_of_three(reserved_ood);
          cr.selected = winner;
          cr.params = searches.at(winner).chosen;
          if (!trial_cache.count(winner))
            trial_cache[winner] = run_trials(plan, entry, data.measured, level, winner, cr.params, adir, workers);
          cr.trials = trial_cache.at(winner);
          fs::create_directories(adir);
          write_json(adir / "selection.json", {{"selected", to_string(winner)}, {"params", to_json(cr.params)}});
        } else {
          cr.params = a == Approach::ThreeTogether
                          ? three_together_params(searches.at(Approach::TunedBn).chosen,
                                                  searches.at(Approach::InvarianceLoss).chosen)
                          : searches.at(a).chosen;
          cr.trials = run_trials(plan, entry, data.measured, level, a, cr.params, adir, workers);
          trial_cache.emplace(a, cr.trials);
        }
        cr.aggregate = aggregate_trials(cr.trials);
        result.cells.push_back(std::move(cr));
      }
    }
  }
  result.deltas = delta_records(result.cells);
  fs::create_directories(out);
  write_json(out / "summary.json", to_json(result));
  return result;
}

// ---- serialization ------------------------------------------------------------------

static nlohmann::json ci_json(const MeanCi& m) { return {{"mean", m.mean}, {"ci95", m.half_width}}; }
static MeanCi ci_from_json(const nlohmann::json& j) { return {j.at("mean").get<double>(), j.at("ci95").get<double>()}; }

nlohmann::json to_json(const MatrixResult& result) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : result.cells) {
    nlohmann::json trials = nlohmann::json::array();
    for (const auto& t : c.trials) trials.push_back(trial_json(t));
    nlohmann::json cell = {{"dataset", c.dataset},
                           {"diversity", to_string(c.level)},
                           {"approach", to_string(c.approach)},
                           {"params", to_json(c.params)},
                           {"aggregate",
                            {{"ind_val_accuracy", ci_json(c.aggregate.ind_val_accuracy)},
                             {"ood_accuracy", ci_json(c.aggregate.ood_accuracy)},
                             {"si_summary", ci_json(c.aggregate.si_summary)},
                             {"successes", c.aggregate.successes}}},
                           {"trials", trials}};
    if (c.selected) cell["selected"] = to_string(*c.selected);
    cells.push_back(cell);
  }
  nlohmann::json deltas = nlohmann::json::array();
  for (const auto& d : result.deltas)
    deltas.push_back({{"dataset", d.dataset},
                      {"diversity", to_string(d.level)},
                      {"approach", to_string(d.approach)},
                      {"acc_delta", d.acc_delta},
                      {"si_delta", d.si_delta},
                      {"acc_sign", d.acc_up ? "+" : "-"},
                      {"si_sign", d.si_up ? "+" : "-"}});
  return {{"master_seed", result.master_seed},
          {"n_trials", result.n_trials},
          {"activity_source", "full measurement dataset"},
          {"split_seeds", "shared by all approaches within a (dataset, diversity) cell"},
          {"cells", cells},
          {"deltas", deltas}};
}

MatrixResult matrix_from_json(const nlohmann::json& j) {
  try {
    MatrixResult r;
    r.master_seed = j.at("master_seed").get<std::uint64_t>();
    r.n_trials = j.at("n_trials").get<int>();
    for (const auto& cj : j.at("cells")) {
      CellResult c;
      c.dataset = cj.at("dataset").get<std::string>();
      c.level = level_from_string(cj.at("diversity").get<std::string>());
      c.approach = approach_from_string(cj.at("approach").get<std::string>());
      c.params = params_from_json(cj.at("params"));
      if (cj.contains("selected")) c.selected = approach_from_string(cj.at("selected").get<std::string>());
      const auto& a = cj.at("aggregate");
      c.aggregate.ind_val_accuracy = ci_from_json(a.at("ind_val_accuracy"));
      c.aggregate.ood_accuracy = ci_from_json(a.at("ood_accuracy"));
      c.aggregate.si_summary = ci_from_json(a.at("si_summary"));
      c.aggregate.successes = a.at("successes").get<int>();
      for (const auto& tj : cj.at("trials")) {
        TrialResult t;
        t.trial = tj.at("trial").get<int>();
        t.seed = tj.at("seed").get<std::uint64_t>();
        t.combos = combos_from_json(tj.at("combos"));
        t.outcome = outcome_from_json(tj.at("outcome"));
        c.trials.push_back(std::move(t));
      }
      r.cells.push_back(std::move(c));
    }
    r.deltas = delta_records(r.cells);
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, std::string("malformed summary: ") + e.what());
  }
}

// ---- reports ------------------------------------------------------------------------

static std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string fig4_csv(const MatrixResult& result) {
  std::map<std::pair<std::string, DiversityLevel>, double> baseline;
  for (const auto& c : result.cells)
    if (c.approach == Approach::Baseline) baseline[{c.dataset, c.level}] = c.aggregate.ood_accuracy.mean;
  std::ostringstream os;
  os << "dataset,diversity,approach,trials,ind_val_mean,ind_val_ci95,ood_mean,ood_ci95,si_mean,si_ci95,"
        "ood_gain_vs_baseline\n";
  for (const auto& c : result.cells) {
    const auto& a = c.aggregate;
    const auto it = baseline.find({c.dataset, c.level});
    os << c.dataset << ',' << to_string(c.level) << ',' << to_string(c.approach) << ',' << a.successes << ','
       << fmt(a.ind_val_accuracy.mean) << ',' << fmt(a.ind_val_accuracy.half_width) << ','
       << fmt(a.ood_accuracy.mean) << ',' << fmt(a.ood_accuracy.half_width) << ',' << fmt(a.si_summary.mean)
       << ',' << fmt(a.si_summary.half_width) << ','
       << (it == baseline.end() ? std::string() : fmt(a.ood_accuracy.mean - it->second)) << '\n';
  }
  return os.str();
}

std::string fig5_csv(const MatrixResult& result) {
  std::ostringstream os;
  os << "dataset,diversity,approach,si_summary,ood_accuracy\n";
  for (const auto& c : result.cells)
    os << c.dataset << ',' << to_string(c.level) << ',' << to_string(c.approach) << ','
       << fmt(c.aggregate.si_summary.mean) << ',' << fmt(c.aggregate.ood_accuracy.mean) << '\n';
  return os.str();
}

double fig5_pearson(const MatrixResult& result) {
  std::vector<double> si, acc;
  for (const auto& c : result.cells) {
    si.push_back(c.aggregate.si_summary.mean);
    acc.push_back(c.aggregate.ood_accuracy.mean);
  }
  return pearson(si, acc);
}

std::string table1_csv(const MatrixResult& result) {
  std::vector<std::string> datasets;
  std::map<std::pair<std::string, Approach>, std::map<std::string, double>> ood;
  for (const auto& c : result.cells) {
    if (std::find(datasets.begin(), datasets.end(), c.dataset) == datasets.end()) datasets.push_back(c.dataset);
    ood[{c.dataset, c.approach}][to_string(c.level)] = c.aggregate.ood_accuracy.mean;
  }
  static constexpr std::pair<Approach, Approach> kRows[] = {
      {Approach::BestOfThree, Approach::Baseline},
      {Approach::ThreeTogether, Approach::Baseline},
      {Approach::BestOfThree, Approach::ThreeTogether}};
  std::ostringstream os;
  os << "comparison";
  for (const auto& d : datasets) os << ',' << d;
  os << ",total,ties\n";
  for (const auto& [a, b] : kRows) {
    bool present = true;
    for (const auto& d : datasets) present = present && ood.count({d, a}) && ood.count({d, b});
    if (!present) continue;
    os << to_string(a) << " vs " << to_string(b);
    WinCounts total;
    for (const auto& d : datasets) {
      const auto w = pairwise_win_counts(ood.at({d, a}), ood.at({d, b}));
      os << ',' << w.wins_a << " vs " << w.wins_b;
      total.wins_a += w.wins_a;
      total.wins_b += w.wins_b;
      total.ties += w.ties;
    }
    os << ',' << total.wins_a << " vs " << total.wins_b << ',' << total.ties << '\n';
  }
  return os.str();
}

std::string table2_csv(const MatrixResult& result) {
  std::vector<Approach> order;
  std::map<Approach, std::vector<DeltaOutcome>> by_approach;
  for (const auto& d : result.deltas) {
    if (!by_approach.count(d.approach)) order.push_back(d.approach);
    by_approach[d.approach].push_back({d.acc_up, d.si_up});
  }
  std::vector<std::pair<std::string, FrequencyTable>> rows;
  std::vector<DeltaOutcome> pooled;  // the three single approaches, as in the published total
  for (Approach a : order) {
    const auto& outcomes = by_approach.at(a);
    rows.emplace_back(to_string(a), delta_frequency_table(outcomes));
    if (a == Approach::LateStopping || a == Approach::TunedBn || a == Approach::InvarianceLoss)
      pooled.insert(pooled.end(), outcomes.begin(), outcomes.end());
  }
  if (!pooled.empty()) rows.emplace_back("total", delta_frequency_table(pooled));
  return frequency_table_csv(rows);
}

void write_reports(const MatrixResult& result, const fs::path& dir) {
  fs::create_directories(dir);
  write_text(dir / "fig4.csv", fig4_csv(result));
  write_text(dir / "fig5.csv", fig5_csv(result));
  std::string r = "undefined";
  std::string reason;
  try {
    r = fmt(fig5_pearson(result));
  } catch (const Error& e) {
    for (char ch : std::string(e.what())) reason += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    reason = '"' + reason + '"';
  }
  write_text(dir / "fig5_pearson.csv", "points,pearson_r,note\n" + std::to_string(result.cells.size()) + "," + r +
                                           "," + reason + "\n");
  write_text(dir / "table1.csv", table1_csv(result));
  write_text(dir / "table2.csv", result.deltas.empty() ? std::string("approach\n") : table2_csv(result));
}

}  // namespace oodb
