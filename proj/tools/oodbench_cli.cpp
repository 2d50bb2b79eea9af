// oodbench command-line front end. Talks to the library through the C API only.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "oodbench/oodbench.h"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// Carries a failed status out of a subcommand.
struct Failure {
  oodb_status status;
  std::string message;
  std::string pointer;
};

void check(oodb_status st) {
  if (st != OODB_OK) throw Failure{st, oodb_last_error(), oodb_last_error_pointer()};
}

struct StringDeleter {
  void operator()(char* s) const { oodb_string_free(s); }
};
using OwnedString = std::unique_ptr<char, StringDeleter>;

template <typename T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  ~Handle() { Free(p); }
  T** out() { return &p; }
  T* get() const { return p; }
};
using Config = Handle<oodb_config, oodb_config_free>;
using DatasetH = Handle<oodb_dataset, oodb_dataset_free>;
using SplitH = Handle<oodb_split, oodb_split_free>;
using ModelH = Handle<oodb_model, oodb_model_free>;

std::string nlohmann_quote(const std::string& s) { return nlohmann::json(s).dump(); }

std::string take(char* s) {
  OwnedString owned(s);
  return s ? std::string(s) : std::string();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Failure{OODB_ERR_IO, "cannot write " + path.string(), ""};
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> workers;
  std::string grid;
  std::string approach;
  std::optional<double> bn_momentum;
};

std::string approach_list_json(const std::string& approach) {
  if (approach == "baseline") return "[\"baseline\"]";
  return "[\"baseline\",\"" + approach + "\"]";
}

// Approach flags for a single training run.
std::vector<std::string> approach_overrides(const std::string& a) {
  const bool late = a == "late-stopping" || a == "three-together";
  const bool bn = a == "tuned-bn" || a == "three-together";
  const bool inv = a == "invariance" || a == "three-together";
  return {std::string("/train/late_stopping=") + (late ? "true" : "false"),
          std::string("/train/tuned_bn=") + (bn ? "true" : "false"),
          std::string("/train/invariance_loss=") + (inv ? "true" : "false"),
          std::string("/train/restart_rule=") + (a == "three-together" ? "true" : "false")};
}

// File, then --set assignments, then dedicated flags. `seed_pointer` says
// what --seed means for the subcommand.
void load_config(Config& cfg, const Common& c, const std::string& seed_pointer, bool approach_sets_flags) {
  if (c.config_path.empty()) check(oodb_config_default(cfg.out()));
  else check(oodb_config_load(c.config_path.c_str(), cfg.out()));
  std::vector<std::string> assignments = c.sets;
  if (c.seed && !seed_pointer.empty()) assignments.push_back(seed_pointer + "=" + std::to_string(*c.seed));
  if (c.workers) assignments.push_back("/experiment/workers=" + std::to_string(*c.workers));
  if (!c.grid.empty()) assignments.push_back("/experiment/grid=\"" + c.grid + "\"");
  if (c.bn_momentum) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "/train/bn_momentum=%.17g", *c.bn_momentum);
    assignments.push_back(buf);
  }
  if (!c.approach.empty()) {
    if (approach_sets_flags) {
      if (c.approach == "best-of-three")
        throw Failure{OODB_ERR_CONFIG, "best-of-three is a selection over runs, not a training configuration",
                      "/train"};
      for (auto& a : approach_overrides(c.approach)) assignments.push_back(a);
    } else {
      assignments.push_back("/experiment/approaches=" + approach_list_json(c.approach));
    }
  }
  for (const auto& a : assignments) check(oodb_config_override(cfg.get(), a.c_str()));
}

fs::path prepare_out(const Common& c, const Config& cfg, const char* fallback) {
  const fs::path out = c.out.empty() ? fs::path(fallback) : fs::path(c.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw Failure{OODB_ERR_IO, "cannot create " + out.string() + ": " + ec.message(), ""};
  char* text = nullptr;
  check(oodb_config_to_json(cfg.get(), &text));
  write_file(out / "effective_config.json", take(text));
  return out;
}

void add_common(CLI::App* app, Common& c, bool with_approach, bool with_grid, bool with_workers) {
  app->add_option("--config", c.config_path, "JSON config file (defaults apply to missing keys)");
  app->add_option("--set", c.sets, "Override, e.g. --set /train/epochs=5 (repeatable)");
  app->add_option("--seed", c.seed, "Seed for this subcommand");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--bn-momentum", c.bn_momentum, "BN momentum beta (sets /train/bn_momentum)")
      ->check(CLI::Range(0.0, 1.0));
  if (with_workers) app->add_option("--workers", c.workers, "Concurrent runs (OODBENCH_DETERMINISTIC=1 forces 1)");
  if (with_grid) app->add_option("--grid", c.grid, "Hyperparameter grid")->check(CLI::IsMember({"full", "fast"}));
  if (with_approach)
    app->add_option("--approach", c.approach, "Approach")
        ->check(CLI::IsMember(
            {"baseline", "late-stopping", "tuned-bn", "invariance", "three-together", "best-of-three"}));
}

std::string defaults_text() {
  char* text = nullptr;
  if (oodb_config_describe_defaults(&text) != OODB_OK) return {};
  return "\nConfig defaults (JSON pointer = value):\n" + take(text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"oodbench: out-of-distribution generalization benchmark harness"};
  app.footer(defaults_text() +
             "\nExit codes: 0 success, 1 runtime failure, 2 config error.\n"
             "OODBENCH_DETERMINISTIC=1 forces single-worker execution.");
  app.require_subcommand(1);
  app.set_version_flag("--version", oodb_version());

  Common c;
  std::string data_dir, split_dir, model_path, images, labels, summary_path;
  int classes_kept = 0;

  auto* gen = app.add_subcommand("gen-data", "Generate a grid-positions dataset");
  add_common(gen, c, false, false, false);

  auto* ingest = app.add_subcommand("ingest-idx", "Build a positions dataset from IDX images and labels");
  add_common(ingest, c, false, false, false);
  ingest->add_option("--images", images, "IDX image file (rank 3, unsigned byte)")->required();
  ingest->add_option("--labels", labels, "IDX label file (rank 1, unsigned byte)")->required();
  ingest->add_option("--classes", classes_kept, "Classes kept (default /data/num_categories)");

  auto* split = app.add_subcommand("split", "Sample a combination ladder and partition a dataset");
  add_common(split, c, false, false, false);
  split->add_option("--data", data_dir, "Dataset directory (default: generate from /data)");

  auto* train = app.add_subcommand("train", "Train one model");
  add_common(train, c, true, false, false);
  train->add_option("--split", split_dir, "Split directory (default: build from /data and /split)");

  auto* si = app.add_subcommand("analyze-si", "Selectivity and invariance of the probe layer");
  add_common(si, c, false, false, false);
  si->add_option("--model", model_path, "Checkpoint file")->required();
  si->add_option("--data", data_dir, "Dataset directory (default: generate from /data)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check over every layer kind");
  add_common(gc, c, false, false, false);

  auto* gs = app.add_subcommand("grid-search", "Reserved-trial hyperparameter search for one approach");
  add_common(gs, c, true, true, true);
  gs->get_option("--approach")->required();

  auto* rm = app.add_subcommand("run-matrix", "Run the dataset x diversity x approach matrix");
  add_common(rm, c, true, true, true);

  auto* rep = app.add_subcommand("report", "Emit report CSVs from a summary.json");
  add_common(rep, c, false, false, false);
  rep->add_option("--summary", summary_path, "summary.json of a run-matrix output")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    Config cfg;
    if (gen->parsed()) {
      load_config(cfg, c, "/data/seed", false);
      DatasetH ds;
      check(oodb_generate(cfg.get(), ds.out()));
      const auto out = prepare_out(c, cfg, "data");
      check(oodb_dataset_save(ds.get(), out.string().c_str()));
      char* info = nullptr;
      check(oodb_dataset_info(ds.get(), &info));
      std::cout << take(info) << '\n';
    } else if (ingest->parsed()) {
      load_config(cfg, c, "", false);
      DatasetH ds;
      check(oodb_ingest_idx(cfg.get(), images.c_str(), labels.c_str(), classes_kept, ds.out()));
      const auto out = prepare_out(c, cfg, "data");
      check(oodb_dataset_save(ds.get(), out.string().c_str()));
      char* info = nullptr;
      check(oodb_dataset_info(ds.get(), &info));
      std::cout << take(info) << '\n';
    } else if (split->parsed()) {
      if (!data_dir.empty()) c.sets.push_back("/data/source=" + nlohmann_quote(data_dir));
      load_config(cfg, c, "/split/seed", false);
      DatasetH ds;
      check(oodb_generate(cfg.get(), ds.out()));
      SplitH sp;
      check(oodb_split_create(cfg.get(), ds.get(), sp.out()));
      const auto out = prepare_out(c, cfg, "split");
      check(oodb_split_save(sp.get(), out.string().c_str()));
      char* info = nullptr;
      check(oodb_split_info(sp.get(), &info));
      std::cout << take(info) << '\n';
    } else if (train->parsed()) {
      load_config(cfg, c, "/train/seed", true);
      SplitH sp;
      if (!split_dir.empty()) {
        check(oodb_split_load(split_dir.c_str(), sp.out()));
      } else {
        DatasetH ds;
        check(oodb_generate(cfg.get(), ds.out()));
        check(oodb_split_create(cfg.get(), ds.get(), sp.out()));
      }
      const auto out = prepare_out(c, cfg, "train");
      ModelH model;
      char* summary = nullptr;
      const auto csv = (out / "epochs.csv").string();
      check(oodb_train(cfg.get(), sp.get(), csv.c_str(), model.out(), &summary));
      const std::string text = take(summary);
      write_file(out / "train_summary.json", text);
      check(oodb_model_save(model.get(), (out / "model.ckpt").string().c_str()));
      std::uint64_t fp = 0;
      check(oodb_model_fingerprint(model.get(), &fp));
      std::printf("checkpoint %s fingerprint %016llx\n", (out / "model.ckpt").string().c_str(),
                  static_cast<unsigned long long>(fp));
    } else if (si->parsed()) {
      if (!data_dir.empty()) c.sets.push_back("/data/source=" + nlohmann_quote(data_dir));
      load_config(cfg, c, "/data/seed", false);
      DatasetH ds;
      check(oodb_generate(cfg.get(), ds.out()));
      ModelH model;
      check(oodb_model_load(cfg.get(), ds.get(), model_path.c_str(), model.out()));
      char* report = nullptr;
      check(oodb_analyze_si(model.get(), ds.get(), &report));
      const auto out = prepare_out(c, cfg, "si");
      const std::string text = take(report);
      write_file(out / "si_report.json", text);
      std::cout << "wrote " << (out / "si_report.json").string() << '\n';
    } else if (gc->parsed()) {
      load_config(cfg, c, "", false);
      char* report = nullptr;
      int passed = 0;
      check(oodb_gradcheck(c.seed.value_or(1), &report, &passed));
      const std::string text = take(report);
      if (!c.out.empty()) write_file(prepare_out(c, cfg, "gradcheck") / "gradcheck.json", text);
      std::cout << text << '\n';
      if (!passed) {
        std::cerr << "gradcheck: relative error above tolerance\n";
        return kExitRuntime;
      }
    } else if (gs->parsed()) {
      load_config(cfg, c, "/experiment/master_seed", false);
      const auto out = prepare_out(c, cfg, "grid_search");
      char* result = nullptr;
      check(oodb_grid_search(cfg.get(), c.approach.c_str(), &result));
      const std::string text = take(result);
      write_file(out / "grid_search.json", text);
      std::cout << text << '\n';
    } else if (rm->parsed()) {
      load_config(cfg, c, "/experiment/master_seed", false);
      const auto out = prepare_out(c, cfg, "matrix");
      check(oodb_run_matrix(cfg.get(), out.string().c_str(), nullptr));
      std::cout << "wrote " << (out / "summary.json").string() << " and " << (out / "reports").string() << '\n';
    } else if (rep->parsed()) {
      load_config(cfg, c, "", false);
      const auto out = prepare_out(c, cfg, "reports");
      check(oodb_report(summary_path.c_str(), out.string().c_str()));
      std::cout << "wrote reports to " << out.string() << '\n';
    }
  } catch (const Failure& f) {
    std::cerr << "error (" << oodb_status_name(f.status) << "): " << f.message << '\n';
    if (f.status == OODB_ERR_CONFIG) {
      std::cerr << "pointer: " << f.pointer << '\n';
      return kExitConfig;
    }
    return kExitRuntime;
  }
  return kExitOk;
}
