#include "oodbench/oodbench.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <string>

#include <json.hpp>

#include "analysis.hpp"
#include "config.hpp"
#include "datagen.hpp"
#include "experiment.hpp"
#include "network.hpp"
#include "rng.hpp"
#include "splits.hpp"
#include "training.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

struct oodb_config {
  json doc;
  oodb::RunConfig parsed;
};

struct oodb_dataset {
  oodb::Dataset data;
};

struct oodb_split {
  oodb::SplitBundle split;
};

struct oodb_model {
  oodb::Model<float> model;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_pointer;

oodb_status status_of(oodb::ErrorKind kind) {
  using K = oodb::ErrorKind;
  switch (kind) {
    case K::InvalidArgument: return OODB_ERR_INVALID_ARGUMENT;
    case K::Format: return OODB_ERR_FORMAT;
    case K::Consistency: return OODB_ERR_CONSISTENCY;
    case K::Capacity: return OODB_ERR_CAPACITY;
    case K::Shape: return OODB_ERR_SHAPE;
    case K::Numeric: return OODB_ERR_NUMERIC;
    case K::State: return OODB_ERR_STATE;
    case K::Config: return OODB_ERR_CONFIG;
    case K::Io: return OODB_ERR_IO;
    case K::TrainingFailed: return OODB_ERR_TRAINING_FAILED;
    case K::Undefined: return OODB_ERR_UNDEFINED;
  }
  return OODB_ERR_INTERNAL;
}

oodb_status set_error(oodb_status status, std::string message, std::string pointer = {}) {
  g_error = std::move(message);
  g_pointer = std::move(pointer);
  return status;
}

template <typename F>
oodb_status guarded(F&& body) {
  g_error.clear();
  g_pointer.clear();
  try {
    body();
    return OODB_OK;
  } catch (const oodb::ConfigError& e) {
    return set_error(OODB_ERR_CONFIG, e.what(), e.pointer());
  } catch (const oodb::Error& e) {
    return set_error(status_of(e.kind()), e.what());
  } catch (const json::exception& e) {
    return set_error(OODB_ERR_FORMAT, e.what());
  } catch (const fs::filesystem_error& e) {
    return set_error(OODB_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return set_error(OODB_ERR_CAPACITY, "out of memory");
  } catch (const std::exception& e) {
    return set_error(OODB_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(OODB_ERR_INTERNAL, "unknown exception");
  }
}

char* dup_string(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void need(const void* p, const char* what) {
  if (!p) oodb::fail(oodb::ErrorKind::InvalidArgument, std::string(what) + " is null");
}

oodb::NetworkSpec network_for(const oodb::RunConfig& c, const oodb::Dataset& like) {
  return oodb::NetworkSpec::mini_resnet(oodb::input_shape_of(like), like.num_categories, c.train.bn_momentum,
                                        c.network.bn_epsilon, c.network.channels, c.network.hidden);
}

json dataset_json(const oodb::Dataset& d) {
  return {{"height", d.height},
          {"width", d.width},
          {"channels", d.channels},
          {"num_categories", d.num_categories},
          {"num_conditions", d.num_conditions},
          {"provenance", oodb::to_string(d.provenance)},
          {"size", d.size()}};
}

json records_json(const std::vector<oodb::EpochRecord>& records) {
  json rows = json::array();
  for (const auto& r : records)
    rows.push_back({{"epoch", r.epoch},
                    {"ind_val_accuracy", r.ind_val_accuracy},
                    {"ood_accuracy", r.ood_accuracy},
                    {"train_ce_loss", r.train_ce_loss},
                    {"train_inv_loss", r.train_inv_loss},
                    {"restarted", r.restarted}});
  return rows;
}

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

extern "C" {

const char* oodb_version(void) { return "1.0.0"; }

const char* oodb_status_name(oodb_status status) {
  switch (status) {
    case OODB_OK: return "ok";
    case OODB_ERR_INTERNAL: return "internal";
    default:
      if (status > OODB_OK && status < OODB_ERR_INTERNAL)
        return oodb::to_string(static_cast<oodb::ErrorKind>(static_cast<int>(status) - 1));
      return "unknown";
  }
}

const char* oodb_last_error(void) { return g_error.c_str(); }
const char* oodb_last_error_pointer(void) { return g_pointer.c_str(); }
void oodb_string_free(char* s) { std::free(s); }

// ---- configuration ----

oodb_status oodb_config_default(oodb_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = new oodb_config{json::object(), oodb::RunConfig{}};
  });
}

oodb_status oodb_config_load(const char* path, oodb_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    json doc = oodb::read_config_document(path);
    auto parsed = oodb::parse_config(doc);
    *out = new oodb_config{std::move(doc), std::move(parsed)};
  });
}

oodb_status oodb_config_parse(const char* json_text, oodb_config** out) {
  return guarded([&] {
    need(json_text, "json_text");
    need(out, "out");
    json doc;
    try {
      doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
      throw oodb::ConfigError("", std::string("invalid JSON: ") + e.what());
    }
    auto parsed = oodb::parse_config(doc);
    *out = new oodb_config{std::move(doc), std::move(parsed)};
  });
}

oodb_status oodb_config_override(oodb_config* cfg, const char* assignment) {
  return guarded([&] {
    need(cfg, "config");
    need(assignment, "assignment");
    json doc = cfg->doc;
    oodb::apply_override(doc, assignment);
    auto parsed = oodb::parse_config(doc);
    cfg->doc = std::move(doc);
    cfg->parsed = std::move(parsed);
  });
}

oodb_status oodb_config_to_json(const oodb_config* cfg, char** out) {
  return guarded([&] {
    need(cfg, "config");
    need(out, "out");
    *out = dup_string(oodb::to_json(cfg->parsed).dump(2));
  });
}

oodb_status oodb_config_describe_defaults(char** out) {
  return guarded([&] {
    need(out, "out");
    *out = dup_string(oodb::describe_defaults());
  });
}

void oodb_config_free(oodb_config* cfg) { delete cfg; }

// ---- datasets ----

oodb_status oodb_generate(const oodb_config* cfg, oodb_dataset** out) {
  return guarded([&] {
    need(cfg, "config");
    need(out, "out");
    const auto& c = cfg->parsed;
    *out = new oodb_dataset{c.data.source.empty() ? oodb::generate_grid_positions(c.data.grid, c.data_seed)
                                                  : oodb::load_dataset(c.data.source)};
  });
}

oodb_status oodb_ingest_idx(const oodb_config* cfg, const char* images_path, const char* labels_path,
                            int classes_kept, oodb_dataset** out) {
  return guarded([&] {
    need(cfg, "config");
    need(images_path, "images_path");
    need(labels_path, "labels_path");
    need(out, "out");
    const auto& g = cfg->parsed.data.grid;
    const auto records = oodb::load_idx(images_path, labels_path);
    const int kept = classes_kept > 0 ? classes_kept : g.num_categories;
    *out = new oodb_dataset{oodb::build_positions_dataset(records, g.rows, g.cols, g.glyph_size, g.canvas_size, kept)};
  });
}

oodb_status oodb_dataset_load(const char* dir, oodb_dataset** out) {
  return guarded([&] {
    need(dir, "dir");
    need(out, "out");
    *out = new oodb_dataset{oodb::load_dataset(dir)};
  });
}

oodb_status oodb_dataset_save(const oodb_dataset* ds, const char* dir) {
  return guarded([&] {
    need(ds, "dataset");
    need(dir, "dir");
    oodb::save_dataset(ds->data, dir);
  });
}

oodb_status oodb_dataset_info(const oodb_dataset* ds, char** json_out) {
  return guarded([&] {
    need(ds, "dataset");
    need(json_out, "json_out");
    *json_out = dup_string(dataset_json(ds->data).dump(2));
  });
}

void oodb_dataset_free(oodb_dataset* ds) { delete ds; }

// ---- splits ----

oodb_status oodb_split_create(const oodb_config* cfg, const oodb_dataset* ds, oodb_split** out) {
  return guarded([&] {
    need(cfg, "config");
    need(ds, "dataset");
    need(out, "out");
    const auto& c = cfg->parsed;
    *out = new oodb_split{
        oodb::make_split(ds->data, c.data.degrees, c.level, c.data.sizes, c.split_seed,
                         oodb::hash64({c.split_seed, 0x5b1e}))};
  });
}

oodb_status oodb_split_load(const char* dir, oodb_split** out) {
  return guarded([&] {
    need(dir, "dir");
    need(out, "out");
    *out = new oodb_split{oodb::load_split(dir)};
  });
}

oodb_status oodb_split_save(const oodb_split* split, const char* dir) {
  return guarded([&] {
    need(split, "split");
    need(dir, "dir");
    oodb::save_split(split->split, dir);
  });
}

oodb_status oodb_split_info(const oodb_split* split, char** json_out) {
  return guarded([&] {
    need(split, "split");
    need(json_out, "json_out");
    const auto& s = split->split;
    json combos = json::array();
    for (const auto& [cat, cond] : s.combos.pairs)
      combos.push_back(std::to_string(cat) + ":" + std::to_string(cond));
    const auto d = oodb::diversity(s.combos);
    *json_out = dup_string(json{{"level", oodb::to_string(s.level)},
                                {"degrees", s.degrees},
                                {"seed", s.seed},
                                {"diversity", d.str()},
                                {"combinations", combos},
                                {"train", s.train.size()},
                                {"val", s.val.size()},
                                {"ood", s.ood.size()}}
                               .dump(2));
  });
}

void oodb_split_free(oodb_split* split) { delete split; }

// ---- models ----

oodb_status oodb_train(const oodb_config* cfg, const oodb_split* split, const char* csv_path, oodb_model** out,
                       char** summary_out) {
  return guarded([&] {
    need(cfg, "config");
    need(split, "split");
    need(out, "out");
    const auto& c = cfg->parsed;
    oodb::TrainHooks hooks;
    if (csv_path) hooks.csv_path = csv_path;
    auto result = oodb::train(c.train, split->split, network_for(c, split->split.train), hooks);
    if (summary_out) {
      *summary_out = dup_string(json{{"restarts", result.restarts},
                                     {"final_learning_rate", result.final_learning_rate},
                                     {"pair_refresh_epochs", result.pair_refresh_epochs},
                                     {"checkpoint_fingerprint", hex64(result.model.store.fingerprint())},
                                     {"epochs", records_json(result.records)}}
                                    .dump(2));
    }
    *out = new oodb_model{std::move(result.model)};
  });
}

oodb_status oodb_model_save(const oodb_model* model, const char* path) {
  return guarded([&] {
    need(model, "model");
    need(path, "path");
    oodb::save_checkpoint(model->model.store, path);
  });
}

oodb_status oodb_model_load(const oodb_config* cfg, const oodb_dataset* like, const char* path, oodb_model** out) {
  return guarded([&] {
    need(cfg, "config");
    need(like, "dataset");
    need(path, "path");
    need(out, "out");
    auto model = oodb::make_model<float>(network_for(cfg->parsed, like->data), 0);
    oodb::load_checkpoint(model.store, path);
    *out = new oodb_model{std::move(model)};
  });
}

oodb_status oodb_model_fingerprint(const oodb_model* model, uint64_t* out) {
  return guarded([&] {
    need(model, "model");
    need(out, "out");
    *out = model->model.store.fingerprint();
  });
}

oodb_status oodb_evaluate(const oodb_model* model, const oodb_dataset* ds, double* accuracy) {
  return guarded([&] {
    need(model, "model");
    need(ds, "dataset");
    need(accuracy, "accuracy");
    *accuracy = oodb::evaluate(model->model, ds->data);
  });
}

void oodb_model_free(oodb_model* model) { delete model; }

// ---- analysis and experiments ----

oodb_status oodb_analyze_si(const oodb_model* model, const oodb_dataset* ds, char** json_out) {
  return guarded([&] {
    need(model, "model");
    need(ds, "dataset");
    need(json_out, "json_out");
    const auto table = oodb::activity_table(model->model, ds->data);
    const auto scores = oodb::neuron_scores(table);
    const auto summary = oodb::layer_si_summary(scores);
    *json_out = dup_string(oodb::si_report_json(table, scores, summary).dump(2));
  });
}

oodb_status oodb_gradcheck(uint64_t seed, char** json_out, int* passed) {
  return guarded([&] {
    need(json_out, "json_out");
    const auto suite = oodb::gradcheck_suite(seed);
    json cases = json::array();
    for (const auto& c : suite.cases) {
      const auto& r = c.report;
      cases.push_back({{"name", c.name},
                       {"passed", r.passed},
                       {"max_rel_error", r.max_rel_error},
                       {"worst_tensor", r.worst_tensor},
                       {"worst_analytic", r.worst_analytic},
                       {"worst_numeric", r.worst_numeric},
                       {"checked", r.checked},
                       {"skipped_kinks", r.skipped_kinks}});
    }
    *json_out = dup_string(json{{"seed", seed},
                                {"h", 1e-4},
                                {"tolerance", 1e-4},
                                {"passed", suite.passed},
                                {"max_rel_error", suite.max_rel_error},
                                {"cases", cases}}
                               .dump(2));
    if (passed) *passed = suite.passed ? 1 : 0;
  });
}

oodb_status oodb_grid_search(const oodb_config* cfg, const char* approach, char** json_out) {
  return guarded([&] {
    need(cfg, "config");
    need(approach, "approach");
    need(json_out, "json_out");
    const auto& c = cfg->parsed;
    const auto plan = oodb::to_plan(c);
    plan.grid.validate();
    const auto& entry = plan.datasets.front();
    const auto data = oodb::plan_datasets(plan, entry);
    const auto a = oodb::approach_from_string(approach);
    const auto r = oodb::reserved_grid_search(plan, entry, data.reserved, c.level, a,
                                              oodb::effective_workers(c.workers));
    *json_out = dup_string(
        oodb::grid_search_json(r, oodb::trial_seed(plan.master_seed, entry.id, c.level, oodb::kReservedTrial))
            .dump(2));
  });
}

oodb_status oodb_run_matrix(const oodb_config* cfg, const char* out_dir, char** summary_out) {
  return guarded([&] {
    need(cfg, "config");
    need(out_dir, "out_dir");
    const auto result = oodb::run_matrix(oodb::to_plan(cfg->parsed), out_dir);
    oodb::write_reports(result, fs::path(out_dir) / "reports");
    if (summary_out) *summary_out = dup_string(oodb::to_json(result).dump(2));
  });
}

oodb_status oodb_report(const char* summary_path, const char* out_dir) {
  return guarded([&] {
    need(summary_path, "summary_path");
    need(out_dir, "out_dir");
    std::ifstream in(summary_path);
    if (!in) oodb::fail(oodb::ErrorKind::Io, std::string("cannot read ") + summary_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      oodb::fail(oodb::ErrorKind::Format, std::string("summary is not JSON: ") + e.what());
    }
    oodb::write_reports(oodb::matrix_from_json(j), out_dir);
  });
}

}  // extern "C"
