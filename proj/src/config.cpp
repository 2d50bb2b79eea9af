#include "config.hpp"

#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace oodb {

using nlohmann::json;

namespace {

std::string escape_token(const std::string& key) {
  std::string out;
  for (char ch : key) {
    if (ch == '~') out += "~0";
    else if (ch == '/') out += "~1";
    else out += ch;
  }
  return out;
}

// Typed, strict view of one JSON object.
class Reader {
 public:
  Reader(const json& j, std::string pointer, std::set<std::string> allowed) : j_(j), ptr_(std::move(pointer)) {
    if (!j_.is_object()) throw ConfigError(ptr_.empty() ? "/" : ptr_, "expected an object");
    for (const auto& [key, _] : j_.items())
      if (!allowed.count(key)) throw ConfigError(at(key), "unknown key '" + key + "'");
  }

  std::string at(const std::string& key) const { return ptr_ + "/" + escape_token(key); }
  bool has(const std::string& key) const { return j_.contains(key); }
  const json& raw(const std::string& key) const { return j_.at(key); }

  void get(const std::string& key, int& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number_integer()) throw ConfigError(at(key), "expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < INT32_MIN || x > INT32_MAX) throw ConfigError(at(key), "integer out of range");
    out = static_cast<int>(x);
  }
  void get(const std::string& key, std::uint64_t& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (v.is_number_unsigned()) out = v.get<std::uint64_t>();
    else if (v.is_number_integer() && v.get<std::int64_t>() >= 0) out = static_cast<std::uint64_t>(v.get<std::int64_t>());
    else throw ConfigError(at(key), "expected a non-negative integer");
  }
  void get(const std::string& key, double& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_number()) throw ConfigError(at(key), "expected a number");
    out = v.get<double>();
  }
  void get(const std::string& key, bool& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_boolean()) throw ConfigError(at(key), "expected a boolean");
    out = v.get<bool>();
  }
  void get(const std::string& key, std::string& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_string()) throw ConfigError(at(key), "expected a string");
    out = v.get<std::string>();
  }
  template <typename T>
  void get(const std::string& key, std::vector<T>& out) const {
    if (!has(key)) return;
    const auto& v = j_.at(key);
    if (!v.is_array()) throw ConfigError(at(key), "expected an array");
    std::vector<T> items;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::string idx = std::to_string(i);
      const json element = {{idx, v[i]}};
      T item{};
      Reader(element, at(key), {idx}).get(idx, item);
      items.push_back(item);
    }
    out = std::move(items);
  }

  // Range checks with the key's pointer.
  void check(bool ok, const std::string& key, const std::string& message) const {
    if (!ok) throw ConfigError(at(key), message);
  }

 private:
  const json& j_;
  std::string ptr_;
};

template <typename T, typename Parse>
std::vector<T> parse_names(const Reader& r, const std::string& key, Parse parse, std::vector<T> fallback) {
  std::vector<std::string> names;
  r.get(key, names);
  if (!r.has(key)) return fallback;
  std::vector<T> out;
  for (std::size_t i = 0; i < names.size(); ++i) {
    try {
      out.push_back(parse(names[i]));
    } catch (const Error& e) {
      throw ConfigError(r.at(key) + "/" + std::to_string(i), e.what());
    }
  }
  return out;
}

void parse_data(const json& j, const std::string& ptr, DatasetEntry& entry, std::uint64_t& seed) {
  Reader r(j, ptr,
           {"id", "num_categories", "num_conditions", "rows", "cols", "cells", "glyph_size", "canvas_size",
            "samples_per_combination", "noise_std", "seed", "source"});
  auto& g = entry.grid;
  r.get("id", entry.id);
  r.get("num_categories", g.num_categories);
  r.get("num_conditions", g.num_conditions);
  r.get("rows", g.rows);
  r.get("cols", g.cols);
  r.get("cells", g.cells);
  r.get("glyph_size", g.glyph_size);
  r.get("canvas_size", g.canvas_size);
  r.get("samples_per_combination", g.samples_per_combination);
  r.get("noise_std", g.noise_std);
  r.get("seed", seed);
  std::string source = entry.source.string();
  r.get("source", source);
  entry.source = source;
  r.check(!entry.id.empty(), "id", "dataset id must be nonempty");
  r.check(g.noise_std >= 0.0, "noise_std", "must be >= 0");
  r.check(g.samples_per_combination >= 1, "samples_per_combination", "must be >= 1");
  try {
    g.validate();
  } catch (const Error& e) {
    throw ConfigError(ptr, e.what());
  }
}

void parse_split(const json& j, const std::string& ptr, DatasetEntry& entry, DiversityLevel* level,
                 std::uint64_t* seed) {
  std::set<std::string> keys = {"degrees", "train_size", "val_size", "ood_size"};
  if (level) keys.insert({"level", "seed"});
  Reader r(j, ptr, keys);
  r.get("degrees", entry.degrees);
  r.get("train_size", entry.sizes.train);
  r.get("val_size", entry.sizes.val);
  r.get("ood_size", entry.sizes.ood);
  r.check(!entry.degrees.empty() && entry.degrees.size() <= 3, "degrees", "expected 1 to 3 ladder degrees");
  for (std::size_t i = 1; i < entry.degrees.size(); ++i)
    r.check(entry.degrees[i] > entry.degrees[i - 1], "degrees", "degrees must be strictly increasing");
  r.check(entry.degrees.front() >= 1, "degrees", "degrees must be >= 1");
  r.check(entry.degrees.back() <= entry.grid.num_conditions, "degrees", "degree exceeds the number of conditions");
  r.check(entry.sizes.train >= 2, "train_size", "must be >= 2");
  if (level) {
    std::string name = to_string(*level);
    r.get("level", name);
    try {
      *level = level_from_string(name);
    } catch (const Error& e) {
      throw ConfigError(r.at("level"), e.what());
    }
    r.check(static_cast<std::size_t>(*level) < entry.degrees.size(), "level", "level has no ladder degree");
    r.get("seed", *seed);
  }
}

void parse_network(const json& j, RunConfig& c) {
  Reader r(j, "/network", {"architecture", "channels", "hidden", "bn_epsilon"});
  std::string arch = "mini_resnet";
  r.get("architecture", arch);
  r.check(arch == "mini_resnet", "architecture", "only 'mini_resnet' is available");
  r.get("channels", c.network.channels);
  r.get("hidden", c.network.hidden);
  r.get("bn_epsilon", c.network.bn_epsilon);
  r.check(c.network.channels >= 1, "channels", "must be >= 1");
  r.check(c.network.hidden >= 1, "hidden", "must be >= 1");
  r.check(c.network.bn_epsilon > 0.0, "bn_epsilon", "must be > 0");
}

void parse_train(const json& j, TrainConfig& t) {
  Reader r(j, "/train",
           {"learning_rate", "epochs", "late_stopping_epochs", "batch_size", "bn_momentum", "lambda",
            "pair_refresh_interval", "seed", "late_stopping", "tuned_bn", "invariance_loss", "restart_rule",
            "max_restarts"});
  r.get("learning_rate", t.learning_rate);
  r.get("epochs", t.epochs);
  r.get("late_stopping_epochs", t.late_stopping_epochs);
  r.get("batch_size", t.batch_size);
  r.get("bn_momentum", t.bn_momentum);
  r.get("lambda", t.lambda);
  r.get("pair_refresh_interval", t.pair_refresh_interval);
  r.get("seed", t.seed);
  r.get("late_stopping", t.flags.late_stopping);
  r.get("tuned_bn", t.flags.tuned_bn);
  r.get("invariance_loss", t.flags.invariance_loss);
  r.get("restart_rule", t.restart_rule_enabled);
  r.get("max_restarts", t.max_restarts);
  r.check(t.learning_rate > 0.0, "learning_rate", "must be > 0");
  r.check(t.epochs >= 1, "epochs", "must be >= 1");
  r.check(t.late_stopping_epochs >= 1, "late_stopping_epochs", "must be >= 1");
  r.check(t.batch_size >= 2, "batch_size", "must be >= 2");
  r.check(t.bn_momentum >= 0.0 && t.bn_momentum <= 1.0, "bn_momentum", "must lie in [0,1]");
  r.check(t.lambda >= 0.0, "lambda", "must be >= 0");
  r.check(t.pair_refresh_interval >= 1, "pair_refresh_interval", "must be >= 1");
  r.check(t.max_restarts >= 0, "max_restarts", "must be >= 0");
}

void parse_experiment(const json& j, RunConfig& c) {
  Reader r(j, "/experiment",
           {"approaches", "diversities", "n_trials", "master_seed", "grid", "learning_rates", "bn_momenta",
            "lambdas", "refresh_intervals", "workers", "datasets"});
  c.approaches = parse_names<Approach>(r, "approaches", approach_from_string, c.approaches);
  c.diversities = parse_names<DiversityLevel>(r, "diversities", level_from_string, c.diversities);
  r.get("n_trials", c.n_trials);
  r.get("master_seed", c.master_seed);
  r.get("grid", c.grid_name);
  if (c.grid_name == "full") c.grid = HyperGrid::full();
  else if (c.grid_name == "fast") c.grid = HyperGrid::fast();
  else throw ConfigError(r.at("grid"), "expected 'full' or 'fast'");
  r.get("learning_rates", c.grid.learning_rates);
  r.get("bn_momenta", c.grid.bn_momenta);
  r.get("lambdas", c.grid.lambdas);
  r.get("refresh_intervals", c.grid.refresh_intervals);
  r.get("workers", c.workers);
  r.check(c.n_trials >= 2, "n_trials", "must be >= 2");
  r.check(c.workers >= 1, "workers", "must be >= 1");
  r.check(!c.approaches.empty(), "approaches", "must be nonempty");
  r.check(!c.diversities.empty(), "diversities", "must be nonempty");
  try {
    c.grid.validate();
  } catch (const Error& e) {
    throw ConfigError(r.at("grid"), e.what());
  }
  if (r.has("datasets")) {
    const auto& arr = r.raw("datasets");
    if (!arr.is_array()) throw ConfigError(r.at("datasets"), "expected an array");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string ptr = r.at("datasets") + "/" + std::to_string(i);
      Reader e(arr[i], ptr, {"data", "split"});
      DatasetEntry entry;
      entry.id = "dataset" + std::to_string(i);
      std::uint64_t ignored = 0;
      if (e.has("data")) parse_data(e.raw("data"), e.at("data"), entry, ignored);
      if (e.has("split")) parse_split(e.raw("split"), e.at("split"), entry, nullptr, nullptr);
      c.extra_datasets.push_back(std::move(entry));
    }
  }
}

json grid_json(const GridSpec& g, const std::string& id, std::uint64_t seed, const std::filesystem::path& source,
               bool with_seed) {
  json j = {{"id", id},
            {"num_categories", g.num_categories},
            {"num_conditions", g.num_conditions},
            {"rows", g.rows},
            {"cols", g.cols},
            {"cells", g.cells},
            {"glyph_size", g.glyph_size},
            {"canvas_size", g.canvas_size},
            {"samples_per_combination", g.samples_per_combination},
            {"noise_std", g.noise_std},
            {"source", source.string()}};
  if (with_seed) j["seed"] = seed;
  return j;
}

json split_json(const DatasetEntry& e) {
  return {{"degrees", e.degrees},
          {"train_size", e.sizes.train},
          {"val_size", e.sizes.val},
          {"ood_size", e.sizes.ood}};
}

}  // namespace

RunConfig parse_config(const json& doc) {
  RunConfig c;
  Reader r(doc, "", {"config_version", "data", "split", "network", "train", "experiment"});
  int version = kConfigVersion;
  r.get("config_version", version);
  r.check(version == kConfigVersion, "config_version", "unsupported config_version");
  if (r.has("data")) parse_data(r.raw("data"), "/data", c.data, c.data_seed);
  if (r.has("split")) parse_split(r.raw("split"), "/split", c.data, &c.level, &c.split_seed);
  else parse_split(json::object(), "/split", c.data, &c.level, &c.split_seed);
  if (r.has("network")) parse_network(r.raw("network"), c);
  if (r.has("train")) parse_train(r.raw("train"), c.train);
  if (r.has("experiment")) parse_experiment(r.raw("experiment"), c);
  std::set<std::string> ids{c.data.id};
  for (std::size_t i = 0; i < c.extra_datasets.size(); ++i)
    if (!ids.insert(c.extra_datasets[i].id).second)
      throw ConfigError("/experiment/datasets/" + std::to_string(i) + "/data/id", "duplicate dataset id");
  return c;
}

json to_json(const RunConfig& c) {
  json split = split_json(c.data);
  split["level"] = to_string(c.level);
  split["seed"] = c.split_seed;
  const auto& t = c.train;
  json approaches = json::array(), diversities = json::array(), datasets = json::array();
  for (Approach a : c.approaches) approaches.push_back(to_string(a));
  for (DiversityLevel d : c.diversities) diversities.push_back(to_string(d));
  for (const auto& e : c.extra_datasets)
    datasets.push_back({{"data", grid_json(e.grid, e.id, 0, e.source, false)}, {"split", split_json(e)}});
  return {{"config_version", kConfigVersion},
          {"data", grid_json(c.data.grid, c.data.id, c.data_seed, c.data.source, true)},
          {"split", split},
          {"network",
           {{"architecture", "mini_resnet"},
            {"channels", c.network.channels},
            {"hidden", c.network.hidden},
            {"bn_epsilon", c.network.bn_epsilon}}},
          {"train",
           {{"learning_rate", t.learning_rate},
            {"epochs", t.epochs},
            {"late_stopping_epochs", t.late_stopping_epochs},
            {"batch_size", t.batch_size},
            {"bn_momentum", t.bn_momentum},
            {"lambda", t.lambda},
            {"pair_refresh_interval", t.pair_refresh_interval},
            {"seed", t.seed},
            {"late_stopping", t.flags.late_stopping},
            {"tuned_bn", t.flags.tuned_bn},
            {"invariance_loss", t.flags.invariance_loss},
            {"restart_rule", t.restart_rule_enabled},
            {"max_restarts", t.max_restarts}}},
          {"experiment",
           {{"approaches", approaches},
            {"diversities", diversities},
            {"n_trials", c.n_trials},
            {"master_seed", c.master_seed},
            {"grid", c.grid_name},
            {"learning_rates", c.grid.learning_rates},
            {"bn_momenta", c.grid.bn_momenta},
            {"lambdas", c.grid.lambdas},
            {"refresh_intervals", c.grid.refresh_intervals},
            {"workers", c.workers},
            {"datasets", datasets}}}};
}

json read_config_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("invalid JSON: ") + e.what());
  }
}

void apply_override(json& doc, const std::string& pointer, const json& value) {
  try {
    const json::json_pointer p(pointer);
    if (p.empty()) throw ConfigError(pointer, "cannot override the whole document");
    doc[p] = value;
  } catch (const json::exception& e) {
    throw ConfigError(pointer, std::string("bad override pointer: ") + e.what());
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(assignment, "override must look like /section/key=value");
  const std::string pointer = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  apply_override(doc, pointer, value);
}

ExperimentPlan to_plan(const RunConfig& c) {
  ExperimentPlan plan;
  plan.datasets.push_back(c.data);
  for (const auto& e : c.extra_datasets) plan.datasets.push_back(e);
  plan.diversities = c.diversities;
  plan.approaches = c.approaches;
  plan.grid = c.grid;
  plan.base = c.train;
  plan.network = c.network;
  plan.n_trials = c.n_trials;
  plan.master_seed = c.master_seed;
  plan.workers = c.workers;
  return plan;
}

std::string describe_defaults() {
  std::ostringstream os;
  std::function<void(const json&, const std::string&)> walk = [&](const json& j, const std::string& ptr) {
    if (j.is_object()) {
      for (const auto& [k, v] : j.items()) walk(v, ptr + "/" + escape_token(k));
    } else {
      os << "  " << ptr << " = " << j.dump() << '\n';
    }
  };
  walk(to_json(RunConfig{}), "");
  return os.str();
}

}  // namespace oodb
