#include "splits.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"

namespace oodb {

namespace fs = std::filesystem;

Rational Rational::make(std::int64_t num, std::int64_t den) {
  require(den != 0, ErrorKind::InvalidArgument, "zero denominator");
  const std::int64_t g = std::gcd(num, den);
  if (g > 1) {
    num /= g;
    den /= g;
  }
  return {num, den};
}

bool CombinationSet::covers_all() const {
  std::vector<bool> cat(num_categories, false), cond(num_conditions, false);
  for (auto [c, n] : pairs) {
    cat[c] = true;
    cond[n] = true;
  }
  return std::all_of(cat.begin(), cat.end(), [](bool b) { return b; }) &&
         std::all_of(cond.begin(), cond.end(), [](bool b) { return b; });
}

std::set<Combination> CombinationSet::complement() const {
  std::set<Combination> out;
  for (int c = 0; c < num_categories; ++c)
    for (int n = 0; n < num_conditions; ++n)
      if (!contains(c, n)) out.insert({c, n});
  return out;
}

Rational diversity(const CombinationSet& combos) {
  return Rational::make(static_cast<std::int64_t>(combos.pairs.size()),
                        static_cast<std::int64_t>(combos.num_categories) * combos.num_conditions);
}

const char* to_string(DiversityLevel level) {
  switch (level) {
    case DiversityLevel::Low: return "low";
    case DiversityLevel::Medium: return "medium";
    case DiversityLevel::High: return "high";
  }
  return "?";
}

DiversityLevel level_from_string(const std::string& s) {
  if (s == "low") return DiversityLevel::Low;
  if (s == "medium") return DiversityLevel::Medium;
  if (s == "high") return DiversityLevel::High;
  fail(ErrorKind::InvalidArgument, "unknown diversity level '" + s + "'");
}

const LadderLevel& CombinationLadder::level(DiversityLevel label) const {
  for (const auto& l : levels)
    if (l.label == label) return l;
  fail(ErrorKind::InvalidArgument, std::string("ladder has no ") + to_string(label) + " level");
}

namespace {

// Random perfect matching in the bipartite graph rows x cols restricted to
// `allowed`. Kuhn's augmenting paths with shuffled visiting order; a perfect
// matching always exists because the remaining graph is regular.
std::vector<int> random_perfect_matching(const std::vector<std::vector<bool>>& allowed, Rng& rng) {
  const int n = static_cast<int>(allowed.size());
  std::vector<std::vector<int>> adj(n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c)
      if (allowed[r][c]) adj[r].push_back(c);
    rng.shuffle(adj[r]);
  }
  std::vector<int> row_order(n);
  std::iota(row_order.begin(), row_order.end(), 0);
  rng.shuffle(row_order);

  std::vector<int> match_col(n, -1);  // col -> row
  std::vector<char> visited;
  auto augment = [&](auto&& self, int r) -> bool {
    for (int c : adj[r]) {
      if (visited[c]) continue;
      visited[c] = 1;
      if (match_col[c] < 0 || self(self, match_col[c])) {
        match_col[c] = r;
        return true;
      }
    }
    return false;
  };
  for (int r : row_order) {
    visited.assign(n, 0);
    if (!augment(augment, r)) fail(ErrorKind::Consistency, "no perfect matching in regular graph");
  }
  std::vector<int> row_to_col(n, -1);
  for (int c = 0; c < n; ++c) row_to_col[match_col[c]] = c;
  return row_to_col;
}

}  // namespace

CombinationLadder sample_combination_ladder(int num_categories, int num_conditions,
                                            const std::vector<int>& degrees, std::uint64_t seed) {
  require(num_categories == num_conditions, ErrorKind::InvalidArgument,
          "combination ladders need a square category x condition grid (" +
              std::to_string(num_categories) + "x" + std::to_string(num_conditions) + ")");
  require(num_categories >= 1, ErrorKind::InvalidArgument, "empty grid");
  require(!degrees.empty() && degrees.size() <= 3, ErrorKind::InvalidArgument,
          "between one and three degrees are required");
  for (std::size_t i = 0; i < degrees.size(); ++i) {
    require(degrees[i] >= 1, ErrorKind::InvalidArgument, "degrees must be >= 1");
    if (i > 0)
      require(degrees[i] > degrees[i - 1], ErrorKind::InvalidArgument,
              "degrees must be strictly increasing");
  }
  require(degrees.back() <= num_conditions, ErrorKind::InvalidArgument,
          "highest degree " + std::to_string(degrees.back()) + " exceeds #N=" +
              std::to_string(num_conditions));

  const int n = num_categories;
  Rng rng(seed);
  std::vector<std::vector<bool>> free(n, std::vector<bool>(n, true));
  CombinationSet current{{}, n, n};
  CombinationLadder ladder;
  static constexpr DiversityLevel kLabels[] = {DiversityLevel::Low, DiversityLevel::Medium,
                                               DiversityLevel::High};
  int degree = 0;
  for (std::size_t li = 0; li < degrees.size(); ++li) {
    while (degree < degrees[li]) {
      const auto perm = random_perfect_matching(free, rng);
      for (int c = 0; c < n; ++c) {
        free[c][perm[c]] = false;
        current.pairs.insert({c, perm[c]});
      }
      ++degree;
    }
    ladder.levels.push_back({kLabels[li], current, degree});
  }
  return ladder;
}

SplitBundle partition(const Dataset& dataset, const CombinationSet& combos, SplitSizes sizes,
                      std::uint64_t seed) {
  require(combos.num_categories == dataset.num_categories &&
              combos.num_conditions == dataset.num_conditions,
          ErrorKind::InvalidArgument, "combination set does not match dataset label space");
  const auto outside = combos.complement();
  require(!outside.empty(), ErrorKind::Capacity,
          "OoD stratum is empty: the combination set covers all of C x N");
  require(!combos.pairs.empty(), ErrorKind::Capacity, "InD combination set is empty");

  Rng rng(seed);
  std::map<Combination, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    strata[{dataset.items[i].category, dataset.items[i].condition}].push_back(i);
  for (auto& [key, idx] : strata) rng.shuffle(idx);
  std::map<Combination, std::size_t> taken;

  auto stratum_name = [](Combination k) {
    return "(c=" + std::to_string(k.first) + ",n=" + std::to_string(k.second) + ")";
  };

  // Draws `total` items spread over `keys` with per-key counts differing by <= 1.
  auto draw = [&](const std::set<Combination>& keys, std::size_t total, const char* split_name) {
    std::vector<Combination> order(keys.begin(), keys.end());
    rng.shuffle(order);
    const std::size_t base = total / order.size(), extra = total % order.size();
    std::vector<std::size_t> picked;
    for (std::size_t k = 0; k < order.size(); ++k) {
      const std::size_t want = base + (k < extra ? 1 : 0);
      auto& pool = strata[order[k]];
      auto& used = taken[order[k]];
      require(used + want <= pool.size(), ErrorKind::Capacity,
              std::string(split_name) + " needs " + std::to_string(want) + " items from stratum " +
                  stratum_name(order[k]) + " but only " + std::to_string(pool.size() - used) +
                  " remain");
      picked.insert(picked.end(), pool.begin() + static_cast<std::ptrdiff_t>(used),
                    pool.begin() + static_cast<std::ptrdiff_t>(used + want));
      used += want;
    }
    std::sort(picked.begin(), picked.end());
    Dataset out = dataset.empty_like();
    out.items.reserve(picked.size());
    for (auto i : picked) out.items.push_back(dataset.items[i]);
    return out;
  };

  SplitBundle bundle;
  bundle.combos = combos;
  bundle.seed = seed;
  bundle.train = draw(combos.pairs, sizes.train, "train");
  bundle.val = draw(combos.pairs, sizes.val, "val");
  bundle.ood = draw(outside, sizes.ood, "ood");
  return bundle;
}

void save_split(const SplitBundle& split, const fs::path& dir) {
  fs::create_directories(dir);
  save_dataset(split.train, dir / "train");
  save_dataset(split.val, dir / "val");
  save_dataset(split.ood, dir / "ood");
  nlohmann::json pairs = nlohmann::json::array();
  for (auto [c, n] : split.combos.pairs) pairs.push_back({c, n});
  const auto div = diversity(split.combos);
  nlohmann::json j = {{"seed", split.seed},
                      {"level", to_string(split.level)},
                      {"degrees", split.degrees},
                      {"num_categories", split.combos.num_categories},
                      {"num_conditions", split.combos.num_conditions},
                      {"diversity", div.str()},
                      {"diversity_value", div.value()},
                      {"combination_construction", "union of disjoint permutation matrices"},
                      {"pairs", pairs},
                      {"sizes", {{"train", split.train.size()},
                                 {"val", split.val.size()},
                                 {"ood", split.ood.size()}}}};
  std::ofstream out(dir / "split.json");
  if (!out) fail(ErrorKind::Io, "cannot write " + (dir / "split.json").string());
  out << j.dump(2) << "\n";
}

SplitBundle load_split(const fs::path& dir) {
  std::ifstream in(dir / "split.json");
  if (!in) fail(ErrorKind::Io, "cannot open " + (dir / "split.json").string());
  SplitBundle s;
  try {
    const auto j = nlohmann::json::parse(in);
    s.seed = j.at("seed").get<std::uint64_t>();
    s.level = level_from_string(j.at("level").get<std::string>());
    s.degrees = j.at("degrees").get<std::vector<int>>();
    s.combos.num_categories = j.at("num_categories").get<int>();
    s.combos.num_conditions = j.at("num_conditions").get<int>();
    for (const auto& p : j.at("pairs")) s.combos.pairs.insert({p.at(0).get<int>(), p.at(1).get<int>()});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Format, (dir / "split.json").string() + ": " + e.what());
  }
  s.train = load_dataset(dir / "train");
  s.val = load_dataset(dir / "val");
  s.ood = load_dataset(dir / "ood");
  return s;
}

SplitBundle make_split(const Dataset& dataset, const std::vector<int>& degrees, DiversityLevel level,
                       SplitSizes sizes, std::uint64_t ladder_seed, std::uint64_t partition_seed) {
  const auto ladder = sample_combination_ladder(dataset.num_categories, dataset.num_conditions, degrees, ladder_seed);
  auto split = partition(dataset, ladder.level(level).combos, sizes, partition_seed);
  split.level = level;
  split.degrees = degrees;
  return split;
}

}  // namespace oodb
