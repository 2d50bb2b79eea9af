#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "datagen.hpp"

namespace oodb {

struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  // Reduced form.
  static Rational make(std::int64_t num, std::int64_t den);
  double value() const { return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
  friend bool operator==(const Rational&, const Rational&) = default;
};

using Combination = std::pair<int, int>;  // (category, condition)

struct CombinationSet {
  std::set<Combination> pairs;
  int num_categories = 0;
  int num_conditions = 0;

  bool contains(int category, int condition) const { return pairs.count({category, condition}) != 0; }
  bool covers_all() const;  // every category and every condition appears at least once
  // Pairs of the full grid that are not in this set.
  std::set<Combination> complement() const;
  friend bool operator==(const CombinationSet&, const CombinationSet&) = default;
};

Rational diversity(const CombinationSet& combos);

enum class DiversityLevel { Low, Medium, High };
const char* to_string(DiversityLevel level);
DiversityLevel level_from_string(const std::string& s);

struct LadderLevel {
  DiversityLevel label;
  CombinationSet combos;
  int degree = 0;
};

struct CombinationLadder {
  std::vector<LadderLevel> levels;

  const LadderLevel& level(DiversityLevel label) const;
};

// Low level: union of degrees[0] disjoint random permutation matrices; each
// further level adds disjoint permutation matrices up to its degree. Levels
// are labelled low, medium, high in order (fewer degrees use a prefix).
CombinationLadder sample_combination_ladder(int num_categories, int num_conditions,
                                            const std::vector<int>& degrees, std::uint64_t seed);

struct SplitBundle {
  Dataset train;
  Dataset val;
  Dataset ood;
  DiversityLevel level = DiversityLevel::Low;
  CombinationSet combos;
  std::vector<int> degrees;
  std::uint64_t seed = 0;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t ood = 0;
};

// Stratified sampling without replacement. Within each split the per-combination
// counts differ by at most one.
SplitBundle partition(const Dataset& dataset, const CombinationSet& combos, SplitSizes sizes,
                      std::uint64_t seed);

// Ladder over the dataset's grid, then partition of the chosen level; records
// the level, degrees and partition seed on the bundle.
SplitBundle make_split(const Dataset& dataset, const std::vector<int>& degrees, DiversityLevel level,
                       SplitSizes sizes, std::uint64_t ladder_seed, std::uint64_t partition_seed);

// <dir>/train, <dir>/val, <dir>/ood as dataset directories plus split.json.
void save_split(const SplitBundle& split, const std::filesystem::path& dir);
SplitBundle load_split(const std::filesystem::path& dir);

}  // namespace oodb
