#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <set>

#include "datagen.hpp"
#include "splits.hpp"
#include "test_util.hpp"

using namespace oodb;

namespace {

// Per-category and per-condition pair counts.
std::pair<std::vector<int>, std::vector<int>> degree_counts(const CombinationSet& s) {
  std::vector<int> rows(static_cast<std::size_t>(s.num_categories)), cols(static_cast<std::size_t>(s.num_conditions));
  for (const auto& [c, n] : s.pairs) {
    ++rows[static_cast<std::size_t>(c)];
    ++cols[static_cast<std::size_t>(n)];
  }
  return {rows, cols};
}

bool subset(const CombinationSet& a, const CombinationSet& b) {
  for (const auto& p : a.pairs)
    if (!b.pairs.count(p)) return false;
  return true;
}

Dataset small_grid(int k, int samples, std::uint64_t seed) {
  GridSpec g;
  g.num_categories = g.num_conditions = k;
  if (k == 5) g.cells = {0, 2, 4, 6, 8};
  g.glyph_size = 6;
  g.canvas_size = 18;
  g.samples_per_combination = samples;
  g.noise_std = 0.0;
  return generate_grid_positions(g, seed);
}

}  // namespace

TEST_CASE("9x9 ladder with degrees 2,4,8 gives 2/9, 4/9, 8/9") {
  const auto ladder = sample_combination_ladder(9, 9, {2, 4, 8}, 1);
  REQUIRE(ladder.levels.size() == 3u);
  CHECK(diversity(ladder.level(DiversityLevel::Low).combos) == Rational{2, 9});
  CHECK(diversity(ladder.level(DiversityLevel::Medium).combos) == Rational{4, 9});
  CHECK(diversity(ladder.level(DiversityLevel::High).combos) == Rational{8, 9});
}

TEST_CASE("5x5 ladder with degrees 2,3,4 gives 2/5, 3/5, 4/5") {
  const auto ladder = sample_combination_ladder(5, 5, {2, 3, 4}, 2);
  CHECK(diversity(ladder.levels[0].combos).str() == "2/5");
  CHECK(diversity(ladder.levels[1].combos).str() == "3/5");
  CHECK(diversity(ladder.levels[2].combos).str() == "4/5");
}

TEST_CASE("2x2 with degree 1 is a permutation matrix and its complement") {
  const std::set<Combination> identity{{0, 0}, {1, 1}}, swap{{0, 1}, {1, 0}};
  std::set<std::set<Combination>> seen;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto ladder = sample_combination_ladder(2, 2, {1}, seed);
    const auto& combos = ladder.levels[0].combos;
    CHECK((combos.pairs == identity || combos.pairs == swap));
    CHECK(combos.complement() == (combos.pairs == identity ? swap : identity));
    seen.insert(combos.pairs);
  }
  CHECK(seen.size() == 2u);  // both matrices are reachable
}

TEST_CASE("ladder properties over many seeds: regularity, coverage, nesting") {
  struct Grid {
    int n;
    std::vector<int> degrees;
  };
  for (const Grid& g : {Grid{9, {2, 4, 8}}, Grid{5, {2, 3, 4}}, Grid{6, {2, 3, 5}}}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto ladder = sample_combination_ladder(g.n, g.n, g.degrees, seed);
      for (std::size_t li = 0; li < ladder.levels.size(); ++li) {
        const auto& lv = ladder.levels[li];
        CHECK(lv.degree == g.degrees[li]);
        CHECK(lv.combos.covers_all());
        const auto [rows, cols] = degree_counts(lv.combos);
        for (int r : rows) REQUIRE(r == lv.degree);
        for (int c : cols) REQUIRE(c == lv.degree);
        if (li > 0) CHECK(subset(ladder.levels[li - 1].combos, lv.combos));
      }
    }
  }
}

TEST_CASE("ladder is deterministic per seed") {
  CHECK(sample_combination_ladder(9, 9, {2, 4, 8}, 5).levels[2].combos ==
        sample_combination_ladder(9, 9, {2, 4, 8}, 5).levels[2].combos);
}

TEST_CASE("ladder argument errors") {
  CHECK(kind_of([] { sample_combination_ladder(9, 9, {4, 2}, 1); }) == ErrorKind::InvalidArgument);
  CHECK(kind_of([] { sample_combination_ladder(9, 9, {2, 2}, 1); }) == ErrorKind::InvalidArgument);
  CHECK(kind_of([] { sample_combination_ladder(5, 5, {2, 6}, 1); }) == ErrorKind::InvalidArgument);
  CHECK(kind_of([] { sample_combination_ladder(5, 6, {2}, 1); }) == ErrorKind::InvalidArgument);
  CHECK(kind_of([] { sample_combination_ladder(5, 5, {}, 1); }) == ErrorKind::InvalidArgument);
}

TEST_CASE("diversity is an exact reduced rational") {
  CombinationSet s{{}, 9, 9};
  for (int i = 0; i < 9; ++i) {
    s.pairs.insert({i, i});
    s.pairs.insert({i, (i + 1) % 9});
  }
  CHECK(s.pairs.size() == 18u);
  CHECK(diversity(s) == Rational{2, 9});
  CombinationSet full{{}, 3, 3};
  for (int c = 0; c < 3; ++c)
    for (int n = 0; n < 3; ++n) full.pairs.insert({c, n});
  CHECK(diversity(full) == Rational{1, 1});
  CombinationSet six{{}, 6, 6};
  for (int i = 0; i < 6; ++i) {
    six.pairs.insert({i, i});
    six.pairs.insert({i, (i + 3) % 6});
  }
  CHECK(diversity(six).value() == doctest::Approx(2.0 / 6.0));
  CHECK(Rational::make(4, 12) == Rational{1, 3});
}

TEST_CASE("partition invariants") {
  const auto ds = small_grid(5, 20, 3);
  const auto ladder = sample_combination_ladder(5, 5, {2, 3, 4}, 7);
  std::size_t train_size = 0;
  for (const auto& lv : ladder.levels) {
    const auto split = partition(ds, lv.combos, {37, 13, 21}, 11);
    CHECK(split.train.size() == 37u);
    CHECK(split.val.size() == 13u);
    CHECK(split.ood.size() == 21u);
    if (train_size) CHECK(split.train.size() == train_size);
    train_size = split.train.size();

    // Brute-force label scan.
    for (const auto* part : {&split.train, &split.val})
      for (const auto& it : part->items) CHECK(lv.combos.contains(it.category, it.condition));
    for (const auto& it : split.ood.items) CHECK_FALSE(lv.combos.contains(it.category, it.condition));

    // Stratification: per-combination counts differ by at most one inside each split.
    for (const auto* part : {&split.train, &split.val}) {
      std::map<Combination, int> counts;
      for (const auto& p : lv.combos.pairs) counts[p] = 0;
      for (const auto& it : part->items) ++counts[{it.category, it.condition}];
      int lo = 1 << 30, hi = 0;
      for (const auto& [p, n] : counts) {
        lo = std::min(lo, n);
        hi = std::max(hi, n);
      }
      CHECK(hi - lo <= 1);
    }
  }
}

TEST_CASE("train and val are disjoint at the item level") {
  // Every generated image is distinct (noise off, jittered glyphs may repeat), so
  // disjointness is checked on the source indices through unique pixel payloads.
  GridSpec g;
  g.num_categories = g.num_conditions = 5;
  g.cells = {0, 2, 4, 6, 8};
  g.glyph_size = 6;
  g.canvas_size = 18;
  g.samples_per_combination = 10;
  g.noise_std = 0.2;
  const auto ds = generate_grid_positions(g, 1);
  const auto ladder = sample_combination_ladder(5, 5, {2, 3, 4}, 2);
  const auto split = partition(ds, ladder.levels[1].combos, {60, 60, 20}, 3);
  std::multiset<std::vector<float>> all;
  for (const auto& it : ds.items) all.insert(it.pixels);
  std::set<std::vector<float>> train;
  for (const auto& it : split.train.items) train.insert(it.pixels);
  for (const auto& it : split.val.items)
    if (all.count(it.pixels) == 1) CHECK_FALSE(train.count(it.pixels));
  // Union size: train + val = 120 of the 150 InD items, drawn without replacement.
  CHECK(split.train.size() + split.val.size() == 120u);
}

TEST_CASE("partition capacity errors") {
  const auto ds = small_grid(5, 4, 3);
  CombinationSet full{{}, 5, 5};
  for (int c = 0; c < 5; ++c)
    for (int n = 0; n < 5; ++n) full.pairs.insert({c, n});
  CHECK(kind_of([&] { partition(ds, full, {10, 5, 1}, 1); }) == ErrorKind::Capacity);
  const auto ladder = sample_combination_ladder(5, 5, {2}, 1);
  CHECK(kind_of([&] { partition(ds, ladder.levels[0].combos, {40, 1, 1}, 1); }) == ErrorKind::Capacity);
}

TEST_CASE("partition at paper scale proportions is exact") {
  // 54000/8000/8000 at one hundredth: 540/80/80 on a 9x9 grid with 2/9 diversity.
  GridSpec g;
  g.glyph_size = 4;
  g.canvas_size = 12;
  g.samples_per_combination = 35;
  g.noise_std = 0.0;
  const auto ds = generate_grid_positions(g, 1);
  const auto ladder = sample_combination_ladder(9, 9, {2, 4, 8}, 1);
  const auto split = partition(ds, ladder.levels[0].combos, {540, 80, 80}, 5);
  CHECK(split.train.size() == 540u);
  CHECK(split.val.size() == 80u);
  CHECK(split.ood.size() == 80u);
}

TEST_CASE("partition is deterministic and make_split records its level") {
  const auto ds = small_grid(5, 10, 3);
  const auto a = make_split(ds, {2, 3, 4}, DiversityLevel::Medium, {30, 10, 10}, 1, 2);
  const auto b = make_split(ds, {2, 3, 4}, DiversityLevel::Medium, {30, 10, 10}, 1, 2);
  CHECK(a.train == b.train);
  CHECK(a.ood == b.ood);
  CHECK(a.level == DiversityLevel::Medium);
  CHECK(a.degrees == std::vector<int>{2, 3, 4});
  CHECK(diversity(a.combos).str() == "3/5");
}

TEST_CASE("split directory round-trip") {
  TempDir dir;
  const auto ds = small_grid(5, 6, 3);
  const auto s = make_split(ds, {2, 3, 4}, DiversityLevel::Low, {20, 5, 5}, 4, 5);
  save_split(s, dir / "s");
  const auto back = load_split(dir / "s");
  CHECK(back.train == s.train);
  CHECK(back.val == s.val);
  CHECK(back.ood == s.ood);
  CHECK(back.combos == s.combos);
  CHECK(back.level == s.level);
  CHECK(back.degrees == s.degrees);
  CHECK(back.seed == s.seed);
}

TEST_CASE("level names") {
  for (auto l : {DiversityLevel::Low, DiversityLevel::Medium, DiversityLevel::High})
    CHECK(level_from_string(to_string(l)) == l);
  CHECK(kind_of([] { level_from_string("extreme"); }) == ErrorKind::InvalidArgument);
}
