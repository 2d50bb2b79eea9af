#include "analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "error.hpp"
#include "training.hpp"

namespace oodb {

ActivityTable activity_table_from_means(int neurons, int num_categories, int num_conditions,
                                        const std::vector<double>& raw_means,
                                        std::vector<std::size_t> counts) {
  const std::size_t cells = static_cast<std::size_t>(num_categories) * num_conditions;
  require(raw_means.size() == static_cast<std::size_t>(neurons) * cells, ErrorKind::Shape,
          "activity means do not match neurons x C x N");
  ActivityTable t;
  t.neurons = neurons;
  t.num_categories = num_categories;
  t.num_conditions = num_conditions;
  t.values.assign(raw_means.size(), 0.0);
  t.raw_range.resize(neurons);
  t.degenerate.assign(neurons, false);
  t.counts = std::move(counts);
  for (int j = 0; j < neurons; ++j) {
    const auto begin = raw_means.begin() + static_cast<std::ptrdiff_t>(j * cells);
    const auto [lo_it, hi_it] = std::minmax_element(begin, begin + static_cast<std::ptrdiff_t>(cells));
    const double lo = *lo_it, hi = *hi_it;
    t.raw_range[j] = {lo, hi};
    const double span = hi - lo;
    if (!(span > 1e-12 * std::max(1.0, std::abs(hi)))) {
      t.degenerate[j] = true;
      continue;
    }
    for (std::size_t k = 0; k < cells; ++k) t.values[j * cells + k] = (raw_means[j * cells + k] - lo) / span;
  }
  return t;
}

ActivityAccumulator::ActivityAccumulator(int neurons, int num_categories, int num_conditions)
    : neurons_(neurons),
      categories_(num_categories),
      conditions_(num_conditions),
      sums_(static_cast<std::size_t>(neurons) * num_categories * num_conditions, 0.0),
      counts_(static_cast<std::size_t>(num_categories) * num_conditions, 0) {}

void ActivityAccumulator::add(int category, int condition, std::span<const float> activations) {
  require(static_cast<int>(activations.size()) == neurons_, ErrorKind::Shape, "activation width mismatch");
  require(category >= 0 && category < categories_ && condition >= 0 && condition < conditions_,
          ErrorKind::InvalidArgument, "label outside the activity table");
  const std::size_t cell = static_cast<std::size_t>(category) * conditions_ + condition;
  const std::size_t cells = counts_.size();
  for (int j = 0; j < neurons_; ++j) sums_[j * cells + cell] += activations[j];
  ++counts_[cell];
}

void ActivityAccumulator::merge(const ActivityAccumulator& other) {
  require(other.sums_.size() == sums_.size(), ErrorKind::Shape, "accumulator shape mismatch");
  for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += other.sums_[i];
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ActivityTable ActivityAccumulator::table() const {
  std::string missing;
  for (int c = 0; c < categories_; ++c)
    for (int n = 0; n < conditions_; ++n)
      if (counts_[static_cast<std::size_t>(c) * conditions_ + n] == 0)
        missing += " (c=" + std::to_string(c) + ",n=" + std::to_string(n) + ")";
  require(missing.empty(), ErrorKind::Consistency, "activity table has empty cells:" + missing);
  const std::size_t cells = counts_.size();
  std::vector<double> means(sums_.size());
  for (int j = 0; j < neurons_; ++j)
    for (std::size_t k = 0; k < cells; ++k)
      means[j * cells + k] = sums_[j * cells + k] / static_cast<double>(counts_[k]);
  return activity_table_from_means(neurons_, categories_, conditions_, means, counts_);
}

ActivityTable activity_table(const Model<float>& model, const Dataset& dataset) {
  const auto acts = probe_activations(model, dataset);
  const int width = acts.rank() == 2 ? acts.dim(1) : 0;
  ActivityAccumulator acc(width, dataset.num_categories, dataset.num_conditions);
  for (std::size_t i = 0; i < dataset.size(); ++i)
    acc.add(dataset.items[i].category, dataset.items[i].condition,
            std::span<const float>(acts.ptr() + i * width, static_cast<std::size_t>(width)));
  return acc.table();
}

std::vector<NeuronScore> neuron_scores(const ActivityTable& table) {
  const int nc = table.num_categories, nn = table.num_conditions;
  std::vector<NeuronScore> out(table.neurons);
  for (int j = 0; j < table.neurons; ++j) {
    auto& s = out[j];
    if (table.degenerate[j]) {
      s.degenerate = true;
      s.selectivity = 0.0;
      s.invariance = 1.0;
      s.si = 0.0;
      continue;
    }
    std::vector<double> row_sum(nc, 0.0);
    double total = 0.0;
    for (int c = 0; c < nc; ++c) {
      for (int n = 0; n < nn; ++n) row_sum[c] += table.at(j, c, n);
      total += row_sum[c];
    }
    int best = 0;
    for (int c = 1; c < nc; ++c)
      if (row_sum[c] > row_sum[best]) best = c;
    s.preferred_category = best;
    const double preferred = row_sum[best] / nn;
    const double others = nc > 1 ? (total - row_sum[best]) / (static_cast<double>(nc - 1) * nn) : 0.0;
    s.selectivity = preferred + others < 1e-12 ? 0.0 : (preferred - others) / (preferred + others);
    double lo = table.at(j, best, 0), hi = lo;
    for (int n = 1; n < nn; ++n) {
      lo = std::min(lo, table.at(j, best, n));
      hi = std::max(hi, table.at(j, best, n));
    }
    s.invariance = 1.0 - (hi - lo);
    s.si = std::sqrt(std::max(0.0, s.selectivity * s.invariance));
  }
  return out;
}

SiSummary layer_si_summary(std::vector<double> si, double top_fraction) {
  require(!si.empty(), ErrorKind::InvalidArgument, "SI summary needs at least one neuron");
  require(top_fraction > 0.0 && top_fraction <= 1.0, ErrorKind::InvalidArgument,
          "top_fraction must lie in (0,1]");
  std::sort(si.begin(), si.end(), std::greater<>());
  // The small slack keeps e.g. 0.2 * 15 from rounding up to 4.
  auto k = static_cast<std::size_t>(std::ceil(top_fraction * static_cast<double>(si.size()) - 1e-9));
  k = std::clamp<std::size_t>(k, 1, si.size());
  SiSummary s;
  s.top_count = k;
  s.summary = std::accumulate(si.begin(), si.begin() + static_cast<std::ptrdiff_t>(k), 0.0) / static_cast<double>(k);
  s.p80_value = si[k - 1];
  return s;
}

SiSummary layer_si_summary(const std::vector<NeuronScore>& scores, double top_fraction) {
  std::vector<double> si;
  si.reserve(scores.size());
  for (const auto& s : scores) si.push_back(s.si);
  return layer_si_summary(std::move(si), top_fraction);
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  require(xs.size() == ys.size(), ErrorKind::InvalidArgument, "pearson needs equal-length inputs");
  require(xs.size() >= 2, ErrorKind::InvalidArgument, "pearson needs at least two points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0.0 && syy > 0.0, ErrorKind::Undefined, "correlation undefined for zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double t_quantile_975(int df) {
  static constexpr double kTable[] = {
      12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228,
      2.201,  2.179, 2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086,
      2.080,  2.074, 2.069, 2.064, 2.060, 2.056, 2.052, 2.048, 2.045, 2.042};
  require(df >= 1, ErrorKind::InvalidArgument, "degrees of freedom must be >= 1");
  if (df <= 30) return kTable[df - 1];
  // Cornish-Fisher expansion around the normal quantile.
  const double z = 1.959963984540054;
  const double z3 = z * z * z, z5 = z3 * z * z;
  const double v = df;
  return z + (z3 + z) / (4 * v) + (5 * z5 + 16 * z3 + 3 * z) / (96 * v * v);
}

MeanCi mean_ci95(std::span<const double> values) {
  require(values.size() >= 2, ErrorKind::InvalidArgument, "confidence interval needs n >= 2");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1));
  return {mean, t_quantile_975(static_cast<int>(values.size()) - 1) * sd / std::sqrt(n)};
}

FrequencyTable delta_frequency_table(const std::vector<DeltaOutcome>& outcomes) {
  require(!outcomes.empty(), ErrorKind::InvalidArgument, "frequency table needs at least one outcome");
  FrequencyTable t;
  const auto total = static_cast<std::int64_t>(outcomes.size());
  std::int64_t acc_up = 0, si_up = 0, acc_up_si_up = 0, acc_up_si_down = 0;
  for (const auto& o : outcomes) {
    acc_up += o.acc_up;
    si_up += o.si_up;
    if (o.si_up) acc_up_si_up += o.acc_up;
    else acc_up_si_down += o.acc_up;
  }
  t.p_acc_up = {acc_up, total};
  t.p_si_up = {si_up, total};
  t.p_acc_up_given_si_up = {acc_up_si_up, si_up};
  t.p_acc_up_given_si_down = {acc_up_si_down, total - si_up};
  return t;
}

std::string format_fraction(const Fraction& f) {
  if (!f.defined()) return "undefined (" + f.str() + ")";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f (%s)", f.percent(), f.str().c_str());
  return buf;
}

std::string frequency_table_csv(const std::vector<std::pair<std::string, FrequencyTable>>& rows) {
  std::ostringstream os;
  os << "approach,p_acc_up,p_si_up,p_acc_up_given_si_up,p_acc_up_given_si_down\n";
  for (const auto& [name, t] : rows) {
    os << name << ',' << format_fraction(t.p_acc_up) << ',' << format_fraction(t.p_si_up) << ','
       << format_fraction(t.p_acc_up_given_si_up) << ',' << format_fraction(t.p_acc_up_given_si_down)
       << '\n';
  }
  return os.str();
}

WinCounts pairwise_win_counts(const std::map<std::string, double>& a, const std::map<std::string, double>& b) {
  require(a.size() == b.size(), ErrorKind::InvalidArgument, "result cells do not align");
  WinCounts w;
  for (const auto& [key, va] : a) {
    const auto it = b.find(key);
    require(it != b.end(), ErrorKind::InvalidArgument, "cell '" + key + "' missing from second result set");
    if (va > it->second) ++w.wins_a;
    else if (it->second > va) ++w.wins_b;
    else ++w.ties;
  }
  return w;
}

nlohmann::json si_report_json(const ActivityTable& table, const std::vector<NeuronScore>& scores,
                              const SiSummary& summary) {
  nlohmann::json neurons = nlohmann::json::array();
  for (std::size_t j = 0; j < scores.size(); ++j) {
    const auto& s = scores[j];
    neurons.push_back({{"neuron", j},
                       {"preferred_category", s.preferred_category},
                       {"selectivity", s.selectivity},
                       {"invariance", s.invariance},
                       {"si", s.si},
                       {"degenerate", s.degenerate},
                       {"raw_min", table.raw_range[j].first},
                       {"raw_max", table.raw_range[j].second}});
  }
  return {{"num_neurons", table.neurons},
          {"num_categories", table.num_categories},
          {"num_conditions", table.num_conditions},
          {"activity_source", "full dataset covering every (category, condition) cell"},
          {"summary", {{"si_top20_mean", summary.summary},
                       {"si_p80", summary.p80_value},
                       {"top_count", summary.top_count}}},
          {"neurons", neurons}};
}

}  // namespace oodb
