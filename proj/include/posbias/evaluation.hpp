/*
 * Copyright 2026 The posbias Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "posbias/estimators.hpp"
#include "posbias/interventions.hpp"
#include "posbias/logdata.hpp"
#include "posbias/parallel.hpp"
#include "posbias/rng.hpp"
#include "posbias/simulator.hpp"
#include "posbias/types.hpp"

namespace posbias {

/// Mean squared error of the inverse relative propensity weights,
///   sum_k (p1_hat/pk_hat - p1/pk)^2 / M,
/// after normalizing both curves by their rank-1 value. Inverse weights are
/// scored because they drive inverse-propensity-weighted learning. Both
/// curves must be defined on every rank 1..M.
inline double inverse_propensity_mse(const PropensityCurve& est, const PropensityCurve& truth, int M) {
  if (M < 1) throw ValidationError("inverse_propensity_mse: M must be >= 1");
  if (est.M() < M) throw ValidationError("inverse_propensity_mse: estimate defined only to rank " + std::to_string(est.M()));
  if (truth.M() < M) throw ValidationError("inverse_propensity_mse: truth defined only to rank " + std::to_string(truth.M()));
  for (int k = 1; k <= M; ++k) {
    if (!est.defined(k)) {
      throw ValidationError("inverse_propensity_mse: rank " + std::to_string(k) + " absent in estimate" +
                            (est.note(k).empty() ? "" : " (" + est.note(k) + ")"));
    }
    if (!truth.defined(k)) throw ValidationError("inverse_propensity_mse: rank " + std::to_string(k) + " absent in truth");
  }
  const PropensityCurve e = est.normalized();
  const PropensityCurve t = truth.normalized();
  double sum = 0.0;
  for (int k = 1; k <= M; ++k) {
    const double d = e.inverse_at(k) - t.inverse_at(k);
    sum += d * d;
  }
  return sum / static_cast<double>(M);
}

/// Linear-interpolated empirical quantile of a sorted sample.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw ValidationError("quantile of empty sample");
  if (sorted.size() == 1) return sorted[0];
  const double h = q * static_cast<double>(sorted.size() - 1);
  const std::size_t i = static_cast<std::size_t>(std::min(h, static_cast<double>(sorted.size() - 2)));
  const double frac = h - static_cast<double>(i);
  return sorted[i] + frac * (sorted[i + 1] - sorted[i]);
}

struct RankInterval {
  double lo = 0.0;
  double hi = 0.0;
  long long defined_resamples = 0;
};

struct BootstrapResult {
  PropensityCurve point;
  std::map<int, RankInterval> intervals;
  int B = 0;
  double level = 0.95;
  long long failures = 0;
  std::vector<std::string> notes;
};

namespace evaluation_detail {

/// Resampling engine for the impression bootstrap.
///
/// A bootstrap resample draws impressions i.i.d. with replacement. The
/// pipeline statistics depend on a resample only through (a) how many times
/// each distinct click pattern of each (query, ranker) group was drawn and
/// (b) the resampled per-ranker traffic counts, which enter via the
/// assignment weights. Tallying draws by click-pattern class and
/// re-deriving weights from the resampled traffic therefore reproduces the
/// full pipeline (weights -> stats -> estimate) for each resample exactly,
/// without materializing logs. An equivalence test against build_stats on a
/// materialized resample guards this decomposition.
class BootstrapEngine {
 public:
  BootstrapEngine(const ImpressionLog& log, const RankingTable& table, int M) : m_(M) {
    if (M < 2) throw ValidationError("bootstrap engine: M must be >= 2");
    if (log.impressions.empty()) throw ValidationError("bootstrap engine: empty log");
    for (const auto& [ranker, _] : log.traffic) ranker_ids_.push_back(ranker);
    std::unordered_map<std::string, std::uint32_t> ranker_idx;
    for (std::uint32_t i = 0; i < ranker_ids_.size(); ++i) ranker_idx.emplace(ranker_ids_[i], i);
    if (ranker_ids_.size() > 64) throw ValidationError("bootstrap engine: more than 64 rankers unsupported");

    // Per-query doc -> positions-with-mask over rankers that appear in the log.
    struct DocPositions {
      std::vector<int> positions;
      std::vector<std::uint64_t> masks;
    };
    std::map<std::string, std::map<std::string, DocPositions>> by_query;
    for (const auto& [key, ranking] : table.entries()) {
      // Every table ranker defines pair membership; only rankers with log
      // traffic carry weight mass.
      auto rit = ranker_idx.find(key.second);
      const std::uint64_t bit = rit == ranker_idx.end() ? 0ull : (1ull << rit->second);
      const std::size_t lim = std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(M));
      auto& docs = by_query[key.first];
      for (std::size_t i = 0; i < lim; ++i) {
        auto& dp = docs[ranking[i]];
        const int pos = static_cast<int>(i) + 1;
        bool found = false;
        for (std::size_t p = 0; p < dp.positions.size(); ++p) {
          if (dp.positions[p] == pos) {
            dp.masks[p] |= bit;
            found = true;
            break;
          }
        }
        if (!found) {
          dp.positions.push_back(pos);
          dp.masks.push_back(bit);
        }
      }
    }
    set_size_ = PairGrid<long long>(M);
    for (auto& [query, docs] : by_query) {
      for (auto& [doc, dp] : docs) {
        // sort positions (masks follow)
        std::vector<std::size_t> order(dp.positions.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return dp.positions[a] < dp.positions[b]; });
        DocPositions sorted;
        for (std::size_t i : order) {
          sorted.positions.push_back(dp.positions[i]);
          sorted.masks.push_back(dp.masks[i]);
        }
        dp = std::move(sorted);
        for (std::size_t a = 0; a < dp.positions.size(); ++a) {
          for (std::size_t b = a + 1; b < dp.positions.size(); ++b) {
            ++set_size_.at(dp.positions[a], dp.positions[b]);
            ++set_size_.at(dp.positions[b], dp.positions[a]);
          }
        }
      }
    }

    // Groups: (query, ranker) pairs that occur in the log.
    std::unordered_map<std::string, std::uint32_t> group_of;
    std::vector<std::map<std::vector<std::uint16_t>, std::uint32_t>> class_lookup;
    class_of_.reserve(log.impressions.size());
    std::vector<std::uint16_t> clicked_slots;
    for (const auto& imp : log.impressions) {
      const std::string key = interventions_detail::HarvestIndex::key(imp.query, imp.ranker);
      auto [git, inserted] = group_of.emplace(key, static_cast<std::uint32_t>(groups_.size()));
      if (inserted) {
        const auto& ranking = table.ranking(imp.query, imp.ranker);
        Group g;
        g.ranker = ranker_idx.at(imp.ranker);
        g.displayed = static_cast<int>(std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(M)));
        g.cell_begin = static_cast<std::uint32_t>(cells_.size());
        const auto& docs = by_query.at(imp.query);
        for (int pos = 1; pos <= g.displayed; ++pos) {
          const auto& dp = docs.at(ranking[static_cast<std::size_t>(pos - 1)]);
          Cell cell;
          cell.pos = static_cast<std::uint16_t>(pos);
          cell.pair_begin = static_cast<std::uint32_t>(pair_targets_.size());
          std::uint64_t mask = 0;
          for (std::size_t p = 0; p < dp.positions.size(); ++p) {
            if (dp.positions[p] == pos) mask = dp.masks[p];
          }
          for (int other : dp.positions) {
            if (other != pos) pair_targets_.push_back(static_cast<std::uint16_t>(other));
          }
          cell.pair_end = static_cast<std::uint32_t>(pair_targets_.size());
          cell.mask = mask;
          cells_.push_back(cell);
        }
        g.cell_end = static_cast<std::uint32_t>(cells_.size());
        groups_.push_back(g);
        class_lookup.emplace_back();
      }
      const std::uint32_t gidx = git->second;
      clicked_slots.clear();
      for (const auto& c : imp.clicks) {
        if (c.pos <= M) clicked_slots.push_back(static_cast<std::uint16_t>(c.pos));
      }
      auto [cit, cinserted] =
          class_lookup[gidx].emplace(clicked_slots, static_cast<std::uint32_t>(classes_.size()));
      if (cinserted) {
        Class cls;
        cls.group = gidx;
        cls.clicked_begin = static_cast<std::uint32_t>(clicked_cells_.size());
        for (std::uint16_t pos : clicked_slots) {
          clicked_cells_.push_back(groups_[gidx].cell_begin + static_cast<std::uint32_t>(pos - 1));
        }
        cls.clicked_end = static_cast<std::uint32_t>(clicked_cells_.size());
        classes_.push_back(cls);
      }
      class_of_.push_back(cit->second);
    }

    n_ = static_cast<std::uint32_t>(log.impressions.size());
    class_counts_.resize(classes_.size());
    group_counts_.resize(groups_.size());
    inv_w_.resize(cells_.size());
    traffic_idx_.resize(ranker_ids_.size());
  }

  int M() const { return m_; }
  std::uint32_t impressions() const { return n_; }

  struct Resample {
    InterventionalStats stats;
    TrafficMap traffic;
    std::vector<long long> displays;  // per position 1..M
    std::vector<long long> clicks;
  };

  /// One exact multinomial resample of the impressions, already reduced to
  /// the statistics the estimators need. The rng is consumed with exactly
  /// `impressions()` below(n) calls.
  Resample resample(Rng& rng) {
    std::fill(class_counts_.begin(), class_counts_.end(), 0u);
    for (std::uint32_t t = 0; t < n_; ++t) {
      ++class_counts_[class_of_[rng.below(n_)]];
    }
    std::fill(group_counts_.begin(), group_counts_.end(), 0u);
    for (std::size_t z = 0; z < classes_.size(); ++z) {
      group_counts_[classes_[z].group] += class_counts_[z];
    }
    std::fill(traffic_idx_.begin(), traffic_idx_.end(), 0ll);
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      traffic_idx_[groups_[g].ranker] += group_counts_[g];
    }
    for (std::size_t c = 0; c < cells_.size(); ++c) {
      std::uint64_t mask = cells_[c].mask;
      long long w = 0;
      while (mask) {
        w += traffic_idx_[static_cast<std::size_t>(__builtin_ctzll(mask))];
        mask &= mask - 1;
      }
      inv_w_[c] = w > 0 ? 1.0 / static_cast<double>(w) : 0.0;
    }

    Resample out;
    out.stats = InterventionalStats(m_);
    out.stats.set_size = set_size_;
    out.displays.assign(static_cast<std::size_t>(m_), 0);
    out.clicks.assign(static_cast<std::size_t>(m_), 0);
    auto& c_hat = out.stats.c_hat;
    auto& notc_hat = out.stats.notc_hat;
    for (std::size_t g = 0; g < groups_.size(); ++g) {
      const auto cnt = group_counts_[g];
      if (cnt == 0) continue;
      const double dcnt = static_cast<double>(cnt);
      const auto& grp = groups_[g];
      for (int pos = 1; pos <= grp.displayed; ++pos) out.displays[static_cast<std::size_t>(pos - 1)] += cnt;
      for (std::uint32_t c = grp.cell_begin; c < grp.cell_end; ++c) {
        const auto& cell = cells_[c];
        if (cell.pair_begin == cell.pair_end) continue;
        const double add = dcnt * inv_w_[c];
        for (std::uint32_t t = cell.pair_begin; t < cell.pair_end; ++t) {
          notc_hat(cell.pos, pair_targets_[t]) += add;
        }
      }
    }
    for (std::size_t z = 0; z < classes_.size(); ++z) {
      const auto cnt = class_counts_[z];
      if (cnt == 0) continue;
      const double dcnt = static_cast<double>(cnt);
      const auto& cls = classes_[z];
      for (std::uint32_t i = cls.clicked_begin; i < cls.clicked_end; ++i) {
        const auto& cell = cells_[clicked_cells_[i]];
        out.clicks[static_cast<std::size_t>(cell.pos - 1)] += cnt;
        if (cell.pair_begin == cell.pair_end) continue;
        const double move = dcnt * inv_w_[clicked_cells_[i]];
        for (std::uint32_t t = cell.pair_begin; t < cell.pair_end; ++t) {
          c_hat(cell.pos, pair_targets_[t]) += move;
          notc_hat(cell.pos, pair_targets_[t]) -= move;
        }
      }
    }
    // Cancellation can leave tiny negative dust where every exposure was a
    // click; keep the nonnegativity invariant.
    for (int k = 1; k <= m_; ++k) {
      for (int kp = 1; kp <= m_; ++kp) {
        if (k == kp) continue;
        double& v = notc_hat(k, kp);
        if (v < 0.0 && v > -1e-9) v = 0.0;
      }
    }
    for (std::size_t i = 0; i < ranker_ids_.size(); ++i) {
      out.traffic[ranker_ids_[i]] = traffic_idx_[i];
    }
    return out;
  }

 private:
  struct Cell {
    std::uint16_t pos = 0;
    std::uint64_t mask = 0;
    std::uint32_t pair_begin = 0;
    std::uint32_t pair_end = 0;
  };
  struct Group {
    std::uint32_t ranker = 0;
    std::uint32_t cell_begin = 0;
    std::uint32_t cell_end = 0;
    int displayed = 0;
  };
  struct Class {
    std::uint32_t group = 0;
    std::uint32_t clicked_begin = 0;
    std::uint32_t clicked_end = 0;
  };

  int m_ = 0;
  std::uint32_t n_ = 0;
  std::vector<std::string> ranker_ids_;
  std::vector<Group> groups_;
  std::vector<Cell> cells_;
  std::vector<std::uint16_t> pair_targets_;
  std::vector<Class> classes_;
  std::vector<std::uint32_t> clicked_cells_;
  std::vector<std::uint32_t> class_of_;
  PairGrid<long long> set_size_;
  // scratch
  std::vector<std::uint32_t> class_counts_;
  std::vector<std::uint32_t> group_counts_;
  std::vector<double> inv_w_;
  std::vector<long long> traffic_idx_;
};

inline const std::vector<std::string>& bootstrap_methods() {
  static const std::vector<std::string> kMethods = {"pivot-one", "adjacent-chain", "all-pairs", "naive-ctr"};
  return kMethods;
}

}  // namespace evaluation_detail

/// Percentile bootstrap over impressions (the logged i.i.d. unit), re-running
/// the full pipeline -- resampled traffic, weights, stats, estimator -- for
/// every resample. Deterministic given the seed. Fails if the estimator
/// fails on more than max_failure_fraction of the resamples.
inline BootstrapResult bootstrap_ci(const ImpressionLog& log, const RankingTable& table,
                                    const std::string& method, int B, double level, std::uint64_t seed, int M,
                                    const OptimizerOptions& opts = {},
                                    double max_failure_fraction = 0.2) {
  if (B < 1) throw ValidationError("bootstrap: B must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("bootstrap: level must be in (0, 1)");
  const auto& methods = evaluation_detail::bootstrap_methods();
  if (std::find(methods.begin(), methods.end(), method) == methods.end()) {
    throw ValidationError("bootstrap: unsupported method \"" + method + "\"");
  }

  BootstrapResult result;
  result.B = B;
  result.level = level;

  // Point estimate from the original log.
  const auto weights = compute_weights(table, log.traffic, M);
  const auto stats = build_stats(log, table, weights, M);
  OptimizerOptions resample_opts = opts;
  resample_opts.record_trace = false;
  if (method == "all-pairs") {
    const auto solution = all_pairs_estimate(stats, opts);
    result.point = solution.curve;
    // Warm-start each resample at the point solution: the objective is
    // concave after a log reparameterization, so the maximizer is the same
    // and convergence is much faster near it.
    AllPairsWarmStart ws;
    ws.p.assign(static_cast<std::size_t>(M), 0.5);
    for (int k = 1; k <= M; ++k) {
      if (solution.curve.defined(k)) ws.p[static_cast<std::size_t>(k - 1)] = solution.curve.at(k);
    }
    ws.r = solution.r_hat;
    resample_opts.warm_start = std::move(ws);
  } else if (method == "pivot-one") {
    result.point = pivot_one(stats);
  } else if (method == "adjacent-chain") {
    result.point = adjacent_chain(stats);
  } else {
    result.point = naive_ctr_curve(log, table, M);
  }

  evaluation_detail::BootstrapEngine engine(log, table, M);
  std::vector<std::vector<double>> values(static_cast<std::size_t>(M) + 1);
  for (auto& v : values) v.reserve(static_cast<std::size_t>(B));
  long long failures = 0;
  for (int b = 0; b < B; ++b) {
    Rng rng(derive_seed(seed, "bootstrap-resample", static_cast<std::uint64_t>(b)));
    auto rs = engine.resample(rng);
    PropensityCurve curve;
    try {
      if (method == "all-pairs") {
        curve = all_pairs_estimate(rs.stats, resample_opts).curve;
      } else if (method == "pivot-one") {
        curve = pivot_one(rs.stats);
      } else if (method == "adjacent-chain") {
        curve = adjacent_chain(rs.stats);
      } else {
        curve = estimators_detail::naive_curve_from_counts(rs.displays, rs.clicks, M);
      }
    } catch (const Error& e) {
      ++failures;
      if (result.notes.size() < 3) result.notes.push_back("resample " + std::to_string(b) + ": " + e.what());
      continue;
    }
    bool informative = false;
    for (int k = 1; k <= M; ++k) {
      if (curve.defined(k)) {
        values[static_cast<std::size_t>(k)].push_back(curve.at(k));
        informative = informative || k >= 2;
      }
    }
    if (!informative) {
      // A curve carrying only the rank-1 anchor estimates nothing.
      ++failures;
      if (result.notes.size() < 3) {
        result.notes.push_back("resample " + std::to_string(b) + ": no rank beyond 1 defined");
      }
    }
  }
  result.failures = failures;
  if (static_cast<double>(failures) > max_failure_fraction * static_cast<double>(B)) {
    std::string detail;
    for (const auto& n : result.notes) detail += "; " + n;
    throw EstimatorError("bootstrap: estimator failed on " + std::to_string(failures) + " of " +
                         std::to_string(B) + " resamples (more than " +
                         std::to_string(static_cast<int>(max_failure_fraction * 100)) + "%)" + detail);
  }
  const double alpha = 1.0 - level;
  for (int k = 1; k <= M; ++k) {
    auto& v = values[static_cast<std::size_t>(k)];
    if (v.empty()) continue;
    std::sort(v.begin(), v.end());
    RankInterval interval;
    interval.lo = quantile_sorted(v, alpha / 2.0);
    interval.hi = quantile_sorted(v, 1.0 - alpha / 2.0);
    interval.defined_resamples = static_cast<long long>(v.size());
    result.intervals[k] = interval;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Robustness sweeps
// ---------------------------------------------------------------------------

enum class SweepAxis { DataSize, RankerSimilarity, ClickNoise, BiasSeverity, TrafficImbalance };

inline std::string to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::DataSize: return "data-size";
    case SweepAxis::RankerSimilarity: return "ranker-similarity";
    case SweepAxis::ClickNoise: return "click-noise";
    case SweepAxis::BiasSeverity: return "bias-severity";
    case SweepAxis::TrafficImbalance: return "traffic-imbalance";
  }
  return "?";
}

inline SweepAxis parse_axis(const std::string& name) {
  if (name == "data-size") return SweepAxis::DataSize;
  if (name == "ranker-similarity") return SweepAxis::RankerSimilarity;
  if (name == "click-noise") return SweepAxis::ClickNoise;
  if (name == "bias-severity") return SweepAxis::BiasSeverity;
  if (name == "traffic-imbalance") return SweepAxis::TrafficImbalance;
  throw ValidationError("unknown sweep axis \"" + name +
                        "\" (expected data-size, ranker-similarity, click-noise, bias-severity or "
                        "traffic-imbalance)");
}

struct SweepPoint {
  double value = 0.0;
  std::string label;
};

/// Applies one grid value to the base configuration.
inline SimConfig apply_sweep_axis(SimConfig cfg, SweepAxis axis, double value) {
  switch (axis) {
    case SweepAxis::DataSize: {
      const long long n = static_cast<long long>(std::llround(value));
      if (n < 0) throw ValidationError("data-size grid values must be >= 0");
      for (auto& [_, t] : cfg.traffic) t = n;
      break;
    }
    case SweepAxis::RankerSimilarity:
      cfg.ranker_noise = value;
      break;
    case SweepAxis::ClickNoise:
      cfg.eps_minus = value;
      break;
    case SweepAxis::BiasSeverity:
      cfg.eta = value;
      break;
    case SweepAxis::TrafficImbalance: {
      if (cfg.traffic.size() != 2) {
        throw ValidationError("traffic-imbalance sweeps require exactly two rankers");
      }
      if (!(value > 0.0)) throw ValidationError("traffic-imbalance ratios must be > 0");
      const long long total = cfg.total_traffic();
      auto it = cfg.traffic.begin();
      const long long n1 = static_cast<long long>(std::llround(static_cast<double>(total) * value / (1.0 + value)));
      it->second = n1;
      ++it;
      it->second = total - n1;
      break;
    }
  }
  return cfg;
}

/// One pipeline run scored against ground truth.
struct EvalReport {
  std::string method;
  PropensityCurve estimate;
  std::optional<PropensityCurve> truth;
  std::optional<double> mse;
  std::string mse_note;  // why the MSE is undefined, when it is
  std::map<int, RankInterval> intervals;
  // sweep metadata
  std::string axis;
  double value = 0.0;
  std::string label;
  int seed_index = -1;
  std::uint64_t seed = 0;
  double runtime_sec = 0.0;
  double same_rank_frac = 0.0;
};

struct SweepSummaryRow {
  std::string axis;
  double value = 0.0;
  std::string label;
  std::string method;
  int runs = 0;
  int defined_runs = 0;
  double mean_mse = 0.0;
  double sd_mse = 0.0;
};

struct SweepResult {
  std::vector<EvalReport> reports;  // one per grid point x seed x method
  std::vector<SweepSummaryRow> summary;
};

/// Runs the full pipeline (world, clicks, harvest, estimate, score) for each
/// grid point and seed. Grid points x seeds are independent jobs; outputs are
/// deterministic given (base config, grid, seeds) and independent of `jobs`.
inline SweepResult run_sweep(SweepAxis axis, const std::vector<SweepPoint>& grid, const SimConfig& base,
                             const std::vector<std::string>& methods, int seeds, int jobs = 1,
                             const OptimizerOptions& opts = {}) {
  if (grid.empty()) throw ValidationError("sweep: empty grid");
  if (seeds < 1) throw ValidationError("sweep: seeds must be >= 1");
  if (methods.empty()) throw ValidationError("sweep: no methods given");
  const auto& known = evaluation_detail::bootstrap_methods();
  for (const auto& m : methods) {
    if (std::find(known.begin(), known.end(), m) == known.end()) {
      throw ValidationError("sweep: unsupported method \"" + m + "\"");
    }
  }

  const std::size_t n_jobs = grid.size() * static_cast<std::size_t>(seeds);
  std::vector<std::vector<EvalReport>> slots(n_jobs);

  parallel_for(n_jobs, jobs, [&](std::size_t job) {
    const std::size_t gi = job / static_cast<std::size_t>(seeds);
    const int rep = static_cast<int>(job % static_cast<std::size_t>(seeds));
    SimConfig cfg = apply_sweep_axis(base, axis, grid[gi].value);
    cfg.seed = derive_seed(base.seed, "sweep-" + to_string(axis), gi, static_cast<std::uint64_t>(rep));
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const auto world = generate_world(cfg);
    const auto log = simulate_clicks(world, cfg);
    const double srf = same_rank_fraction(world.rankings, cfg.M);
    const auto weights = compute_weights(world.rankings, log.traffic, cfg.M);
    const auto stats = build_stats(log, world.rankings, weights, cfg.M);
    const double prep_sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto truth = true_curve(cfg);

    for (const auto& method : methods) {
      EvalReport report;
      report.method = method;
      report.truth = truth;
      report.axis = to_string(axis);
      report.value = grid[gi].value;
      report.label = grid[gi].label.empty() ? std::to_string(grid[gi].value) : grid[gi].label;
      report.seed_index = rep;
      report.seed = cfg.seed;
      report.same_rank_frac = srf;
      const auto t1 = std::chrono::steady_clock::now();
      try {
        if (method == "all-pairs") {
          report.estimate = all_pairs_estimate(stats, opts).curve;
        } else if (method == "pivot-one") {
          report.estimate = pivot_one(stats);
        } else if (method == "adjacent-chain") {
          report.estimate = adjacent_chain(stats);
        } else {
          report.estimate = naive_ctr_curve(log, world.rankings, cfg.M);
        }
        report.mse = inverse_propensity_mse(report.estimate, truth, cfg.M);
      } catch (const Error& e) {
        report.mse.reset();
        report.mse_note = e.what();
      }
      report.runtime_sec = prep_sec + std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
      slots[job].push_back(std::move(report));
    }
  });

  SweepResult result;
  for (auto& slot : slots) {
    for (auto& report : slot) result.reports.push_back(std::move(report));
  }
  // Summary per grid point x method; values sorted before aggregation so the
  // result does not depend on collection order.
  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    for (const auto& method : methods) {
      SweepSummaryRow row;
      row.axis = to_string(axis);
      row.value = grid[gi].value;
      row.label = grid[gi].label.empty() ? std::to_string(grid[gi].value) : grid[gi].label;
      row.method = method;
      std::vector<double> mses;
      for (const auto& report : result.reports) {
        if (report.method != method || report.value != grid[gi].value || report.label != row.label) continue;
        ++row.runs;
        if (report.mse.has_value()) mses.push_back(*report.mse);
      }
      row.defined_runs = static_cast<int>(mses.size());
      std::sort(mses.begin(), mses.end());
      if (!mses.empty()) {
        double sum = 0.0;
        for (double v : mses) sum += v;
        row.mean_mse = sum / static_cast<double>(mses.size());
        if (mses.size() > 1) {
          double ss = 0.0;
          for (double v : mses) ss += (v - row.mean_mse) * (v - row.mean_mse);
          row.sd_mse = std::sqrt(ss / static_cast<double>(mses.size() - 1));
        }
      }
      result.summary.push_back(std::move(row));
    }
  }
  return result;
}

namespace evaluation_detail {

inline std::string fmt_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const int n = std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = 0.0;
  std::sscanf(buf, "%lf", &back);
  if (back == v) {
    // try shorter representations that still round-trip
    for (int prec = 1; prec < 17; ++prec) {
      char buf2[64];
      std::snprintf(buf2, sizeof(buf2), "%.*g", prec, v);
      std::sscanf(buf2, "%lf", &back);
      if (back == v) return buf2;
    }
  }
  return std::string(buf, static_cast<std::size_t>(n));
}

}  // namespace evaluation_detail

/// Flat per-run table, one row per grid point x seed x method. The
/// runtime_sec column is wall-clock time and is the only column that varies
/// between reruns.
inline void write_sweep_reports_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
  auto out = logdata_detail::open_output(path);
  out << "axis,value,label,seed_index,seed,method,mse_defined,mse,mse_note,runtime_sec,same_rank_fraction\n";
  for (const auto& r : reports) {
    std::string note = r.mse_note;
    for (auto& ch : note) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    out << r.axis << ',' << evaluation_detail::fmt_double(r.value) << ',' << r.label << ',' << r.seed_index << ','
        << r.seed << ',' << r.method << ',' << (r.mse.has_value() ? 1 : 0) << ','
        << (r.mse.has_value() ? evaluation_detail::fmt_double(*r.mse) : std::string()) << ',' << note << ','
        << evaluation_detail::fmt_double(r.runtime_sec) << ','
        << evaluation_detail::fmt_double(r.same_rank_frac) << '\n';
  }
}

/// Plot-ready summary (mean and standard deviation per grid point x method).
/// Byte-identical across reruns with a fixed seed.
inline void write_sweep_summary_csv(const std::vector<SweepSummaryRow>& summary,
                                    const std::filesystem::path& path) {
  auto out = logdata_detail::open_output(path);
  out << "axis,value,label,method,runs,defined_runs,mean_mse,sd_mse\n";
  for (const auto& row : summary) {
    out << row.axis << ',' << evaluation_detail::fmt_double(row.value) << ',' << row.label << ',' << row.method
        << ',' << row.runs << ',' << row.defined_runs << ','
        << (row.defined_runs > 0 ? evaluation_detail::fmt_double(row.mean_mse) : std::string()) << ','
        << (row.defined_runs > 1 ? evaluation_detail::fmt_double(row.sd_mse) : std::string()) << '\n';
  }
}

}  // namespace posbias
