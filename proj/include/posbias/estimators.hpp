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
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "posbias/interventions.hpp"
#include "posbias/logdata.hpp"
#include "posbias/types.hpp"

namespace posbias {

// Relative propensity estimators over interventional statistics.
//
// PivotOne and AdjacentChain are local ratio estimators using only S_{1,k}
// or the chain of adjacent sets. AllPairs jointly fits propensities and
// per-pair mean relevances by maximizing a cross-entropy objective over all
// pairs, which uses far more of the harvested data.

/// Box bound keeping optimized variables strictly inside (0, 1).
inline constexpr double kBoxEpsilon = 1e-6;

struct AllPairsWarmStart {
  std::vector<double> p;  // p[k-1]; rank-1 entry ignored (pinned to 1)
  PairGrid<double> r;
};

struct OptimizerOptions {
  int max_iterations = 10000;
  double tolerance = 1e-9;  // relative objective change
  /// Size-weighted objective variant: each pair's click/skip masses are
  /// rate-normalized and rescaled by the raw set size. Off by default; the
  /// default objective uses the weighted masses exactly as accumulated.
  bool n_weighted = false;
  bool record_trace = false;
  std::optional<AllPairsWarmStart> warm_start;
};

struct AllPairsSolution {
  PropensityCurve curve;
  PairGrid<double> r_hat;
  double objective_value = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> trace;  // objective after each accepted step (if recorded)
};

inline PropensityCurve pivot_one(const InterventionalStats& stats) {
  if (stats.M < 2) throw ValidationError("pivot_one: stats M must be >= 2");
  if (stats.empty()) throw EstimatorError("pivot_one: no interventional data");
  PropensityCurve curve(stats.M);
  curve.set(1, 1.0);
  for (int k = 2; k <= stats.M; ++k) {
    if (stats.set_size.at(1, k) == 0) {
      curve.mark_absent(k, "empty interventional set S_{1," + std::to_string(k) + "}");
      continue;
    }
    const double c1 = stats.c_hat.at(1, k);
    const double ck = stats.c_hat.at(k, 1);
    if (stats.mass_at(1, k) <= 0.0) {
      curve.mark_absent(k, "no exposure at pivot position in S_{1," + std::to_string(k) + "}");
      continue;
    }
    if (c1 <= 0.0) {
      curve.mark_absent(k, "undefined (zero pivot clicks)");
      continue;
    }
    if (ck <= 0.0) {
      curve.mark_absent(k, "zero clicks at position " + std::to_string(k) + " in S_{1," + std::to_string(k) + "}");
      continue;
    }
    curve.set(k, ck / c1);
  }
  return curve;
}

inline PropensityCurve adjacent_chain(const InterventionalStats& stats) {
  if (stats.M < 2) throw ValidationError("adjacent_chain: stats M must be >= 2");
  if (stats.empty()) throw EstimatorError("adjacent_chain: no interventional data");
  PropensityCurve curve(stats.M);
  curve.set(1, 1.0);
  double running = 1.0;
  for (int k = 2; k <= stats.M; ++k) {
    const int j = k - 1;
    std::string reason;
    if (stats.set_size.at(j, k) == 0) {
      reason = "empty interventional set S_{" + std::to_string(j) + "," + std::to_string(k) + "}";
    } else if (stats.mass_at(j, k) <= 0.0 || stats.c_hat.at(j, k) <= 0.0) {
      reason = "zero click rate at position " + std::to_string(j) + " in S_{" + std::to_string(j) + "," +
               std::to_string(k) + "}";
    } else if (stats.c_hat.at(k, j) <= 0.0) {
      reason = "zero click rate at position " + std::to_string(k) + " in S_{" + std::to_string(j) + "," +
               std::to_string(k) + "}";
    }
    if (!reason.empty()) {
      // Broken link: this and all deeper ranks are unreachable by the chain.
      for (int kk = k; kk <= stats.M; ++kk) {
        curve.mark_absent(kk, "chain broken at link (" + std::to_string(j) + "," + std::to_string(k) +
                                  "): " + reason);
      }
      return curve;
    }
    running *= stats.c_hat.at(k, j) / stats.c_hat.at(j, k);
    curve.set(k, running);
  }
  return curve;
}

namespace estimators_detail {

struct PairSide {
  int pos = 0;
  int p_var = -1;  // index into variable vector; -1 means pinned p_1 = 1
  double c = 0.0;
  double nc = 0.0;
};

struct ActivePair {
  int k = 0, kp = 0;
  int r_var = -1;
  std::vector<PairSide> sides;  // sides with positive mass only
};

struct Problem {
  int M = 0;
  std::vector<int> p_rank;              // variable index -> rank (ranks >= 2)
  std::vector<ActivePair> pairs;        // unordered active pairs
  std::size_t n_vars = 0;               // p vars first, then r vars
  std::vector<char> rank_active;        // 1-based size M+1

  double objective(const std::vector<double>& x) const {
    double obj = 0.0;
    for (const auto& pair : pairs) {
      const double r = x[static_cast<std::size_t>(pair.r_var)];
      for (const auto& side : pair.sides) {
        const double p = side.p_var < 0 ? 1.0 : x[static_cast<std::size_t>(side.p_var)];
        const double pr = p * r;
        if (side.c > 0.0) obj += side.c * std::log(pr);
        if (side.nc > 0.0) obj += side.nc * std::log1p(-pr);
      }
    }
    return obj;
  }

  /// Gradient plus the (positive) diagonal of the negated Hessian, used to
  /// precondition the ascent direction.
  void gradient(const std::vector<double>& x, std::vector<double>& g, std::vector<double>& h) const {
    std::fill(g.begin(), g.end(), 0.0);
    std::fill(h.begin(), h.end(), 0.0);
    for (const auto& pair : pairs) {
      const double r = x[static_cast<std::size_t>(pair.r_var)];
      double gr = 0.0, hr = 0.0;
      for (const auto& side : pair.sides) {
        const double p = side.p_var < 0 ? 1.0 : x[static_cast<std::size_t>(side.p_var)];
        const double denom = 1.0 - p * r;
        const double dc = side.c > 0.0 ? side.c / (p * r) : 0.0;
        const double dnc = side.nc > 0.0 ? side.nc / denom : 0.0;
        if (side.p_var >= 0) {
          g[static_cast<std::size_t>(side.p_var)] += (dc - dnc) * r;
          h[static_cast<std::size_t>(side.p_var)] +=
              side.c / (p * p) + side.nc * r * r / (denom * denom);
        }
        gr += (dc - dnc) * p;
        hr += side.c / (r * r) + side.nc * p * p / (denom * denom);
      }
      g[static_cast<std::size_t>(pair.r_var)] += gr;
      h[static_cast<std::size_t>(pair.r_var)] += hr;
    }
  }
};

inline Problem build_problem(const InterventionalStats& stats, bool n_weighted) {
  Problem prob;
  prob.M = stats.M;
  prob.rank_active.assign(static_cast<std::size_t>(stats.M) + 1, 0);

  // A rank participates when it has exposure mass in some nonempty pair.
  for (int k = 1; k <= stats.M; ++k) {
    for (int kp = 1; kp <= stats.M; ++kp) {
      if (k == kp) continue;
      if (stats.set_size.at(k, kp) > 0 && stats.mass_at(k, kp) > 0.0) {
        prob.rank_active[static_cast<std::size_t>(k)] = 1;
      }
    }
  }
  std::vector<int> p_var_of(static_cast<std::size_t>(stats.M) + 1, -1);
  for (int k = 2; k <= stats.M; ++k) {
    if (prob.rank_active[static_cast<std::size_t>(k)]) {
      p_var_of[static_cast<std::size_t>(k)] = static_cast<int>(prob.p_rank.size());
      prob.p_rank.push_back(k);
    }
  }
  int next_r = static_cast<int>(prob.p_rank.size());
  for (int k = 1; k <= stats.M; ++k) {
    for (int kp = k + 1; kp <= stats.M; ++kp) {
      if (stats.set_size.at(k, kp) == 0) continue;  // dropped
      ActivePair pair;
      pair.k = k;
      pair.kp = kp;
      for (int pos : {k, kp}) {
        const int other = pos == k ? kp : k;
        double c = stats.c_hat.at(pos, other);
        double nc = stats.notc_hat.at(pos, other);
        const double mass = c + nc;
        if (mass <= 0.0) continue;
        if (n_weighted) {
          const double scale = static_cast<double>(stats.set_size.at(k, kp)) / mass;
          c *= scale;
          nc *= scale;
        }
        PairSide side;
        side.pos = pos;
        side.p_var = pos == 1 ? -1 : p_var_of[static_cast<std::size_t>(pos)];
        side.c = c;
        side.nc = nc;
        pair.sides.push_back(side);
      }
      if (pair.sides.empty()) continue;
      pair.r_var = next_r++;
      prob.pairs.push_back(std::move(pair));
    }
  }
  prob.n_vars = static_cast<std::size_t>(next_r);
  return prob;
}

inline double clip_box(double v) { return std::min(1.0 - kBoxEpsilon, std::max(kBoxEpsilon, v)); }

}  // namespace estimators_detail

/// The AllPairs training objective
///   sum_{k != k'} c_hat_k^{k,k'} log(p_k r_{k,k'}) +
///                 notc_hat_k^{k,k'} log(1 - p_k r_{k,k'})
/// over pairs with nonempty interventional sets. p holds p_1..p_M; r must be
/// symmetric. All used entries must lie strictly inside (0, 1).
inline double all_pairs_objective(const std::vector<double>& p, const PairGrid<double>& r,
                                  const InterventionalStats& stats) {
  if (static_cast<int>(p.size()) != stats.M) {
    throw ValidationError("all_pairs_objective: p must have length M=" + std::to_string(stats.M));
  }
  if (r.M() != stats.M) throw ValidationError("all_pairs_objective: r must be an MxM grid");
  for (int k = 1; k <= stats.M; ++k) {
    const double v = p[static_cast<std::size_t>(k - 1)];
    if (!(v > 0.0 && v < 1.0)) {
      throw ValidationError("all_pairs_objective: p[" + std::to_string(k) + "] outside (0,1)");
    }
  }
  double obj = 0.0;
  for (int k = 1; k <= stats.M; ++k) {
    for (int kp = 1; kp <= stats.M; ++kp) {
      if (k == kp) continue;
      if (stats.set_size.at(k, kp) == 0) continue;  // empty sets contribute 0
      const double rv = r.at(k, kp);
      if (!(rv > 0.0 && rv < 1.0)) {
        throw ValidationError("all_pairs_objective: r[" + std::to_string(k) + "," + std::to_string(kp) +
                              "] outside (0,1)");
      }
      if (std::abs(rv - r.at(kp, k)) > 1e-12) {
        throw ValidationError("all_pairs_objective: r must be symmetric at (" + std::to_string(k) + "," +
                              std::to_string(kp) + ")");
      }
      const double pr = p[static_cast<std::size_t>(k - 1)] * rv;
      const double c = stats.c_hat.at(k, kp);
      const double nc = stats.notc_hat.at(k, kp);
      if (c > 0.0) obj += c * std::log(pr);
      if (nc > 0.0) obj += nc * std::log1p(-pr);
    }
  }
  return obj;
}

/// Maximizes the AllPairs objective by projected gradient ascent on the box
/// [1e-6, 1 - 1e-6] with backtracking line search. p_1 is pinned to 1, which
/// resolves the (p, r) -> (a p, r / a) scale ambiguity, so the returned curve
/// is already normalized relative to rank 1. Deterministic: identical stats
/// and options yield bit-identical solutions, and the objective trace is
/// non-decreasing.
inline AllPairsSolution all_pairs_estimate(const InterventionalStats& stats,
                                           const OptimizerOptions& opts = {}) {
  if (stats.M < 2) throw ValidationError("all_pairs_estimate: stats M must be >= 2");
  if (stats.empty()) throw EstimatorError("all_pairs_estimate: no interventional data");
  const auto prob = estimators_detail::build_problem(stats, opts.n_weighted);

  std::vector<double> x(prob.n_vars, 0.0);
  const std::size_t n_p = prob.p_rank.size();
  for (std::size_t i = 0; i < n_p; ++i) {
    x[i] = estimators_detail::clip_box(1.0 / static_cast<double>(prob.p_rank[i]));
  }
  for (std::size_t i = n_p; i < prob.n_vars; ++i) x[i] = 0.5;
  if (opts.warm_start) {
    const auto& ws = *opts.warm_start;
    if (static_cast<int>(ws.p.size()) == stats.M && ws.r.M() == stats.M) {
      for (std::size_t i = 0; i < n_p; ++i) {
        x[i] = estimators_detail::clip_box(ws.p[static_cast<std::size_t>(prob.p_rank[i] - 1)]);
      }
      for (const auto& pair : prob.pairs) {
        x[static_cast<std::size_t>(pair.r_var)] = estimators_detail::clip_box(ws.r.at(pair.k, pair.kp));
      }
    }
  }

  AllPairsSolution sol;
  double f = prob.objective(x);
  if (opts.record_trace) sol.trace.push_back(f);
  std::vector<double> g(prob.n_vars), h(prob.n_vars), cand(prob.n_vars);
  // Ascent direction g/h (diagonally preconditioned): a unit step is a
  // per-coordinate Newton step, which keeps progress uniform across
  // variables whose curvature differs by orders of magnitude.
  double step = 1.0;
  int iter = 0;
  bool converged = false;
  while (iter < opts.max_iterations) {
    prob.gradient(x, g, h);
    bool stationary = true;
    for (std::size_t i = 0; i < prob.n_vars; ++i) {
      g[i] = g[i] / std::max(h[i], 1e-300);
      stationary = stationary && g[i] == 0.0;
    }
    if (stationary) {
      converged = true;
      break;
    }
    const double start = step;
    double trial = start;
    double fc = 0.0;
    bool improved = false;
    for (int bt = 0; bt < 80; ++bt) {
      bool moved = false;
      for (std::size_t i = 0; i < prob.n_vars; ++i) {
        cand[i] = estimators_detail::clip_box(x[i] + trial * g[i]);
        moved = moved || cand[i] != x[i];
      }
      if (!moved) break;
      fc = prob.objective(cand);
      if (fc > f) {
        improved = true;
        break;
      }
      trial *= 0.5;
    }
    if (!improved) {
      converged = true;  // no ascent step exists at this resolution
      break;
    }
    x.swap(cand);
    ++iter;
    const double rel = (fc - f) / std::max(std::abs(f), 1e-300);
    f = fc;
    if (opts.record_trace) sol.trace.push_back(f);
    step = std::min(trial * 2.0, 1.0);
    // Converged only when a full (non-backtracked) step no longer moves the
    // objective: small backtracked steps can crawl along a valley while the
    // per-iteration change is already tiny.
    if (rel < opts.tolerance && trial == start) {
      converged = true;
      break;
    }
  }

  sol.objective_value = f;
  sol.iterations = iter;
  sol.converged = converged;
  sol.curve = PropensityCurve(stats.M);
  if (prob.rank_active[1]) {
    sol.curve.set(1, 1.0);
  } else {
    sol.curve.mark_absent(1, "no interventional data at rank 1");
  }
  std::vector<char> has_var(static_cast<std::size_t>(stats.M) + 1, 0);
  for (std::size_t i = 0; i < n_p; ++i) {
    sol.curve.set(prob.p_rank[i], x[i]);
    has_var[static_cast<std::size_t>(prob.p_rank[i])] = 1;
  }
  for (int k = 2; k <= stats.M; ++k) {
    if (!has_var[static_cast<std::size_t>(k)]) {
      sol.curve.mark_absent(k, "no interventional data at rank " + std::to_string(k));
    }
  }
  sol.r_hat = PairGrid<double>(stats.M);
  for (const auto& pair : prob.pairs) {
    sol.r_hat.at(pair.k, pair.kp) = x[static_cast<std::size_t>(pair.r_var)];
    sol.r_hat.at(pair.kp, pair.k) = x[static_cast<std::size_t>(pair.r_var)];
  }
  return sol;
}

/// Gold-standard estimator from an explicit swap experiment: the ratio of
/// the focal document's click rate in the swapped arm to the kept arm,
/// grouped by swap rank.
inline PropensityCurve swap_gold_estimate(const SwapLog& log) {
  if (log.entries.empty()) throw EstimatorError("swap_gold_estimate: empty swap log");
  struct ArmCounts {
    long long kept_n = 0, kept_clicks = 0, swapped_n = 0, swapped_clicks = 0;
  };
  std::map<int, ArmCounts> by_rank;
  int max_rank = 1;
  for (const auto& e : log.entries) {
    auto& a = by_rank[e.swap_rank];
    if (e.swapped) {
      ++a.swapped_n;
      a.swapped_clicks += e.clicked ? 1 : 0;
    } else {
      ++a.kept_n;
      a.kept_clicks += e.clicked ? 1 : 0;
    }
    max_rank = std::max(max_rank, e.swap_rank);
  }
  PropensityCurve curve(max_rank);
  curve.set(1, 1.0);
  for (int k = 2; k <= max_rank; ++k) {
    auto it = by_rank.find(k);
    if (it == by_rank.end()) {
      curve.mark_absent(k, "no swap experiment at rank " + std::to_string(k));
      continue;
    }
    const auto& a = it->second;
    if (a.kept_n == 0 || a.swapped_n == 0) {
      curve.mark_absent(k, "missing arm in Swap(1," + std::to_string(k) + ") data");
      continue;
    }
    if (a.kept_clicks == 0) {
      curve.mark_absent(k, "zero clicks in the kept arm of Swap(1," + std::to_string(k) + ")");
      continue;
    }
    if (a.swapped_clicks == 0) {
      curve.mark_absent(k, "zero clicks in the swapped arm of Swap(1," + std::to_string(k) + ")");
      continue;
    }
    const double c1 = static_cast<double>(a.kept_clicks) / static_cast<double>(a.kept_n);
    const double ck = static_cast<double>(a.swapped_clicks) / static_cast<double>(a.swapped_n);
    curve.set(k, ck / c1);
  }
  return curve;
}

namespace estimators_detail {

inline PropensityCurve naive_curve_from_counts(const std::vector<long long>& displays,
                                               const std::vector<long long>& clicks, int M) {
  PropensityCurve curve(M);
  if (displays[0] == 0) {
    for (int k = 1; k <= M; ++k) curve.mark_absent(k, "position 1 never displayed");
    return curve;
  }
  const double ctr1 = static_cast<double>(clicks[0]) / static_cast<double>(displays[0]);
  if (ctr1 <= 0.0) {
    for (int k = 1; k <= M; ++k) curve.mark_absent(k, "no clicks at position 1: cannot normalize");
    return curve;
  }
  curve.set(1, 1.0);
  for (int k = 2; k <= M; ++k) {
    if (displays[static_cast<std::size_t>(k - 1)] == 0) {
      curve.mark_absent(k, "position " + std::to_string(k) + " never displayed");
      continue;
    }
    const double ctr = static_cast<double>(clicks[static_cast<std::size_t>(k - 1)]) /
                       static_cast<double>(displays[static_cast<std::size_t>(k - 1)]);
    if (ctr <= 0.0) {
      curve.mark_absent(k, "no clicks at position " + std::to_string(k));
      continue;
    }
    curve.set(k, ctr / ctr1);
  }
  return curve;
}

}  // namespace estimators_detail

/// Baseline with no experimental control: the per-position clickthrough rate
/// normalized by position 1. Confounded by relevance ordering, kept for
/// comparison.
inline PropensityCurve naive_ctr_curve(const ImpressionLog& log, const RankingTable& table, int M) {
  if (M < 1) throw ValidationError("naive_ctr_curve: M must be >= 1");
  if (log.impressions.empty()) throw ValidationError("naive_ctr_curve: empty log");
  std::vector<long long> displays(static_cast<std::size_t>(M), 0);
  std::vector<long long> clicks(static_cast<std::size_t>(M), 0);
  for (const auto& imp : log.impressions) {
    const auto& ranking = table.ranking(imp.query, imp.ranker);
    const int displayed = static_cast<int>(std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(M)));
    for (int k = 1; k <= displayed; ++k) ++displays[static_cast<std::size_t>(k - 1)];
    for (const auto& c : imp.clicks) {
      if (c.pos <= M) ++clicks[static_cast<std::size_t>(c.pos - 1)];
    }
  }
  return estimators_detail::naive_curve_from_counts(displays, clicks, M);
}

/// Curve file: one record per rank:
///   {"rank":k, "propensity":x, "inverse_propensity":1/x, "defined":true}
/// Undefined ranks carry {"rank":k, "defined":false}.
inline void write_curve(const PropensityCurve& curve, const std::filesystem::path& path) {
  auto out = logdata_detail::open_output(path);
  for (int k = 1; k <= curve.M(); ++k) {
    nlohmann::ordered_json j;
    j["rank"] = k;
    if (curve.defined(k)) {
      j["propensity"] = curve.at(k);
      j["inverse_propensity"] = curve.inverse_at(k);
      j["defined"] = true;
    } else {
      j["defined"] = false;
    }
    out << j.dump() << '\n';
  }
}

inline PropensityCurve load_curve(const std::filesystem::path& path) {
  auto in = logdata_detail::open_input(path);
  std::string line;
  long long lineno = 0;
  std::map<int, std::optional<double>> ranks;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = logdata_detail::parse_line(line, path, lineno);
    const int rank = logdata_detail::field<int>(j, "rank", path, lineno);
    if (rank < 1) throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": rank must be >= 1");
    const bool defined = logdata_detail::field<bool>(j, "defined", path, lineno);
    if (defined) {
      ranks[rank] = logdata_detail::field<double>(j, "propensity", path, lineno);
    } else {
      ranks[rank] = std::nullopt;
    }
  }
  if (ranks.empty()) throw ParseError(path.string() + ": empty curve file");
  const int M = ranks.rbegin()->first;
  PropensityCurve curve(M);
  for (int k = 1; k <= M; ++k) {
    auto it = ranks.find(k);
    if (it == ranks.end() || !it->second.has_value()) {
      curve.mark_absent(k, "undefined in file");
    } else {
      curve.set(k, *it->second);
    }
  }
  return curve;
}

}  // namespace posbias
