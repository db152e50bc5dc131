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
#include <numeric>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "posbias/logdata.hpp"
#include "posbias/rng.hpp"
#include "posbias/types.hpp"

namespace posbias {

// Synthetic testbed: queries with binary-relevance candidates, rankers that
// sort by a shared quality score plus ranker-specific noise, and clicks drawn
// from the position-based model with propensities p_r = (1/r)^eta. The
// ranker_noise knob replaces training-set manipulation as the similarity
// control; the observable similarity statistic (fraction of same-rank
// documents) is reported so sweeps stay comparable.

struct SimConfig {
  long long num_queries = 1000;
  int candidates_per_query = 30;
  double relevant_fraction = 0.4;
  double eta = 1.0;         // bias severity: p_r = (1/r)^eta
  double eps_minus = 0.1;   // click probability multiplier for irrelevant docs
  double ranker_noise = 0.5;
  TrafficMap traffic = {{"f1", 10000}, {"f2", 10000}};
  int M = 10;
  double swap_prob = 0.5;
  std::uint64_t seed = 1;

  long long total_traffic() const {
    long long t = 0;
    for (const auto& [_, n] : traffic) t += n;
    return t;
  }

  void validate() const {
    if (num_queries < 1) throw ValidationError("queries must be >= 1");
    if (M < 2) throw ValidationError("M must be >= 2");
    if (candidates_per_query < M) throw ValidationError("candidates must be >= M");
    if (!(relevant_fraction > 0.0 && relevant_fraction < 1.0)) {
      throw ValidationError("relevant-frac must be in (0, 1)");
    }
    if (!(eta >= 0.0)) throw ValidationError("eta must be >= 0");
    if (!(eps_minus >= 0.0 && eps_minus <= 1.0)) throw ValidationError("eps-minus must be in [0, 1]");
    if (!(ranker_noise >= 0.0)) throw ValidationError("ranker-noise must be >= 0");
    if (!(swap_prob >= 0.0 && swap_prob <= 1.0)) throw ValidationError("swap-prob must be in [0, 1]");
    if (traffic.empty()) throw ValidationError("traffic must name at least one ranker");
    for (const auto& [ranker, n] : traffic) {
      if (n < 0) throw ValidationError("traffic for ranker " + ranker + " must be >= 0");
    }
  }
};

struct WorldQuery {
  std::string id;
  std::vector<std::string> docs;
  std::vector<char> rel;
  std::vector<double> base_score;
};

struct SyntheticWorld {
  SimConfig cfg;
  std::vector<WorldQuery> queries;
  RankingTable rankings;

  int rel_of(const std::string& query, const std::string& doc) const {
    for (const auto& q : queries) {
      if (q.id != query) continue;
      for (std::size_t i = 0; i < q.docs.size(); ++i) {
        if (q.docs[i] == doc) return q.rel[i];
      }
    }
    throw DataError("synthetic world: unknown (query=" + query + ", doc=" + doc + ")");
  }
};

/// PBM click probability for a document displayed at `rank`.
inline double click_probability(const SimConfig& cfg, int rank, bool relevant) {
  const double p_r = std::pow(1.0 / static_cast<double>(rank), cfg.eta);
  return relevant ? p_r : p_r * cfg.eps_minus;
}

/// Ground-truth relative propensities (1/r)^eta for ranks 1..M.
inline PropensityCurve true_curve(const SimConfig& cfg) {
  PropensityCurve curve(cfg.M);
  for (int k = 1; k <= cfg.M; ++k) curve.set(k, std::pow(1.0 / static_cast<double>(k), cfg.eta));
  return curve;
}

/// Strength of the relevance signal in base quality scores.
inline constexpr double kRelevanceSignal = 0.7;

/// Builds queries, relevance bits and per-ranker rankings. Deterministic in
/// the seed. Base scores are kRelevanceSignal * rel(q,d) + N(0,1), so rankers
/// (which sort by base score plus ranker_noise * N(0,1)) are better than
/// random; with ranker_noise = 0 all rankers are identical.
inline SyntheticWorld generate_world(const SimConfig& cfg) {
  cfg.validate();
  SyntheticWorld world;
  world.cfg = cfg;
  world.queries.reserve(static_cast<std::size_t>(cfg.num_queries));
  std::vector<std::string> ranker_ids;
  for (const auto& [ranker, _] : cfg.traffic) ranker_ids.push_back(ranker);

  for (long long qi = 0; qi < cfg.num_queries; ++qi) {
    WorldQuery q;
    q.id = "q" + std::to_string(qi);
    Rng rng(derive_seed(cfg.seed, "world-query", static_cast<std::uint64_t>(qi)));
    q.docs.reserve(static_cast<std::size_t>(cfg.candidates_per_query));
    for (int di = 0; di < cfg.candidates_per_query; ++di) {
      q.docs.push_back(q.id + "_d" + std::to_string(di));
      q.rel.push_back(rng.chance(cfg.relevant_fraction) ? 1 : 0);
      q.base_score.push_back(kRelevanceSignal * static_cast<double>(q.rel.back()) + rng.normal());
    }
    for (std::size_t ri = 0; ri < ranker_ids.size(); ++ri) {
      Rng rng_r(derive_seed(cfg.seed, "world-ranker", ri, static_cast<std::uint64_t>(qi)));
      std::vector<std::pair<double, int>> scored;
      scored.reserve(q.docs.size());
      for (std::size_t di = 0; di < q.docs.size(); ++di) {
        scored.emplace_back(q.base_score[di] + cfg.ranker_noise * rng_r.normal(), static_cast<int>(di));
      }
      std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;  // deterministic tie-break
      });
      std::vector<std::string> ranking;
      ranking.reserve(scored.size());
      for (const auto& [_, di] : scored) ranking.push_back(q.docs[static_cast<std::size_t>(di)]);
      world.rankings.add(q.id, ranker_ids[ri], std::move(ranking));
    }
    world.queries.push_back(std::move(q));
  }
  return world;
}

namespace simulator_detail {

/// Relevance bit of each displayed position, per (query index, ranker index).
/// Avoids string lookups in the per-impression click loops.
struct RelByPosition {
  std::size_t n_rankers = 0;
  std::vector<std::vector<char>> rel;  // [qidx * n_rankers + ridx][pos - 1]

  RelByPosition(const SyntheticWorld& world, const std::vector<std::string>& ranker_ids) {
    n_rankers = ranker_ids.size();
    rel.resize(world.queries.size() * n_rankers);
    for (std::size_t qi = 0; qi < world.queries.size(); ++qi) {
      const auto& q = world.queries[qi];
      std::unordered_map<std::string, std::size_t> doc_idx;
      doc_idx.reserve(q.docs.size());
      for (std::size_t di = 0; di < q.docs.size(); ++di) doc_idx.emplace(q.docs[di], di);
      for (std::size_t ri = 0; ri < n_rankers; ++ri) {
        const auto& ranking = world.rankings.ranking(q.id, ranker_ids[ri]);
        auto& bits = rel[qi * n_rankers + ri];
        bits.reserve(ranking.size());
        for (const auto& doc : ranking) bits.push_back(q.rel[doc_idx.at(doc)]);
      }
    }
  }

  const std::vector<char>& at(std::size_t qidx, std::size_t ridx) const {
    return rel[qidx * n_rankers + ridx];
  }
};

struct RankerPicker {
  std::vector<std::string> ids;
  std::vector<std::size_t> index;  // into the full sorted ranker list
  std::vector<long long> cumulative;
  long long total = 0;

  RankerPicker(const TrafficMap& traffic, const std::vector<std::string>& all_ids) {
    for (std::size_t i = 0; i < all_ids.size(); ++i) {
      auto it = traffic.find(all_ids[i]);
      const long long n = it == traffic.end() ? 0 : it->second;
      if (n <= 0) continue;
      ids.push_back(all_ids[i]);
      index.push_back(i);
      total += n;
      cumulative.push_back(total);
    }
  }

  std::size_t pick(Rng& rng) const {
    const long long u = static_cast<long long>(rng.below(static_cast<std::uint64_t>(total)));
    for (std::size_t i = 0; i < cumulative.size(); ++i) {
      if (u < cumulative[i]) return i;
    }
    return cumulative.size() - 1;
  }
};

}  // namespace simulator_detail

/// Simulates sum(n_i) impressions. Each impression draws a query uniformly
/// and a ranker with probability proportional to its traffic share,
/// independent of the query, so the randomization condition holds by
/// construction. Clicks follow the PBM on the displayed top-M prefix.
/// Per-impression random streams make the output independent of evaluation
/// order.
inline ImpressionLog simulate_clicks(const SyntheticWorld& world, const SimConfig& cfg) {
  cfg.validate();
  ImpressionLog log;
  const long long total = cfg.total_traffic();
  if (total == 0) return log;
  std::vector<std::string> ranker_ids;
  for (const auto& [ranker, _] : cfg.traffic) ranker_ids.push_back(ranker);
  const simulator_detail::RelByPosition rel_view(world, ranker_ids);
  const simulator_detail::RankerPicker picker(cfg.traffic, ranker_ids);
  // Click probabilities depend only on (rank, relevance); precompute both.
  std::vector<double> p_rel(static_cast<std::size_t>(cfg.M)), p_irr(static_cast<std::size_t>(cfg.M));
  for (int pos = 1; pos <= cfg.M; ++pos) {
    p_rel[static_cast<std::size_t>(pos - 1)] = click_probability(cfg, pos, true);
    p_irr[static_cast<std::size_t>(pos - 1)] = click_probability(cfg, pos, false);
  }
  log.impressions.reserve(static_cast<std::size_t>(total));
  for (long long t = 0; t < total; ++t) {
    Rng rng(derive_seed(cfg.seed, "impression", static_cast<std::uint64_t>(t)));
    const std::size_t qidx = rng.below(static_cast<std::uint64_t>(world.queries.size()));
    const std::size_t pick = picker.pick(rng);
    const auto& q = world.queries[qidx];
    const std::string& ranker = picker.ids[pick];
    const auto& rel = rel_view.at(qidx, picker.index[pick]);
    const auto& ranking = world.rankings.ranking(q.id, ranker);
    Impression imp;
    imp.query = q.id;
    imp.ranker = ranker;
    const int displayed = static_cast<int>(std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(cfg.M)));
    for (int pos = 1; pos <= displayed; ++pos) {
      const double p = rel[static_cast<std::size_t>(pos - 1)] ? p_rel[static_cast<std::size_t>(pos - 1)]
                                                              : p_irr[static_cast<std::size_t>(pos - 1)];
      if (rng.chance(p)) {
        imp.clicks.push_back(Click{ranking[static_cast<std::size_t>(pos - 1)], pos});
      }
    }
    ++log.traffic[ranker];
    log.impressions.push_back(std::move(imp));
  }
  return log;
}

/// Explicit Swap(1, k) experiment: each assigned query picks a ranker
/// uniformly at random, swaps positions 1 and k with probability swap_prob,
/// then draws PBM clicks on the displayed ranking. The focal document is the
/// one originally at rank 1; its click indicator and arm label are recorded.
inline SwapLog simulate_swap_experiment(const SyntheticWorld& world, const SimConfig& cfg, int swap_rank) {
  cfg.validate();
  if (swap_rank < 1 || swap_rank > cfg.M) {
    throw ValidationError("swap-rank must be in [1, M]");
  }
  SwapLog log;
  const long long assigned = cfg.total_traffic();
  std::vector<std::string> ranker_ids;
  for (const auto& [ranker, _] : cfg.traffic) ranker_ids.push_back(ranker);
  const simulator_detail::RelByPosition rel_view(world, ranker_ids);
  log.entries.reserve(static_cast<std::size_t>(assigned));
  std::vector<char> rel_displayed;
  for (long long t = 0; t < assigned; ++t) {
    Rng rng(derive_seed(cfg.seed, "swap-experiment", static_cast<std::uint64_t>(swap_rank),
                        static_cast<std::uint64_t>(t)));
    const std::size_t qidx = rng.below(static_cast<std::uint64_t>(world.queries.size()));
    const std::size_t ridx = rng.below(ranker_ids.size());
    const auto& q = world.queries[qidx];
    rel_displayed = rel_view.at(qidx, ridx);
    const bool swapped = rng.chance(cfg.swap_prob);
    if (swapped && swap_rank > 1) {
      std::swap(rel_displayed[0], rel_displayed[static_cast<std::size_t>(swap_rank - 1)]);
    }
    const int focal_pos = swapped ? swap_rank : 1;
    const int limit = static_cast<int>(std::min<std::size_t>(rel_displayed.size(), static_cast<std::size_t>(cfg.M)));
    bool focal_clicked = false;
    for (int pos = 1; pos <= limit; ++pos) {
      const bool relevant = rel_displayed[static_cast<std::size_t>(pos - 1)] != 0;
      const bool clicked = rng.chance(click_probability(cfg, pos, relevant));
      if (clicked && pos == focal_pos) focal_clicked = true;
    }
    log.entries.push_back(SwapImpression{q.id, ranker_ids[ridx], swap_rank, swapped, focal_clicked});
  }
  return log;
}

/// Fraction of top-M positions showing the same document under two rankers,
/// averaged over queries and ranker pairs. NaN when no query has two rankers.
inline double same_rank_fraction(const RankingTable& table, int M) {
  std::map<std::string, std::vector<const std::vector<std::string>*>> by_query;
  for (const auto& [key, ranking] : table.entries()) by_query[key.first].push_back(&ranking);
  double sum = 0.0;
  long long count = 0;
  for (const auto& [_, rankings] : by_query) {
    for (std::size_t a = 0; a < rankings.size(); ++a) {
      for (std::size_t b = a + 1; b < rankings.size(); ++b) {
        int same = 0;
        const std::size_t lim = std::min<std::size_t>(
            static_cast<std::size_t>(M), std::min(rankings[a]->size(), rankings[b]->size()));
        for (std::size_t i = 0; i < lim; ++i) {
          if ((*rankings[a])[i] == (*rankings[b])[i]) ++same;
        }
        sum += static_cast<double>(same) / static_cast<double>(M);
        ++count;
      }
    }
  }
  if (count == 0) return std::nan("");
  return sum / static_cast<double>(count);
}

/// Ground-truth file for evaluation only: per-rank true propensities
/// {"rank":r, "p":..} followed by per-document relevance records
/// {"query":.., "doc":.., "rel":0|1}.
inline void write_truth(const SyntheticWorld& world, const std::filesystem::path& path) {
  auto out = logdata_detail::open_output(path);
  const auto curve = true_curve(world.cfg);
  for (int k = 1; k <= curve.M(); ++k) {
    nlohmann::ordered_json j;
    j["rank"] = k;
    j["p"] = curve.at(k);
    out << j.dump() << '\n';
  }
  for (const auto& q : world.queries) {
    for (std::size_t i = 0; i < q.docs.size(); ++i) {
      nlohmann::ordered_json j;
      j["query"] = q.id;
      j["doc"] = q.docs[i];
      j["rel"] = static_cast<int>(q.rel[i]);
      out << j.dump() << '\n';
    }
  }
}

/// Reads the per-rank propensity records of a ground-truth file.
inline PropensityCurve load_truth_curve(const std::filesystem::path& path) {
  auto in = logdata_detail::open_input(path);
  std::string line;
  long long lineno = 0;
  std::map<int, double> ranks;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = logdata_detail::parse_line(line, path, lineno);
    if (!j.contains("rank")) continue;
    const int rank = logdata_detail::field<int>(j, "rank", path, lineno);
    ranks[rank] = logdata_detail::field<double>(j, "p", path, lineno);
  }
  if (ranks.empty()) throw ParseError(path.string() + ": no per-rank propensity records");
  PropensityCurve curve(ranks.rbegin()->first);
  for (const auto& [rank, p] : ranks) curve.set(rank, p);
  for (int k = 1; k <= curve.M(); ++k) {
    if (!curve.defined(k)) curve.mark_absent(k, "missing in truth file");
  }
  return curve;
}

}  // namespace posbias
