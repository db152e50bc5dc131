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
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "posbias/logdata.hpp"
#include "posbias/parallel.hpp"
#include "posbias/types.hpp"

namespace posbias {

// Virtual swap interventions harvested from logs of multiple rankers.
//
// A (query, doc) pair belongs to the interventional set S_{k,k'} when one
// logged ranker places the doc at rank k and another at rank k', both within
// the top M. Within such a pair the displayed rank is randomized by the
// (query-independent) choice of ranker, so click rates at k and k' share the
// same unobserved relevance mass and their ratio isolates examination.

/// Assignment weights w(q,d,k) = sum_i n_i * 1[rank(d | f_i(q)) = k],
/// for positions k <= M only. They correct for non-uniform assignment of a
/// document to the two positions of an interventional pair.
struct WeightIndex {
  int M = 0;
  std::uint64_t provenance = 0;
  // (query, doc) -> (position, weight), positions ascending.
  std::map<std::pair<std::string, std::string>, std::vector<std::pair<int, double>>> weights;

  double at(const std::string& query, const std::string& doc, int k) const {
    auto it = weights.find({query, doc});
    if (it == weights.end()) return 0.0;
    for (const auto& [pos, w] : it->second) {
      if (pos == k) return w;
    }
    return 0.0;
  }
};

/// Fingerprint of (table, traffic, M) used to reject stats built from
/// mismatched inputs.
inline std::uint64_t weights_provenance(const RankingTable& table, const TrafficMap& traffic, int M) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix_str = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xFFu;
    h *= 1099511628211ull;
  };
  auto mix_int = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFFu;
      h *= 1099511628211ull;
    }
  };
  mix_int(static_cast<std::uint64_t>(M));
  for (const auto& [ranker, n] : traffic) {
    mix_str(ranker);
    mix_int(static_cast<std::uint64_t>(n));
  }
  for (const auto& [key, ranking] : table.entries()) {
    mix_str(key.first);
    mix_str(key.second);
    for (const auto& d : ranking) mix_str(d);
  }
  return h;
}

inline WeightIndex compute_weights(const RankingTable& table, const TrafficMap& traffic, int M) {
  if (M < 2) throw ValidationError("compute_weights: M must be >= 2");
  for (const auto& [ranker, n] : traffic) {
    if (n < 0) throw ValidationError("compute_weights: negative traffic for ranker " + ranker);
  }
  WeightIndex index;
  index.M = M;
  index.provenance = weights_provenance(table, traffic, M);
  for (const auto& [key, ranking] : table.entries()) {
    auto it = traffic.find(key.second);
    const double n = it == traffic.end() ? 0.0 : static_cast<double>(it->second);
    if (n <= 0.0) continue;
    const std::size_t lim = std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(M));
    for (std::size_t i = 0; i < lim; ++i) {
      auto& entry = index.weights[{key.first, ranking[i]}];
      const int pos = static_cast<int>(i) + 1;
      bool found = false;
      for (auto& [p, w] : entry) {
        if (p == pos) {
          w += n;
          found = true;
          break;
        }
      }
      if (!found) entry.emplace_back(pos, n);
    }
  }
  for (auto& [_, entry] : index.weights) {
    std::sort(entry.begin(), entry.end());
  }
  return index;
}

/// Explicit membership of every interventional set, keyed by unordered rank
/// pair (k < k'). Membership is symmetric by construction.
struct InterventionalSets {
  int M = 0;
  std::map<std::pair<int, int>, std::vector<std::pair<std::string, std::string>>> members;

  const std::vector<std::pair<std::string, std::string>>& at(int k, int kp) const {
    static const std::vector<std::pair<std::string, std::string>> kEmpty;
    auto it = members.find(std::minmax(k, kp));
    return it == members.end() ? kEmpty : it->second;
  }

  long long size(int k, int kp) const { return static_cast<long long>(at(k, kp).size()); }
};

namespace interventions_detail {

/// Positions (<= M) a document occupies across all rankers of one query.
inline std::map<std::string, std::vector<int>> positions_by_doc(
    const std::vector<const std::vector<std::string>*>& rankings, int M) {
  std::map<std::string, std::vector<int>> positions;
  for (const auto* ranking : rankings) {
    const std::size_t lim = std::min<std::size_t>(ranking->size(), static_cast<std::size_t>(M));
    for (std::size_t i = 0; i < lim; ++i) {
      auto& ps = positions[(*ranking)[i]];
      const int pos = static_cast<int>(i) + 1;
      if (std::find(ps.begin(), ps.end(), pos) == ps.end()) ps.push_back(pos);
    }
  }
  for (auto& [_, ps] : positions) std::sort(ps.begin(), ps.end());
  return positions;
}

inline std::map<std::string, std::vector<const std::vector<std::string>*>> rankings_by_query(
    const RankingTable& table) {
  std::map<std::string, std::vector<const std::vector<std::string>*>> by_query;
  for (const auto& [key, ranking] : table.entries()) by_query[key.first].push_back(&ranking);
  return by_query;
}

}  // namespace interventions_detail

inline InterventionalSets build_interventional_sets(const RankingTable& table, int M) {
  if (M < 2) throw ValidationError("build_interventional_sets: M must be >= 2");
  InterventionalSets sets;
  sets.M = M;
  for (const auto& [query, rankings] : interventions_detail::rankings_by_query(table)) {
    const auto positions = interventions_detail::positions_by_doc(rankings, M);
    for (const auto& [doc, ps] : positions) {
      for (std::size_t a = 0; a < ps.size(); ++a) {
        for (std::size_t b = a + 1; b < ps.size(); ++b) {
          sets.members[{ps[a], ps[b]}].emplace_back(query, doc);
        }
      }
    }
  }
  return sets;
}

/// Weighted click rates c_hat[k][k'] and skip rates notc_hat[k][k'] over the
/// interventional sets, plus the raw set sizes. c_hat.at(k, kp) is the rate
/// observed at position k restricted to S_{k,k'}; 0/0 is defined as 0.
struct InterventionalStats {
  int M = 0;
  PairGrid<double> c_hat;
  PairGrid<double> notc_hat;
  PairGrid<long long> set_size;

  InterventionalStats() = default;
  explicit InterventionalStats(int m) : M(m), c_hat(m), notc_hat(m), set_size(m) {}

  double mass_at(int k, int kp) const { return c_hat.at(k, kp) + notc_hat.at(k, kp); }

  bool pair_has_data(int k, int kp) const {
    return set_size.at(k, kp) > 0 && (mass_at(k, kp) > 0.0 || mass_at(kp, k) > 0.0);
  }

  bool empty() const {
    for (int k = 1; k <= M; ++k) {
      for (int kp = k + 1; kp <= M; ++kp) {
        if (pair_has_data(k, kp)) return false;
      }
    }
    return true;
  }

  void validate() const {
    for (int k = 1; k <= M; ++k) {
      for (int kp = 1; kp <= M; ++kp) {
        if (k == kp) continue;
        if (set_size.at(k, kp) != set_size.at(kp, k)) {
          throw DataError("interventional stats: set sizes not symmetric at (" + std::to_string(k) + "," +
                          std::to_string(kp) + ")");
        }
        if (c_hat.at(k, kp) < 0.0 || notc_hat.at(k, kp) < 0.0) {
          throw DataError("interventional stats: negative rate at (" + std::to_string(k) + "," +
                          std::to_string(kp) + ")");
        }
        if (set_size.at(k, kp) == 0 && (c_hat.at(k, kp) != 0.0 || notc_hat.at(k, kp) != 0.0)) {
          throw DataError("interventional stats: nonzero rate on empty set at (" + std::to_string(k) + "," +
                          std::to_string(kp) + ")");
        }
      }
    }
  }
};

namespace interventions_detail {

/// Precomputed per-(query, ranker) view of the displayed prefix: for each
/// slot, the inverse weight and the partner positions of its interventional
/// pairs. Shared by build_stats and the bootstrap engine.
struct SlotInfo {
  int pos = 0;
  double inv_w = 0.0;
  std::uint32_t pair_begin = 0;
  std::uint32_t pair_end = 0;
};

struct GroupInfo {
  std::uint32_t slot_begin = 0;
  std::uint32_t slot_end = 0;
  int displayed = 0;
};

struct HarvestIndex {
  int M = 0;
  std::vector<GroupInfo> groups;
  std::vector<SlotInfo> slots;
  std::vector<int> pair_targets;
  std::unordered_map<std::string, std::uint32_t> group_of;  // "query\x1franker"
  PairGrid<long long> set_size;

  static std::string key(const std::string& query, const std::string& ranker) {
    std::string s;
    s.reserve(query.size() + ranker.size() + 1);
    s += query;
    s += '\x1f';
    s += ranker;
    return s;
  }
};

inline HarvestIndex build_harvest_index(const RankingTable& table, const WeightIndex& weights, int M) {
  HarvestIndex index;
  index.M = M;
  index.set_size = PairGrid<long long>(M);
  const auto by_query = rankings_by_query(table);
  std::map<std::string, std::map<std::string, std::vector<int>>> positions_of_query;
  for (const auto& [query, rankings] : by_query) {
    auto positions = positions_by_doc(rankings, M);
    for (const auto& [doc, ps] : positions) {
      for (std::size_t a = 0; a < ps.size(); ++a) {
        for (std::size_t b = a + 1; b < ps.size(); ++b) {
          ++index.set_size.at(ps[a], ps[b]);
          ++index.set_size.at(ps[b], ps[a]);
        }
      }
    }
    positions_of_query[query] = std::move(positions);
  }
  for (const auto& [key, ranking] : table.entries()) {
    GroupInfo g;
    g.slot_begin = static_cast<std::uint32_t>(index.slots.size());
    g.displayed = static_cast<int>(std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(M)));
    const auto& positions = positions_of_query.at(key.first);
    for (int pos = 1; pos <= g.displayed; ++pos) {
      const std::string& doc = ranking[static_cast<std::size_t>(pos - 1)];
      SlotInfo slot;
      slot.pos = pos;
      slot.pair_begin = static_cast<std::uint32_t>(index.pair_targets.size());
      const auto& ps = positions.at(doc);
      for (int other : ps) {
        if (other != pos) index.pair_targets.push_back(other);
      }
      slot.pair_end = static_cast<std::uint32_t>(index.pair_targets.size());
      const double w = weights.at(key.first, doc, pos);
      slot.inv_w = w > 0.0 ? 1.0 / w : 0.0;  // 0/0 := 0
      index.slots.push_back(slot);
    }
    g.slot_end = static_cast<std::uint32_t>(index.slots.size());
    index.groups.emplace_back(g);
    index.group_of.emplace(HarvestIndex::key(key.first, key.second),
                           static_cast<std::uint32_t>(index.groups.size() - 1));
  }
  return index;
}

}  // namespace interventions_detail

/// Folds the impression log into weighted click/skip rates per interventional
/// pair. Pure function of its inputs; with jobs > 1 the log is split into
/// contiguous chunks whose partial sums are merged in chunk order, so results
/// agree across worker counts to floating-point merge tolerance (1e-9
/// relative).
inline InterventionalStats build_stats(const ImpressionLog& log, const RankingTable& table,
                                       const WeightIndex& weights, int M, int jobs = 1) {
  if (M < 2) throw ValidationError("build_stats: M must be >= 2");
  if (weights.M != M) {
    throw DataError("build_stats: weights were computed for M=" + std::to_string(weights.M) +
                    ", requested M=" + std::to_string(M));
  }
  if (weights.provenance != weights_provenance(table, log.traffic, M)) {
    throw DataError("build_stats: weights provenance mismatch: weights must be computed from the same "
                    "ranking table and traffic counts as the log");
  }
  const auto index = interventions_detail::build_harvest_index(table, weights, M);

  const std::size_t n = log.impressions.size();
  const std::size_t chunks = jobs <= 1 ? 1 : std::min<std::size_t>(static_cast<std::size_t>(jobs), std::max<std::size_t>(n, 1));
  std::vector<PairGrid<double>> partial_c(chunks, PairGrid<double>(M));
  std::vector<PairGrid<double>> partial_nc(chunks, PairGrid<double>(M));

  parallel_for(chunks, static_cast<int>(chunks), [&](std::size_t chunk) {
    const std::size_t begin = n * chunk / chunks;
    const std::size_t end = n * (chunk + 1) / chunks;
    auto& c = partial_c[chunk];
    auto& nc = partial_nc[chunk];
    std::string key;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& imp = log.impressions[i];
      key.assign(imp.query);
      key += '\x1f';
      key += imp.ranker;
      auto it = index.group_of.find(key);
      if (it == index.group_of.end()) {
        throw DataError("build_stats: impression references (query=" + imp.query + ", ranker=" + imp.ranker +
                        ") with no ranking table entry");
      }
      const auto& g = index.groups[it->second];
      auto click_it = imp.clicks.begin();
      for (std::uint32_t s = g.slot_begin; s < g.slot_end; ++s) {
        const auto& slot = index.slots[s];
        while (click_it != imp.clicks.end() && click_it->pos < slot.pos) ++click_it;
        const bool clicked = click_it != imp.clicks.end() && click_it->pos == slot.pos;
        if (slot.pair_begin == slot.pair_end) continue;
        auto& grid = clicked ? c : nc;
        for (std::uint32_t t = slot.pair_begin; t < slot.pair_end; ++t) {
          grid(slot.pos, index.pair_targets[t]) += slot.inv_w;
        }
      }
    }
  });

  InterventionalStats stats(M);
  stats.set_size = index.set_size;
  for (std::size_t chunk = 0; chunk < chunks; ++chunk) {
    for (int k = 1; k <= M; ++k) {
      for (int kp = 1; kp <= M; ++kp) {
        if (k == kp) continue;
        stats.c_hat(k, kp) += partial_c[chunk](k, kp);
        stats.notc_hat(k, kp) += partial_nc[chunk](k, kp);
      }
    }
  }
  return stats;
}

/// Stats matrix file: a header line {"M": M} followed by one record per
/// ordered pair: {"k":k, "k_prime":k', "c_hat":.., "notc_hat":.., "set_size":..}.
inline void write_stats(const InterventionalStats& stats, const std::filesystem::path& path) {
  auto out = logdata_detail::open_output(path);
  nlohmann::ordered_json header;
  header["M"] = stats.M;
  out << header.dump() << '\n';
  for (int k = 1; k <= stats.M; ++k) {
    for (int kp = 1; kp <= stats.M; ++kp) {
      if (k == kp) continue;
      nlohmann::ordered_json j;
      j["k"] = k;
      j["k_prime"] = kp;
      j["c_hat"] = stats.c_hat.at(k, kp);
      j["notc_hat"] = stats.notc_hat.at(k, kp);
      j["set_size"] = stats.set_size.at(k, kp);
      out << j.dump() << '\n';
    }
  }
}

inline InterventionalStats load_stats(const std::filesystem::path& path) {
  auto in = logdata_detail::open_input(path);
  std::string line;
  long long lineno = 0;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty stats file");
  ++lineno;
  const auto header = logdata_detail::parse_line(line, path, lineno);
  const int M = logdata_detail::field<int>(header, "M", path, lineno);
  if (M < 2) throw ParseError(path.string() + ": header M must be >= 2");
  InterventionalStats stats(M);
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = logdata_detail::parse_line(line, path, lineno);
    const int k = logdata_detail::field<int>(j, "k", path, lineno);
    const int kp = logdata_detail::field<int>(j, "k_prime", path, lineno);
    if (k < 1 || k > M || kp < 1 || kp > M || k == kp) {
      throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": bad rank pair");
    }
    stats.c_hat.at(k, kp) = logdata_detail::field<double>(j, "c_hat", path, lineno);
    stats.notc_hat.at(k, kp) = logdata_detail::field<double>(j, "notc_hat", path, lineno);
    stats.set_size.at(k, kp) = logdata_detail::field<long long>(j, "set_size", path, lineno);
  }
  stats.validate();
  return stats;
}

}  // namespace posbias
