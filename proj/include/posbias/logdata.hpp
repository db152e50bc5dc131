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
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "posbias/rng.hpp"
#include "posbias/types.hpp"

namespace posbias {

using TrafficMap = std::map<std::string, long long>;

/// Per (query, ranker): the deterministic ranking of the candidate set,
/// position 1 first. Rankers are treated as deterministic functions of the
/// query id, so one ranking is stored per key.
class RankingTable {
 public:
  using Key = std::pair<std::string, std::string>;  // (query_id, ranker_id)

  const std::map<Key, std::vector<std::string>>& entries() const { return entries_; }

  bool has(const std::string& query, const std::string& ranker) const {
    return entries_.count({query, ranker}) != 0;
  }

  const std::vector<std::string>& ranking(const std::string& query, const std::string& ranker) const {
    auto it = entries_.find({query, ranker});
    if (it == entries_.end()) {
      throw DataError("ranking table: no entry for (query=" + query + ", ranker=" + ranker + ")");
    }
    return it->second;
  }

  /// 1-based rank of doc in the stored ranking, or 0 if absent.
  int rank_of(const std::string& query, const std::string& ranker, const std::string& doc) const {
    auto it = entries_.find({query, ranker});
    if (it == entries_.end()) return 0;
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      if (it->second[i] == doc) return static_cast<int>(i) + 1;
    }
    return 0;
  }

  /// Adds one ranking; doc ids must be distinct and the key unused.
  void add(std::string query, std::string ranker, std::vector<std::string> ranking) {
    std::unordered_set<std::string> seen;
    for (const auto& d : ranking) {
      if (!seen.insert(d).second) {
        throw ParseError("duplicate document in ranking: doc=" + d + " (query=" + query + ", ranker=" + ranker +
                         ")");
      }
    }
    auto key = Key{std::move(query), std::move(ranker)};
    if (entries_.count(key)) {
      throw ParseError("duplicate (query, ranker) key: (query=" + key.first + ", ranker=" + key.second + ")");
    }
    entries_.emplace(std::move(key), std::move(ranking));
  }

  std::set<std::string> queries() const {
    std::set<std::string> out;
    for (const auto& [key, _] : entries_) out.insert(key.first);
    return out;
  }

  std::set<std::string> rankers() const {
    std::set<std::string> out;
    for (const auto& [key, _] : entries_) out.insert(key.second);
    return out;
  }

  bool operator==(const RankingTable& o) const { return entries_ == o.entries_; }

 private:
  std::map<Key, std::vector<std::string>> entries_;
};

struct Click {
  std::string doc;
  int pos = 0;  // 1-based displayed position

  bool operator==(const Click& o) const { return doc == o.doc && pos == o.pos; }
};

struct Impression {
  std::string query;
  std::string ranker;
  std::vector<Click> clicks;  // sorted by position

  bool operator==(const Impression& o) const {
    return query == o.query && ranker == o.ranker && clicks == o.clicks;
  }
};

/// Logged sessions plus per-ranker traffic counts n_i. traffic[r] always
/// equals the number of impressions recorded under ranker r.
struct ImpressionLog {
  std::vector<Impression> impressions;
  TrafficMap traffic;

  long long total_impressions() const { return static_cast<long long>(impressions.size()); }

  long long total_clicks() const {
    long long c = 0;
    for (const auto& imp : impressions) c += static_cast<long long>(imp.clicks.size());
    return c;
  }

  void recount_traffic() {
    traffic.clear();
    for (const auto& imp : impressions) ++traffic[imp.ranker];
  }
};

/// One arm-labeled session of an explicit swap experiment between position 1
/// and position swap_rank. `clicked` refers to the focal document, i.e. the
/// one originally ranked first, wherever it was displayed.
struct SwapImpression {
  std::string query;
  std::string ranker;
  int swap_rank = 0;
  bool swapped = false;
  bool clicked = false;
};

struct SwapLog {
  std::vector<SwapImpression> entries;
};

namespace logdata_detail {

inline nlohmann::json parse_line(const std::string& line, const std::filesystem::path& path, long long lineno) {
  try {
    return nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": malformed record: " + e.what());
  }
}

template <typename T>
T field(const nlohmann::json& j, const char* name, const std::filesystem::path& path, long long lineno) {
  if (!j.contains(name)) {
    throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": missing field \"" + name + "\"");
  }
  try {
    return j.at(name).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": bad field \"" + name +
                     "\": " + e.what());
  }
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open file: " + path.string());
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write file: " + path.string());
  return out;
}

}  // namespace logdata_detail

/// Reads a line-delimited rankings file. One record per (query, ranker):
///   {"query": <string>, "ranker": <string>, "ranking": [<doc_id>, ...]}
inline RankingTable parse_rankings(const std::filesystem::path& path) {
  auto in = logdata_detail::open_input(path);
  RankingTable table;
  std::string line;
  long long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = logdata_detail::parse_line(line, path, lineno);
    auto query = logdata_detail::field<std::string>(j, "query", path, lineno);
    auto ranker = logdata_detail::field<std::string>(j, "ranker", path, lineno);
    auto ranking = logdata_detail::field<std::vector<std::string>>(j, "ranking", path, lineno);
    try {
      table.add(std::move(query), std::move(ranker), std::move(ranking));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return table;
}

inline void write_rankings(const RankingTable& table, const std::filesystem::path& path) {
  auto out = logdata_detail::open_output(path);
  for (const auto& [key, ranking] : table.entries()) {
    nlohmann::ordered_json j;
    j["query"] = key.first;
    j["ranker"] = key.second;
    j["ranking"] = ranking;
    out << j.dump() << '\n';
  }
}

/// Reads a line-delimited impressions file and cross-checks every click
/// against the ranking table. One record per impression:
///   {"query": <string>, "ranker": <string>,
///    "clicks": [{"doc": <string>, "pos": <int>}, ...]}
inline ImpressionLog parse_impressions(const std::filesystem::path& path, const RankingTable& table) {
  auto in = logdata_detail::open_input(path);
  ImpressionLog log;
  std::string line;
  long long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = logdata_detail::parse_line(line, path, lineno);
    Impression imp;
    imp.query = logdata_detail::field<std::string>(j, "query", path, lineno);
    imp.ranker = logdata_detail::field<std::string>(j, "ranker", path, lineno);
    if (!table.has(imp.query, imp.ranker)) {
      throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": unknown (query, ranker): (" +
                       imp.query + ", " + imp.ranker + ") has no ranking table entry");
    }
    if (!j.contains("clicks")) {
      throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": missing field \"clicks\"");
    }
    std::unordered_set<std::string> clicked_docs;
    for (const auto& cj : j.at("clicks")) {
      Click c;
      c.doc = logdata_detail::field<std::string>(cj, "doc", path, lineno);
      c.pos = logdata_detail::field<int>(cj, "pos", path, lineno);
      if (c.pos < 1) {
        throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": click position must be >= 1");
      }
      if (!clicked_docs.insert(c.doc).second) {
        throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": duplicate clicked doc " + c.doc);
      }
      const int rank = table.rank_of(imp.query, imp.ranker, c.doc);
      if (rank != c.pos) {
        throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": click/ranking mismatch: doc " +
                         c.doc + " clicked at position " + std::to_string(c.pos) + " but ranked " +
                         (rank == 0 ? "nowhere" : "at " + std::to_string(rank)) + " by " + imp.ranker);
      }
      imp.clicks.push_back(std::move(c));
    }
    std::sort(imp.clicks.begin(), imp.clicks.end(),
              [](const Click& a, const Click& b) { return a.pos < b.pos; });
    ++log.traffic[imp.ranker];
    log.impressions.push_back(std::move(imp));
  }
  return log;
}

inline void write_impressions(const ImpressionLog& log, const std::filesystem::path& path) {
  auto out = logdata_detail::open_output(path);
  for (const auto& imp : log.impressions) {
    nlohmann::ordered_json j;
    j["query"] = imp.query;
    j["ranker"] = imp.ranker;
    auto arr = nlohmann::ordered_json::array();
    for (const auto& c : imp.clicks) {
      nlohmann::ordered_json cj;
      cj["doc"] = c.doc;
      cj["pos"] = c.pos;
      arr.push_back(std::move(cj));
    }
    j["clicks"] = std::move(arr);
    out << j.dump() << '\n';
  }
}

/// Swap-experiment log file, one record per assigned query:
///   {"query":.., "ranker":.., "swap_rank":k, "arm":"kept"|"swapped",
///    "clicked":0|1}
inline SwapLog parse_swap_log(const std::filesystem::path& path) {
  auto in = logdata_detail::open_input(path);
  SwapLog log;
  std::string line;
  long long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = logdata_detail::parse_line(line, path, lineno);
    SwapImpression e;
    e.query = logdata_detail::field<std::string>(j, "query", path, lineno);
    e.ranker = logdata_detail::field<std::string>(j, "ranker", path, lineno);
    e.swap_rank = logdata_detail::field<int>(j, "swap_rank", path, lineno);
    const auto arm = logdata_detail::field<std::string>(j, "arm", path, lineno);
    if (arm != "kept" && arm != "swapped") {
      throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": arm must be \"kept\" or \"swapped\"");
    }
    e.swapped = (arm == "swapped");
    e.clicked = logdata_detail::field<int>(j, "clicked", path, lineno) != 0;
    if (e.swap_rank < 1) {
      throw ParseError(path.string() + ": line " + std::to_string(lineno) + ": swap_rank must be >= 1");
    }
    log.entries.push_back(std::move(e));
  }
  return log;
}

inline void write_swap_log(const SwapLog& log, const std::filesystem::path& path) {
  auto out = logdata_detail::open_output(path);
  for (const auto& e : log.entries) {
    nlohmann::ordered_json j;
    j["query"] = e.query;
    j["ranker"] = e.ranker;
    j["swap_rank"] = e.swap_rank;
    j["arm"] = e.swapped ? "swapped" : "kept";
    j["clicked"] = e.clicked ? 1 : 0;
    out << j.dump() << '\n';
  }
}

/// Advisory diagnostics for the randomization condition: the query
/// distribution must look the same under every ranker. The divergence score
/// is Cramer's V of the ranker x query contingency table (0 = identical
/// distributions, 1 = disjoint supports). Queries are hash-bucketed when
/// there are too many distinct ids for a stable chi-square table.
struct IndependenceReport {
  std::map<std::string, long long> impressions_per_ranker;
  std::map<std::string, std::map<std::string, long long>> query_histograms;  // ranker -> query -> count
  double chi_square = 0.0;
  long long dof = 0;
  double divergence = 0.0;  // Cramer's V
  double warn_threshold = 0.1;
  double chi_square_99 = 0.0;  // 99th percentile of chi-square(dof)
  bool passes_1pct = true;
  bool flagged_warning = false;
  bool flagged_maximal = false;
  std::vector<std::string> notes;
};

inline IndependenceReport validate_independence_report(const ImpressionLog& log,
                                                       const RankingTable* table = nullptr) {
  if (log.impressions.empty()) throw ValidationError("independence report: empty log");
  IndependenceReport rep;
  for (const auto& imp : log.impressions) {
    ++rep.impressions_per_ranker[imp.ranker];
    ++rep.query_histograms[imp.ranker][imp.query];
  }
  for (const auto& [ranker, n] : log.traffic) {
    if (n == 0) rep.notes.push_back("ranker " + ranker + " has zero impressions");
  }
  if (table != nullptr) {
    for (const auto& ranker : table->rankers()) {
      if (!rep.impressions_per_ranker.count(ranker)) {
        rep.notes.push_back("ranker " + ranker + " appears in the ranking table but has zero impressions");
      }
    }
  }

  // Column space: distinct query ids, hash-bucketed beyond 512 columns.
  std::set<std::string> distinct;
  for (const auto& imp : log.impressions) distinct.insert(imp.query);
  const bool bucketed = distinct.size() > 512;
  const std::size_t cols = bucketed ? 512 : distinct.size();
  std::map<std::string, std::size_t> col_of;
  if (!bucketed) {
    std::size_t i = 0;
    for (const auto& q : distinct) col_of[q] = i++;
  }
  auto column = [&](const std::string& q) -> std::size_t {
    if (!bucketed) return col_of[q];
    return static_cast<std::size_t>(rng_detail::fnv1a(q) % cols);
  };

  const std::size_t rows = rep.impressions_per_ranker.size();
  std::vector<std::vector<long long>> counts(rows, std::vector<long long>(cols, 0));
  std::map<std::string, std::size_t> row_of;
  {
    std::size_t i = 0;
    for (const auto& [ranker, _] : rep.impressions_per_ranker) row_of[ranker] = i++;
  }
  for (const auto& imp : log.impressions) ++counts[row_of[imp.ranker]][column(imp.query)];

  const double n = static_cast<double>(log.impressions.size());
  std::vector<double> row_sum(rows, 0.0), col_sum(cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      row_sum[r] += static_cast<double>(counts[r][c]);
      col_sum[c] += static_cast<double>(counts[r][c]);
    }
  }
  std::size_t nonzero_cols = 0;
  for (std::size_t c = 0; c < cols; ++c) {
    if (col_sum[c] > 0) ++nonzero_cols;
  }
  double chi2 = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_sum[r] == 0) continue;
    for (std::size_t c = 0; c < cols; ++c) {
      if (col_sum[c] == 0) continue;
      const double expected = row_sum[r] * col_sum[c] / n;
      const double d = static_cast<double>(counts[r][c]) - expected;
      chi2 += d * d / expected;
    }
  }
  rep.chi_square = chi2;
  const long long eff_rows = static_cast<long long>(rows);
  const long long eff_cols = static_cast<long long>(nonzero_cols);
  rep.dof = std::max<long long>(0, (eff_rows - 1)) * std::max<long long>(0, (eff_cols - 1));
  const long long min_dim = std::min(eff_rows, eff_cols) - 1;
  if (min_dim >= 1) {
    rep.divergence = std::sqrt(chi2 / (n * static_cast<double>(min_dim)));
  } else {
    rep.divergence = 0.0;
    rep.notes.push_back("fewer than two rankers or queries: divergence not meaningful");
  }
  if (rep.dof >= 1) {
    // Wilson-Hilferty approximation to the chi-square 99th percentile.
    const double d = static_cast<double>(rep.dof);
    const double z99 = 2.3263478740408408;
    const double t = 1.0 - 2.0 / (9.0 * d) + z99 * std::sqrt(2.0 / (9.0 * d));
    rep.chi_square_99 = d * t * t * t;
    rep.passes_1pct = chi2 <= rep.chi_square_99;
  }
  rep.flagged_warning = rep.divergence > rep.warn_threshold;
  rep.flagged_maximal = rep.divergence >= 0.999;
  if (rep.flagged_maximal) {
    rep.notes.push_back("maximal divergence: rankers see disjoint query distributions");
  }
  return rep;
}

/// Checks that within a query all rankers agree on the candidate set,
/// restricted to documents any ranker places in the top M (rankers may
/// disagree on the tail). Returns one note per violation; empty means
/// consistent.
inline std::vector<std::string> check_candidate_consistency(const RankingTable& table, int M) {
  std::vector<std::string> notes;
  std::map<std::string, std::vector<const RankingTable::Key*>> by_query;
  for (const auto& [key, _] : table.entries()) by_query[key.first].push_back(&key);
  for (const auto& [query, keys] : by_query) {
    if (keys.size() < 2) continue;
    std::set<std::string> top;
    for (const auto* key : keys) {
      const auto& ranking = table.entries().at(*key);
      const std::size_t lim = std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(M));
      for (std::size_t i = 0; i < lim; ++i) top.insert(ranking[i]);
    }
    for (const auto* key : keys) {
      const auto& ranking = table.entries().at(*key);
      std::unordered_set<std::string> have(ranking.begin(), ranking.end());
      for (const auto& doc : top) {
        if (!have.count(doc)) {
          notes.push_back("query " + query + ": doc " + doc + " is in some ranker's top " + std::to_string(M) +
                          " but absent from ranker " + key->second + "'s candidate set");
        }
      }
    }
  }
  return notes;
}

}  // namespace posbias
