#pragma once

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "posbias/posbias.hpp"

namespace testsupport {

/// Unique scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    dir_ = std::filesystem::temp_directory_path() /
           ("posbias_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  std::filesystem::path path(const std::string& name) const { return dir_ / name; }
  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

inline void write_file(const std::filesystem::path& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << contents;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline posbias::Impression impression(std::string query, std::string ranker,
                                      std::vector<posbias::Click> clicks = {}) {
  posbias::Impression imp;
  imp.query = std::move(query);
  imp.ranker = std::move(ranker);
  imp.clicks = std::move(clicks);
  return imp;
}

inline posbias::ImpressionLog make_log(std::vector<posbias::Impression> impressions) {
  posbias::ImpressionLog log;
  log.impressions = std::move(impressions);
  log.recount_traffic();
  return log;
}

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline MeanStderr mean_stderr(const std::vector<double>& values) {
  MeanStderr out;
  const double n = static_cast<double>(values.size());
  for (double v : values) out.mean += v;
  out.mean /= n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.stderr_ = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return out;
}

/// Ground-truth per-query expectations for a synthetic world, computed by
/// independent enumeration of rank pairs:
///   r[k][k'] = E_q[ sum_d 1[(q,d) in S_{k,k'}] rel_eff(q,d) ]
///   N[k][k'] = E_q[ sum_d 1[(q,d) in S_{k,k'}] ]
/// with q uniform over the world's query pool. Click noise acts as an
/// alternative relevance vector in the PBM, so rel_eff is the effective
/// click relevance rel + eps_minus * (1 - rel).
struct TruthMats {
  posbias::PairGrid<double> r;
  posbias::PairGrid<double> n;
  posbias::PairGrid<long long> set_size;
};

inline TruthMats truth_mats(const posbias::SyntheticWorld& world, int M, double eps_minus) {
  TruthMats out;
  out.r = posbias::PairGrid<double>(M);
  out.n = posbias::PairGrid<double>(M);
  out.set_size = posbias::PairGrid<long long>(M);
  const double q_count = static_cast<double>(world.queries.size());
  std::vector<std::string> ranker_ids;
  for (const auto& [ranker, _] : world.cfg.traffic) ranker_ids.push_back(ranker);
  for (const auto& q : world.queries) {
    std::map<std::string, std::vector<int>> positions;
    for (const auto& ranker : ranker_ids) {
      const auto& ranking = world.rankings.ranking(q.id, ranker);
      const std::size_t lim = std::min<std::size_t>(ranking.size(), static_cast<std::size_t>(M));
      for (std::size_t i = 0; i < lim; ++i) {
        auto& ps = positions[ranking[i]];
        const int pos = static_cast<int>(i) + 1;
        bool seen = false;
        for (int p : ps) seen = seen || p == pos;
        if (!seen) ps.push_back(pos);
      }
    }
    for (const auto& [doc, ps] : positions) {
      const double rel_eff = world.rel_of(q.id, doc) != 0 ? 1.0 : eps_minus;
      for (std::size_t a = 0; a < ps.size(); ++a) {
        for (std::size_t b = 0; b < ps.size(); ++b) {
          if (a == b) continue;
          out.r.at(ps[a], ps[b]) += rel_eff / q_count;
          out.n.at(ps[a], ps[b]) += 1.0 / q_count;
          out.set_size.at(ps[a], ps[b]) += 1;
        }
      }
    }
  }
  return out;
}

}  // namespace testsupport
