#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "posbias/posbias.hpp"
#include "support.hpp"

using namespace posbias;
using testsupport::TempDir;

namespace {

RankingTable swap_table() {
  RankingTable table;
  table.add("q1", "f1", {"a", "b"});
  table.add("q1", "f2", {"b", "a"});
  return table;
}

}  // namespace

TEST_CASE("compute_weights applies the traffic-weighted definition") {
  RankingTable table;
  table.add("q1", "f1", {"x", "d", "y", "z"});   // d at rank 2 under f1
  table.add("q1", "f2", {"x", "y", "d", "z"});   // d at rank 3 under f2
  const TrafficMap traffic{{"f1", 100}, {"f2", 300}};
  const auto weights = compute_weights(table, traffic, 4);
  CHECK(weights.at("q1", "d", 2) == doctest::Approx(100));
  CHECK(weights.at("q1", "d", 3) == doctest::Approx(300));
  CHECK(weights.at("q1", "d", 1) == doctest::Approx(0));
}

TEST_CASE("compute_weights single ranker") {
  RankingTable table;
  table.add("q1", "f1", {"d", "x"});
  const auto weights = compute_weights(table, {{"f1", 50}}, 2);
  CHECK(weights.at("q1", "d", 1) == doctest::Approx(50));
  CHECK(weights.at("q1", "d", 2) == doctest::Approx(0));
}

TEST_CASE("compute_weights sums over rankers at the same position") {
  RankingTable table;
  table.add("q1", "f1", {"x", "y", "z", "d"});
  table.add("q1", "f2", {"y", "x", "z", "d"});
  const auto weights = compute_weights(table, {{"f1", 10}, {"f2", 10}}, 4);
  CHECK(weights.at("q1", "d", 4) == doctest::Approx(20));
}

TEST_CASE("compute_weights rejects M < 2") {
  CHECK_THROWS_AS(compute_weights(RankingTable{}, {}, 1), ValidationError);
}

TEST_CASE("interventional sets from a two-document swap") {
  const auto sets = build_interventional_sets(swap_table(), 2);
  CHECK(sets.size(1, 2) == 2);
  CHECK(sets.size(2, 1) == 2);
  const auto& members = sets.at(1, 2);
  CHECK(std::find(members.begin(), members.end(), std::pair<std::string, std::string>{"q1", "a"}) != members.end());
  CHECK(std::find(members.begin(), members.end(), std::pair<std::string, std::string>{"q1", "b"}) != members.end());
}

TEST_CASE("identical rankers produce no interventions") {
  RankingTable table;
  table.add("q1", "f1", {"a", "b"});
  table.add("q1", "f2", {"a", "b"});
  const auto sets = build_interventional_sets(table, 2);
  CHECK(sets.members.empty());
}

TEST_CASE("interventional sets of a three-document rotation") {
  RankingTable table;
  table.add("q1", "f1", {"a", "b", "c"});
  table.add("q1", "f2", {"c", "a", "b"});
  const auto sets = build_interventional_sets(table, 3);
  CHECK(sets.size(1, 2) == 1);  // a: rank 1 under f1, rank 2 under f2
  CHECK(sets.size(2, 3) == 1);  // b
  CHECK(sets.size(1, 3) == 1);  // c
  CHECK(sets.at(1, 2)[0] == std::pair<std::string, std::string>{"q1", "a"});
  CHECK(sets.at(2, 3)[0] == std::pair<std::string, std::string>{"q1", "b"});
  CHECK(sets.at(1, 3)[0] == std::pair<std::string, std::string>{"q1", "c"});
}

TEST_CASE("build_stats matches the hand-computed two-impression example") {
  const auto table = swap_table();
  ImpressionLog log = testsupport::make_log({
      testsupport::impression("q1", "f1", {Click{"a", 1}}),
      testsupport::impression("q1", "f2"),
  });
  const auto weights = compute_weights(table, log.traffic, 2);
  const auto stats = build_stats(log, table, weights, 2);
  CHECK(stats.c_hat.at(1, 2) == doctest::Approx(1.0));
  CHECK(stats.c_hat.at(2, 1) == doctest::Approx(0.0));
  CHECK(stats.notc_hat.at(1, 2) == doctest::Approx(1.0));
  CHECK(stats.notc_hat.at(2, 1) == doctest::Approx(2.0));
  CHECK(stats.set_size.at(1, 2) == 2);
  stats.validate();
}

TEST_CASE("build_stats on a click-free log") {
  const auto table = swap_table();
  ImpressionLog log = testsupport::make_log({
      testsupport::impression("q1", "f1"),
      testsupport::impression("q1", "f2"),
  });
  const auto weights = compute_weights(table, log.traffic, 2);
  const auto stats = build_stats(log, table, weights, 2);
  CHECK(stats.c_hat.at(1, 2) == 0.0);
  CHECK(stats.c_hat.at(2, 1) == 0.0);
  CHECK(stats.notc_hat.at(1, 2) > 0.0);
  CHECK(stats.notc_hat.at(2, 1) > 0.0);
}

TEST_CASE("replicating the whole log leaves stats unchanged") {
  SimConfig cfg;
  cfg.num_queries = 40;
  cfg.candidates_per_query = 12;
  cfg.M = 5;
  cfg.traffic = {{"f1", 400}, {"f2", 600}};
  cfg.seed = 7;
  const auto world = generate_world(cfg);
  const auto log = simulate_clicks(world, cfg);
  const auto weights = compute_weights(world.rankings, log.traffic, cfg.M);
  const auto stats = build_stats(log, world.rankings, weights, cfg.M);

  ImpressionLog doubled = log;
  doubled.impressions.insert(doubled.impressions.end(), log.impressions.begin(), log.impressions.end());
  doubled.recount_traffic();
  const auto weights2 = compute_weights(world.rankings, doubled.traffic, cfg.M);
  const auto stats2 = build_stats(doubled, world.rankings, weights2, cfg.M);

  for (int k = 1; k <= cfg.M; ++k) {
    for (int kp = 1; kp <= cfg.M; ++kp) {
      if (k == kp) continue;
      CHECK(stats2.c_hat.at(k, kp) == doctest::Approx(stats.c_hat.at(k, kp)).epsilon(1e-12));
      CHECK(stats2.notc_hat.at(k, kp) == doctest::Approx(stats.notc_hat.at(k, kp)).epsilon(1e-12));
      CHECK(stats2.set_size.at(k, kp) == stats.set_size.at(k, kp));
    }
  }
}

TEST_CASE("set sizes are symmetric on simulated worlds") {
  SimConfig cfg;
  cfg.num_queries = 60;
  cfg.candidates_per_query = 15;
  cfg.M = 6;
  cfg.traffic = {{"f1", 100}, {"f2", 100}, {"f3", 100}};
  cfg.seed = 11;
  const auto world = generate_world(cfg);
  const auto weights = compute_weights(world.rankings, cfg.traffic, cfg.M);
  const auto log = simulate_clicks(world, cfg);
  const auto weights_log = compute_weights(world.rankings, log.traffic, cfg.M);
  const auto stats = build_stats(log, world.rankings, weights_log, cfg.M);
  (void)weights;
  for (int k = 1; k <= cfg.M; ++k) {
    for (int kp = k + 1; kp <= cfg.M; ++kp) {
      CHECK(stats.set_size.at(k, kp) == stats.set_size.at(kp, k));
    }
  }
  const auto sets = build_interventional_sets(world.rankings, cfg.M);
  for (int k = 1; k <= cfg.M; ++k) {
    for (int kp = k + 1; kp <= cfg.M; ++kp) {
      CHECK(stats.set_size.at(k, kp) == sets.size(k, kp));
    }
  }
}

TEST_CASE("build_stats is invariant to the worker count within tolerance") {
  SimConfig cfg;
  cfg.num_queries = 50;
  cfg.candidates_per_query = 12;
  cfg.M = 5;
  cfg.traffic = {{"f1", 1500}, {"f2", 1500}};
  cfg.seed = 3;
  const auto world = generate_world(cfg);
  const auto log = simulate_clicks(world, cfg);
  const auto weights = compute_weights(world.rankings, log.traffic, cfg.M);
  const auto s1 = build_stats(log, world.rankings, weights, cfg.M, 1);
  const auto s2 = build_stats(log, world.rankings, weights, cfg.M, 2);
  const auto s7 = build_stats(log, world.rankings, weights, cfg.M, 7);
  for (int k = 1; k <= cfg.M; ++k) {
    for (int kp = 1; kp <= cfg.M; ++kp) {
      if (k == kp) continue;
      for (const auto* other : {&s2, &s7}) {
        const double a = s1.c_hat.at(k, kp);
        const double b = other->c_hat.at(k, kp);
        CHECK(std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)));
        const double na = s1.notc_hat.at(k, kp);
        const double nb = other->notc_hat.at(k, kp);
        CHECK(std::abs(na - nb) <= 1e-9 * std::max(1.0, std::abs(na)));
      }
    }
  }
}

TEST_CASE("build_stats rejects weights built from different inputs") {
  const auto table = swap_table();
  ImpressionLog log = testsupport::make_log({
      testsupport::impression("q1", "f1"),
      testsupport::impression("q1", "f2"),
  });
  // wrong traffic
  const auto wrong = compute_weights(table, {{"f1", 5}, {"f2", 5}}, 2);
  CHECK_THROWS_WITH_AS(build_stats(log, table, wrong, 2), doctest::Contains("provenance"), DataError);
  // wrong M
  const auto weights3 = compute_weights(table, log.traffic, 3);
  CHECK_THROWS_AS(build_stats(log, table, weights3, 2), DataError);
}

TEST_CASE("stats round-trip through the matrix file") {
  TempDir tmp("stats_roundtrip");
  SimConfig cfg;
  cfg.num_queries = 30;
  cfg.candidates_per_query = 12;
  cfg.M = 4;
  cfg.traffic = {{"f1", 300}, {"f2", 300}};
  cfg.seed = 19;
  const auto world = generate_world(cfg);
  const auto log = simulate_clicks(world, cfg);
  const auto weights = compute_weights(world.rankings, log.traffic, cfg.M);
  const auto stats = build_stats(log, world.rankings, weights, cfg.M);
  const auto path = tmp.path("stats.jsonl");
  write_stats(stats, path);
  const auto loaded = load_stats(path);
  CHECK(loaded.M == stats.M);
  for (int k = 1; k <= cfg.M; ++k) {
    for (int kp = 1; kp <= cfg.M; ++kp) {
      if (k == kp) continue;
      CHECK(loaded.c_hat.at(k, kp) == stats.c_hat.at(k, kp));
      CHECK(loaded.notc_hat.at(k, kp) == stats.notc_hat.at(k, kp));
      CHECK(loaded.set_size.at(k, kp) == stats.set_size.at(k, kp));
    }
  }
}

TEST_CASE("weighted click and skip rates match their expectations (Monte-Carlo)") {
  // Fixed world; 20 independent click logs. For every pair with enough
  // support, the replicate mean of c_hat must sit within 3 standard errors of
  // p_k * r_{k,k'}, and of notc_hat within 3 SE of N_{k,k'} - p_k * r_{k,k'},
  // with r and N enumerated from the world's ground truth.
  SimConfig cfg;
  cfg.num_queries = 600;
  cfg.candidates_per_query = 10;
  cfg.M = 5;
  cfg.relevant_fraction = 0.3;
  cfg.ranker_noise = 0.4;
  cfg.traffic = {{"f1", 4000}, {"f2", 6000}};
  cfg.seed = 20240601;
  const auto world = generate_world(cfg);
  const auto truth = testsupport::truth_mats(world, cfg.M, cfg.eps_minus);

  const int replicates = 20;
  std::vector<std::vector<double>> c_samples(
      static_cast<std::size_t>(cfg.M * cfg.M));
  auto c_at = [&](int k, int kp) -> std::vector<double>& {
    return c_samples[static_cast<std::size_t>((k - 1) * cfg.M + (kp - 1))];
  };
  std::vector<std::vector<double>> nc_samples(static_cast<std::size_t>(cfg.M * cfg.M));
  auto nc_at = [&](int k, int kp) -> std::vector<double>& {
    return nc_samples[static_cast<std::size_t>((k - 1) * cfg.M + (kp - 1))];
  };
  for (int rep = 0; rep < replicates; ++rep) {
    SimConfig rep_cfg = cfg;
    rep_cfg.seed = derive_seed(cfg.seed, "prop-check", static_cast<std::uint64_t>(rep));
    const auto log = simulate_clicks(world, rep_cfg);
    const auto weights = compute_weights(world.rankings, log.traffic, cfg.M);
    const auto stats = build_stats(log, world.rankings, weights, cfg.M);
    for (int k = 1; k <= cfg.M; ++k) {
      for (int kp = 1; kp <= cfg.M; ++kp) {
        if (k == kp) continue;
        c_at(k, kp).push_back(stats.c_hat.at(k, kp));
        nc_at(k, kp).push_back(stats.notc_hat.at(k, kp));
      }
    }
  }
  int checked = 0;
  for (int k = 1; k <= cfg.M; ++k) {
    for (int kp = 1; kp <= cfg.M; ++kp) {
      if (k == kp || truth.set_size.at(k, kp) < 100) continue;
      ++checked;
      const double p_k = std::pow(1.0 / static_cast<double>(k), cfg.eta);
      const double expected_c = p_k * truth.r.at(k, kp);
      const double expected_nc = truth.n.at(k, kp) - expected_c;
      const auto mc = testsupport::mean_stderr(c_at(k, kp));
      const auto mnc = testsupport::mean_stderr(nc_at(k, kp));
      INFO("pair (", k, ",", kp, "): mean c ", mc.mean, " expected ", expected_c, " se ", mc.stderr_);
      CHECK(std::abs(mc.mean - expected_c) <= 3.0 * mc.stderr_ + 1e-12);
      INFO("pair (", k, ",", kp, "): mean nc ", mnc.mean, " expected ", expected_nc, " se ", mnc.stderr_);
      CHECK(std::abs(mnc.mean - expected_nc) <= 3.0 * mnc.stderr_ + 1e-12);
    }
  }
  CHECK(checked > 0);

  // Balance: exposure mass at either side of a pair estimates the same N.
  for (int k = 1; k <= cfg.M; ++k) {
    for (int kp = k + 1; kp <= cfg.M; ++kp) {
      if (truth.set_size.at(k, kp) < 100) continue;
      std::vector<double> side_k, side_kp;
      for (int rep = 0; rep < replicates; ++rep) {
        side_k.push_back(c_at(k, kp)[static_cast<std::size_t>(rep)] + nc_at(k, kp)[static_cast<std::size_t>(rep)]);
        side_kp.push_back(c_at(kp, k)[static_cast<std::size_t>(rep)] + nc_at(kp, k)[static_cast<std::size_t>(rep)]);
      }
      const auto mk = testsupport::mean_stderr(side_k);
      const auto mkp = testsupport::mean_stderr(side_kp);
      CHECK(std::abs(mk.mean - truth.n.at(k, kp)) <= 3.0 * mk.stderr_ + 1e-12);
      CHECK(std::abs(mkp.mean - truth.n.at(k, kp)) <= 3.0 * mkp.stderr_ + 1e-12);
    }
  }
}
