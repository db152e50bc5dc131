// Acceptance suite: end-to-end checks of the estimation pipeline on the
// synthetic testbed. Each criterion prints one PASS/FAIL line; the binary
// exits nonzero if any fails. POSBIAS_JOBS bounds worker threads for the
// replicate loops (results are independent of it).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "posbias/cli.hpp"
#include "posbias/posbias.hpp"
#include "support.hpp"

using namespace posbias;

namespace {

constexpr std::uint64_t kSeed = 42;

int acceptance_jobs() {
  if (const char* env = std::getenv("POSBIAS_JOBS")) {
    const int jobs = std::atoi(env);
    if (jobs >= 1) return jobs;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void report(const std::string& id, bool ok, const std::string& detail) {
  std::printf("[%s] %s  %s\n", id.c_str(), ok ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

std::string fmt(double v) { return evaluation_detail::fmt_double(v); }

/// Runs the CLI with its chatter captured, so criterion lines stay readable.
int quiet_cli(std::vector<std::string> args) {
  std::ostringstream sink_out, sink_err;
  auto* old_out = std::cout.rdbuf(sink_out.rdbuf());
  auto* old_err = std::cerr.rdbuf(sink_err.rdbuf());
  int code = -1;
  try {
    code = run_cli(std::move(args));
  } catch (...) {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    throw;
  }
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  return code;
}

/// Two-ranker world at the toolkit defaults (eta = 1, eps_minus = 0.1,
/// moderate ranker similarity).
SimConfig world_config(long long per_ranker) {
  SimConfig cfg;
  cfg.traffic = {{"f1", per_ranker}, {"f2", per_ranker}};
  return cfg;
}

struct PipelineRun {
  double mse_allpairs = -1.0;
  double mse_chain = -1.0;
  bool chain_defined = true;
  double seconds = 0.0;
};

PipelineRun run_pipeline(const SimConfig& cfg) {
  PipelineRun out;
  const auto t0 = std::chrono::steady_clock::now();
  const auto world = generate_world(cfg);
  const auto log = simulate_clicks(world, cfg);
  const auto weights = compute_weights(world.rankings, log.traffic, cfg.M);
  const auto stats = build_stats(log, world.rankings, weights, cfg.M);
  const auto truth = true_curve(cfg);
  out.mse_allpairs = inverse_propensity_mse(all_pairs_estimate(stats).curve, truth, cfg.M);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  try {
    out.mse_chain = inverse_propensity_mse(adjacent_chain(stats), truth, cfg.M);
  } catch (const Error&) {
    out.chain_defined = false;
  }
  return out;
}

double summary_mean(const SweepResult& result, double value, const std::string& method) {
  for (const auto& row : result.summary) {
    if (row.method == method && row.value == value) {
      REQUIRE(row.defined_runs == row.runs);
      return row.mean_mse;
    }
  }
  REQUIRE(false);
  return 0.0;
}

}  // namespace

TEST_CASE("criterion 1: AllPairs recovers the true curve at 100k impressions per ranker") {
  const int seeds = 6;
  std::vector<PipelineRun> runs(seeds);
  parallel_for(seeds, acceptance_jobs(), [&](std::size_t i) {
    SimConfig cfg = world_config(100000);
    cfg.seed = derive_seed(kSeed, "acceptance-c1", i);
    runs[i] = run_pipeline(cfg);
  });
  double worst_mse = 0.0, worst_sec = 0.0;
  for (const auto& run : runs) {
    worst_mse = std::max(worst_mse, run.mse_allpairs);
    worst_sec = std::max(worst_sec, run.seconds);
  }
  const bool ok = worst_mse < 0.05 && worst_sec < 60.0;
  report("C1", ok,
         "inverse-propensity MSE < 0.05 per seed (worst " + fmt(worst_mse) + "), runtime < 60s (worst " +
             fmt(worst_sec) + "s)");
  CHECK(ok);
}

TEST_CASE("criterion 2: AllPairs needs an order of magnitude less data than AdjacentChain") {
  SimConfig base = world_config(100000);
  base.seed = derive_seed(kSeed, "acceptance-c2", 0);
  const std::vector<SweepPoint> grid{{20000, "20k"}, {100000, "100k"}, {500000, "500k"}};
  const auto result =
      run_sweep(SweepAxis::DataSize, grid, base, {"all-pairs", "adjacent-chain"}, 6, acceptance_jobs());
  bool ordered = true;
  std::string detail;
  for (const auto& point : grid) {
    const double ap = summary_mean(result, point.value, "all-pairs");
    const double ch = summary_mean(result, point.value, "adjacent-chain");
    ordered = ordered && ap < ch;
    detail += point.label + ": all-pairs " + fmt(ap) + " vs chain " + fmt(ch) + "; ";
  }
  const double ap20 = summary_mean(result, 20000, "all-pairs");
  const double ch100 = summary_mean(result, 100000, "adjacent-chain");
  const bool cross = ap20 < ch100;
  report("C2", ordered && cross,
         detail + "cross: all-pairs@20k " + fmt(ap20) + " < chain@100k " + fmt(ch100) +
             (cross ? "" : " VIOLATED"));
  CHECK(ordered);
  CHECK(cross);
}

TEST_CASE("criterion 3: AllPairs is stable across click-noise levels") {
  // Fixed data size 200k per ranker; per-run MSE is heavy-tailed, so the
  // grid means are taken over 32 runs each.
  SimConfig base = world_config(200000);
  base.seed = derive_seed(kSeed, "acceptance-c3", 0);
  const std::vector<SweepPoint> grid{{0.0, "0"}, {0.1, "0.1"}, {0.2, "0.2"}, {0.3, "0.3"}};
  const auto result = run_sweep(SweepAxis::ClickNoise, grid, base, {"all-pairs"}, 32, acceptance_jobs());
  double lo = 1e300, hi = 0.0;
  std::string detail;
  for (const auto& point : grid) {
    const double mean = summary_mean(result, point.value, "all-pairs");
    lo = std::min(lo, mean);
    hi = std::max(hi, mean);
    detail += "eps=" + point.label + ": " + fmt(mean) + "; ";
  }
  const bool ok = hi < 2.0 * lo;
  report("C3", ok, detail + "max/min = " + fmt(hi / lo) + " (< 2 required)");
  CHECK(ok);
}

TEST_CASE("criterion 4: AllPairs is robust to traffic imbalance") {
  // 400k total impressions reassigned by the split ratio; 48 runs per grid
  // point because the two extreme splits are the statistically hardest and
  // their means converge slowly.
  SimConfig base = world_config(200000);
  base.seed = derive_seed(kSeed, "acceptance-c4", 0);
  const std::vector<SweepPoint> grid{{0.2, "1:5"}, {0.5, "1:2"}, {1.0, "1:1"}, {2.0, "2:1"}, {5.0, "5:1"}};
  const auto result =
      run_sweep(SweepAxis::TrafficImbalance, grid, base, {"all-pairs"}, 48, acceptance_jobs());
  double lo = 1e300, hi = 0.0;
  std::string detail;
  for (const auto& point : grid) {
    const double mean = summary_mean(result, point.value, "all-pairs");
    lo = std::min(lo, mean);
    hi = std::max(hi, mean);
    detail += point.label + ": " + fmt(mean) + "; ";
  }
  const bool ok = hi < 2.0 * lo;
  report("C4", ok, detail + "max/min = " + fmt(hi / lo) + " (< 2 required)");
  CHECK(ok);
}

TEST_CASE("criterion 5: error grows with bias severity and AllPairs stays ahead") {
  SimConfig base = world_config(100000);
  base.seed = derive_seed(kSeed, "acceptance-c5", 0);
  const std::vector<SweepPoint> grid{{0.5, "0.5"}, {1.0, "1"}, {1.5, "1.5"}, {2.0, "2"}};
  const auto result =
      run_sweep(SweepAxis::BiasSeverity, grid, base, {"all-pairs", "adjacent-chain"}, 6, acceptance_jobs());
  bool increasing = true, ordered = true;
  double prev_ap = -1.0, prev_ch = -1.0;
  std::string detail;
  for (const auto& point : grid) {
    const double ap = summary_mean(result, point.value, "all-pairs");
    const double ch = summary_mean(result, point.value, "adjacent-chain");
    increasing = increasing && ap > prev_ap && ch > prev_ch;
    ordered = ordered && ap <= ch;
    prev_ap = ap;
    prev_ch = ch;
    detail += "eta=" + point.label + ": " + fmt(ap) + "/" + fmt(ch) + "; ";
  }
  report("C5", increasing && ordered, detail + "(all-pairs/chain, both increasing, all-pairs <= chain)");
  CHECK(increasing);
  CHECK(ordered);
}

TEST_CASE("criterion 6: weighted click and skip rates match their expectations") {
  SimConfig cfg;
  cfg.num_queries = 700;
  cfg.traffic = {{"f1", 25000}, {"f2", 25000}};
  cfg.seed = derive_seed(kSeed, "acceptance-c6-world", 0);
  const auto world = generate_world(cfg);
  const auto truth = testsupport::truth_mats(world, cfg.M, cfg.eps_minus);

  const int replicates = 20;
  std::vector<InterventionalStats> stats(replicates);
  parallel_for(replicates, acceptance_jobs(), [&](std::size_t rep) {
    SimConfig rc = cfg;
    rc.seed = derive_seed(kSeed, "acceptance-c6", rep);
    const auto log = simulate_clicks(world, rc);
    const auto weights = compute_weights(world.rankings, log.traffic, cfg.M);
    stats[rep] = build_stats(log, world.rankings, weights, cfg.M);
  });

  int checked = 0;
  double worst_z = 0.0;
  for (int k = 1; k <= cfg.M; ++k) {
    for (int kp = 1; kp <= cfg.M; ++kp) {
      if (k == kp || truth.set_size.at(k, kp) < 100) continue;
      ++checked;
      std::vector<double> c_vals, nc_vals;
      for (const auto& s : stats) {
        c_vals.push_back(s.c_hat.at(k, kp));
        nc_vals.push_back(s.notc_hat.at(k, kp));
      }
      const double p_k = std::pow(1.0 / static_cast<double>(k), cfg.eta);
      const double expected_c = p_k * truth.r.at(k, kp);
      const double expected_nc = truth.n.at(k, kp) - expected_c;
      const auto mc = testsupport::mean_stderr(c_vals);
      const auto mnc = testsupport::mean_stderr(nc_vals);
      worst_z = std::max(worst_z, std::abs(mc.mean - expected_c) / mc.stderr_);
      worst_z = std::max(worst_z, std::abs(mnc.mean - expected_nc) / mnc.stderr_);
    }
  }
  const bool ok = checked >= 20 && worst_z <= 3.0;
  report("C6", ok,
         std::to_string(checked) + " pairs with |S| >= 100 checked over 20 replicates; worst |z| = " +
             fmt(worst_z) + " (<= 3 required)");
  CHECK(ok);
}

TEST_CASE("criterion 7: the swap experiment recovers 1/k") {
  SimConfig cfg = world_config(100000);  // 200k assigned queries
  cfg.seed = derive_seed(kSeed, "acceptance-c7", 0);
  const auto world = generate_world(cfg);
  bool ok = true;
  std::string detail;
  for (int k : {2, 5, 10}) {
    const auto log = simulate_swap_experiment(world, cfg, k);
    const auto curve = swap_gold_estimate(log);
    long long kept_n = 0, kept_c = 0, swap_n = 0, swap_c = 0;
    for (const auto& e : log.entries) {
      (e.swapped ? swap_n : kept_n) += 1;
      (e.swapped ? swap_c : kept_c) += e.clicked ? 1 : 0;
    }
    const double c1 = static_cast<double>(kept_c) / static_cast<double>(kept_n);
    const double ck = static_cast<double>(swap_c) / static_cast<double>(swap_n);
    const double ratio = ck / c1;
    const double se = ratio * std::sqrt((1.0 - ck) / (ck * static_cast<double>(swap_n)) +
                                        (1.0 - c1) / (c1 * static_cast<double>(kept_n)));
    const double z = std::abs(curve.at(k) - 1.0 / static_cast<double>(k)) / se;
    ok = ok && z <= 3.0;
    detail += "k=" + std::to_string(k) + ": " + fmt(curve.at(k)) + " (|z|=" + fmt(z) + "); ";
  }
  report("C7", ok, detail + "within 3 standard errors of 1/k");
  CHECK(ok);
}

TEST_CASE("criterion 8: AllPairs matches the single-pair closed form") {
  InterventionalStats stats(2);
  stats.c_hat.at(1, 2) = 50.0;
  stats.notc_hat.at(1, 2) = 50.0;
  stats.c_hat.at(2, 1) = 25.0;
  stats.notc_hat.at(2, 1) = 75.0;
  stats.set_size.at(1, 2) = stats.set_size.at(2, 1) = 100;
  const auto solution = all_pairs_estimate(stats);
  // closed-form oracle: p_hat_k * r_hat = c / (c + nc) at each position
  const double expected = (25.0 / 100.0) / (50.0 / 100.0);
  const double err = std::abs(solution.curve.at(2) - expected);
  const bool ok = err < 1e-4;
  report("C8", ok, "single-pair estimate " + fmt(solution.curve.at(2)) + " vs rate-ratio MLE " +
                       fmt(expected) + ", |diff| = " + fmt(err) + " (< 1e-4)");
  CHECK(ok);
}

TEST_CASE("criterion 9: analytic expected counts are solved exactly by all three estimators") {
  const int M = 10;
  const double eta = 1.0;
  InterventionalStats stats(M);
  const double n = 100.0;
  for (int k = 1; k <= M; ++k) {
    for (int kp = 1; kp <= M; ++kp) {
      if (k == kp) continue;
      // an arbitrary symmetric mean-relevance surface inside (0, 1)
      const double rbar = 0.15 + 0.08 * static_cast<double>((k + kp) % 8);
      const double p_k = std::pow(1.0 / static_cast<double>(k), eta);
      stats.c_hat.at(k, kp) = p_k * rbar * n;
      stats.notc_hat.at(k, kp) = n - p_k * rbar * n;
      stats.set_size.at(k, kp) = 1000;
    }
  }
  const auto allpairs = all_pairs_estimate(stats).curve;
  const auto pivot = pivot_one(stats);
  const auto chain = adjacent_chain(stats);
  double worst = 0.0;
  for (int k = 1; k <= M; ++k) {
    const double expected = std::pow(1.0 / static_cast<double>(k), eta);
    worst = std::max({worst, std::abs(allpairs.at(k) - expected), std::abs(pivot.at(k) - expected),
                      std::abs(chain.at(k) - expected)});
  }
  const bool ok = worst < 1e-3;
  report("C9", ok, "worst |error| over PivotOne, AdjacentChain, AllPairs at M=10: " + fmt(worst) +
                       " (< 1e-3)");
  CHECK(ok);
}

TEST_CASE("criterion 10: bootstrap intervals achieve nominal coverage") {
  const int replications = 200;
  const int B = 1000;
  SimConfig base = world_config(50000);
  const auto truth = true_curve(base);
  std::vector<std::vector<char>> covered(replications);
  parallel_for(replications, acceptance_jobs(), [&](std::size_t rep) {
    SimConfig cfg = base;
    cfg.seed = derive_seed(kSeed, "acceptance-c10", rep);
    const auto world = generate_world(cfg);
    const auto log = simulate_clicks(world, cfg);
    const auto result =
        bootstrap_ci(log, world.rankings, "all-pairs", B, 0.95, derive_seed(cfg.seed, "ci", rep), cfg.M);
    auto& row = covered[rep];
    row.assign(static_cast<std::size_t>(cfg.M) + 1, 0);
    for (int k = 2; k <= cfg.M; ++k) {
      auto it = result.intervals.find(k);
      if (it == result.intervals.end()) continue;
      if (it->second.lo <= truth.at(k) && truth.at(k) <= it->second.hi) row[static_cast<std::size_t>(k)] = 1;
    }
  });
  // Rank 1 is the normalization anchor (pinned to 1 by construction), so
  // coverage is assessed on the estimated ranks 2..M.
  bool ok = true;
  std::string detail = "per-rank coverage: ";
  for (int k = 2; k <= base.M; ++k) {
    int hits = 0;
    for (const auto& row : covered) hits += row[static_cast<std::size_t>(k)];
    const double coverage = static_cast<double>(hits) / static_cast<double>(replications);
    ok = ok && coverage >= 0.88 && coverage <= 0.99;
    detail += fmt(coverage) + " ";
  }
  report("C10", ok, detail + "(each within [0.88, 0.99] over 200 replications, B=1000)");
  CHECK(ok);
}

TEST_CASE("criterion 11: fixed seeds give byte-identical artifacts; stats are jobs-invariant") {
  testsupport::TempDir tmp_a("acceptance_det_a"), tmp_b("acceptance_det_b");
  auto simulate_into = [&](const testsupport::TempDir& tmp) {
    const std::vector<std::string> args{"simulate",
                                        "--queries", "200",
                                        "--impressions", "8000",
                                        "--seed", "11",
                                        "--swap-rank", "3",
                                        "--rankings-out", tmp.path("rankings.jsonl").string(),
                                        "--impressions-out", tmp.path("impressions.jsonl").string(),
                                        "--truth-out", tmp.path("truth.jsonl").string(),
                                        "--swap-out", tmp.path("swap.jsonl").string()};
    REQUIRE(quiet_cli(args) == 0);
    REQUIRE(quiet_cli({"build-stats",
                     "--rankings", tmp.path("rankings.jsonl").string(),
                     "--impressions", tmp.path("impressions.jsonl").string(),
                     "--out", tmp.path("stats.jsonl").string()}) == 0);
    REQUIRE(quiet_cli({"estimate",
                     "--method", "all-pairs",
                     "--stats", tmp.path("stats.jsonl").string(),
                     "--out", tmp.path("curve.jsonl").string()}) == 0);
    REQUIRE(quiet_cli({"bootstrap",
                     "--rankings", tmp.path("rankings.jsonl").string(),
                     "--impressions", tmp.path("impressions.jsonl").string(),
                     "--B", "50",
                     "--seed", "5",
                     "--out", tmp.path("intervals.jsonl").string()}) == 0);
    REQUIRE(quiet_cli({"sweep",
                     "--axis", "click-noise",
                     "--grid", "0,0.2",
                     "--methods", "all-pairs",
                     "--seeds", "2",
                     "--queries", "100",
                     "--impressions", "2000",
                     "--seed", "9",
                     "--out", tmp.path("sweep.csv").string(),
                     "--summary-out", tmp.path("sweep_summary.csv").string()}) == 0);
  };
  simulate_into(tmp_a);
  simulate_into(tmp_b);
  bool identical = true;
  for (const char* name : {"rankings.jsonl", "impressions.jsonl", "truth.jsonl", "swap.jsonl", "stats.jsonl",
                           "curve.jsonl", "intervals.jsonl", "sweep_summary.csv"}) {
    const bool same = testsupport::read_file(tmp_a.path(name)) == testsupport::read_file(tmp_b.path(name));
    identical = identical && same;
    if (!same) std::printf("  [C11] %s differs between reruns\n", name);
  }

  // jobs-invariance of the harvested statistics within 1e-9 relative
  REQUIRE(quiet_cli({"build-stats",
                   "--rankings", tmp_a.path("rankings.jsonl").string(),
                   "--impressions", tmp_a.path("impressions.jsonl").string(),
                   "--jobs", "3",
                   "--out", tmp_a.path("stats_j3.jsonl").string()}) == 0);
  const auto s1 = load_stats(tmp_a.path("stats.jsonl"));
  const auto s3 = load_stats(tmp_a.path("stats_j3.jsonl"));
  double worst_rel = 0.0;
  for (int k = 1; k <= s1.M; ++k) {
    for (int kp = 1; kp <= s1.M; ++kp) {
      if (k == kp) continue;
      const double dc = std::abs(s1.c_hat.at(k, kp) - s3.c_hat.at(k, kp)) /
                        std::max(1.0, std::abs(s1.c_hat.at(k, kp)));
      const double dn = std::abs(s1.notc_hat.at(k, kp) - s3.notc_hat.at(k, kp)) /
                        std::max(1.0, std::abs(s1.notc_hat.at(k, kp)));
      worst_rel = std::max({worst_rel, dc, dn});
    }
  }
  const bool jobs_ok = worst_rel <= 1e-9;
  report("C11", identical && jobs_ok,
         std::string("rerun artifacts byte-identical: ") + (identical ? "yes" : "NO") +
             "; stats jobs-invariance worst relative diff " + fmt(worst_rel) + " (<= 1e-9)");
  CHECK(identical);
  CHECK(jobs_ok);
}
