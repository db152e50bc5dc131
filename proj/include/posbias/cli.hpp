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
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "posbias/estimators.hpp"
#include "posbias/evaluation.hpp"
#include "posbias/interventions.hpp"
#include "posbias/logdata.hpp"
#include "posbias/simulator.hpp"
#include "posbias/types.hpp"

namespace posbias {
namespace cli_detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline TrafficMap parse_traffic(const std::string& spec) {
  TrafficMap traffic;
  for (const auto& part : split(spec, ',')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ValidationError("traffic must be name=count[,name=count...]");
    const std::string name = part.substr(0, eq);
    long long n = 0;
    try {
      n = std::stoll(part.substr(eq + 1));
    } catch (const std::exception&) {
      throw ValidationError("traffic count for " + name + " is not an integer");
    }
    if (traffic.count(name)) throw ValidationError("traffic names ranker " + name + " twice");
    traffic[name] = n;
  }
  if (traffic.empty()) throw ValidationError("traffic must name at least one ranker");
  return traffic;
}

inline std::vector<SweepPoint> parse_grid(const std::string& spec) {
  std::vector<SweepPoint> grid;
  for (const auto& tok : split(spec, ',')) {
    if (tok.empty()) continue;
    SweepPoint point;
    point.label = tok;
    const auto colon = tok.find(':');
    try {
      if (colon != std::string::npos) {
        const double a = std::stod(tok.substr(0, colon));
        const double b = std::stod(tok.substr(colon + 1));
        if (!(b > 0.0)) throw ValidationError("grid ratio denominator must be > 0");
        point.value = a / b;
      } else {
        point.value = std::stod(tok);
      }
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception&) {
      throw ValidationError("grid value \"" + tok + "\" is not numeric");
    }
    grid.push_back(std::move(point));
  }
  if (grid.empty()) throw ValidationError("empty grid");
  return grid;
}

inline std::string traffic_string(const TrafficMap& traffic) {
  std::string s;
  for (const auto& [ranker, n] : traffic) {
    if (!s.empty()) s += ',';
    s += ranker + ":" + std::to_string(n);
  }
  return s;
}

inline void echo(const std::string& key, const std::string& value) {
  std::cout << "config: " << key << "=" << value << "\n";
}

inline void echo_sim_config(const SimConfig& cfg) {
  echo("queries", std::to_string(cfg.num_queries));
  echo("candidates", std::to_string(cfg.candidates_per_query));
  echo("relevant-frac", evaluation_detail::fmt_double(cfg.relevant_fraction));
  echo("eta", evaluation_detail::fmt_double(cfg.eta));
  echo("eps-minus", evaluation_detail::fmt_double(cfg.eps_minus));
  echo("ranker-noise", evaluation_detail::fmt_double(cfg.ranker_noise));
  echo("traffic", traffic_string(cfg.traffic));
  echo("M", std::to_string(cfg.M));
  echo("swap-prob", evaluation_detail::fmt_double(cfg.swap_prob));
  echo("seed", std::to_string(cfg.seed));
}

inline void print_set_size_table(const InterventionalStats& stats, std::ostream& out) {
  out << "interventional set sizes |S_{k,k'}|:\n";
  out << std::setw(6) << "k'\\k";
  for (int k = 1; k < stats.M; ++k) out << std::setw(9) << k;
  out << "\n";
  for (int kp = 2; kp <= stats.M; ++kp) {
    out << std::setw(6) << kp;
    for (int k = 1; k < stats.M; ++k) {
      if (k < kp) {
        out << std::setw(9) << stats.set_size.at(k, kp);
      } else {
        out << std::setw(9) << "-";
      }
    }
    out << "\n";
  }
}

inline void print_curve(const PropensityCurve& curve, std::ostream& out) {
  out << "rank  propensity  inverse\n";
  for (int k = 1; k <= curve.M(); ++k) {
    if (curve.defined(k)) {
      out << std::setw(4) << k << "  " << std::setw(10) << evaluation_detail::fmt_double(curve.at(k)) << "  "
          << std::setw(10) << evaluation_detail::fmt_double(curve.inverse_at(k)) << "\n";
    } else {
      out << std::setw(4) << k << "  undefined: " << curve.note(k) << "\n";
    }
  }
}

struct SimFlags {
  long long queries = 1000;
  int candidates = 30;
  double relevant_frac = 0.4;
  double eta = 1.0;
  double eps_minus = 0.1;
  double ranker_noise = 0.5;
  int rankers = 2;
  long long impressions = 50000;
  std::string traffic_spec;
  int M = 10;
  double swap_prob = 0.5;
  std::uint64_t seed = 1;

  SimConfig to_config() const {
    SimConfig cfg;
    cfg.num_queries = queries;
    cfg.candidates_per_query = candidates;
    cfg.relevant_fraction = relevant_frac;
    cfg.eta = eta;
    cfg.eps_minus = eps_minus;
    cfg.ranker_noise = ranker_noise;
    cfg.M = M;
    cfg.swap_prob = swap_prob;
    cfg.seed = seed;
    if (!traffic_spec.empty()) {
      cfg.traffic = parse_traffic(traffic_spec);
    } else {
      if (rankers < 1) throw ValidationError("rankers must be >= 1");
      cfg.traffic.clear();
      for (int i = 1; i <= rankers; ++i) cfg.traffic["f" + std::to_string(i)] = impressions;
    }
    cfg.validate();
    return cfg;
  }

  void add_flags(CLI::App* cmd) {
    cmd->add_option("--queries", queries, "Number of distinct queries in the synthetic world");
    cmd->add_option("--candidates", candidates, "Candidate documents per query");
    cmd->add_option("--relevant-frac", relevant_frac, "Fraction of relevant documents, in (0,1)");
    cmd->add_option("--eta", eta, "Bias severity: propensities decay as (1/r)^eta");
    cmd->add_option("--eps-minus", eps_minus, "Click noise: irrelevant docs clicked with p_r * eps-minus");
    cmd->add_option("--ranker-noise", ranker_noise, "Ranker score perturbation scale (0 = identical rankers)");
    cmd->add_option("--rankers", rankers, "Number of rankers f1..fN");
    cmd->add_option("--impressions", impressions, "Impressions per ranker");
    cmd->add_option("--traffic", traffic_spec, "Explicit traffic, e.g. f1=10000,f2=50000 (overrides --rankers/--impressions)");
    cmd->add_option("-M,--top-m", M, "Number of top positions to estimate propensities for");
    cmd->add_option("--swap-prob", swap_prob, "Swap probability for swap experiments");
    cmd->add_option("--seed", seed, "Master seed; all randomness derives from it");
  }
};

struct OptFlags {
  int max_iters = 10000;
  double tol = 1e-9;
  bool n_weighted = false;

  OptimizerOptions to_options() const {
    OptimizerOptions opts;
    if (max_iters < 1) throw ValidationError("max-iters must be >= 1");
    if (!(tol > 0.0)) throw ValidationError("tol must be > 0");
    opts.max_iterations = max_iters;
    opts.tolerance = tol;
    opts.n_weighted = n_weighted;
    return opts;
  }

  void add_flags(CLI::App* cmd) {
    cmd->add_option("--max-iters", max_iters, "Optimizer iteration cap");
    cmd->add_option("--tol", tol, "Optimizer relative objective-change tolerance");
    cmd->add_flag("--n-weighted", n_weighted, "Weight each pair's objective terms by its raw set size");
  }
};

inline PropensityCurve load_truth_or_curve(const std::filesystem::path& path) {
  auto in = logdata_detail::open_input(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = logdata_detail::parse_line(line, path, 1);
    if (j.contains("p")) return load_truth_curve(path);
    if (j.contains("defined")) return load_curve(path);
    throw ParseError(path.string() + ": neither a truth file nor a curve file");
  }
  throw ParseError(path.string() + ": empty file");
}

}  // namespace cli_detail

inline int run_cli(std::vector<std::string> args) {
  CLI::App app{"posbias: position-bias propensity estimation from multi-ranker click logs"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_config("--config", "", "Read options from an INI-style key=value file");

  // ---- simulate ----
  auto* sim_cmd = app.add_subcommand("simulate", "Generate a synthetic world and PBM click logs");
  cli_detail::SimFlags sim_flags;
  sim_flags.add_flags(sim_cmd);
  std::string sim_rankings = "rankings.jsonl";
  std::string sim_impressions = "impressions.jsonl";
  std::string sim_truth = "truth.jsonl";
  std::string sim_swap_out = "swap_log.jsonl";
  int sim_swap_rank = 0;
  sim_cmd->add_option("--rankings-out", sim_rankings, "Output rankings file");
  sim_cmd->add_option("--impressions-out", sim_impressions, "Output impressions file");
  sim_cmd->add_option("--truth-out", sim_truth, "Output ground-truth file");
  sim_cmd->add_option("--swap-rank", sim_swap_rank, "Also run a Swap(1,k) experiment at this rank (0 = off)");
  sim_cmd->add_option("--swap-out", sim_swap_out, "Output swap-experiment log file");

  // ---- build-stats ----
  auto* stats_cmd = app.add_subcommand("build-stats", "Harvest interventional statistics from logs");
  std::string bs_rankings, bs_impressions;
  std::string bs_out = "stats.jsonl";
  int bs_M = 10;
  int bs_jobs = 1;
  stats_cmd->add_option("--rankings", bs_rankings, "Rankings file")->required();
  stats_cmd->add_option("--impressions", bs_impressions, "Impressions file")->required();
  stats_cmd->add_option("--out", bs_out, "Output stats file");
  stats_cmd->add_option("-M,--top-m", bs_M, "Top positions");
  stats_cmd->add_option("--jobs", bs_jobs, "Worker threads (results independent of this)");

  // ---- estimate ----
  auto* est_cmd = app.add_subcommand("estimate", "Estimate relative propensities");
  std::string est_method;
  std::string est_stats, est_rankings, est_impressions, est_swap_log;
  std::string est_out = "curve.jsonl";
  int est_M = 10;
  int est_jobs = 1;
  cli_detail::OptFlags est_opt;
  est_cmd->add_option("--method", est_method, "pivot-one | adjacent-chain | all-pairs | naive-ctr | swap-gold")
      ->required();
  est_cmd->add_option("--stats", est_stats, "Stats file (pivot-one/adjacent-chain/all-pairs)");
  est_cmd->add_option("--rankings", est_rankings, "Rankings file (with --impressions, builds stats on the fly)");
  est_cmd->add_option("--impressions", est_impressions, "Impressions file");
  est_cmd->add_option("--swap-log", est_swap_log, "Swap experiment log (swap-gold)");
  est_cmd->add_option("--out", est_out, "Output curve file");
  est_cmd->add_option("-M,--top-m", est_M, "Top positions");
  est_cmd->add_option("--jobs", est_jobs, "Worker threads");
  est_opt.add_flags(est_cmd);

  // ---- evaluate ----
  auto* eval_cmd = app.add_subcommand("evaluate", "Score an estimated curve against ground truth");
  std::string eval_curve, eval_truth;
  std::string eval_out = "evaluation.jsonl";
  int eval_M = 0;
  eval_cmd->add_option("--curve", eval_curve, "Estimated curve file")->required();
  eval_cmd->add_option("--truth", eval_truth, "Ground-truth file (or another curve file)")->required();
  eval_cmd->add_option("--out", eval_out, "Output report file");
  eval_cmd->add_option("-M,--top-m", eval_M, "Top positions to score (default: all ranks of the curve)");

  // ---- bootstrap ----
  auto* boot_cmd = app.add_subcommand("bootstrap", "Percentile bootstrap confidence intervals");
  std::string boot_rankings, boot_impressions;
  std::string boot_method = "all-pairs";
  std::string boot_out = "intervals.jsonl";
  int boot_B = 1000;
  double boot_level = 0.95;
  int boot_M = 10;
  std::uint64_t boot_seed = 1;
  cli_detail::OptFlags boot_opt;
  boot_cmd->add_option("--rankings", boot_rankings, "Rankings file")->required();
  boot_cmd->add_option("--impressions", boot_impressions, "Impressions file")->required();
  boot_cmd->add_option("--method", boot_method, "pivot-one | adjacent-chain | all-pairs | naive-ctr");
  boot_cmd->add_option("--B", boot_B, "Number of bootstrap resamples");
  boot_cmd->add_option("--level", boot_level, "Confidence level, e.g. 0.95");
  boot_cmd->add_option("-M,--top-m", boot_M, "Top positions");
  boot_cmd->add_option("--seed", boot_seed, "Resampling seed");
  boot_cmd->add_option("--out", boot_out, "Output intervals file");
  boot_opt.add_flags(boot_cmd);

  // ---- sweep ----
  auto* sweep_cmd = app.add_subcommand("sweep", "Robustness sweeps over simulation parameters");
  cli_detail::SimFlags sweep_flags;
  sweep_flags.add_flags(sweep_cmd);
  std::string sweep_axis, sweep_grid;
  std::string sweep_methods = "all-pairs,adjacent-chain";
  int sweep_seeds = 6;
  int sweep_jobs = 1;
  std::string sweep_out = "sweep_results.csv";
  std::string sweep_summary_out = "sweep_summary.csv";
  cli_detail::OptFlags sweep_opt;
  sweep_cmd
      ->add_option("--axis", sweep_axis,
                   "data-size | ranker-similarity | click-noise | bias-severity | traffic-imbalance")
      ->required();
  sweep_cmd->add_option("--grid", sweep_grid, "Comma-separated grid values (ratios like 1:5 for traffic-imbalance)")
      ->required();
  sweep_cmd->add_option("--methods", sweep_methods, "Comma-separated estimator list");
  sweep_cmd->add_option("--seeds", sweep_seeds, "Independent runs per grid point");
  sweep_cmd->add_option("--jobs", sweep_jobs, "Worker threads (results independent of this)");
  sweep_cmd->add_option("--out", sweep_out, "Per-run results CSV");
  sweep_cmd->add_option("--summary-out", sweep_summary_out, "Mean/sd summary CSV");
  sweep_opt.add_flags(sweep_cmd);

  std::vector<const char*> argv;
  argv.push_back("posbias");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (sim_cmd->parsed()) {
      const SimConfig cfg = sim_flags.to_config();
      cli_detail::echo_sim_config(cfg);
      if (sim_swap_rank != 0) cli_detail::echo("swap-rank", std::to_string(sim_swap_rank));
      const auto world = generate_world(cfg);
      write_rankings(world.rankings, sim_rankings);
      write_truth(world, sim_truth);
      const auto log = simulate_clicks(world, cfg);
      write_impressions(log, sim_impressions);
      std::cout << "wrote " << sim_rankings << " (" << world.rankings.entries().size() << " rankings), "
                << sim_impressions << " (" << log.total_impressions() << " impressions, " << log.total_clicks()
                << " clicks), " << sim_truth << "\n";
      std::cout << "same-rank fraction (top " << cfg.M
                << "): " << evaluation_detail::fmt_double(same_rank_fraction(world.rankings, cfg.M)) << "\n";
      if (sim_swap_rank != 0) {
        const auto swap_log = simulate_swap_experiment(world, cfg, sim_swap_rank);
        write_swap_log(swap_log, sim_swap_out);
        long long swapped = 0;
        for (const auto& e : swap_log.entries) swapped += e.swapped ? 1 : 0;
        std::cout << "wrote " << sim_swap_out << " (" << swap_log.entries.size() << " assigned queries, "
                  << swapped << " swapped)\n";
      }
      return 0;
    }

    if (stats_cmd->parsed()) {
      if (bs_M < 2) throw ValidationError("M must be >= 2");
      if (bs_jobs < 1) throw ValidationError("jobs must be >= 1");
      cli_detail::echo("rankings", bs_rankings);
      cli_detail::echo("impressions", bs_impressions);
      cli_detail::echo("M", std::to_string(bs_M));
      cli_detail::echo("jobs", std::to_string(bs_jobs));
      const auto table = parse_rankings(bs_rankings);
      const auto log = parse_impressions(bs_impressions, table);
      for (const auto& note : check_candidate_consistency(table, bs_M)) {
        std::cerr << "warning: " << note << "\n";
      }
      if (!log.impressions.empty()) {
        const auto rep = validate_independence_report(log, &table);
        std::cout << "independence diagnostic: divergence=" << evaluation_detail::fmt_double(rep.divergence)
                  << " (chi-square " << evaluation_detail::fmt_double(rep.chi_square) << ", dof " << rep.dof
                  << ")\n";
        if (rep.flagged_maximal) {
          std::cerr << "warning: rankers see disjoint query distributions; harvested interventions are "
                       "not randomized\n";
        } else if (rep.flagged_warning) {
          std::cerr << "warning: query distributions differ noticeably between rankers (divergence "
                    << evaluation_detail::fmt_double(rep.divergence) << " > "
                    << evaluation_detail::fmt_double(rep.warn_threshold) << ")\n";
        }
        for (const auto& note : rep.notes) std::cerr << "note: " << note << "\n";
      }
      const auto weights = compute_weights(table, log.traffic, bs_M);
      const auto stats = build_stats(log, table, weights, bs_M, bs_jobs);
      write_stats(stats, bs_out);
      cli_detail::print_set_size_table(stats, std::cout);
      std::cout << "wrote " << bs_out << " (" << log.total_impressions() << " impressions harvested)\n";
      return 0;
    }

    if (est_cmd->parsed()) {
      if (est_M < 2) throw ValidationError("M must be >= 2");
      if (est_jobs < 1) throw ValidationError("jobs must be >= 1");
      const OptimizerOptions opts = est_opt.to_options();
      cli_detail::echo("method", est_method);
      cli_detail::echo("M", std::to_string(est_M));
      cli_detail::echo("max-iters", std::to_string(opts.max_iterations));
      cli_detail::echo("tol", evaluation_detail::fmt_double(opts.tolerance));
      cli_detail::echo("n-weighted", opts.n_weighted ? "true" : "false");

      PropensityCurve curve;
      if (est_method == "swap-gold") {
        if (est_swap_log.empty()) throw ValidationError("method swap-gold requires --swap-log");
        const auto swap_log = parse_swap_log(est_swap_log);
        curve = swap_gold_estimate(swap_log);
      } else if (est_method == "naive-ctr") {
        if (est_rankings.empty() || est_impressions.empty()) {
          throw ValidationError("method naive-ctr requires --rankings and --impressions");
        }
        const auto table = parse_rankings(est_rankings);
        const auto log = parse_impressions(est_impressions, table);
        curve = naive_ctr_curve(log, table, est_M);
      } else if (est_method == "pivot-one" || est_method == "adjacent-chain" || est_method == "all-pairs") {
        InterventionalStats stats;
        if (!est_stats.empty()) {
          stats = load_stats(est_stats);
          if (stats.M != est_M) {
            std::cerr << "note: stats file was built with M=" << stats.M << "; using that\n";
          }
        } else {
          if (est_rankings.empty() || est_impressions.empty()) {
            throw ValidationError("stats-based methods require --stats or --rankings plus --impressions");
          }
          const auto table = parse_rankings(est_rankings);
          const auto log = parse_impressions(est_impressions, table);
          const auto weights = compute_weights(table, log.traffic, est_M);
          stats = build_stats(log, table, weights, est_M, est_jobs);
        }
        cli_detail::print_set_size_table(stats, std::cout);
        if (est_method == "all-pairs") {
          const auto solution = all_pairs_estimate(stats, opts);
          curve = solution.curve;
          std::cout << "all-pairs: objective=" << evaluation_detail::fmt_double(solution.objective_value)
                    << " iterations=" << solution.iterations
                    << " converged=" << (solution.converged ? "true" : "false") << "\n";
          if (!solution.converged) {
            std::cerr << "warning: optimizer hit the iteration cap before reaching tolerance\n";
          }
        } else if (est_method == "pivot-one") {
          curve = pivot_one(stats);
        } else {
          curve = adjacent_chain(stats);
        }
      } else {
        throw ValidationError("unknown method \"" + est_method +
                              "\" (expected pivot-one, adjacent-chain, all-pairs, naive-ctr or swap-gold)");
      }
      for (int k = 1; k <= curve.M(); ++k) {
        if (!curve.defined(k)) std::cerr << "warning: rank " << k << " undefined: " << curve.note(k) << "\n";
      }
      write_curve(curve, est_out);
      cli_detail::print_curve(curve, std::cout);
      std::cout << "wrote " << est_out << "\n";
      return 0;
    }

    if (eval_cmd->parsed()) {
      const auto est = load_curve(eval_curve);
      const auto truth = cli_detail::load_truth_or_curve(eval_truth);
      const int M = eval_M > 0 ? eval_M : est.M();
      cli_detail::echo("curve", eval_curve);
      cli_detail::echo("truth", eval_truth);
      cli_detail::echo("M", std::to_string(M));
      if (truth.M() < M || est.M() < M) {
        throw ValidationError("mismatched rank ranges: estimate has M=" + std::to_string(est.M()) +
                              ", truth has M=" + std::to_string(truth.M()) + ", scoring requires " +
                              std::to_string(M));
      }
      const double mse = inverse_propensity_mse(est, truth, M);
      auto out = logdata_detail::open_output(eval_out);
      nlohmann::ordered_json header;
      header["M"] = M;
      header["mse"] = mse;
      out << header.dump() << '\n';
      const auto en = est.normalized();
      const auto tn = truth.normalized();
      for (int k = 1; k <= M; ++k) {
        nlohmann::ordered_json j;
        j["rank"] = k;
        j["estimate"] = en.at(k);
        j["truth"] = tn.at(k);
        j["inverse_estimate"] = en.inverse_at(k);
        j["inverse_truth"] = tn.inverse_at(k);
        out << j.dump() << '\n';
      }
      std::cout << "inverse-propensity MSE: " << evaluation_detail::fmt_double(mse) << "\n";
      std::cout << "wrote " << eval_out << "\n";
      return 0;
    }

    if (boot_cmd->parsed()) {
      if (boot_M < 2) throw ValidationError("M must be >= 2");
      const OptimizerOptions opts = boot_opt.to_options();
      cli_detail::echo("method", boot_method);
      cli_detail::echo("B", std::to_string(boot_B));
      cli_detail::echo("level", evaluation_detail::fmt_double(boot_level));
      cli_detail::echo("M", std::to_string(boot_M));
      cli_detail::echo("seed", std::to_string(boot_seed));
      const auto table = parse_rankings(boot_rankings);
      const auto log = parse_impressions(boot_impressions, table);
      const auto result = bootstrap_ci(log, table, boot_method, boot_B, boot_level, boot_seed, boot_M, opts);
      auto out = logdata_detail::open_output(boot_out);
      nlohmann::ordered_json header;
      header["method"] = boot_method;
      header["B"] = result.B;
      header["level"] = result.level;
      header["M"] = boot_M;
      header["seed"] = boot_seed;
      header["failures"] = result.failures;
      out << header.dump() << '\n';
      for (int k = 1; k <= boot_M; ++k) {
        nlohmann::ordered_json j;
        j["rank"] = k;
        auto it = result.intervals.find(k);
        const bool has_point = result.point.M() >= k && result.point.defined(k);
        if (has_point) j["point"] = result.point.at(k);
        if (it != result.intervals.end()) {
          j["lo"] = it->second.lo;
          j["hi"] = it->second.hi;
          j["defined_resamples"] = it->second.defined_resamples;
          j["defined"] = true;
        } else {
          j["defined"] = false;
        }
        out << j.dump() << '\n';
      }
      for (const auto& note : result.notes) std::cerr << "note: " << note << "\n";
      std::cout << "wrote " << boot_out << " (" << result.failures << " failed resamples)\n";
      return 0;
    }

    if (sweep_cmd->parsed()) {
      const SweepAxis axis = parse_axis(sweep_axis);
      const auto grid = cli_detail::parse_grid(sweep_grid);
      std::vector<std::string> methods;
      for (const auto& m : cli_detail::split(sweep_methods, ',')) {
        if (!m.empty()) methods.push_back(m);
      }
      if (sweep_seeds < 1) throw ValidationError("seeds must be >= 1");
      if (sweep_jobs < 1) throw ValidationError("jobs must be >= 1");
      const SimConfig base = sweep_flags.to_config();
      const OptimizerOptions opts = sweep_opt.to_options();
      cli_detail::echo_sim_config(base);
      cli_detail::echo("axis", sweep_axis);
      cli_detail::echo("grid", sweep_grid);
      cli_detail::echo("methods", sweep_methods);
      cli_detail::echo("seeds", std::to_string(sweep_seeds));
      const auto result = run_sweep(axis, grid, base, methods, sweep_seeds, sweep_jobs, opts);
      write_sweep_reports_csv(result.reports, sweep_out);
      write_sweep_summary_csv(result.summary, sweep_summary_out);
      std::cout << "axis=" << sweep_axis << "\n";
      for (const auto& row : result.summary) {
        std::cout << "  " << row.label << "  " << row.method << "  mean_mse=";
        if (row.defined_runs > 0) {
          std::cout << evaluation_detail::fmt_double(row.mean_mse);
        } else {
          std::cout << "undefined";
        }
        std::cout << " sd=" << evaluation_detail::fmt_double(row.sd_mse) << " (" << row.defined_runs << "/"
                  << row.runs << " runs)\n";
      }
      std::cout << "wrote " << sweep_out << " and " << sweep_summary_out << "\n";
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace posbias
