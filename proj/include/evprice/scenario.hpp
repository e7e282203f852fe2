#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evprice/bilevel.hpp"
#include "evprice/io.hpp"
#include "evprice/mpqp.hpp"
#include "evprice/synthetic.hpp"

namespace evprice::scenario {

struct Options {
  int workers = 1;
  std::uint64_t seed = 1;
  double tol_kkt = 1e-6;
  double tol_active = 1e-7;
  bilevel::RegionObjective objective = bilevel::RegionObjective::kValueFunction;
  std::optional<mpqp::PriceBox> box;  // replaces the instance's box

  qp::SolverOptions solver() const;
  mpqp::ExploreOptions explore() const;
  bilevel::BilevelOptions bilevel() const;
};

/// Files produced by one run, keyed by file name. `files` holds only
/// deterministic content; wall-clock times go to `timing`.
struct Output {
  std::map<std::string, std::string> files;
  io::json timing = io::json::object();
};

/// explore + solve_bilevel + attach_traffic + verify_kkt_equilibrium.
struct Pipeline {
  traffic::ExtendedTrafficNetwork net;
  traffic::CompactQP qp;
  mpqp::PiecewiseAffineDemandFunction pi;
  bilevel::BilevelResult result;
  bilevel::KktReport kkt;
};

Pipeline run_pipeline(const synthetic::Instance& inst, const Options& options);

/// result.json.
Output run_solve(const synthetic::Instance& inst, const Options& options);
/// partition.json.
Output run_regions(const synthetic::Instance& inst, const Options& options);

/// demand_sweep.csv (per demand level: IDSO cost, joint IDSO cost, region
/// count) and station_demand.csv (per level and station). Failed rows carry
/// the error kind in their status column.
Output run_demand_sweep(const synthetic::Instance& inst, const std::vector<double>& demands, const Options& options);

/// cost_sweep_prices.csv and cost_sweep_demand.csv, one row per cost value
/// of `generator`.
Output run_cost_sweep(const synthetic::Instance& inst, const std::string& generator, const std::vector<double>& costs,
                      const Options& options);

struct ForecastSpec {
  double truth = 300.0;        // demand per O-D pair
  double deviation_pct = 5.0;  // forecasts in truth·(1 ± dev/100)
  int samples = 30;
  std::uint64_t seed = 1;
  // Realize by solving the whole problem again at the true demand instead
  // of keeping the forecast prices.
  bool full_resolve = false;
};

/// One sample of the forecast study.
struct ForecastSample {
  std::vector<double> forecast;  // per O-D pair
  std::string status = "ok";
  double forecast_cost = 0.0;    // IDSO cost at the demand the forecast predicts
  double realized_cost = 0.0;    // IDSO cost at the demand that materializes
  double deviation_pct = 0.0;
  double bound_pct = 0.0;        // |deviation| never exceeds this
};

/// One realization for a given forecast (one value per O-D pair with
/// positive demand).
ForecastSample forecast_sample(const synthetic::Instance& inst, const ForecastSpec& spec,
                               const std::vector<double>& forecast, const Options& options);

std::vector<ForecastSample> forecast_samples(const synthetic::Instance& inst, const ForecastSpec& spec,
                                             const Options& options);

/// forecast_samples.csv and forecast_summary.json.
Output run_forecast_mc(const synthetic::Instance& inst, const ForecastSpec& spec, const Options& options);

/// baseline.csv (bilevel and lowest-price rows: IDSO, latency, ITSO,
/// combined) and baseline.json with the baseline's iteration details.
Output run_baseline(const synthetic::Instance& inst, const Options& options);

struct Criterion {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
  std::map<std::string, double> metrics;
};

struct VerifyOptions {
  int instances = 20;
  int samples = 200;
  int fd_points = 5;
  double fd_step = 1e-5;
  int forecast_samples = 30;
  double forecast_deviation_pct = 5.0;
  // Extra instances checked alongside the random ones, e.g. user files.
  std::vector<synthetic::Instance> extra;
};

struct VerifyReport {
  std::vector<Criterion> criteria;
  bool passed() const;
  io::json to_json() const;
  std::string to_text() const;  // one PASS/FAIL line per criterion
};

/// Runs the oracle suite: bilevel vs joint, demand function vs direct
/// solves, partition and continuity, finite-difference Jacobians, KKT
/// residuals and their sensitivity, baseline dominance, the one-station
/// toy, and the forecast bound.
VerifyReport run_verify(const Options& options, const VerifyOptions& verify = {});

/// The instances run_verify draws, seeded from options.seed.
std::vector<synthetic::Instance> verify_instances(const Options& options, int count);

}  // namespace evprice::scenario
