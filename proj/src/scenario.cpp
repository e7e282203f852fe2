#include "evprice/scenario.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>

#include "evprice/parallel.hpp"

namespace evprice::scenario {

namespace {

using io::format_number;
using io::json;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string error_status(const std::exception& e) {
  if (const auto* err = dynamic_cast<const Error*>(&e)) return to_string(err->kind());
  return "error";
}

Options single_worker(Options o) {
  o.workers = 1;
  return o;
}

// Demand per O-D pair in input order, only for pairs with positive demand.
synthetic::Instance with_pair_demands(synthetic::Instance inst, const std::vector<double>& demands) {
  size_t k = 0;
  for (auto& od : inst.traffic.od_pairs)
    if (od.demand > 0.0) od.demand = demands.at(k++);
  return inst;
}

int positive_pairs(const synthetic::Instance& inst) {
  int n = 0;
  for (const auto& od : inst.traffic.od_pairs) n += od.demand > 0.0;
  return n;
}

std::string dump(const json& doc) { return doc.dump(2) + "\n"; }

}  // namespace

qp::SolverOptions Options::solver() const {
  qp::SolverOptions s;
  s.active_tol = tol_active;
  return s;
}

mpqp::ExploreOptions Options::explore() const {
  mpqp::ExploreOptions e;
  e.workers = workers;
  e.audit_seed = seed;
  e.solver = solver();
  return e;
}

bilevel::BilevelOptions Options::bilevel() const {
  bilevel::BilevelOptions b;
  b.objective = objective;
  b.workers = workers;
  b.solver = solver();
  return b;
}

Pipeline run_pipeline(const synthetic::Instance& inst, const Options& options) {
  Pipeline p;
  p.net = traffic::build_extended_network(inst.traffic, inst.build);
  p.qp = traffic::assemble_traffic_qp(p.net);
  const mpqp::PriceBox box = options.box ? *options.box : inst.box;
  p.pi = mpqp::explore(p.qp, box, box.center(), options.explore());
  p.result = bilevel::solve_bilevel(inst.grid, p.pi, options.bilevel());
  bilevel::attach_traffic(p.result, p.qp, p.net, options.solver());
  p.kkt = bilevel::verify_kkt_equilibrium(p.result, inst.grid, p.qp);
  return p;
}

Output run_solve(const synthetic::Instance& inst, const Options& options) {
  Output out;
  const auto t0 = std::chrono::steady_clock::now();
  const Pipeline p = run_pipeline(inst, options);
  json doc = io::result_to_json(p.result, inst, &p.kkt, &p.pi);
  doc["region_objective"] = bilevel::to_string(options.objective);
  doc["kkt_within_tolerance"] = p.kkt.max() <= options.tol_kkt;
  out.files["result.json"] = dump(doc);
  out.timing["solve_seconds"] = seconds_since(t0);
  return out;
}

Output run_regions(const synthetic::Instance& inst, const Options& options) {
  Output out;
  const auto t0 = std::chrono::steady_clock::now();
  const traffic::ExtendedTrafficNetwork net = traffic::build_extended_network(inst.traffic, inst.build);
  const traffic::CompactQP qp = traffic::assemble_traffic_qp(net);
  const mpqp::PriceBox box = options.box ? *options.box : inst.box;
  const auto pi = mpqp::explore(qp, box, box.center(), options.explore());
  out.files["partition.json"] = dump(io::partition_to_json(pi));
  out.timing["explore_seconds"] = seconds_since(t0);
  return out;
}

Output run_demand_sweep(const synthetic::Instance& inst, const std::vector<double>& demands, const Options& options) {
  if (demands.empty()) throw Error(ErrorKind::kInput, "sweep-demand: empty demand list");
  for (double m : demands)
    if (!(m >= 0.0)) throw Error(ErrorKind::kInput, "sweep-demand: demand levels must be nonnegative");
  struct Row {
    std::string status = "ok";
    double idso = 0, joint_idso = 0, combined = 0, joint_combined = 0, latency = 0;
    int regions = 0, pieces = 0;
    Eigen::VectorXd demand;
    double seconds = 0;
  };
  std::vector<Row> rows(demands.size());
  parallel_for(static_cast<int>(demands.size()), options.workers, [&](int i) {
    Row& r = rows[static_cast<size_t>(i)];
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const synthetic::Instance row_inst = synthetic::with_uniform_demand(inst, demands[static_cast<size_t>(i)]);
      const Pipeline p = run_pipeline(row_inst, single_worker(options));
      const auto joint = bilevel::solve_joint(row_inst.grid, p.net, p.qp, options.solver());
      r.idso = p.result.idso_cost;
      r.joint_idso = joint.idso_cost;
      r.combined = p.result.combined_cost;
      r.joint_combined = joint.combined_cost;
      r.latency = p.result.latency_cost;
      r.regions = p.pi.num_critical_regions();
      r.pieces = p.pi.size();
      r.demand = p.result.demand;
    } catch (const std::exception& e) {
      r.status = error_status(e);
    }
    r.seconds = seconds_since(t0);
  });

  io::Table main{{"demand", "status", "idso_cost", "joint_idso_cost", "abs_diff", "latency_cost", "combined_cost",
                  "joint_combined_cost", "regions", "region_pieces"},
                 {}};
  io::Table bars{{"demand", "station", "charging_demand_kwh"}, {}};
  json timing = json::array();
  for (size_t i = 0; i < rows.size(); ++i) {
    const Row& r = rows[i];
    const std::string m = format_number(demands[i]);
    timing.push_back({{"demand", demands[i]}, {"seconds", r.seconds}});
    if (r.status != "ok") {
      main.rows.push_back({m, r.status, "", "", "", "", "", "", "", ""});
      continue;
    }
    main.rows.push_back({m, r.status, format_number(r.idso), format_number(r.joint_idso),
                         format_number(std::abs(r.idso - r.joint_idso)), format_number(r.latency),
                         format_number(r.combined), format_number(r.joint_combined), std::to_string(r.regions),
                         std::to_string(r.pieces)});
    for (Eigen::Index s = 0; s < r.demand.size(); ++s)
      bars.rows.push_back({m, inst.traffic.stations[static_cast<size_t>(s)].id, format_number(r.demand(s))});
  }
  Output out;
  out.files["demand_sweep.csv"] = main.to_csv();
  out.files["station_demand.csv"] = bars.to_csv();
  out.timing["rows"] = timing;
  return out;
}

Output run_cost_sweep(const synthetic::Instance& inst, const std::string& generator, const std::vector<double>& costs,
                      const Options& options) {
  if (costs.empty()) throw Error(ErrorKind::kInput, "sweep-cost: empty cost list");
  int gen = -1;
  for (int k = 0; k < inst.grid.num_generators(); ++k)
    if (inst.grid.generators[static_cast<size_t>(k)].id == generator) gen = k;
  if (gen < 0) throw Error(ErrorKind::kInput, "sweep-cost: unknown generator " + generator);
  for (double c : costs)
    if (!(c >= 0.0)) throw Error(ErrorKind::kInput, "sweep-cost: costs must be nonnegative");

  struct Row {
    std::string status = "ok";
    Eigen::VectorXd price, demand;
    double idso = 0;
    double seconds = 0;
  };
  std::vector<Row> rows(costs.size());
  parallel_for(static_cast<int>(costs.size()), options.workers, [&](int i) {
    Row& r = rows[static_cast<size_t>(i)];
    const auto t0 = std::chrono::steady_clock::now();
    try {
      synthetic::Instance row_inst = inst;
      row_inst.grid.generators[static_cast<size_t>(gen)].cost = costs[static_cast<size_t>(i)];
      if (!options.box) row_inst.box = synthetic::default_price_box(row_inst.grid);
      const Pipeline p = run_pipeline(row_inst, single_worker(options));
      r.price = p.result.lambda_c;
      r.demand = p.result.demand;
      r.idso = p.result.idso_cost;
    } catch (const std::exception& e) {
      r.status = error_status(e);
    }
    r.seconds = seconds_since(t0);
  });

  io::Table prices{{"cost", "status", "idso_cost"}, {}};
  io::Table demand{{"cost", "status"}, {}};
  for (const auto& st : inst.traffic.stations) {
    prices.header.push_back("price_" + st.id);
    demand.header.push_back("demand_" + st.id);
  }
  json timing = json::array();
  for (size_t i = 0; i < rows.size(); ++i) {
    const Row& r = rows[i];
    const std::string c = format_number(costs[i]);
    timing.push_back({{"cost", costs[i]}, {"seconds", r.seconds}});
    std::vector<std::string> p{c, r.status, r.status == "ok" ? format_number(r.idso) : ""};
    std::vector<std::string> d{c, r.status};
    for (size_t s = 0; s < inst.traffic.stations.size(); ++s) {
      p.push_back(r.status == "ok" ? format_number(r.price(static_cast<Eigen::Index>(s))) : "");
      d.push_back(r.status == "ok" ? format_number(r.demand(static_cast<Eigen::Index>(s))) : "");
    }
    prices.rows.push_back(p);
    demand.rows.push_back(d);
  }
  Output out;
  out.files["cost_sweep_prices.csv"] = prices.to_csv();
  out.files["cost_sweep_demand.csv"] = demand.to_csv();
  out.timing["rows"] = timing;
  return out;
}

namespace {

void check_forecast_spec(const ForecastSpec& spec) {
  if (spec.samples < 1) throw Error(ErrorKind::kInput, "forecast-mc: sample count must be at least 1");
  if (!(spec.deviation_pct >= 0.0 && spec.deviation_pct < 100.0))
    throw Error(ErrorKind::kInput, "forecast-mc: deviation must be in [0, 100)");
  if (!(spec.truth >= 0.0)) throw Error(ErrorKind::kInput, "forecast-mc: truth demand must be nonnegative");
}

struct TruthModel {
  synthetic::Instance inst;
  traffic::ExtendedTrafficNetwork net;
  traffic::CompactQP qp;
  std::optional<Pipeline> solution;
};

TruthModel truth_model(const synthetic::Instance& inst, const ForecastSpec& spec, const Options& options) {
  TruthModel t{synthetic::with_uniform_demand(inst, spec.truth), {}, {}, std::nullopt};
  t.net = traffic::build_extended_network(t.inst.traffic, t.inst.build);
  t.qp = traffic::assemble_traffic_qp(t.net);
  if (spec.full_resolve) t.solution = run_pipeline(t.inst, options);
  return t;
}

void realize(const TruthModel& truth, ForecastSample& s, const Options& inner) {
  try {
    const synthetic::Instance fc = with_pair_demands(truth.inst, s.forecast);
    const Pipeline p = run_pipeline(fc, inner);
    const Eigen::VectorXd d_fc = p.result.traffic_demand;
    const Eigen::VectorXd d_real =
        truth.solution ? truth.solution->result.traffic_demand
                       : traffic::solve_traffic(truth.qp, truth.net, p.result.lambda_c, inner.solver()).demand;
    const grid::OpfSolution c_fc = grid::solve_opf(truth.inst.grid, d_fc);
    const grid::OpfSolution c_real = grid::solve_opf(truth.inst.grid, d_real);
    s.forecast_cost = c_fc.objective;
    s.realized_cost = c_real.objective;
    const double base = std::max(std::abs(s.forecast_cost), 1e-12);
    s.deviation_pct = 100.0 * (s.realized_cost - s.forecast_cost) / base;
    // OPF cost is convex in the bus demand with the nodal prices as
    // subgradients, so the change is bracketed by the two linearizations.
    const Eigen::VectorXd delta = truth.inst.grid.bus_demand(d_real - d_fc);
    s.bound_pct = 100.0 * std::max(std::abs(c_fc.duals.lambda.dot(delta)), std::abs(c_real.duals.lambda.dot(delta))) / base;
  } catch (const std::exception& e) {
    s.status = error_status(e);
  }
}

}  // namespace

ForecastSample forecast_sample(const synthetic::Instance& inst, const ForecastSpec& spec,
                               const std::vector<double>& forecast, const Options& options) {
  check_forecast_spec(spec);
  const TruthModel truth = truth_model(inst, spec, options);
  if (static_cast<int>(forecast.size()) != positive_pairs(truth.inst))
    throw Error(ErrorKind::kInput, "forecast-mc: one forecast value per O-D pair with positive demand is required");
  for (double v : forecast)
    if (!(v >= 0.0)) throw Error(ErrorKind::kInput, "forecast-mc: forecasts must be nonnegative");
  ForecastSample s;
  s.forecast = forecast;
  realize(truth, s, single_worker(options));
  return s;
}

std::vector<ForecastSample> forecast_samples(const synthetic::Instance& inst, const ForecastSpec& spec,
                                             const Options& options) {
  check_forecast_spec(spec);
  const TruthModel truth = truth_model(inst, spec, options);
  const int pairs = positive_pairs(truth.inst);

  // All draws happen up front so the result does not depend on scheduling.
  const double lo = std::ceil(spec.truth * (1.0 - spec.deviation_pct / 100.0));
  const double hi = std::floor(spec.truth * (1.0 + spec.deviation_pct / 100.0));
  std::mt19937_64 rng(spec.seed);
  std::vector<ForecastSample> out(static_cast<size_t>(spec.samples));
  for (auto& s : out)
    for (int w = 0; w < pairs; ++w) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      s.forecast.push_back(hi >= lo ? std::min(hi, lo + std::floor(u * (hi - lo + 1.0))) : spec.truth);
    }

  const Options inner = single_worker(options);
  parallel_for(spec.samples, options.workers, [&](int i) { realize(truth, out[static_cast<size_t>(i)], inner); });
  return out;
}

Output run_forecast_mc(const synthetic::Instance& inst, const ForecastSpec& spec, const Options& options) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<ForecastSample> samples = forecast_samples(inst, spec, options);
  io::Table table{{"sample", "status", "forecast_demand", "forecast_cost", "realized_cost", "deviation_pct", "bound_pct"},
                  {}};
  int failed = 0;
  bool within = true;
  double max_abs = 0, max_bound = 0, sum = 0, lo = 0, hi = 0;
  int ok = 0;
  for (size_t i = 0; i < samples.size(); ++i) {
    const ForecastSample& s = samples[i];
    std::string fc;
    for (size_t w = 0; w < s.forecast.size(); ++w) fc += (w ? ";" : "") + format_number(s.forecast[w]);
    if (s.status != "ok") {
      ++failed;
      table.rows.push_back({std::to_string(i), s.status, fc, "", "", "", ""});
      continue;
    }
    table.rows.push_back({std::to_string(i), s.status, fc, format_number(s.forecast_cost), format_number(s.realized_cost),
                          format_number(s.deviation_pct), format_number(s.bound_pct)});
    lo = ok ? std::min(lo, s.deviation_pct) : s.deviation_pct;
    hi = ok ? std::max(hi, s.deviation_pct) : s.deviation_pct;
    ++ok;
    sum += s.deviation_pct;
    max_abs = std::max(max_abs, std::abs(s.deviation_pct));
    max_bound = std::max(max_bound, s.bound_pct);
    within = within && std::abs(s.deviation_pct) <= s.bound_pct + 1e-9 * (1.0 + s.bound_pct);
  }
  json summary = {{"schema_version", io::kSchemaVersion},
                  {"truth_demand", spec.truth},
                  {"deviation_pct", spec.deviation_pct},
                  {"samples", spec.samples},
                  {"seed", spec.seed},
                  {"realization", spec.full_resolve ? "full_resolve" : "fixed_prices"},
                  {"failed", failed},
                  {"mean_deviation_pct", ok ? sum / ok : 0.0},
                  {"min_deviation_pct", lo},
                  {"max_deviation_pct", hi},
                  {"max_abs_deviation_pct", max_abs},
                  {"max_bound_pct", max_bound},
                  {"all_within_bound", within}};
  Output out;
  out.files["forecast_samples.csv"] = table.to_csv();
  out.files["forecast_summary.json"] = dump(summary);
  out.timing["forecast_seconds"] = seconds_since(t0);
  return out;
}

Output run_baseline(const synthetic::Instance& inst, const Options& options) {
  const auto t0 = std::chrono::steady_clock::now();
  const Pipeline p = run_pipeline(inst, options);
  bilevel::BaselineOptions bo;
  bo.solver = options.solver();
  const bilevel::BaselineResult base = bilevel::baseline_lowest_price(inst.grid, p.net, p.qp, bo);

  io::Table table{{"method", "idso_cost", "latency_cost", "itso_cost", "combined_cost"}, {}};
  table.rows.push_back({"bilevel", format_number(p.result.idso_cost), format_number(p.result.latency_cost),
                        format_number(p.result.itso_cost), format_number(p.result.combined_cost)});
  table.rows.push_back({"lowest_price", format_number(base.idso_cost), format_number(base.latency_cost),
                        format_number(base.itso_cost), format_number(base.combined_cost)});
  json detail = {{"schema_version", io::kSchemaVersion},
                 {"bilevel", {{"station_prices", io::to_json(p.result.lambda_c)}, {"station_demand", io::to_json(p.result.demand)}}},
                 {"lowest_price",
                  {{"station_prices", io::to_json(base.lambda_c)},
                   {"station_demand", io::to_json(base.demand)},
                   {"open_stations", base.open_stations},
                   {"rounds", base.rounds},
                   {"converged", base.converged},
                   {"previous_demand", io::to_json(base.previous_demand)},
                   {"last_demand", io::to_json(base.last_demand)}}},
                 {"combined_cost_increase_pct",
                  100.0 * (base.combined_cost - p.result.combined_cost) / std::max(std::abs(p.result.combined_cost), 1e-12)}};
  Output out;
  out.files["baseline.csv"] = table.to_csv();
  out.files["baseline.json"] = dump(detail);
  out.timing["baseline_seconds"] = seconds_since(t0);
  return out;
}

// ---------------------------------------------------------------------------
// Oracle suite

namespace {

struct InstanceCheck {
  std::string name;
  std::string error;
  double cost_gap = 0;          // |bilevel − joint| / (1 + |joint|), IDSO cost
  double demand_error = 0;      // max |π(λ) − direct| over samples, kWh
  int partition_samples = 0;    // samples clear of every facet
  int partition_violations = 0; // of those, not in exactly one region
  double continuity = 0;        // max demand jump across facet midpoints
  int continuity_orphans = 0;   // facet midpoints with no neighbor
  double jacobian_error = 0;
  int jacobian_points = 0;
  int jacobian_skipped = 0;     // regions too thin for the difference step
  double kkt = 0;
  double kkt_perturbed = 0;
  double baseline_gap = 0;      // (baseline − bilevel) / (1 + |bilevel|), combined
  int regions = 0;
};

Eigen::VectorXd unit_direction(int dim, std::uint64_t k) {
  std::mt19937_64 rng(0xA5A5A5A5ULL + k);
  Eigen::VectorXd u(dim);
  for (int i = 0; i < dim; ++i) u(i) = static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5;
  return u.norm() > 0 ? Eigen::VectorXd(u.normalized()) : Eigen::VectorXd::Unit(dim, 0);
}

InstanceCheck check_instance(const synthetic::Instance& inst, std::uint64_t sample_seed, const Options& options,
                             const VerifyOptions& vo) {
  InstanceCheck c;
  c.name = inst.name;
  try {
    const Pipeline p = run_pipeline(inst, options);
    const auto& pi = p.pi;
    c.regions = pi.size();
    const qp::SolverOptions solver = options.solver();
    auto direct = [&](const Eigen::VectorXd& lam) { return traffic::solve_traffic(p.qp, p.net, lam, solver).demand; };

    const auto joint = bilevel::solve_joint(inst.grid, p.net, p.qp, solver);
    c.cost_gap = std::abs(p.result.idso_cost - joint.idso_cost) / (1.0 + std::abs(joint.idso_cost));

    for (const Eigen::VectorXd& lam : mpqp::sample_box(pi.box, vo.samples, sample_seed)) {
      c.demand_error = std::max(c.demand_error, (mpqp::evaluate(pi, lam).demand - direct(lam)).lpNorm<Eigen::Infinity>());
      bool clear = true;
      int inside = 0;
      for (const auto& r : pi.regions) {
        const double s = r.poly.rows() ? (r.poly.A * lam - r.poly.b).maxCoeff() : -1.0;
        if (std::abs(s) < 1e-6) clear = false;
        inside += s < 0.0;
      }
      if (!clear) continue;
      ++c.partition_samples;
      if (inside != 1) ++c.partition_violations;
    }

    for (const auto& r : pi.regions) {
      for (int k = 0; k < r.poly.rows(); ++k) {
        if (r.on_box[static_cast<size_t>(k)]) continue;
        qp::ChebyshevBall fc;
        try {
          fc = qp::facet_center(r.poly, k);
        } catch (const qp::EmptyPolyhedronError&) {
          continue;
        }
        const Eigen::VectorXd mine = r.policy.demand(fc.center);
        bool neighbor = false;
        for (const auto& o : pi.regions) {
          if (o.id == r.id || !o.contains(fc.center, 1e-7)) continue;
          neighbor = true;
          c.continuity = std::max(c.continuity, (o.policy.demand(fc.center) - mine).lpNorm<Eigen::Infinity>());
        }
        if (!neighbor) ++c.continuity_orphans;
      }
    }

    const int nc = pi.box.dim();
    for (const auto& r : pi.regions) {
      if (nc == 0) break;
      if (r.radius < 4.0 * vo.fd_step) {
        ++c.jacobian_skipped;
        continue;
      }
      for (int k = 0; k < vo.fd_points; ++k) {
        const Eigen::VectorXd lam =
            k == 0 ? r.interior_point
                   : Eigen::VectorXd(r.interior_point + 0.5 * r.radius * unit_direction(nc, static_cast<std::uint64_t>(r.id * 131 + k)));
        Eigen::MatrixXd fd(nc, nc);
        for (int j = 0; j < nc; ++j) {
          const Eigen::VectorXd e = vo.fd_step * Eigen::VectorXd::Unit(nc, j);
          fd.col(j) = (direct(lam + e) - direct(lam - e)) / (2.0 * vo.fd_step);
        }
        c.jacobian_error = std::max(c.jacobian_error, (fd - r.policy.demand_matrix).cwiseAbs().maxCoeff());
        ++c.jacobian_points;
      }
    }

    c.kkt = p.kkt.max();
    // One percent of the price level, with 1 $/kWh as the smallest level.
    const double shift = 0.01 * std::max(1.0, p.result.lambda.lpNorm<Eigen::Infinity>());
    c.kkt_perturbed = bilevel::verify_kkt_equilibrium(bilevel::perturb_prices(p.result, shift), inst.grid, p.qp).max();

    bilevel::BaselineOptions bo;
    bo.solver = solver;
    const auto base = bilevel::baseline_lowest_price(inst.grid, p.net, p.qp, bo);
    c.baseline_gap = (base.combined_cost - p.result.combined_cost) / (1.0 + std::abs(p.result.combined_cost));
  } catch (const std::exception& e) {
    c.error = std::string(error_status(e)) + ": " + e.what();
  }
  return c;
}

std::string fmt(double x) {
  std::ostringstream s;
  s.precision(3);
  s << std::scientific << x;
  return s.str();
}

}  // namespace

std::vector<synthetic::Instance> verify_instances(const Options& options, int count) {
  std::vector<synthetic::Instance> out;
  for (int i = 0; i < count; ++i) out.push_back(synthetic::random_instance(options.seed + static_cast<std::uint64_t>(i)));
  return out;
}

VerifyReport run_verify(const Options& options, const VerifyOptions& vo) {
  std::vector<synthetic::Instance> insts = verify_instances(options, vo.instances);
  for (const auto& x : vo.extra) insts.push_back(x);
  const int n_random = vo.instances;
  std::vector<InstanceCheck> checks(insts.size());
  const Options inner = single_worker(options);
  parallel_for(static_cast<int>(insts.size()), options.workers, [&](int i) {
    checks[static_cast<size_t>(i)] = check_instance(insts[static_cast<size_t>(i)], options.seed * 1000 + static_cast<std::uint64_t>(i), inner, vo);
  });

  VerifyReport rep;
  std::vector<std::string> errors;
  for (const auto& c : checks)
    if (!c.error.empty()) errors.push_back(c.name + " (" + c.error + ")");
  const bool clean = errors.empty();
  const std::string err_detail = clean ? "" : "; failures: " + errors.front() + (errors.size() > 1 ? " and others" : "");
  auto worst = [&](double InstanceCheck::*field) {
    double m = 0;
    for (const auto& c : checks) m = std::max(m, c.*field);
    return m;
  };
  auto total = [&](int InstanceCheck::*field) {
    int m = 0;
    for (const auto& c : checks) m += c.*field;
    return m;
  };
  const double count = static_cast<double>(checks.size());

  {
    Criterion c{1, "bilevel IDSO cost equals joint IDSO cost", false, "", {}};
    const double gap = worst(&InstanceCheck::cost_gap);
    c.passed = clean && gap <= 1e-5;
    c.metrics = {{"instances", count}, {"max_scaled_gap", gap}};
    c.detail = std::to_string(checks.size()) + " instances, max scaled gap " + fmt(gap) + err_detail;
    rep.criteria.push_back(c);
  }
  {
    Criterion c{2, "demand function matches direct lower-level solves", false, "", {}};
    const double e = worst(&InstanceCheck::demand_error);
    c.passed = clean && e <= 1e-6;
    c.metrics = {{"samples_per_instance", vo.samples}, {"max_abs_error_kwh", e}};
    c.detail = std::to_string(vo.samples) + " samples per instance, max error " + fmt(e) + " kWh" + err_detail;
    rep.criteria.push_back(c);
  }
  {
    Criterion c{3, "regions partition the box and demand is continuous across facets", false, "", {}};
    const int clear = total(&InstanceCheck::partition_samples);
    const int viol = total(&InstanceCheck::partition_violations);
    const int orphans = total(&InstanceCheck::continuity_orphans);
    const double jump = worst(&InstanceCheck::continuity);
    c.passed = clean && viol == 0 && orphans == 0 && jump <= 1e-6;
    c.metrics = {{"clear_samples", clear}, {"violations", viol}, {"orphan_facets", orphans}, {"max_facet_jump_kwh", jump}};
    c.detail = std::to_string(clear) + " clear samples, " + std::to_string(viol) + " not in exactly one region, max facet jump " +
               fmt(jump) + " kWh, " + std::to_string(orphans) + " facets without a neighbor" + err_detail;
    rep.criteria.push_back(c);
  }
  {
    Criterion c{4, "finite-difference demand Jacobian matches the region policy", false, "", {}};
    const double e = worst(&InstanceCheck::jacobian_error);
    const int pts = total(&InstanceCheck::jacobian_points);
    const int skipped = total(&InstanceCheck::jacobian_skipped);
    c.passed = clean && pts > 0 && e <= 1e-4;
    c.metrics = {{"points", pts}, {"regions_skipped", skipped}, {"max_entry_error", e}};
    c.detail = std::to_string(pts) + " points, max entry error " + fmt(e) + ", " + std::to_string(skipped) +
               " regions thinner than the step skipped" + err_detail;
    rep.criteria.push_back(c);
  }
  {
    Criterion c{5, "KKT residuals vanish at the equilibrium and react to price shifts", false, "", {}};
    const double k = worst(&InstanceCheck::kkt);
    double pmin = std::numeric_limits<double>::infinity();
    for (const auto& x : checks)
      if (x.error.empty()) pmin = std::min(pmin, x.kkt_perturbed);
    c.passed = clean && k <= options.tol_kkt && pmin >= 1e-3;
    c.metrics = {{"max_residual", k}, {"min_perturbed_residual", std::isfinite(pmin) ? pmin : 0.0}};
    c.detail = "max residual " + fmt(k) + ", min residual after a 1% price shift " + fmt(pmin) + err_detail;
    rep.criteria.push_back(c);
  }
  {
    Criterion c{6, "lowest-price baseline never beats the bilevel equilibrium", false, "", {}};
    double lowest = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < checks.size(); ++i)
      if (checks[i].error.empty()) lowest = std::min(lowest, checks[i].baseline_gap);
    double strict = 0;
    std::string strict_error;
    const InstanceCheck two = check_instance(synthetic::two_station_asymmetric(), options.seed, inner, vo);
    if (two.error.empty()) strict = two.baseline_gap;
    else strict_error = "; two-station instance failed: " + two.error;
    c.passed = clean && strict_error.empty() && lowest >= -1e-6 && strict > 1e-6;
    c.metrics = {{"min_scaled_gap", std::isfinite(lowest) ? lowest : 0.0}, {"two_station_scaled_gap", strict}};
    c.detail = "min scaled gap " + fmt(lowest) + " over " + std::to_string(checks.size()) +
               " instances, two-station asymmetric gap " + fmt(strict) + err_detail + strict_error;
    rep.criteria.push_back(c);
  }
  {
    Criterion c{7, "one-station toy has three regions and the closed-form slope", false, "", {}};
    try {
      const synthetic::Instance toy = synthetic::one_station_toy();
      const auto net = traffic::build_extended_network(toy.traffic, toy.build);
      const auto qp = traffic::assemble_traffic_qp(net);
      const auto pi = mpqp::explore(qp, toy.box, toy.box.center(), inner.explore());
      const auto& st = toy.traffic.stations[0];
      const double slope = -st.avg_demand * st.avg_demand * st.capacity_slope / (2.0 * toy.traffic.time_value);
      double slope_err = 0, flat_err = 0;
      std::vector<double> breaks;
      for (const auto& r : pi.regions) {
        double lo = toy.box.lo(0), hi = toy.box.hi(0);
        for (int i = 0; i < r.poly.rows(); ++i) {
          const double a = r.poly.A(i, 0);
          if (a > 0) hi = std::min(hi, r.poly.b(i) / a);
          if (a < 0) lo = std::max(lo, r.poly.b(i) / a);
        }
        if (lo > toy.box.lo(0)) breaks.push_back(lo);
        const double d = r.policy.demand_matrix(0, 0);
        if (lo > toy.box.lo(0) && hi < toy.box.hi(0)) slope_err = std::max(slope_err, std::abs(d - slope) / std::abs(slope));
        else flat_err = std::max(flat_err, std::abs(d));
      }
      std::sort(breaks.begin(), breaks.end());
      const double b_err = breaks.size() == 2 ? std::max(std::abs(breaks[0] + 20.0 / 3.0), std::abs(breaks[1] + 5.0)) : 1.0;
      c.passed = pi.size() == 3 && pi.num_critical_regions() == 3 && slope_err <= 1e-8 && flat_err <= 1e-8 && b_err <= 1e-8;
      c.metrics = {{"regions", pi.size()}, {"slope", slope}, {"slope_rel_error", slope_err}, {"breakpoint_error", b_err}};
      c.detail = std::to_string(pi.size()) + " regions, slope " + format_number(slope) + " relative error " +
                 fmt(slope_err) + ", breakpoint error " + fmt(b_err);
    } catch (const std::exception& e) {
      c.detail = std::string("failed: ") + e.what();
    }
    rep.criteria.push_back(c);
  }
  {
    Criterion c{8, "repeated runs give byte-identical output", false, "", {}};
    try {
      bool same = true;
      Options other = options;
      other.workers = std::max(2, options.workers + 1);
      std::vector<synthetic::Instance> probe = {synthetic::one_station_toy(), synthetic::two_station_asymmetric()};
      if (n_random > 0) probe.push_back(insts.front());
      for (const auto& x : probe) {
        const Output a = run_solve(x, options), b = run_solve(x, other);
        const Output ra = run_regions(x, options), rb = run_regions(x, other);
        same = same && a.files == b.files && ra.files == rb.files;
      }
      c.passed = same;
      c.metrics = {{"instances", static_cast<double>(probe.size())}};
      c.detail = std::string(same ? "identical" : "different") + " result and partition files across worker counts";
    } catch (const std::exception& e) {
      c.detail = std::string("failed: ") + e.what();
    }
    rep.criteria.push_back(c);
  }
  {
    Criterion c{9, "forecast cost deviation stays within the instance bound", false, "", {}};
    try {
      const synthetic::Instance sat = synthetic::saturated_outer_stations();
      ForecastSpec spec;
      spec.truth = 300.0;
      spec.deviation_pct = vo.forecast_deviation_pct;
      spec.samples = vo.forecast_samples;
      spec.seed = options.seed;
      const auto samples = forecast_samples(sat, spec, inner);
      double max_abs = 0, max_bound = 0;
      bool within = true, ok = true;
      for (const auto& s : samples) {
        ok = ok && s.status == "ok";
        max_abs = std::max(max_abs, std::abs(s.deviation_pct));
        max_bound = std::max(max_bound, s.bound_pct);
        within = within && std::abs(s.deviation_pct) <= s.bound_pct + 1e-9 * (1.0 + s.bound_pct);
      }
      ForecastSpec zero = spec;
      zero.deviation_pct = 0.0;
      zero.samples = 5;
      bool exact = true;
      for (const auto& s : forecast_samples(sat, zero, inner)) exact = exact && s.status == "ok" && s.deviation_pct == 0.0;
      c.passed = ok && within && exact;
      c.metrics = {{"samples", spec.samples}, {"max_abs_deviation_pct", max_abs}, {"max_bound_pct", max_bound}};
      c.detail = std::to_string(spec.samples) + " samples at ±" + format_number(spec.deviation_pct) +
                 "%, max |deviation| " + fmt(max_abs) + "%, max bound " + fmt(max_bound) + "%, zero deviation " +
                 (exact ? "exactly 0" : "nonzero") + (ok ? "" : ", some samples failed");
    } catch (const std::exception& e) {
      c.detail = std::string("failed: ") + e.what();
    }
    rep.criteria.push_back(c);
  }
  return rep;
}

bool VerifyReport::passed() const {
  for (const auto& c : criteria)
    if (!c.passed) return false;
  return true;
}

io::json VerifyReport::to_json() const {
  json doc;
  doc["schema_version"] = io::kSchemaVersion;
  doc["passed"] = passed();
  doc["criteria"] = json::array();
  for (const auto& c : criteria)
    doc["criteria"].push_back({{"id", c.id}, {"name", c.name}, {"passed", c.passed}, {"detail", c.detail}, {"metrics", c.metrics}});
  return doc;
}

std::string VerifyReport::to_text() const {
  std::ostringstream out;
  for (const auto& c : criteria)
    out << (c.passed ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << c.detail << "\n";
  return out.str();
}

}  // namespace evprice::scenario
