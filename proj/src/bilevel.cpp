#include "evprice/bilevel.hpp"

#include <cmath>
#include <numeric>

#include "evprice/parallel.hpp"

namespace evprice::bilevel {

const char* to_string(RegionObjective objective) {
  switch (objective) {
    case RegionObjective::kValueFunction: return "value";
    case RegionObjective::kChargingExpense: return "expense";
  }
  return "unknown";
}

RegionObjective parse_region_objective(const std::string& name) {
  if (name == "value") return RegionObjective::kValueFunction;
  if (name == "expense") return RegionObjective::kChargingExpense;
  throw Error(ErrorKind::kInput, "unknown region objective '" + name + "' (expected value or expense)");
}

RegionCandidate solve_region(const grid::DualProblem& dual, const mpqp::CriticalRegion& region,
                             RegionObjective objective, const qp::SolverOptions& solver) {
  RegionCandidate cand;
  cand.region = region.id;
  const Eigen::MatrixXd& S = dual.lambda_c_selector;
  const mpqp::AffinePolicy& pol = region.policy;

  Eigen::MatrixXd D = pol.demand_matrix;
  if (D.size() > 0) {
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(D);
    const double tol = 1e-9 * std::max(1.0, D.cwiseAbs().maxCoeff());
    // Round-off positives are clipped silently; larger ones mark the region.
    if (eig.eigenvalues().maxCoeff() > tol) cand.convex = false;
    if (eig.eigenvalues().maxCoeff() > 0.0) {
      D = eig.eigenvectors() * eig.eigenvalues().cwiseMin(0.0).asDiagonal() * eig.eigenvectors().transpose();
    }
  }

  qp::QpProblem p = dual.problem;
  const double weight = objective == RegionObjective::kValueFunction ? 1.0 : 2.0;
  // Stations sharing a bus sum their rows of D; clip again after projecting.
  Eigen::MatrixXd P = weight * S.transpose() * D * S;
  P = 0.5 * (P + P.transpose()).eval();
  if (P.size() > 0) {
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(P);
    if (eig.eigenvalues().maxCoeff() > 0.0)
      P = eig.eigenvectors() * eig.eigenvalues().cwiseMin(0.0).asDiagonal() * eig.eigenvectors().transpose();
    P = 0.5 * (P + P.transpose()).eval();
  }
  p.H -= P;
  p.c -= S.transpose() * pol.demand_offset;
  const double constant = objective == RegionObjective::kValueFunction ? -pol.value_offset : 0.0;

  const Eigen::Index m0 = p.Aineq.rows();
  const Eigen::Index mr = region.poly.rows();
  p.Aineq.conservativeResize(m0 + mr, Eigen::NoChange);
  p.bineq.conservativeResize(m0 + mr);
  p.Aineq.bottomRows(mr) = region.poly.A * S;
  p.bineq.tail(mr) = region.poly.b;

  try {
    const qp::PrimalDualPoint sol = qp::solve_qp(p, solver);
    cand.feasible = true;
    cand.z = sol.x;
    cand.lambda_c = S * sol.x;
    cand.objective = sol.objective + constant;
    cand.status = "optimal";
  } catch (const qp::QpError& e) {
    cand.feasible = false;
    cand.status = to_string(e.status());
  }
  return cand;
}

BilevelResult solve_bilevel(const grid::DistributionCase& grid, const mpqp::PiecewiseAffineDemandFunction& pi,
                            const BilevelOptions& options) {
  if (pi.box.dim() != grid.num_stations())
    throw Error(ErrorKind::kInput, "bilevel: demand function and grid disagree on the station count");
  const grid::DualProblem dual = grid::assemble_dual(grid);
  std::vector<RegionCandidate> cands(pi.regions.size());
  parallel_for(pi.size(), options.workers, [&](int i) {
    cands[static_cast<size_t>(i)] = solve_region(dual, pi.regions[static_cast<size_t>(i)], options.objective, options.solver);
  });

  BilevelResult res;
  const RegionCandidate* best = nullptr;
  for (const RegionCandidate& c : cands) {
    if (!c.convex) ++res.nonconvex_regions;
    if (!c.feasible) continue;
    ++res.feasible_regions;
    const double tie = 1e-9 * (1.0 + std::abs(c.objective));
    if (!best || c.objective < best->objective - tie) best = &c;
  }
  if (!best) throw Error(ErrorKind::kInfeasible, "bilevel: every region's upper-level problem is infeasible");

  const mpqp::CriticalRegion& win = pi.regions[static_cast<size_t>(best->region)];
  res.region = best->region;
  res.objective = best->objective;
  res.duals = grid::unpack_duals(grid, dual.layout, best->z);
  res.lambda = res.duals.lambda;
  res.lambda_c = best->lambda_c;
  res.demand = win.policy.demand(res.lambda_c);
  grid::OpfOptions oo;
  oo.check_degeneracy = options.check_degeneracy;
  oo.solver = options.solver;
  res.opf = grid::solve_opf(grid, res.demand, oo);
  res.idso_cost = res.opf.objective;
  res.idso_dual_objective = grid::dual_objective(grid, res.duals, res.demand);
  return res;
}

void attach_traffic(BilevelResult& result, const traffic::CompactQP& qp, const traffic::ExtendedTrafficNetwork& net,
                    const qp::SolverOptions& solver) {
  const traffic::TrafficSolution ts = traffic::solve_traffic(qp, net, result.lambda_c, solver);
  result.has_traffic = true;
  result.arc_flows = ts.arc_flows;
  result.route_flows = ts.route_flows;
  result.traffic_demand = ts.demand;
  result.latency_cost = ts.latency_cost;
  result.charging_expense = ts.charging_expense;
  result.itso_cost = ts.itso_cost;
  result.combined_cost = result.idso_cost + result.latency_cost;
}

JointResult solve_joint(const grid::DistributionCase& grid, const traffic::ExtendedTrafficNetwork& net,
                        const traffic::CompactQP& qp, const qp::SolverOptions& solver) {
  if (grid.num_stations() != qp.num_stations())
    throw Error(ErrorKind::kInput, "joint: grid and traffic disagree on the station count");
  const qp::QpProblem opf = grid::assemble_opf(grid, Eigen::VectorXd::Zero(grid.num_stations()));
  const qp::QpProblem tr = qp.problem(Eigen::VectorXd::Zero(qp.num_stations()));
  const Eigen::Index no = opf.num_variables();
  const Eigen::Index nt = tr.num_variables();
  const int n = grid.num_buses();

  qp::QpProblem p = qp::QpProblem::with_size(no + nt);
  p.H.bottomRightCorner(nt, nt) = tr.H;
  p.c << opf.c, tr.c;
  p.Aeq = Eigen::MatrixXd::Zero(opf.Aeq.rows() + tr.Aeq.rows(), no + nt);
  p.Aeq.topLeftCorner(opf.Aeq.rows(), no) = opf.Aeq;
  p.Aeq.bottomRightCorner(tr.Aeq.rows(), nt) = tr.Aeq;
  for (int s = 0; s < net.num_stations(); ++s) {
    const traffic::ChargingStation& st = net.stations[static_cast<size_t>(s)];
    p.Aeq(grid.station_buses[static_cast<size_t>(s)], no + st.charge_arc) += st.avg_demand;
  }
  p.beq.resize(p.Aeq.rows());
  p.beq << opf.beq, tr.beq;
  p.Aineq = Eigen::MatrixXd::Zero(opf.Aineq.rows() + tr.Aineq.rows(), no + nt);
  p.Aineq.topLeftCorner(opf.Aineq.rows(), no) = opf.Aineq;
  p.Aineq.bottomRightCorner(tr.Aineq.rows(), nt) = tr.Aineq;
  p.bineq.resize(p.Aineq.rows());
  p.bineq << opf.bineq, tr.bineq;

  JointResult jr;
  try {
    jr.point = qp::solve_qp(p, solver);
  } catch (const qp::QpError& e) {
    if (e.status() == qp::QpStatus::kInfeasible)
      throw Error(ErrorKind::kInfeasible, std::string("joint: infeasible coupling: ") + e.what());
    throw Error(ErrorKind::kSolver, std::string("joint: ") + e.what());
  }
  const Eigen::VectorXd& x = jr.point.x;
  const int ng = grid.num_generators();
  jr.g = x.head(ng);
  jr.v = x.segment(ng, n);
  jr.theta = x.segment(ng + n, n);
  jr.arc_flows = x.segment(no, qp.num_arcs());
  jr.route_flows = x.tail(qp.num_routes());
  jr.lambda = jr.point.eq_duals.head(n);
  jr.lambda_c = grid.station_selector().transpose() * jr.lambda;
  jr.demand = traffic::demand_from_flows(net, jr.arc_flows);
  jr.idso_cost = opf.c.dot(x.head(no));
  jr.latency_cost = traffic::latency_cost(qp, jr.arc_flows);
  jr.combined_cost = jr.idso_cost + jr.latency_cost;
  return jr;
}

namespace {

double inf_norm(const Eigen::VectorXd& v) { return v.size() ? v.lpNorm<Eigen::Infinity>() : 0.0; }

double max_positive(const Eigen::VectorXd& v) { return v.size() ? std::max(0.0, v.maxCoeff()) : 0.0; }

}  // namespace

KktReport verify_kkt_equilibrium(const BilevelResult& result, const grid::DistributionCase& grid,
                                 const traffic::CompactQP& qp) {
  KktReport rep;
  const grid::OpfDuals& du = result.duals;
  const int ng = grid.num_generators();

  // Upper level: OPF at the induced demand with the result's duals.
  const qp::QpProblem opf = grid::assemble_opf(grid, result.demand);
  Eigen::VectorXd x(opf.num_variables());
  x << result.opf.g, result.opf.v, result.opf.theta;
  rep.upper["primal_equality"] = inf_norm(opf.Aeq * x - opf.beq) / (1.0 + inf_norm(opf.beq));
  rep.upper["primal_inequality"] = max_positive(opf.Aineq * x - opf.bineq) / (1.0 + inf_norm(opf.bineq));

  const grid::DualProblem dual = grid::assemble_dual(grid);
  const Eigen::VectorXd z = grid::pack_duals(dual.layout, du);
  const Eigen::VectorXd stat = dual.problem.Aeq * z;
  const double lscale = 1.0 + inf_norm(du.lambda);
  rep.upper["stationarity_angle"] = inf_norm(stat.head(grid.num_buses())) / lscale;
  rep.upper["stationarity_voltage"] = inf_norm(stat.tail(grid.num_buses())) / lscale;
  Eigen::VectorXd gen(ng);
  Eigen::VectorXd costs(ng);
  for (int k = 0; k < ng; ++k) {
    const grid::Generator& g = grid.generators[static_cast<size_t>(k)];
    costs(k) = g.cost;
    gen(k) = g.cost - du.lambda(g.bus) - du.tau_lo(k) + du.tau_up(k);
  }
  rep.upper["stationarity_generation"] = inf_norm(gen) / (1.0 + inf_norm(costs) + inf_norm(du.lambda));

  Eigen::VectorXd ineq(opf.Aineq.rows());
  ineq << du.tau_up, du.tau_lo, du.eta_up, du.eta_lo, du.mu_up, du.mu_lo;
  const double dscale = 1.0 + inf_norm(ineq);
  rep.upper["dual_feasibility"] = (ineq.size() ? std::max(0.0, -ineq.minCoeff()) : 0.0) / dscale;
  const Eigen::VectorXd slack = opf.bineq - opf.Aineq * x;
  rep.upper["complementarity"] =
      inf_norm(ineq.cwiseProduct(slack)) / (dscale * (1.0 + inf_norm(opf.bineq)));
  const double primal = opf.c.dot(x);
  rep.upper["duality_gap"] =
      std::abs(primal - grid::dual_objective(grid, du, result.demand)) / (1.0 + std::abs(primal));

  // Lower level: best nonnegative multipliers for the given flows.
  if (result.has_traffic) {
    const int na = qp.num_arcs();
    const int nr = qp.num_routes();
    const int nw = qp.num_pairs();
    const Eigen::VectorXd& xi = result.arc_flows;
    const Eigen::VectorXd& f = result.route_flows;
    const Eigen::VectorXd q = qp.q(result.lambda_c);
    rep.lower["primal_equality"] =
        std::max(inf_norm(qp.E * f - qp.m) / (1.0 + inf_norm(qp.m)), inf_norm(qp.A * f - xi) / (1.0 + inf_norm(xi)));
    const Eigen::VectorXd tslack = qp.h - qp.G * xi;
    rep.lower["primal_inequality"] = max_positive(-tslack) / (1.0 + inf_norm(qp.h));

    const double act = 1e-7 * (1.0 + inf_norm(xi));
    std::vector<int> tight;
    for (int j = 0; j < 2 * na; ++j)
      if (tslack(j) <= act) tight.push_back(j);
    const int nt = static_cast<int>(tight.size());
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(na + nr, nw + na + nt);
    K.block(na, 0, nr, nw) = qp.E.transpose();
    K.block(0, nw, na, na) = -Eigen::MatrixXd::Identity(na, na);
    K.block(na, nw, nr, na) = qp.A.transpose();
    for (int t = 0; t < nt; ++t) K.block(0, nw + na + t, na, 1) = qp.G.row(tight[static_cast<size_t>(t)]).transpose();
    Eigen::VectorXd g0(na + nr);
    g0 << qp.Q * xi + q, 2.0 * qp.route_regularization * f;

    qp::QpProblem ls = qp::QpProblem::with_size(K.cols());
    ls.H = K.transpose() * K;
    ls.c = K.transpose() * g0;
    ls.Aineq = Eigen::MatrixXd::Zero(nt, K.cols());
    ls.bineq = Eigen::VectorXd::Zero(nt);
    for (int t = 0; t < nt; ++t) ls.Aineq(t, nw + na + t) = -1.0;
    const qp::PrimalDualPoint fit = qp::solve_qp(ls);
    const double sscale = 1.0 + inf_norm(q) + inf_norm(qp.Q * xi);
    rep.lower["stationarity"] = inf_norm(K * fit.x + g0) / sscale;
    double comp = 0.0;
    for (int t = 0; t < nt; ++t)
      comp = std::max(comp, std::abs(fit.x(nw + na + t) * tslack(tight[static_cast<size_t>(t)])));
    rep.lower["complementarity"] = comp / (sscale * (1.0 + inf_norm(qp.h)));
  }

  for (const auto& [k, v] : rep.upper) rep.upper_max = std::max(rep.upper_max, v);
  for (const auto& [k, v] : rep.lower) rep.lower_max = std::max(rep.lower_max, v);
  return rep;
}

BilevelResult perturb_prices(const BilevelResult& result, double shift) {
  BilevelResult out = result;
  out.lambda.array() += shift;
  out.duals.lambda.array() += shift;
  out.lambda_c.array() += shift;
  return out;
}

BaselineResult baseline_lowest_price(const grid::DistributionCase& grid, const traffic::ExtendedTrafficNetwork& net,
                                     const traffic::CompactQP& qp, const BaselineOptions& options) {
  const int nc = qp.num_stations();
  const int na = qp.num_arcs();
  const Eigen::MatrixXd S = grid.station_selector();
  BaselineResult res;
  Eigen::VectorXd demand = Eigen::VectorXd::Zero(nc);
  grid::OpfSolution opf = grid::solve_opf(grid, demand);
  traffic::TrafficSolution flows;

  for (int round = 1; round <= options.max_rounds; ++round) {
    const Eigen::VectorXd lambda_c = S.transpose() * opf.duals.lambda;
    std::vector<int> order(static_cast<size_t>(nc));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return lambda_c(a) < lambda_c(b); });

    bool found = false;
    for (int open = 1; open <= std::max(nc, 1) && !found; ++open) {
      traffic::CompactQP restricted = qp;
      for (int k = open; k < nc; ++k) restricted.h(na + net.stations[static_cast<size_t>(order[static_cast<size_t>(k)])].charge_arc) = 0.0;
      try {
        flows = traffic::solve_traffic(restricted, net, lambda_c, options.solver);
      } catch (const qp::QpError& e) {
        if (e.status() == qp::QpStatus::kInfeasible) continue;
        throw Error(ErrorKind::kSolver, std::string("baseline: ") + e.what());
      }
      if (nc > 0 && open < nc) {
        const traffic::ChargingStation& last = net.stations[static_cast<size_t>(order[static_cast<size_t>(open - 1)])];
        const double cap = last.flow_cap;
        if (flows.arc_flows(last.charge_arc) >= cap - 1e-9 * (1.0 + cap)) continue;
      }
      found = true;
      res.open_stations.assign(order.begin(), order.begin() + std::min(open, nc));
    }
    if (!found) throw Error(ErrorKind::kInfeasible, "baseline: traffic demand cannot be served by the stations");

    res.previous_demand = demand;
    res.last_demand = flows.demand;
    const double change = (flows.demand - demand).lpNorm<Eigen::Infinity>();
    demand = flows.demand;
    opf = grid::solve_opf(grid, demand);
    res.rounds = round;
    if (change < options.tolerance) {
      res.converged = true;
      break;
    }
  }

  res.lambda = opf.duals.lambda;
  res.lambda_c = S.transpose() * res.lambda;
  res.demand = demand;
  res.arc_flows = flows.arc_flows;
  res.route_flows = flows.route_flows;
  res.opf = opf;
  res.idso_cost = opf.objective;
  res.latency_cost = flows.latency_cost;
  res.itso_cost = flows.latency_cost + res.lambda_c.dot(demand);
  res.combined_cost = res.idso_cost + res.latency_cost;
  return res;
}

BilevelResult as_bilevel_result(const BaselineResult& baseline) {
  BilevelResult r;
  r.lambda = baseline.lambda;
  r.lambda_c = baseline.lambda_c;
  r.demand = baseline.demand;
  r.duals = baseline.opf.duals;
  r.opf = baseline.opf;
  r.idso_cost = baseline.idso_cost;
  r.has_traffic = true;
  r.arc_flows = baseline.arc_flows;
  r.route_flows = baseline.route_flows;
  r.traffic_demand = baseline.demand;
  r.latency_cost = baseline.latency_cost;
  r.charging_expense = baseline.lambda_c.dot(baseline.demand);
  r.itso_cost = baseline.itso_cost;
  r.combined_cost = baseline.combined_cost;
  return r;
}

}  // namespace evprice::bilevel
