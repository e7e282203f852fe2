#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "evprice/grid.hpp"
#include "evprice/mpqp.hpp"
#include "evprice/traffic.hpp"

namespace evprice::bilevel {

/// Upper-level objective inside one critical region, on top of the negated
/// dual objective without its Σλd term.
enum class RegionObjective {
  // −V_i(λ_c), the lower-level optimal value (∇V_i = π_i). Reproduces the
  // joint optimum.
  kValueFunction,
  // −λ_cᵀπ_i(λ_c), the charging expense at the induced demand.
  kChargingExpense,
};

const char* to_string(RegionObjective objective);
RegionObjective parse_region_objective(const std::string& name);

struct RegionCandidate {
  int region = -1;
  bool feasible = false;
  bool convex = true;  // false: −D had a negative eigenvalue and was clipped
  double objective = 0.0;
  Eigen::VectorXd z;  // grid::DualLayout vector
  Eigen::VectorXd lambda_c;
  std::string status;
};

RegionCandidate solve_region(const grid::DualProblem& dual, const mpqp::CriticalRegion& region,
                             RegionObjective objective = RegionObjective::kValueFunction,
                             const qp::SolverOptions& solver = {});

struct BilevelOptions {
  RegionObjective objective = RegionObjective::kValueFunction;
  int workers = 1;
  qp::SolverOptions solver;
  bool check_degeneracy = true;
};

struct BilevelResult {
  int region = -1;
  double objective = 0.0;        // winning region objective
  Eigen::VectorXd lambda;        // per bus
  Eigen::VectorXd lambda_c;      // per station
  Eigen::VectorXd demand;        // π(λ_c), per station
  grid::OpfDuals duals;
  grid::OpfSolution opf;         // OPF at the induced demand
  double idso_cost = 0.0;        // cᵀg at the induced demand
  double idso_dual_objective = 0.0;
  int feasible_regions = 0;
  int nonconvex_regions = 0;

  // Filled by attach_traffic.
  bool has_traffic = false;
  Eigen::VectorXd arc_flows;
  Eigen::VectorXd route_flows;
  Eigen::VectorXd traffic_demand;
  double latency_cost = 0.0;
  double charging_expense = 0.0;
  double itso_cost = 0.0;
  double combined_cost = 0.0;    // IDSO + latency
};

/// Solves every region's upper-level QP and keeps the lowest objective,
/// ties resolved to the lowest region id.
BilevelResult solve_bilevel(const grid::DistributionCase& grid, const mpqp::PiecewiseAffineDemandFunction& pi,
                            const BilevelOptions& options = {});

/// Re-solves the lower level at λ_c and fills the traffic-side fields.
void attach_traffic(BilevelResult& result, const traffic::CompactQP& qp, const traffic::ExtendedTrafficNetwork& net,
                    const qp::SolverOptions& solver = {});

struct JointResult {
  Eigen::VectorXd g;
  Eigen::VectorXd v;
  Eigen::VectorXd theta;
  Eigen::VectorXd arc_flows;
  Eigen::VectorXd route_flows;
  Eigen::VectorXd lambda;
  Eigen::VectorXd lambda_c;
  Eigen::VectorXd demand;
  double idso_cost = 0.0;
  double latency_cost = 0.0;
  double combined_cost = 0.0;
  qp::PrimalDualPoint point;
};

/// Single QP over (g, v, θ, ξ, f): generation cost plus latency, with the
/// station demand e·ξ substituted into the nodal balance.
JointResult solve_joint(const grid::DistributionCase& grid, const traffic::ExtendedTrafficNetwork& net,
                        const traffic::CompactQP& qp, const qp::SolverOptions& solver = {});

struct KktReport {
  std::map<std::string, double> upper;
  std::map<std::string, double> lower;
  double upper_max = 0.0;
  double lower_max = 0.0;
  double max() const { return std::max(upper_max, lower_max); }
};

/// Stacked KKT residuals of both levels at a candidate equilibrium. The
/// upper level uses the result's duals with its OPF primal; the lower level
/// fits nonnegative multipliers to the result's flows at its prices.
KktReport verify_kkt_equilibrium(const BilevelResult& result, const grid::DistributionCase& grid,
                                 const traffic::CompactQP& qp);

/// Copy of `result` with every nodal price raised by `shift`.
BilevelResult perturb_prices(const BilevelResult& result, double shift);

struct BaselineOptions {
  int max_rounds = 50;
  double tolerance = 1e-6;
  qp::SolverOptions solver;
};

struct BaselineResult {
  Eigen::VectorXd lambda;
  Eigen::VectorXd lambda_c;
  Eigen::VectorXd demand;
  Eigen::VectorXd arc_flows;
  Eigen::VectorXd route_flows;
  grid::OpfSolution opf;  // at the final demand
  std::vector<int> open_stations;
  double idso_cost = 0.0;
  double latency_cost = 0.0;
  double itso_cost = 0.0;
  double combined_cost = 0.0;
  int rounds = 0;
  bool converged = false;
  // The last two demand iterates, for diagnosing oscillation.
  Eigen::VectorXd previous_demand;
  Eigen::VectorXd last_demand;
};

/// Lowest-price charging: stations open in ascending price order (ties by
/// index) until the last one opened is not saturated; closed stations get a
/// zero charge capacity. Alternates with the OPF until demand settles.
BaselineResult baseline_lowest_price(const grid::DistributionCase& grid, const traffic::ExtendedTrafficNetwork& net,
                                     const traffic::CompactQP& qp, const BaselineOptions& options = {});

/// The baseline outcome in BilevelResult form, for verify_kkt_equilibrium.
BilevelResult as_bilevel_result(const BaselineResult& baseline);

}  // namespace evprice::bilevel
