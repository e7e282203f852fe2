#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "evprice/qp.hpp"

namespace evprice::traffic {

enum class ArcKind { kPhysical, kNoCharge, kCharge };

const char* to_string(ArcKind kind);

struct Arc {
  std::string id;
  std::string tail;
  std::string head;
  double free_flow_time = 0.0;   // ξ⁰, time units
  double capacity_slope = 1e4;   // R, vehicles per time unit
  double flow_cap = 0.0;         // ξ̄, vehicles
  ArcKind kind = ArcKind::kPhysical;
};

struct ChargingStation {
  std::string id;
  std::string traffic_node;
  std::string grid_bus;
  double avg_demand = 12.0;      // e, kWh per vehicle
  double charge_rate = 200.0;    // ρ, kW
  double flow_cap = 0.0;         // vehicles through the charge arc
  double free_flow_time = 0.0;   // ξ⁰ on the charge arc
  double capacity_slope = 1e4;   // R on the charge arc
  // Bypass capacity; negative selects 2·Σm_w + 1, which never binds.
  double bypass_cap = -1.0;
  // Extended-network arc indices, set by build_extended_network.
  int charge_arc = -1;
  int bypass_arc = -1;

  double demand_cap() const { return avg_demand * flow_cap; }
};

/// An O-D pair as read from input. Each route is a token list: physical arc
/// ids, optionally interleaved with "<station>:charge" or "<station>:bypass".
struct OdPairSpec {
  std::string origin;
  std::string destination;
  double demand = 0.0;
  std::vector<std::vector<std::string>> routes;
};

struct OdPair {
  std::string origin;
  std::string destination;
  double demand = 0.0;
  // Routes as extended-arc index lists, in path order.
  std::vector<std::vector<int>> routes;
};

/// Base traffic network plus stations and O-D data, before extension.
struct TrafficInput {
  double time_value = 1e3;  // γ
  std::vector<std::string> nodes;
  std::vector<Arc> arcs;
  std::vector<ChargingStation> stations;
  std::vector<OdPairSpec> od_pairs;
};

struct BuildOptions {
  // Split every route that passes a station without a charge/bypass token
  // into both variants. Without it such routes are rejected.
  bool expand_routes = true;
  double route_regularization = 1e-8;  // ε_f
};

struct ExtendedTrafficNetwork {
  std::vector<std::string> nodes;
  std::vector<Arc> arcs;  // [physical | no_charge | charge]
  std::vector<ChargingStation> stations;
  std::vector<OdPair> od_pairs;
  double time_value = 1e3;
  double route_regularization = 1e-8;
  int num_physical = 0;

  int num_arcs() const { return static_cast<int>(arcs.size()); }
  int num_stations() const { return static_cast<int>(stations.size()); }
  int num_routes() const;
  int station_index(const std::string& id) const;  // -1 if absent
};

/// Inserts one auxiliary node per station; the station node keeps its
/// incoming arcs, its outgoing arcs move to the auxiliary node, and the
/// charge and bypass arcs connect the two.
ExtendedTrafficNetwork build_extended_network(const TrafficInput& input, const BuildOptions& options = {});

/// τ_a(flow). `station` is required for charge arcs.
double travel_time(const Arc& arc, double flow, const ChargingStation* station = nullptr);

/// Traffic assignment QP over x = (ξ, f):
///
///   min ½ξᵀQξ + q(λ)ᵀξ + ε_f‖f‖²
///   s.t. E f = m  (ψ),  A f − ξ = 0  (δ),  G ξ ≤ h  (φ)
///
/// with q(λ) = q_base + [0; 0; J λ].
struct CompactQP {
  Eigen::MatrixXd Q;
  Eigen::VectorXd q_base;
  Eigen::MatrixXd J;
  Eigen::MatrixXd E;
  Eigen::VectorXd m;
  Eigen::MatrixXd A;
  Eigen::MatrixXd G;
  Eigen::VectorXd h;
  double route_regularization = 0.0;

  int num_arcs() const { return static_cast<int>(Q.rows()); }
  int num_routes() const { return static_cast<int>(A.cols()); }
  int num_pairs() const { return static_cast<int>(E.rows()); }
  int num_stations() const { return static_cast<int>(J.rows()); }

  Eigen::VectorXd q(const Eigen::VectorXd& lambda_c) const;
  qp::QpProblem problem(const Eigen::VectorXd& lambda_c) const;
  // Equality rows: the first num_pairs() carry ψ, the rest δ.
  // Inequality rows: G, so rows [0, |A^e|) are ξ ≥ 0 and the rest ξ ≤ ξ̄.
};

/// O-D pairs without routes must have zero demand and are left out of E.
CompactQP assemble_traffic_qp(const ExtendedTrafficNetwork& net);

/// d_i = e_i·ξ on station i's charge arc.
Eigen::VectorXd demand_from_flows(const ExtendedTrafficNetwork& net, const Eigen::VectorXd& arc_flows);

struct TrafficSolution {
  Eigen::VectorXd arc_flows;
  Eigen::VectorXd route_flows;
  Eigen::VectorXd demand;  // kWh per station
  double latency_cost = 0.0;       // Σ γ ξ τ(ξ)
  double charging_expense = 0.0;   // Σ λ d
  double itso_cost = 0.0;          // latency + expense
  double value = 0.0;              // QP optimum, regularization included
  qp::PrimalDualPoint point;
};

TrafficSolution solve_traffic(const CompactQP& qp, const ExtendedTrafficNetwork& net, const Eigen::VectorXd& lambda_c,
                              const qp::SolverOptions& options = {});

/// Σ γ ξ τ(ξ) written through the compact data: ½ξᵀQξ + q_baseᵀξ.
double latency_cost(const CompactQP& qp, const Eigen::VectorXd& arc_flows);

}  // namespace evprice::traffic
