#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "evprice/qp.hpp"

namespace evprice::grid {

struct Bus {
  std::string id;
  double load = 0.0;  // kWh
  double v_min = 0.95;
  double v_max = 1.05;
};

struct Line {
  int from = 0;
  int to = 0;
  double r = 0.0;
  double x = 0.0;
  double flow_limit = 0.0;
};

struct Generator {
  std::string id;
  int bus = 0;
  double capacity = 0.0;
  double cost = 0.0;  // $/kWh
};

struct DistributionCase {
  std::vector<Bus> buses;
  std::vector<Line> lines;
  std::vector<Generator> generators;
  // Bus index of each charging station, in station order.
  std::vector<int> station_buses;

  int num_buses() const { return static_cast<int>(buses.size()); }
  int num_lines() const { return static_cast<int>(lines.size()); }
  int num_generators() const { return static_cast<int>(generators.size()); }
  int num_stations() const { return static_cast<int>(station_buses.size()); }
  int bus_index(const std::string& id) const;  // -1 if absent

  /// Throws Error(kInput) on bad references, zero impedance, v_min > v_max,
  /// negative capacity or cost, or a disconnected graph.
  void validate() const;
  // Lowest-index bus hosting a generator (0 when there are none).
  int reference_bus() const;
  // |N| × |C| selector mapping station prices out of nodal prices.
  Eigen::MatrixXd station_selector() const;
  // Per-bus charging demand from per-station demand.
  Eigen::VectorXd bus_demand(const Eigen::VectorXd& station_demand) const;
};

struct FlowCoefficients {
  Eigen::VectorXd K1;  // xr/(r² + x²)
  Eigen::VectorXd K2;  // x²/(r² + x²)
};

FlowCoefficients flow_coefficients(const DistributionCase& grid);

/// OPF linear program over x = (g per generator, v per bus, θ per bus).
///
/// Equality rows: nodal balance −Σg + Σ outgoing flow = −(l + d), whose
/// multipliers are the nodal prices λ, then θ_ref = 0.
/// Inequality rows, in order: g ≤ ḡ, −g ≤ 0, P ≤ f, −P ≤ f, v ≤ v̄, −v ≤ −v̲.
struct OpfLayout {
  int num_generators = 0;
  int num_buses = 0;
  int num_lines = 0;
  int g(int k) const { return k; }
  int v(int i) const { return num_generators + i; }
  int theta(int i) const { return num_generators + num_buses + i; }
  int size() const { return num_generators + 2 * num_buses; }
};

qp::QpProblem assemble_opf(const DistributionCase& grid, const Eigen::VectorXd& station_demand);

/// Line flows P = K1·Δv + K2·Δθ, oriented from → to.
Eigen::VectorXd line_flows(const DistributionCase& grid, const Eigen::VectorXd& v, const Eigen::VectorXd& theta);

/// Dual variables of the OPF. Line duals are per line in the from → to
/// orientation; the reverse ordered pair carries zero.
struct OpfDuals {
  Eigen::VectorXd tau_up;    // per generator
  Eigen::VectorXd tau_lo;    // per generator
  Eigen::VectorXd mu_up;     // per bus
  Eigen::VectorXd mu_lo;     // per bus
  Eigen::VectorXd lambda;    // per bus
  Eigen::VectorXd eta_up;    // per line
  Eigen::VectorXd eta_lo;    // per line
};

struct OpfSolution {
  Eigen::VectorXd g;
  Eigen::VectorXd v;
  Eigen::VectorXd theta;
  Eigen::VectorXd flows;
  OpfDuals duals;
  double objective = 0.0;
  // Perturbing the loads by 1e-7 moved some λ by more than 1e-3.
  bool degenerate_prices = false;
  qp::PrimalDualPoint point;
};

struct OpfOptions {
  bool check_degeneracy = false;
  qp::SolverOptions solver;
};

OpfSolution solve_opf(const DistributionCase& grid, const Eigen::VectorXd& station_demand, const OpfOptions& options = {});

/// Dual of the OPF over z = (τ̄, μ̄, μ̲, λ, η̄, η̲), written as a
/// minimization of the negated dual objective without its Σλd term:
///
///   min  ḡᵀτ̄ + v̄ᵀμ̄ − v̲ᵀμ̲ − lᵀλ + fᵀ(η̄ + η̲)
///   s.t. angle stationarity (one row per bus), voltage stationarity
///        (one row per bus), λ_bus(k) − τ̄_k ≤ c_k, and τ̄, μ, η ≥ 0.
///
/// τ̲ is eliminated: τ̲_k = c_k − λ_bus(k) + τ̄_k.
struct DualLayout {
  int num_generators = 0;
  int num_buses = 0;
  int num_lines = 0;
  int tau_up(int k) const { return k; }
  int mu_up(int i) const { return num_generators + i; }
  int mu_lo(int i) const { return num_generators + num_buses + i; }
  int lambda(int i) const { return num_generators + 2 * num_buses + i; }
  int eta_up(int l) const { return num_generators + 3 * num_buses + l; }
  int eta_lo(int l) const { return num_generators + 3 * num_buses + num_lines + l; }
  int size() const { return num_generators + 3 * num_buses + 2 * num_lines; }
};

struct DualProblem {
  DualLayout layout;
  qp::QpProblem problem;  // the symbolic Σλd term is left out
  Eigen::MatrixXd lambda_c_selector;  // |C| × size(): z ↦ λ_c
};

DualProblem assemble_dual(const DistributionCase& grid);

/// Packs OPF duals into the DualLayout vector and back.
Eigen::VectorXd pack_duals(const DualLayout& layout, const OpfDuals& duals);
OpfDuals unpack_duals(const DistributionCase& grid, const DualLayout& layout, const Eigen::VectorXd& z);

/// Value of the dual objective including Σλ_i d_i.
double dual_objective(const DistributionCase& grid, const OpfDuals& duals, const Eigen::VectorXd& station_demand);

/// Counts dual variables in the full form: τ̄ and τ̲ per generator, μ̄, μ̲
/// and λ per bus, η̄ and η̲ per ordered bus pair.
int dual_variable_count(const DistributionCase& grid);

}  // namespace evprice::grid
