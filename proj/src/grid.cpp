#include "evprice/grid.hpp"

#include <numeric>

namespace evprice::grid {

int DistributionCase::bus_index(const std::string& id) const {
  for (size_t i = 0; i < buses.size(); ++i)
    if (buses[i].id == id) return static_cast<int>(i);
  return -1;
}

void DistributionCase::validate() const {
  const int n = num_buses();
  if (n == 0) throw Error(ErrorKind::kInput, "grid: no buses");
  for (const Bus& b : buses) {
    if (!(b.v_min < b.v_max)) throw Error(ErrorKind::kInput, "grid: bus " + b.id + " has v_min ≥ v_max");
  }
  std::vector<int> parent(static_cast<size_t>(n));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int a) {
    while (parent[static_cast<size_t>(a)] != a) a = parent[static_cast<size_t>(a)] = parent[static_cast<size_t>(parent[static_cast<size_t>(a)])];
    return a;
  };
  int components = n;
  for (size_t l = 0; l < lines.size(); ++l) {
    const Line& ln = lines[l];
    const std::string where = "grid: line " + std::to_string(l);
    if (ln.from < 0 || ln.from >= n || ln.to < 0 || ln.to >= n || ln.from == ln.to)
      throw Error(ErrorKind::kInput, where + " has bad endpoints");
    if (!(ln.r * ln.r + ln.x * ln.x > 0.0)) throw Error(ErrorKind::kInput, where + " has zero impedance");
    if (ln.r < 0.0 || ln.x < 0.0) throw Error(ErrorKind::kInput, where + " has negative impedance");
    if (!(ln.flow_limit >= 0.0)) throw Error(ErrorKind::kInput, where + " has a negative flow limit");
    const int a = find(ln.from), b = find(ln.to);
    if (a != b) {
      parent[static_cast<size_t>(a)] = b;
      --components;
    }
  }
  if (components != 1) throw Error(ErrorKind::kInput, "grid: network is not connected");
  for (const Generator& g : generators) {
    if (g.bus < 0 || g.bus >= n) throw Error(ErrorKind::kInput, "grid: generator " + g.id + " on unknown bus");
    if (!(g.capacity >= 0.0) || !(g.cost >= 0.0))
      throw Error(ErrorKind::kInput, "grid: generator " + g.id + " needs nonnegative capacity and cost");
  }
  for (int b : station_buses)
    if (b < 0 || b >= n) throw Error(ErrorKind::kInput, "grid: station mapped to unknown bus");
}

int DistributionCase::reference_bus() const {
  int ref = -1;
  for (const Generator& g : generators)
    if (ref < 0 || g.bus < ref) ref = g.bus;
  return ref < 0 ? 0 : ref;
}

Eigen::MatrixXd DistributionCase::station_selector() const {
  Eigen::MatrixXd S = Eigen::MatrixXd::Zero(num_buses(), num_stations());
  for (int i = 0; i < num_stations(); ++i) S(station_buses[static_cast<size_t>(i)], i) = 1.0;
  return S;
}

Eigen::VectorXd DistributionCase::bus_demand(const Eigen::VectorXd& station_demand) const {
  if (station_demand.size() != num_stations()) throw Error(ErrorKind::kInput, "grid: demand vector has wrong length");
  return station_selector() * station_demand;
}

FlowCoefficients flow_coefficients(const DistributionCase& grid) {
  FlowCoefficients k;
  k.K1.resize(grid.num_lines());
  k.K2.resize(grid.num_lines());
  for (int l = 0; l < grid.num_lines(); ++l) {
    const Line& ln = grid.lines[static_cast<size_t>(l)];
    const double z2 = ln.r * ln.r + ln.x * ln.x;
    if (!(z2 > 0.0)) throw Error(ErrorKind::kInput, "grid: zero-impedance line " + std::to_string(l));
    k.K1(l) = ln.x * ln.r / z2;
    k.K2(l) = ln.x * ln.x / z2;
  }
  return k;
}

namespace {

OpfLayout opf_layout(const DistributionCase& grid) {
  return {grid.num_generators(), grid.num_buses(), grid.num_lines()};
}

// Rows of P = K1·Δv + K2·Δθ over the OPF variable vector.
Eigen::MatrixXd flow_rows(const DistributionCase& grid, const FlowCoefficients& k, const OpfLayout& lay) {
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(grid.num_lines(), lay.size());
  for (int l = 0; l < grid.num_lines(); ++l) {
    const Line& ln = grid.lines[static_cast<size_t>(l)];
    P(l, lay.v(ln.from)) += k.K1(l);
    P(l, lay.v(ln.to)) -= k.K1(l);
    P(l, lay.theta(ln.from)) += k.K2(l);
    P(l, lay.theta(ln.to)) -= k.K2(l);
  }
  return P;
}

}  // namespace

qp::QpProblem assemble_opf(const DistributionCase& grid, const Eigen::VectorXd& station_demand) {
  grid.validate();
  const OpfLayout lay = opf_layout(grid);
  const int n = grid.num_buses();
  const int ng = grid.num_generators();
  const int nl = grid.num_lines();
  const FlowCoefficients k = flow_coefficients(grid);
  const Eigen::MatrixXd P = flow_rows(grid, k, lay);
  const Eigen::VectorXd d = grid.bus_demand(station_demand);

  qp::QpProblem p = qp::QpProblem::with_size(lay.size());
  for (int g = 0; g < ng; ++g) p.c(lay.g(g)) = grid.generators[static_cast<size_t>(g)].cost;

  p.Aeq = Eigen::MatrixXd::Zero(n + 1, lay.size());
  p.beq = Eigen::VectorXd::Zero(n + 1);
  for (int g = 0; g < ng; ++g) p.Aeq(grid.generators[static_cast<size_t>(g)].bus, lay.g(g)) = -1.0;
  for (int l = 0; l < nl; ++l) {
    const Line& ln = grid.lines[static_cast<size_t>(l)];
    p.Aeq.row(ln.from) += P.row(l);
    p.Aeq.row(ln.to) -= P.row(l);
  }
  for (int i = 0; i < n; ++i) p.beq(i) = -(grid.buses[static_cast<size_t>(i)].load + d(i));
  p.Aeq(n, lay.theta(grid.reference_bus())) = 1.0;

  const int m = 2 * ng + 2 * nl + 2 * n;
  p.Aineq = Eigen::MatrixXd::Zero(m, lay.size());
  p.bineq = Eigen::VectorXd::Zero(m);
  int row = 0;
  for (int g = 0; g < ng; ++g, ++row) {
    p.Aineq(row, lay.g(g)) = 1.0;
    p.bineq(row) = grid.generators[static_cast<size_t>(g)].capacity;
  }
  for (int g = 0; g < ng; ++g, ++row) p.Aineq(row, lay.g(g)) = -1.0;
  for (int l = 0; l < nl; ++l, ++row) {
    p.Aineq.row(row) = P.row(l);
    p.bineq(row) = grid.lines[static_cast<size_t>(l)].flow_limit;
  }
  for (int l = 0; l < nl; ++l, ++row) {
    p.Aineq.row(row) = -P.row(l);
    p.bineq(row) = grid.lines[static_cast<size_t>(l)].flow_limit;
  }
  for (int i = 0; i < n; ++i, ++row) {
    p.Aineq(row, lay.v(i)) = 1.0;
    p.bineq(row) = grid.buses[static_cast<size_t>(i)].v_max;
  }
  for (int i = 0; i < n; ++i, ++row) {
    p.Aineq(row, lay.v(i)) = -1.0;
    p.bineq(row) = -grid.buses[static_cast<size_t>(i)].v_min;
  }
  return p;
}

Eigen::VectorXd line_flows(const DistributionCase& grid, const Eigen::VectorXd& v, const Eigen::VectorXd& theta) {
  const FlowCoefficients k = flow_coefficients(grid);
  Eigen::VectorXd P(grid.num_lines());
  for (int l = 0; l < grid.num_lines(); ++l) {
    const Line& ln = grid.lines[static_cast<size_t>(l)];
    P(l) = k.K1(l) * (v(ln.from) - v(ln.to)) + k.K2(l) * (theta(ln.from) - theta(ln.to));
  }
  return P;
}

namespace {

OpfSolution solve_opf_once(const DistributionCase& grid, const Eigen::VectorXd& station_demand,
                           const qp::SolverOptions& solver) {
  const qp::QpProblem p = assemble_opf(grid, station_demand);
  const OpfLayout lay = opf_layout(grid);
  const int n = grid.num_buses();
  const int ng = grid.num_generators();
  const int nl = grid.num_lines();
  OpfSolution sol;
  try {
    sol.point = qp::solve_qp(p, solver);
  } catch (const qp::QpError& e) {
    if (e.status() == qp::QpStatus::kInfeasible) throw Error(ErrorKind::kInfeasible, std::string("opf: ") + e.what());
    throw Error(ErrorKind::kSolver, std::string("opf: ") + e.what());
  }
  const Eigen::VectorXd& x = sol.point.x;
  sol.g = x.segment(lay.g(0), ng);
  sol.v = x.segment(lay.v(0), n);
  sol.theta = x.segment(lay.theta(0), n);
  sol.flows = line_flows(grid, sol.v, sol.theta);
  sol.objective = p.c.dot(x);

  const Eigen::VectorXd& z = sol.point.ineq_duals;
  OpfDuals& du = sol.duals;
  du.lambda = sol.point.eq_duals.head(n);
  du.tau_up = z.segment(0, ng);
  du.tau_lo = z.segment(ng, ng);
  du.eta_up = z.segment(2 * ng, nl);
  du.eta_lo = z.segment(2 * ng + nl, nl);
  du.mu_up = z.segment(2 * ng + 2 * nl, n);
  du.mu_lo = z.segment(2 * ng + 2 * nl + n, n);
  return sol;
}

}  // namespace

OpfSolution solve_opf(const DistributionCase& grid, const Eigen::VectorXd& station_demand, const OpfOptions& options) {
  OpfSolution sol = solve_opf_once(grid, station_demand, options.solver);
  if (options.check_degeneracy) {
    for (double shift : {1e-7, -1e-7}) {
      DistributionCase moved = grid;
      for (Bus& b : moved.buses) b.load += shift;
      try {
        const OpfSolution other = solve_opf_once(moved, station_demand, options.solver);
        if ((other.duals.lambda - sol.duals.lambda).lpNorm<Eigen::Infinity>() > 1e-3) sol.degenerate_prices = true;
      } catch (const Error&) {
        // Sitting exactly on the capacity boundary is itself ambiguous.
        sol.degenerate_prices = true;
      }
    }
  }
  return sol;
}

DualProblem assemble_dual(const DistributionCase& grid) {
  grid.validate();
  DualProblem dp;
  DualLayout& lay = dp.layout;
  lay = {grid.num_generators(), grid.num_buses(), grid.num_lines()};
  const int n = lay.num_buses;
  const int ng = lay.num_generators;
  const int nl = lay.num_lines;
  const FlowCoefficients k = flow_coefficients(grid);

  qp::QpProblem& p = dp.problem;
  p = qp::QpProblem::with_size(lay.size());
  for (int g = 0; g < ng; ++g) p.c(lay.tau_up(g)) = grid.generators[static_cast<size_t>(g)].capacity;
  for (int i = 0; i < n; ++i) {
    const Bus& b = grid.buses[static_cast<size_t>(i)];
    p.c(lay.mu_up(i)) = b.v_max;
    p.c(lay.mu_lo(i)) = -b.v_min;
    p.c(lay.lambda(i)) = -b.load;
  }
  for (int l = 0; l < nl; ++l) {
    p.c(lay.eta_up(l)) = grid.lines[static_cast<size_t>(l)].flow_limit;
    p.c(lay.eta_lo(l)) = grid.lines[static_cast<size_t>(l)].flow_limit;
  }

  // Stationarity in θ_i and v_i: Σ_lines ±K (λ_from − λ_to + η̄ − η̲) (+ μ̄_i − μ̲_i) = 0.
  p.Aeq = Eigen::MatrixXd::Zero(2 * n, lay.size());
  p.beq = Eigen::VectorXd::Zero(2 * n);
  for (int l = 0; l < nl; ++l) {
    const Line& ln = grid.lines[static_cast<size_t>(l)];
    for (int side = 0; side < 2; ++side) {
      const int bus = side == 0 ? ln.from : ln.to;
      const double sign = side == 0 ? 1.0 : -1.0;
      for (int block = 0; block < 2; ++block) {
        const double kk = block == 0 ? k.K2(l) : k.K1(l);
        const int row = block * n + bus;
        p.Aeq(row, lay.lambda(ln.from)) += sign * kk;
        p.Aeq(row, lay.lambda(ln.to)) -= sign * kk;
        p.Aeq(row, lay.eta_up(l)) += sign * kk;
        p.Aeq(row, lay.eta_lo(l)) -= sign * kk;
      }
    }
  }
  for (int i = 0; i < n; ++i) {
    p.Aeq(n + i, lay.mu_up(i)) = 1.0;
    p.Aeq(n + i, lay.mu_lo(i)) = -1.0;
  }

  const int nonneg = ng + 2 * n + 2 * nl;
  p.Aineq = Eigen::MatrixXd::Zero(ng + nonneg, lay.size());
  p.bineq = Eigen::VectorXd::Zero(ng + nonneg);
  for (int g = 0; g < ng; ++g) {
    const Generator& gen = grid.generators[static_cast<size_t>(g)];
    p.Aineq(g, lay.lambda(gen.bus)) = 1.0;
    p.Aineq(g, lay.tau_up(g)) = -1.0;
    p.bineq(g) = gen.cost;
  }
  int row = ng;
  auto nonnegative = [&](int col) { p.Aineq(row++, col) = -1.0; };
  for (int g = 0; g < ng; ++g) nonnegative(lay.tau_up(g));
  for (int i = 0; i < n; ++i) nonnegative(lay.mu_up(i));
  for (int i = 0; i < n; ++i) nonnegative(lay.mu_lo(i));
  for (int l = 0; l < nl; ++l) nonnegative(lay.eta_up(l));
  for (int l = 0; l < nl; ++l) nonnegative(lay.eta_lo(l));

  dp.lambda_c_selector = Eigen::MatrixXd::Zero(grid.num_stations(), lay.size());
  for (int s = 0; s < grid.num_stations(); ++s)
    dp.lambda_c_selector(s, lay.lambda(grid.station_buses[static_cast<size_t>(s)])) = 1.0;
  return dp;
}

Eigen::VectorXd pack_duals(const DualLayout& lay, const OpfDuals& du) {
  Eigen::VectorXd z(lay.size());
  z.segment(lay.tau_up(0), lay.num_generators) = du.tau_up;
  z.segment(lay.mu_up(0), lay.num_buses) = du.mu_up;
  z.segment(lay.mu_lo(0), lay.num_buses) = du.mu_lo;
  z.segment(lay.lambda(0), lay.num_buses) = du.lambda;
  z.segment(lay.eta_up(0), lay.num_lines) = du.eta_up;
  z.segment(lay.eta_lo(0), lay.num_lines) = du.eta_lo;
  return z;
}

OpfDuals unpack_duals(const DistributionCase& grid, const DualLayout& lay, const Eigen::VectorXd& z) {
  OpfDuals du;
  du.tau_up = z.segment(lay.tau_up(0), lay.num_generators);
  du.mu_up = z.segment(lay.mu_up(0), lay.num_buses);
  du.mu_lo = z.segment(lay.mu_lo(0), lay.num_buses);
  du.lambda = z.segment(lay.lambda(0), lay.num_buses);
  du.eta_up = z.segment(lay.eta_up(0), lay.num_lines);
  du.eta_lo = z.segment(lay.eta_lo(0), lay.num_lines);
  du.tau_lo.resize(lay.num_generators);
  for (int g = 0; g < lay.num_generators; ++g) {
    const Generator& gen = grid.generators[static_cast<size_t>(g)];
    du.tau_lo(g) = gen.cost - du.lambda(gen.bus) + du.tau_up(g);
  }
  return du;
}

double dual_objective(const DistributionCase& grid, const OpfDuals& du, const Eigen::VectorXd& station_demand) {
  double value = 0.0;
  for (int i = 0; i < grid.num_buses(); ++i) {
    const Bus& b = grid.buses[static_cast<size_t>(i)];
    value += -du.mu_up(i) * b.v_max + du.mu_lo(i) * b.v_min + du.lambda(i) * b.load;
  }
  for (int g = 0; g < grid.num_generators(); ++g)
    value -= du.tau_up(g) * grid.generators[static_cast<size_t>(g)].capacity;
  for (int l = 0; l < grid.num_lines(); ++l)
    value -= grid.lines[static_cast<size_t>(l)].flow_limit * (du.eta_up(l) + du.eta_lo(l));
  value += du.lambda.dot(grid.bus_demand(station_demand));
  return value;
}

int dual_variable_count(const DistributionCase& grid) {
  return 2 * grid.num_generators() + 3 * grid.num_buses() + 2 * 2 * grid.num_lines();
}

}  // namespace evprice::grid
