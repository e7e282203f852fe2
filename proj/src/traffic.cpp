#include "evprice/traffic.hpp"

#include <map>
#include <set>

namespace evprice::traffic {

const char* to_string(ArcKind kind) {
  switch (kind) {
    case ArcKind::kPhysical: return "physical";
    case ArcKind::kNoCharge: return "no_charge";
    case ArcKind::kCharge: return "charge";
  }
  return "unknown";
}

int ExtendedTrafficNetwork::num_routes() const {
  int n = 0;
  for (const auto& od : od_pairs) n += static_cast<int>(od.routes.size());
  return n;
}

int ExtendedTrafficNetwork::station_index(const std::string& id) const {
  for (size_t i = 0; i < stations.size(); ++i)
    if (stations[i].id == id) return static_cast<int>(i);
  return -1;
}

namespace {

std::string aux_name(const std::string& node) { return node + "~aux"; }

void check_arc(const Arc& a) {
  if (a.kind != ArcKind::kNoCharge && !(a.capacity_slope > 0.0))
    throw Error(ErrorKind::kInput, "arc " + a.id + ": capacity_slope must be positive");
  if (!(a.flow_cap >= 0.0)) throw Error(ErrorKind::kInput, "arc " + a.id + ": flow_cap must be nonnegative");
  if (!(a.free_flow_time >= 0.0)) throw Error(ErrorKind::kInput, "arc " + a.id + ": negative free-flow time");
}

}  // namespace

ExtendedTrafficNetwork build_extended_network(const TrafficInput& input, const BuildOptions& options) {
  if (!(input.time_value > 0.0)) throw Error(ErrorKind::kInput, "traffic: time_value must be positive");
  if (!(options.route_regularization >= 0.0)) throw Error(ErrorKind::kInput, "traffic: negative route regularization");

  std::set<std::string> nodes(input.nodes.begin(), input.nodes.end());
  if (nodes.size() != input.nodes.size()) throw Error(ErrorKind::kInput, "traffic: duplicate node id");

  ExtendedTrafficNetwork net;
  net.time_value = input.time_value;
  net.route_regularization = options.route_regularization;
  net.nodes = input.nodes;
  net.num_physical = static_cast<int>(input.arcs.size());

  std::map<std::string, int> station_at_node;
  std::map<std::string, int> station_by_id;
  for (size_t i = 0; i < input.stations.size(); ++i) {
    const ChargingStation& s = input.stations[i];
    if (!nodes.count(s.traffic_node))
      throw Error(ErrorKind::kInput, "station " + s.id + ": unknown node " + s.traffic_node);
    if (station_at_node.count(s.traffic_node))
      throw Error(ErrorKind::kInput, "station " + s.id + ": node " + s.traffic_node + " already hosts a station");
    if (!station_by_id.emplace(s.id, static_cast<int>(i)).second)
      throw Error(ErrorKind::kInput, "station " + s.id + ": duplicate id");
    if (!(s.avg_demand > 0.0) || !(s.charge_rate > 0.0))
      throw Error(ErrorKind::kInput, "station " + s.id + ": avg_demand and charge_rate must be positive");
    station_at_node[s.traffic_node] = static_cast<int>(i);
  }

  std::map<std::string, int> arc_by_id;
  for (const Arc& base : input.arcs) {
    Arc a = base;
    a.kind = ArcKind::kPhysical;
    check_arc(a);
    if (!nodes.count(a.tail) || !nodes.count(a.head))
      throw Error(ErrorKind::kInput, "arc " + a.id + ": unknown node reference");
    if (station_at_node.count(a.tail)) a.tail = aux_name(a.tail);
    if (!arc_by_id.emplace(a.id, static_cast<int>(net.arcs.size())).second)
      throw Error(ErrorKind::kInput, "arc " + a.id + ": duplicate id");
    net.arcs.push_back(a);
  }

  double total_demand = 0.0;
  for (const auto& od : input.od_pairs) total_demand += std::max(od.demand, 0.0);

  net.stations = input.stations;
  const int nc = static_cast<int>(net.stations.size());
  for (int i = 0; i < nc; ++i) {
    ChargingStation& s = net.stations[static_cast<size_t>(i)];
    net.nodes.push_back(aux_name(s.traffic_node));
    Arc bypass;
    bypass.id = s.id + ":bypass";
    bypass.tail = s.traffic_node;
    bypass.head = aux_name(s.traffic_node);
    bypass.free_flow_time = 0.0;
    bypass.capacity_slope = 0.0;
    bypass.flow_cap = s.bypass_cap >= 0.0 ? s.bypass_cap : 2.0 * total_demand + 1.0;
    bypass.kind = ArcKind::kNoCharge;
    s.bypass_arc = net.num_physical + i;
    net.arcs.push_back(bypass);
  }
  for (int i = 0; i < nc; ++i) {
    ChargingStation& s = net.stations[static_cast<size_t>(i)];
    Arc charge;
    charge.id = s.id + ":charge";
    charge.tail = s.traffic_node;
    charge.head = aux_name(s.traffic_node);
    charge.free_flow_time = s.free_flow_time;
    charge.capacity_slope = s.capacity_slope;
    charge.flow_cap = s.flow_cap;
    charge.kind = ArcKind::kCharge;
    check_arc(charge);
    s.charge_arc = net.num_physical + nc + i;
    net.arcs.push_back(charge);
  }

  for (size_t w = 0; w < input.od_pairs.size(); ++w) {
    const OdPairSpec& spec = input.od_pairs[w];
    const std::string where = "od pair " + std::to_string(w);
    if (!nodes.count(spec.origin) || !nodes.count(spec.destination))
      throw Error(ErrorKind::kInput, where + ": unknown node reference");
    if (!(spec.demand >= 0.0)) throw Error(ErrorKind::kInput, where + ": negative demand");
    OdPair od{spec.origin, spec.destination, spec.demand, {}};

    for (const auto& tokens : spec.routes) {
      // Partial routes with the node currently reached; virtual arcs are
      // inserted (or branched) wherever the path leaves a station node.
      std::vector<std::vector<int>> partial{{}};
      std::string at = spec.origin;
      for (size_t t = 0; t < tokens.size(); ++t) {
        const std::string& tok = tokens[t];
        const auto colon = tok.rfind(':');
        if (colon != std::string::npos && (tok.substr(colon + 1) == "charge" || tok.substr(colon + 1) == "bypass")) {
          const auto sit = station_by_id.find(tok.substr(0, colon));
          if (sit == station_by_id.end()) throw Error(ErrorKind::kInput, where + ": unknown station in token " + tok);
          const ChargingStation& s = net.stations[static_cast<size_t>(sit->second)];
          if (at != s.traffic_node) throw Error(ErrorKind::kInput, where + ": route is not a valid path at " + tok);
          const int arc = tok.substr(colon + 1) == "charge" ? s.charge_arc : s.bypass_arc;
          for (auto& p : partial) p.push_back(arc);
          at = aux_name(s.traffic_node);
          continue;
        }
        const auto ait = arc_by_id.find(tok);
        if (ait == arc_by_id.end()) throw Error(ErrorKind::kInput, where + ": unknown arc " + tok);
        const Arc& a = net.arcs[static_cast<size_t>(ait->second)];
        const auto st = station_at_node.find(at);
        if (st != station_at_node.end() && a.tail == aux_name(at)) {
          if (!options.expand_routes)
            throw Error(ErrorKind::kInput, where + ": route passes station node " + at + " without a charge/bypass token");
          const ChargingStation& s = net.stations[static_cast<size_t>(st->second)];
          std::vector<std::vector<int>> split;
          for (const auto& p : partial) {
            split.push_back(p);
            split.back().push_back(s.charge_arc);
            split.push_back(p);
            split.back().push_back(s.bypass_arc);
          }
          partial = std::move(split);
          at = aux_name(at);
        }
        if (a.tail != at) throw Error(ErrorKind::kInput, where + ": route is not a valid path at arc " + tok);
        for (auto& p : partial) p.push_back(ait->second);
        at = a.head;
      }
      if (at != spec.destination && at != aux_name(spec.destination))
        throw Error(ErrorKind::kInput, where + ": route does not end at the destination");
      if (tokens.empty() && spec.origin != spec.destination)
        throw Error(ErrorKind::kInput, where + ": empty route");
      for (auto& p : partial) od.routes.push_back(std::move(p));
    }
    if (od.demand > 0.0 && od.routes.empty()) throw Error(ErrorKind::kInput, where + ": positive demand without routes");
    net.od_pairs.push_back(std::move(od));
  }
  return net;
}

double travel_time(const Arc& arc, double flow, const ChargingStation* station) {
  if (flow < 0.0) throw Error(ErrorKind::kInput, "travel_time: negative flow on arc " + arc.id);
  switch (arc.kind) {
    case ArcKind::kPhysical: return arc.free_flow_time + flow / arc.capacity_slope;
    case ArcKind::kNoCharge: return 0.0;
    case ArcKind::kCharge:
      if (!station) throw Error(ErrorKind::kInput, "travel_time: charge arc " + arc.id + " needs its station");
      return station->avg_demand / station->charge_rate + arc.free_flow_time + flow / arc.capacity_slope;
  }
  return 0.0;
}

Eigen::VectorXd CompactQP::q(const Eigen::VectorXd& lambda_c) const {
  if (lambda_c.size() != num_stations()) throw Error(ErrorKind::kInput, "traffic: price vector has wrong length");
  Eigen::VectorXd out = q_base;
  out.tail(num_stations()) += J * lambda_c;
  return out;
}

qp::QpProblem CompactQP::problem(const Eigen::VectorXd& lambda_c) const {
  const int na = num_arcs();
  const int nr = num_routes();
  const int nw = num_pairs();
  qp::QpProblem p = qp::QpProblem::with_size(na + nr);
  p.H.topLeftCorner(na, na) = Q;
  p.H.bottomRightCorner(nr, nr).diagonal().setConstant(2.0 * route_regularization);
  p.c.head(na) = q(lambda_c);
  p.Aeq = Eigen::MatrixXd::Zero(nw + na, na + nr);
  p.Aeq.block(0, na, nw, nr) = E;
  p.Aeq.block(nw, 0, na, na) = -Eigen::MatrixXd::Identity(na, na);
  p.Aeq.block(nw, na, na, nr) = A;
  p.beq = Eigen::VectorXd::Zero(nw + na);
  p.beq.head(nw) = m;
  p.Aineq = Eigen::MatrixXd::Zero(2 * na, na + nr);
  p.Aineq.leftCols(na) = G;
  p.bineq = h;
  return p;
}

CompactQP assemble_traffic_qp(const ExtendedTrafficNetwork& net) {
  const int na = net.num_arcs();
  const int nc = net.num_stations();
  if (na != net.num_physical + 2 * nc) throw Error(ErrorKind::kInput, "traffic: arc count does not match stations");

  CompactQP qp;
  qp.route_regularization = net.route_regularization;
  qp.Q = Eigen::MatrixXd::Zero(na, na);
  qp.q_base = Eigen::VectorXd::Zero(na);
  for (int a = 0; a < na; ++a) {
    const Arc& arc = net.arcs[static_cast<size_t>(a)];
    const ArcKind expected = a < net.num_physical ? ArcKind::kPhysical
                             : a < net.num_physical + nc ? ArcKind::kNoCharge
                                                         : ArcKind::kCharge;
    if (arc.kind != expected) throw Error(ErrorKind::kInput, "traffic: arcs out of [physical|no_charge|charge] order");
    if (arc.kind == ArcKind::kNoCharge) continue;
    qp.Q(a, a) = 2.0 * net.time_value / arc.capacity_slope;
    qp.q_base(a) = net.time_value * arc.free_flow_time;
  }
  qp.J = Eigen::MatrixXd::Zero(nc, nc);
  for (int i = 0; i < nc; ++i) {
    const ChargingStation& s = net.stations[static_cast<size_t>(i)];
    if (s.charge_arc != net.num_physical + nc + i) throw Error(ErrorKind::kInput, "traffic: station arc indices stale");
    qp.J(i, i) = s.avg_demand;
    qp.q_base(s.charge_arc) += net.time_value * s.avg_demand / s.charge_rate;
  }

  int nw = 0;
  for (const auto& od : net.od_pairs) {
    if (!od.routes.empty()) ++nw;
    else if (od.demand != 0.0) throw Error(ErrorKind::kInput, "traffic: O-D pair with demand but no routes");
  }
  const int nr = net.num_routes();
  qp.E = Eigen::MatrixXd::Zero(nw, nr);
  qp.m = Eigen::VectorXd::Zero(nw);
  qp.A = Eigen::MatrixXd::Zero(na, nr);
  int row = 0;
  int col = 0;
  for (const auto& od : net.od_pairs) {
    if (od.routes.empty()) continue;
    qp.m(row) = od.demand;
    for (const auto& route : od.routes) {
      qp.E(row, col) = 1.0;
      for (int a : route) {
        if (a < 0 || a >= na) throw Error(ErrorKind::kInput, "traffic: route references a missing arc");
        qp.A(a, col) += 1.0;
      }
      ++col;
    }
    ++row;
  }

  qp.G = Eigen::MatrixXd::Zero(2 * na, na);
  qp.G.topRows(na) = -Eigen::MatrixXd::Identity(na, na);
  qp.G.bottomRows(na) = Eigen::MatrixXd::Identity(na, na);
  qp.h = Eigen::VectorXd::Zero(2 * na);
  for (int a = 0; a < na; ++a) qp.h(na + a) = net.arcs[static_cast<size_t>(a)].flow_cap;
  return qp;
}

Eigen::VectorXd demand_from_flows(const ExtendedTrafficNetwork& net, const Eigen::VectorXd& arc_flows) {
  if (arc_flows.size() != net.num_arcs()) throw Error(ErrorKind::kInput, "demand_from_flows: wrong flow length");
  Eigen::VectorXd d(net.num_stations());
  for (int i = 0; i < net.num_stations(); ++i) {
    const ChargingStation& s = net.stations[static_cast<size_t>(i)];
    d(i) = s.avg_demand * arc_flows(s.charge_arc);
  }
  return d;
}

double latency_cost(const CompactQP& qp, const Eigen::VectorXd& arc_flows) {
  return 0.5 * arc_flows.dot(qp.Q * arc_flows) + qp.q_base.dot(arc_flows);
}

TrafficSolution solve_traffic(const CompactQP& qp, const ExtendedTrafficNetwork& net, const Eigen::VectorXd& lambda_c,
                              const qp::SolverOptions& options) {
  const qp::QpProblem p = qp.problem(lambda_c);
  TrafficSolution sol;
  sol.point = qp::solve_qp(p, options);
  const int na = qp.num_arcs();
  sol.arc_flows = sol.point.x.head(na);
  sol.route_flows = sol.point.x.tail(qp.num_routes());
  sol.demand = demand_from_flows(net, sol.arc_flows);
  sol.latency_cost = latency_cost(qp, sol.arc_flows);
  sol.charging_expense = lambda_c.dot(sol.demand);
  sol.itso_cost = sol.latency_cost + sol.charging_expense;
  sol.value = sol.point.objective;
  return sol;
}

}  // namespace evprice::traffic
