#include "evprice/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <set>

namespace evprice::synthetic {

namespace {

traffic::Arc arc(const std::string& id, const std::string& tail, const std::string& head, double cap,
                 double fft = 0.0, double slope = 1e4) {
  traffic::Arc a;
  a.id = id;
  a.tail = tail;
  a.head = head;
  a.free_flow_time = fft;
  a.capacity_slope = slope;
  a.flow_cap = cap;
  return a;
}

traffic::ChargingStation station(const std::string& id, const std::string& node, double cap) {
  traffic::ChargingStation s;
  s.id = id;
  s.traffic_node = node;
  s.grid_bus = "";
  s.avg_demand = 12.0;
  s.charge_rate = 200.0;
  s.flow_cap = cap;
  s.capacity_slope = 1e4;
  return s;
}

grid::Bus bus(const std::string& id, double load) { return {id, load, 0.95, 1.05}; }

grid::Line line(int from, int to, double limit, double r = 0.01, double x = 0.02) { return {from, to, r, x, limit}; }

void map_station_buses(Instance& inst, const std::vector<int>& buses) {
  inst.grid.station_buses = buses;
  for (size_t i = 0; i < buses.size(); ++i)
    inst.traffic.stations[i].grid_bus = inst.grid.buses[static_cast<size_t>(buses[i])].id;
}

// Deterministic draws that do not depend on the standard library's
// distribution implementations.
struct Rng {
  std::mt19937_64 eng;
  explicit Rng(std::uint64_t seed) : eng(seed) {}
  double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  int integer(int a, int b) { return a + static_cast<int>(eng() % static_cast<std::uint64_t>(b - a + 1)); }
};

bool opf_feasible(const grid::DistributionCase& g, const Eigen::VectorXd& d) {
  try {
    grid::solve_opf(g, d);
    return true;
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kInfeasible) return false;
    throw;
  }
}

}  // namespace

mpqp::PriceBox default_price_box(const grid::DistributionCase& grid) {
  double cmax = 0.0;
  for (const auto& g : grid.generators) cmax = std::max(cmax, g.cost);
  if (cmax <= 0.0) cmax = 1.0;
  return mpqp::PriceBox::uniform(grid.num_stations(), 0.0, 2.0 * cmax);
}

Instance with_uniform_demand(Instance inst, double demand) {
  for (auto& od : inst.traffic.od_pairs)
    if (od.demand > 0.0) od.demand = demand;
  return inst;
}

Instance one_station_toy() {
  Instance inst;
  inst.name = "one-station-toy";
  inst.traffic.time_value = 1e3;
  inst.traffic.nodes = {"o", "s", "t"};
  inst.traffic.arcs = {arc("a_in", "o", "s", 1000.0), arc("a_out", "s", "t", 1000.0)};
  inst.traffic.stations = {station("S1", "s", 100.0)};
  inst.traffic.od_pairs = {{"o", "t", 150.0, {{"a_in", "S1:charge", "a_out"}, {"a_in", "S1:bypass", "a_out"}}}};
  inst.build.expand_routes = false;
  inst.build.route_regularization = 0.0;

  inst.grid.buses = {bus("b0", 0.0), bus("b1", 100.0)};
  inst.grid.lines = {line(0, 1, 5000.0)};
  inst.grid.generators = {{"G1", 0, 5000.0, 0.5}};
  map_station_buses(inst, {1});
  inst.box = mpqp::PriceBox::uniform(1, -10.0, 10.0);
  return inst;
}

Instance two_station_asymmetric() {
  Instance inst;
  inst.name = "two-station-asymmetric";
  inst.traffic.time_value = 1e3;
  inst.traffic.nodes = {"o", "sA", "sB", "t"};
  inst.traffic.arcs = {arc("oA", "o", "sA", 1000.0), arc("At", "sA", "t", 1000.0), arc("oB", "o", "sB", 1000.0),
                       arc("Bt", "sB", "t", 1000.0)};
  inst.traffic.stations = {station("A", "sA", 100.0), station("B", "sB", 100.0)};
  inst.traffic.od_pairs = {{"o", "t", 80.0, {{"oA", "A:charge", "At"}, {"oB", "B:charge", "Bt"}}}};
  inst.build.expand_routes = false;

  // Cheap power reaches station A only through the 0–1 line.
  inst.grid.buses = {bus("b0", 0.0), bus("b1", 100.0), bus("b2", 0.0), bus("b3", 100.0)};
  inst.grid.lines = {line(0, 1, 600.0), line(1, 2, 5000.0), line(2, 3, 5000.0)};
  inst.grid.generators = {{"G1", 0, 5000.0, 0.2}, {"G2", 2, 5000.0, 0.6}};
  map_station_buses(inst, {1, 3});
  inst.box = default_price_box(inst.grid);
  return inst;
}

Instance saturated_outer_stations(double demand) {
  Instance inst;
  inst.name = "saturated-outer-stations";
  inst.traffic.time_value = 1e3;
  inst.traffic.nodes = {"o", "s1", "s2", "s3", "t"};
  for (const std::string k : {"1", "2", "3"}) {
    inst.traffic.arcs.push_back(arc("o" + k, "o", "s" + k, 5000.0));
    inst.traffic.arcs.push_back(arc(k + "t", "s" + k, "t", 5000.0));
  }
  inst.traffic.stations = {station("C1", "s1", 40.0), station("C2", "s2", 2000.0), station("C3", "s3", 40.0)};
  inst.traffic.od_pairs = {{"o", "t", demand,
                            {{"o1", "C1:charge", "1t"}, {"o2", "C2:charge", "2t"}, {"o3", "C3:charge", "3t"}}}};
  inst.build.expand_routes = false;

  inst.grid.buses = {bus("b0", 0.0), bus("b1", 3000.0), bus("b2", 3000.0), bus("b3", 3000.0), bus("b4", 0.0)};
  inst.grid.lines = {line(0, 1, 20000.0), line(0, 3, 20000.0), line(1, 2, 1000.0), line(2, 4, 20000.0)};
  inst.grid.generators = {{"G1", 0, 40000.0, 0.1}, {"G2", 4, 40000.0, 0.5}};
  map_station_buses(inst, {1, 2, 3});
  inst.box = mpqp::PriceBox::uniform(3, 0.0, 1.0);
  return inst;
}

Instance random_instance(std::uint64_t seed, const RandomSpec& spec) {
  Rng rng(seed * 0x2545F4914F6CDD1DULL + 17);
  for (int attempt = 0; attempt < 100; ++attempt) {
    Instance inst;
    inst.name = "random-" + std::to_string(seed);
    traffic::TrafficInput& tin = inst.traffic;
    tin.time_value = 1e3;

    const int n = rng.integer(spec.min_nodes, spec.max_nodes);
    for (int i = 0; i < n; ++i) tin.nodes.push_back("n" + std::to_string(i));
    std::vector<std::vector<std::pair<int, std::string>>> out(static_cast<size_t>(n));
    auto add_arc = [&](int i, int j) {
      const std::string id = "a" + std::to_string(tin.arcs.size());
      tin.arcs.push_back(arc(id, tin.nodes[static_cast<size_t>(i)], tin.nodes[static_cast<size_t>(j)], 0.0,
                             std::round(rng.uniform(0.0, 0.05) * 1000.0) / 1000.0,
                             std::round(rng.uniform(5e3, 2e4))));
      out[static_cast<size_t>(i)].push_back({j, id});
    };
    for (int i = 0; i + 1 < n; ++i) add_arc(i, i + 1);
    for (int i = 0; i < n; ++i)
      for (int j = i + 2; j < n; ++j)
        if (rng.uniform() < 0.35) add_arc(i, j);

    const int ns = std::min(rng.integer(spec.min_stations, spec.max_stations), n - 2);
    std::vector<int> interior;
    for (int i = 1; i + 1 < n; ++i) interior.push_back(i);
    for (size_t i = interior.size(); i > 1; --i) std::swap(interior[i - 1], interior[static_cast<size_t>(rng.integer(0, static_cast<int>(i) - 1))]);
    std::vector<int> station_node(interior.begin(), interior.begin() + ns);
    std::sort(station_node.begin(), station_node.end());
    std::vector<int> station_at(static_cast<size_t>(n), -1);
    for (int k = 0; k < ns; ++k) {
      station_at[static_cast<size_t>(station_node[static_cast<size_t>(k)])] = k;
      tin.stations.push_back(station("S" + std::to_string(k + 1), tin.nodes[static_cast<size_t>(station_node[static_cast<size_t>(k)])], 0.0));
      tin.stations.back().capacity_slope = std::round(rng.uniform(5e3, 2e4));
    }

    const int np = rng.integer(spec.min_pairs, spec.max_pairs);
    bool ok = true;
    double total = 0.0;
    for (int w = 0; w < np && ok; ++w) {
      const int s = station_node[static_cast<size_t>(rng.integer(0, ns - 1))];
      const int o = rng.integer(0, s - 1);
      const int d = rng.integer(s + 1, n - 1);
      // All o→d paths, as node and arc lists.
      std::vector<std::pair<std::vector<int>, std::vector<std::string>>> paths;
      std::vector<int> nodes{o};
      std::vector<std::string> arcs;
      std::function<void(int)> dfs = [&](int at) {
        if (paths.size() >= 200) return;
        if (at == d) {
          paths.push_back({nodes, arcs});
          return;
        }
        for (const auto& [j, id] : out[static_cast<size_t>(at)]) {
          if (j > d) continue;
          nodes.push_back(j);
          arcs.push_back(id);
          dfs(j);
          nodes.pop_back();
          arcs.pop_back();
        }
      };
      dfs(o);
      std::vector<std::vector<std::string>> candidates;
      for (const auto& [pn, pa] : paths) {
        for (size_t c = 0; c + 1 < pn.size(); ++c) {
          if (station_at[static_cast<size_t>(pn[c])] < 0) continue;
          std::vector<std::string> tokens;
          for (size_t k = 0; k + 1 < pn.size(); ++k) {
            const int st = station_at[static_cast<size_t>(pn[k])];
            if (st >= 0) tokens.push_back(tin.stations[static_cast<size_t>(st)].id + (k == c ? ":charge" : ":bypass"));
            tokens.push_back(pa[k]);
          }
          candidates.push_back(tokens);
        }
      }
      if (static_cast<int>(candidates.size()) < spec.min_routes) {
        ok = false;
        break;
      }
      for (size_t i = candidates.size(); i > 1; --i)
        std::swap(candidates[i - 1], candidates[static_cast<size_t>(rng.integer(0, static_cast<int>(i) - 1))]);
      const int nr = std::min(rng.integer(spec.min_routes, spec.max_routes), static_cast<int>(candidates.size()));
      candidates.resize(static_cast<size_t>(nr));
      const double m = rng.integer(20, 100);
      total += m;
      tin.od_pairs.push_back({tin.nodes[static_cast<size_t>(o)], tin.nodes[static_cast<size_t>(d)], m, candidates});
    }
    if (!ok) continue;

    for (auto& a : tin.arcs) a.flow_cap = 2.0 * total + 10.0;
    for (auto& st : tin.stations) st.flow_cap = std::round(rng.uniform(0.4, 1.0) * total);

    // Raise station capacity until the traffic problem is feasible.
    bool traffic_ok = false;
    for (int grow = 0; grow < 20 && !traffic_ok; ++grow) {
      const traffic::ExtendedTrafficNetwork net = traffic::build_extended_network(tin, inst.build);
      const traffic::CompactQP qp = traffic::assemble_traffic_qp(net);
      try {
        qp::solve_qp(qp.problem(Eigen::VectorXd::Zero(ns)));
        traffic_ok = true;
      } catch (const qp::QpError& e) {
        if (e.status() != qp::QpStatus::kInfeasible) throw;
        for (auto& st : tin.stations) st.flow_cap = std::round(st.flow_cap * 1.5 + 1.0);
      }
    }
    if (!traffic_ok) continue;

    grid::DistributionCase& g = inst.grid;
    const int nb = rng.integer(spec.min_buses, spec.max_buses);
    double load = 0.0;
    for (int i = 0; i < nb; ++i) {
      const double l = i == 0 ? 0.0 : std::round(rng.uniform(50.0, 200.0));
      g.buses.push_back(bus("b" + std::to_string(i), l));
      load += l;
    }
    double ev_max = 0.0;
    for (const auto& st : tin.stations) ev_max += st.avg_demand * st.flow_cap;
    const double need = load + ev_max;
    for (int i = 1; i < nb; ++i)
      g.lines.push_back(line(rng.integer(0, i - 1), i, std::round(rng.uniform(0.3, 1.0) * need),
                             std::round(rng.uniform(0.01, 0.05) * 1000.0) / 1000.0,
                             std::round(rng.uniform(0.01, 0.05) * 1000.0) / 1000.0));
    const int ng = rng.integer(spec.min_generators, spec.max_generators);
    std::vector<int> gen_bus{0};
    while (static_cast<int>(gen_bus.size()) < std::min(ng, nb)) {
      const int b = rng.integer(1, nb - 1);
      if (std::find(gen_bus.begin(), gen_bus.end(), b) == gen_bus.end()) gen_bus.push_back(b);
    }
    for (size_t k = 0; k < gen_bus.size(); ++k)
      g.generators.push_back({"G" + std::to_string(k + 1), gen_bus[k], std::round(1.3 * need * rng.uniform(0.5, 1.0)),
                              std::round(rng.uniform(0.1, 1.0) * 100.0) / 100.0});
    std::vector<int> sb;
    for (int k = 0; k < ns; ++k) sb.push_back(rng.integer(0, nb - 1));
    map_station_buses(inst, sb);

    // Every corner of the demand box must be servable; the feasible demand
    // set is convex, so the whole box then is.
    bool grid_ok = false;
    for (int grow = 0; grow < 20 && !grid_ok; ++grow) {
      grid_ok = true;
      for (int mask = 0; mask < (1 << ns) && grid_ok; ++mask) {
        Eigen::VectorXd d = Eigen::VectorXd::Zero(ns);
        for (int k = 0; k < ns; ++k)
          if (mask & (1 << k)) d(k) = tin.stations[static_cast<size_t>(k)].demand_cap();
        grid_ok = opf_feasible(g, d);
      }
      if (!grid_ok)
        for (auto& ln : g.lines) ln.flow_limit = std::round(ln.flow_limit * 1.5 + 1.0);
    }
    if (!grid_ok) continue;
    inst.box = default_price_box(g);
    return inst;
  }
  throw Error(ErrorKind::kInput, "random_instance: could not build a feasible instance for seed " + std::to_string(seed));
}

}  // namespace evprice::synthetic
