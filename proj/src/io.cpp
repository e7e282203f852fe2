#include "evprice/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace evprice::io {

namespace {

[[noreturn]] void bad(const std::string& msg) { throw Error(ErrorKind::kInput, msg); }

void check_schema(const json& doc, const std::string& what) {
  if (!doc.is_object()) bad(what + ": top level must be an object");
  if (doc.contains("schema_version") && doc.at("schema_version") != kSchemaVersion)
    bad(what + ": unsupported schema_version " + doc.at("schema_version").dump());
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  auto it = obj.find(key);
  return it == obj.end() || it->is_null() ? fallback : it->get<T>();
}

template <typename T>
T need(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) bad(where + ": missing field '" + key + "'");
  return it->get<T>();
}

// json::get throws its own exception type; report it as an input error.
template <typename F>
auto guarded(const std::string& what, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    bad(what + ": " + e.what());
  }
}

std::vector<int> int_list(const json& j) { return j.is_null() ? std::vector<int>{} : j.get<std::vector<int>>(); }

double finite_or_null(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::infinity() : j.get<double>();
}

}  // namespace

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) bad("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    bad(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) bad("cannot write " + path);
  out << text;
  if (!out) bad("write failed: " + path);
}

void write_json(const std::string& path, const json& doc) { write_text(path, doc.dump(2) + "\n"); }

std::string format_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (x == 0.0) return "0";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

json to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json to_json(const Eigen::MatrixXd& m) {
  json a = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(to_json(Eigen::VectorXd(m.row(i).transpose())));
  return a;
}

Eigen::VectorXd vector_from_json(const json& j) {
  const std::vector<double> v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::MatrixXd matrix_from_json(const json& j, Eigen::Index cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(j.size()), cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const Eigen::VectorXd row = vector_from_json(j.at(static_cast<size_t>(i)));
    if (row.size() != cols) bad("matrix row " + std::to_string(i) + " has the wrong length");
    m.row(i) = row.transpose();
  }
  return m;
}

void parse_traffic(const json& doc, traffic::TrafficInput& input, traffic::BuildOptions& build) {
  check_schema(doc, "traffic");
  guarded("traffic", [&] {
    input = {};
    build = {};
    input.time_value = get_or(doc, "time_value", input.time_value);
    build.route_regularization = get_or(doc, "route_regularization", build.route_regularization);
    build.expand_routes = get_or(doc, "expand_routes", build.expand_routes);
    const json defaults = doc.value("defaults", json::object());
    const double slope = get_or(defaults, "capacity_slope", 1e4);
    const double e = get_or(defaults, "avg_demand", 12.0);
    const double rho = get_or(defaults, "charge_rate", 200.0);

    input.nodes = need<std::vector<std::string>>(doc, "nodes", "traffic");
    for (const json& a : need<json>(doc, "arcs", "traffic")) {
      traffic::Arc arc;
      arc.id = need<std::string>(a, "id", "arc");
      const std::string where = "arc " + arc.id;
      arc.tail = need<std::string>(a, "tail", where);
      arc.head = need<std::string>(a, "head", where);
      arc.free_flow_time = get_or(a, "free_flow_time", 0.0);
      arc.capacity_slope = get_or(a, "capacity_slope", slope);
      arc.flow_cap = need<double>(a, "flow_cap", where);
      input.arcs.push_back(arc);
    }
    for (const json& s : doc.value("stations", json::array())) {
      traffic::ChargingStation st;
      st.id = need<std::string>(s, "id", "station");
      const std::string where = "station " + st.id;
      st.traffic_node = need<std::string>(s, "node", where);
      st.grid_bus = get_or<std::string>(s, "grid_bus", "");
      st.avg_demand = get_or(s, "avg_demand", e);
      st.charge_rate = get_or(s, "charge_rate", rho);
      st.flow_cap = need<double>(s, "flow_cap", where);
      st.free_flow_time = get_or(s, "free_flow_time", 0.0);
      st.capacity_slope = get_or(s, "capacity_slope", slope);
      st.bypass_cap = get_or(s, "bypass_cap", -1.0);
      input.stations.push_back(st);
    }
    for (const json& w : need<json>(doc, "od_pairs", "traffic")) {
      traffic::OdPairSpec od;
      od.origin = need<std::string>(w, "origin", "od_pair");
      od.destination = need<std::string>(w, "destination", "od_pair");
      od.demand = need<double>(w, "demand", "od_pair " + od.origin + "->" + od.destination);
      od.routes = w.value("routes", std::vector<std::vector<std::string>>{});
      input.od_pairs.push_back(od);
    }
    return 0;
  });
}

json traffic_to_json(const traffic::TrafficInput& input, const traffic::BuildOptions& build) {
  json doc;
  doc["schema_version"] = kSchemaVersion;
  doc["time_value"] = input.time_value;
  doc["route_regularization"] = build.route_regularization;
  doc["expand_routes"] = build.expand_routes;
  doc["nodes"] = input.nodes;
  doc["arcs"] = json::array();
  for (const auto& a : input.arcs)
    doc["arcs"].push_back({{"id", a.id},
                           {"tail", a.tail},
                           {"head", a.head},
                           {"free_flow_time", a.free_flow_time},
                           {"capacity_slope", a.capacity_slope},
                           {"flow_cap", a.flow_cap}});
  doc["stations"] = json::array();
  for (const auto& s : input.stations) {
    json j = {{"id", s.id},
              {"node", s.traffic_node},
              {"grid_bus", s.grid_bus},
              {"avg_demand", s.avg_demand},
              {"charge_rate", s.charge_rate},
              {"flow_cap", s.flow_cap},
              {"free_flow_time", s.free_flow_time},
              {"capacity_slope", s.capacity_slope}};
    if (s.bypass_cap >= 0.0) j["bypass_cap"] = s.bypass_cap;
    doc["stations"].push_back(j);
  }
  doc["od_pairs"] = json::array();
  for (const auto& w : input.od_pairs)
    doc["od_pairs"].push_back(
        {{"origin", w.origin}, {"destination", w.destination}, {"demand", w.demand}, {"routes", w.routes}});
  return doc;
}

grid::DistributionCase parse_grid(const json& doc, const traffic::TrafficInput& traffic) {
  check_schema(doc, "grid");
  grid::DistributionCase g;
  guarded("grid", [&] {
    for (const json& b : need<json>(doc, "buses", "grid"))
      g.buses.push_back({need<std::string>(b, "id", "bus"), get_or(b, "load", 0.0), get_or(b, "v_min", 0.95),
                         get_or(b, "v_max", 1.05)});
    auto bus_ref = [&](const json& obj, const char* key, const std::string& where) {
      const std::string id = need<std::string>(obj, key, where);
      const int i = g.bus_index(id);
      if (i < 0) bad(where + ": unknown bus " + id);
      return i;
    };
    for (const json& l : need<json>(doc, "lines", "grid")) {
      const std::string where = "line " + l.value("from", std::string("?")) + "-" + l.value("to", std::string("?"));
      g.lines.push_back({bus_ref(l, "from", where), bus_ref(l, "to", where), need<double>(l, "r", where),
                         need<double>(l, "x", where), need<double>(l, "flow_limit", where)});
    }
    for (const json& k : need<json>(doc, "generators", "grid")) {
      const std::string id = need<std::string>(k, "id", "generator");
      g.generators.push_back({id, bus_ref(k, "bus", "generator " + id), need<double>(k, "capacity", "generator " + id),
                              need<double>(k, "cost", "generator " + id)});
    }
    std::map<std::string, std::string> mapping;
    for (const json& s : doc.value("stations", json::array()))
      mapping[need<std::string>(s, "id", "grid station")] = need<std::string>(s, "bus", "grid station");
    for (const auto& st : traffic.stations) {
      auto it = mapping.find(st.id);
      const std::string bus = it != mapping.end() ? it->second : st.grid_bus;
      if (bus.empty()) bad("station " + st.id + ": no grid bus");
      const int i = g.bus_index(bus);
      if (i < 0) bad("station " + st.id + ": unknown bus " + bus);
      g.station_buses.push_back(i);
    }
    for (const auto& [id, bus] : mapping) {
      bool known = false;
      for (const auto& st : traffic.stations) known = known || st.id == id;
      if (!known) bad("grid station table names unknown station " + id);
    }
    return 0;
  });
  g.validate();
  return g;
}

json grid_to_json(const grid::DistributionCase& g, const traffic::TrafficInput& traffic) {
  json doc;
  doc["schema_version"] = kSchemaVersion;
  doc["buses"] = json::array();
  for (const auto& b : g.buses)
    doc["buses"].push_back({{"id", b.id}, {"load", b.load}, {"v_min", b.v_min}, {"v_max", b.v_max}});
  auto id = [&](int i) { return g.buses[static_cast<size_t>(i)].id; };
  doc["lines"] = json::array();
  for (const auto& l : g.lines)
    doc["lines"].push_back({{"from", id(l.from)}, {"to", id(l.to)}, {"r", l.r}, {"x", l.x}, {"flow_limit", l.flow_limit}});
  doc["generators"] = json::array();
  for (const auto& k : g.generators)
    doc["generators"].push_back({{"id", k.id}, {"bus", id(k.bus)}, {"capacity", k.capacity}, {"cost", k.cost}});
  doc["stations"] = json::array();
  for (int s = 0; s < g.num_stations(); ++s)
    doc["stations"].push_back({{"id", traffic.stations[static_cast<size_t>(s)].id}, {"bus", id(g.station_buses[static_cast<size_t>(s)])}});
  return doc;
}

synthetic::Instance load_instance(const std::string& traffic_path, const std::string& grid_path) {
  synthetic::Instance inst;
  inst.name = traffic_path;
  parse_traffic(read_json(traffic_path), inst.traffic, inst.build);
  inst.grid = parse_grid(read_json(grid_path), inst.traffic);
  inst.box = synthetic::default_price_box(inst.grid);
  return inst;
}

void save_instance(const synthetic::Instance& inst, const std::string& traffic_path, const std::string& grid_path) {
  write_json(traffic_path, traffic_to_json(inst.traffic, inst.build));
  write_json(grid_path, grid_to_json(inst.grid, inst.traffic));
}

json partition_to_json(const mpqp::PiecewiseAffineDemandFunction& pi) {
  json doc;
  doc["schema_version"] = kSchemaVersion;
  doc["box"] = {{"lo", to_json(pi.box.lo)}, {"hi", to_json(pi.box.hi)}};
  doc["critical_regions"] = pi.num_critical_regions();
  doc["regions"] = json::array();
  for (const auto& r : pi.regions) {
    json j;
    j["id"] = r.id;
    j["R"] = to_json(r.poly.A);
    j["r"] = to_json(r.poly.b);
    j["on_box"] = r.on_box;
    j["fingerprint"] = r.fingerprint;
    j["working_set"] = r.policy.working_set;
    j["base_point"] = to_json(r.policy.base_point);
    j["demand_matrix"] = to_json(r.policy.demand_matrix);
    j["demand_offset"] = to_json(r.policy.demand_offset);
    j["value_offset"] = r.policy.value_offset;
    j["interior_point"] = to_json(r.interior_point);
    j["radius"] = std::isfinite(r.radius) ? json(r.radius) : json(nullptr);
    j["condition_M0"] = std::isfinite(r.policy.condition_M0) ? json(r.policy.condition_M0) : json(nullptr);
    j["condition_M"] = std::isfinite(r.policy.condition_M) ? json(r.policy.condition_M) : json(nullptr);
    doc["regions"].push_back(j);
  }
  const auto& s = pi.stats;
  doc["stats"] = {{"qp_solves", s.qp_solves},         {"facets_visited", s.facets_visited},
                  {"facets_boundary", s.facets_boundary}, {"facets_known", s.facets_known},
                  {"step_retries", s.step_retries},   {"perturbations", s.perturbations},
                  {"audit_reseeds", s.audit_reseeds}, {"audit_samples", s.audit_samples}};
  return doc;
}

mpqp::PiecewiseAffineDemandFunction partition_from_json(const json& doc) {
  check_schema(doc, "partition");
  mpqp::PiecewiseAffineDemandFunction pi;
  guarded("partition", [&] {
    pi.box.lo = vector_from_json(doc.at("box").at("lo"));
    pi.box.hi = vector_from_json(doc.at("box").at("hi"));
    if (pi.box.lo.size() != pi.box.hi.size()) bad("partition: box bounds differ in length");
    const Eigen::Index nc = pi.box.dim();
    for (const json& j : doc.at("regions")) {
      mpqp::CriticalRegion r;
      r.poly.A = matrix_from_json(j.at("R"), nc);
      r.poly.b = vector_from_json(j.at("r"));
      if (r.poly.b.size() != r.poly.A.rows()) bad("partition: R and r differ in length");
      r.on_box = j.at("on_box").get<std::vector<bool>>();
      r.fingerprint = int_list(j.at("fingerprint"));
      r.policy.working_set = int_list(j.at("working_set"));
      r.policy.base_point = vector_from_json(j.at("base_point"));
      r.policy.demand_matrix = matrix_from_json(j.at("demand_matrix"), nc);
      r.policy.demand_offset = vector_from_json(j.at("demand_offset"));
      r.policy.value_offset = j.at("value_offset").get<double>();
      r.interior_point = vector_from_json(j.at("interior_point"));
      r.radius = finite_or_null(j.at("radius"));
      r.policy.condition_M0 = finite_or_null(j.value("condition_M0", json(nullptr)));
      r.policy.condition_M = finite_or_null(j.value("condition_M", json(nullptr)));
      const int id = j.at("id").get<int>();
      if (id != pi.size()) bad("partition: region ids must be 0, 1, 2, ... in order");
      if (!pi.insert(std::move(r))) bad("partition: duplicate region key at id " + std::to_string(id));
    }
    if (doc.contains("stats")) {
      const json& s = doc.at("stats");
      pi.stats.qp_solves = s.value("qp_solves", 0);
      pi.stats.facets_visited = s.value("facets_visited", 0);
      pi.stats.facets_boundary = s.value("facets_boundary", 0);
      pi.stats.facets_known = s.value("facets_known", 0);
      pi.stats.step_retries = s.value("step_retries", 0);
      pi.stats.perturbations = s.value("perturbations", 0);
      pi.stats.audit_reseeds = s.value("audit_reseeds", 0);
      pi.stats.audit_samples = s.value("audit_samples", 0);
    }
    return 0;
  });
  return pi;
}

json result_to_json(const bilevel::BilevelResult& res, const synthetic::Instance& inst, const bilevel::KktReport* kkt,
                    const mpqp::PiecewiseAffineDemandFunction* pi) {
  json doc;
  doc["schema_version"] = kSchemaVersion;
  doc["region"] = res.region;
  doc["region_objective_value"] = res.objective;
  json buses = json::array();
  for (int i = 0; i < inst.grid.num_buses(); ++i)
    buses.push_back({{"id", inst.grid.buses[static_cast<size_t>(i)].id}, {"lambda", res.lambda(i)}});
  doc["buses"] = buses;
  json stations = json::array();
  for (int s = 0; s < inst.grid.num_stations(); ++s) {
    json j = {{"id", inst.traffic.stations[static_cast<size_t>(s)].id},
              {"bus", inst.grid.buses[static_cast<size_t>(inst.grid.station_buses[static_cast<size_t>(s)])].id},
              {"price", res.lambda_c(s)},
              {"demand", res.demand(s)}};
    if (res.has_traffic) j["traffic_demand"] = res.traffic_demand(s);
    stations.push_back(j);
  }
  doc["stations"] = stations;
  json gens = json::array();
  for (int k = 0; k < inst.grid.num_generators(); ++k)
    gens.push_back({{"id", inst.grid.generators[static_cast<size_t>(k)].id}, {"output", res.opf.g(k)}});
  doc["generators"] = gens;
  json costs = {{"idso", res.idso_cost}, {"idso_dual_objective", res.idso_dual_objective}};
  if (res.has_traffic) {
    costs["latency"] = res.latency_cost;
    costs["charging_expense"] = res.charging_expense;
    costs["itso"] = res.itso_cost;
    costs["combined"] = res.combined_cost;
  }
  doc["costs"] = costs;
  doc["degenerate_prices"] = res.opf.degenerate_prices;
  doc["feasible_regions"] = res.feasible_regions;
  doc["nonconvex_regions"] = res.nonconvex_regions;
  if (kkt) {
    doc["kkt"] = {{"upper", kkt->upper}, {"lower", kkt->lower}, {"upper_max", kkt->upper_max},
                  {"lower_max", kkt->lower_max}};
  }
  if (pi) {
    doc["partition"] = {{"regions", pi->num_critical_regions()}, {"region_pieces", pi->size()}, {"qp_solves", pi->stats.qp_solves},
                        {"facets_visited", pi->stats.facets_visited}, {"audit_reseeds", pi->stats.audit_reseeds}};
  }
  return doc;
}

std::string Table::to_csv() const {
  std::ostringstream out;
  out << "# schema_version=" << kSchemaVersion << "\n";
  auto line = [&](const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) out << ',';
      const std::string& c = cells[i];
      if (c.find_first_of(",\"\n") == std::string::npos) {
        out << c;
      } else {
        out << '"';
        for (char ch : c) out << (ch == '"' ? "\"\"" : std::string(1, ch));
        out << '"';
      }
    }
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  return out.str();
}

}  // namespace evprice::io
