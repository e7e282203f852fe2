#include <doctest.h>

#include "evprice/io.hpp"
#include "evprice/scenario.hpp"

using namespace evprice;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::kSolver;
}

}  // namespace

TEST_CASE("traffic and grid files round-trip") {
  for (const auto& inst : {synthetic::one_station_toy(), synthetic::saturated_outer_stations(), synthetic::random_instance(4)}) {
    const io::json t = io::traffic_to_json(inst.traffic, inst.build);
    const io::json g = io::grid_to_json(inst.grid, inst.traffic);
    traffic::TrafficInput tin;
    traffic::BuildOptions build;
    io::parse_traffic(io::json::parse(t.dump()), tin, build);
    const grid::DistributionCase grid = io::parse_grid(io::json::parse(g.dump()), tin);
    CHECK(io::traffic_to_json(tin, build) == t);
    CHECK(io::grid_to_json(grid, tin) == g);
  }
}

TEST_CASE("malformed input is an input error") {
  const synthetic::Instance inst = synthetic::one_station_toy();
  io::json t = io::traffic_to_json(inst.traffic, inst.build);
  io::json g = io::grid_to_json(inst.grid, inst.traffic);
  traffic::TrafficInput tin;
  traffic::BuildOptions build;

  io::json no_nodes = t;
  no_nodes.erase("nodes");
  CHECK(kind_of([&] { io::parse_traffic(no_nodes, tin, build); }) == ErrorKind::kInput);
  io::json wrong_type = t;
  wrong_type["arcs"][0]["flow_cap"] = "lots";
  CHECK(kind_of([&] { io::parse_traffic(wrong_type, tin, build); }) == ErrorKind::kInput);
  io::json future = t;
  future["schema_version"] = 99;
  CHECK(kind_of([&] { io::parse_traffic(future, tin, build); }) == ErrorKind::kInput);

  io::parse_traffic(t, tin, build);
  io::json bad_bus = g;
  bad_bus["lines"][0]["to"] = "nowhere";
  CHECK(kind_of([&] { io::parse_grid(bad_bus, tin); }) == ErrorKind::kInput);
  io::json bad_station = g;
  bad_station["stations"][0]["id"] = "ghost";
  CHECK(kind_of([&] { io::parse_grid(bad_station, tin); }) == ErrorKind::kInput);
  CHECK(kind_of([&] { io::read_json("/nonexistent/file.json"); }) == ErrorKind::kInput);
}

TEST_CASE("station bus falls back to the traffic file") {
  const synthetic::Instance inst = synthetic::two_station_asymmetric();
  io::json g = io::grid_to_json(inst.grid, inst.traffic);
  g.erase("stations");
  const grid::DistributionCase grid = io::parse_grid(g, inst.traffic);
  CHECK(grid.station_buses == inst.grid.station_buses);
}

TEST_CASE("partition export reproduces the demand function") {
  const synthetic::Instance inst = synthetic::random_instance(7);
  const auto net = traffic::build_extended_network(inst.traffic, inst.build);
  const auto qp = traffic::assemble_traffic_qp(net);
  const auto pi = mpqp::explore(qp, inst.box, inst.box.center());
  const io::json doc = io::partition_to_json(pi);
  const auto back = io::partition_from_json(io::json::parse(doc.dump()));
  REQUIRE(back.size() == pi.size());
  CHECK(io::partition_to_json(back) == doc);
  for (const auto& lam : mpqp::sample_box(inst.box, 100, 9)) {
    const auto a = mpqp::evaluate(pi, lam);
    const auto b = mpqp::evaluate(back, lam);
    CHECK(a.region == b.region);
    CHECK((a.demand - b.demand).norm() == 0.0);
  }
}

TEST_CASE("csv quoting and schema line") {
  io::Table t{{"a", "b"}, {{"1", "x,y"}, {"2", "say \"hi\""}}};
  CHECK(t.to_csv() == "# schema_version=1\na,b\n1,\"x,y\"\n2,\"say \"\"hi\"\"\"\n");
  CHECK(io::format_number(0.1) == "0.1");
  CHECK(io::format_number(-720.0) == "-720");
}

TEST_CASE("zero demand sweep row is the plain OPF") {
  const synthetic::Instance inst = synthetic::two_station_asymmetric();
  const auto out = scenario::run_demand_sweep(inst, {0.0, 80.0}, {});
  const std::string csv = out.files.at("demand_sweep.csv");
  const double opf = grid::solve_opf(inst.grid, Eigen::VectorXd::Zero(2)).objective;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  std::getline(in, line);
  std::getline(in, line);
  CHECK(line.rfind("0,ok,", 0) == 0);
  std::vector<std::string> cells;
  std::stringstream ss(line);
  for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
  REQUIRE(cells.size() == 10);
  CHECK(std::stod(cells[2]) == doctest::Approx(opf));
  CHECK(std::stod(cells[3]) == doctest::Approx(opf));
  CHECK(cells[8] == "1");
  std::getline(in, line);
  CHECK(line.rfind("80,ok,", 0) == 0);
}

TEST_CASE("price box inside one region gives one partition record") {
  scenario::Options o;
  o.box = mpqp::PriceBox::uniform(1, 5.0, 10.0);
  const auto out = scenario::run_regions(synthetic::one_station_toy(), o);
  CHECK(io::json::parse(out.files.at("partition.json")).at("regions").size() == 1);
}

TEST_CASE("solve output does not depend on the worker count") {
  const synthetic::Instance inst = synthetic::random_instance(11);
  scenario::Options a, b;
  b.workers = 4;
  CHECK(scenario::run_solve(inst, a).files == scenario::run_solve(inst, b).files);
  CHECK(scenario::run_solve(inst, a).files == scenario::run_solve(inst, a).files);
}

TEST_CASE("cost sweep rows follow the requested costs") {
  const synthetic::Instance inst = synthetic::two_station_asymmetric();
  const auto out = scenario::run_cost_sweep(inst, "G2", {0.6, 0.3, 0.0}, {});
  const std::string csv = out.files.at("cost_sweep_prices.csv");
  CHECK(csv.find("cost,status,idso_cost,price_A,price_B") != std::string::npos);
  CHECK(csv.find("\n0,ok,") != std::string::npos);
  CHECK(kind_of([&] { scenario::run_cost_sweep(inst, "G9", {0.1}, {}); }) == ErrorKind::kInput);
  CHECK(kind_of([&] { scenario::run_cost_sweep(inst, "G2", {}, {}); }) == ErrorKind::kInput);
}

TEST_CASE("forecast study") {
  const synthetic::Instance inst = synthetic::saturated_outer_stations();
  scenario::ForecastSpec spec;
  spec.samples = 8;
  spec.deviation_pct = 0.0;
  for (const auto& s : scenario::forecast_samples(inst, spec, {})) {
    CHECK(s.status == "ok");
    CHECK(s.deviation_pct == 0.0);
  }
  spec.deviation_pct = 5.0;
  for (bool full : {false, true}) {
    spec.full_resolve = full;
    for (const auto& s : scenario::forecast_samples(inst, spec, {})) {
      CHECK(s.status == "ok");
      CHECK(s.forecast[0] >= 285.0);
      CHECK(s.forecast[0] <= 315.0);
      CHECK(std::abs(s.deviation_pct) <= s.bound_pct + 1e-9 * (1.0 + s.bound_pct));
    }
  }
  spec.deviation_pct = 100.0;
  CHECK(kind_of([&] { scenario::forecast_samples(inst, spec, {}); }) == ErrorKind::kInput);
}

TEST_CASE("baseline table has both methods") {
  const auto out = scenario::run_baseline(synthetic::two_station_asymmetric(), {});
  const std::string csv = out.files.at("baseline.csv");
  CHECK(csv.find("\nbilevel,") != std::string::npos);
  CHECK(csv.find("\nlowest_price,") != std::string::npos);
  CHECK(io::json::parse(out.files.at("baseline.json")).at("combined_cost_increase_pct").get<double>() > 0.0);
}
