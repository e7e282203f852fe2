#include <doctest.h>

#include <cmath>

#include "evprice/bilevel.hpp"
#include "evprice/scenario.hpp"
#include "evprice/synthetic.hpp"

using namespace evprice;

namespace {

struct Built {
  synthetic::Instance inst;
  traffic::ExtendedTrafficNetwork net;
  traffic::CompactQP qp;
};

Built build(synthetic::Instance inst) {
  Built b{std::move(inst), {}, {}};
  b.net = traffic::build_extended_network(b.inst.traffic, b.inst.build);
  b.qp = traffic::assemble_traffic_qp(b.net);
  return b;
}

Eigen::VectorXd scalar(double x) { return Eigen::VectorXd::Constant(1, x); }

// Two copies of the toy network side by side, one O-D pair and station each.
traffic::TrafficInput twin_toys() {
  const traffic::TrafficInput toy = synthetic::one_station_toy().traffic;
  traffic::TrafficInput out;
  out.time_value = toy.time_value;
  for (const std::string k : {"1", "2"}) {
    for (const auto& n : toy.nodes) out.nodes.push_back(n + k);
    for (auto a : toy.arcs) {
      a.id += k;
      a.tail += k;
      a.head += k;
      out.arcs.push_back(a);
    }
    auto s = toy.stations[0];
    s.id += k;
    s.traffic_node += k;
    out.stations.push_back(s);
    auto od = toy.od_pairs[0];
    od.origin += k;
    od.destination += k;
    for (auto& route : od.routes)
      for (auto& id : route) {
        const auto colon = id.find(':');
        id = colon == std::string::npos ? id + k : id.substr(0, colon) + k + id.substr(colon);
      }
    out.od_pairs.push_back(od);
  }
  return out;
}

}  // namespace

TEST_CASE("network without stations keeps the base arcs") {
  traffic::TrafficInput in = synthetic::one_station_toy().traffic;
  in.stations.clear();
  in.od_pairs[0].routes = {{"a_in", "a_out"}};
  const auto net = traffic::build_extended_network(in);
  CHECK(net.num_arcs() == 2);
  CHECK(net.num_physical == 2);
  CHECK(net.num_stations() == 0);
  CHECK(net.num_routes() == 1);
  CHECK(traffic::assemble_traffic_qp(net).J.size() == 0);
}

TEST_CASE("toy arc travel times and QP coefficients") {
  const Built b = build(synthetic::one_station_toy());
  const auto& st = b.net.stations[0];
  CHECK(traffic::travel_time(b.net.arcs[0], 100.0) == doctest::Approx(0.01));
  CHECK(traffic::travel_time(b.net.arcs[3], 0.0, &st) == doctest::Approx(0.06));
  CHECK(traffic::travel_time(b.net.arcs[2], 75.0) == 0.0);
  CHECK_THROWS_AS(traffic::travel_time(b.net.arcs[0], -1.0), Error);

  CHECK(b.qp.Q(0, 0) == doctest::Approx(0.2));
  CHECK(b.qp.Q(1, 1) == doctest::Approx(0.2));
  CHECK(b.qp.Q(2, 2) == 0.0);
  CHECK(b.qp.Q(3, 3) == doctest::Approx(0.2));
  CHECK(b.qp.q(scalar(0.5))(3) == doctest::Approx(66.0));
  CHECK(b.qp.q(scalar(0.5))(2) == 0.0);
  CHECK(b.qp.J.isApprox(12.0 * Eigen::MatrixXd::Identity(1, 1)));
}

TEST_CASE("station demand from charge-arc flow") {
  const Built b = build(synthetic::one_station_toy());
  Eigen::VectorXd xi = Eigen::VectorXd::Zero(4);
  for (auto [flow, kwh] : {std::pair{50.0, 600.0}, {100.0, 1200.0}, {0.0, 0.0}}) {
    xi(3) = flow;
    CHECK(traffic::demand_from_flows(b.net, xi)(0) == doctest::Approx(kwh));
  }
  CHECK(b.net.stations[0].demand_cap() == doctest::Approx(1200.0));
}

TEST_CASE("line flow coefficients") {
  grid::DistributionCase g = synthetic::one_station_toy().grid;
  g.lines = {{0, 1, 1.0, 1.0, 100.0}, {0, 1, 0.0, 1.0, 100.0}, {0, 1, 3.0, 4.0, 100.0}};
  const auto k = grid::flow_coefficients(g);
  CHECK(k.K1(0) == doctest::Approx(0.5));
  CHECK(k.K2(0) == doctest::Approx(0.5));
  CHECK(k.K1(1) == 0.0);
  CHECK(k.K2(1) == doctest::Approx(1.0));
  CHECK(k.K1(2) == doctest::Approx(12.0 / 25.0));
  CHECK(k.K2(2) == doctest::Approx(16.0 / 25.0));
}

TEST_CASE("OPF beyond total generation capacity is infeasible") {
  const synthetic::Instance inst = synthetic::one_station_toy();
  try {
    grid::solve_opf(inst.grid, scalar(6000.0));
    FAIL("expected an infeasible OPF");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kInfeasible);
  }
}

TEST_CASE("uniform prices at the marginal cost are dual feasible") {
  const synthetic::Instance inst = synthetic::one_station_toy();
  const grid::DualProblem dual = grid::assemble_dual(inst.grid);
  Eigen::VectorXd z = Eigen::VectorXd::Zero(dual.layout.size());
  for (int i = 0; i < inst.grid.num_buses(); ++i) z(dual.layout.lambda(i)) = 0.5;
  const auto& p = dual.problem;
  CHECK((p.Aeq * z - p.beq).cwiseAbs().maxCoeff() <= 1e-12);
  CHECK((p.Aineq * z - p.bineq).maxCoeff() <= 1e-12);

  grid::OpfDuals d;
  d.tau_up = d.tau_lo = Eigen::VectorXd::Zero(1);
  d.mu_up = d.mu_lo = Eigen::VectorXd::Zero(2);
  d.eta_up = d.eta_lo = Eigen::VectorXd::Zero(1);
  d.lambda = Eigen::VectorXd::Constant(2, 0.5);
  const double cost = grid::solve_opf(inst.grid, scalar(240.0)).objective;
  CHECK(grid::dual_objective(inst.grid, d, scalar(240.0)) == doctest::Approx(cost));
}

TEST_CASE("toy region slope agrees with re-solves") {
  const Built b = build(synthetic::one_station_toy());
  const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
  const double lam = -5.8, h = 1e-4;
  const int r = pi.locate(scalar(lam));
  REQUIRE(r >= 0);
  const double d0 = traffic::solve_traffic(b.qp, b.net, scalar(lam)).demand(0);
  const double d1 = traffic::solve_traffic(b.qp, b.net, scalar(lam + h)).demand(0);
  CHECK(pi.regions[static_cast<size_t>(r)].policy.demand_matrix(0, 0) == doctest::Approx((d1 - d0) / h).epsilon(1e-6));
}

TEST_CASE("toy breakpoint located by bisection on the active set") {
  const Built b = build(synthetic::one_station_toy());
  auto charging = [&](double lam) { return traffic::solve_traffic(b.qp, b.net, scalar(lam)).arc_flows(3) > 1e-7; };
  double lo = -6.0, hi = -4.0;
  REQUIRE(charging(lo));
  REQUIRE(!charging(hi));
  for (int i = 0; i < 60; ++i) {
    const double mid = 0.5 * (lo + hi);
    (charging(mid) ? lo : hi) = mid;
  }
  CHECK(lo == doctest::Approx(-5.0).epsilon(1e-6));

  const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
  bool found = false;
  for (const auto& reg : pi.regions)
    for (int i = 0; i < reg.poly.rows(); ++i)
      if (!reg.on_box[static_cast<size_t>(i)] && std::abs(reg.poly.b(i) / reg.poly.A(i, 0) + 5.0) < 1e-7) found = true;
  CHECK(found);
}

TEST_CASE("region outside the box is empty") {
  const Built b = build(synthetic::one_station_toy());
  const auto sol = traffic::solve_traffic(b.qp, b.net, scalar(-6.0));
  const auto policy = mpqp::sensitivity_at(b.qp, scalar(-6.0), sol.point);
  CHECK_THROWS_AS(mpqp::build_region(b.qp, policy, mpqp::PriceBox::uniform(1, 0.0, 1.0)), qp::EmptyPolyhedronError);
}

TEST_CASE("independent toys inside one affine piece give a single region") {
  const auto net = traffic::build_extended_network(twin_toys(), {false, 0.0});
  const auto qp = traffic::assemble_traffic_qp(net);
  const auto box = mpqp::PriceBox::uniform(2, -6.5, -5.5);
  const auto pi = mpqp::explore(qp, box, box.center());
  REQUIRE(pi.size() == 1);
  const auto& reg = pi.regions[0];
  CHECK(reg.poly.rows() == 4);
  for (bool b : reg.on_box) CHECK(b);
  CHECK(reg.policy.demand_matrix.isApprox(-720.0 * Eigen::MatrixXd::Identity(2, 2), 1e-8));
}

TEST_CASE("regions reproduce the demand at their base point") {
  for (std::uint64_t seed : {2u, 7u, 11u}) {
    CAPTURE(seed);
    const Built b = build(synthetic::random_instance(seed));
    const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
    for (const auto& reg : pi.regions) {
      const Eigen::VectorXd direct = traffic::solve_traffic(b.qp, b.net, reg.policy.base_point).demand;
      CHECK((reg.policy.demand(reg.policy.base_point) - direct).cwiseAbs().maxCoeff() <= 1e-7 * (1.0 + direct.norm()));
    }
  }
}

TEST_CASE("zero-demand region objective is the negated OPF cost") {
  const Built b = build(synthetic::one_station_toy());
  const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
  const int r = pi.locate(scalar(0.0));
  REQUIRE(r >= 0);
  const auto& reg = pi.regions[static_cast<size_t>(r)];
  REQUIRE(reg.policy.demand_matrix.cwiseAbs().maxCoeff() < 1e-12);
  const auto cand = bilevel::solve_region(grid::assemble_dual(b.inst.grid), reg);
  REQUIRE(cand.feasible);
  const double opf0 = grid::solve_opf(b.inst.grid, scalar(0.0)).objective;
  CHECK(cand.objective == doctest::Approx(-opf0 - reg.policy.value_offset));
}

TEST_CASE("charging-expense objective on the toy") {
  const Built b = build(synthetic::one_station_toy());
  const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
  bilevel::BilevelOptions opt;
  opt.objective = bilevel::RegionObjective::kChargingExpense;
  const auto res = bilevel::solve_bilevel(b.inst.grid, pi, opt);
  CHECK(res.lambda_c(0) == doctest::Approx(0.5));
  CHECK(res.objective == doctest::Approx(-50.0));

  const int mid = pi.locate(scalar(-5.8));
  REQUIRE(mid >= 0);
  const auto cand = bilevel::solve_region(grid::assemble_dual(b.inst.grid), pi.regions[static_cast<size_t>(mid)],
                                          bilevel::RegionObjective::kChargingExpense);
  REQUIRE(cand.feasible);
  CHECK(cand.lambda_c(0) == doctest::Approx(-5.0));
  CHECK(cand.objective == doctest::Approx(500.0));
}

TEST_CASE("single-region partition returns that region's candidate") {
  Built b = build(synthetic::one_station_toy());
  const auto box = mpqp::PriceBox::uniform(1, -6.5, -5.5);
  const auto pi = mpqp::explore(b.qp, box, box.center());
  REQUIRE(pi.size() == 1);
  const auto res = bilevel::solve_bilevel(b.inst.grid, pi);
  const auto cand = bilevel::solve_region(grid::assemble_dual(b.inst.grid), pi.regions[0]);
  CHECK(res.region == 0);
  CHECK(res.objective == doctest::Approx(cand.objective));
  CHECK(res.lambda_c(0) == doctest::Approx(cand.lambda_c(0)));
}

TEST_CASE("joint problem without traffic reduces to the OPF") {
  synthetic::Instance inst = synthetic::with_uniform_demand(synthetic::one_station_toy(), 0.0);
  Built b = build(inst);
  const auto joint = bilevel::solve_joint(b.inst.grid, b.net, b.qp);
  const double opf0 = grid::solve_opf(b.inst.grid, scalar(0.0)).objective;
  CHECK(joint.combined_cost == doctest::Approx(opf0));
  CHECK(joint.latency_cost == doctest::Approx(0.0).scale(1.0));

  for (auto& bus : b.inst.grid.buses) bus.load = 0.0;
  const auto empty = bilevel::solve_joint(b.inst.grid, b.net, b.qp);
  CHECK(empty.combined_cost == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("one-station baseline coincides with the equilibrium") {
  const Built b = build(synthetic::one_station_toy());
  const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
  auto res = bilevel::solve_bilevel(b.inst.grid, pi);
  bilevel::attach_traffic(res, b.qp, b.net);
  const auto base = bilevel::baseline_lowest_price(b.inst.grid, b.net, b.qp);
  CHECK(base.converged);
  CHECK(base.combined_cost == doctest::Approx(res.combined_cost).epsilon(1e-6));
}

TEST_CASE("baseline flows violate lower-level stationarity") {
  const Built b = build(synthetic::two_station_asymmetric());
  const auto base = bilevel::baseline_lowest_price(b.inst.grid, b.net, b.qp);
  const auto report = bilevel::verify_kkt_equilibrium(bilevel::as_bilevel_result(base), b.inst.grid, b.qp);
  CHECK(report.lower_max > 1e-3);
}

TEST_CASE("one percent price shift breaks the equilibrium") {
  const Built b = build(synthetic::two_station_asymmetric());
  const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
  auto res = bilevel::solve_bilevel(b.inst.grid, pi);
  bilevel::attach_traffic(res, b.qp, b.net);
  CHECK(bilevel::verify_kkt_equilibrium(res, b.inst.grid, b.qp).max() <= 1e-6);
  const double shift = 0.01 * std::max(1.0, res.lambda.cwiseAbs().maxCoeff());
  CHECK(bilevel::verify_kkt_equilibrium(bilevel::perturb_prices(res, shift), b.inst.grid, b.qp).max() > 1e-3);
}

TEST_CASE("cheap generator at a station's bus keeps that station cheapest") {
  for (double cost : {0.5, 0.3, 0.1, 0.0}) {
    CAPTURE(cost);
    synthetic::Instance inst = synthetic::two_station_asymmetric();
    inst.grid.generators.push_back({"G3", 1, 5000.0, cost});
    inst.box = synthetic::default_price_box(inst.grid);
    const auto p = scenario::run_pipeline(inst, {});
    CHECK(p.result.lambda_c(0) <= p.result.lambda_c(1) + 1e-9);
  }
}

TEST_CASE("mirrored forecasts move the cost in opposite directions") {
  const synthetic::Instance inst = synthetic::two_station_asymmetric();
  scenario::ForecastSpec spec;
  spec.truth = 80.0;
  const auto low = scenario::forecast_sample(inst, spec, {76.0}, {});
  const auto high = scenario::forecast_sample(inst, spec, {84.0}, {});
  REQUIRE(low.status == "ok");
  REQUIRE(high.status == "ok");
  CHECK(low.deviation_pct * high.deviation_pct < 0.0);
  CHECK(std::abs(low.deviation_pct) <= low.bound_pct + 1e-9);
  CHECK(std::abs(high.deviation_pct) <= high.bound_pct + 1e-9);
  CHECK_THROWS_AS(scenario::forecast_sample(inst, spec, {76.0, 80.0}, {}), Error);
}
