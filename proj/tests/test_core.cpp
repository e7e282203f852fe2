#include <doctest.h>

#include <cmath>

#include "evprice/bilevel.hpp"
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

// Toy closed form: charging flow c solves 2γc/R + γe/ρ + λe = 0, clipped to [0, 100].
double toy_demand(double lambda) {
  const double c = std::clamp(-(1e4 / 2e3) * (1e3 * 12.0 / 200.0 + 12.0 * lambda), 0.0, 100.0);
  return 12.0 * c;
}

}  // namespace

TEST_CASE("toy extended network layout") {
  const Built b = build(synthetic::one_station_toy());
  CHECK(b.net.nodes.size() == 4);
  REQUIRE(b.net.num_arcs() == 4);
  CHECK(b.net.arcs[0].kind == traffic::ArcKind::kPhysical);
  CHECK(b.net.arcs[2].kind == traffic::ArcKind::kNoCharge);
  CHECK(b.net.arcs[3].kind == traffic::ArcKind::kCharge);
  CHECK(b.net.num_routes() == 2);
  CHECK(b.qp.Q(3, 3) == doctest::Approx(2e3 / 1e4));
  CHECK(b.qp.q_base(3) == doctest::Approx(1e3 * 12.0 / 200.0));
  CHECK(b.qp.J(0, 0) == 12.0);
}

TEST_CASE("route expansion splits untokened station passes") {
  synthetic::Instance inst = synthetic::one_station_toy();
  inst.traffic.od_pairs[0].routes = {{"a_in", "a_out"}};
  inst.build.expand_routes = true;
  CHECK(build(inst).net.num_routes() == 2);
  inst.build.expand_routes = false;
  CHECK_THROWS_AS(traffic::build_extended_network(inst.traffic, inst.build), Error);
}

TEST_CASE("toy traffic solution matches closed form") {
  const Built b = build(synthetic::one_station_toy());
  for (double l : {-9.0, -6.5, -6.0, -5.5, -5.0, 0.0, 3.0}) {
    const auto sol = traffic::solve_traffic(b.qp, b.net, Eigen::VectorXd::Constant(1, l));
    CHECK(sol.demand(0) == doctest::Approx(toy_demand(l)).epsilon(1e-9).scale(1.0));
    CHECK(sol.route_flows.sum() == doctest::Approx(150.0));
  }
}

TEST_CASE("two-bus OPF prices and strong duality") {
  const synthetic::Instance inst = synthetic::one_station_toy();
  const auto opf = grid::solve_opf(inst.grid, Eigen::VectorXd::Constant(1, 240.0));
  CHECK(opf.g(0) == doctest::Approx(340.0));
  CHECK(opf.duals.lambda(0) == doctest::Approx(0.5));
  CHECK(opf.duals.lambda(1) == doctest::Approx(0.5));
  CHECK(opf.objective == doctest::Approx(170.0));
  CHECK(grid::dual_objective(inst.grid, opf.duals, Eigen::VectorXd::Constant(1, 240.0)) == doctest::Approx(170.0));
  CHECK(grid::dual_variable_count(inst.grid) == 2 * 1 + 3 * 2 + 4 * 1);
}

TEST_CASE("congested line separates nodal prices") {
  const synthetic::Instance inst = synthetic::two_station_asymmetric();
  // Line 0-1 carries bus-1 load plus station A demand; limit 600.
  Eigen::VectorXd d(2);
  d << 900.0, 0.0;
  const auto opf = grid::solve_opf(inst.grid, d);
  CHECK(opf.duals.lambda(0) == doctest::Approx(0.2));
  CHECK(opf.duals.lambda(1) == doctest::Approx(0.6));
  CHECK(std::abs(opf.flows(0)) == doctest::Approx(600.0));
  CHECK(opf.objective == doctest::Approx(0.2 * 600.0 + 0.6 * 500.0));
  d << 100.0, 0.0;
  const auto free = grid::solve_opf(inst.grid, d);
  CHECK(free.duals.lambda(1) == doctest::Approx(0.2));
  CHECK(free.duals.lambda(3) == doctest::Approx(0.2));
}

TEST_CASE("toy partition has three regions with the closed-form slope") {
  const Built b = build(synthetic::one_station_toy());
  const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
  REQUIRE(pi.size() == 3);
  std::vector<std::pair<double, double>> spans;
  for (const auto& r : pi.regions) {
    double lo = -10.0, hi = 10.0;
    for (int i = 0; i < r.poly.rows(); ++i) {
      const double a = r.poly.A(i, 0), rhs = r.poly.b(i);
      if (a > 0) hi = std::min(hi, rhs / a);
      else lo = std::max(lo, rhs / a);
    }
    spans.push_back({lo, hi});
    const double slope = r.policy.demand_matrix(0, 0);
    const double mid = 0.5 * (lo + hi);
    if (mid > -20.0 / 3.0 && mid < -5.0) CHECK(slope == doctest::Approx(-720.0).epsilon(1e-8));
    else CHECK(std::abs(slope) < 1e-8);
  }
  std::sort(spans.begin(), spans.end());
  CHECK(spans[0].second == doctest::Approx(-20.0 / 3.0).epsilon(1e-8));
  CHECK(spans[1].first == doctest::Approx(-20.0 / 3.0).epsilon(1e-8));
  CHECK(spans[1].second == doctest::Approx(-5.0).epsilon(1e-8));
  CHECK(spans[2].first == doctest::Approx(-5.0).epsilon(1e-8));
  for (const auto& lam : mpqp::sample_box(b.inst.box, 200, 3))
    CHECK(mpqp::evaluate(pi, lam).demand(0) == doctest::Approx(toy_demand(lam(0))).scale(1.0).epsilon(1e-7));
}

TEST_CASE("random partitions agree with direct solves") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    CAPTURE(seed);
    const Built b = build(synthetic::random_instance(seed));
    const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
    CHECK(pi.size() >= 1);
    for (const auto& lam : mpqp::sample_box(b.inst.box, 50, seed + 100)) {
      const Eigen::VectorXd direct = traffic::solve_traffic(b.qp, b.net, lam).demand;
      const Eigen::VectorXd piece = mpqp::evaluate(pi, lam).demand;
      CHECK((direct - piece).norm() <= 1e-6 * (1.0 + direct.norm()));
    }
  }
}

TEST_CASE("bilevel optimum matches the joint problem") {
  std::vector<synthetic::Instance> cases = {synthetic::one_station_toy(), synthetic::two_station_asymmetric(),
                                            synthetic::saturated_outer_stations()};
  for (std::uint64_t seed = 1; seed <= 6; ++seed) cases.push_back(synthetic::random_instance(seed));
  for (auto& inst : cases) {
    CAPTURE(inst.name);
    const Built b = build(inst);
    const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
    auto res = bilevel::solve_bilevel(b.inst.grid, pi);
    bilevel::attach_traffic(res, b.qp, b.net);
    const auto joint = bilevel::solve_joint(b.inst.grid, b.net, b.qp);
    CHECK(res.combined_cost == doctest::Approx(joint.combined_cost).epsilon(1e-6));
    const auto report = bilevel::verify_kkt_equilibrium(res, b.inst.grid, b.qp);
    CHECK(report.max() <= 1e-6);
    const auto shifted = bilevel::verify_kkt_equilibrium(bilevel::perturb_prices(res, 1e-3), b.inst.grid, b.qp);
    CHECK(shifted.max() > 1e-4);
  }
}

TEST_CASE("lowest-price baseline is no better than the equilibrium") {
  const Built b = build(synthetic::two_station_asymmetric());
  const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
  auto res = bilevel::solve_bilevel(b.inst.grid, pi);
  bilevel::attach_traffic(res, b.qp, b.net);
  const auto base = bilevel::baseline_lowest_price(b.inst.grid, b.net, b.qp);
  CHECK(base.combined_cost > res.combined_cost * (1.0 + 1e-6));
}

TEST_CASE("random partitions have disjoint interiors") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    CAPTURE(seed);
    const Built b = build(synthetic::random_instance(seed));
    const auto pi = mpqp::explore(b.qp, b.inst.box, b.inst.box.center());
    for (int i = 0; i < pi.size(); ++i)
      for (int j = i + 1; j < pi.size(); ++j) {
        const auto& P = pi.regions[static_cast<size_t>(i)].poly;
        const auto& Q = pi.regions[static_cast<size_t>(j)].poly;
        qp::Polyhedron both;
        both.A.resize(P.rows() + Q.rows(), P.dim());
        both.A << P.A, Q.A;
        both.b.resize(P.rows() + Q.rows());
        both.b << P.b, Q.b;
        double radius = 0.0;
        try {
          radius = qp::chebyshev_center(both).radius;
        } catch (const qp::EmptyPolyhedronError&) {
        }
        CHECK(radius <= 1e-7);
      }
  }
}
