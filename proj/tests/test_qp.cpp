#include <doctest.h>

#include <random>

#include "evprice/qp.hpp"

using evprice::qp::ChebyshevBall;
using evprice::qp::Polyhedron;
using evprice::qp::QpError;
using evprice::qp::QpProblem;
using evprice::qp::QpStatus;

namespace {

// Exhaustive active-set enumeration: for every subset S of inequalities,
// solve the equality-constrained KKT system with rows S held tight and keep
// the feasible, dual-feasible candidate with the lowest objective.
struct Brute {
  bool found = false;
  double objective = 0.0;
  Eigen::VectorXd x;
};

Brute brute_force(const QpProblem& p) {
  const int n = static_cast<int>(p.num_variables());
  const int meq = static_cast<int>(p.Aeq.rows());
  const int m = static_cast<int>(p.Aineq.rows());
  Brute best;
  for (int mask = 0; mask < (1 << m); ++mask) {
    std::vector<int> rows;
    for (int j = 0; j < m; ++j)
      if (mask & (1 << j)) rows.push_back(j);
    const int k = meq + static_cast<int>(rows.size());
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + k, n + k);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + k);
    K.topLeftCorner(n, n) = p.H;
    rhs.head(n) = -p.c;
    for (int i = 0; i < meq; ++i) {
      K.block(n + i, 0, 1, n) = p.Aeq.row(i);
      K.block(0, n + i, n, 1) = p.Aeq.row(i).transpose();
      rhs(n + i) = p.beq(i);
    }
    for (size_t r = 0; r < rows.size(); ++r) {
      const int i = meq + static_cast<int>(r);
      K.block(n + i, 0, 1, n) = p.Aineq.row(rows[r]);
      K.block(0, n + i, n, 1) = p.Aineq.row(rows[r]).transpose();
      rhs(n + i) = p.bineq(rows[r]);
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
    if (lu.rank() < n + k) continue;
    const Eigen::VectorXd sol = lu.solve(rhs);
    const Eigen::VectorXd x = sol.head(n);
    if (m > 0 && (p.Aineq * x - p.bineq).maxCoeff() > 1e-9) continue;
    if (k > meq && sol.tail(k - meq).minCoeff() < -1e-9) continue;
    const double obj = p.objective(x);
    if (!best.found || obj < best.objective - 1e-12) best = {true, obj, x};
  }
  return best;
}

QpProblem random_qp(std::mt19937_64& rng, int n, int meq, int m) {
  std::normal_distribution<double> N(0.0, 1.0);
  QpProblem p = QpProblem::with_size(n);
  Eigen::MatrixXd L(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) L(i, j) = N(rng);
  p.H = L * L.transpose() + 0.1 * Eigen::MatrixXd::Identity(n, n);
  for (int i = 0; i < n; ++i) p.c(i) = 3.0 * N(rng);
  // A feasible anchor point guarantees nonempty constraints.
  Eigen::VectorXd anchor(n);
  for (int i = 0; i < n; ++i) anchor(i) = N(rng);
  p.Aeq.resize(meq, n);
  for (int i = 0; i < meq; ++i)
    for (int j = 0; j < n; ++j) p.Aeq(i, j) = N(rng);
  p.beq = p.Aeq * anchor;
  p.Aineq.resize(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) p.Aineq(i, j) = N(rng);
  p.bineq = p.Aineq * anchor;
  for (int i = 0; i < m; ++i) p.bineq(i) += std::abs(N(rng));
  return p;
}

}  // namespace

TEST_CASE("solve_qp: scalar bound is active with dual 2") {
  QpProblem p = QpProblem::with_size(1);
  p.H(0, 0) = 2.0;
  p.Aineq = Eigen::MatrixXd::Constant(1, 1, -1.0);
  p.bineq = Eigen::VectorXd::Constant(1, -1.0);
  const auto sol = evprice::qp::solve_qp(p);
  CHECK(sol.x(0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sol.ineq_duals(0) == doctest::Approx(2.0).epsilon(1e-12));
  REQUIRE(sol.active_set.size() == 1);
  CHECK(sol.residuals.max() <= 1e-8);
}

TEST_CASE("solve_qp: symmetric equality split") {
  QpProblem p = QpProblem::with_size(2);
  p.H = Eigen::MatrixXd::Identity(2, 2);
  p.Aeq = Eigen::MatrixXd::Ones(1, 2);
  p.beq = Eigen::VectorXd::Ones(1);
  const auto sol = evprice::qp::solve_qp(p);
  CHECK(sol.x(0) == doctest::Approx(0.5));
  CHECK(sol.x(1) == doctest::Approx(0.5));
  CHECK(sol.eq_duals(0) == doctest::Approx(-0.5));
}

TEST_CASE("solve_qp: matches exhaustive active-set enumeration") {
  std::mt19937_64 rng(20240611);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = 2 + trial % 5;
    const int meq = trial % 3 == 0 ? 1 : 0;
    const int m = 3 + trial % 6;
    const QpProblem p = random_qp(rng, n, meq, m);
    const Brute oracle = brute_force(p);
    REQUIRE(oracle.found);
    const auto sol = evprice::qp::solve_qp(p);
    CHECK(sol.objective == doctest::Approx(oracle.objective).epsilon(1e-8));
    CHECK((sol.x - oracle.x).norm() <= 1e-6 * (1.0 + oracle.x.norm()));
    CHECK(sol.residuals.max() <= 1e-8);
    if (m > 0) CHECK((p.Aineq * sol.x - p.bineq).maxCoeff() <= 1e-9);
  }
}

TEST_CASE("solve_qp: LPs and degenerate vertices") {
  // min −x − y over the unit box with a redundant tight row through (1,1).
  QpProblem p = QpProblem::with_size(2);
  p.c << -1.0, -1.0;
  p.Aineq.resize(5, 2);
  p.Aineq << 1, 0, 0, 1, -1, 0, 0, -1, 1, 1;
  p.bineq.resize(5);
  p.bineq << 1, 1, 0, 0, 2;
  const auto sol = evprice::qp::solve_qp(p);
  CHECK(sol.x(0) == doctest::Approx(1.0));
  CHECK(sol.x(1) == doctest::Approx(1.0));
  CHECK(sol.objective == doctest::Approx(-2.0));
  CHECK(sol.residuals.max() <= 1e-8);
  CHECK(sol.active_set.size() == 3);
  CHECK(sol.working_set.size() == 2);
}

TEST_CASE("solve_qp: infeasible and unbounded are reported") {
  QpProblem p = QpProblem::with_size(1);
  p.Aineq.resize(2, 1);
  p.Aineq << 1, -1;
  p.bineq.resize(2);
  p.bineq << 0, -1;
  try {
    evprice::qp::solve_qp(p);
    FAIL("expected infeasible");
  } catch (const QpError& e) {
    CHECK(e.status() == QpStatus::kInfeasible);
  }
  QpProblem q = QpProblem::with_size(1);
  q.c(0) = -1.0;
  try {
    evprice::qp::solve_qp(q);
    FAIL("expected unbounded");
  } catch (const QpError& e) {
    CHECK(e.status() == QpStatus::kUnbounded);
  }
}

TEST_CASE("solve_qp: deterministic active sets") {
  std::mt19937_64 rng(7);
  const QpProblem p = random_qp(rng, 5, 1, 8);
  const auto a = evprice::qp::solve_qp(p);
  const auto b = evprice::qp::solve_qp(p);
  CHECK(a.active_set == b.active_set);
  CHECK(a.x == b.x);
}

TEST_CASE("remove_redundant: keeps only the binding bound") {
  Polyhedron poly;
  poly.A = Eigen::MatrixXd::Ones(2, 1);
  poly.b.resize(2);
  poly.b << 1.0, 2.0;
  std::vector<int> kept;
  const Polyhedron out = evprice::qp::remove_redundant(poly, &kept);
  REQUIRE(out.rows() == 1);
  CHECK(out.b(0) == doctest::Approx(1.0));
  CHECK(kept == std::vector<int>{0});
}

TEST_CASE("remove_redundant: vertex tangent planes") {
  Polyhedron box;
  box.A.resize(5, 2);
  box.A << 1, 0, 0, 1, -1, 0, 0, -1, 1, 1;
  box.b.resize(5);
  SUBCASE("touching the corner only") {
    box.b << 1, 1, 0, 0, 2;
    CHECK(evprice::qp::remove_redundant(box).rows() == 4);
  }
  SUBCASE("cutting the corner") {
    box.b << 1, 1, 0, 0, 1.5;
    CHECK(evprice::qp::remove_redundant(box).rows() == 5);
  }
}

TEST_CASE("remove_redundant: minimal simplex unchanged") {
  Polyhedron s;
  s.A.resize(3, 2);
  s.A << -1, 0, 0, -1, 1, 1;
  s.b.resize(3);
  s.b << 0, 0, 1;
  const Polyhedron out = evprice::qp::remove_redundant(s);
  CHECK(out.A == s.A);
  CHECK(out.b == s.b);
}

TEST_CASE("chebyshev_center: unit box and flat slab") {
  Polyhedron box;
  box.A.resize(4, 2);
  box.A << 1, 0, 0, 1, -1, 0, 0, -1;
  box.b.resize(4);
  box.b << 1, 1, 0, 0;
  const ChebyshevBall ball = evprice::qp::chebyshev_center(box);
  CHECK(ball.radius == doctest::Approx(0.5));
  CHECK(ball.center(0) == doctest::Approx(0.5));
  CHECK(ball.center(1) == doctest::Approx(0.5));

  Polyhedron slab;
  slab.A.resize(2, 1);
  slab.A << 1, -1;
  slab.b.resize(2);
  slab.b << 1, -1;
  CHECK(evprice::qp::chebyshev_center(slab).radius == doctest::Approx(0.0));

  Polyhedron empty;
  empty.A.resize(2, 1);
  empty.A << 1, -1;
  empty.b.resize(2);
  empty.b << 0, -1;
  CHECK_THROWS_AS(evprice::qp::chebyshev_center(empty), evprice::qp::EmptyPolyhedronError);
}

TEST_CASE("chebyshev_center: random polygons against a grid search") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> angle(0.0, 6.283185307179586);
  std::uniform_real_distribution<double> offset(0.3, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    Polyhedron poly;
    const int m = 5 + trial;
    poly.A.resize(m, 2);
    poly.b.resize(m);
    for (int j = 0; j < m; ++j) {
      const double t = angle(rng);
      poly.A(j, 0) = std::cos(t);
      poly.A(j, 1) = std::sin(t);
      poly.b(j) = offset(rng);
    }
    // Keep it bounded.
    Polyhedron bounded;
    bounded.A.resize(m + 4, 2);
    bounded.b.resize(m + 4);
    bounded.A << poly.A, Eigen::MatrixXd::Identity(2, 2), -Eigen::MatrixXd::Identity(2, 2);
    bounded.b << poly.b, Eigen::VectorXd::Constant(4, 2.0);
    const ChebyshevBall ball = evprice::qp::chebyshev_center(bounded);

    double best = -1e9;
    const int steps = 801;
    for (int i = 0; i < steps; ++i) {
      for (int k = 0; k < steps; ++k) {
        Eigen::Vector2d x(-2.0 + 4.0 * i / (steps - 1), -2.0 + 4.0 * k / (steps - 1));
        best = std::max(best, (bounded.b - bounded.A * x).minCoeff());
      }
    }
    CHECK(std::abs(ball.radius - best) <= 1e-4 + 4.0 / (steps - 1));
    CHECK((bounded.b - bounded.A * ball.center).minCoeff() == doctest::Approx(ball.radius).epsilon(1e-9));
  }
}

TEST_CASE("facet_center: centered on the box edge") {
  Polyhedron box;
  box.A.resize(4, 2);
  box.A << 1, 0, 0, 1, -1, 0, 0, -1;
  box.b.resize(4);
  box.b << 2, 1, 0, 0;
  const ChebyshevBall ball = evprice::qp::facet_center(box, 0);
  CHECK(ball.center(0) == doctest::Approx(2.0));
  CHECK(ball.center(1) == doctest::Approx(0.5));
  CHECK(ball.radius == doctest::Approx(0.5));
}
