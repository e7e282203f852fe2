#include <algorithm>
#include <cmath>
#include <optional>

#include "evprice/qp.hpp"

namespace evprice::qp {

double Polyhedron::max_violation(const Eigen::VectorXd& x) const {
  double worst = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < A.rows(); ++j) {
    const double norm = A.row(j).norm();
    const double lhs = A.row(j).dot(x) - b(j);
    worst = std::max(worst, norm > 0.0 ? lhs / norm : lhs);
  }
  return worst;
}

bool Polyhedron::contains(const Eigen::VectorXd& x, double tol) const {
  return A.rows() == 0 || max_violation(x) <= tol;
}

Polyhedron Polyhedron::normalized() const {
  Polyhedron out = *this;
  for (Eigen::Index j = 0; j < A.rows(); ++j) {
    const double norm = A.row(j).norm();
    if (norm > 0.0) {
      out.A.row(j) /= norm;
      out.b(j) /= norm;
    }
  }
  return out;
}

namespace {

// Maximizes aᵀx over the rows listed in `rows`; nullopt when unbounded.
std::optional<double> support(const Polyhedron& poly, const std::vector<int>& rows, const Eigen::VectorXd& a) {
  const Eigen::Index n = poly.dim();
  QpProblem lp = QpProblem::with_size(n);
  lp.c = -a;
  lp.Aineq.resize(static_cast<Eigen::Index>(rows.size()), n);
  lp.bineq.resize(static_cast<Eigen::Index>(rows.size()));
  for (size_t k = 0; k < rows.size(); ++k) {
    lp.Aineq.row(static_cast<Eigen::Index>(k)) = poly.A.row(rows[k]);
    lp.bineq(static_cast<Eigen::Index>(k)) = poly.b(rows[k]);
  }
  try {
    return -solve_qp(lp).objective;
  } catch (const QpError& e) {
    if (e.status() == QpStatus::kUnbounded) return std::nullopt;
    throw;
  }
}

ChebyshevBall inscribed_ball(const Polyhedron& poly, const Eigen::MatrixXd& Aeq, const Eigen::VectorXd& beq,
                             const Eigen::VectorXd& radius_weights, const std::vector<int>& rows,
                             double radius_cap) {
  const Eigen::Index n = poly.dim();
  QpProblem lp = QpProblem::with_size(n + 1);
  lp.c(n) = -1.0;
  const Eigen::Index m = static_cast<Eigen::Index>(rows.size());
  lp.Aineq = Eigen::MatrixXd::Zero(m + 1, n + 1);
  lp.bineq = Eigen::VectorXd::Zero(m + 1);
  for (Eigen::Index k = 0; k < m; ++k) {
    const int j = rows[static_cast<size_t>(k)];
    lp.Aineq.row(k).head(n) = poly.A.row(j);
    lp.Aineq(k, n) = radius_weights(j);
    lp.bineq(k) = poly.b(j);
  }
  lp.Aineq(m, n) = 1.0;
  lp.bineq(m) = radius_cap;
  lp.Aeq = Eigen::MatrixXd::Zero(Aeq.rows(), n + 1);
  lp.Aeq.leftCols(n) = Aeq;
  lp.beq = beq;
  PrimalDualPoint sol;
  try {
    sol = solve_qp(lp);
  } catch (const QpError& e) {
    if (e.status() == QpStatus::kInfeasible) throw EmptyPolyhedronError("polyhedron: empty");
    throw;
  }
  const double r = sol.x(n);
  if (r < -1e-9) throw EmptyPolyhedronError("polyhedron: empty");
  return {sol.x.head(n), std::max(r, 0.0)};
}

}  // namespace

Polyhedron remove_redundant(const Polyhedron& poly, std::vector<int>* kept, double tol) {
  const Eigen::Index m = poly.rows();
  const Eigen::Index n = poly.dim();
  std::vector<int> alive;
  for (Eigen::Index j = 0; j < m; ++j) {
    if (poly.A.row(j).norm() == 0.0) {
      if (poly.b(j) < -tol) throw EmptyPolyhedronError("polyhedron: empty (0 ≤ negative)");
      continue;
    }
    alive.push_back(static_cast<int>(j));
  }
  // Nonempty check up front; a support LP over an empty set says nothing.
  chebyshev_center(poly);

  std::vector<int> result;
  for (size_t pos = 0; pos < alive.size(); ++pos) {
    const int k = alive[pos];
    std::vector<int> others;
    others.reserve(alive.size());
    others.insert(others.end(), result.begin(), result.end());
    others.insert(others.end(), alive.begin() + static_cast<std::ptrdiff_t>(pos) + 1, alive.end());
    const Eigen::VectorXd a = poly.A.row(k).transpose();
    const double bound = poly.b(k);
    const std::optional<double> best = support(poly, others, a);
    const double scale = a.norm() * (1.0 + std::abs(bound) / a.norm());
    if (!best || *best > bound + tol * scale) result.push_back(k);
  }

  Polyhedron out;
  out.A.resize(static_cast<Eigen::Index>(result.size()), n);
  out.b.resize(static_cast<Eigen::Index>(result.size()));
  for (size_t k = 0; k < result.size(); ++k) {
    out.A.row(static_cast<Eigen::Index>(k)) = poly.A.row(result[k]);
    out.b(static_cast<Eigen::Index>(k)) = poly.b(result[k]);
  }
  if (kept) *kept = result;
  return out;
}

ChebyshevBall chebyshev_center(const Polyhedron& poly, double radius_cap) {
  std::vector<int> rows;
  Eigen::VectorXd weights(poly.rows());
  for (Eigen::Index j = 0; j < poly.rows(); ++j) {
    weights(j) = poly.A.row(j).norm();
    if (weights(j) == 0.0) {
      if (poly.b(j) < -1e-12) throw EmptyPolyhedronError("polyhedron: empty (0 ≤ negative)");
      continue;
    }
    rows.push_back(static_cast<int>(j));
  }
  return inscribed_ball(poly, Eigen::MatrixXd(0, poly.dim()), Eigen::VectorXd(0), weights, rows, radius_cap);
}

ChebyshevBall facet_center(const Polyhedron& poly, int row, double radius_cap) {
  const Eigen::Index n = poly.dim();
  const Eigen::VectorXd normal = poly.A.row(row).transpose();
  const double nn = normal.norm();
  if (nn == 0.0) throw Error(ErrorKind::kInput, "polyhedron: facet row has zero normal");
  const Eigen::VectorXd unit = normal / nn;
  Eigen::VectorXd weights(poly.rows());
  std::vector<int> rows;
  for (Eigen::Index j = 0; j < poly.rows(); ++j) {
    if (j == row) continue;
    const Eigen::VectorXd a = poly.A.row(j).transpose();
    weights(j) = (a - a.dot(unit) * unit).norm();
    if (a.norm() == 0.0) continue;
    rows.push_back(static_cast<int>(j));
  }
  Eigen::MatrixXd Aeq = normal.transpose();
  Eigen::VectorXd beq(1);
  beq(0) = poly.b(row);
  (void)n;
  return inscribed_ball(poly, Aeq, beq, weights, rows, radius_cap);
}

}  // namespace evprice::qp
