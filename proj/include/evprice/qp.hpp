#pragma once

#include <Eigen/Dense>

#include <limits>
#include <string>
#include <vector>

#include "evprice/errors.hpp"

namespace evprice::qp {

/// Convex quadratic program
///
///   min  ½ xᵀHx + cᵀx
///   s.t. Aeq x  = beq
///        Aineq x ≤ bineq
///
/// H must be symmetric positive semidefinite. Either constraint block may
/// have zero rows, but its column count must match the variable count.
struct QpProblem {
  Eigen::MatrixXd H;
  Eigen::VectorXd c;
  Eigen::MatrixXd Aeq;
  Eigen::VectorXd beq;
  Eigen::MatrixXd Aineq;
  Eigen::VectorXd bineq;

  Eigen::Index num_variables() const { return c.size(); }

  // Empty constraint blocks of the right width for an n-variable problem.
  static QpProblem with_size(Eigen::Index n);

  /// Throws Error(kInput) on inconsistent dimensions, asymmetric H, or an
  /// eigenvalue of H below −1e-9·‖H‖.
  void validate() const;

  double objective(const Eigen::VectorXd& x) const;
};

enum class QpStatus { kOptimal, kInfeasible, kUnbounded, kMaxIterations };

const char* to_string(QpStatus status);

class QpError : public Error {
 public:
  QpError(QpStatus status, const std::string& what, double residual = 0.0);
  QpStatus status() const noexcept { return status_; }
  // Phase-1 infeasibility measure or the last KKT residual, when meaningful.
  double residual() const noexcept { return residual_; }

 private:
  QpStatus status_;
  double residual_;
};

/// Scaled KKT residuals of a primal-dual pair; each family is normalized by
/// the magnitude of the data it is built from.
struct KktResiduals {
  double stationarity = 0.0;
  double primal_equality = 0.0;
  double primal_inequality = 0.0;
  double dual_feasibility = 0.0;
  double complementarity = 0.0;

  double max() const;
};

struct PrimalDualPoint {
  Eigen::VectorXd x;
  Eigen::VectorXd eq_duals;
  Eigen::VectorXd ineq_duals;
  // Inequalities with slack ≤ ε_act (relative to the row norm), ascending.
  std::vector<int> active_set;
  // Linearly independent subset of the active inequalities that carries the
  // multipliers, ascending. Inequalities outside it have zero dual.
  std::vector<int> working_set;
  double objective = 0.0;
  int iterations = 0;
  KktResiduals residuals;
};

struct SolverOptions {
  double active_tol = 1e-7;
  // 0 selects 50·(n + m) + 200.
  int max_iterations = 0;
};

/// Primal active-set method with a phase-1 feasibility LP. Pivoting is
/// deterministic: blocking constraints and dropped multipliers tie-break on
/// the lowest constraint index.
PrimalDualPoint solve_qp(const QpProblem& problem, const SolverOptions& options = {});

KktResiduals kkt_residuals(const QpProblem& problem, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& eq_duals, const Eigen::VectorXd& ineq_duals);

// ---------------------------------------------------------------------------
// Polyhedra in half-space form {x : A x ≤ b}.

struct Polyhedron {
  Eigen::MatrixXd A;
  Eigen::VectorXd b;

  Eigen::Index dim() const { return A.cols(); }
  Eigen::Index rows() const { return A.rows(); }

  // Largest normalized violation max_j (a_jᵀx − b_j)/‖a_j‖ (≤ 0 inside).
  double max_violation(const Eigen::VectorXd& x) const;
  bool contains(const Eigen::VectorXd& x, double tol = 1e-9) const;
  // Scales every nonzero row to unit norm.
  Polyhedron normalized() const;
};

class EmptyPolyhedronError : public Error {
 public:
  explicit EmptyPolyhedronError(const std::string& what) : Error(ErrorKind::kInfeasible, what) {}
};

struct ChebyshevBall {
  Eigen::VectorXd center;
  double radius = 0.0;
};

/// Drops every constraint whose left-hand side cannot exceed its right-hand
/// side over the remaining constraints. Rows are tested in index order
/// against the rows still kept, so of two duplicates the later one survives.
/// `kept`, when given, receives the surviving original row indices.
Polyhedron remove_redundant(const Polyhedron& poly, std::vector<int>* kept = nullptr,
                            double tol = 1e-9);

/// Center and radius of the largest inscribed ball. Radius 0 means the set
/// is not full-dimensional. Throws EmptyPolyhedronError for an empty set.
/// Unbounded sets are handled by capping the radius at `radius_cap`.
ChebyshevBall chebyshev_center(const Polyhedron& poly, double radius_cap = 1e6);

/// Largest ball inside facet `row` (the facet hyperplane intersected with
/// the other constraints), measured within the hyperplane.
ChebyshevBall facet_center(const Polyhedron& poly, int row, double radius_cap = 1e6);

}  // namespace evprice::qp
