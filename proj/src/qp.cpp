#include "evprice/qp.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace evprice::qp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double inf_norm(const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

double inf_norm(const Eigen::MatrixXd& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

struct CoreResult {
  Eigen::VectorXd x;
  std::vector<int> working;   // inequality rows, insertion order
  Eigen::VectorXd eq_duals;   // one per (independent) equality row
  Eigen::VectorXd work_duals; // aligned with `working`
  int iterations = 0;
};

// Primal active-set iterations from a feasible start. Equality rows must be
// linearly independent; inequality rows of zero norm are ignored.
CoreResult active_set_core(const Eigen::MatrixXd& H, const Eigen::VectorXd& c,
                           const Eigen::MatrixXd& Aeq, const Eigen::VectorXd& beq, const Eigen::MatrixXd& Aineq,
                           const Eigen::VectorXd& bineq, const Eigen::VectorXd& row_norms,
                           Eigen::VectorXd x, int max_iterations) {
  const Eigen::Index n = c.size();
  const Eigen::Index meq = Aeq.rows();
  const Eigen::Index min = Aineq.rows();
  const double hnorm = inf_norm(H);

  std::vector<int> working;
  std::vector<char> in_working(static_cast<size_t>(min), 0);
  bool degenerate = false;

  Eigen::MatrixXd M;
  Eigen::MatrixXd Ybasis, Z, R;
  Eigen::VectorXd g, y;

  for (int iter = 0; iter < max_iterations; ++iter) {
    const Eigen::Index mw = meq + static_cast<Eigen::Index>(working.size());
    M.resize(mw, n);
    if (meq > 0) M.topRows(meq) = Aeq;
    for (size_t k = 0; k < working.size(); ++k) M.row(meq + static_cast<Eigen::Index>(k)) = Aineq.row(working[k]);

    if (mw == 0) {
      Z = Eigen::MatrixXd::Identity(n, n);
      Ybasis.resize(n, 0);
      R.resize(0, 0);
    } else {
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(M.transpose());
      Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
      Ybasis = Q.leftCols(mw);
      Z = Q.rightCols(n - mw);
      R = qr.matrixQR().topRows(mw).triangularView<Eigen::Upper>();
    }

    g = H * x + c;
    const double gscale = 1.0 + inf_norm(c) + inf_norm(Eigen::VectorXd(H * x));

    Eigen::VectorXd p = Eigen::VectorXd::Zero(n);
    bool ray = false;
    bool stationary = true;
    if (n - mw > 0) {
      const Eigen::VectorXd gz = Z.transpose() * g;
      if (inf_norm(gz) > 1e-11 * gscale) {
        stationary = false;
        const Eigen::MatrixXd Hz = Z.transpose() * H * Z;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(Hz);
        const Eigen::VectorXd& ev = eig.eigenvalues();
        const Eigen::MatrixXd& V = eig.eigenvectors();
        const double curv_tol = 1e-10 * std::max(1.0, hnorm);
        Eigen::VectorXd pz_ray = Eigen::VectorXd::Zero(gz.size());
        Eigen::VectorXd pz_newton = Eigen::VectorXd::Zero(gz.size());
        for (Eigen::Index k = 0; k < ev.size(); ++k) {
          const double coef = V.col(k).dot(gz);
          if (ev(k) <= curv_tol) {
            pz_ray -= coef * V.col(k);
          } else {
            pz_newton -= (coef / ev(k)) * V.col(k);
          }
        }
        if (inf_norm(pz_ray) > 1e-11 * gscale) {
          ray = true;
          p = Z * pz_ray;
        } else {
          p = Z * pz_newton;
        }
      }
    }

    if (stationary) {
      y = Eigen::VectorXd::Zero(mw);
      if (mw > 0) {
        const Eigen::VectorXd rhs = -(Ybasis.transpose() * g);
        y = R.triangularView<Eigen::Upper>().solve(rhs);
      }
      const double dual_tol = 1e-11 * gscale;
      int drop = -1;
      double most_negative = -dual_tol;
      for (size_t k = 0; k < working.size(); ++k) {
        const double yk = y(meq + static_cast<Eigen::Index>(k));
        if (yk >= -dual_tol) continue;
        if (degenerate) {
          // Bland's rule on degenerate vertices: lowest constraint index.
          if (drop < 0 || working[k] < working[static_cast<size_t>(drop)]) drop = static_cast<int>(k);
        } else if (yk < most_negative ||
                   (yk == most_negative && drop >= 0 && working[k] < working[static_cast<size_t>(drop)])) {
          most_negative = yk;
          drop = static_cast<int>(k);
        }
      }
      if (drop < 0) {
        // Project x back onto the working constraints to clean up drift.
        if (mw > 0) {
          Eigen::VectorXd target(mw);
          if (meq > 0) target.head(meq) = beq;
          for (size_t k = 0; k < working.size(); ++k)
            target(meq + static_cast<Eigen::Index>(k)) = bineq(working[k]);
          const Eigen::VectorXd resid = target - M * x;
          x += Ybasis * R.transpose().triangularView<Eigen::Lower>().solve(resid);
          g = H * x + c;
          y = R.triangularView<Eigen::Upper>().solve(Eigen::VectorXd(-(Ybasis.transpose() * g)));
        }
        CoreResult out;
        out.x = std::move(x);
        out.working = working;
        out.eq_duals = y.head(meq);
        out.work_duals = y.tail(static_cast<Eigen::Index>(working.size()));
        out.iterations = iter;
        return out;
      }
      in_working[static_cast<size_t>(working[static_cast<size_t>(drop)])] = 0;
      working.erase(working.begin() + drop);
      continue;
    }

    // Ratio test; ties resolve to the lowest row index.
    double alpha = ray ? kInf : 1.0;
    int block = -1;
    const double pnorm = inf_norm(p);
    for (Eigen::Index j = 0; j < min; ++j) {
      if (in_working[static_cast<size_t>(j)] || row_norms(j) == 0.0) continue;
      const double ap = Aineq.row(j).dot(p);
      if (ap <= 1e-10 * row_norms(j) * pnorm) continue;
      const double slack = bineq(j) - Aineq.row(j).dot(x);
      const double aj = std::max(slack, 0.0) / ap;
      if (aj < alpha) {
        alpha = aj;
        block = static_cast<int>(j);
      }
    }
    if (block < 0 && ray) {
      throw QpError(QpStatus::kUnbounded, "qp: objective unbounded below along a feasible ray");
    }
    x += alpha * p;
    degenerate = (alpha == 0.0);
    if (block >= 0) {
      working.push_back(block);
      in_working[static_cast<size_t>(block)] = 1;
    }
  }
  throw QpError(QpStatus::kMaxIterations, "qp: iteration limit reached");
}

}  // namespace

const char* to_string(QpStatus status) {
  switch (status) {
    case QpStatus::kOptimal: return "optimal";
    case QpStatus::kInfeasible: return "infeasible";
    case QpStatus::kUnbounded: return "unbounded";
    case QpStatus::kMaxIterations: return "max_iterations";
  }
  return "unknown";
}

QpError::QpError(QpStatus status, const std::string& what, double residual)
    : Error(status == QpStatus::kInfeasible ? ErrorKind::kInfeasible : ErrorKind::kSolver, what),
      status_(status),
      residual_(residual) {}

QpProblem QpProblem::with_size(Eigen::Index n) {
  QpProblem p;
  p.H = Eigen::MatrixXd::Zero(n, n);
  p.c = Eigen::VectorXd::Zero(n);
  p.Aeq.resize(0, n);
  p.beq.resize(0);
  p.Aineq.resize(0, n);
  p.bineq.resize(0);
  return p;
}

void QpProblem::validate() const {
  const Eigen::Index n = c.size();
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kInput, "qp: " + msg); };
  if (H.rows() != n || H.cols() != n) fail("H must be n×n");
  if (Aeq.cols() != n || Aeq.rows() != beq.size()) fail("equality block dimension mismatch");
  if (Aineq.cols() != n || Aineq.rows() != bineq.size()) fail("inequality block dimension mismatch");
  if (!H.allFinite() || !c.allFinite() || !Aeq.allFinite() || !beq.allFinite() || !Aineq.allFinite() ||
      !bineq.allFinite())
    fail("non-finite data");
  const double hnorm = inf_norm(H);
  if (n == 0) return;
  if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, hnorm)) fail("H is not symmetric");
  if (hnorm > 0.0) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(H, Eigen::EigenvaluesOnly);
    if (eig.eigenvalues().minCoeff() < -1e-9 * hnorm) fail("H is not positive semidefinite");
  }
}

double QpProblem::objective(const Eigen::VectorXd& x) const { return 0.5 * x.dot(H * x) + c.dot(x); }

double KktResiduals::max() const {
  return std::max({stationarity, primal_equality, primal_inequality, dual_feasibility, complementarity});
}

KktResiduals kkt_residuals(const QpProblem& p, const Eigen::VectorXd& x, const Eigen::VectorXd& eq_duals,
                           const Eigen::VectorXd& ineq_duals) {
  KktResiduals r;
  const Eigen::VectorXd hx = p.H * x;
  Eigen::VectorXd grad = hx + p.c;
  if (p.Aeq.rows() > 0) grad += p.Aeq.transpose() * eq_duals;
  if (p.Aineq.rows() > 0) grad += p.Aineq.transpose() * ineq_duals;
  r.stationarity = inf_norm(grad) / (1.0 + inf_norm(p.c) + inf_norm(hx));
  if (p.Aeq.rows() > 0) r.primal_equality = inf_norm(Eigen::VectorXd(p.Aeq * x - p.beq)) / (1.0 + inf_norm(p.beq));
  if (p.Aineq.rows() > 0) {
    const Eigen::VectorXd slack = p.bineq - p.Aineq * x;
    const double bscale = 1.0 + inf_norm(p.bineq);
    r.primal_inequality = std::max(0.0, -slack.minCoeff()) / bscale;
    r.dual_feasibility = std::max(0.0, -ineq_duals.minCoeff());
    const double zscale = 1.0 + inf_norm(ineq_duals);
    r.complementarity = (ineq_duals.cwiseProduct(slack)).cwiseAbs().maxCoeff() / (zscale * bscale);
  }
  return r;
}

PrimalDualPoint solve_qp(const QpProblem& problem, const SolverOptions& options) {
  problem.validate();
  const Eigen::Index n = problem.num_variables();
  const Eigen::Index meq = problem.Aeq.rows();
  const Eigen::Index min = problem.Aineq.rows();
  const int max_iterations =
      options.max_iterations > 0 ? options.max_iterations : static_cast<int>(50 * (n + meq + min) + 200);

  // Independent equality rows, kept in ascending index order.
  std::vector<int> eq_rows;
  Eigen::VectorXd x0 = Eigen::VectorXd::Zero(n);
  if (meq > 0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(problem.Aeq.transpose());
    qr.setThreshold(1e-12);
    const Eigen::Index rank = qr.rank();
    for (Eigen::Index k = 0; k < rank; ++k) eq_rows.push_back(qr.colsPermutation().indices()(k));
    std::sort(eq_rows.begin(), eq_rows.end());
  }
  Eigen::MatrixXd Aeq(static_cast<Eigen::Index>(eq_rows.size()), n);
  Eigen::VectorXd beq(static_cast<Eigen::Index>(eq_rows.size()));
  for (size_t k = 0; k < eq_rows.size(); ++k) {
    Aeq.row(static_cast<Eigen::Index>(k)) = problem.Aeq.row(eq_rows[k]);
    beq(static_cast<Eigen::Index>(k)) = problem.beq(eq_rows[k]);
  }
  if (!eq_rows.empty()) {
    x0 = Aeq.completeOrthogonalDecomposition().solve(beq);
    const double eq_resid = inf_norm(Eigen::VectorXd(problem.Aeq * x0 - problem.beq));
    if (eq_resid > 1e-9 * (1.0 + inf_norm(problem.beq))) {
      throw QpError(QpStatus::kInfeasible, "qp: inconsistent equality constraints", eq_resid);
    }
  }

  Eigen::VectorXd row_norms(min);
  for (Eigen::Index j = 0; j < min; ++j) {
    row_norms(j) = problem.Aineq.row(j).norm();
    if (row_norms(j) == 0.0 && problem.bineq(j) < -1e-12) {
      throw QpError(QpStatus::kInfeasible, "qp: zero row with negative right-hand side", -problem.bineq(j));
    }
  }

  const double feas_tol = 1e-9 * (1.0 + inf_norm(problem.bineq));
  double violation = 0.0;
  for (Eigen::Index j = 0; j < min; ++j) {
    if (row_norms(j) == 0.0) continue;
    violation = std::max(violation, (problem.Aineq.row(j).dot(x0) - problem.bineq(j)) / row_norms(j));
  }

  int iterations = 0;
  Eigen::VectorXd x = x0;
  if (violation > feas_tol) {
    // Phase 1: min t  s.t.  Aeq x = beq,  a_jᵀx − ‖a_j‖ t ≤ b_j,  t ≥ 0.
    Eigen::MatrixXd H1 = Eigen::MatrixXd::Zero(n + 1, n + 1);
    Eigen::VectorXd c1 = Eigen::VectorXd::Zero(n + 1);
    c1(n) = 1.0;
    Eigen::MatrixXd Aeq1 = Eigen::MatrixXd::Zero(Aeq.rows(), n + 1);
    Aeq1.leftCols(n) = Aeq;
    Eigen::MatrixXd Ain1 = Eigen::MatrixXd::Zero(min + 1, n + 1);
    Eigen::VectorXd bin1 = Eigen::VectorXd::Zero(min + 1);
    Ain1.topLeftCorner(min, n) = problem.Aineq;
    Ain1.col(n).head(min) = -row_norms;
    bin1.head(min) = problem.bineq;
    Ain1(min, n) = -1.0;
    Eigen::VectorXd norms1(min + 1);
    norms1.head(min) = row_norms;
    norms1(min) = 1.0;
    Eigen::VectorXd z0(n + 1);
    z0.head(n) = x0;
    z0(n) = violation;
    CoreResult phase1 = active_set_core(H1, c1, Aeq1, beq, Ain1, bin1, norms1, z0, max_iterations);
    iterations += phase1.iterations;
    if (phase1.x(n) > feas_tol) {
      std::ostringstream msg;
      msg << "qp: infeasible (phase-1 violation " << phase1.x(n) << ")";
      throw QpError(QpStatus::kInfeasible, msg.str(), phase1.x(n));
    }
    x = phase1.x.head(n);
  }

  CoreResult core =
      active_set_core(problem.H, problem.c, Aeq, beq, problem.Aineq, problem.bineq, row_norms, x, max_iterations);
  iterations += core.iterations;

  PrimalDualPoint out;
  out.x = core.x;
  out.eq_duals = Eigen::VectorXd::Zero(meq);
  for (size_t k = 0; k < eq_rows.size(); ++k) out.eq_duals(eq_rows[k]) = core.eq_duals(static_cast<Eigen::Index>(k));
  out.ineq_duals = Eigen::VectorXd::Zero(min);
  for (size_t k = 0; k < core.working.size(); ++k) {
    out.ineq_duals(core.working[k]) = std::max(0.0, core.work_duals(static_cast<Eigen::Index>(k)));
  }
  out.working_set = core.working;
  std::sort(out.working_set.begin(), out.working_set.end());
  const double xscale = 1.0 + inf_norm(out.x);
  for (Eigen::Index j = 0; j < min; ++j) {
    if (row_norms(j) == 0.0) continue;
    const double slack = (problem.bineq(j) - problem.Aineq.row(j).dot(out.x)) / row_norms(j);
    if (slack <= options.active_tol * xscale) out.active_set.push_back(static_cast<int>(j));
  }
  out.objective = problem.objective(out.x);
  out.iterations = iterations;
  out.residuals = kkt_residuals(problem, out.x, out.eq_duals, out.ineq_duals);
  return out;
}

}  // namespace evprice::qp
