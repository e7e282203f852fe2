#include "evprice/mpqp.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <set>

#include "evprice/parallel.hpp"

namespace evprice::mpqp {

namespace {

struct Offsets {
  int na, nr, nw, nc;
  int xi() const { return 0; }
  int f() const { return na; }
  int psi() const { return na + nr; }
  int delta() const { return na + nr + nw; }
  int phi() const { return 2 * na + nr + nw; }
  int size() const { return 4 * na + nr + nw; }
};

Offsets offsets(const traffic::CompactQP& qp) {
  return {qp.num_arcs(), qp.num_routes(), qp.num_pairs(), qp.num_stations()};
}

double condition(const Eigen::MatrixXd& M) {
  if (M.rows() == 0) return 1.0;
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(M);
  const auto& s = svd.singularValues();
  const double lo = s(s.size() - 1);
  return lo > 0.0 ? s(0) / lo : std::numeric_limits<double>::infinity();
}

Eigen::VectorXd stacked_solution(const traffic::CompactQP& qp, const qp::PrimalDualPoint& sol) {
  const Offsets o = offsets(qp);
  if (sol.x.size() != o.na + o.nr || sol.eq_duals.size() != o.nw + o.na || sol.ineq_duals.size() != 2 * o.na)
    throw Error(ErrorKind::kInput, "sensitivity: solution does not match the traffic QP");
  Eigen::VectorXd z(o.size());
  z << sol.x, sol.eq_duals, sol.ineq_duals;
  return z;
}

}  // namespace

SensitivitySystem sensitivity_system(const traffic::CompactQP& qp, const qp::PrimalDualPoint& sol) {
  const Offsets o = offsets(qp);
  const Eigen::VectorXd z = stacked_solution(qp, sol);
  const Eigen::VectorXd xi = z.segment(o.xi(), o.na);
  const Eigen::VectorXd phi = z.segment(o.phi(), 2 * o.na);

  SensitivitySystem s;
  s.J = qp.J;
  Eigen::MatrixXd& M = s.M0;
  M = Eigen::MatrixXd::Zero(o.size(), o.size());
  M.block(0, o.xi(), o.na, o.na) = qp.Q;
  M.block(0, o.delta(), o.na, o.na) = -Eigen::MatrixXd::Identity(o.na, o.na);
  M.block(0, o.phi(), o.na, 2 * o.na) = qp.G.transpose();
  M.block(o.na, o.f(), o.nr, o.nr).diagonal().setConstant(2.0 * qp.route_regularization);
  M.block(o.na, o.psi(), o.nr, o.nw) = qp.E.transpose();
  M.block(o.na, o.delta(), o.nr, o.na) = qp.A.transpose();
  M.block(o.na + o.nr, o.f(), o.nw, o.nr) = qp.E;
  M.block(o.na + o.nr + o.nw, o.f(), o.na, o.nr) = qp.A;
  M.block(o.na + o.nr + o.nw, o.xi(), o.na, o.na) = -Eigen::MatrixXd::Identity(o.na, o.na);

  s.M = M;
  const Eigen::VectorXd slack = qp.G * xi - qp.h;
  std::vector<bool> working(static_cast<size_t>(2 * o.na), false);
  for (int j : sol.working_set) working[static_cast<size_t>(j)] = true;
  for (int j = 0; j < 2 * o.na; ++j) {
    const int row = o.phi() + j;
    s.M0.block(row, o.xi(), 1, o.na) = phi(j) * qp.G.row(j);
    s.M0(row, row) = slack(j);
    if (working[static_cast<size_t>(j)]) {
      s.M.block(row, o.xi(), 1, o.na) = qp.G.row(j);
    } else {
      s.M(row, row) = 1.0;
    }
  }

  s.N0 = Eigen::MatrixXd::Zero(o.size(), o.nc);
  s.N0.block(o.na - o.nc, 0, o.nc, o.nc) = -qp.J;
  s.condition_M0 = condition(s.M0);
  s.condition_M = condition(s.M);
  return s;
}

Eigen::VectorXd AffinePolicy::demand(const Eigen::VectorXd& lambda) const {
  return demand_matrix * lambda + demand_offset;
}

double AffinePolicy::value(const Eigen::VectorXd& lambda) const {
  return value_offset + demand_offset.dot(lambda) + 0.5 * lambda.dot(demand_matrix * lambda);
}

Eigen::VectorXd AffinePolicy::solution(const Eigen::VectorXd& lambda) const {
  if (jacobian.size() == 0) throw Error(ErrorKind::kInput, "policy: full solution map not available");
  return base_solution + jacobian * (lambda - base_point);
}

AffinePolicy sensitivity_at(const traffic::CompactQP& qp, const Eigen::VectorXd& lambda,
                            const qp::PrimalDualPoint& sol) {
  const Offsets o = offsets(qp);
  if (lambda.size() != o.nc) throw Error(ErrorKind::kInput, "sensitivity: price vector has wrong length");
  const SensitivitySystem sys = sensitivity_system(qp, sol);
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(sys.M);
  if (lu.rank() < sys.M.rows()) throw Error(ErrorKind::kSolver, "sensitivity: singular KKT differential");

  AffinePolicy p;
  p.base_point = lambda;
  p.base_solution = stacked_solution(qp, sol);
  p.jacobian = lu.solve(sys.N0);
  p.working_set = sol.working_set;
  p.condition_M0 = sys.condition_M0;
  p.condition_M = sys.condition_M;

  const Eigen::MatrixXd D = qp.J * p.jacobian.block(o.na - o.nc, 0, o.nc, o.nc);
  p.demand_matrix = 0.5 * (D + D.transpose());
  const Eigen::VectorXd d0 = qp.J * p.base_solution.segment(o.na - o.nc, o.nc);
  p.demand_offset = d0 - p.demand_matrix * lambda;
  p.value_offset = sol.objective - p.demand_offset.dot(lambda) - 0.5 * lambda.dot(p.demand_matrix * lambda);
  return p;
}

qp::Polyhedron PriceBox::polyhedron() const {
  const int n = dim();
  qp::Polyhedron poly;
  poly.A.resize(2 * n, n);
  poly.A << Eigen::MatrixXd::Identity(n, n), -Eigen::MatrixXd::Identity(n, n);
  poly.b.resize(2 * n);
  poly.b << hi, -lo;
  return poly;
}

bool PriceBox::contains(const Eigen::VectorXd& lambda, double tol) const {
  if (lambda.size() != lo.size()) return false;
  return ((lo.array() - tol) <= lambda.array()).all() && (lambda.array() <= (hi.array() + tol)).all();
}

PriceBox PriceBox::uniform(int dim, double lo, double hi) {
  if (!(lo < hi)) throw Error(ErrorKind::kInput, "price box: lo must be below hi");
  return {Eigen::VectorXd::Constant(dim, lo), Eigen::VectorXd::Constant(dim, hi)};
}

CriticalRegion build_region(const traffic::CompactQP& qp, const AffinePolicy& policy, const PriceBox& box,
                            const RegionOptions& options) {
  const Offsets o = offsets(qp);
  if (box.dim() != o.nc) throw Error(ErrorKind::kInput, "region: price box dimension mismatch");
  const Eigen::VectorXd& z = policy.base_solution;
  const Eigen::VectorXd& lam = policy.base_point;
  const Eigen::VectorXd xi = z.segment(o.xi(), o.na);
  const Eigen::MatrixXd Jxi = policy.jacobian.middleRows(o.xi(), o.na);
  const Eigen::MatrixXd Jphi = policy.jacobian.middleRows(o.phi(), 2 * o.na);
  const double xi_scale = 1.0 + (Jxi.size() ? Jxi.cwiseAbs().maxCoeff() : 0.0);
  const double phi_scale = 1.0 + (Jphi.size() ? Jphi.cwiseAbs().maxCoeff() : 0.0);
  const double tight = options.tight_tol * (1.0 + xi.lpNorm<Eigen::Infinity>());

  std::vector<bool> working(static_cast<size_t>(2 * o.na), false);
  for (int j : policy.working_set) working[static_cast<size_t>(j)] = true;

  std::vector<Eigen::RowVectorXd> rows;
  std::vector<double> rhs;
  std::vector<bool> from_box;
  CriticalRegion region;
  for (int j = 0; j < 2 * o.na; ++j) {
    if (working[static_cast<size_t>(j)]) {
      region.fingerprint.push_back(j);
      const Eigen::RowVectorXd a = -Jphi.row(j);
      const double b = z(o.phi() + j) + a.dot(lam);
      if (a.norm() <= 1e-10 * phi_scale) {
        if (b < -1e-9 * phi_scale) throw qp::EmptyPolyhedronError("region: working multiplier negative everywhere");
        continue;
      }
      rows.push_back(a);
      rhs.push_back(b);
      from_box.push_back(false);
    } else {
      const Eigen::RowVectorXd a = qp.G.row(j) * Jxi;
      const double slack = qp.h(j) - qp.G.row(j).dot(xi);
      if (a.norm() <= 1e-10 * xi_scale) {
        if (slack < -tight) throw qp::EmptyPolyhedronError("region: inactive constraint violated everywhere");
        if (slack <= tight) region.fingerprint.push_back(j);
        continue;
      }
      rows.push_back(a);
      rhs.push_back(slack + a.dot(lam));
      from_box.push_back(false);
    }
  }
  const qp::Polyhedron bp = box.polyhedron();
  for (int k = 0; k < bp.rows(); ++k) {
    rows.push_back(bp.A.row(k));
    rhs.push_back(bp.b(k));
    from_box.push_back(true);
  }
  std::sort(region.fingerprint.begin(), region.fingerprint.end());

  qp::Polyhedron raw;
  raw.A.resize(static_cast<Eigen::Index>(rows.size()), o.nc);
  raw.b.resize(static_cast<Eigen::Index>(rows.size()));
  for (size_t k = 0; k < rows.size(); ++k) {
    raw.A.row(static_cast<Eigen::Index>(k)) = rows[k];
    raw.b(static_cast<Eigen::Index>(k)) = rhs[k];
  }
  raw = raw.normalized();

  const qp::ChebyshevBall ball = qp::chebyshev_center(raw);
  if (ball.radius <= options.min_radius) throw qp::EmptyPolyhedronError("region: lower-dimensional");
  std::vector<int> kept;
  region.poly = qp::remove_redundant(raw, &kept);
  for (int k : kept) region.on_box.push_back(from_box[static_cast<size_t>(k)]);
  region.policy = policy;
  region.interior_point = ball.center;
  region.radius = ball.radius;
  return region;
}

std::vector<int> CriticalRegion::key() const {
  std::vector<int> k = fingerprint;
  k.push_back(-1);
  k.insert(k.end(), policy.working_set.begin(), policy.working_set.end());
  return k;
}

int PiecewiseAffineDemandFunction::num_critical_regions() const {
  std::set<std::vector<int>> tight;
  for (const CriticalRegion& r : regions) tight.insert(r.fingerprint);
  return static_cast<int>(tight.size());
}

int PiecewiseAffineDemandFunction::locate(const Eigen::VectorXd& lambda, double tol) const {
  for (const CriticalRegion& r : regions)
    if (r.contains(lambda, tol)) return r.id;
  return -1;
}

bool PiecewiseAffineDemandFunction::insert(CriticalRegion region) {
  std::vector<int> k = region.key();
  if (by_key.count(k)) return false;
  region.id = size();
  by_key.emplace(std::move(k), region.id);
  regions.push_back(std::move(region));
  return true;
}

Evaluation evaluate(const PiecewiseAffineDemandFunction& pi, const Eigen::VectorXd& lambda) {
  if (!pi.box.contains(lambda)) throw Error(ErrorKind::kInput, "evaluate: price outside the price box");
  const int id = pi.locate(lambda);
  if (id < 0) throw CoverageError("evaluate: price not covered by any critical region", {lambda});
  return {pi.regions[static_cast<size_t>(id)].policy.demand(lambda), id};
}

std::vector<Eigen::VectorXd> sample_box(const PriceBox& box, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Eigen::VectorXd> out;
  out.reserve(static_cast<size_t>(std::max(count, 0)));
  for (int s = 0; s < count; ++s) {
    Eigen::VectorXd p(box.dim());
    for (int i = 0; i < box.dim(); ++i) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      p(i) = box.lo(i) + u * (box.hi(i) - box.lo(i));
    }
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

// Unit vector number k of a fixed pseudo-random sequence.
Eigen::VectorXd perturbation(int dim, int k) {
  std::mt19937_64 rng(0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(k));
  Eigen::VectorXd u(dim);
  for (int i = 0; i < dim; ++i) u(i) = static_cast<double>(rng() >> 11) * 0x1.0p-53 - 0.5;
  const double n = u.norm();
  return n > 0.0 ? Eigen::VectorXd(u / n) : Eigen::VectorXd::Unit(dim, 0);
}

struct Explorer {
  const traffic::CompactQP& qp;
  const PriceBox& box;
  const ExploreOptions& opt;
  PiecewiseAffineDemandFunction& pi;
  std::atomic<int> qp_solves{0};
  std::atomic<int> step_retries{0};
  std::atomic<int> perturbations{0};

  // Region of the optimal active set at λ, or nullopt when it is empty,
  // lower-dimensional or its KKT differential is singular.
  std::optional<CriticalRegion> region_at(const Eigen::VectorXd& lambda) {
    ++qp_solves;
    qp::PrimalDualPoint sol;
    try {
      sol = qp::solve_qp(qp.problem(lambda), opt.solver);
    } catch (const qp::QpError& e) {
      throw Error(e.status() == qp::QpStatus::kInfeasible ? ErrorKind::kInfeasible : ErrorKind::kSolver,
                  std::string("explore: traffic QP failed: ") + e.what());
    }
    try {
      return build_region(qp, sensitivity_at(qp, lambda, sol), box, opt.region);
    } catch (const qp::EmptyPolyhedronError&) {
      return std::nullopt;
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::kSolver) return std::nullopt;
      throw;
    }
  }

  // Retries at deterministic perturbations of λ kept inside the box.
  std::optional<CriticalRegion> region_near(const Eigen::VectorXd& lambda) {
    if (auto r = region_at(lambda)) return r;
    const double scale = opt.perturb_norm * (1.0 + lambda.norm());
    for (int k = 0; k < opt.perturb_tries; ++k) {
      ++perturbations;
      Eigen::VectorXd p = lambda + scale * perturbation(box.dim(), k);
      p = p.cwiseMax(box.lo).cwiseMin(box.hi);
      if (auto r = region_at(p)) return r;
    }
    return std::nullopt;
  }

  struct FacetResult {
    enum Kind { kBoundary, kKnown, kSame, kFailed, kFound } kind = kFailed;
    std::optional<CriticalRegion> region;
  };

  FacetResult cross(const CriticalRegion& from, int row) {
    FacetResult out;
    qp::ChebyshevBall fc;
    try {
      fc = qp::facet_center(from.poly, row);
    } catch (const qp::EmptyPolyhedronError&) {
      return out;
    }
    const Eigen::VectorXd normal = from.poly.A.row(row).transpose().normalized();
    double step = opt.step * (1.0 + fc.center.norm());
    for (int attempt = 0; attempt <= opt.step_retries; ++attempt, step *= 10.0) {
      const Eigen::VectorXd p = fc.center + step * normal;
      if (!box.contains(p, 0.0)) {
        out.kind = FacetResult::kBoundary;
        return out;
      }
      if (pi.locate(p, 1e-9) >= 0 && !from.contains(p, 1e-9)) {
        out.kind = FacetResult::kKnown;
        return out;
      }
      std::optional<CriticalRegion> r = region_near(p);
      if (r && r->key() == from.key()) {
        ++step_retries;
        out.kind = FacetResult::kSame;
        continue;
      }
      if (!r) {
        ++step_retries;
        continue;
      }
      out.kind = pi.by_key.count(r->key()) ? FacetResult::kKnown : FacetResult::kFound;
      out.region = std::move(r);
      return out;
    }
    return out;
  }

  void check_cap() const {
    if (pi.size() > opt.max_regions)
      throw Error(ErrorKind::kSolver, "explore: region count exceeds the cap of " + std::to_string(opt.max_regions));
  }

  // Level-synchronous breadth-first search. Facets of one level are crossed
  // in parallel against a frozen partition; new regions are then inserted
  // in (region id, facet row) order, so the result ignores the worker count.
  void bfs(std::vector<int> frontier) {
    while (!frontier.empty()) {
      struct Task {
        int region;
        int row;
      };
      std::vector<Task> tasks;
      for (int id : frontier) {
        const CriticalRegion& r = pi.regions[static_cast<size_t>(id)];
        for (int k = 0; k < r.poly.rows(); ++k)
          if (!r.on_box[static_cast<size_t>(k)]) tasks.push_back({id, k});
      }
      std::vector<FacetResult> results(tasks.size());
      parallel_for(static_cast<int>(tasks.size()), opt.workers, [&](int t) {
        const Task& task = tasks[static_cast<size_t>(t)];
        results[static_cast<size_t>(t)] = cross(pi.regions[static_cast<size_t>(task.region)], task.row);
      });
      pi.stats.facets_visited += static_cast<int>(tasks.size());
      frontier.clear();
      for (FacetResult& res : results) {
        if (res.kind == FacetResult::kBoundary) ++pi.stats.facets_boundary;
        if (res.kind == FacetResult::kKnown) ++pi.stats.facets_known;
        if (res.kind != FacetResult::kFound) continue;
        if (pi.insert(std::move(*res.region))) {
          frontier.push_back(pi.size() - 1);
          check_cap();
        } else {
          ++pi.stats.facets_known;
        }
      }
    }
  }

  void seed_from(const Eigen::VectorXd& lambda) {
    std::optional<CriticalRegion> r = region_near(lambda);
    if (!r) throw Error(ErrorKind::kSolver, "explore: no full-dimensional region near the seed (degenerate seed)");
    if (pi.insert(std::move(*r))) bfs({pi.size() - 1});
  }
};

}  // namespace

PiecewiseAffineDemandFunction explore(const traffic::CompactQP& qp, const PriceBox& box, const Eigen::VectorXd& seed,
                                      const ExploreOptions& options) {
  if (box.dim() != qp.num_stations()) throw Error(ErrorKind::kInput, "explore: price box dimension mismatch");
  if (!box.contains(seed)) throw Error(ErrorKind::kInput, "explore: seed outside the price box");
  PiecewiseAffineDemandFunction pi;
  pi.box = box;
  if (box.dim() == 0) {
    // No stations: one trivial region with zero demand.
    const qp::PrimalDualPoint sol = qp::solve_qp(qp.problem(seed), options.solver);
    CriticalRegion r;
    r.policy = sensitivity_at(qp, seed, sol);
    r.poly.A.resize(0, 0);
    r.poly.b.resize(0);
    r.interior_point = seed;
    r.radius = std::numeric_limits<double>::infinity();
    pi.insert(std::move(r));
    return pi;
  }

  Explorer ex{qp, box, options, pi};
  ex.seed_from(seed);

  const std::vector<Eigen::VectorXd> samples = sample_box(box, options.audit_samples, options.audit_seed);
  std::vector<Eigen::VectorXd> gaps;
  for (int round = 0;; ++round) {
    gaps.clear();
    for (const auto& s : samples)
      if (pi.locate(s) < 0) gaps.push_back(s);
    pi.stats.audit_samples += static_cast<int>(samples.size());
    if (gaps.empty() || round >= options.audit_rounds) break;
    ++pi.stats.audit_reseeds;
    const int before = pi.size();
    try {
      ex.seed_from(gaps.front());
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kSolver || pi.size() > options.max_regions) throw;
    }
    if (pi.size() == before) break;
  }
  pi.stats.qp_solves = ex.qp_solves;
  pi.stats.step_retries = ex.step_retries;
  pi.stats.perturbations = ex.perturbations;
  if (!gaps.empty())
    throw CoverageError("explore: " + std::to_string(gaps.size()) + " audit samples not covered", gaps);
  return pi;
}

}  // namespace evprice::mpqp
