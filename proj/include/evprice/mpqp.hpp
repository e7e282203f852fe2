#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "evprice/qp.hpp"
#include "evprice/traffic.hpp"

namespace evprice::mpqp {

/// Differentiated KKT system of the traffic QP, unknowns ordered
/// (ξ, f, ψ, δ, φ). Block rows: stationarity in ξ, stationarity in f, E f = m,
/// A f − ξ = 0, complementarity.
struct SensitivitySystem {
  // Literal form: complementarity rows D(φ)G dξ + D(Gξ − h) dφ.
  Eigen::MatrixXd M0;
  // Row-scaled form actually factorized: G_j dξ = 0 for j in the working
  // set, dφ_j = 0 otherwise. Nonsingular whenever the literal M0 is, and
  // also at points where a tight constraint has a zero multiplier.
  Eigen::MatrixXd M;
  Eigen::MatrixXd N0;  // −[0; 0; J] in the first block row, zero elsewhere
  Eigen::MatrixXd J;
  double condition_M0 = 0.0;  // +inf when singular
  double condition_M = 0.0;
};

SensitivitySystem sensitivity_system(const traffic::CompactQP& qp, const qp::PrimalDualPoint& sol);

struct AffinePolicy {
  Eigen::VectorXd base_point;      // λ̃
  Eigen::VectorXd base_solution;   // (ξ, f, ψ, δ, φ) at λ̃
  Eigen::MatrixXd jacobian;        // ∂(ξ, f, ψ, δ, φ)/∂λ; may be empty after import
  Eigen::MatrixXd demand_matrix;   // D, symmetric
  Eigen::VectorXd demand_offset;   // d(λ) = D λ + offset
  double value_offset = 0.0;       // V(λ) = value_offset + offsetᵀλ + ½λᵀDλ
  std::vector<int> working_set;
  double condition_M0 = 0.0;
  double condition_M = 0.0;

  Eigen::VectorXd demand(const Eigen::VectorXd& lambda) const;
  double value(const Eigen::VectorXd& lambda) const;
  Eigen::VectorXd solution(const Eigen::VectorXd& lambda) const;
};

/// Throws Error(kSolver) when the scaled system is singular.
AffinePolicy sensitivity_at(const traffic::CompactQP& qp, const Eigen::VectorXd& lambda,
                            const qp::PrimalDualPoint& sol);

struct PriceBox {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;

  int dim() const { return static_cast<int>(lo.size()); }
  qp::Polyhedron polyhedron() const;  // rows: λ ≤ hi, then −λ ≤ −lo
  bool contains(const Eigen::VectorXd& lambda, double tol = 1e-9) const;
  Eigen::VectorXd center() const { return 0.5 * (lo + hi); }
  static PriceBox uniform(int dim, double lo, double hi);
};

struct CriticalRegion {
  int id = 0;
  qp::Polyhedron poly;            // normalized, irredundant R λ ≤ r
  std::vector<bool> on_box;       // row comes from the price box
  std::vector<int> fingerprint;   // tight inequalities of the traffic QP
  AffinePolicy policy;
  Eigen::VectorXd interior_point; // Chebyshev center
  double radius = 0.0;

  bool contains(const Eigen::VectorXd& lambda, double tol = 1e-8) const { return poly.contains(lambda, tol); }
  // Tight set, then -1, then the working set. Degenerate points can share a
  // tight set across several working sets, each with its own region.
  std::vector<int> key() const;
};

struct RegionOptions {
  double min_radius = 1e-8;
  double tight_tol = 1e-7;  // relative to 1 + ‖ξ‖∞
};

/// Critical region of `policy`: inactive inequalities stay feasible, working
/// multipliers stay nonnegative, intersected with the box, made irredundant.
/// Throws EmptyPolyhedronError for empty or lower-dimensional regions.
CriticalRegion build_region(const traffic::CompactQP& qp, const AffinePolicy& policy, const PriceBox& box,
                            const RegionOptions& options = {});

struct ExploreOptions {
  double step = 1e-6;          // ε_step = step·(1 + ‖facet point‖)
  int step_retries = 3;        // ×10 each time the step lands in the same region
  int perturb_tries = 5;
  double perturb_norm = 1e-5;
  int max_regions = 100000;
  int workers = 1;
  int audit_samples = 1000;
  std::uint64_t audit_seed = 1;
  int audit_rounds = 10;
  RegionOptions region;
  qp::SolverOptions solver;
};

struct ExploreStats {
  int qp_solves = 0;
  int facets_visited = 0;
  int facets_boundary = 0;
  int facets_known = 0;
  int step_retries = 0;
  int perturbations = 0;
  int audit_reseeds = 0;
  int audit_samples = 0;
};

class CoverageError : public Error {
 public:
  CoverageError(const std::string& what, std::vector<Eigen::VectorXd> gaps)
      : Error(ErrorKind::kCoverage, what), gaps_(std::move(gaps)) {}
  const std::vector<Eigen::VectorXd>& gaps() const { return gaps_; }

 private:
  std::vector<Eigen::VectorXd> gaps_;
};

struct PiecewiseAffineDemandFunction {
  PriceBox box;
  std::vector<CriticalRegion> regions;
  std::map<std::vector<int>, int> by_key;  // CriticalRegion::key() → id
  ExploreStats stats;

  int size() const { return static_cast<int>(regions.size()); }
  // Distinct tight sets. Pieces that share one are a single critical region
  // split by the choice of working set.
  int num_critical_regions() const;
  // Lowest-id region containing λ within tol, or -1.
  int locate(const Eigen::VectorXd& lambda, double tol = 1e-8) const;
  // Adds a region, assigning the next id. Returns false on a known key.
  bool insert(CriticalRegion region);
};

struct Evaluation {
  Eigen::VectorXd demand;
  int region = -1;
};

/// Throws Error(kInput) outside the box and CoverageError in a gap.
Evaluation evaluate(const PiecewiseAffineDemandFunction& pi, const Eigen::VectorXd& lambda);

/// Breadth-first facet exploration from `seed`, followed by a sampling
/// audit that reseeds from any uncovered point. Throws CoverageError when
/// gaps persist and Error(kSolver) past the region cap.
PiecewiseAffineDemandFunction explore(const traffic::CompactQP& qp, const PriceBox& box, const Eigen::VectorXd& seed,
                                      const ExploreOptions& options = {});

/// Deterministic uniform samples of the box.
std::vector<Eigen::VectorXd> sample_box(const PriceBox& box, int count, std::uint64_t seed);

}  // namespace evprice::mpqp
