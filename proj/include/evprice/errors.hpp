#pragma once

#include <stdexcept>
#include <string>

namespace evprice {

// Failure classes; the CLI maps each to a distinct exit code.
enum class ErrorKind {
  kInput,       // malformed data, unknown references, dimension mismatch
  kInfeasible,  // the optimization problem has no feasible point
  kSolver,      // unbounded, iteration limit, singular system
  kCoverage,    // the demand-function partition does not cover the price box
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInput: return "input";
    case ErrorKind::kInfeasible: return "infeasible";
    case ErrorKind::kSolver: return "solver";
    case ErrorKind::kCoverage: return "coverage";
  }
  return "unknown";
}

}  // namespace evprice
