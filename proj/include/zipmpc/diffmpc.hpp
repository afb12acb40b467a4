#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "zipmpc/solver.hpp"

namespace zipmpc {

/// dL/dq and dL/dp; shapes mirror CostSchedule.
struct CostGradient {
  std::vector<Eigen::VectorXd> dq;
  std::vector<Eigen::VectorXd> dp;

  static CostGradient zeros(int stages, int dim);
  double max_abs() const;
};

/// Gradient of a scalar loss with respect to the solution trajectory.
struct TrajectoryGradient {
  Eigen::MatrixXd states;  // (N+2) x n
  Eigen::MatrixXd inputs;  // (N+1) x m

  static TrajectoryGradient zeros(const SolveRecord& record);
};

class NotConvergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BackwardOptions {
  /// Include sum_k lambda_k * Hessian(f_k) in the stage Hessians (exact Lagrangian).
  /// Without it the adjoint uses the Gauss-Newton quadratisation.
  bool exact_curvature = true;
  /// Levenberg shift applied only if a reduced Hessian is not positive definite.
  double fallback_reg = 1e-8;
};

struct BackwardResult {
  CostGradient grad;
  Eigen::MatrixXd dstates;  // adjoint solution dz, (N+2) x n
  Eigen::MatrixXd dinputs;  // (N+1) x m
  bool regularized = false;
};

/// Sensitivity of a loss through the solution of `problem` by implicit differentiation of the
/// optimality conditions at the converged point: solves one equality-constrained LQR with the
/// upstream gradient as linear term, inputs on their bounds held fixed.
/// Throws NotConvergedError if the record is not a converged solve.
BackwardResult backward(const MpcProblem& problem, const SolveRecord& record,
                        const TrajectoryGradient& upstream, const BackwardOptions& options = {});

/// Scalar losses used by the gradient check.
struct LossSpec {
  enum class Kind { input_norm, reference_mse };
  Kind kind = Kind::input_norm;
  /// Reference for reference_mse; when empty a reference is drawn around the nominal
  /// solution from the check's seed.
  Eigen::MatrixXd ref_states;
  Eigen::MatrixXd ref_inputs;
};

double evaluate_loss(const LossSpec& spec, const Eigen::MatrixXd& states,
                     const Eigen::MatrixXd& inputs, TrajectoryGradient* grad = nullptr);

struct GradcheckEntry {
  int stage = 0;
  int slot = 0;
  char param = 'q';  // 'q' or 'p'
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
  std::string status = "ok";  // ok | infeasible | not-converged | out-of-domain
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  double floor = 0.0;  // denominator floor used in rel_err
  std::vector<GradcheckEntry> entries;

  std::string to_csv() const;
};

struct GradcheckOptions {
  double h = 1e-5;
  std::uint64_t seed = 0;
  SolverOptions solver = tight_solver_options();
  BackwardOptions backward;
  /// Relative-error denominators are floored at floor_fraction * max |numeric gradient|.
  double floor_fraction = 1e-4;

  static SolverOptions tight_solver_options();
};

/// Compares backward() against central differences over every (q, p) entry.
/// Throws std::invalid_argument for h <= 0.
GradcheckReport gradcheck(const MpcProblem& problem, const Eigen::VectorXd& x0,
                          const LossSpec& loss, const GradcheckOptions& options = {});

}  // namespace zipmpc
