#pragma once

#include <Eigen/Dense>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace zipmpc {

/// The rollout of an initial guess left the dynamics' validity region.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Time-invariant discrete dynamics x' = f(x, u) seen by the optimiser.
class Dynamics {
 public:
  virtual ~Dynamics() = default;
  virtual int state_dim() const = 0;
  virtual int input_dim() const = 0;
  virtual Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const = 0;
  /// Jacobians [df/dx, df/du]. Defaults to central differences.
  virtual void linearize(const Eigen::VectorXd& x, const Eigen::VectorXd& u, Eigen::MatrixXd& A,
                         Eigen::MatrixXd& B) const;
  /// Hessian of w'f(x, u) with respect to z = [x; u], (n+m)x(n+m).
  /// Defaults to central differences of the Jacobians.
  virtual Eigen::MatrixXd weighted_curvature(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                             const Eigen::VectorXd& w) const;
};

class LinearDynamics final : public Dynamics {
 public:
  LinearDynamics(Eigen::MatrixXd A, Eigen::MatrixXd B) : A_(std::move(A)), B_(std::move(B)) {}
  int state_dim() const override { return static_cast<int>(A_.rows()); }
  int input_dim() const override { return static_cast<int>(B_.cols()); }
  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const override {
    return A_ * x + B_ * u;
  }
  void linearize(const Eigen::VectorXd&, const Eigen::VectorXd&, Eigen::MatrixXd& A,
                 Eigen::MatrixXd& B) const override {
    A = A_;
    B = B_;
  }
  Eigen::MatrixXd weighted_curvature(const Eigen::VectorXd&, const Eigen::VectorXd&,
                                     const Eigen::VectorXd&) const override {
    const auto k = A_.cols() + B_.cols();
    return Eigen::MatrixXd::Zero(k, k);
  }

 private:
  Eigen::MatrixXd A_, B_;
};

/// Per-stage diagonal quadratic weights q_i and linear weights p_i over z_i = [x_i; u_i],
/// stages i = 0..N.
struct CostSchedule {
  std::vector<Eigen::VectorXd> q;
  std::vector<Eigen::VectorXd> p;

  int stages() const { return static_cast<int>(q.size()); }
  int dim() const { return q.empty() ? 0 : static_cast<int>(q.front().size()); }

  /// N+1 identical copies of (q, p).
  static CostSchedule expand(const Eigen::VectorXd& q, const Eigen::VectorXd& p, int horizon);
  CostSchedule& clamp_q(double q_min);
};

/// Quadratic penalty  mu * max(0, z - upper)^2 + mu * max(0, lower - z)^2  on one state entry.
struct SoftBound {
  int index = 0;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
};

struct MpcProblem {
  std::shared_ptr<const Dynamics> dynamics;
  int horizon = 1;
  CostSchedule cost;
  Eigen::VectorXd u_lower;
  Eigen::VectorXd u_upper;
  std::vector<SoftBound> soft_bounds;
  double penalty_weight = 1e4;
  /// Cost slot j acts on z[cost_source[j]]; empty means identity. Used to price the
  /// in-horizon progress instead of the absolute progress.
  std::vector<int> cost_source;

  int state_dim() const { return dynamics->state_dim(); }
  int input_dim() const { return dynamics->input_dim(); }
  int source(int j) const { return cost_source.empty() ? j : cost_source[static_cast<std::size_t>(j)]; }
  void validate(double q_min) const;
};

struct StageCost {
  double value = 0.0;
  Eigen::VectorXd gradient;      // d/dz
  Eigen::VectorXd hessian_diag;  // diagonal of d2/dz2
};

/// Stage cost  sum_j q_j zs_j^2 + p_j zs_j  plus soft-bound penalties on x, with zs the
/// cost-slot view of z = [x; u].
StageCost stage_cost(const MpcProblem& problem, int stage, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& u);

struct SolverOptions {
  int max_iter = 100;
  double tol_obj = 1e-7;
  double q_min = 1e-4;
  int max_backtracks = 10;  // step sizes 1, 1/2, ..., 2^-max_backtracks
  double reg_min = 1e-6;
  double reg_max = 1e10;
  double reg_factor = 10.0;
  double armijo = 1e-4;
  /// Include second-order dynamics terms (DDP-style) in the backward pass. When they make
  /// the backward pass fail, it is retried without them before regularising.
  bool second_order = true;
  double active_tol = 1e-9;
};

struct SolveRecord {
  Eigen::MatrixXd states;  // (N+2) x n
  Eigen::MatrixXd inputs;  // (N+1) x m
  // Quadratisation at the returned trajectory.
  std::vector<Eigen::MatrixXd> A, B;
  std::vector<Eigen::VectorXd> cost_gradient;
  std::vector<Eigen::VectorXd> cost_hessian;  // diagonal
  std::vector<Eigen::MatrixXd> feedback;       // K_i, m x n
  std::vector<Eigen::Array<bool, Eigen::Dynamic, 1>> active;
  bool converged = false;
  int iterations = 0;
  /// converged | max-iterations | line-search | regularization
  std::string stop_reason;
  double objective = 0.0;
  double soft_violation = 0.0;

  int horizon() const { return static_cast<int>(inputs.rows()) - 1; }
  Eigen::VectorXd first_input() const { return inputs.row(0).transpose(); }
};

/// Total objective of a trajectory (stages 0..N; x_{N+1} carries no cost).
double trajectory_cost(const MpcProblem& problem, const Eigen::MatrixXd& states,
                       const Eigen::MatrixXd& inputs);

/// Largest soft-bound violation over x_0..x_N.
double soft_violation(const MpcProblem& problem, const Eigen::MatrixXd& states);

/// iLQR with box-QP input subproblems and backtracking line search.
/// Throws InfeasibleError when the initial rollout leaves the model's validity region.
SolveRecord solve(const MpcProblem& problem, const Eigen::VectorXd& x0,
                  const std::optional<Eigen::MatrixXd>& warm_start = std::nullopt,
                  const SolverOptions& options = {});

/// Shift a solution one step forward for warm starting (last input repeated).
Eigen::MatrixXd shift_inputs(const Eigen::MatrixXd& inputs);

}  // namespace zipmpc
