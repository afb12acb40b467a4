#include "zipmpc/solver.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "zipmpc/box_qp.hpp"
#include "zipmpc/dynamics.hpp"

namespace zipmpc {

void Dynamics::linearize(const Eigen::VectorXd& x, const Eigen::VectorXd& u, Eigen::MatrixXd& A,
                         Eigen::MatrixXd& B) const {
  constexpr double h = 1e-6;
  const int n = state_dim(), m = input_dim();
  A.resize(n, n);
  B.resize(n, m);
  Eigen::VectorXd xp = x, up = u;
  for (int j = 0; j < n; ++j) {
    xp[j] = x[j] + h;
    const Eigen::VectorXd fp = step(xp, u);
    xp[j] = x[j] - h;
    A.col(j) = (fp - step(xp, u)) / (2.0 * h);
    xp[j] = x[j];
  }
  for (int j = 0; j < m; ++j) {
    up[j] = u[j] + h;
    const Eigen::VectorXd fp = step(x, up);
    up[j] = u[j] - h;
    B.col(j) = (fp - step(x, up)) / (2.0 * h);
    up[j] = u[j];
  }
}

Eigen::MatrixXd Dynamics::weighted_curvature(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                             const Eigen::VectorXd& w) const {
  constexpr double h = 1e-4;
  const int n = state_dim(), m = input_dim();
  Eigen::MatrixXd H(n + m, n + m);
  Eigen::MatrixXd A, B;
  auto grad = [&](const Eigen::VectorXd& xx, const Eigen::VectorXd& uu) {
    linearize(xx, uu, A, B);
    Eigen::VectorXd g(n + m);
    g.head(n) = A.transpose() * w;
    g.tail(m) = B.transpose() * w;
    return g;
  };
  Eigen::VectorXd xp = x, up = u;
  for (int j = 0; j < n + m; ++j) {
    double& slot = j < n ? xp[j] : up[j - n];
    const double orig = slot;
    slot = orig + h;
    const Eigen::VectorXd gp = grad(xp, up);
    slot = orig - h;
    const Eigen::VectorXd gm = grad(xp, up);
    slot = orig;
    H.col(j) = (gp - gm) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose());
}

CostSchedule CostSchedule::expand(const Eigen::VectorXd& q, const Eigen::VectorXd& p,
                                  int horizon) {
  if (q.size() != p.size()) throw std::invalid_argument("q and p dimensions differ");
  if (horizon < 0) throw std::invalid_argument("negative horizon");
  CostSchedule c;
  c.q.assign(static_cast<std::size_t>(horizon) + 1, q);
  c.p.assign(static_cast<std::size_t>(horizon) + 1, p);
  return c;
}

CostSchedule& CostSchedule::clamp_q(double q_min) {
  for (auto& qi : q) qi = qi.cwiseMax(q_min);
  return *this;
}

void MpcProblem::validate(double q_min) const {
  if (!dynamics) throw std::invalid_argument("problem has no dynamics");
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  const int n = state_dim(), m = input_dim();
  if (cost.stages() != horizon + 1)
    throw std::invalid_argument("cost schedule must have horizon+1 stages");
  for (int i = 0; i < cost.stages(); ++i) {
    if (cost.q[i].size() != n + m || cost.p[i].size() != n + m)
      throw std::invalid_argument("cost vector dimension must equal n+m");
    if ((cost.q[i].array() < q_min).any())
      throw std::invalid_argument("cost weight below q_min at stage " + std::to_string(i));
  }
  if (u_lower.size() != m || u_upper.size() != m)
    throw std::invalid_argument("input bounds dimension mismatch");
  if ((u_lower.array() > u_upper.array()).any())
    throw std::invalid_argument("input lower bound exceeds upper bound");
  if (!cost_source.empty() && static_cast<int>(cost_source.size()) != n + m)
    throw std::invalid_argument("cost_source must have n+m entries");
}

StageCost stage_cost(const MpcProblem& problem, int stage, const Eigen::VectorXd& x,
                     const Eigen::VectorXd& u) {
  const int n = static_cast<int>(x.size());
  const int dim = n + static_cast<int>(u.size());
  const auto& q = problem.cost.q[static_cast<std::size_t>(stage)];
  const auto& p = problem.cost.p[static_cast<std::size_t>(stage)];
  StageCost c;
  c.gradient = Eigen::VectorXd::Zero(dim);
  c.hessian_diag = Eigen::VectorXd::Zero(dim);
  auto zval = [&](int k) { return k < n ? x[k] : u[k - n]; };
  for (int j = 0; j < dim; ++j) {
    const int s = problem.source(j);
    const double z = zval(s);
    c.value += q[j] * z * z + p[j] * z;
    c.gradient[s] += 2.0 * q[j] * z + p[j];
    c.hessian_diag[s] += 2.0 * q[j];
  }
  const double mu = problem.penalty_weight;
  for (const auto& b : problem.soft_bounds) {
    const double z = x[b.index];
    double excess = 0.0;
    if (z > b.upper) excess = z - b.upper;
    else if (z < b.lower) excess = z - b.lower;
    if (excess != 0.0) {
      c.value += mu * excess * excess;
      c.gradient[b.index] += 2.0 * mu * excess;
      c.hessian_diag[b.index] += 2.0 * mu;
    }
  }
  return c;
}

double trajectory_cost(const MpcProblem& problem, const Eigen::MatrixXd& states,
                       const Eigen::MatrixXd& inputs) {
  double J = 0.0;
  for (int i = 0; i <= problem.horizon; ++i)
    J += stage_cost(problem, i, states.row(i).transpose(), inputs.row(i).transpose()).value;
  return J;
}

double soft_violation(const MpcProblem& problem, const Eigen::MatrixXd& states) {
  double worst = 0.0;
  for (int i = 0; i <= problem.horizon; ++i) {
    for (const auto& b : problem.soft_bounds) {
      const double z = states(i, b.index);
      worst = std::max({worst, z - b.upper, b.lower - z});
    }
  }
  return worst;
}

Eigen::MatrixXd shift_inputs(const Eigen::MatrixXd& inputs) {
  Eigen::MatrixXd out(inputs.rows(), inputs.cols());
  const auto N = inputs.rows();
  if (N > 1) out.topRows(N - 1) = inputs.bottomRows(N - 1);
  out.row(N - 1) = inputs.row(N - 1);
  return out;
}

namespace {

struct Quadratization {
  std::vector<Eigen::MatrixXd> A, B;
  std::vector<StageCost> cost;
};

struct BackwardResult {
  std::vector<Eigen::VectorXd> k;
  std::vector<Eigen::MatrixXd> K;
  std::vector<Eigen::Array<bool, Eigen::Dynamic, 1>> clamped;
  double dV1 = 0.0;  // linear term of the expected change
  double dV2 = 0.0;  // quadratic term
  bool ok = false;
};

void quadratize(const MpcProblem& pb, const Eigen::MatrixXd& X, const Eigen::MatrixXd& U,
                Quadratization& q) {
  const int N = pb.horizon;
  q.A.resize(static_cast<std::size_t>(N) + 1);
  q.B.resize(static_cast<std::size_t>(N) + 1);
  q.cost.resize(static_cast<std::size_t>(N) + 1);
  for (int i = 0; i <= N; ++i) {
    const Eigen::VectorXd x = X.row(i).transpose();
    const Eigen::VectorXd u = U.row(i).transpose();
    try {
      pb.dynamics->linearize(x, u, q.A[i], q.B[i]);
    } catch (const DomainError& e) {
      throw InfeasibleError(e.what());
    }
    q.cost[i] = stage_cost(pb, i, x, u);
  }
}

BackwardResult backward_pass(const MpcProblem& pb, const Eigen::MatrixXd& X,
                             const Eigen::MatrixXd& U, const Quadratization& quad, double reg,
                             bool second_order) {
  const int N = pb.horizon;
  const int n = pb.state_dim(), m = pb.input_dim();
  BackwardResult r;
  r.k.resize(static_cast<std::size_t>(N) + 1);
  r.K.resize(static_cast<std::size_t>(N) + 1);
  r.clamped.resize(static_cast<std::size_t>(N) + 1);

  Eigen::VectorXd Vx = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd Vxx = Eigen::MatrixXd::Zero(n, n);

  for (int i = N; i >= 0; --i) {
    const auto& A = quad.A[i];
    const auto& B = quad.B[i];
    const auto& c = quad.cost[i];
    const Eigen::VectorXd lx = c.gradient.head(n);
    const Eigen::VectorXd lu = c.gradient.tail(m);

    Eigen::VectorXd Qx = lx + A.transpose() * Vx;
    Eigen::VectorXd Qu = lu + B.transpose() * Vx;
    Eigen::MatrixXd Qxx = A.transpose() * Vxx * A;
    Qxx.diagonal() += c.hessian_diag.head(n);
    Eigen::MatrixXd Quu = B.transpose() * Vxx * B;
    Quu.diagonal() += c.hessian_diag.tail(m);
    Eigen::MatrixXd Qux = B.transpose() * Vxx * A;
    if (second_order) {
      // Finite-difference probes can cross the model's domain edge; that stage then keeps
      // the Gauss-Newton blocks.
      try {
        const Eigen::MatrixXd C =
            pb.dynamics->weighted_curvature(X.row(i).transpose(), U.row(i).transpose(), Vx);
        Qxx += C.topLeftCorner(n, n);
        Quu += C.bottomRightCorner(m, m);
        Qux += C.bottomLeftCorner(m, n);
      } catch (const DomainError&) {
      }
    }
    Quu = 0.5 * (Quu + Quu.transpose());
    // Regularised blocks drive the gains; the value update uses the plain ones.
    Eigen::MatrixXd Quu_reg = Quu;
    Eigen::MatrixXd Qux_reg = Qux;
    if (reg > 0.0) {
      Quu_reg += reg * B.transpose() * B;
      Qux_reg += reg * B.transpose() * A;
    }

    const Eigen::VectorXd u = U.row(i).transpose();
    const Eigen::VectorXd lo = pb.u_lower - u;
    const Eigen::VectorXd hi = pb.u_upper - u;
    const Eigen::VectorXd kprev = Eigen::VectorXd::Zero(m).cwiseMax(lo).cwiseMin(hi);
    BoxQpResult qp = box_qp(Quu_reg, Qu, lo, hi, kprev);
    if (!qp.ok) return r;

    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(m, n);
    std::vector<int> free_idx;
    for (int j = 0; j < m; ++j)
      if (!qp.clamped[j]) free_idx.push_back(j);
    if (!free_idx.empty()) {
      Eigen::MatrixXd Qux_f(static_cast<Eigen::Index>(free_idx.size()), n);
      for (std::size_t a = 0; a < free_idx.size(); ++a) Qux_f.row(a) = Qux_reg.row(free_idx[a]);
      const Eigen::MatrixXd Kf = -qp.free_llt.solve(Qux_f);
      for (std::size_t a = 0; a < free_idx.size(); ++a) K.row(free_idx[a]) = Kf.row(a);
    }
    const Eigen::VectorXd& k = qp.x;

    r.dV1 += k.dot(Qu);
    r.dV2 += 0.5 * k.dot(Quu * k);

    Vx = Qx + K.transpose() * Quu * k + K.transpose() * Qu + Qux.transpose() * k;
    Vxx = Qxx + K.transpose() * Quu * K + K.transpose() * Qux + Qux.transpose() * K;
    Vxx = 0.5 * (Vxx + Vxx.transpose());

    r.k[i] = k;
    r.K[i] = std::move(K);
    r.clamped[i] = qp.clamped;
  }
  r.ok = true;
  return r;
}

bool rollout(const MpcProblem& pb, const Eigen::VectorXd& x0, const Eigen::MatrixXd& X,
             const Eigen::MatrixXd& U, const BackwardResult& bw, double alpha,
             Eigen::MatrixXd& Xn, Eigen::MatrixXd& Un) {
  const int N = pb.horizon;
  Xn.resize(N + 2, x0.size());
  Un.resize(N + 1, U.cols());
  Xn.row(0) = x0.transpose();
  try {
    for (int i = 0; i <= N; ++i) {
      const Eigen::VectorXd dx = (Xn.row(i) - X.row(i)).transpose();
      Eigen::VectorXd u = U.row(i).transpose() + alpha * bw.k[i] + bw.K[i] * dx;
      u = u.cwiseMax(pb.u_lower).cwiseMin(pb.u_upper);
      Un.row(i) = u.transpose();
      Xn.row(i + 1) = pb.dynamics->step(Xn.row(i).transpose(), u).transpose();
    }
  } catch (const DomainError&) {
    return false;
  }
  return Xn.allFinite();
}

}  // namespace

SolveRecord solve(const MpcProblem& pb, const Eigen::VectorXd& x0,
                  const std::optional<Eigen::MatrixXd>& warm_start, const SolverOptions& opt) {
  pb.validate(opt.q_min);
  const int N = pb.horizon;
  const int n = pb.state_dim(), m = pb.input_dim();
  if (x0.size() != n) throw std::invalid_argument("initial state dimension mismatch");

  Eigen::MatrixXd U = Eigen::MatrixXd::Zero(N + 1, m);
  if (warm_start) {
    if (warm_start->rows() != N + 1 || warm_start->cols() != m)
      throw std::invalid_argument("warm start must be (N+1) x m");
    U = *warm_start;
  }
  for (int i = 0; i <= N; ++i)
    U.row(i) = U.row(i).transpose().cwiseMax(pb.u_lower).cwiseMin(pb.u_upper).transpose();

  Eigen::MatrixXd X(N + 2, n);
  X.row(0) = x0.transpose();
  try {
    for (int i = 0; i <= N; ++i)
      X.row(i + 1) = pb.dynamics->step(X.row(i).transpose(), U.row(i).transpose()).transpose();
  } catch (const DomainError& e) {
    throw InfeasibleError(std::string("initial rollout infeasible: ") + e.what());
  }

  SolveRecord rec;
  double J = trajectory_cost(pb, X, U);
  double reg = 0.0;
  Quadratization quad;
  Eigen::MatrixXd Xn, Un;
  bool converged = false;
  int iterations = 0;
  std::string stop_reason = "max-iterations";

  while (iterations < opt.max_iter && !converged) {
    ++iterations;
    quadratize(pb, X, U, quad);
    BackwardResult bw = backward_pass(pb, X, U, quad, reg, opt.second_order);
    // An indefinite dynamics Hessian term is dropped before any regularisation is added.
    if (!bw.ok && opt.second_order) bw = backward_pass(pb, X, U, quad, reg, false);
    while (!bw.ok) {
      reg = std::max(reg * opt.reg_factor, opt.reg_min);
      if (reg > opt.reg_max) break;
      bw = backward_pass(pb, X, U, quad, reg, opt.second_order);
    }
    if (!bw.ok) {
      stop_reason = "regularization";
      break;
    }

    if (-(bw.dV1 + bw.dV2) < opt.tol_obj) {
      // Take the remaining Newton step when it does not measurably increase the objective.
      if (rollout(pb, x0, X, U, bw, 1.0, Xn, Un)) {
        const double Jn = trajectory_cost(pb, Xn, Un);
        if (Jn <= J + 1e-12 * (1.0 + std::abs(J))) {
          X.swap(Xn);
          U.swap(Un);
          J = Jn;
        }
      }
      converged = true;
      break;
    }

    // Below this the objective cannot resolve the predicted change; a full Newton step that
    // does not measurably increase J is taken so tight tolerances can still be reached.
    const double roundoff = 1e-12 * (1.0 + std::abs(J));
    const double expected_full = -(bw.dV1 + bw.dV2);
    bool accepted = false;
    double alpha = 1.0;
    double Jn = J;
    for (int ls = 0; ls <= opt.max_backtracks; ++ls, alpha *= 0.5) {
      if (!rollout(pb, x0, X, U, bw, alpha, Xn, Un)) continue;
      Jn = trajectory_cost(pb, Xn, Un);
      const double expected = -(alpha * bw.dV1 + alpha * alpha * bw.dV2);
      if (Jn < J && (J - Jn) >= opt.armijo * expected) {
        accepted = true;
        break;
      }
      if (ls == 0 && expected_full < 1e3 * roundoff && Jn <= J + roundoff) {
        accepted = true;
        break;
      }
    }

    if (accepted) {
      const double decrease = J - Jn;
      X.swap(Xn);
      U.swap(Un);
      J = Jn;
      reg = reg / opt.reg_factor;
      if (reg < opt.reg_min) reg = 0.0;
      if (decrease < opt.tol_obj && decrease > roundoff) converged = true;
    } else {
      reg = std::max(reg * opt.reg_factor, opt.reg_min);
      if (reg > opt.reg_max) {
        stop_reason = "line-search";
        break;
      }
    }
  }
  if (converged) stop_reason = "converged";

  // Record the quadratisation and gains at the returned trajectory.
  quadratize(pb, X, U, quad);
  BackwardResult bw = backward_pass(pb, X, U, quad, reg, false);
  double r2 = reg;
  while (!bw.ok && r2 <= opt.reg_max) {
    r2 = std::max(r2 * opt.reg_factor, opt.reg_min);
    bw = backward_pass(pb, X, U, quad, r2, false);
  }

  rec.states = std::move(X);
  rec.inputs = std::move(U);
  rec.A = std::move(quad.A);
  rec.B = std::move(quad.B);
  rec.cost_gradient.reserve(quad.cost.size());
  rec.cost_hessian.reserve(quad.cost.size());
  for (auto& c : quad.cost) {
    rec.cost_gradient.push_back(std::move(c.gradient));
    rec.cost_hessian.push_back(std::move(c.hessian_diag));
  }
  rec.feedback = bw.ok ? std::move(bw.K)
                       : std::vector<Eigen::MatrixXd>(static_cast<std::size_t>(N) + 1,
                                                      Eigen::MatrixXd::Zero(m, n));
  rec.active.resize(static_cast<std::size_t>(N) + 1);
  for (int i = 0; i <= N; ++i) {
    auto& a = rec.active[static_cast<std::size_t>(i)];
    a.resize(m);
    for (int j = 0; j < m; ++j) {
      const double u = rec.inputs(i, j);
      a[j] = (u - pb.u_lower[j] <= opt.active_tol) || (pb.u_upper[j] - u <= opt.active_tol);
    }
  }
  rec.converged = converged;
  rec.iterations = iterations;
  rec.stop_reason = stop_reason;
  rec.objective = J;
  rec.soft_violation = soft_violation(pb, rec.states);
  return rec;
}

}  // namespace zipmpc
