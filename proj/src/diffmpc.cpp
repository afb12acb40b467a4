#include "zipmpc/diffmpc.hpp"

#include "zipmpc/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

namespace zipmpc {

CostGradient CostGradient::zeros(int stages, int dim) {
  CostGradient g;
  g.dq.assign(static_cast<std::size_t>(stages), Eigen::VectorXd::Zero(dim));
  g.dp.assign(static_cast<std::size_t>(stages), Eigen::VectorXd::Zero(dim));
  return g;
}

double CostGradient::max_abs() const {
  double m = 0.0;
  for (const auto& v : dq) m = std::max(m, v.cwiseAbs().maxCoeff());
  for (const auto& v : dp) m = std::max(m, v.cwiseAbs().maxCoeff());
  return m;
}

TrajectoryGradient TrajectoryGradient::zeros(const SolveRecord& r) {
  return {Eigen::MatrixXd::Zero(r.states.rows(), r.states.cols()),
          Eigen::MatrixXd::Zero(r.inputs.rows(), r.inputs.cols())};
}

BackwardResult backward(const MpcProblem& pb, const SolveRecord& rec,
                        const TrajectoryGradient& up, const BackwardOptions& opt) {
  if (!rec.converged)
    throw NotConvergedError("backward needs a converged solve (" + rec.stop_reason + ")");
  const int N = pb.horizon;
  const int n = pb.state_dim(), m = pb.input_dim();
  if (rec.horizon() != N || rec.states.cols() != n)
    throw std::invalid_argument("record does not match the problem");
  if (up.states.rows() != N + 2 || up.states.cols() != n || up.inputs.rows() != N + 1 ||
      up.inputs.cols() != m)
    throw std::invalid_argument("upstream gradient shape mismatch");

  const auto S = static_cast<std::size_t>(N) + 1;

  // Costates of the converged point: lambda_{N+1} = 0, lambda_i = l_x + A' lambda_{i+1}.
  std::vector<Eigen::VectorXd> lambda(S + 1, Eigen::VectorXd::Zero(n));
  for (int i = N; i >= 1; --i)
    lambda[i] = rec.cost_gradient[i].head(n) + rec.A[i].transpose() * lambda[i + 1];

  // Stage Hessians of the Lagrangian in z = [x; u].
  std::vector<Eigen::MatrixXd> H(S);
  for (int i = 0; i <= N; ++i) {
    H[i] = rec.cost_hessian[i].asDiagonal();
    if (opt.exact_curvature && lambda[i + 1].squaredNorm() > 0.0) {
      try {
        H[i] += pb.dynamics->weighted_curvature(rec.states.row(i).transpose(),
                                                rec.inputs.row(i).transpose(), lambda[i + 1]);
      } catch (const DomainError& e) {
        throw NotConvergedError(std::string("solution too close to the model domain edge: ") +
                                e.what());
      }
    }
  }

  // Adjoint LQR: min sum 0.5 dz'H dz + g'dz, dx_{i+1} = A dx + B du, dx_0 = 0,
  // active inputs fixed at zero. Riccati recursion with V_{N+1} = (g_{N+1}, 0).
  BackwardResult out;
  Eigen::VectorXd Vx = up.states.row(N + 1).transpose();
  Eigen::MatrixXd Vxx = Eigen::MatrixXd::Zero(n, n);
  std::vector<Eigen::VectorXd> kff(S);
  std::vector<Eigen::MatrixXd> Kfb(S);
  for (int i = N; i >= 0; --i) {
    const auto& A = rec.A[i];
    const auto& B = rec.B[i];
    const Eigen::MatrixXd Hxx = H[i].topLeftCorner(n, n);
    const Eigen::MatrixXd Huu = H[i].bottomRightCorner(m, m);
    const Eigen::MatrixXd Hux = H[i].bottomLeftCorner(m, n);
    const Eigen::VectorXd qx = up.states.row(i).transpose() + A.transpose() * Vx;
    const Eigen::VectorXd qu = up.inputs.row(i).transpose() + B.transpose() * Vx;
    const Eigen::MatrixXd Qxx = Hxx + A.transpose() * Vxx * A;
    const Eigen::MatrixXd Quu = Huu + B.transpose() * Vxx * B;
    const Eigen::MatrixXd Qux = Hux + B.transpose() * Vxx * A;

    std::vector<int> free_idx;
    for (int j = 0; j < m; ++j)
      if (!rec.active[i][j]) free_idx.push_back(j);
    const auto f = static_cast<Eigen::Index>(free_idx.size());
    Eigen::VectorXd k = Eigen::VectorXd::Zero(m);
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(m, n);
    if (f > 0) {
      Eigen::MatrixXd Qff(f, f), Qfx(f, n);
      Eigen::VectorXd qf(f);
      for (Eigen::Index a = 0; a < f; ++a) {
        qf[a] = qu[free_idx[a]];
        Qfx.row(a) = Qux.row(free_idx[a]);
        for (Eigen::Index b = 0; b < f; ++b) Qff(a, b) = Quu(free_idx[a], free_idx[b]);
      }
      Qff = 0.5 * (Qff + Qff.transpose());
      Eigen::LLT<Eigen::MatrixXd> llt(Qff);
      double shift = opt.fallback_reg;
      while (llt.info() != Eigen::Success && shift < 1e12) {
        out.regularized = true;
        llt.compute(Qff + shift * Eigen::MatrixXd::Identity(f, f));
        shift *= 10.0;
      }
      const Eigen::VectorXd kf = -llt.solve(qf);
      const Eigen::MatrixXd Kf = -llt.solve(Qfx);
      for (Eigen::Index a = 0; a < f; ++a) {
        k[free_idx[a]] = kf[a];
        K.row(free_idx[a]) = Kf.row(a);
      }
    }
    Vx = qx + K.transpose() * Quu * k + K.transpose() * qu + Qux.transpose() * k;
    Vxx = Qxx + K.transpose() * Quu * K + K.transpose() * Qux + Qux.transpose() * K;
    Vxx = 0.5 * (Vxx + Vxx.transpose());
    kff[i] = std::move(k);
    Kfb[i] = std::move(K);
  }

  out.dstates = Eigen::MatrixXd::Zero(N + 2, n);
  out.dinputs = Eigen::MatrixXd::Zero(N + 1, m);
  Eigen::VectorXd dx = Eigen::VectorXd::Zero(n);
  for (int i = 0; i <= N; ++i) {
    const Eigen::VectorXd du = kff[i] + Kfb[i] * dx;
    out.dinputs.row(i) = du.transpose();
    dx = rec.A[i] * dx + rec.B[i] * du;
    out.dstates.row(i + 1) = dx.transpose();
  }

  // d(grad_z l)/dq_j = 2 z_src e_src, d(grad_z l)/dp_j = e_src.
  const int dim = n + m;
  out.grad = CostGradient::zeros(N + 1, dim);
  for (int i = 0; i <= N; ++i) {
    for (int j = 0; j < dim; ++j) {
      const int s = pb.source(j);
      const double z = s < n ? rec.states(i, s) : rec.inputs(i, s - n);
      const double dz = s < n ? out.dstates(i, s) : out.dinputs(i, s - n);
      out.grad.dq[i][j] = 2.0 * z * dz;
      out.grad.dp[i][j] = dz;
    }
  }
  return out;
}

double evaluate_loss(const LossSpec& spec, const Eigen::MatrixXd& X, const Eigen::MatrixXd& U,
                     TrajectoryGradient* grad) {
  if (grad) {
    grad->states = Eigen::MatrixXd::Zero(X.rows(), X.cols());
    grad->inputs = Eigen::MatrixXd::Zero(U.rows(), U.cols());
  }
  if (spec.kind == LossSpec::Kind::input_norm) {
    if (grad) grad->inputs = 2.0 * U;
    return U.squaredNorm();
  }
  if (spec.ref_states.rows() != X.rows() || spec.ref_states.cols() != X.cols() ||
      spec.ref_inputs.rows() != U.rows() || spec.ref_inputs.cols() != U.cols())
    throw std::invalid_argument("reference trajectory shape mismatch");
  const double count = static_cast<double>(X.size() + U.size());
  const Eigen::MatrixXd ex = X - spec.ref_states;
  const Eigen::MatrixXd eu = U - spec.ref_inputs;
  if (grad) {
    grad->states = 2.0 * ex / count;
    grad->inputs = 2.0 * eu / count;
  }
  return (ex.squaredNorm() + eu.squaredNorm()) / count;
}

SolverOptions GradcheckOptions::tight_solver_options() {
  SolverOptions o;
  o.tol_obj = 1e-16;
  o.max_iter = 200;
  o.second_order = true;
  return o;
}

std::string GradcheckReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(12);
  os << "stage,slot,param,analytic,numeric,rel_err,status\n";
  for (const auto& e : entries)
    os << e.stage << ',' << e.slot << ',' << e.param << ',' << e.analytic << ',' << e.numeric
       << ',' << e.rel_err << ',' << e.status << '\n';
  return os.str();
}

GradcheckReport gradcheck(const MpcProblem& problem, const Eigen::VectorXd& x0,
                          const LossSpec& loss_in, const GradcheckOptions& opt) {
  if (!(opt.h > 0.0) || !std::isfinite(opt.h))
    throw std::invalid_argument("gradcheck step h must be positive and finite");
  MpcProblem pb = problem;
  const SolveRecord nominal = solve(pb, x0, std::nullopt, opt.solver);
  if (!nominal.converged) throw NotConvergedError("nominal solve did not converge");

  LossSpec loss = loss_in;
  if (loss.kind == LossSpec::Kind::reference_mse && loss.ref_states.size() == 0) {
    std::mt19937_64 rng(opt.seed);
    std::normal_distribution<double> noise(0.0, 0.05);
    loss.ref_states = nominal.states;
    loss.ref_inputs = nominal.inputs;
    for (Eigen::Index i = 0; i < loss.ref_states.size(); ++i) loss.ref_states(i) += noise(rng);
    for (Eigen::Index i = 0; i < loss.ref_inputs.size(); ++i) loss.ref_inputs(i) += noise(rng);
  }

  TrajectoryGradient up;
  evaluate_loss(loss, nominal.states, nominal.inputs, &up);
  const BackwardResult bw = backward(pb, nominal, up, opt.backward);

  // Perturbations may step a weight sitting at q_min slightly below it.
  SolverOptions perturbed = opt.solver;
  perturbed.q_min = 0.0;

  GradcheckReport rep;
  const int dim = pb.cost.dim();
  for (int i = 0; i <= pb.horizon; ++i) {
    for (char which : {'q', 'p'}) {
      for (int j = 0; j < dim; ++j) {
        GradcheckEntry e;
        e.stage = i;
        e.slot = j;
        e.param = which;
        e.analytic = which == 'q' ? bw.grad.dq[i][j] : bw.grad.dp[i][j];
        double& slot = which == 'q' ? pb.cost.q[i][j] : pb.cost.p[i][j];
        const double orig = slot;
        double vals[2] = {0.0, 0.0};
        for (int side = 0; side < 2; ++side) {
          slot = orig + (side == 0 ? opt.h : -opt.h);
          try {
            const SolveRecord r = solve(pb, x0, nominal.inputs, perturbed);
            if (!r.converged) e.status = "not-converged";
            vals[side] = evaluate_loss(loss, r.states, r.inputs);
          } catch (const InfeasibleError&) {
            e.status = "infeasible";
          } catch (const std::invalid_argument&) {
            e.status = "out-of-domain";
          }
        }
        slot = orig;
        e.numeric = (vals[0] - vals[1]) / (2.0 * opt.h);
        rep.entries.push_back(e);
      }
    }
  }

  double gmax = 0.0;
  for (const auto& e : rep.entries)
    if (e.status == "ok") gmax = std::max(gmax, std::abs(e.numeric));
  rep.floor = std::max(opt.floor_fraction * gmax, 1e-300);
  for (auto& e : rep.entries) {
    if (e.status != "ok") continue;
    const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), rep.floor});
    e.rel_err = std::abs(e.analytic - e.numeric) / denom;
    rep.max_rel_err = std::max(rep.max_rel_err, e.rel_err);
  }
  return rep;
}

}  // namespace zipmpc
