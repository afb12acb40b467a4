#include "zipmpc/box_qp.hpp"

#include <cmath>
#include <vector>

namespace zipmpc {

namespace {

Eigen::VectorXd clamp(const Eigen::VectorXd& x, const Eigen::VectorXd& lo,
                      const Eigen::VectorXd& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

double objective(const Eigen::MatrixXd& H, const Eigen::VectorXd& g, const Eigen::VectorXd& x) {
  return x.dot(0.5 * (H * x) + g);
}

Eigen::MatrixXd restrict(const Eigen::MatrixXd& H, const std::vector<int>& idx) {
  const auto k = static_cast<Eigen::Index>(idx.size());
  Eigen::MatrixXd out(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) out(a, b) = H(idx[a], idx[b]);
  return out;
}

}  // namespace

BoxQpResult box_qp(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                   const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                   const Eigen::VectorXd& x0) {
  constexpr int kMaxIter = 100;
  constexpr double kMinGrad = 1e-13;
  constexpr double kMinRelImprove = 1e-15;
  constexpr double kStepDec = 0.6;
  constexpr double kMinStep = 1e-22;
  constexpr double kArmijo = 0.1;

  const Eigen::Index n = g.size();
  BoxQpResult res;
  res.clamped = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(n, false);

  // Unconstrained minimiser inside the box: done.
  Eigen::LLT<Eigen::MatrixXd> full(H);
  if (full.info() == Eigen::Success) {
    Eigen::VectorXd xu = -full.solve(g);
    if (((xu - lower).array() >= 0.0).all() && ((upper - xu).array() >= 0.0).all()) {
      res.x = xu;
      res.free_llt = full;
      res.ok = true;
      return res;
    }
  }

  Eigen::VectorXd x = clamp(x0, lower, upper);
  double value = objective(H, g, x);
  std::vector<int> free_idx;

  for (int iter = 0; iter < kMaxIter; ++iter) {
    res.iterations = iter + 1;
    const double old_value = value;
    const Eigen::VectorXd grad = g + H * x;

    free_idx.clear();
    double gnorm2 = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const bool c = (x[i] <= lower[i] && grad[i] > 0.0) || (x[i] >= upper[i] && grad[i] < 0.0);
      res.clamped[i] = c;
      if (!c) {
        free_idx.push_back(static_cast<int>(i));
        gnorm2 += grad[i] * grad[i];
      }
    }
    if (free_idx.empty()) {
      res.x = x;
      res.ok = true;
      res.free_llt = Eigen::LLT<Eigen::MatrixXd>(Eigen::MatrixXd(0, 0));
      return res;
    }

    res.free_llt.compute(restrict(H, free_idx));
    if (res.free_llt.info() != Eigen::Success) {
      res.x = x;
      res.ok = false;
      return res;
    }
    if (gnorm2 < kMinGrad * kMinGrad) break;

    // Newton step on the free set, clamped variables held fixed.
    Eigen::VectorXd x_clamped = x;
    for (int i : free_idx) x_clamped[i] = 0.0;
    const Eigen::VectorXd g_fixed = g + H * x_clamped;
    Eigen::VectorXd g_free(static_cast<Eigen::Index>(free_idx.size()));
    for (std::size_t a = 0; a < free_idx.size(); ++a) g_free[a] = g_fixed[free_idx[a]];
    const Eigen::VectorXd target = -res.free_llt.solve(g_free);
    Eigen::VectorXd search = Eigen::VectorXd::Zero(n);
    for (std::size_t a = 0; a < free_idx.size(); ++a)
      search[free_idx[a]] = target[a] - x[free_idx[a]];

    const double sdotg = search.dot(grad);
    if (sdotg >= 0.0) break;

    double step = 1.0;
    Eigen::VectorXd xc;
    double vc = value;
    while (true) {
      xc = clamp(x + step * search, lower, upper);
      vc = objective(H, g, xc);
      if ((vc - old_value) / (step * sdotg) >= kArmijo) break;
      step *= kStepDec;
      if (step < kMinStep) break;
    }
    if (vc >= old_value) break;
    x = xc;
    value = vc;
    if (old_value - value < kMinRelImprove * std::abs(old_value)) break;
  }

  // Final active set and free factorisation at the returned point.
  const Eigen::VectorXd grad = g + H * x;
  free_idx.clear();
  for (Eigen::Index i = 0; i < n; ++i) {
    const bool c = (x[i] <= lower[i] && grad[i] > 0.0) || (x[i] >= upper[i] && grad[i] < 0.0);
    res.clamped[i] = c;
    if (!c) free_idx.push_back(static_cast<int>(i));
  }
  res.free_llt.compute(restrict(H, free_idx));
  res.ok = free_idx.empty() || res.free_llt.info() == Eigen::Success;
  res.x = x;
  return res;
}

}  // namespace zipmpc
