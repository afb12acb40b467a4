#pragma once

#include <Eigen/Dense>

namespace zipmpc {

struct BoxQpResult {
  Eigen::VectorXd x;
  Eigen::Array<bool, Eigen::Dynamic, 1> clamped;
  /// Cholesky factor of H restricted to the free set (valid when `ok`).
  Eigen::LLT<Eigen::MatrixXd> free_llt;
  bool ok = false;
  int iterations = 0;
};

/// Projected-Newton solve of  min 0.5 x'Hx + g'x  s.t. lower <= x <= upper.
/// `ok` is false when H restricted to the free set is not positive definite.
BoxQpResult box_qp(const Eigen::MatrixXd& H, const Eigen::VectorXd& g,
                   const Eigen::VectorXd& lower, const Eigen::VectorXd& upper,
                   const Eigen::VectorXd& x0);

}  // namespace zipmpc
