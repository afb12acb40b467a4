#include "zipmpc/dynamics.hpp"

#include <cmath>

namespace zipmpc {

ModelKind parse_model_kind(const std::string& name) {
  if (name == "kinematic") return ModelKind::kinematic;
  if (name == "pacejka" || name == "pacejka_sim") return ModelKind::pacejka_sim;
  if (name == "pacejka_hardware") return ModelKind::pacejka_hardware;
  throw std::invalid_argument("unknown model '" + name + "'");
}

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::kinematic: return "kinematic";
    case ModelKind::pacejka_sim: return "pacejka_sim";
    case ModelKind::pacejka_hardware: return "pacejka_hardware";
  }
  return "unknown";
}

ModelParams ModelParams::kinematic_sim() {
  ModelParams p;
  p.l_r = 0.05;
  p.l_f = 0.05;
  p.T = 0.03;
  p.half_width = 0.2;
  p.a_max = 1.0;
  p.delta_max = 0.4;
  p.v_max = 1.8;
  return p;
}

ModelParams ModelParams::pacejka_sim() {
  ModelParams p;
  p.l_r = 0.05;
  p.l_f = 0.05;
  p.m = 0.200;
  p.T = 0.03;
  p.half_width = 0.2;
  p.D_f = 0.43;
  p.C_f = 1.4;
  p.B_f = 0.5;
  p.D_r = 0.6;
  p.C_r = 1.7;
  p.B_r = 0.5;
  p.C_m1 = 0.9803;
  p.C_m2 = 0.0181;
  p.C_d0 = 0.0275;
  p.C_roll = 0.085;
  p.a_max = 1.0;
  p.delta_max = 0.5;
  p.v_max = 1.8;
  return p;
}

ModelParams ModelParams::pacejka_hardware() {
  ModelParams p;
  p.l_r = 0.038;
  p.l_f = 0.052;
  p.m = 0.181;
  p.T = 0.026;
  p.half_width = 0.2;
  p.D_f = 0.65;
  p.C_f = 1.5;
  p.B_f = 5.2;
  p.D_r = 1.0;
  p.C_r = 1.45;
  p.B_r = 8.5;
  p.C_m1 = 0.9803;
  p.C_m2 = 0.0181;
  p.C_d0 = 0.085;
  p.C_d1 = 0.01;
  p.C_d2 = 0.0275;
  p.a_max = 1.0;
  p.delta_max = 0.4;
  p.v_max = 2.0;
  return p;
}

ModelParams ModelParams::defaults(ModelKind kind) {
  switch (kind) {
    case ModelKind::kinematic: return kinematic_sim();
    case ModelKind::pacejka_sim: return pacejka_sim();
    case ModelKind::pacejka_hardware: return pacejka_hardware();
  }
  return kinematic_sim();
}

void ModelParams::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string("model parameter ") + name +
                                                " must be positive");
  };
  positive(l_r, "l_r");
  positive(l_f, "l_f");
  positive(m, "m");
  positive(I_z, "I_z");
  positive(T, "T");
  positive(half_width, "half_width");
  positive(a_max, "a_max");
  positive(delta_max, "delta_max");
  positive(v_max, "v_max");
  positive(v_eps, "v_eps");
}

Eigen::VectorXd VehicleModel::input_lower() const {
  return Eigen::Vector2d(-p_.a_max, -p_.delta_max);
}

Eigen::VectorXd VehicleModel::input_upper() const {
  return Eigen::Vector2d(p_.a_max, p_.delta_max);
}

Eigen::VectorXd KinematicBicycle::step(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                       double kappa) const {
  const double d = x[1], phi = x[2], v = x[3];
  const double a = u[0], delta = u[1];
  const double den = 1.0 - kappa * d;
  if (!(den > 0.0)) throw DomainError("Frenet singularity: 1 - kappa*d <= 0");

  const double beta = std::atan(p_.l_r / (p_.l_f + p_.l_r) * std::tan(delta));
  const double c = std::cos(phi + beta);
  const double s = std::sin(phi + beta);
  const double progress_rate = v * c / den;

  Eigen::VectorXd xn(4);
  xn[0] = x[0] + p_.T * progress_rate;
  xn[1] = d + p_.T * v * s;
  xn[2] = phi + p_.T * (v / p_.l_f * std::sin(beta) - kappa * progress_rate);
  xn[3] = v + p_.T * a;
  return xn;
}

bool KinematicBicycle::analytic_jacobian(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                         double kappa, double dk, Eigen::MatrixXd& A,
                                         Eigen::MatrixXd& B) const {
  const double d = x[1], phi = x[2], v = x[3];
  const double delta = u[1];
  const double T = p_.T;
  const double den = 1.0 - kappa * d;
  if (!(den > 0.0)) throw DomainError("Frenet singularity: 1 - kappa*d <= 0");

  const double ratio = p_.l_r / (p_.l_f + p_.l_r);
  const double tan_d = std::tan(delta);
  const double beta = std::atan(ratio * tan_d);
  const double dbeta = ratio * (1.0 + tan_d * tan_d) / (1.0 + ratio * ratio * tan_d * tan_d);
  const double c = std::cos(phi + beta);
  const double s = std::sin(phi + beta);
  const double den2 = den * den;

  A.setZero(4, 4);
  B.setZero(4, 2);

  A(0, 0) = 1.0 + T * v * c * dk * d / den2;
  A(0, 1) = T * v * c * kappa / den2;
  A(0, 2) = -T * v * s / den;
  A(0, 3) = T * c / den;
  B(0, 1) = -T * v * s * dbeta / den;

  A(1, 1) = 1.0;
  A(1, 2) = T * v * c;
  A(1, 3) = T * s;
  B(1, 1) = T * v * c * dbeta;

  A(2, 0) = -T * v * c * dk / den2;
  A(2, 1) = -T * v * c * kappa * kappa / den2;
  A(2, 2) = 1.0 + T * kappa * v * s / den;
  A(2, 3) = T * (std::sin(beta) / p_.l_f - kappa * c / den);
  B(2, 1) = T * (v * std::cos(beta) * dbeta / p_.l_f + kappa * v * s * dbeta / den);

  A(3, 3) = 1.0;
  B(3, 0) = T;
  return true;
}

PacejkaModel::PacejkaModel(Variant variant, ModelParams p) : VehicleModel(p), variant_(variant) {}

PacejkaForces PacejkaModel::forces(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
  const double r = x[3], vx = x[4], vy = x[5];
  const double tau = u[0], delta = u[1];
  if (!(std::abs(vx) > p_.v_eps))
    throw DomainError("Pacejka model evaluated below the minimum longitudinal speed");

  PacejkaForces f{};
  // Slip angles with the sign pattern of the published equations.
  f.alpha_f = -std::atan2(-vy - p_.l_f * r, std::abs(vx)) + delta;
  f.alpha_r = -std::atan2(-vy + p_.l_f * r, std::abs(vx));

  if (variant_ == Variant::sim) {
    f.F_f = -p_.D_f * std::sin(p_.C_f * std::atan(p_.B_f * f.alpha_f));
    f.F_r = -p_.D_r * std::sin(p_.C_r * std::atan(p_.B_r * f.alpha_r));
    f.F_m = (p_.C_m1 - p_.C_m2 * vx) * tau - p_.C_d0 * vx * vx - p_.C_roll;
  } else {
    const double sgn = (vx > 0.0) - (vx < 0.0);
    f.F_fr = sgn * (-p_.C_d0 - p_.C_d1 * vx - p_.C_d2 * vx * vx);
    f.F_m = (p_.C_m1 - p_.C_m2 * vx) * tau;
    f.F_fx = f.F_m * (1.0 - p_.gamma);
    f.F_rx = f.F_m * p_.gamma;
    f.F_f = p_.D_f * std::sin(p_.C_f * std::atan(p_.B_f * f.alpha_f));
    f.F_r = p_.D_r * std::sin(p_.C_r * std::atan(p_.B_r * f.alpha_r));
  }
  return f;
}

Eigen::VectorXd PacejkaModel::step(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                                   double kappa) const {
  const double d = x[1], phi = x[2], r = x[3], vx = x[4], vy = x[5];
  const double delta = u[1];
  const double den = 1.0 - kappa * d;
  if (!(den > 0.0)) throw DomainError("Frenet singularity: 1 - kappa*d <= 0");
  const PacejkaForces f = forces(x, u);
  const double T = p_.T, m = p_.m;

  const double cphi = std::cos(phi), sphi = std::sin(phi);
  const double progress_rate = (vx * cphi - vy * sphi) / den;
  const double cd = std::cos(delta), sd = std::sin(delta);

  Eigen::VectorXd xn(6);
  xn[0] = x[0] + T * progress_rate;
  xn[1] = d + T * (vx * sphi + vy * cphi);
  xn[2] = phi + T * (r - kappa * progress_rate);
  if (variant_ == Variant::sim) {
    xn[3] = r + T * (f.F_f * p_.l_f * cd - f.F_r * p_.l_r) / p_.I_z;
    xn[4] = vx + T * (f.F_m - f.F_f * sd + m * vy * r) / m;
    xn[5] = vy + T * (f.F_r + f.F_f * cd - m * vx * r) / m;
  } else {
    xn[3] = r + T * (f.F_f * p_.l_f * cd + f.F_fx * p_.l_f * sd - f.F_r * p_.l_r) / p_.I_z;
    xn[4] = vx + T * ((f.F_m - f.F_f * sd + f.F_fx * cd + m * vy * r) / m + f.F_fr);
    xn[5] = vy + T * (f.F_r + f.F_f * cd + f.F_fx * sd - m * vx * r) / m;
  }
  return xn;
}

std::unique_ptr<VehicleModel> make_vehicle_model(ModelKind kind, const ModelParams& p) {
  switch (kind) {
    case ModelKind::kinematic: return std::make_unique<KinematicBicycle>(p);
    case ModelKind::pacejka_sim:
      return std::make_unique<PacejkaModel>(PacejkaModel::Variant::sim, p);
    case ModelKind::pacejka_hardware:
      return std::make_unique<PacejkaModel>(PacejkaModel::Variant::hardware, p);
  }
  throw std::invalid_argument("unknown model kind");
}

void linearize(const VehicleModel& model, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
               const CurvatureFn& kappa, Eigen::MatrixXd& A, Eigen::MatrixXd& B, bool analytic,
               double h) {
  if (analytic) {
    const double s = x[0];
    const double slope = (kappa(s + h) - kappa(s - h)) / (2.0 * h);
    if (model.analytic_jacobian(x, u, kappa(s), slope, A, B)) return;
  }
  const int n = model.state_dim();
  const int m = model.input_dim();
  A.resize(n, n);
  B.resize(n, m);
  Eigen::VectorXd xp = x, up = u;
  try {
    for (int j = 0; j < n; ++j) {
      xp[j] = x[j] + h;
      const Eigen::VectorXd fp = model.step(xp, u, kappa(xp[0]));
      xp[j] = x[j] - h;
      const Eigen::VectorXd fm = model.step(xp, u, kappa(xp[0]));
      xp[j] = x[j];
      A.col(j) = (fp - fm) / (2.0 * h);
    }
    const double k0 = kappa(x[0]);
    for (int j = 0; j < m; ++j) {
      up[j] = u[j] + h;
      const Eigen::VectorXd fp = model.step(x, up, k0);
      up[j] = u[j] - h;
      const Eigen::VectorXd fm = model.step(x, up, k0);
      up[j] = u[j];
      B.col(j) = (fp - fm) / (2.0 * h);
    }
  } catch (const DomainError& e) {
    throw DomainError(std::string("linearization failed: ") + e.what());
  }
}

}  // namespace zipmpc
