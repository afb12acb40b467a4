#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>

namespace zipmpc {

/// Raised when a model is evaluated outside its validity region
/// (Frenet singularity, low longitudinal speed).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelKind { kinematic, pacejka_sim, pacejka_hardware };

ModelKind parse_model_kind(const std::string& name);
std::string to_string(ModelKind kind);

/// Vehicle and constraint parameters. Presets reproduce the published parameter table; the
/// yaw inertia and drive split are not published and are plain defaults.
struct ModelParams {
  double l_r = 0.05;
  double l_f = 0.05;
  double m = 0.2;
  double I_z = 1.67e-4;
  double T = 0.03;
  double half_width = 0.2;

  double D_f = 0.0, C_f = 0.0, B_f = 0.0;
  double D_r = 0.0, C_r = 0.0, B_r = 0.0;
  double C_m1 = 0.0, C_m2 = 0.0;
  double C_d0 = 0.0, C_d1 = 0.0, C_d2 = 0.0;
  double C_roll = 0.0;
  double gamma = 0.0;

  double a_max = 1.0;
  double delta_max = 0.4;
  double v_max = 1.8;
  double v_eps = 0.05;

  static ModelParams kinematic_sim();
  static ModelParams pacejka_sim();
  static ModelParams pacejka_hardware();
  static ModelParams defaults(ModelKind kind);

  void validate() const;
};

using CurvatureFn = std::function<double(double)>;

/// Discrete-time Frenet-frame vehicle model, Euler discretised with step p.T.
class VehicleModel {
 public:
  virtual ~VehicleModel() = default;

  virtual ModelKind kind() const = 0;
  virtual int state_dim() const = 0;
  virtual int input_dim() const { return 2; }
  /// Index of the (longitudinal) speed in the state vector.
  virtual int speed_index() const = 0;
  static constexpr int progress_index() { return 0; }
  static constexpr int lateral_index() { return 1; }
  static constexpr int heading_index() { return 2; }

  virtual Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                               double kappa) const = 0;

  /// Closed-form Jacobians including d(kappa)/d(sigma). Returns false when not available.
  virtual bool analytic_jacobian(const Eigen::VectorXd& /*x*/, const Eigen::VectorXd& /*u*/,
                                 double /*kappa*/, double /*kappa_slope*/,
                                 Eigen::MatrixXd& /*A*/, Eigen::MatrixXd& /*B*/) const {
    return false;
  }

  Eigen::VectorXd input_lower() const;
  Eigen::VectorXd input_upper() const;

  const ModelParams& params() const { return p_; }

 protected:
  explicit VehicleModel(ModelParams p) : p_(p) { p_.validate(); }
  ModelParams p_;
};

/// State (sigma, d, phi, v); input (a, delta).
class KinematicBicycle final : public VehicleModel {
 public:
  explicit KinematicBicycle(ModelParams p = ModelParams::kinematic_sim()) : VehicleModel(p) {}
  ModelKind kind() const override { return ModelKind::kinematic; }
  int state_dim() const override { return 4; }
  int speed_index() const override { return 3; }
  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                       double kappa) const override;
  bool analytic_jacobian(const Eigen::VectorXd& x, const Eigen::VectorXd& u, double kappa,
                         double kappa_slope, Eigen::MatrixXd& A,
                         Eigen::MatrixXd& B) const override;
};

/// Tyre forces of one Pacejka evaluation; exposed for testing.
struct PacejkaForces {
  double alpha_f, alpha_r;
  double F_f, F_r;    // lateral (front/rear); F_fy/F_ry in the hardware variant
  double F_m;         // motor force
  double F_fx, F_rx;  // hardware drive split (zero in the simulation variant)
  double F_fr;        // hardware friction term (zero in the simulation variant)
};

/// State (sigma, d, phi, r, v_x, v_y); input (tau, delta).
class PacejkaModel final : public VehicleModel {
 public:
  enum class Variant { sim, hardware };

  explicit PacejkaModel(Variant variant,
                        ModelParams p = ModelParams::pacejka_sim());
  ModelKind kind() const override {
    return variant_ == Variant::sim ? ModelKind::pacejka_sim : ModelKind::pacejka_hardware;
  }
  int state_dim() const override { return 6; }
  int speed_index() const override { return 4; }
  Variant variant() const { return variant_; }

  /// Throws DomainError when |v_x| <= v_eps.
  PacejkaForces forces(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const;
  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                       double kappa) const override;

 private:
  Variant variant_;
};

std::unique_ptr<VehicleModel> make_vehicle_model(ModelKind kind, const ModelParams& p);

/// One-step map linearisation about (x, u), with kappa evaluated at the state's progress.
/// Central differences with step h, or the model's closed form when `analytic` is set
/// and available.
void linearize(const VehicleModel& model, const Eigen::VectorXd& x, const Eigen::VectorXd& u,
               const CurvatureFn& kappa, Eigen::MatrixXd& A, Eigen::MatrixXd& B,
               bool analytic = false, double h = 1e-6);

}  // namespace zipmpc
