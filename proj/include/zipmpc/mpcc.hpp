#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "zipmpc/dynamics.hpp"
#include "zipmpc/solver.hpp"
#include "zipmpc/track.hpp"

namespace zipmpc {

/// Controller-side dynamics: the vehicle state augmented with the horizon-start progress
/// sigma_0 and the in-horizon progress sigma_delta = sigma - sigma_0.
class MpccDynamics final : public Dynamics {
 public:
  MpccDynamics(std::shared_ptr<const VehicleModel> model, std::shared_ptr<const TrackModel> track,
               bool analytic_jacobian = false);

  int state_dim() const override { return model_->state_dim() + 2; }
  int input_dim() const override { return model_->input_dim(); }
  int vehicle_dim() const { return model_->state_dim(); }
  int sigma0_index() const { return model_->state_dim(); }
  int sigma_delta_index() const { return model_->state_dim() + 1; }

  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const override;
  void linearize(const Eigen::VectorXd& x, const Eigen::VectorXd& u, Eigen::MatrixXd& A,
                 Eigen::MatrixXd& B) const override;

  const VehicleModel& model() const { return *model_; }
  const TrackModel& track() const { return *track_; }

 private:
  std::shared_ptr<const VehicleModel> model_;
  std::shared_ptr<const TrackModel> track_;
  bool analytic_;
};

/// Vehicle state -> controller state (sigma_0 = sigma, sigma_delta = 0).
Eigen::VectorXd augment_state(const Eigen::VectorXd& vehicle_state);

/// Names of the cost slots z = [x_aug; u] for a model.
std::vector<std::string> cost_slot_names(ModelKind kind);

struct CostVector {
  Eigen::VectorXd q;
  Eigen::VectorXd p;
};

/// Hand-tuned stage cost for the simulation models.
CostVector manual_cost(ModelKind kind);
/// Hardware cost table, stored scaled by N; returns the per-stage values for horizon N.
CostVector hardware_manual_cost(int horizon);

struct MpccSettings {
  double penalty_weight = 3e4;
  double tighten_factor = 0.85;  // omega_tight = factor * omega
  bool analytic_jacobian = true;
};

/// Assembles the contouring problem: input boxes from the model bounds, squared-hinge
/// penalties on |d| <= omega_tight and speed <= v_max, progress priced through sigma_delta.
MpcProblem make_mpcc_problem(std::shared_ptr<const VehicleModel> model,
                             std::shared_ptr<const TrackModel> track, int horizon,
                             CostSchedule cost, const MpccSettings& settings = {});

}  // namespace zipmpc
