#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "zipmpc/dynamics.hpp"
#include "zipmpc/mpcc.hpp"
#include "zipmpc/solver.hpp"
#include "zipmpc/track.hpp"

namespace zipmpc {

/// Receding-horizon policy acting on the vehicle state.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual std::string name() const = 0;
  /// Clears warm starts and traces before a new run.
  virtual void reset() {}
  /// Throws InfeasibleError when no input can be computed.
  virtual Eigen::VectorXd control(const Eigen::VectorXd& vehicle_state) = 0;
  /// Whether the last control() call came from a converged solve (always true for policies).
  virtual bool last_converged() const { return true; }
};

/// Contouring MPC with a cost schedule chosen per step by `schedule()`; the default
/// returns a fixed schedule.
class MpcController : public Controller {
 public:
  MpcController(std::shared_ptr<const VehicleModel> model,
                std::shared_ptr<const TrackModel> track, int horizon, CostSchedule cost,
                SolverOptions options = {}, MpccSettings settings = {});

  std::string name() const override { return name_; }
  void set_name(std::string n) { name_ = std::move(n); }
  void reset() override;
  Eigen::VectorXd control(const Eigen::VectorXd& vehicle_state) override;
  bool last_converged() const override { return last_.converged; }

  const SolveRecord& last_record() const { return last_; }
  const MpcProblem& problem() const { return problem_; }
  int horizon() const { return problem_.horizon; }
  const SolverOptions& options() const { return options_; }

 protected:
  virtual CostSchedule schedule(const Eigen::VectorXd& vehicle_state);

  std::shared_ptr<const VehicleModel> model_;
  std::shared_ptr<const TrackModel> track_;
  MpcProblem problem_;
  CostSchedule base_cost_;
  SolverOptions options_;
  std::optional<Eigen::MatrixXd> warm_;
  SolveRecord last_;
  std::string name_ = "mpc";
};

enum class LapStatus { completed, step_budget, infeasible, off_track };
std::string to_string(LapStatus s);

struct LapResult {
  LapStatus status = LapStatus::step_budget;
  bool completed() const { return status == LapStatus::completed; }
  double lap_time = 0.0;           // s, interpolated at the line crossing
  Eigen::MatrixXd states;          // (steps+1) x n vehicle states
  Eigen::MatrixXd inputs;          // steps x m
  std::vector<double> step_ms;     // wall-clock of each control() call
  int nonconverged_steps = 0;
  double max_abs_d = 0.0;
  bool inputs_in_bounds = true;
  std::string message;

  int steps() const { return static_cast<int>(inputs.rows()); }
  double mean_step_ms() const;
  double median_step_ms() const;
};

struct LapOptions {
  int max_steps = 2000;
  /// Stop with off_track when |d| exceeds the track half width.
  bool stop_off_track = true;
};

/// Closed-loop lap on `plant` starting from `x0`: apply the controller's first input, step the
/// plant with the track curvature, repeat until progress has advanced by one track length.
LapResult run_lap(Controller& controller, const VehicleModel& plant, const TrackModel& track,
                  const Eigen::VectorXd& x0, const LapOptions& options = {});

/// CSV with one row per step: t, state columns, input columns, step_ms.
void write_lap_csv(const LapResult& lap, ModelKind kind, double dt,
                   const std::filesystem::path& path);
/// JSON summary (status, lap time, timing, constraint statistics).
std::string lap_summary_json(const LapResult& lap, const std::string& controller);

/// Writes via a temporary file and rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

/// Vehicle state with speed v and zero yaw rate / lateral velocity for the Pacejka models.
Eigen::VectorXd make_vehicle_state(ModelKind kind, double sigma, double d, double phi, double v);

}  // namespace zipmpc
