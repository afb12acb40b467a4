#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "zipmpc/closed_loop.hpp"
#include "zipmpc/costnet.hpp"
#include "zipmpc/diffmpc.hpp"
#include "zipmpc/dynamics.hpp"
#include "zipmpc/mpcc.hpp"
#include "zipmpc/solver.hpp"
#include "zipmpc/track.hpp"

namespace zipmpc {

/// N+1 identical copies of the manual stage cost.
CostSchedule expand(const CostVector& manual, int horizon);

/// (v, d, phi) of a vehicle state.
Eigen::Vector3d state_features(const VehicleModel& model, const Eigen::VectorXd& vehicle_state);

/// Uniform sampling box for initial states. Empty sigma bounds mean [0, track length).
struct SampleRanges {
  double d_lo = 0.0, d_hi = 0.0;
  double phi_lo = -0.4, phi_hi = 0.4;
  double v_lo = 0.3, v_hi = 0.0;
  std::optional<double> sigma_lo, sigma_hi;

  /// d in +-0.8 omega_tight, phi in +-0.4, v in [0.3, v_max].
  static SampleRanges defaults(const VehicleModel& model, double omega_tight);
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SampleState {
  Eigen::VectorXd state;   // vehicle state
  ContextWindow context;   // curvature ahead, long-horizon reach
  SolveRecord reference;   // long-horizon solution from `state`
  bool feasible = false;
  int rejections = 0;      // draws discarded before this one
};

/// Draws initial states and keeps those whose long-horizon solve converges with a soft-bound
/// violation at most `exclusion`.
class Sampler {
 public:
  Sampler(std::shared_ptr<const VehicleModel> model, std::shared_ptr<const TrackModel> track,
          int long_horizon, CostVector manual, SampleRanges ranges, SolverOptions solver = {},
          MpccSettings settings = {}, double exclusion = 0.02, int max_retries = 100);

  /// Throws SamplingError after max_retries consecutive rejections.
  SampleState draw(std::mt19937_64& rng) const;
  /// Single attempt at a given state; feasible=false when rejected.
  SampleState evaluate(const Eigen::VectorXd& state) const;

  const MpcProblem& long_problem() const { return problem_; }
  const SampleRanges& ranges() const { return ranges_; }
  double omega_tight() const { return omega_tight_; }

 private:
  std::shared_ptr<const VehicleModel> model_;
  std::shared_ptr<const TrackModel> track_;
  MpcProblem problem_;
  SampleRanges ranges_;
  SolverOptions solver_;
  double exclusion_;
  int max_retries_;
  double omega_tight_;
};

/// Per-variable weights over z = [x_aug; u]: 1/(nominal range)^2, zero on the progress slots.
Eigen::VectorXd default_loss_weights(ModelKind kind);

struct ImitationLoss {
  double value = 0.0;
  TrajectoryGradient grad;  // with respect to the short trajectory
};

/// sum_{i < steps} sum_j w_j (z_S,ij - z_L,ij)^2 / steps over z_i = [x_i; u_i].
ImitationLoss imitation_loss(const Eigen::MatrixXd& short_states, const Eigen::MatrixXd& short_inputs,
                             const Eigen::MatrixXd& long_states, const Eigen::MatrixXd& long_inputs,
                             int steps, const Eigen::VectorXd& weights);

/// Output bounds for the cost network: |dq| <= q_manual + 1, |dp| <= 10.
std::vector<double> default_cost_output_scale(const CostVector& manual);

/// Net configuration matching a controller: schedule head over N_S, context sized for N_L.
NetConfig make_cost_net_config(const VehicleModel& model, const TrackModel& track,
                               int short_horizon, int long_horizon, const CostVector& manual,
                               NetConfig base = {});

/// Manual schedule plus the network correction for one state.
CostSchedule learned_schedule(const CostNet& net, const CostVector& manual, const VehicleModel& model,
                              const TrackModel& track, int long_horizon,
                              const Eigen::VectorXd& vehicle_state);

struct ParamTracePoint {
  double sigma = 0.0;
  double p_d = 0.0;           // stage-0 linear weight on d
  double mean_curvature = 0.0;  // mean of the context window
};

/// MPC_{N_S} whose cost comes from the network at every step.
class ZipMpcController final : public MpcController {
 public:
  ZipMpcController(std::shared_ptr<const VehicleModel> model,
                   std::shared_ptr<const TrackModel> track, CostVector manual,
                   std::shared_ptr<const CostNet> net, int long_horizon, SolverOptions options = {},
                   MpccSettings settings = {});

  void reset() override;
  const std::vector<ParamTracePoint>& trace() const { return trace_; }

 protected:
  CostSchedule schedule(const Eigen::VectorXd& vehicle_state) override;

 private:
  CostVector manual_;
  std::shared_ptr<const CostNet> net_;
  int long_horizon_;
  int d_slot_;
  std::vector<ParamTracePoint> trace_;
};

/// Behaviour-cloning policy: the network maps (state, context) straight to the input.
class CloneController final : public Controller {
 public:
  CloneController(std::shared_ptr<const VehicleModel> model,
                  std::shared_ptr<const TrackModel> track, std::shared_ptr<const CostNet> net,
                  int long_horizon);
  std::string name() const override { return "empc"; }
  Eigen::VectorXd control(const Eigen::VectorXd& vehicle_state) override;

 private:
  std::shared_ptr<const VehicleModel> model_;
  std::shared_ptr<const TrackModel> track_;
  std::shared_ptr<const CostNet> net_;
  int long_horizon_;
};

struct TrainConfig {
  int short_horizon = 5;
  int long_horizon = 18;
  int loss_steps = 5;  // N_D
  int batch_size = 16;
  int iterations = 2000;
  double lr = 1e-3;
  Eigen::VectorXd loss_weights;  // empty: default_loss_weights
  std::optional<SampleRanges> ranges;
  double exclusion = 0.02;
  int max_retries = 100;
  /// > 0: draw batches from a fixed pool of this many samples; 0: fresh samples every batch.
  int pool_size = 0;
  int validate_every = 100;
  /// Fixed validation lap start (sigma, d, phi, v); sized for the kinematic model by default.
  std::array<double, 4> validation_start{0.0, 0.0, 0.0, 1.0};
  int validation_states = 0;  // > 0: also log RMSE on this many held-out samples
  int validation_max_steps = 2000;
  enum class Select { lap_time, rmse, last };
  Select select = Select::lap_time;
  bool use_context = true;
  std::uint64_t seed = 0;
  int threads = 1;
  std::vector<int> snapshot_iterations;  // checkpoints written at these iterations
  std::filesystem::path output_dir;      // empty: no files
  NetConfig net;                         // architecture; shapes filled in by train()
  SolverOptions solver;
  MpccSettings mpcc;

  void validate() const;
};

struct TrainLogEntry {
  int iteration = 0;
  double loss = 0.0;   // mean batch loss before the update
  int used = 0;
  int skipped_nonconverged = 0;
  int skipped_nonfinite = 0;
  int rejected_samples = 0;
  double grad_norm = 0.0;
  bool validated = false;
  double val_lap_time = std::numeric_limits<double>::quiet_NaN();
  std::string val_status;
  double val_rmse = std::numeric_limits<double>::quiet_NaN();

  std::string to_json() const;
};

struct TrainResult {
  CostNet best;
  CostNet final_net;
  int best_iteration = 0;
  double best_lap_time = std::numeric_limits<double>::quiet_NaN();
  std::vector<TrainLogEntry> log;
};

/// Shared context for training and evaluation.
struct LearningSetup {
  std::shared_ptr<const VehicleModel> model;
  std::shared_ptr<const TrackModel> track;
  CostVector manual;
};

/// Learns the cost correction by differentiating the short-horizon solve. Throws
/// std::invalid_argument when the reference MPC_{N_L} cannot complete a lap.
TrainResult train(const TrainConfig& cfg, const LearningSetup& setup,
                  const std::function<void(const TrainLogEntry&)>& on_log = {});

/// Fixed set of feasible samples; sample i is drawn from its own seed stream.
std::vector<SampleState> draw_samples(const Sampler& sampler, int count, std::uint64_t seed,
                                      int threads = 1);

/// Schedules evaluated per sample state.
using SchedulePolicy = std::function<CostSchedule(const SampleState&)>;

struct ImitationScore {
  double rmse = 0.0;     // sqrt of the mean loss over scored samples
  double mean_loss = 0.0;
  int scored = 0;
  int skipped = 0;       // short solve failed
};

/// Imitation error of a short-horizon policy against the samples' long-horizon references.
ImitationScore score_imitation(const LearningSetup& setup, int short_horizon,
                               const std::vector<SampleState>& samples,
                               const SchedulePolicy& policy, int loss_steps,
                               const Eigen::VectorXd& weights, const SolverOptions& solver = {},
                               const MpccSettings& mpcc = {});

/// Clone error: first-input prediction against the reference's first input.
ImitationScore score_clone(const CostNet& clone, const LearningSetup& setup, int long_horizon,
                           const std::vector<SampleState>& samples, int loss_steps,
                           const Eigen::VectorXd& weights);

struct CloneConfig {
  int long_horizon = 18;
  int iterations = 2000;
  int batch_size = 32;
  double lr = 1e-3;
  int pool_size = 2000;
  std::optional<SampleRanges> ranges;
  double exclusion = 0.02;
  bool use_context = true;
  std::uint64_t seed = 0;
  int threads = 1;
  NetConfig net;
  SolverOptions solver;
  MpccSettings mpcc;
};

struct CloneResult {
  CostNet net;
  double final_mse = 0.0;
  std::vector<double> mse_log;
};

/// Regresses the long-horizon first input from (state, context); output bounded by the
/// input box.
CloneResult train_empc_baseline(const CloneConfig& cfg, const LearningSetup& setup);

struct ConstantDeltaResult {
  Eigen::VectorXd dq, dp;
  double loss = 0.0;         // mean imitation loss of the best candidate
  double manual_loss = 0.0;  // mean imitation loss of the zero candidate
  int evaluated = 0;
};

/// Random search over one correction applied to every stage. Candidate 0 is the zero
/// correction, so the result is never worse than the manual cost on `samples`.
ConstantDeltaResult search_constant_delta(const LearningSetup& setup, int short_horizon,
                                          const std::vector<SampleState>& samples, int budget,
                                          int loss_steps, const Eigen::VectorXd& weights,
                                          std::uint64_t seed, const SolverOptions& solver = {},
                                          const MpccSettings& mpcc = {});

CostSchedule constant_delta_schedule(const CostVector& manual, int horizon,
                                     const ConstantDeltaResult& delta);

/// Sample Pearson correlation; NaN when either series is constant.
double pearson(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace zipmpc
