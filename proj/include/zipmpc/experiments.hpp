#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "zipmpc/closed_loop.hpp"
#include "zipmpc/config.hpp"
#include "zipmpc/costnet.hpp"
#include "zipmpc/zipmpc.hpp"

namespace zipmpc {

/// Missing or inconsistent run artifacts (checkpoints, run directories).
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// `start` plus Gaussian noise on (d, phi, v), one state per repetition. Repetition r uses
/// its own seed stream, so a grid of horizons sees the same initial states.
std::vector<Eigen::VectorXd> noisy_starts(const VehicleModel& model,
                                          const std::array<double, 4>& start, double noise,
                                          int repetitions, std::uint64_t seed);

struct LapStats {
  std::string track;
  std::string method;
  int horizon = 0;
  int runs = 0;
  int completed = 0;
  double mean_lap_time = 0.0;  // over completed runs
  double std_lap_time = 0.0;
  double mean_step_ms = 0.0;   // over all steps of all runs
  double median_step_ms = 0.0;
  double max_abs_d = 0.0;
  bool inputs_in_bounds = true;
  int nonconverged_steps = 0;
  std::vector<LapResult> laps;

  bool all_completed() const { return completed == runs && runs > 0; }
};

/// Runs one lap per start; `after_run(r)` is called after run r, before the next reset.
LapStats run_laps(Controller& controller, const VehicleModel& plant, const TrackModel& track,
                  const std::vector<Eigen::VectorXd>& starts, int max_steps,
                  const std::string& method, int horizon,
                  const std::function<void(std::size_t)>& after_run = {});

/// Header: track,method,horizon,runs,completed,mean_lap_time,std_lap_time,mean_step_ms,
/// median_step_ms,max_abs_d,inputs_in_bounds. Incomplete cells are "-".
std::string lap_table_csv(const std::vector<LapStats>& rows);

struct Plant {
  std::shared_ptr<const VehicleModel> model;
  std::shared_ptr<const TrackModel> track;
};

Plant make_plant(const RunConfig& cfg, const std::filesystem::path& track_file);

/// Lap time against N with the manual cost on `track_file`.
std::vector<LapStats> horizon_study(const RunConfig& cfg, const std::filesystem::path& track_file);

struct ImitationRow {
  std::string method;
  double rmse = 0.0;
  int scored = 0;
  int skipped = 0;
};

/// Header: method,rmse,scored,skipped.
std::string imitation_table_csv(const std::vector<ImitationRow>& rows);

/// Throws ArtifactError when the network does not fit the configured model and horizons.
void check_checkpoint(const CostNet& net, const RunConfig& cfg, const Plant& plant);

/// RMSE against MPC_{N_L} over the first N_D steps for MPC_{N_S}, the constant-Delta search,
/// the behaviour clone and ZipMPC, on `experiment.validation_states` held-out states.
/// A clone is trained when none is given.
std::vector<ImitationRow> evaluate_imitation(const RunConfig& cfg, const CostNet& net,
                                             const CostNet* clone = nullptr);

struct CompareResult {
  std::vector<LapStats> rows;
  /// Per track: (1 - t(ZipMPC) / t(MPC_{N_L})) * 100 on mean per-step time.
  std::map<std::string, double> time_reduction;
  /// Per track: parameter trace of ZipMPC's first run.
  std::map<std::string, std::vector<ParamTracePoint>> traces;
};

/// MPC_{N_S}, MPC_{N_L} and ZipMPC on the train and test tracks from noisy starts. When
/// `out_dir` is non-empty writes laps.csv, summary.json, run.json, laps/<track>_<method>.csv
/// and traces/<track>.csv.
CompareResult compare_laps(const RunConfig& cfg, const CostNet& net,
                           const std::filesystem::path& out_dir = {});

/// Reads a compare-laps run directory and writes plots/<track>_<method>_xy.csv
/// (t,x,y,heading,d,v) and plots/<track>_pd.csv (sigma,p_d,mean_curvature) plus
/// plots/correlation.csv (track,pearson_r,samples). Returns the files written.
std::vector<std::filesystem::path> export_plot_data(const std::filesystem::path& run_dir);

}  // namespace zipmpc
