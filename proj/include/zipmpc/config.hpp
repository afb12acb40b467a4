#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "zipmpc/costnet.hpp"
#include "zipmpc/dynamics.hpp"
#include "zipmpc/mpcc.hpp"
#include "zipmpc/solver.hpp"
#include "zipmpc/zipmpc.hpp"

namespace zipmpc {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ExperimentSettings {
  std::vector<int> horizons{5, 10, 15, 20, 25};
  int repetitions = 10;
  double noise = 0.01;  // std of the initial-state noise on d, phi, v
  std::uint64_t seed = 0;
  int validation_states = 1000;
  int search_budget = 200;
  int search_states = 100;
  int clone_iterations = 2000;
  std::array<double, 4> start{0.0, 0.0, 0.0, 1.0};  // sigma, d, phi, v
  int max_steps = 2000;
};

/// Everything the command line needs, read from one YAML file with the sections
/// track, model, solver, net, training and experiment.
struct RunConfig {
  std::filesystem::path train_track;
  std::vector<std::filesystem::path> test_tracks;
  double table_spacing = 0.01;

  ModelKind model_kind = ModelKind::kinematic;
  ModelParams params = ModelParams::kinematic_sim();
  CostVector manual;

  SolverOptions solver;
  MpccSettings mpcc;
  NetConfig net;
  TrainConfig training;
  ExperimentSettings experiment;

  /// Defaults for a model, with the bundled train/test tracks under `data_dir`.
  static RunConfig defaults(ModelKind kind, const std::filesystem::path& data_dir);
  void validate() const;
};

/// Parses YAML text; relative paths are resolved against `base_dir`. Unknown keys are errors.
RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir);
/// Throws ConfigError for unreadable files, malformed YAML and invalid values.
RunConfig load_config(const std::filesystem::path& path);

/// Bundled data (tracks): $ZIPMPC_DATA_DIR, else the source tree's data/ directory.
std::filesystem::path default_data_dir();

/// Root directory for run outputs: $ZIPMPC_OUTPUT_ROOT or ./runs.
std::filesystem::path output_root();

}  // namespace zipmpc
