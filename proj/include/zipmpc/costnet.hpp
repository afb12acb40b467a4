#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "zipmpc/solver.hpp"

namespace zipmpc {

/// Architecture descriptor. Inputs are three state features (v, d, phi) and an optional
/// curvature series; the head either predicts a cost-correction schedule or a direct output.
struct NetConfig {
  enum class Head { cost_schedule, direct };

  Head head = Head::cost_schedule;
  int horizon = 5;          // N_S (cost_schedule head)
  int cost_dim = 8;         // n + m of the controller
  int output_dim = 2;       // direct head
  int context_len = 0;      // curvature samples
  bool use_context = true;  // false: context-free ablation
  bool use_conv = true;
  int conv_channels = 8;
  int conv_kernel = 5;
  int conv_stride = 2;
  std::vector<int> fc_widths{64, 64};
  double leaky_slope = 0.01;
  double dropout = 0.1;
  bool layer_norm = true;
  /// Multiplies (v, d, phi, kappa) before the first layer.
  std::vector<double> input_scale{1.0 / 1.8, 1.0 / 0.2, 2.0, 1.0 / 3.0};
  /// Output bounds: out = scale * tanh(raw). Length 2*cost_dim (q slots then p slots) for the
  /// schedule head, output_dim for the direct head.
  std::vector<double> output_scale;

  int conv_out_len() const;
  int feature_dim() const;   // width of the first FC input
  int raw_output_dim() const;
  int output_size() const;   // after expansion: 2*cost_dim*(horizon+1) or output_dim
  void validate() const;

  std::string to_json() const;
  static NetConfig from_json(const std::string& text);
};

enum class NetMode { train, eval };

/// Everything backward() needs from one forward pass.
struct NetTape {
  std::uint64_t version = 0;
  Eigen::VectorXd context_in;              // scaled curvature
  Eigen::MatrixXd conv_pre;                // channels x conv_out_len
  Eigen::VectorXd first_in;                // input of the first FC layer
  std::vector<Eigen::VectorXd> fc_in;      // input of each FC layer
  std::vector<Eigen::VectorXd> fc_pre;     // W a + b
  std::vector<Eigen::VectorXd> ln_hat;     // normalised pre-activation
  std::vector<double> ln_inv_std;
  std::vector<Eigen::VectorXd> act_in;     // input of the activation
  std::vector<Eigen::VectorXd> drop_mask;  // already divided by keep probability
  Eigen::VectorXd head_in;
  Eigen::VectorXd expanded;                // before tanh
  bool valid = false;
};

/// Conv + MLP with hand-written reverse mode and Adam.
class CostNet {
 public:
  CostNet() = default;
  /// Kaiming-uniform hidden layers, zero head (the initial output is exactly zero).
  CostNet(NetConfig config, std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  const Eigen::VectorXd& params() const { return theta_; }
  /// Replaces the parameters (bumps the version; tapes become stale).
  void set_params(const Eigen::VectorXd& theta);
  std::uint64_t version() const { return version_; }
  int num_params() const { return static_cast<int>(theta_.size()); }
  long adam_steps() const { return adam_t_; }

  /// Output vector of size config().output_size(). In train mode dropout masks are drawn
  /// from `rng` (required) and recorded in `tape` when given.
  Eigen::VectorXd forward(const Eigen::Vector3d& state_features, const std::vector<double>& context,
                          NetMode mode, NetTape* tape = nullptr,
                          std::mt19937_64* rng = nullptr) const;

  /// Reverse mode through a recorded forward pass: dL/dtheta.
  Eigen::VectorXd backward(const NetTape& tape, const Eigen::VectorXd& upstream) const;

  /// Adam with bias correction. Non-finite gradients are rejected: returns false and leaves
  /// parameters and moments unchanged.
  bool adam_step(const Eigen::VectorXd& grad, double lr, double beta1 = 0.9,
                 double beta2 = 0.999, double eps = 1e-8);

  /// Splits a schedule-head output into per-stage corrections (N_S+1 stages).
  CostSchedule to_schedule(const Eigen::VectorXd& output) const;
  /// Inverse layout of to_schedule for upstream gradients.
  Eigen::VectorXd from_schedule(const CostSchedule& grad) const;

  void save(const std::filesystem::path& path) const;
  static CostNet load(const std::filesystem::path& path);

 private:
  struct Layout {
    Eigen::Index conv_w = 0, conv_b = 0;
    std::vector<Eigen::Index> w, b, ln_g, ln_b;
    std::vector<int> in, out;
    Eigen::Index head_w = 0, head_b = 0;
    int head_in = 0, head_out = 0;
    Eigen::Index total = 0;
  };
  static Layout make_layout(const NetConfig& cfg);

  NetConfig cfg_;
  Layout layout_;
  Eigen::VectorXd theta_;
  Eigen::VectorXd adam_m_, adam_v_;
  long adam_t_ = 0;
  std::uint64_t version_ = 1;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace zipmpc
