#include "zipmpc/closed_loop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <sstream>

namespace zipmpc {

MpcController::MpcController(std::shared_ptr<const VehicleModel> model,
                             std::shared_ptr<const TrackModel> track, int horizon,
                             CostSchedule cost, SolverOptions options, MpccSettings settings)
    : model_(std::move(model)), track_(std::move(track)), options_(options) {
  base_cost_ = cost;
  base_cost_.clamp_q(options_.q_min);
  problem_ = make_mpcc_problem(model_, track_, horizon, base_cost_, settings);
  problem_.validate(options_.q_min);
}

void MpcController::reset() {
  warm_.reset();
  last_ = SolveRecord{};
}

CostSchedule MpcController::schedule(const Eigen::VectorXd&) { return base_cost_; }

Eigen::VectorXd MpcController::control(const Eigen::VectorXd& vehicle_state) {
  problem_.cost = schedule(vehicle_state);
  problem_.cost.clamp_q(options_.q_min);
  last_ = solve(problem_, augment_state(vehicle_state), warm_, options_);
  warm_ = shift_inputs(last_.inputs);
  return last_.first_input();
}

std::string to_string(LapStatus s) {
  switch (s) {
    case LapStatus::completed: return "completed";
    case LapStatus::step_budget: return "step-budget";
    case LapStatus::infeasible: return "infeasible";
    case LapStatus::off_track: return "off-track";
  }
  return "unknown";
}

double LapResult::mean_step_ms() const {
  if (step_ms.empty()) return 0.0;
  return std::accumulate(step_ms.begin(), step_ms.end(), 0.0) /
         static_cast<double>(step_ms.size());
}

double LapResult::median_step_ms() const {
  if (step_ms.empty()) return 0.0;
  std::vector<double> v = step_ms;
  const auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  if (v.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(v.begin(), mid);
  return 0.5 * (lo + hi);
}

LapResult run_lap(Controller& controller, const VehicleModel& plant, const TrackModel& track,
                  const Eigen::VectorXd& x0, const LapOptions& options) {
  using clock = std::chrono::steady_clock;
  const int n = plant.state_dim(), m = plant.input_dim();
  const double T = plant.params().T;
  const double L = track.length();
  const Eigen::VectorXd lo = plant.input_lower(), hi = plant.input_upper();

  controller.reset();
  LapResult lap;
  std::vector<Eigen::VectorXd> xs{x0}, us;
  lap.max_abs_d = std::abs(x0[1]);
  const double s0 = x0[0];
  Eigen::VectorXd x = x0;

  for (int k = 0; k < options.max_steps; ++k) {
    Eigen::VectorXd u;
    try {
      const auto t0 = clock::now();
      u = controller.control(x);
      const auto t1 = clock::now();
      lap.step_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    } catch (const InfeasibleError& e) {
      lap.status = LapStatus::infeasible;
      lap.message = e.what();
      break;
    }
    if (!controller.last_converged()) ++lap.nonconverged_steps;
    if (u.size() != m || !u.allFinite()) {
      lap.status = LapStatus::infeasible;
      lap.message = "controller returned an invalid input";
      break;
    }
    if ((u.array() < lo.array()).any() || (u.array() > hi.array()).any()) {
      lap.inputs_in_bounds = false;
      u = u.cwiseMax(lo).cwiseMin(hi);
    }
    Eigen::VectorXd xn;
    try {
      xn = plant.step(x, u, track.curvature(x[0]));
    } catch (const DomainError& e) {
      lap.status = LapStatus::infeasible;
      lap.message = e.what();
      us.push_back(u);
      break;
    }
    us.push_back(u);
    xs.push_back(xn);
    lap.max_abs_d = std::max(lap.max_abs_d, std::abs(xn[1]));
    if (options.stop_off_track && std::abs(xn[1]) > track.half_width()) {
      lap.status = LapStatus::off_track;
      lap.message = "left the track at step " + std::to_string(k + 1);
      break;
    }
    const double prev = x[0] - s0, cur = xn[0] - s0;
    x = xn;
    if (cur >= L) {
      const double frac = cur > prev ? (L - prev) / (cur - prev) : 1.0;
      lap.lap_time = (k + frac) * T;
      lap.status = LapStatus::completed;
      break;
    }
  }
  if (lap.status == LapStatus::step_budget && lap.message.empty())
    lap.message = "step budget of " + std::to_string(options.max_steps) + " exhausted";

  // Keep states and inputs aligned: states has one row more than inputs.
  while (xs.size() > us.size() + 1) xs.pop_back();
  while (us.size() + 1 > xs.size()) us.pop_back();
  lap.states.resize(static_cast<Eigen::Index>(xs.size()), n);
  for (std::size_t i = 0; i < xs.size(); ++i) lap.states.row(static_cast<Eigen::Index>(i)) = xs[i].transpose();
  lap.inputs.resize(static_cast<Eigen::Index>(us.size()), m);
  for (std::size_t i = 0; i < us.size(); ++i) lap.inputs.row(static_cast<Eigen::Index>(i)) = us[i].transpose();
  return lap;
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out << text;
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void write_lap_csv(const LapResult& lap, ModelKind kind, double dt,
                   const std::filesystem::path& path) {
  std::ostringstream os;
  os << std::setprecision(10);
  if (kind == ModelKind::kinematic)
    os << "t,sigma,d,phi,v,a,delta,step_ms\n";
  else
    os << "t,sigma,d,phi,r,v_x,v_y,tau,delta,step_ms\n";
  for (int k = 0; k < lap.steps(); ++k) {
    os << k * dt;
    for (Eigen::Index j = 0; j < lap.states.cols(); ++j) os << ',' << lap.states(k, j);
    for (Eigen::Index j = 0; j < lap.inputs.cols(); ++j) os << ',' << lap.inputs(k, j);
    const double ms = k < static_cast<int>(lap.step_ms.size()) ? lap.step_ms[static_cast<std::size_t>(k)] : 0.0;
    os << ',' << ms << '\n';
  }
  write_text_atomic(path, os.str());
}

std::string lap_summary_json(const LapResult& lap, const std::string& controller) {
  nlohmann::json j;
  j["controller"] = controller;
  j["status"] = to_string(lap.status);
  j["completed"] = lap.completed();
  j["lap_time"] = lap.completed() ? nlohmann::json(lap.lap_time) : nlohmann::json(nullptr);
  j["steps"] = lap.steps();
  j["mean_step_ms"] = lap.mean_step_ms();
  j["median_step_ms"] = lap.median_step_ms();
  j["nonconverged_steps"] = lap.nonconverged_steps;
  j["max_abs_d"] = lap.max_abs_d;
  j["inputs_in_bounds"] = lap.inputs_in_bounds;
  j["message"] = lap.message;
  return j.dump(2);
}

Eigen::VectorXd make_vehicle_state(ModelKind kind, double sigma, double d, double phi, double v) {
  if (kind == ModelKind::kinematic) return Eigen::Vector4d(sigma, d, phi, v);
  Eigen::VectorXd x(6);
  x << sigma, d, phi, 0.0, v, 0.0;
  return x;
}

}  // namespace zipmpc
