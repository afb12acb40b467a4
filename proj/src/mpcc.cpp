#include "zipmpc/mpcc.hpp"

namespace zipmpc {

MpccDynamics::MpccDynamics(std::shared_ptr<const VehicleModel> model,
                           std::shared_ptr<const TrackModel> track, bool analytic_jacobian)
    : model_(std::move(model)), track_(std::move(track)), analytic_(analytic_jacobian) {
  if (!model_ || !track_) throw std::invalid_argument("MpccDynamics needs a model and a track");
}

Eigen::VectorXd MpccDynamics::step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
  const int nv = vehicle_dim();
  const Eigen::VectorXd xv = x.head(nv);
  Eigen::VectorXd out(nv + 2);
  out.head(nv) = model_->step(xv, u, track_->curvature(x[0]));
  out[nv] = x[nv];
  out[nv + 1] = x[nv + 1] + (out[0] - x[0]);
  return out;
}

void MpccDynamics::linearize(const Eigen::VectorXd& x, const Eigen::VectorXd& u,
                             Eigen::MatrixXd& A, Eigen::MatrixXd& B) const {
  const int nv = vehicle_dim();
  const int m = input_dim();
  Eigen::MatrixXd Av, Bv;
  const TrackModel& tr = *track_;
  zipmpc::linearize(*model_, x.head(nv), u, [&tr](double s) { return tr.curvature(s); }, Av, Bv,
                    analytic_);
  A.setZero(nv + 2, nv + 2);
  B.setZero(nv + 2, m);
  A.topLeftCorner(nv, nv) = Av;
  B.topRows(nv) = Bv;
  A(nv, nv) = 1.0;
  // sigma_delta' = sigma_delta + sigma' - sigma
  A.row(nv + 1).head(nv) = Av.row(0);
  A(nv + 1, 0) -= 1.0;
  A(nv + 1, nv + 1) = 1.0;
  B.row(nv + 1) = Bv.row(0);
}

Eigen::VectorXd augment_state(const Eigen::VectorXd& vehicle_state) {
  const auto nv = vehicle_state.size();
  Eigen::VectorXd x(nv + 2);
  x.head(nv) = vehicle_state;
  x[nv] = vehicle_state[0];
  x[nv + 1] = 0.0;
  return x;
}

std::vector<std::string> cost_slot_names(ModelKind kind) {
  if (kind == ModelKind::kinematic)
    return {"sigma", "d", "phi", "v", "sigma_0", "sigma_delta", "a", "delta"};
  return {"sigma", "d", "phi", "r", "v_x", "v_y", "sigma_0", "sigma_delta", "tau", "delta"};
}

CostVector manual_cost(ModelKind kind) {
  CostVector c;
  if (kind == ModelKind::kinematic) {
    c.q.resize(8);
    c.p.resize(8);
    c.q << 0.0, 3.0, 1.0, 0.01, 0.01, 0.01, 0.01, 1.0;
    c.p << 0.0, 0.0, 0.0, 0.0, 0.0, -8.0, 0.0, 0.0;
  } else if (kind == ModelKind::pacejka_sim) {
    c.q.resize(10);
    c.p.resize(10);
    c.q << 0.0, 50.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1;
    c.p << 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -8.0, 0.0, 0.0;
  } else {
    return hardware_manual_cost(1);
  }
  return c;
}

CostVector hardware_manual_cost(int horizon) {
  if (horizon < 1) throw std::invalid_argument("horizon must be >= 1");
  CostVector c;
  c.q.resize(10);
  c.p.resize(10);
  c.q << 0.0, 500.0, 5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 100.0;
  c.p << 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -40.0, 0.0, 0.0;
  c.q /= horizon;
  c.p /= horizon;
  return c;
}

MpcProblem make_mpcc_problem(std::shared_ptr<const VehicleModel> model,
                             std::shared_ptr<const TrackModel> track, int horizon,
                             CostSchedule cost, const MpccSettings& settings) {
  if (!(settings.tighten_factor > 0.0 && settings.tighten_factor < 1.0))
    throw std::invalid_argument("tighten_factor must lie in (0, 1)");
  auto dyn = std::make_shared<MpccDynamics>(model, track, settings.analytic_jacobian);
  const auto& p = model->params();
  MpcProblem pb;
  pb.horizon = horizon;
  pb.cost = std::move(cost);
  pb.u_lower = model->input_lower();
  pb.u_upper = model->input_upper();
  pb.penalty_weight = settings.penalty_weight;
  const double w_tight = settings.tighten_factor * track->half_width();
  pb.soft_bounds.push_back({VehicleModel::lateral_index(), -w_tight, w_tight});
  pb.soft_bounds.push_back(
      {model->speed_index(), -std::numeric_limits<double>::infinity(), p.v_max});
  const int n = dyn->state_dim(), m = dyn->input_dim();
  pb.cost_source.resize(static_cast<std::size_t>(n + m));
  for (int j = 0; j < n + m; ++j) pb.cost_source[static_cast<std::size_t>(j)] = j;
  pb.cost_source[0] = dyn->sigma_delta_index();
  pb.dynamics = std::move(dyn);
  return pb;
}

}  // namespace zipmpc
