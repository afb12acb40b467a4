#include "zipmpc/zipmpc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <thread>

namespace zipmpc {

namespace {

constexpr std::uint64_t kPoolStream = 0x706f6f6cULL;
constexpr std::uint64_t kValStream = 0x76616c73ULL;
constexpr std::uint64_t kBatchStream = 0x62617463ULL;
constexpr std::uint64_t kDropStream = 0x64726f70ULL;

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t tag, std::uint64_t a,
                           std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(a),
                    static_cast<std::uint32_t>(a >> 32), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

// Runs body(i) for i in [0, count); results must be written to per-index slots.
template <class F>
void parallel_for(int count, int threads, F&& body) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (int i = t; i < count; i += threads) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<double> context_values(const CostNet& net, const TrackModel& track,
                                   const VehicleModel& model, int long_horizon, double sigma) {
  const auto& c = net.config();
  if (!c.use_context || c.context_len == 0) return {};
  return track.context(sigma, long_horizon, model.params().T, model.params().v_max).values;
}

double json_number(double v) { return std::isfinite(v) ? v : 0.0; }

}  // namespace

CostSchedule expand(const CostVector& manual, int horizon) {
  return CostSchedule::expand(manual.q, manual.p, horizon);
}

Eigen::Vector3d state_features(const VehicleModel& model, const Eigen::VectorXd& x) {
  return {x[model.speed_index()], x[VehicleModel::lateral_index()],
          x[VehicleModel::heading_index()]};
}

SampleRanges SampleRanges::defaults(const VehicleModel& model, double omega_tight) {
  SampleRanges r;
  r.d_lo = -0.8 * omega_tight;
  r.d_hi = 0.8 * omega_tight;
  r.v_hi = model.params().v_max;
  return r;
}

Sampler::Sampler(std::shared_ptr<const VehicleModel> model, std::shared_ptr<const TrackModel> track,
                 int long_horizon, CostVector manual, SampleRanges ranges, SolverOptions solver,
                 MpccSettings settings, double exclusion, int max_retries)
    : model_(std::move(model)), track_(std::move(track)), ranges_(ranges), solver_(solver),
      exclusion_(exclusion), max_retries_(max_retries) {
  omega_tight_ = settings.tighten_factor * track_->half_width();
  problem_ = make_mpcc_problem(model_, track_, long_horizon,
                               expand(manual, long_horizon).clamp_q(solver_.q_min), settings);
  problem_.validate(solver_.q_min);
  const double tol = 1e-12;
  if (ranges_.d_lo > ranges_.d_hi || ranges_.phi_lo > ranges_.phi_hi || ranges_.v_lo > ranges_.v_hi)
    throw std::invalid_argument("sampling range with lower bound above upper bound");
  if (ranges_.d_lo < -omega_tight_ - tol || ranges_.d_hi > omega_tight_ + tol)
    throw std::invalid_argument("d sampling range exceeds the tightened half width");
  if (ranges_.v_lo <= 0.0) throw std::invalid_argument("speed sampling range must be positive");
  if (max_retries_ < 1) throw std::invalid_argument("max_retries must be >= 1");
}

SampleState Sampler::evaluate(const Eigen::VectorXd& state) const {
  SampleState s;
  s.state = state;
  const auto& p = model_->params();
  s.context = track_->context(state[0], problem_.horizon, p.T, p.v_max);
  try {
    s.reference = solve(problem_, augment_state(state), std::nullopt, solver_);
    s.feasible = s.reference.converged && s.reference.soft_violation <= exclusion_;
  } catch (const InfeasibleError&) {
    s.feasible = false;
  }
  return s;
}

SampleState Sampler::draw(std::mt19937_64& rng) const {
  auto uni = [&rng](double lo, double hi) {
    if (lo == hi) return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  const double s_lo = ranges_.sigma_lo.value_or(0.0);
  const double s_hi = ranges_.sigma_hi.value_or(track_->length());
  for (int attempt = 0; attempt < max_retries_; ++attempt) {
    const double sigma = uni(s_lo, s_hi);
    const double d = uni(ranges_.d_lo, ranges_.d_hi);
    const double phi = uni(ranges_.phi_lo, ranges_.phi_hi);
    const double v = uni(ranges_.v_lo, ranges_.v_hi);
    SampleState s = evaluate(make_vehicle_state(model_->kind(), sigma, d, phi, v));
    if (s.feasible) {
      s.rejections = attempt;
      return s;
    }
  }
  throw SamplingError("no feasible state after " + std::to_string(max_retries_) +
                      " draws; the sampling region is too aggressive");
}

std::vector<SampleState> draw_samples(const Sampler& sampler, int count, std::uint64_t seed,
                                      int threads) {
  std::vector<SampleState> out(static_cast<std::size_t>(std::max(count, 0)));
  parallel_for(count, threads, [&](int i) {
    auto rng = stream_rng(seed, kPoolStream, static_cast<std::uint64_t>(i));
    out[static_cast<std::size_t>(i)] = sampler.draw(rng);
  });
  return out;
}

Eigen::VectorXd default_loss_weights(ModelKind kind) {
  Eigen::VectorXd w;
  if (kind == ModelKind::kinematic) {
    // sigma, d, phi, v, sigma_0, sigma_delta, a, delta
    w.resize(8);
    w << 0.0, 1.0 / (0.4 * 0.4), 1.0, 1.0 / (1.8 * 1.8), 0.0, 0.0, 1.0 / (2.0 * 2.0),
        1.0 / (0.8 * 0.8);
  } else {
    // sigma, d, phi, r, v_x, v_y, sigma_0, sigma_delta, tau, delta
    w.resize(10);
    w << 0.0, 1.0 / (0.4 * 0.4), 1.0, 1.0 / (8.0 * 8.0), 1.0 / (1.8 * 1.8), 1.0 / (0.5 * 0.5),
        0.0, 0.0, 1.0 / (2.0 * 2.0), 1.0 / (0.8 * 0.8);
  }
  return w;
}

ImitationLoss imitation_loss(const Eigen::MatrixXd& Xs, const Eigen::MatrixXd& Us,
                             const Eigen::MatrixXd& Xl, const Eigen::MatrixXd& Ul, int steps,
                             const Eigen::VectorXd& w) {
  if (steps < 1) throw std::invalid_argument("loss needs at least one step");
  if (Xs.rows() < steps || Us.rows() < steps || Xl.rows() < steps || Ul.rows() < steps)
    throw std::invalid_argument("trajectory shorter than the loss truncation");
  const auto n = Xs.cols(), m = Us.cols();
  if (Xl.cols() != n || Ul.cols() != m || w.size() != n + m)
    throw std::invalid_argument("trajectory or weight dimension mismatch");
  ImitationLoss out;
  out.grad.states = Eigen::MatrixXd::Zero(Xs.rows(), n);
  out.grad.inputs = Eigen::MatrixXd::Zero(Us.rows(), m);
  const double scale = 1.0 / steps;
  for (int i = 0; i < steps; ++i) {
    const Eigen::ArrayXd ex = (Xs.row(i) - Xl.row(i)).transpose().array();
    const Eigen::ArrayXd eu = (Us.row(i) - Ul.row(i)).transpose().array();
    const Eigen::ArrayXd wx = w.head(n).array(), wu = w.tail(m).array();
    out.value += scale * ((wx * ex.square()).sum() + (wu * eu.square()).sum());
    out.grad.states.row(i) = (2.0 * scale * wx * ex).matrix().transpose();
    out.grad.inputs.row(i) = (2.0 * scale * wu * eu).matrix().transpose();
  }
  return out;
}

std::vector<double> default_cost_output_scale(const CostVector& manual) {
  std::vector<double> s;
  for (Eigen::Index j = 0; j < manual.q.size(); ++j) s.push_back(std::abs(manual.q[j]) + 1.0);
  for (Eigen::Index j = 0; j < manual.p.size(); ++j) s.push_back(10.0);
  return s;
}

NetConfig make_cost_net_config(const VehicleModel& model, const TrackModel& track,
                               int short_horizon, int long_horizon, const CostVector& manual,
                               NetConfig base) {
  base.head = NetConfig::Head::cost_schedule;
  base.horizon = short_horizon;
  base.cost_dim = static_cast<int>(manual.q.size());
  base.context_len = base.use_context ? context_length(long_horizon, model.params().T,
                                                       model.params().v_max, track.table_spacing())
                                      : 0;
  if (base.output_scale.size() != static_cast<std::size_t>(2 * base.cost_dim))
    base.output_scale = default_cost_output_scale(manual);
  base.validate();
  return base;
}

CostSchedule learned_schedule(const CostNet& net, const CostVector& manual,
                              const VehicleModel& model, const TrackModel& track,
                              int long_horizon, const Eigen::VectorXd& x) {
  const Eigen::VectorXd out =
      net.forward(state_features(model, x), context_values(net, track, model, long_horizon, x[0]),
                  NetMode::eval);
  CostSchedule s = expand(manual, net.config().horizon);
  const CostSchedule d = net.to_schedule(out);
  for (int i = 0; i < s.stages(); ++i) {
    s.q[static_cast<std::size_t>(i)] += d.q[static_cast<std::size_t>(i)];
    s.p[static_cast<std::size_t>(i)] += d.p[static_cast<std::size_t>(i)];
  }
  return s;
}

ZipMpcController::ZipMpcController(std::shared_ptr<const VehicleModel> model,
                                   std::shared_ptr<const TrackModel> track, CostVector manual,
                                   std::shared_ptr<const CostNet> net, int long_horizon,
                                   SolverOptions options, MpccSettings settings)
    : MpcController(model, track, net->config().horizon, expand(manual, net->config().horizon),
                    options, settings),
      manual_(std::move(manual)), net_(std::move(net)), long_horizon_(long_horizon),
      d_slot_(VehicleModel::lateral_index()) {
  if (net_->config().head != NetConfig::Head::cost_schedule ||
      net_->config().cost_dim != manual_.q.size())
    throw std::invalid_argument("network does not match the controller's cost layout");
  set_name("zipmpc");
}

void ZipMpcController::reset() {
  MpcController::reset();
  trace_.clear();
}

CostSchedule ZipMpcController::schedule(const Eigen::VectorXd& x) {
  CostSchedule s = learned_schedule(*net_, manual_, *model_, *track_, long_horizon_, x);
  const auto& p = model_->params();
  const ContextWindow w = track_->context(x[0], long_horizon_, p.T, p.v_max);
  trace_.push_back({x[0], s.p[0][d_slot_], w.mean()});
  return s;
}

CloneController::CloneController(std::shared_ptr<const VehicleModel> model,
                                 std::shared_ptr<const TrackModel> track,
                                 std::shared_ptr<const CostNet> net, int long_horizon)
    : model_(std::move(model)), track_(std::move(track)), net_(std::move(net)),
      long_horizon_(long_horizon) {
  if (net_->config().head != NetConfig::Head::direct ||
      net_->config().output_dim != model_->input_dim())
    throw std::invalid_argument("clone network must output one input vector");
}

Eigen::VectorXd CloneController::control(const Eigen::VectorXd& x) {
  const Eigen::VectorXd u = net_->forward(
      state_features(*model_, x), context_values(*net_, *track_, *model_, long_horizon_, x[0]),
      NetMode::eval);
  return u.cwiseMax(model_->input_lower()).cwiseMin(model_->input_upper());
}

void TrainConfig::validate() const {
  if (!(1 <= loss_steps && loss_steps <= short_horizon && short_horizon < long_horizon))
    throw std::invalid_argument("need 1 <= N_D <= N_S < N_L");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (validate_every < 1) throw std::invalid_argument("validate_every must be >= 1");
  if (pool_size < 0 || validation_states < 0) throw std::invalid_argument("negative sample count");
}

std::string TrainLogEntry::to_json() const {
  nlohmann::json j;
  j["iteration"] = iteration;
  j["loss"] = json_number(loss);
  j["used"] = used;
  j["skipped_nonconverged"] = skipped_nonconverged;
  j["skipped_nonfinite"] = skipped_nonfinite;
  j["rejected_samples"] = rejected_samples;
  j["grad_norm"] = json_number(grad_norm);
  if (validated) {
    j["val_status"] = val_status;
    j["val_lap_time"] = std::isfinite(val_lap_time) ? nlohmann::json(val_lap_time) : nlohmann::json();
    if (std::isfinite(val_rmse)) j["val_rmse"] = val_rmse;
  }
  return j.dump();
}

ImitationScore score_imitation(const LearningSetup& setup, int short_horizon,
                               const std::vector<SampleState>& samples,
                               const SchedulePolicy& policy, int loss_steps,
                               const Eigen::VectorXd& weights, const SolverOptions& solver,
                               const MpccSettings& mpcc) {
  const MpcProblem base = make_mpcc_problem(setup.model, setup.track, short_horizon,
                                            expand(setup.manual, short_horizon), mpcc);
  ImitationScore sc;
  double total = 0.0;
  for (const auto& s : samples) {
    MpcProblem pb = base;
    pb.cost = policy(s);
    pb.cost.clamp_q(solver.q_min);
    try {
      const SolveRecord r = solve(pb, augment_state(s.state), std::nullopt, solver);
      total += imitation_loss(r.states, r.inputs, s.reference.states, s.reference.inputs,
                              loss_steps, weights)
                   .value;
      ++sc.scored;
    } catch (const InfeasibleError&) {
      ++sc.skipped;
    }
  }
  sc.mean_loss = sc.scored > 0 ? total / sc.scored : std::numeric_limits<double>::quiet_NaN();
  sc.rmse = std::sqrt(sc.mean_loss);
  return sc;
}

ImitationScore score_clone(const CostNet& clone, const LearningSetup& setup, int long_horizon,
                           const std::vector<SampleState>& samples, int loss_steps,
                           const Eigen::VectorXd& weights) {
  const MpccDynamics dyn(setup.model, setup.track, false);
  const int n = dyn.state_dim(), m = dyn.input_dim();
  const Eigen::VectorXd lo = setup.model->input_lower(), hi = setup.model->input_upper();
  ImitationScore sc;
  double total = 0.0;
  for (const auto& s : samples) {
    Eigen::MatrixXd X(loss_steps + 1, n), U(loss_steps, m);
    X.row(0) = augment_state(s.state).transpose();
    bool ok = true;
    for (int i = 0; i < loss_steps && ok; ++i) {
      const Eigen::VectorXd x = X.row(i).transpose();
      const Eigen::VectorXd xv = x.head(dyn.vehicle_dim());
      const Eigen::VectorXd u =
          clone
              .forward(state_features(*setup.model, xv),
                       context_values(clone, *setup.track, *setup.model, long_horizon, xv[0]),
                       NetMode::eval)
              .cwiseMax(lo)
              .cwiseMin(hi);
      U.row(i) = u.transpose();
      try {
        X.row(i + 1) = dyn.step(x, u).transpose();
      } catch (const DomainError&) {
        ok = false;
      }
    }
    if (!ok) {
      ++sc.skipped;
      continue;
    }
    total += imitation_loss(X, U, s.reference.states, s.reference.inputs, loss_steps, weights).value;
    ++sc.scored;
  }
  sc.mean_loss = sc.scored > 0 ? total / sc.scored : std::numeric_limits<double>::quiet_NaN();
  sc.rmse = std::sqrt(sc.mean_loss);
  return sc;
}

namespace {

struct SampleGrad {
  enum class Status { used, nonconverged, nonfinite } status = Status::used;
  double loss = 0.0;
  Eigen::VectorXd grad;
};

SampleGrad sample_gradient(const CostNet& net, const MpcProblem& base, const LearningSetup& setup,
                           const SampleState& s, int long_horizon, int loss_steps,
                           const Eigen::VectorXd& weights, const SolverOptions& solver,
                           std::mt19937_64& drop_rng) {
  SampleGrad out;
  NetTape tape;
  const Eigen::VectorXd delta = net.forward(
      state_features(*setup.model, s.state),
      net.config().use_context && net.config().context_len > 0
          ? context_values(net, *setup.track, *setup.model, long_horizon, s.state[0])
          : std::vector<double>{},
      NetMode::train, &tape, &drop_rng);
  MpcProblem pb = base;
  pb.cost = expand(setup.manual, base.horizon);
  const CostSchedule d = net.to_schedule(delta);
  std::vector<Eigen::Array<bool, Eigen::Dynamic, 1>> clamped;
  for (int i = 0; i <= base.horizon; ++i) {
    auto& q = pb.cost.q[static_cast<std::size_t>(i)];
    q += d.q[static_cast<std::size_t>(i)];
    pb.cost.p[static_cast<std::size_t>(i)] += d.p[static_cast<std::size_t>(i)];
    clamped.push_back(q.array() < solver.q_min);
  }
  pb.cost.clamp_q(solver.q_min);

  SolveRecord r;
  try {
    r = solve(pb, augment_state(s.state), std::nullopt, solver);
  } catch (const InfeasibleError&) {
    out.status = SampleGrad::Status::nonconverged;
    return out;
  }
  if (!r.converged) {
    out.status = SampleGrad::Status::nonconverged;
    return out;
  }
  const ImitationLoss L =
      imitation_loss(r.states, r.inputs, s.reference.states, s.reference.inputs, loss_steps, weights);
  BackwardResult bw;
  try {
    bw = backward(pb, r, L.grad);
  } catch (const NotConvergedError&) {
    out.status = SampleGrad::Status::nonconverged;
    return out;
  }
  CostSchedule g;
  g.q = bw.grad.dq;
  g.p = bw.grad.dp;
  for (std::size_t i = 0; i < g.q.size(); ++i)
    g.q[i] = clamped[i].select(Eigen::VectorXd::Zero(g.q[i].size()), g.q[i]);
  out.grad = net.backward(tape, net.from_schedule(g));
  out.loss = L.value;
  if (!std::isfinite(out.loss) || !out.grad.allFinite()) out.status = SampleGrad::Status::nonfinite;
  return out;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const LearningSetup& setup,
                  const std::function<void(const TrainLogEntry&)>& on_log) {
  cfg.validate();
  const auto& model = *setup.model;
  const auto& track = *setup.track;
  const Eigen::VectorXd weights =
      cfg.loss_weights.size() > 0 ? cfg.loss_weights : default_loss_weights(model.kind());
  if (weights.size() != setup.manual.q.size())
    throw std::invalid_argument("loss weights do not match the cost dimension");

  const auto& vs = cfg.validation_start;
  const Eigen::VectorXd x_val = make_vehicle_state(model.kind(), vs[0], vs[1], vs[2], vs[3]);
  LapOptions lap_opt;
  lap_opt.max_steps = cfg.validation_max_steps;
  {
    MpcController ref(setup.model, setup.track, cfg.long_horizon,
                      expand(setup.manual, cfg.long_horizon), cfg.solver, cfg.mpcc);
    const LapResult lap = run_lap(ref, model, track, x_val, lap_opt);
    if (!lap.completed())
      throw std::invalid_argument("reference MPC_{N_L} does not complete a lap (" +
                                  to_string(lap.status) + ": " + lap.message + ")");
  }

  const double omega_t = cfg.mpcc.tighten_factor * track.half_width();
  const Sampler sampler(setup.model, setup.track, cfg.long_horizon, setup.manual,
                        cfg.ranges.value_or(SampleRanges::defaults(model, omega_t)), cfg.solver,
                        cfg.mpcc, cfg.exclusion, cfg.max_retries);

  NetConfig ncfg = cfg.net;
  ncfg.use_context = cfg.use_context;
  ncfg = make_cost_net_config(model, track, cfg.short_horizon, cfg.long_horizon, setup.manual, ncfg);
  CostNet net(ncfg, cfg.seed);

  const std::vector<SampleState> pool = draw_samples(sampler, cfg.pool_size, cfg.seed, cfg.threads);
  const std::vector<SampleState> val_set =
      draw_samples(sampler, cfg.validation_states, cfg.seed ^ kValStream, cfg.threads);

  const MpcProblem base = make_mpcc_problem(setup.model, setup.track, cfg.short_horizon,
                                            expand(setup.manual, cfg.short_horizon), cfg.mpcc);

  std::ofstream log_file;
  if (!cfg.output_dir.empty()) {
    std::filesystem::create_directories(cfg.output_dir);
    log_file.open(cfg.output_dir / "train_log.jsonl", std::ios::trunc);
    if (!log_file) throw std::runtime_error("cannot write the training log");
  }

  TrainResult res;
  double best_score = std::numeric_limits<double>::infinity();
  bool have_best = false;

  auto validate_now = [&](TrainLogEntry& e) {
    e.validated = true;
    auto shared = std::make_shared<const CostNet>(net);
    ZipMpcController ctl(setup.model, setup.track, setup.manual, shared, cfg.long_horizon,
                         cfg.solver, cfg.mpcc);
    const LapResult lap = run_lap(ctl, model, track, x_val, lap_opt);
    e.val_status = to_string(lap.status);
    if (lap.completed()) e.val_lap_time = lap.lap_time;
    if (!val_set.empty()) {
      e.val_rmse = score_imitation(
                       setup, cfg.short_horizon, val_set,
                       [&](const SampleState& s) {
                         return learned_schedule(net, setup.manual, model, track,
                                                 cfg.long_horizon, s.state);
                       },
                       cfg.loss_steps, weights, cfg.solver, cfg.mpcc)
                       .rmse;
    }
    double score = std::numeric_limits<double>::infinity();
    if (cfg.select == TrainConfig::Select::lap_time && lap.completed()) score = lap.lap_time;
    if (cfg.select == TrainConfig::Select::rmse && std::isfinite(e.val_rmse)) score = e.val_rmse;
    if (score < best_score) {
      best_score = score;
      res.best = net;
      res.best_iteration = e.iteration;
      res.best_lap_time = e.val_lap_time;
      have_best = true;
      if (!cfg.output_dir.empty()) net.save(cfg.output_dir / "best.ckpt");
    }
  };

  const auto snapshot = [&](int it) {
    if (cfg.output_dir.empty()) return;
    if (std::find(cfg.snapshot_iterations.begin(), cfg.snapshot_iterations.end(), it) ==
        cfg.snapshot_iterations.end())
      return;
    char name[64];
    std::snprintf(name, sizeof name, "snapshot_%06d.ckpt", it);
    net.save(cfg.output_dir / name);
  };

  const int B = cfg.batch_size;
  for (int it = 0; it <= cfg.iterations; ++it) {
    TrainLogEntry e;
    e.iteration = it;
    snapshot(it);
    if (it % cfg.validate_every == 0 || it == cfg.iterations) validate_now(e);
    if (it < cfg.iterations) {
      std::vector<SampleState> fresh;
      std::vector<const SampleState*> batch(static_cast<std::size_t>(B));
      if (cfg.pool_size > 0) {
        auto rng = stream_rng(cfg.seed, kBatchStream, static_cast<std::uint64_t>(it));
        std::uniform_int_distribution<int> pick(0, cfg.pool_size - 1);
        for (int b = 0; b < B; ++b) batch[static_cast<std::size_t>(b)] = &pool[static_cast<std::size_t>(pick(rng))];
      } else {
        fresh.resize(static_cast<std::size_t>(B));
        parallel_for(B, cfg.threads, [&](int b) {
          auto rng = stream_rng(cfg.seed, kBatchStream, static_cast<std::uint64_t>(it),
                                static_cast<std::uint64_t>(b));
          fresh[static_cast<std::size_t>(b)] = sampler.draw(rng);
        });
        for (int b = 0; b < B; ++b) {
          batch[static_cast<std::size_t>(b)] = &fresh[static_cast<std::size_t>(b)];
          e.rejected_samples += fresh[static_cast<std::size_t>(b)].rejections;
        }
      }

      std::vector<SampleGrad> results(static_cast<std::size_t>(B));
      parallel_for(B, cfg.threads, [&](int b) {
        auto drop = stream_rng(cfg.seed, kDropStream, static_cast<std::uint64_t>(it),
                               static_cast<std::uint64_t>(b));
        results[static_cast<std::size_t>(b)] =
            sample_gradient(net, base, setup, *batch[static_cast<std::size_t>(b)], cfg.long_horizon,
                            cfg.loss_steps, weights, cfg.solver, drop);
      });

      Eigen::VectorXd g = Eigen::VectorXd::Zero(net.num_params());
      double loss = 0.0;
      for (const auto& r : results) {
        switch (r.status) {
          case SampleGrad::Status::used:
            g += r.grad;
            loss += r.loss;
            ++e.used;
            break;
          case SampleGrad::Status::nonconverged: ++e.skipped_nonconverged; break;
          case SampleGrad::Status::nonfinite: ++e.skipped_nonfinite; break;
        }
      }
      if (e.used > 0) {
        g /= e.used;
        e.loss = loss / e.used;
        e.grad_norm = g.norm();
        net.adam_step(g, cfg.lr);
      } else {
        e.loss = std::numeric_limits<double>::quiet_NaN();
      }
    }
    if (log_file) log_file << e.to_json() << '\n' << std::flush;
    if (on_log) on_log(e);
    res.log.push_back(std::move(e));
  }

  res.final_net = net;
  if (cfg.select == TrainConfig::Select::last || !have_best) {
    res.best = net;
    res.best_iteration = cfg.iterations;
    res.best_lap_time = res.log.back().val_lap_time;
  }
  if (!cfg.output_dir.empty()) {
    net.save(cfg.output_dir / "final.ckpt");
    if (cfg.select == TrainConfig::Select::last || !have_best) res.best.save(cfg.output_dir / "best.ckpt");
  }
  return res;
}

CloneResult train_empc_baseline(const CloneConfig& cfg, const LearningSetup& setup) {
  if (cfg.iterations < 0 || cfg.batch_size < 1 || cfg.pool_size < 1 || !(cfg.lr > 0.0))
    throw std::invalid_argument("invalid clone training settings");
  const auto& model = *setup.model;
  const auto& track = *setup.track;
  const double omega_t = cfg.mpcc.tighten_factor * track.half_width();
  const Sampler sampler(setup.model, setup.track, cfg.long_horizon, setup.manual,
                        cfg.ranges.value_or(SampleRanges::defaults(model, omega_t)), cfg.solver,
                        cfg.mpcc, cfg.exclusion);
  const std::vector<SampleState> pool = draw_samples(sampler, cfg.pool_size, cfg.seed, cfg.threads);

  NetConfig ncfg = cfg.net;
  ncfg.head = NetConfig::Head::direct;
  ncfg.output_dim = model.input_dim();
  ncfg.use_context = cfg.use_context;
  ncfg.context_len = cfg.use_context ? context_length(cfg.long_horizon, model.params().T,
                                                      model.params().v_max, track.table_spacing())
                                     : 0;
  const Eigen::VectorXd hi = model.input_upper().cwiseAbs().cwiseMax(model.input_lower().cwiseAbs());
  ncfg.output_scale.assign(hi.data(), hi.data() + hi.size());
  ncfg.validate();
  CloneResult res;
  res.net = CostNet(ncfg, cfg.seed);
  const Eigen::VectorXd w = default_loss_weights(model.kind()).tail(model.input_dim());

  for (int it = 0; it < cfg.iterations; ++it) {
    auto rng = stream_rng(cfg.seed, kBatchStream, static_cast<std::uint64_t>(it));
    std::uniform_int_distribution<int> pick(0, cfg.pool_size - 1);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(res.net.num_params());
    double loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const SampleState& s = pool[static_cast<std::size_t>(pick(rng))];
      NetTape tape;
      const Eigen::VectorXd u = res.net.forward(
          state_features(model, s.state),
          context_values(res.net, track, model, cfg.long_horizon, s.state[0]), NetMode::train,
          &tape, &rng);
      const Eigen::VectorXd err = u - s.reference.first_input();
      loss += err.cwiseAbs2().dot(w);
      g += res.net.backward(tape, 2.0 * w.cwiseProduct(err));
    }
    g /= cfg.batch_size;
    res.net.adam_step(g, cfg.lr);
    res.mse_log.push_back(loss / cfg.batch_size);
  }
  double total = 0.0;
  for (const auto& s : pool) {
    const Eigen::VectorXd u = res.net.forward(
        state_features(model, s.state),
        context_values(res.net, track, model, cfg.long_horizon, s.state[0]), NetMode::eval);
    total += (u - s.reference.first_input()).cwiseAbs2().dot(w);
  }
  res.final_mse = total / static_cast<double>(pool.size());
  return res;
}

CostSchedule constant_delta_schedule(const CostVector& manual, int horizon,
                                     const ConstantDeltaResult& delta) {
  CostVector c{manual.q + delta.dq, manual.p + delta.dp};
  return expand(c, horizon);
}

ConstantDeltaResult search_constant_delta(const LearningSetup& setup, int short_horizon,
                                          const std::vector<SampleState>& samples, int budget,
                                          int loss_steps, const Eigen::VectorXd& weights,
                                          std::uint64_t seed, const SolverOptions& solver,
                                          const MpccSettings& mpcc) {
  if (budget < 1) throw std::invalid_argument("search budget must be >= 1");
  const auto dim = setup.manual.q.size();
  const std::vector<double> scale = default_cost_output_scale(setup.manual);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::normal_distribution<double> G(0.0, 1.0);

  auto evaluate = [&](const Eigen::VectorXd& dq, const Eigen::VectorXd& dp) {
    ConstantDeltaResult c{dq, dp, 0.0, 0.0, 0};
    const CostSchedule sched = constant_delta_schedule(setup.manual, short_horizon, c);
    return score_imitation(setup, short_horizon, samples,
                           [&](const SampleState&) { return sched; }, loss_steps, weights,
                           solver, mpcc)
        .mean_loss;
  };

  ConstantDeltaResult best{Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Zero(dim), 0.0, 0.0, 1};
  best.loss = best.manual_loss = evaluate(best.dq, best.dp);
  for (int k = 1; k < budget; ++k) {
    Eigen::VectorXd dq(dim), dp(dim);
    // Alternate global draws over the output box with local moves around the incumbent.
    const bool global = k % 2 == 1;
    for (Eigen::Index j = 0; j < dim; ++j) {
      const double sq = scale[static_cast<std::size_t>(j)];
      const double sp = scale[static_cast<std::size_t>(dim + j)];
      dq[j] = global ? 0.5 * sq * U(rng) : best.dq[j] + 0.1 * sq * G(rng);
      dp[j] = global ? 0.5 * sp * U(rng) : best.dp[j] + 0.1 * sp * G(rng);
      dq[j] = std::clamp(dq[j], -sq, sq);
      dp[j] = std::clamp(dp[j], -sp, sp);
    }
    const double l = evaluate(dq, dp);
    ++best.evaluated;
    if (std::isfinite(l) && l < best.loss) {
      best.dq = dq;
      best.dp = dp;
      best.loss = l;
    }
  }
  return best;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson needs paired series");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

}  // namespace zipmpc
