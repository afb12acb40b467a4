// End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.
// Artifacts (checkpoints, lap tables) go to ./acceptance_out.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "zipmpc/closed_loop.hpp"
#include "zipmpc/config.hpp"
#include "zipmpc/diffmpc.hpp"
#include "zipmpc/experiments.hpp"
#include "zipmpc/mpcc.hpp"
#include "zipmpc/solver.hpp"
#include "zipmpc/zipmpc.hpp"

#ifndef ZIPMPC_SOURCE_DIR
#define ZIPMPC_SOURCE_DIR "."
#endif

using namespace zipmpc;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using Clock = std::chrono::steady_clock;
double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

void log(const std::string& s) { std::cerr << "[acceptance] " << s << std::endl; }

const std::filesystem::path kOut = "acceptance_out";

RunConfig base_config(int short_horizon, int long_horizon, int iterations) {
  RunConfig c = RunConfig::defaults(ModelKind::kinematic,
                                    std::filesystem::path(ZIPMPC_SOURCE_DIR) / "data");
  c.net.output_scale = default_cost_output_scale(c.manual);
  auto& t = c.training;
  t.net = c.net;
  t.short_horizon = short_horizon;
  t.long_horizon = long_horizon;
  t.loss_steps = std::min(5, short_horizon);
  t.iterations = iterations;
  t.validate_every = 100;
  t.validation_states = 200;
  t.threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  // Kinematic runs keep the checkpoint with the best validation imitation RMSE; lap-time
  // selection favours networks that drive faster than the long-horizon teacher.
  t.select = TrainConfig::Select::rmse;
  c.experiment.repetitions = 3;
  c.experiment.validation_states = 200;
  c.experiment.search_budget = 200;
  c.experiment.search_states = 100;
  c.experiment.clone_iterations = 300;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------------------------
// 1. Riccati oracle

struct Lti {
  Eigen::MatrixXd A, B;
  Eigen::VectorXd x0;
  MpcProblem pb;
};

Lti random_lti(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dn(1, 6), dm(1, 2), dN(1, 25);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> w(0.05, 3.0);
  const int n = dn(rng), m = dm(rng), N = dN(rng);
  Lti c;
  c.A = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return g(rng); });
  c.A = 1.1 * c.A / std::max(1.0, c.A.operatorNorm());
  c.B = Eigen::MatrixXd::NullaryExpr(n, m, [&] { return g(rng); });
  c.x0 = Eigen::VectorXd::NullaryExpr(n, [&] { return 2.0 * g(rng); });
  c.pb.dynamics = std::make_shared<LinearDynamics>(c.A, c.B);
  c.pb.horizon = N;
  for (int i = 0; i <= N; ++i) {
    c.pb.cost.q.push_back(Eigen::VectorXd::NullaryExpr(n + m, [&] { return w(rng); }));
    c.pb.cost.p.push_back(Eigen::VectorXd::NullaryExpr(n + m, [&] { return g(rng); }));
  }
  c.pb.u_lower = Eigen::VectorXd::Constant(m, -kInf);
  c.pb.u_upper = Eigen::VectorXd::Constant(m, kInf);
  return c;
}

// Stage cost x'Qx + qx'x + u'Ru + qu'u, no cost on x_{N+1}; value V_i(x) = x'Px + s'x.
void riccati(const Lti& c, Eigen::MatrixXd& X, Eigen::MatrixXd& U) {
  const int n = static_cast<int>(c.A.rows()), m = static_cast<int>(c.B.cols());
  const int N = c.pb.horizon;
  std::vector<Eigen::MatrixXd> K(N + 1);
  std::vector<Eigen::VectorXd> k(N + 1);
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  Eigen::VectorXd s = Eigen::VectorXd::Zero(n);
  for (int i = N; i >= 0; --i) {
    const Eigen::VectorXd& q = c.pb.cost.q[i];
    const Eigen::VectorXd& p = c.pb.cost.p[i];
    const Eigen::MatrixXd Qxx = Eigen::MatrixXd(q.head(n).asDiagonal()) + c.A.transpose() * P * c.A;
    const Eigen::MatrixXd Quu = Eigen::MatrixXd(q.tail(m).asDiagonal()) + c.B.transpose() * P * c.B;
    const Eigen::MatrixXd Qux = c.B.transpose() * P * c.A;
    const Eigen::VectorXd qx = p.head(n) + c.A.transpose() * s;
    const Eigen::VectorXd qu = p.tail(m) + c.B.transpose() * s;
    const Eigen::LLT<Eigen::MatrixXd> llt(Quu);
    K[i] = -llt.solve(Qux);
    k[i] = -0.5 * llt.solve(qu);
    P = Qxx + Qux.transpose() * K[i];
    P = 0.5 * (P + P.transpose());
    s = qx + K[i].transpose() * qu;
  }
  X.resize(N + 2, n);
  U.resize(N + 1, m);
  X.row(0) = c.x0.transpose();
  for (int i = 0; i <= N; ++i) {
    const Eigen::VectorXd x = X.row(i).transpose();
    const Eigen::VectorXd u = K[i] * x + k[i];
    U.row(i) = u.transpose();
    X.row(i + 1) = (c.A * x + c.B * u).transpose();
  }
}

Outcome criterion_riccati() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const Lti c = random_lti(rng);
    Eigen::MatrixXd X, U;
    riccati(c, X, U);
    const SolveRecord r = solve(c.pb, c.x0);
    worst = std::max({worst, (r.states - X).cwiseAbs().maxCoeff(),
                      (r.inputs - U).cwiseAbs().maxCoeff()});
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-8 && secs < 10.0,
          "max deviation " + fmt("%.2e", worst) + " over 20 problems, " + fmt("%.2f", secs) + " s"};
}

// ---------------------------------------------------------------------------------------------
// 2. Gradient fidelity

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> w(0.2, 2.0);
  double lqr_worst = 0.0;
  for (int t = 0; t < 20; ++t) {
    const int n = 2 + t % 5, m = 1 + t % 2, N = 3 + t % 6;
    Eigen::MatrixXd A = Eigen::MatrixXd::NullaryExpr(n, n, [&] { return g(rng); });
    A = 0.9 * A / std::max(1.0, A.operatorNorm());
    const Eigen::MatrixXd B = Eigen::MatrixXd::NullaryExpr(n, m, [&] { return g(rng); });
    const Eigen::VectorXd x0 = Eigen::VectorXd::NullaryExpr(n, [&] { return g(rng); });
    MpcProblem pb;
    pb.dynamics = std::make_shared<LinearDynamics>(A, B);
    pb.horizon = N;
    for (int i = 0; i <= N; ++i) {
      pb.cost.q.push_back(Eigen::VectorXd::NullaryExpr(n + m, [&] { return w(rng); }));
      pb.cost.p.push_back(Eigen::VectorXd::NullaryExpr(n + m, [&] { return 0.3 * g(rng); }));
    }
    pb.u_lower = Eigen::VectorXd::Constant(m, -kInf);
    pb.u_upper = Eigen::VectorXd::Constant(m, kInf);
    LossSpec loss;
    loss.kind = LossSpec::Kind::input_norm;
    GradcheckOptions o;
    o.seed = static_cast<std::uint64_t>(t);
    lqr_worst = std::max(lqr_worst, gradcheck(pb, x0, loss, o).max_rel_err);
  }

  const auto track = std::make_shared<const TrackModel>(
      TrackModel::load(std::filesystem::path(ZIPMPC_SOURCE_DIR) / "data/tracks/train.track"));
  const auto model = std::make_shared<const KinematicBicycle>();
  const CostVector manual = manual_cost(ModelKind::kinematic);
  const double wt = 0.85 * track->half_width();
  std::uniform_real_distribution<double> us(0.0, track->length()), ud(-wt, wt), uphi(-0.2, 0.2),
      uv(0.6, 1.6), edge(0.8, 1.0), outward(0.05, 0.3);
  std::bernoulli_distribution side(0.5);
  double mpcc_worst = 0.0;
  int penalised = 0;
  for (int t = 0; t < 20; ++t) {
    const int N = 4 + t % 5;
    CostSchedule s = expand(manual, N);
    s.clamp_q(SolverOptions{}.q_min);
    const MpcProblem pb = make_mpcc_problem(model, track, N, s);
    // Odd instances start near the tightened edge heading outwards, so the soft bound is active.
    double d = ud(rng), phi = uphi(rng);
    if (t % 2 == 1) {
      const double sg = side(rng) ? 1.0 : -1.0;
      d = sg * edge(rng) * wt;
      phi = sg * outward(rng);
    }
    const Eigen::VectorXd x0 =
        augment_state(make_vehicle_state(ModelKind::kinematic, us(rng), d, phi, uv(rng)));
    LossSpec loss;
    loss.kind = LossSpec::Kind::reference_mse;
    GradcheckOptions o;
    o.seed = static_cast<std::uint64_t>(100 + t);
    const GradcheckReport rep = gradcheck(pb, x0, loss, o);
    mpcc_worst = std::max(mpcc_worst, rep.max_rel_err);
    if (solve(pb, x0).soft_violation > 0.0) ++penalised;
  }
  const double secs = seconds_since(t0);
  return {lqr_worst < 1e-4 && mpcc_worst < 1e-2 && secs < 120.0,
          "LQR max rel " + fmt("%.2e", lqr_worst) + ", MPCC max rel " + fmt("%.2e", mpcc_worst) +
              " (" + std::to_string(penalised) + "/20 with active penalties), " +
              fmt("%.1f", secs) + " s"};
}

// ---------------------------------------------------------------------------------------------
// Constraint bookkeeping for criterion 10

struct ConstraintLog {
  double worst_margin = -kInf;  // max over rows of max|d| - (omega_tight + 0.01)
  bool inputs_ok = true;
  int rows = 0;

  void add(const RunConfig& cfg, const std::vector<LapStats>& stats) {
    std::map<std::string, double> widths;
    for (const auto& f : [&] {
           auto v = cfg.test_tracks;
           v.push_back(cfg.train_track);
           return v;
         }())
      widths[TrackModel::load(f).name()] = TrackModel::load(f).half_width();
    for (const auto& r : stats) {
      const double bound = cfg.mpcc.tighten_factor * widths.at(r.track) + 0.01;
      for (const auto& lap : r.laps) {
        if (!lap.completed()) continue;
        worst_margin = std::max(worst_margin, lap.max_abs_d - bound);
        inputs_ok = inputs_ok && lap.inputs_in_bounds;
        ++rows;
      }
    }
  }
};

// ---------------------------------------------------------------------------------------------
// 3. Horizon monotonicity

Outcome criterion_horizons(ConstraintLog& cl) {
  const auto t0 = Clock::now();
  RunConfig cfg = base_config(5, 18, 0);
  cfg.experiment.horizons = {5, 10, 15, 25};
  const auto rows = horizon_study(cfg, cfg.train_track);
  write_text_atomic(kOut / "horizon_study.csv", lap_table_csv(rows));
  cl.add(cfg, rows);
  const double secs = seconds_since(t0);
  bool ok = secs < 300.0;
  std::ostringstream d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    ok = ok && rows[i].all_completed();
    if (i > 0) ok = ok && rows[i].mean_lap_time < rows[i - 1].mean_lap_time;
    d << "N=" << rows[i].horizon << ' ' << fmt("%.3f", rows[i].mean_lap_time) << " s, ";
  }
  const double gain =
      rows.size() >= 2 ? 1.0 - rows.back().mean_lap_time / rows.front().mean_lap_time : 0.0;
  ok = ok && gain >= 0.05;
  d << "improvement " << fmt("%.1f", 100.0 * gain) << "%, " << fmt("%.0f", secs) << " s";
  return {ok, d.str()};
}

// ---------------------------------------------------------------------------------------------
// Trained settings shared by criteria 4, 5, 6, 8

struct Trained {
  RunConfig cfg;
  TrainResult result;
  double train_seconds = 0.0;
  CompareResult compare;
};

Trained train_setting(int short_horizon, int long_horizon, int iterations) {
  Trained t{base_config(short_horizon, long_horizon, iterations), {}, 0.0, {}};
  const std::string tag = std::to_string(short_horizon) + "_" + std::to_string(long_horizon);
  t.cfg.training.output_dir = kOut / ("train_" + tag);
  const Plant plant = make_plant(t.cfg, t.cfg.train_track);
  log("training N_S=" + std::to_string(short_horizon) + " N_L=" + std::to_string(long_horizon));
  const auto t0 = Clock::now();
  t.result = train(t.cfg.training, {plant.model, plant.track, t.cfg.manual},
                   [](const TrainLogEntry& e) {
                     if (e.validated) log(e.to_json());
                   });
  t.train_seconds = seconds_since(t0);
  log("comparing laps " + tag);
  t.compare = compare_laps(t.cfg, t.result.best, kOut / ("compare_" + tag));
  return t;
}

const LapStats& row(const CompareResult& c, const std::string& track, const std::string& method) {
  for (const auto& r : c.rows)
    if (r.track == track && r.method == method) return r;
  throw std::runtime_error("missing row " + track + "/" + method);
}

std::vector<std::string> track_names(const CompareResult& c) {
  std::vector<std::string> names;
  for (const auto& r : c.rows)
    if (std::find(names.begin(), names.end(), r.track) == names.end()) names.push_back(r.track);
  return names;
}

// 4. Imitation ordering
Outcome criterion_imitation(const Trained& t) {
  const auto rows = evaluate_imitation(t.cfg, t.result.best);
  write_text_atomic(kOut / "imitation.csv", imitation_table_csv(rows));
  std::map<std::string, double> rmse;
  for (const auto& r : rows) rmse[r.method] = r.rmse;
  const double zip = rmse.at("zipmpc"), shortc = rmse.at("mpc_short"), cd = rmse.at("constant_delta");
  const bool ok = t.cfg.training.iterations >= 2000 && t.cfg.training.validation_states >= 200 &&
                  zip <= 0.7 * shortc && zip <= cd && t.train_seconds <= 3600.0;
  return {ok, "RMSE zipmpc " + fmt("%.4f", zip) + ", mpc_short " + fmt("%.4f", shortc) +
                  " (ratio " + fmt("%.2f", zip / shortc) + "), constant_delta " + fmt("%.4f", cd) +
                  ", empc_clone " + fmt("%.4f", rmse.at("empc_clone")) + ", training " +
                  fmt("%.0f", t.train_seconds) + " s"};
}

// 5. Lap-time ordering
Outcome criterion_lap_order(const std::vector<const Trained*>& settings, ConstraintLog& cl) {
  bool ok = true;
  std::ostringstream d;
  for (const Trained* t : settings) {
    cl.add(t->cfg, t->compare.rows);
    const bool check_gap = t->cfg.training.short_horizon == 10 && t->cfg.training.long_horizon == 25;
    d << t->cfg.training.short_horizon << '/' << t->cfg.training.long_horizon << ":";
    for (const auto& name : track_names(t->compare)) {
      const auto& s = row(t->compare, name, "mpc_short");
      const auto& l = row(t->compare, name, "mpc_long");
      const auto& z = row(t->compare, name, "zipmpc");
      const bool complete = s.all_completed() && l.all_completed() && z.all_completed();
      const double gap = z.mean_lap_time / l.mean_lap_time - 1.0;
      ok = ok && complete && l.mean_lap_time <= z.mean_lap_time &&
           z.mean_lap_time <= s.mean_lap_time && (!check_gap || gap <= 0.05);
      d << ' ' << name << ' ' << fmt("%.3f", l.mean_lap_time) << "<=" << fmt("%.3f", z.mean_lap_time)
        << "<=" << fmt("%.3f", s.mean_lap_time) << " (+" << fmt("%.1f", 100.0 * gap) << "%)";
    }
    d << ';';
  }
  return {ok, d.str()};
}

// 6. Execution time. The same deterministic lap is repeated with the three controllers
// interleaved and the fastest repetition's mean step time is kept, which removes most of the
// scheduler noise on a shared machine; the solver work per repetition is identical.
struct StepTimes {
  double shortc = kInf, longc = kInf, zip = kInf;
};

StepTimes benchmark_steps(const Trained& t, const std::filesystem::path& track_file, int rounds) {
  const RunConfig& cfg = t.cfg;
  const Plant plant = make_plant(cfg, track_file);
  const auto net = std::make_shared<const CostNet>(t.result.best);
  const int NS = cfg.training.short_horizon, NL = cfg.training.long_horizon;
  MpcController shortc(plant.model, plant.track, NS, expand(cfg.manual, NS), cfg.solver, cfg.mpcc);
  MpcController longc(plant.model, plant.track, NL, expand(cfg.manual, NL), cfg.solver, cfg.mpcc);
  ZipMpcController zip(plant.model, plant.track, cfg.manual, net, NL, cfg.solver, cfg.mpcc);
  const auto& st = cfg.experiment.start;
  const Eigen::VectorXd x0 = make_vehicle_state(cfg.model_kind, st[0], st[1], st[2], st[3]);
  LapOptions opt;
  opt.max_steps = cfg.experiment.max_steps;
  StepTimes best;
  for (int r = 0; r < rounds; ++r) {
    best.shortc = std::min(best.shortc, run_lap(shortc, *plant.model, *plant.track, x0, opt).mean_step_ms());
    best.longc = std::min(best.longc, run_lap(longc, *plant.model, *plant.track, x0, opt).mean_step_ms());
    best.zip = std::min(best.zip, run_lap(zip, *plant.model, *plant.track, x0, opt).mean_step_ms());
  }
  return best;
}

Outcome criterion_timing(const std::vector<const Trained*>& settings) {
  bool ok = true;
  std::ostringstream d;
  for (const Trained* t : settings) {
    d << t->cfg.training.short_horizon << '/' << t->cfg.training.long_horizon << ":";
    auto files = t->cfg.test_tracks;
    files.insert(files.begin(), t->cfg.train_track);
    for (const auto& f : files) {
      const StepTimes st = benchmark_steps(*t, f, 7);
      const double red = 100.0 * (1.0 - st.zip / st.longc);
      ok = ok && st.zip <= 1.1 * st.shortc && red >= 40.0;
      d << ' ' << f.stem().string() << ' ' << fmt("%.3f", st.zip) << '/' << fmt("%.3f", st.shortc)
        << '/' << fmt("%.3f", st.longc) << " ms (zip/short " << fmt("%.2f", st.zip / st.shortc)
        << ", reduction " << fmt("%.0f", red) << "%)";
    }
    d << ';';
  }
  return {ok, d.str()};
}

// 7. Context ablation
Outcome criterion_context() {
  const auto t0 = Clock::now();
  double final_rmse[2] = {0.0, 0.0};
  int final_iter[2] = {0, 0};
  for (int with_context = 0; with_context < 2; ++with_context) {
    RunConfig cfg = base_config(5, 20, 1000);
    cfg.training.use_context = with_context == 1;
    cfg.training.select = TrainConfig::Select::last;
    const Plant plant = make_plant(cfg, cfg.train_track);
    log(std::string("context ablation, use_context=") + (with_context ? "true" : "false"));
    const TrainResult r = train(cfg.training, {plant.model, plant.track, cfg.manual});
    for (const auto& e : r.log)
      if (e.validated && std::isfinite(e.val_rmse)) {
        final_rmse[with_context] = e.val_rmse;
        final_iter[with_context] = e.iteration;
      }
  }
  const bool ok = final_iter[0] == final_iter[1] && final_iter[0] > 0 &&
                  final_rmse[1] < final_rmse[0];
  return {ok, "validation RMSE at iteration " + std::to_string(final_iter[1]) + ": with context " +
                  fmt("%.4f", final_rmse[1]) + ", without " + fmt("%.4f", final_rmse[0]) + ", " +
                  fmt("%.0f", seconds_since(t0)) + " s"};
}

// 8. Learned p_d against curvature
Outcome criterion_correlation(const std::vector<const Trained*>& settings) {
  bool ok = true;
  std::ostringstream d;
  for (const Trained* t : settings) {
    d << t->cfg.training.short_horizon << '/' << t->cfg.training.long_horizon << ":";
    for (const auto& [name, trace] : t->compare.traces) {
      std::vector<double> pd, kappa;
      for (const auto& p : trace) {
        pd.push_back(p.p_d);
        kappa.push_back(p.mean_curvature);
      }
      const double r = pearson(pd, kappa);
      ok = ok && std::isfinite(r) && std::abs(r) > 0.5;
      d << ' ' << name << " r=" << fmt("%.2f", r);
    }
    d << ';';
  }
  return {ok, d.str()};
}

// 9. Zero-head identity
Outcome criterion_identity() {
  const RunConfig cfg = base_config(5, 18, 0);
  const Plant plant = make_plant(cfg, cfg.train_track);
  const NetConfig nc =
      make_cost_net_config(*plant.model, *plant.track, 5, 18, cfg.manual, cfg.net);
  auto net = std::make_shared<const CostNet>(nc, 7);
  ZipMpcController zip(plant.model, plant.track, cfg.manual, net, 18, cfg.solver, cfg.mpcc);
  MpcController ref(plant.model, plant.track, 5, expand(cfg.manual, 5), cfg.solver, cfg.mpcc);
  const Eigen::VectorXd x0 = make_vehicle_state(ModelKind::kinematic, 0.0, 0.0, 0.0, 1.0);
  const LapResult a = run_lap(zip, *plant.model, *plant.track, x0);
  const LapResult b = run_lap(ref, *plant.model, *plant.track, x0);
  const bool same = a.states.rows() == b.states.rows() && a.states == b.states &&
                    a.inputs == b.inputs;
  return {a.completed() && same, std::to_string(a.steps()) + " steps, status " + to_string(a.status) +
                                     (same ? ", trajectories identical" : ", trajectories differ")};
}

}  // namespace

int main() {
  std::filesystem::create_directories(kOut);
  std::vector<std::pair<int, Outcome>> results;
  auto record = [&](int id, const Outcome& o) {
    results.emplace_back(id, o);
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail
              << std::endl;
  };

  ConstraintLog constraints;
  record(1, criterion_riccati());
  record(2, criterion_gradients());
  record(3, criterion_horizons(constraints));

  const Trained short_setting = train_setting(5, 18, 2000);
  record(4, criterion_imitation(short_setting));
  const Trained long_setting = train_setting(10, 25, 2000);
  const std::vector<const Trained*> both{&short_setting, &long_setting};
  record(5, criterion_lap_order(both, constraints));
  record(6, criterion_timing(both));
  record(7, criterion_context());
  record(8, criterion_correlation(both));
  record(9, criterion_identity());
  record(10, {constraints.rows > 0 && constraints.worst_margin <= 0.0 && constraints.inputs_ok,
              std::to_string(constraints.rows) + " completed runs, worst max|d| margin " +
                  fmt("%+.4f", constraints.worst_margin) + " m, inputs " +
                  (constraints.inputs_ok ? "within bounds" : "out of bounds")});

  std::sort(results.begin(), results.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  const auto failed = std::count_if(results.begin(), results.end(),
                                    [](const auto& r) { return !r.second.pass; });
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed")
            << std::endl;
  return failed == 0 ? 0 : 1;
}
