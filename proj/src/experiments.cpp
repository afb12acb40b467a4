#include "zipmpc/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>
#include <random>
#include <sstream>

namespace zipmpc {

namespace {

constexpr std::uint64_t kNoiseStream = 0x6e6f6973ULL;
constexpr std::uint64_t kEvalStream = 0x6576616cULL;
constexpr std::uint64_t kSearchStream = 0x73726368ULL;

std::string cell(double v, bool ok) {
  if (!ok) return "-";
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ArtifactError("column '" + name + "' missing");
    return static_cast<int>(it - header.begin());
  }
};

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("missing artifact: " + path.string());
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) throw ArtifactError("empty artifact: " + path.string());
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    for (const auto& c : split_csv_line(line)) row.push_back(std::stod(c));
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string track_label(const std::filesystem::path& p) { return p.stem().string(); }

}  // namespace

std::vector<Eigen::VectorXd> noisy_starts(const VehicleModel& model,
                                          const std::array<double, 4>& start, double noise,
                                          int repetitions, std::uint64_t seed) {
  std::vector<Eigen::VectorXd> out;
  for (int r = 0; r < repetitions; ++r) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(kNoiseStream), static_cast<std::uint32_t>(r)};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> n(0.0, 1.0);
    const double d = start[1] + noise * n(rng);
    const double phi = start[2] + noise * n(rng);
    const double v = std::max(start[3] + noise * n(rng), 2.0 * model.params().v_eps);
    out.push_back(make_vehicle_state(model.kind(), start[0], d, phi, v));
  }
  return out;
}

LapStats run_laps(Controller& controller, const VehicleModel& plant, const TrackModel& track,
                  const std::vector<Eigen::VectorXd>& starts, int max_steps,
                  const std::string& method, int horizon,
                  const std::function<void(std::size_t)>& after_run) {
  LapStats s;
  s.track = track.name();
  s.method = method;
  s.horizon = horizon;
  LapOptions opt;
  opt.max_steps = max_steps;
  std::vector<double> times, steps;
  for (const auto& x0 : starts) {
    LapResult lap = run_lap(controller, plant, track, x0, opt);
    if (after_run) after_run(static_cast<std::size_t>(s.runs));
    ++s.runs;
    s.max_abs_d = std::max(s.max_abs_d, lap.max_abs_d);
    s.inputs_in_bounds = s.inputs_in_bounds && lap.inputs_in_bounds;
    s.nonconverged_steps += lap.nonconverged_steps;
    steps.insert(steps.end(), lap.step_ms.begin(), lap.step_ms.end());
    if (lap.completed()) {
      ++s.completed;
      times.push_back(lap.lap_time);
    }
    s.laps.push_back(std::move(lap));
  }
  if (!times.empty()) {
    s.mean_lap_time = std::accumulate(times.begin(), times.end(), 0.0) / times.size();
    double var = 0.0;
    for (double t : times) var += (t - s.mean_lap_time) * (t - s.mean_lap_time);
    s.std_lap_time = times.size() > 1 ? std::sqrt(var / (times.size() - 1)) : 0.0;
  }
  if (!steps.empty()) {
    s.mean_step_ms = std::accumulate(steps.begin(), steps.end(), 0.0) / steps.size();
    const auto mid = steps.begin() + static_cast<std::ptrdiff_t>(steps.size() / 2);
    std::nth_element(steps.begin(), mid, steps.end());
    s.median_step_ms = *mid;
  }
  return s;
}

std::string lap_table_csv(const std::vector<LapStats>& rows) {
  std::ostringstream os;
  os << "track,method,horizon,runs,completed,mean_lap_time,std_lap_time,mean_step_ms,"
        "median_step_ms,max_abs_d,inputs_in_bounds\n";
  for (const auto& r : rows) {
    const bool ok = r.all_completed();
    os << r.track << ',' << r.method << ',' << r.horizon << ',' << r.runs << ',' << r.completed
       << ',' << cell(r.mean_lap_time, ok) << ',' << cell(r.std_lap_time, ok) << ','
       << cell(r.mean_step_ms, r.runs > 0) << ',' << cell(r.median_step_ms, r.runs > 0) << ','
       << cell(r.max_abs_d, true) << ',' << (r.inputs_in_bounds ? "true" : "false") << '\n';
  }
  return os.str();
}

Plant make_plant(const RunConfig& cfg, const std::filesystem::path& track_file) {
  Plant p;
  auto track = std::make_shared<TrackModel>(TrackModel::load(track_file, cfg.table_spacing));
  track->set_name(track_label(track_file));
  p.track = std::move(track);
  p.model = make_vehicle_model(cfg.model_kind, cfg.params);
  return p;
}

std::vector<LapStats> horizon_study(const RunConfig& cfg, const std::filesystem::path& track_file) {
  const Plant plant = make_plant(cfg, track_file);
  const auto& e = cfg.experiment;
  const auto starts = noisy_starts(*plant.model, e.start, e.noise, e.repetitions, e.seed);
  std::vector<LapStats> rows;
  for (int N : e.horizons) {
    MpcController ctl(plant.model, plant.track, N, expand(cfg.manual, N), cfg.solver, cfg.mpcc);
    LapStats s = run_laps(ctl, *plant.model, *plant.track, starts, e.max_steps, "mpc", N);
    s.laps.clear();
    rows.push_back(std::move(s));
  }
  return rows;
}

std::string imitation_table_csv(const std::vector<ImitationRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(8) << "method,rmse,scored,skipped\n";
  for (const auto& r : rows)
    os << r.method << ',' << r.rmse << ',' << r.scored << ',' << r.skipped << '\n';
  return os.str();
}

void check_checkpoint(const CostNet& net, const RunConfig& cfg, const Plant& plant) {
  const auto& c = net.config();
  const auto& t = cfg.training;
  if (c.head != NetConfig::Head::cost_schedule)
    throw ArtifactError("checkpoint is not a cost-schedule network");
  if (c.horizon != t.short_horizon)
    throw ArtifactError("checkpoint horizon " + std::to_string(c.horizon) +
                        " does not match training.short_horizon " +
                        std::to_string(t.short_horizon));
  if (c.cost_dim != cfg.manual.q.size())
    throw ArtifactError("checkpoint cost dimension does not match the model");
  if (c.use_context && c.context_len > 0 &&
      c.context_len != context_length(t.long_horizon, plant.model->params().T,
                                      plant.model->params().v_max,
                                      plant.track->table_spacing()))
    throw ArtifactError("checkpoint context length does not match training.long_horizon");
}

std::vector<ImitationRow> evaluate_imitation(const RunConfig& cfg, const CostNet& net,
                                             const CostNet* clone) {
  const Plant plant = make_plant(cfg, cfg.train_track);
  check_checkpoint(net, cfg, plant);
  const auto& t = cfg.training;
  const auto& e = cfg.experiment;
  const LearningSetup setup{plant.model, plant.track, cfg.manual};
  const double omega_t = cfg.mpcc.tighten_factor * plant.track->half_width();
  const Sampler sampler(plant.model, plant.track, t.long_horizon, cfg.manual,
                        t.ranges.value_or(SampleRanges::defaults(*plant.model, omega_t)),
                        cfg.solver, cfg.mpcc, t.exclusion, t.max_retries);
  const auto val = draw_samples(sampler, e.validation_states, e.seed ^ kEvalStream, t.threads);
  const auto search = draw_samples(sampler, e.search_states, e.seed ^ kSearchStream, t.threads);
  const Eigen::VectorXd w =
      t.loss_weights.size() > 0 ? t.loss_weights : default_loss_weights(cfg.model_kind);
  const int NS = t.short_horizon, ND = t.loss_steps;

  std::vector<ImitationRow> rows;
  auto add = [&rows](const std::string& name, const ImitationScore& s) {
    rows.push_back({name, s.rmse, s.scored, s.skipped});
  };
  const CostSchedule manual_s = expand(cfg.manual, NS);
  add("mpc_short", score_imitation(setup, NS, val, [&](const SampleState&) { return manual_s; },
                                   ND, w, cfg.solver, cfg.mpcc));

  const ConstantDeltaResult cd = search_constant_delta(setup, NS, search, e.search_budget, ND, w,
                                                       e.seed, cfg.solver, cfg.mpcc);
  const CostSchedule cd_s = constant_delta_schedule(cfg.manual, NS, cd);
  add("constant_delta", score_imitation(setup, NS, val, [&](const SampleState&) { return cd_s; },
                                        ND, w, cfg.solver, cfg.mpcc));

  CostNet trained_clone;
  if (!clone) {
    CloneConfig cc;
    cc.long_horizon = t.long_horizon;
    cc.iterations = e.clone_iterations;
    cc.ranges = t.ranges;
    cc.exclusion = t.exclusion;
    cc.use_context = net.config().use_context;
    cc.seed = e.seed;
    cc.threads = t.threads;
    cc.net = cfg.net;
    cc.solver = cfg.solver;
    cc.mpcc = cfg.mpcc;
    trained_clone = train_empc_baseline(cc, setup).net;
    clone = &trained_clone;
  }
  add("empc_clone", score_clone(*clone, setup, t.long_horizon, val, ND, w));

  add("zipmpc", score_imitation(
                    setup, NS, val,
                    [&](const SampleState& s) {
                      return learned_schedule(net, cfg.manual, *plant.model, *plant.track,
                                              t.long_horizon, s.state);
                    },
                    ND, w, cfg.solver, cfg.mpcc));
  return rows;
}

CompareResult compare_laps(const RunConfig& cfg, const CostNet& net,
                           const std::filesystem::path& out_dir) {
  const auto& t = cfg.training;
  const auto& e = cfg.experiment;
  std::vector<std::filesystem::path> tracks{cfg.train_track};
  tracks.insert(tracks.end(), cfg.test_tracks.begin(), cfg.test_tracks.end());
  const auto shared = std::make_shared<const CostNet>(net);

  CompareResult res;
  nlohmann::json manifest;
  manifest["model"] = to_string(cfg.model_kind);
  manifest["short_horizon"] = t.short_horizon;
  manifest["long_horizon"] = t.long_horizon;
  manifest["dt"] = cfg.params.T;
  manifest["tracks"] = nlohmann::json::array();

  for (const auto& tf : tracks) {
    const Plant plant = make_plant(cfg, tf);
    check_checkpoint(net, cfg, plant);
    const auto& name = plant.track->name();
    manifest["tracks"].push_back({{"name", name}, {"path", std::filesystem::absolute(tf).string()}});
    const auto starts = noisy_starts(*plant.model, e.start, e.noise, e.repetitions, e.seed);

    MpcController shortc(plant.model, plant.track, t.short_horizon,
                         expand(cfg.manual, t.short_horizon), cfg.solver, cfg.mpcc);
    MpcController longc(plant.model, plant.track, t.long_horizon,
                        expand(cfg.manual, t.long_horizon), cfg.solver, cfg.mpcc);
    ZipMpcController zip(plant.model, plant.track, cfg.manual, shared, t.long_horizon, cfg.solver,
                         cfg.mpcc);

    struct Entry {
      Controller* ctl;
      const char* method;
      int horizon;
    };
    for (const Entry& en : {Entry{&shortc, "mpc_short", t.short_horizon},
                            Entry{&longc, "mpc_long", t.long_horizon},
                            Entry{&zip, "zipmpc", t.short_horizon}}) {
      std::vector<ParamTracePoint> first_trace;
      LapStats s = run_laps(*en.ctl, *plant.model, *plant.track, starts, e.max_steps, en.method,
                            en.horizon, [&](std::size_t r) {
                              if (r == 0 && en.ctl == &zip) first_trace = zip.trace();
                            });
      if (!out_dir.empty() && !s.laps.empty())
        write_lap_csv(s.laps.front(), cfg.model_kind, cfg.params.T,
                      out_dir / "laps" / (name + "_" + en.method + ".csv"));
      if (en.ctl == &zip) res.traces[name] = std::move(first_trace);
      res.rows.push_back(std::move(s));
    }
    const auto& zs = res.rows[res.rows.size() - 1];
    const auto& ls = res.rows[res.rows.size() - 2];
    res.time_reduction[name] =
        ls.mean_step_ms > 0.0 ? (1.0 - zs.mean_step_ms / ls.mean_step_ms) * 100.0 : 0.0;
  }

  if (!out_dir.empty()) {
    write_text_atomic(out_dir / "laps.csv", lap_table_csv(res.rows));
    nlohmann::json summary;
    for (const auto& [track, red] : res.time_reduction) summary["time_reduction_percent"][track] = red;
    for (const auto& r : res.rows) {
      nlohmann::json j;
      j["track"] = r.track;
      j["method"] = r.method;
      j["completed"] = r.completed;
      j["runs"] = r.runs;
      j["mean_lap_time"] = r.all_completed() ? nlohmann::json(r.mean_lap_time) : nlohmann::json("-");
      j["std_lap_time"] = r.all_completed() ? nlohmann::json(r.std_lap_time) : nlohmann::json("-");
      j["mean_step_ms"] = r.mean_step_ms;
      j["median_step_ms"] = r.median_step_ms;
      summary["rows"].push_back(j);
    }
    write_text_atomic(out_dir / "summary.json", summary.dump(2));
    write_text_atomic(out_dir / "run.json", manifest.dump(2));
    for (const auto& [track, trace] : res.traces) {
      std::ostringstream os;
      os << std::setprecision(10) << "sigma,p_d,mean_curvature\n";
      for (const auto& p : trace) os << p.sigma << ',' << p.p_d << ',' << p.mean_curvature << '\n';
      write_text_atomic(out_dir / "traces" / (track + ".csv"), os.str());
    }
  }
  return res;
}

std::vector<std::filesystem::path> export_plot_data(const std::filesystem::path& run_dir) {
  const auto manifest_path = run_dir / "run.json";
  if (!std::filesystem::exists(manifest_path))
    throw ArtifactError("missing artifact: " + manifest_path.string() +
                        " (run compare-laps first)");
  std::ifstream in(manifest_path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw ArtifactError(std::string("unreadable run manifest: ") + e.what());
  }
  std::vector<std::filesystem::path> written;
  const auto plots = run_dir / "plots";
  std::ostringstream corr;
  corr << std::setprecision(10) << "track,pearson_r,samples\n";

  for (const auto& tj : manifest.at("tracks")) {
    const std::string name = tj.at("name");
    const TrackModel track = TrackModel::load(tj.at("path").get<std::string>());
    for (const char* method : {"mpc_short", "mpc_long", "zipmpc"}) {
      const CsvTable lap = read_csv(run_dir / "laps" / (name + "_" + method + ".csv"));
      const int ct = lap.column("t"), cs = lap.column("sigma"), cd = lap.column("d"),
                cp = lap.column("phi");
      const int cv = std::find(lap.header.begin(), lap.header.end(), "v") != lap.header.end()
                         ? lap.column("v")
                         : lap.column("v_x");
      std::ostringstream os;
      os << std::setprecision(10) << "t,x,y,heading,d,v\n";
      for (const auto& row : lap.rows) {
        const Pose2 p = track.frenet_to_cartesian(row[cs], std::clamp(row[cd], -track.half_width(),
                                                                      track.half_width()),
                                                  row[cp]);
        os << row[ct] << ',' << p.x << ',' << p.y << ',' << p.heading << ',' << row[cd] << ','
           << row[cv] << '\n';
      }
      const auto path = plots / (name + "_" + method + "_xy.csv");
      write_text_atomic(path, os.str());
      written.push_back(path);
    }
    const CsvTable trace = read_csv(run_dir / "traces" / (name + ".csv"));
    const int ps = trace.column("sigma"), pd = trace.column("p_d"),
              pk = trace.column("mean_curvature");
    std::vector<double> a, b;
    std::ostringstream os;
    os << std::setprecision(10) << "sigma,p_d,mean_curvature\n";
    for (const auto& row : trace.rows) {
      os << row[ps] << ',' << row[pd] << ',' << row[pk] << '\n';
      a.push_back(row[pd]);
      b.push_back(row[pk]);
    }
    const auto path = plots / (name + "_pd.csv");
    write_text_atomic(path, os.str());
    written.push_back(path);
    const double r = a.size() >= 2 ? pearson(a, b) : std::numeric_limits<double>::quiet_NaN();
    corr << name << ',';
    if (std::isfinite(r)) corr << r;
    else corr << '-';
    corr << ',' << a.size() << '\n';
  }
  const auto cpath = plots / "correlation.csv";
  write_text_atomic(cpath, corr.str());
  written.push_back(cpath);
  return written;
}

}  // namespace zipmpc
