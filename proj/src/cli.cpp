#include "zipmpc/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <iomanip>
#include <json.hpp>
#include <optional>

#include "zipmpc/config.hpp"
#include "zipmpc/diffmpc.hpp"
#include "zipmpc/experiments.hpp"
#include "zipmpc/zipmpc.hpp"

namespace zipmpc {

namespace {

RunConfig config_from(const std::string& path) {
  if (path.empty()) {
    RunConfig c = RunConfig::defaults(ModelKind::kinematic, default_data_dir());
    c.net.output_scale = default_cost_output_scale(c.manual);
    c.training.net = c.net;
    c.validate();
    return c;
  }
  return load_config(path);
}

std::filesystem::path out_dir_for(const std::string& given, const std::string& command) {
  return given.empty() ? output_root() / command : std::filesystem::path(given);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Learned cost corrections for short-horizon contouring MPC"};
  app.require_subcommand(1);
  std::string config_path, out_path;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "YAML config (sections track, model, solver, "
                                                 "net, training, experiment)");
    sub->add_option("-o,--out", out_path, "output directory (default $ZIPMPC_OUTPUT_ROOT/<cmd>)");
  };

  auto* track_cmd = app.add_subcommand("track", "track utilities");
  track_cmd->require_subcommand(1);
  auto* track_check = track_cmd->add_subcommand("check", "closure and singularity report");
  std::string track_file;
  track_check->add_option("file", track_file)->required();

  auto* train_cmd = app.add_subcommand("train", "train the cost network");
  add_common(train_cmd);
  std::optional<int> iterations;
  std::optional<std::uint64_t> seed;
  train_cmd->add_option("--iterations", iterations);
  train_cmd->add_option("--seed", seed);
  bool no_context = false;
  train_cmd->add_flag("--no-context", no_context, "context-free ablation");

  auto* horizon_cmd = app.add_subcommand("horizon-study", "lap time against horizon length");
  add_common(horizon_cmd);
  std::string horizon_track;
  horizon_cmd->add_option("--track", horizon_track, "track file (default: the train track)");

  std::string checkpoint, clone_checkpoint;
  auto* eval_cmd = app.add_subcommand("evaluate-imitation", "imitation RMSE per method");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint)->required();
  eval_cmd->add_option("--clone", clone_checkpoint, "behaviour-clone checkpoint");

  auto* compare_cmd = app.add_subcommand("compare-laps", "lap times and per-step time");
  add_common(compare_cmd);
  compare_cmd->add_option("--checkpoint", checkpoint)->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "analytic against numeric cost gradients");
  add_common(grad_cmd);
  int grad_horizon = 5;
  double grad_h = 1e-5, grad_sigma = 2.0;
  std::uint64_t grad_seed = 0;
  std::string grad_loss = "reference_mse";
  grad_cmd->add_option("--horizon", grad_horizon);
  grad_cmd->add_option("--step", grad_h, "central-difference step");
  grad_cmd->add_option("--sigma", grad_sigma, "initial progress on the train track");
  grad_cmd->add_option("--seed", grad_seed);
  grad_cmd->add_option("--loss", grad_loss)->check(CLI::IsMember({"reference_mse", "input_norm"}));

  auto* export_cmd = app.add_subcommand("export-plots", "plot-ready CSVs from a compare-laps run");
  std::string run_dir;
  export_cmd->add_option("run_dir", run_dir)->required();

  auto* net_cmd = app.add_subcommand("costnet", "cost-network checkpoints");
  net_cmd->require_subcommand(1);
  auto* net_info = net_cmd->add_subcommand("info", "print a checkpoint's configuration");
  std::string net_file;
  net_info->add_option("file", net_file)->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*track_check) {
      const TrackModel t = TrackModel::load(track_file);
      const TrackReport r = check_track(t);
      nlohmann::json j;
      j["length"] = r.length;
      j["max_abs_curvature"] = r.max_abs_curvature;
      j["heading_residual"] = r.heading_residual;
      j["position_residual"] = r.position_residual;
      j["singularity_margin"] = r.singularity_margin;
      j["ok"] = r.ok;
      out << j.dump(2) << '\n';
      return r.ok ? kExitOk : kExitConfig;
    }

    if (*net_info) {
      const CostNet net = CostNet::load(net_file);
      nlohmann::json j = nlohmann::json::parse(net.config().to_json());
      j["num_params"] = net.num_params();
      out << j.dump(2) << '\n';
      return kExitOk;
    }

    if (*export_cmd) {
      for (const auto& p : export_plot_data(run_dir)) out << p.string() << '\n';
      return kExitOk;
    }

    RunConfig cfg = config_from(config_path);

    if (*train_cmd) {
      if (iterations) cfg.training.iterations = *iterations;
      if (seed) cfg.training.seed = *seed;
      if (no_context) cfg.training.use_context = false;
      cfg.training.validate();
      cfg.training.output_dir = out_dir_for(out_path, "train");
      const Plant plant = make_plant(cfg, cfg.train_track);
      const TrainResult res = train(cfg.training, {plant.model, plant.track, cfg.manual},
                                    [&](const TrainLogEntry& e) {
                                      if (e.validated) out << e.to_json() << '\n';
                                    });
      nlohmann::json j;
      j["best_iteration"] = res.best_iteration;
      j["best_lap_time"] = std::isfinite(res.best_lap_time) ? nlohmann::json(res.best_lap_time)
                                                            : nlohmann::json("-");
      j["checkpoint"] = (cfg.training.output_dir / "best.ckpt").string();
      out << j.dump(2) << '\n';
      return kExitOk;
    }

    if (*horizon_cmd) {
      const auto track = horizon_track.empty() ? cfg.train_track : std::filesystem::path(horizon_track);
      const auto rows = horizon_study(cfg, track);
      const auto dir = out_dir_for(out_path, "horizon-study");
      const std::string csv = lap_table_csv(rows);
      write_text_atomic(dir / "horizon_study.csv", csv);
      out << csv;
      const bool all = std::all_of(rows.begin(), rows.end(),
                                   [](const LapStats& r) { return r.all_completed(); });
      return all ? kExitOk : kExitIncomplete;
    }

    if (*eval_cmd) {
      const CostNet net = CostNet::load(checkpoint);
      std::optional<CostNet> clone;
      if (!clone_checkpoint.empty()) clone = CostNet::load(clone_checkpoint);
      const auto rows = evaluate_imitation(cfg, net, clone ? &*clone : nullptr);
      const std::string csv = imitation_table_csv(rows);
      write_text_atomic(out_dir_for(out_path, "evaluate-imitation") / "imitation.csv", csv);
      out << csv;
      return kExitOk;
    }

    if (*compare_cmd) {
      const CostNet net = CostNet::load(checkpoint);
      const auto dir = out_dir_for(out_path, "compare-laps");
      const CompareResult res = compare_laps(cfg, net, dir);
      out << lap_table_csv(res.rows);
      for (const auto& [track, red] : res.time_reduction)
        out << "time_reduction," << track << ',' << std::setprecision(4) << red << "%\n";
      const bool all = std::all_of(res.rows.begin(), res.rows.end(),
                                   [](const LapStats& r) { return r.all_completed(); });
      return all ? kExitOk : kExitIncomplete;
    }

    if (*grad_cmd) {
      const Plant plant = make_plant(cfg, cfg.train_track);
      CostSchedule cost = expand(cfg.manual, grad_horizon);
      cost.clamp_q(cfg.solver.q_min);
      const MpcProblem pb = make_mpcc_problem(plant.model, plant.track, grad_horizon, cost, cfg.mpcc);
      const Eigen::VectorXd x0 =
          augment_state(make_vehicle_state(cfg.model_kind, grad_sigma, 0.0, 0.0, 1.0));
      LossSpec loss;
      loss.kind = grad_loss == "input_norm" ? LossSpec::Kind::input_norm
                                            : LossSpec::Kind::reference_mse;
      GradcheckOptions opt;
      opt.h = grad_h;
      opt.seed = grad_seed;
      const GradcheckReport rep = gradcheck(pb, x0, loss, opt);
      write_text_atomic(out_dir_for(out_path, "gradcheck") / "gradcheck.csv", rep.to_csv());
      out << "max_rel_err," << std::setprecision(6) << rep.max_rel_err << '\n';
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ArtifactError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const TrackError& e) {
    err << "track error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const SamplingError& e) {
    err << "infeasible: " << e.what() << '\n';
    return kExitIncomplete;
  } catch (const InfeasibleError& e) {
    err << "infeasible: " << e.what() << '\n';
    return kExitIncomplete;
  } catch (const NotConvergedError& e) {
    err << "infeasible: " << e.what() << '\n';
    return kExitIncomplete;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitConfig;
}

}  // namespace zipmpc
