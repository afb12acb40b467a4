#include "zipmpc/config.hpp"

#include <yaml-cpp/yaml.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace zipmpc {

namespace {

void check_keys(const YAML::Node& node, const std::string& section,
                const std::set<std::string>& allowed) {
  if (!node) return;
  if (!node.IsMap()) throw ConfigError("section '" + section + "' must be a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) throw ConfigError("unknown key '" + section + "." + key + "'");
  }
}

template <class T>
void read(const YAML::Node& node, const std::string& key, T& out, const std::string& section) {
  if (!node || !node[key]) return;
  try {
    out = node[key].as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError("bad value for '" + section + "." + key + "'");
  }
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::map<std::string, double ModelParams::*> param_fields() {
  return {{"l_r", &ModelParams::l_r},       {"l_f", &ModelParams::l_f},
          {"m", &ModelParams::m},           {"I_z", &ModelParams::I_z},
          {"T", &ModelParams::T},           {"half_width", &ModelParams::half_width},
          {"D_f", &ModelParams::D_f},       {"C_f", &ModelParams::C_f},
          {"B_f", &ModelParams::B_f},       {"D_r", &ModelParams::D_r},
          {"C_r", &ModelParams::C_r},       {"B_r", &ModelParams::B_r},
          {"C_m1", &ModelParams::C_m1},     {"C_m2", &ModelParams::C_m2},
          {"C_d0", &ModelParams::C_d0},     {"C_d1", &ModelParams::C_d1},
          {"C_d2", &ModelParams::C_d2},     {"C_roll", &ModelParams::C_roll},
          {"gamma", &ModelParams::gamma},   {"a_max", &ModelParams::a_max},
          {"delta_max", &ModelParams::delta_max}, {"v_max", &ModelParams::v_max},
          {"v_eps", &ModelParams::v_eps}};
}

}  // namespace

RunConfig RunConfig::defaults(ModelKind kind, const std::filesystem::path& data_dir) {
  RunConfig c;
  c.model_kind = kind;
  c.params = ModelParams::defaults(kind);
  c.manual = manual_cost(kind);
  c.train_track = data_dir / "tracks" / "train.track";
  c.test_tracks = {data_dir / "tracks" / "test1.track", data_dir / "tracks" / "test2.track"};
  return c;
}

void RunConfig::validate() const {
  try {
    params.validate();
    training.validate();
    NetConfig shaped = net;
    shaped.cost_dim = static_cast<int>(manual.q.size());
    shaped.horizon = training.short_horizon;
    shaped.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (manual.q.size() != manual.p.size() || manual.q.size() != static_cast<int>(cost_slot_names(model_kind).size()))
    throw ConfigError("manual cost must have one entry per cost slot (" +
                      std::to_string(cost_slot_names(model_kind).size()) + ")");
  if (experiment.horizons.empty()) throw ConfigError("experiment.horizons must not be empty");
  for (int n : experiment.horizons)
    if (n < 1) throw ConfigError("horizons must be >= 1");
  if (experiment.repetitions < 1) throw ConfigError("experiment.repetitions must be >= 1");
  if (!(experiment.noise >= 0.0)) throw ConfigError("experiment.noise must be >= 0");
  if (experiment.search_budget < 1) throw ConfigError("experiment.search_budget must be >= 1");
  if (!std::filesystem::exists(train_track))
    throw ConfigError("track file not found: " + train_track.string());
  for (const auto& t : test_tracks)
    if (!std::filesystem::exists(t)) throw ConfigError("track file not found: " + t.string());
}

RunConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed YAML: ") + e.what());
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  check_keys(root, "<root>", {"track", "model", "solver", "net", "training", "experiment"});

  const auto model = root["model"];
  check_keys(model, "model", {"kind", "params", "cost_q", "cost_p"});
  ModelKind kind = ModelKind::kinematic;
  if (model && model["kind"]) {
    try {
      kind = parse_model_kind(model["kind"].as<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(e.what());
    }
  }
  RunConfig c = RunConfig::defaults(kind, default_data_dir());

  const auto track = root["track"];
  check_keys(track, "track", {"train", "test", "table_spacing"});
  if (track) {
    if (track["train"]) c.train_track = resolve(base_dir, track["train"].as<std::string>());
    if (track["test"]) {
      c.test_tracks.clear();
      for (const auto& t : track["test"]) c.test_tracks.push_back(resolve(base_dir, t.as<std::string>()));
    }
    read(track, "table_spacing", c.table_spacing, "track");
  }

  if (model && model["params"]) {
    const auto fields = param_fields();
    for (const auto& kv : model["params"]) {
      const auto key = kv.first.as<std::string>();
      const auto it = fields.find(key);
      if (it == fields.end()) throw ConfigError("unknown key 'model.params." + key + "'");
      c.params.*(it->second) = kv.second.as<double>();
    }
  }
  if (model && model["cost_q"]) {
    std::vector<double> q, p;
    read(model, "cost_q", q, "model");
    read(model, "cost_p", p, "model");
    c.manual.q = to_vector(q);
    c.manual.p = p.empty() ? Eigen::VectorXd::Zero(c.manual.q.size()) : to_vector(p);
  } else if (model && model["cost_p"]) {
    std::vector<double> p;
    read(model, "cost_p", p, "model");
    c.manual.p = to_vector(p);
  }

  const auto solver = root["solver"];
  check_keys(solver, "solver", {"max_iter", "tol_obj", "q_min", "max_backtracks", "second_order",
                                "penalty_weight", "tighten_factor", "analytic_jacobian"});
  read(solver, "max_iter", c.solver.max_iter, "solver");
  read(solver, "tol_obj", c.solver.tol_obj, "solver");
  read(solver, "q_min", c.solver.q_min, "solver");
  read(solver, "max_backtracks", c.solver.max_backtracks, "solver");
  read(solver, "second_order", c.solver.second_order, "solver");
  read(solver, "penalty_weight", c.mpcc.penalty_weight, "solver");
  read(solver, "tighten_factor", c.mpcc.tighten_factor, "solver");
  read(solver, "analytic_jacobian", c.mpcc.analytic_jacobian, "solver");

  const auto net = root["net"];
  check_keys(net, "net", {"use_conv", "conv_channels", "conv_kernel", "conv_stride", "fc_widths",
                          "leaky_slope", "dropout", "layer_norm", "input_scale"});
  read(net, "use_conv", c.net.use_conv, "net");
  read(net, "conv_channels", c.net.conv_channels, "net");
  read(net, "conv_kernel", c.net.conv_kernel, "net");
  read(net, "conv_stride", c.net.conv_stride, "net");
  read(net, "fc_widths", c.net.fc_widths, "net");
  read(net, "leaky_slope", c.net.leaky_slope, "net");
  read(net, "dropout", c.net.dropout, "net");
  read(net, "layer_norm", c.net.layer_norm, "net");
  read(net, "input_scale", c.net.input_scale, "net");
  // Output scales are derived from the manual cost.
  c.net.output_scale = default_cost_output_scale(c.manual);

  auto& t = c.training;
  const auto tr = root["training"];
  check_keys(tr, "training", {"short_horizon", "long_horizon", "loss_steps", "batch_size",
                              "iterations", "lr", "loss_weights", "pool_size", "validate_every",
                              "validation_states", "select", "use_context", "seed", "threads",
                              "snapshots", "exclusion", "max_retries", "sample_d", "sample_phi",
                              "sample_v"});
  read(tr, "short_horizon", t.short_horizon, "training");
  read(tr, "long_horizon", t.long_horizon, "training");
  read(tr, "loss_steps", t.loss_steps, "training");
  read(tr, "batch_size", t.batch_size, "training");
  read(tr, "iterations", t.iterations, "training");
  read(tr, "lr", t.lr, "training");
  read(tr, "pool_size", t.pool_size, "training");
  read(tr, "validate_every", t.validate_every, "training");
  read(tr, "validation_states", t.validation_states, "training");
  read(tr, "use_context", t.use_context, "training");
  read(tr, "seed", t.seed, "training");
  read(tr, "threads", t.threads, "training");
  read(tr, "snapshots", t.snapshot_iterations, "training");
  read(tr, "exclusion", t.exclusion, "training");
  read(tr, "max_retries", t.max_retries, "training");
  if (tr && tr["loss_weights"]) {
    std::vector<double> w;
    read(tr, "loss_weights", w, "training");
    t.loss_weights = to_vector(w);
  }
  if (tr && tr["select"]) {
    const auto s = tr["select"].as<std::string>();
    if (s == "lap_time") t.select = TrainConfig::Select::lap_time;
    else if (s == "rmse") t.select = TrainConfig::Select::rmse;
    else if (s == "last") t.select = TrainConfig::Select::last;
    else throw ConfigError("training.select must be lap_time, rmse or last");
  }
  if (tr && (tr["sample_d"] || tr["sample_phi"] || tr["sample_v"])) {
    // d is in metres, so it has no model-independent default once ranges are overridden.
    if (!tr["sample_d"]) throw ConfigError("training.sample_d is required with sample_phi/sample_v");
    SampleRanges r;
    std::array<double, 2> d{}, phi{r.phi_lo, r.phi_hi}, v{r.v_lo, c.params.v_max};
    read(tr, "sample_d", d, "training");
    read(tr, "sample_phi", phi, "training");
    read(tr, "sample_v", v, "training");
    r.d_lo = d[0];
    r.d_hi = d[1];
    r.phi_lo = phi[0];
    r.phi_hi = phi[1];
    r.v_lo = v[0];
    r.v_hi = v[1];
    t.ranges = r;
  }
  t.net = c.net;
  t.solver = c.solver;
  t.mpcc = c.mpcc;

  auto& e = c.experiment;
  const auto ex = root["experiment"];
  check_keys(ex, "experiment", {"horizons", "repetitions", "noise", "seed", "validation_states",
                                "search_budget", "search_states", "clone_iterations", "start",
                                "max_steps"});
  read(ex, "horizons", e.horizons, "experiment");
  read(ex, "repetitions", e.repetitions, "experiment");
  read(ex, "noise", e.noise, "experiment");
  read(ex, "seed", e.seed, "experiment");
  read(ex, "validation_states", e.validation_states, "experiment");
  read(ex, "search_budget", e.search_budget, "experiment");
  read(ex, "search_states", e.search_states, "experiment");
  read(ex, "clone_iterations", e.clone_iterations, "experiment");
  read(ex, "start", e.start, "experiment");
  read(ex, "max_steps", e.max_steps, "experiment");
  t.validation_start = e.start;
  t.validation_max_steps = e.max_steps;

  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.has_parent_path() ? path.parent_path() : ".");
}

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("ZIPMPC_DATA_DIR"); env && *env) return env;
#ifdef ZIPMPC_DATA_DIR
  return ZIPMPC_DATA_DIR;
#else
  return "data";
#endif
}

std::filesystem::path output_root() {
  if (const char* env = std::getenv("ZIPMPC_OUTPUT_ROOT"); env && *env) return env;
  return "runs";
}

}  // namespace zipmpc
