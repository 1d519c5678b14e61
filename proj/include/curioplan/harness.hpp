#pragma once

// Experiment orchestration: JSON configs, curious exploration, value training,
// evaluation of the four control methods, diagnostics, bootstrap statistics and
// run manifests.

#include "curioplan/diagnostics.hpp"
#include "curioplan/dynamics.hpp"
#include "curioplan/env.hpp"
#include "curioplan/graph.hpp"
#include "curioplan/planner.hpp"
#include "curioplan/replay.hpp"
#include "curioplan/value.hpp"

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace curioplan {

namespace fs = std::filesystem;
using nlohmann::json;

#ifdef CURIOPLAN_VERSION
inline constexpr const char* kVersion = CURIOPLAN_VERSION;
#else
inline constexpr const char* kVersion = "0.1.0";
#endif

// ---------------------------------------------------------------------------
// Configuration

struct EnvConfig {
  std::string type = "pointmass";  // pointmass | pinpad | chain
  fs::path layout;                 // pointmass only, resolved against the config directory
  std::size_t episode_length = 100;
  double gamma = 0.99;
  double goal_epsilon = 0.5;
  PointMassParams pointmass;
  std::size_t room_size = 4;   // pinpad
  std::size_t chain_size = 5;  // chain
};

struct ExplorationConfig {
  std::size_t steps = 50000;
  std::size_t warm_start_steps = 3000;
  std::size_t retrain_every = 5000;  // environment steps between ensemble refits
  std::size_t model_epochs = 12;
  std::size_t buffer_capacity = 0;   // 0: steps + episodes, i.e. never evicts
};

/// Ensemble refit on the final exploration buffer and used for goal-directed planning.
struct PlanningModelConfig {
  EnsembleConfig ensemble;
  std::size_t epochs = 30;
};

struct EvalConfig {
  std::vector<Vector> goals;
  std::size_t episodes_per_goal = 20;
  PropagationConfig propagation{1, true, false, false};
};

struct DiagnoseConfig {
  std::string method = "mbp";
  SampledOptimumConfig sampled{15, 200, 200};
};

struct ExperimentConfig {
  EnvConfig env;
  ExplorationConfig exploration;
  EnsembleConfig ensemble;
  std::optional<PlanningModelConfig> planning_model;  // none: plan with the exploration ensemble
  PropagationConfig propagation;  // exploration rollouts
  RelabelConfig relabel;
  Td3Config td3;
  PlanConfig plan_intrinsic;
  PlanConfig plan_extrinsic;
  GraphConfig graph;
  EvalConfig eval;
  DiagnoseConfig diagnose;
  std::uint64_t seed = 0;
  fs::path out_dir = "runs/default";
  std::string source_text;  // canonical JSON, hashed into manifests

  void validate() const {
    if (env.type != "pointmass" && env.type != "pinpad" && env.type != "chain")
      throw std::invalid_argument("config: env.type must be pointmass, pinpad or chain");
    if (env.type == "pointmass" && !fs::exists(env.layout))
      throw std::invalid_argument("config: layout file '" + env.layout.string() + "' does not exist");
    if (exploration.steps == 0) throw std::invalid_argument("config: exploration.steps must be positive");
    if (exploration.warm_start_steps == 0 || exploration.warm_start_steps > exploration.steps)
      throw std::invalid_argument("config: exploration.warm_start_steps must lie in [1, steps]");
    if (exploration.retrain_every == 0) throw std::invalid_argument("config: exploration.retrain_every must be positive");
    if (eval.episodes_per_goal == 0) throw std::invalid_argument("config: eval.episodes_per_goal must be positive");
    ensemble.validate();
    if (planning_model) {
      planning_model->ensemble.validate();
      if (planning_model->epochs == 0) throw std::invalid_argument("config: planning_model.epochs must be positive");
    }
    td3.validate();
    plan_intrinsic.validate();
    plan_extrinsic.validate();
    graph.validate();
  }
};

namespace detail {

inline void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument("config: '" + section + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : j.items())
    if (!ok.count(key)) throw std::invalid_argument("config: unknown key '" + section + "." + key + "'");
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_plan(const json& j, const std::string& name, PlanConfig& p) {
  check_keys(j, name, {"horizon", "iterations", "population", "elite_ratio", "alpha", "noise_exponent",
                       "kept_elite_fraction", "n_particles", "variance_reject_threshold", "init_std_fraction"});
  read(j, "horizon", p.horizon);
  read(j, "iterations", p.iterations);
  read(j, "population", p.population);
  read(j, "elite_ratio", p.elite_ratio);
  read(j, "alpha", p.alpha);
  read(j, "noise_exponent", p.noise_exponent);
  read(j, "kept_elite_fraction", p.kept_elite_fraction);
  read(j, "n_particles", p.n_particles);
  read(j, "init_std_fraction", p.init_std_fraction);
  if (j.contains("variance_reject_threshold") && !j.at("variance_reject_threshold").is_null())
    p.variance_reject_threshold = j.at("variance_reject_threshold").get<double>();
}

inline void read_ensemble(const json& e, const std::string& name, EnsembleConfig& c, std::size_t* epochs = nullptr) {
  if (epochs)
    check_keys(e, name, {"members", "elites", "hidden_layers", "hidden_units", "activation", "learning_rate", "weight_decay",
                         "batch_size", "holdout_fraction", "max_holdout", "bootstrap", "disagreement_mean_only", "epochs"});
  else
    check_keys(e, name, {"members", "elites", "hidden_layers", "hidden_units", "activation", "learning_rate", "weight_decay",
                         "batch_size", "holdout_fraction", "max_holdout", "bootstrap", "disagreement_mean_only"});
  read(e, "members", c.members);
  read(e, "elites", c.elites);
  read(e, "hidden_layers", c.hidden_layers);
  read(e, "hidden_units", c.hidden_units);
  if (e.contains("activation")) c.activation = activation_from_string(e.at("activation").get<std::string>());
  read(e, "learning_rate", c.learning_rate);
  read(e, "weight_decay", c.weight_decay);
  read(e, "batch_size", c.batch_size);
  read(e, "holdout_fraction", c.holdout_fraction);
  read(e, "max_holdout", c.max_holdout);
  read(e, "bootstrap", c.bootstrap);
  read(e, "disagreement_mean_only", c.disagreement_mean_only);
  if (epochs) read(e, "epochs", *epochs);
}

inline void read_propagation(const json& j, const std::string& name, PropagationConfig& p) {
  check_keys(j, name, {"particles", "mean_mode", "sample"});
  read(j, "particles", p.particles);
  read(j, "mean_mode", p.mean_mode);
  read(j, "sample", p.sample);
}

}  // namespace detail

/// Parses a config; relative paths resolve against `base_dir`.
inline ExperimentConfig config_from_json(const json& j, const fs::path& base_dir) {
  using detail::read;
  detail::check_keys(j, "config", {"env", "exploration", "ensemble", "planning_model", "propagation", "relabel", "td3",
                                   "plan_intrinsic", "plan_extrinsic", "graph", "eval", "diagnose", "seed", "out_dir"});
  ExperimentConfig c;
  c.plan_extrinsic.horizon = 15;
  if (j.contains("env")) {
    const auto& e = j.at("env");
    detail::check_keys(e, "env", {"type", "layout", "episode_length", "gamma", "goal_epsilon", "dt", "max_speed",
                                  "max_accel", "start_jitter", "room_size", "chain_size"});
    read(e, "type", c.env.type);
    if (e.contains("layout")) c.env.layout = base_dir / e.at("layout").get<std::string>();
    read(e, "episode_length", c.env.episode_length);
    read(e, "gamma", c.env.gamma);
    read(e, "goal_epsilon", c.env.goal_epsilon);
    read(e, "dt", c.env.pointmass.dt);
    read(e, "max_speed", c.env.pointmass.max_speed);
    read(e, "max_accel", c.env.pointmass.max_accel);
    read(e, "start_jitter", c.env.pointmass.start_jitter);
    read(e, "room_size", c.env.room_size);
    read(e, "chain_size", c.env.chain_size);
  }
  if (j.contains("exploration")) {
    const auto& e = j.at("exploration");
    detail::check_keys(e, "exploration", {"steps", "warm_start_steps", "retrain_every", "model_epochs", "buffer_capacity"});
    read(e, "steps", c.exploration.steps);
    read(e, "warm_start_steps", c.exploration.warm_start_steps);
    read(e, "retrain_every", c.exploration.retrain_every);
    read(e, "model_epochs", c.exploration.model_epochs);
    read(e, "buffer_capacity", c.exploration.buffer_capacity);
  }
  if (j.contains("ensemble")) detail::read_ensemble(j.at("ensemble"), "ensemble", c.ensemble);
  if (j.contains("planning_model")) {
    // Unspecified keys inherit from the exploration ensemble.
    PlanningModelConfig pm{c.ensemble};
    detail::read_ensemble(j.at("planning_model"), "planning_model", pm.ensemble, &pm.epochs);
    c.planning_model = pm;
  }
  if (j.contains("propagation")) detail::read_propagation(j.at("propagation"), "propagation", c.propagation);
  if (j.contains("relabel")) {
    const auto& r = j.at("relabel");
    detail::check_keys(r, "relabel", {"p_g", "p_geo"});
    read(r, "p_g", c.relabel.p_g);
    read(r, "p_geo", c.relabel.p_geo);
  }
  if (j.contains("td3")) {
    const auto& t = j.at("td3");
    detail::check_keys(t, "td3", {"hidden_layers", "hidden_units", "critic_lr", "actor_lr", "polyak", "target_noise",
                                  "noise_clip", "policy_delay", "batch_size", "epochs", "updates_per_epoch"});
    read(t, "hidden_layers", c.td3.hidden_layers);
    read(t, "hidden_units", c.td3.hidden_units);
    read(t, "critic_lr", c.td3.critic_lr);
    read(t, "actor_lr", c.td3.actor_lr);
    read(t, "polyak", c.td3.polyak);
    read(t, "target_noise", c.td3.target_noise);
    read(t, "noise_clip", c.td3.noise_clip);
    read(t, "policy_delay", c.td3.policy_delay);
    read(t, "batch_size", c.td3.batch_size);
    read(t, "epochs", c.td3.epochs);
    read(t, "updates_per_epoch", c.td3.updates_per_epoch);
  }
  c.td3.gamma = c.env.gamma;
  if (j.contains("plan_intrinsic")) detail::read_plan(j.at("plan_intrinsic"), "plan_intrinsic", c.plan_intrinsic);
  if (j.contains("plan_extrinsic")) detail::read_plan(j.at("plan_extrinsic"), "plan_extrinsic", c.plan_extrinsic);
  if (j.contains("graph")) {
    const auto& g = j.at("graph");
    detail::check_keys(g, "graph", {"n_vertices", "kde_bandwidth", "pool_size"});
    read(g, "n_vertices", c.graph.n_vertices);
    read(g, "kde_bandwidth", c.graph.kde_bandwidth);
    read(g, "pool_size", c.graph.pool_size);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::check_keys(e, "eval", {"goals", "episodes_per_goal", "propagation"});
    if (e.contains("goals"))
      for (const auto& g : e.at("goals")) {
        const auto v = g.get<std::vector<double>>();
        c.eval.goals.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
      }
    read(e, "episodes_per_goal", c.eval.episodes_per_goal);
    if (e.contains("propagation")) detail::read_propagation(e.at("propagation"), "eval.propagation", c.eval.propagation);
  }
  if (j.contains("diagnose")) {
    const auto& d = j.at("diagnose");
    detail::check_keys(d, "diagnose", {"method", "horizon", "n_random", "n_next"});
    read(d, "method", c.diagnose.method);
    read(d, "horizon", c.diagnose.sampled.horizon);
    read(d, "n_random", c.diagnose.sampled.n_random);
    read(d, "n_next", c.diagnose.sampled.n_next);
  }
  read(j, "seed", c.seed);
  if (j.contains("out_dir")) c.out_dir = base_dir / j.at("out_dir").get<std::string>();
  c.source_text = j.dump();
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::invalid_argument("config '" + path.string() + "': " + e.what());
  }
  return config_from_json(j, path.parent_path());
}

inline std::unique_ptr<GoalEnv> make_env(const ExperimentConfig& cfg) {
  const auto& e = cfg.env;
  if (e.type == "pointmass")
    return std::make_unique<PointMassMaze>(MazeLayout::load(e.layout.string()), e.pointmass, e.episode_length, e.gamma,
                                           e.goal_epsilon);
  if (e.type == "pinpad") return std::make_unique<PinPadLite>(e.room_size, e.pointmass, e.episode_length, e.gamma);
  return std::make_unique<ChainEnv>(e.chain_size, e.episode_length, e.gamma);
}

inline RelabelConfig relabel_for(const ExperimentConfig& cfg, const EnvSpec& spec) {
  RelabelConfig r = cfg.relabel;
  r.goal_indices = spec.goal_indices;
  return r;
}

// ---------------------------------------------------------------------------
// Artifacts and manifests

struct ArtifactPaths {
  fs::path buffer, ensemble, value;

  static ArtifactPaths in(const fs::path& dir) {
    return {dir / "buffer.gcrb", dir / "ensemble.gcnn", dir / "value.gcnn"};
  }
};

inline std::string hex64(std::uint64_t x) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << x;
  return os.str();
}

inline std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + p.string() + "' for hashing");
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return hex64(h);
}

inline void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + p.string() + "'");
}

/// Manifest with config hash, seed and hashes of every produced artifact.
inline void write_manifest(const ExperimentConfig& cfg, const std::string& command, std::uint64_t seed,
                           const fs::path& out, const std::vector<fs::path>& artifacts) {
  json m;
  m["command"] = command;
  m["seed"] = seed;
  m["config_hash"] = hex64(fnv1a(cfg.source_text));
  m["config"] = json::parse(cfg.source_text);
  m["version"] = kVersion;
#ifdef __VERSION__
  m["compiler"] = __VERSION__;
#endif
  m["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  for (const auto& a : artifacts) m["artifacts"][a.filename().string()] = file_hash(a);
  write_text(out / ("manifest_" + command + ".json"), m.dump(2) + "\n");
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& s) {
  Rng rng;
  std::istringstream is(s);
  is >> rng;
  if (!is) throw std::runtime_error("corrupt RNG state");
  return rng;
}

// Stream ids keep the phases' random numbers independent for a given seed.
enum : std::uint64_t { kStreamExplore = 1, kStreamTrain = 2, kStreamEval = 3, kStreamDiagnose = 4 };

// ---------------------------------------------------------------------------
// Exploration

struct ExploreResult {
  std::size_t steps = 0;
  std::size_t episodes = 0;
  std::size_t model_fits = 0;
  std::size_t distinct_cells = 0;  // pointmass only
};

/// Distinct maze cells touched by stored states (pointmass layouts).
inline std::size_t distinct_cells(const ReplayBuffer& buf) {
  std::set<std::pair<long, long>> cells;
  for (std::size_t i = 0; i < buf.num_trajectories(); ++i)
    for (std::size_t t = 0; t <= buf.trajectory(i).length; ++t) {
      const auto s = buf.state(i, t);
      cells.emplace(static_cast<long>(std::floor(s[1])), static_cast<long>(std::floor(s[0])));
    }
  return cells.size();
}

inline std::pair<std::vector<Vector>, std::vector<Vector>> random_episode(const GoalEnv& env, std::size_t steps, Rng& rng) {
  const auto& spec = env.spec();
  std::vector<Vector> states{env.sample_initial_state(rng)}, actions;
  for (std::size_t t = 0; t < steps; ++t) {
    Vector a(static_cast<Eigen::Index>(spec.action_dim));
    for (Eigen::Index d = 0; d < a.size(); ++d)
      a[d] = spec.action_low[d] + (spec.action_high[d] - spec.action_low[d]) * uniform01(rng);
    actions.push_back(a);
    states.push_back(env.step(states.back(), a));
  }
  return {std::move(states), std::move(actions)};
}

/// Uniform-random policy with the exploration step budget and episode resets.
inline ReplayBuffer random_exploration(const GoalEnv& env, std::size_t steps, Rng& rng) {
  const auto& spec = env.spec();
  ReplayBuffer buf(spec.state_dim, spec.action_dim, 2 * steps + 1);
  for (std::size_t done = 0; done < steps;) {
    const std::size_t len = std::min(spec.episode_length, steps - done);
    auto [s, a] = random_episode(env, len, rng);
    buf.append_trajectory(s, a);
    done += len;
  }
  return buf;
}

inline FitReport checked_fit(EnsembleModel& model, const ReplayBuffer& buf, std::size_t epochs, Rng& rng,
                             const fs::path& out, const ArtifactPaths& paths) {
  auto report = fit_ensemble(model, buf, epochs, rng);
  for (double l : report.train_loss)
    if (!std::isfinite(l)) {
      buf.save(paths.buffer.string());
      model.save(paths.ensemble.string());
      throw std::runtime_error("ensemble training produced a non-finite loss; checkpoint written to " + out.string());
    }
  return report;
}

/// Exploration ensemble checkpoint name when a separate planning model is configured.
inline constexpr const char* kExploreEnsembleFile = "ensemble_explore.gcnn";

/// Warm start with random actions, then alternate ensemble refits and
/// intrinsic-cost MPC episodes until the step budget is spent. With a planning
/// model configured, a fresh ensemble of that shape is fit on the final buffer
/// and saved as ensemble.gcnn; the exploration ensemble keeps its own file.
inline ExploreResult cmd_explore(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& out) {
  fs::create_directories(out);
  const auto env = make_env(cfg);
  const auto& spec = env->spec();
  const auto paths = ArtifactPaths::in(out);
  Rng rng = make_rng(seed, kStreamExplore);
  const auto& ex = cfg.exploration;
  ReplayBuffer buf(spec.state_dim, spec.action_dim, ex.buffer_capacity ? ex.buffer_capacity : 2 * ex.steps + 1);
  ExploreResult result;

  while (result.steps < ex.warm_start_steps) {
    const std::size_t len = std::min(spec.episode_length, ex.warm_start_steps - result.steps);
    auto [s, a] = random_episode(*env, len, rng);
    buf.append_trajectory(s, a);
    result.steps += len;
    ++result.episodes;
  }
  EnsembleModel model(spec.state_dim, spec.action_dim, cfg.ensemble, rng);
  checked_fit(model, buf, ex.model_epochs, rng, out, paths);
  ++result.model_fits;
  std::size_t since_fit = 0;

  std::ostringstream log;
  log << "episode,step,best_cost,rejected\n";
  while (result.steps < ex.steps) {
    if (since_fit >= ex.retrain_every) {
      checked_fit(model, buf, ex.model_epochs, rng, out, paths);
      ++result.model_fits;
      since_fit = 0;
    }
    const std::size_t len = std::min(spec.episode_length, ex.steps - result.steps);
    const CostBuilder build = [&](const Vector& s) {
      return intrinsic_cost(ensemble_rollout(model, cfg.propagation), s, cfg.plan_intrinsic, rng);
    };
    const auto on_step = [&](const MpcStepLog& e) {
      log << result.episodes << ',' << e.step << ',' << e.best_cost << ',' << e.rejected << '\n';
    };
    const auto trace = mpc_episode(*env, build, cfg.plan_intrinsic, env->sample_initial_state(rng), std::nullopt, rng, len, on_step);
    buf.append_trajectory(trace.states, trace.actions);
    result.steps += trace.actions.size();
    since_fit += trace.actions.size();
    ++result.episodes;
  }

  buf.save(paths.buffer.string());
  std::vector<fs::path> artifacts{paths.buffer, paths.ensemble, out / "explore_log.csv"};
  if (cfg.planning_model) {
    model.save((out / kExploreEnsembleFile).string());
    artifacts.push_back(out / kExploreEnsembleFile);
    EnsembleModel planner_model(spec.state_dim, spec.action_dim, cfg.planning_model->ensemble, rng);
    checked_fit(planner_model, buf, cfg.planning_model->epochs, rng, out, paths);
    ++result.model_fits;
    planner_model.save(paths.ensemble.string());
  } else {
    model.save(paths.ensemble.string());
  }
  write_text(out / "explore_log.csv", log.str());
  if (cfg.env.type == "pointmass") result.distinct_cells = distinct_cells(buf);
  write_text(out / "explore_summary.json", json{{"steps", result.steps},
                                                {"episodes", result.episodes},
                                                {"model_fits", result.model_fits},
                                                {"distinct_cells", result.distinct_cells}}
                                               .dump(2) + "\n");
  write_manifest(cfg, "explore", seed, out, artifacts);
  return result;
}

// ---------------------------------------------------------------------------
// Value training

struct TrainResult {
  std::size_t epochs_run = 0;
  std::vector<double> critic_loss;  // per epoch
};

inline ReplayBuffer load_buffer(const fs::path& path, const EnvSpec& spec) {
  if (!fs::exists(path)) throw std::runtime_error("missing replay buffer '" + path.string() + "'");
  return ReplayBuffer::load(path.string(), spec.state_dim, spec.action_dim, std::numeric_limits<std::size_t>::max() / 4);
}

inline Td3Agent load_value(const fs::path& path, const Td3Config& cfg) {
  if (!fs::exists(path)) throw std::runtime_error("missing value checkpoint '" + path.string() + "'");
  return Td3Agent::load(path.string(), cfg);
}

inline const EnsembleConfig& planning_ensemble_config(const ExperimentConfig& cfg) {
  return cfg.planning_model ? cfg.planning_model->ensemble : cfg.ensemble;
}

inline EnsembleModel load_ensemble(const fs::path& path, const EnsembleConfig& cfg) {
  if (!fs::exists(path)) throw std::runtime_error("missing ensemble checkpoint '" + path.string() + "'");
  return EnsembleModel::load(path.string(), cfg);
}

inline constexpr double kDivergenceLoss = 1e6;

/// TD3 on relabeled batches from the buffer. With `resume`, continues from the
/// checkpoint and RNG state in `out` so the result equals an uninterrupted run.
inline TrainResult cmd_train(const ExperimentConfig& cfg, std::uint64_t seed, const fs::path& buffer_path,
                             const fs::path& out, bool resume = false, std::optional<std::size_t> stop_after = {}) {
  fs::create_directories(out);
  const auto env = make_env(cfg);
  const auto& spec = env->spec();
  const auto buf = load_buffer(buffer_path, spec);
  const auto relabel = relabel_for(cfg, spec);
  const fs::path ckpt = out / "value.gcnn", state_path = out / "train_state.json", loss_path = out / "train_losses.csv";

  Rng rng = make_rng(seed, kStreamTrain);
  Td3Agent agent;
  std::size_t start_epoch = 0;
  TrainResult result;
  if (resume && fs::exists(ckpt) && fs::exists(state_path)) {
    agent = load_value(ckpt, cfg.td3);
    std::ifstream in(state_path);
    const auto st = json::parse(in);
    start_epoch = st.at("epoch").get<std::size_t>();
    rng = rng_from_state(st.at("rng").get<std::string>());
    result.critic_loss = st.at("critic_loss").get<std::vector<double>>();
  } else {
    agent = Td3Agent(spec, cfg.td3, rng);
    agent.fit_normalizers(buf, spec.goal_indices);
  }
  const std::size_t per_epoch =
      cfg.td3.updates_per_epoch ? cfg.td3.updates_per_epoch : std::max<std::size_t>(1, buf.num_transitions() / cfg.td3.batch_size);

  auto checkpoint = [&](std::size_t epoch) {
    agent.save(ckpt.string());
    write_text(state_path, json{{"epoch", epoch}, {"rng", rng_state(rng)}, {"critic_loss", result.critic_loss}}.dump() + "\n");
    std::ostringstream csv;
    csv << "epoch,critic_loss\n";
    for (std::size_t e = 0; e < result.critic_loss.size(); ++e) csv << e + 1 << ',' << result.critic_loss[e] << '\n';
    write_text(loss_path, csv.str());
  };

  std::size_t epoch = start_epoch;
  for (; epoch < cfg.td3.epochs; ++epoch) {
    if (stop_after && epoch - start_epoch >= *stop_after) break;
    const auto losses = run_td3_updates(agent, buf, relabel, per_epoch, rng);
    result.critic_loss.push_back(losses.critic);
    ++result.epochs_run;
    if (!std::isfinite(losses.critic) || losses.critic > kDivergenceLoss) {
      checkpoint(epoch + 1);
      throw std::runtime_error("value training diverged at epoch " + std::to_string(epoch + 1) +
                               " (critic loss " + std::to_string(losses.critic) + ")");
    }
  }
  checkpoint(epoch);
  write_manifest(cfg, "train", seed, out, {ckpt, loss_path});
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Method { actor, mbp, mbp_agg, mbp_sparse };

inline Method method_from_string(const std::string& m) {
  if (m == "actor") return Method::actor;
  if (m == "mbp") return Method::mbp;
  if (m == "mbp+agg") return Method::mbp_agg;
  if (m == "mbp+sparse") return Method::mbp_sparse;
  throw std::invalid_argument("unknown method '" + m + "' (expected actor, mbp, mbp+agg or mbp+sparse)");
}

inline std::string to_string(Method m) {
  switch (m) {
    case Method::actor: return "actor";
    case Method::mbp: return "mbp";
    case Method::mbp_agg: return "mbp+agg";
    case Method::mbp_sparse: return "mbp+sparse";
  }
  return "?";
}

struct ConfidenceInterval {
  double lo = 0, point = 0, hi = 0;
};

/// Simple percentile bootstrap of the mean.
inline ConfidenceInterval bootstrap_ci(const std::vector<bool>& successes, Rng& rng, double level = 0.90,
                                       std::size_t resamples = 10000) {
  if (successes.empty()) throw std::invalid_argument("bootstrap_ci: empty sample");
  if (!(level > 0 && level < 1) || resamples == 0) throw std::invalid_argument("bootstrap_ci: bad level or resamples");
  const std::size_t n = successes.size();
  const double point = static_cast<double>(std::count(successes.begin(), successes.end(), true)) / static_cast<double>(n);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += successes[uniform_index(rng, n)];
    m = static_cast<double>(hits) / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(resamples - 1);
    const auto i = static_cast<std::size_t>(std::floor(pos));
    const double frac = pos - static_cast<double>(i);
    return i + 1 < resamples ? means[i] * (1 - frac) + means[i + 1] * frac : means[i];
  };
  return {quantile((1 - level) / 2), point, quantile(1 - (1 - level) / 2)};
}

struct EvalReport {
  std::string method;
  std::vector<Vector> goals;
  std::vector<std::vector<bool>> successes;  // [goal][episode]
  double success_rate = 0;
  ConfidenceInterval ci;
  std::vector<EvalTrajectory> trajectories;
};

inline json to_json(const EvalReport& r) {
  json j;
  j["method"] = r.method;
  j["success_rate"] = r.success_rate;
  j["ci90"] = {r.ci.lo, r.ci.hi};
  j["per_goal"] = json::array();
  for (std::size_t g = 0; g < r.goals.size(); ++g)
    j["per_goal"].push_back({{"goal", std::vector<double>(r.goals[g].data(), r.goals[g].data() + r.goals[g].size())},
                             {"successes", r.successes[g]}});
  return j;
}

inline json trajectories_to_json(const std::vector<EvalTrajectory>& trs) {
  json j = json::array();
  for (const auto& t : trs) {
    json states = json::array();
    for (const auto& s : t.states) states.push_back(std::vector<double>(s.data(), s.data() + s.size()));
    j.push_back({{"goal", std::vector<double>(t.goal.data(), t.goal.data() + t.goal.size())},
                 {"success", t.success},
                 {"states", states}});
  }
  return j;
}

inline std::vector<EvalTrajectory> trajectories_from_json(const json& j) {
  std::vector<EvalTrajectory> out;
  for (const auto& t : j) {
    EvalTrajectory tr;
    const auto g = t.at("goal").get<std::vector<double>>();
    tr.goal = Eigen::Map<const Vector>(g.data(), static_cast<Eigen::Index>(g.size()));
    tr.success = t.at("success").get<bool>();
    for (const auto& s : t.at("states")) {
      const auto v = s.get<std::vector<double>>();
      tr.states.emplace_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    out.push_back(std::move(tr));
  }
  return out;
}

inline BatchValueFn learned_value(const Td3Agent& agent) {
  return [&agent](const MatrixF& states, const Vector& g) {
    return agent.value_batch(states, g.cast<float>().replicate(1, states.cols()));
  };
}

inline PairValueFn learned_pair_value(const Td3Agent& agent) {
  return [&agent](const MatrixF& s, const MatrixF& g) { return agent.value_batch(s, g); };
}

/// Default evaluation goals when the config lists none: the last free cell (pointmass),
/// the far end (chain), or the clockwise pad sequence (pinpad).
inline std::vector<Vector> eval_goals(const ExperimentConfig& cfg, const GoalEnv& env) {
  if (!cfg.eval.goals.empty()) {
    for (const auto& g : cfg.eval.goals)
      if (static_cast<std::size_t>(g.size()) != env.spec().goal_dim) throw std::invalid_argument("config: eval goal has wrong dimension");
    return cfg.eval.goals;
  }
  if (cfg.env.type == "chain") return {Vector::Constant(1, static_cast<double>(cfg.env.chain_size - 1))};
  if (cfg.env.type == "pinpad") return {(Vector(3) << 1, 2, 3).finished()};
  const auto& layout = static_cast<const PointMassMaze&>(env).layout();
  for (long r = static_cast<long>(layout.rows()) - 1; r >= 0; --r)
    for (long c = static_cast<long>(layout.cols()) - 1; c >= 0; --c)
      if (layout.is_free(Cell{static_cast<int>(r), static_cast<int>(c)})) return {(Vector(2) << c + 0.5, r + 0.5).finished()};
  throw std::invalid_argument("layout has no free cell");
}

/// Runs episodes_per_goal episodes per goal with the chosen controller.
inline EvalReport cmd_eval(const ExperimentConfig& cfg, std::uint64_t seed, Method method, const ArtifactPaths& paths,
                           const fs::path& out) {
  const auto env = make_env(cfg);
  const auto& spec = env->spec();
  const bool needs_value = method != Method::mbp_sparse;
  const bool needs_model = method != Method::actor;
  const bool needs_buffer = method == Method::mbp_agg;
  if (needs_value && !fs::exists(paths.value)) throw std::runtime_error("missing value checkpoint '" + paths.value.string() + "'");
  if (needs_model && !fs::exists(paths.ensemble)) throw std::runtime_error("missing ensemble checkpoint '" + paths.ensemble.string() + "'");
  if (needs_buffer && !fs::exists(paths.buffer)) throw std::runtime_error("missing replay buffer '" + paths.buffer.string() + "'");

  Td3Agent agent;
  EnsembleModel model;
  ReplayBuffer buf(spec.state_dim, spec.action_dim, 1);
  if (needs_value) agent = load_value(paths.value, cfg.td3);
  if (needs_model) model = load_ensemble(paths.ensemble, planning_ensemble_config(cfg));
  if (needs_buffer) buf = load_buffer(paths.buffer, spec);

  Rng rng = make_rng(seed, kStreamEval);
  EvalReport report;
  report.method = to_string(method);
  report.goals = eval_goals(cfg, *env);
  std::vector<bool> all;
  for (const auto& g : report.goals) {
    auto& flags = report.successes.emplace_back();
    for (std::size_t ep = 0; ep < cfg.eval.episodes_per_goal; ++ep) {
      const Vector s0 = env->sample_initial_state(rng);
      EvalTrajectory tr;
      tr.goal = g;
      if (method == Method::actor) {
        tr.states.push_back(s0);
        tr.success = goal_reward(spec, s0, g).done;
        for (std::size_t t = 0; t < spec.episode_length && !tr.success; ++t) {
          const Vector a = agent.act(tr.states.back().cast<float>(), g.cast<float>()).col(0).cast<double>();
          tr.states.push_back(env->step(tr.states.back(), a));
          tr.success = goal_reward(spec, tr.states.back(), g).done;
        }
      } else {
        const RolloutFn rollout = ensemble_rollout(model, cfg.eval.propagation);
        std::optional<ValueGraph> graph;
        CostBuilder build;
        if (method == Method::mbp) {
          build = [&](const Vector& s) { return extrinsic_cost(rollout, learned_value(agent), spec, s, g, cfg.plan_extrinsic, rng); };
        } else if (method == Method::mbp_sparse) {
          build = [&](const Vector& s) { return sparse_cost(rollout, spec, s, g, cfg.plan_extrinsic, rng); };
        } else {
          graph = build_graph(buf, learned_pair_value(agent), *env, s0, g, cfg.graph, rng);
          finalize_graph(*graph);
          build = [&](const Vector& s) {
            if (query_aggregated_value(*graph, learned_pair_value(agent), s) <= 0)
              reinsert_source(*graph, learned_pair_value(agent), *env, s);
            return extrinsic_cost(rollout, aggregated_value_fn(*graph, learned_pair_value(agent)), spec, s, g,
                                  cfg.plan_extrinsic, rng);
          };
        }
        const auto trace = mpc_episode(*env, build, cfg.plan_extrinsic, s0, g, rng);
        tr.states = trace.states;
        tr.success = trace.success;
      }
      flags.push_back(tr.success);
      all.push_back(tr.success);
      report.trajectories.push_back(std::move(tr));
    }
  }
  report.success_rate = static_cast<double>(std::count(all.begin(), all.end(), true)) / static_cast<double>(all.size());
  report.ci = bootstrap_ci(all, rng);

  fs::create_directories(out);
  std::string tag = report.method;
  std::replace(tag.begin(), tag.end(), '+', '_');
  const fs::path report_path = out / ("eval_" + tag + ".json"), traj_path = out / ("eval_" + tag + "_trajectories.json");
  write_text(report_path, to_json(report).dump(2) + "\n");
  write_text(traj_path, trajectories_to_json(report.trajectories).dump() + "\n");
  write_manifest(cfg, "eval_" + tag, seed, out, {report_path, traj_path});
  return report;
}

// ---------------------------------------------------------------------------
// Diagnostics over evaluation trajectories

/// Non-monotonicity and sampled-optimum occurrence on saved evaluation trajectories;
/// on chain environments also the exact optima of the learned value per goal.
inline json cmd_diagnose(const ExperimentConfig& cfg, std::uint64_t seed, const ArtifactPaths& paths, const fs::path& out) {
  const auto env = make_env(cfg);
  const auto& spec = env->spec();
  std::string tag = cfg.diagnose.method;
  method_from_string(tag);
  std::replace(tag.begin(), tag.end(), '+', '_');
  const fs::path traj_path = out / ("eval_" + tag + "_trajectories.json");
  if (!fs::exists(traj_path)) throw std::runtime_error("missing evaluation trajectories '" + traj_path.string() + "'");
  const auto agent = load_value(paths.value, cfg.td3);
  const auto model = load_ensemble(paths.ensemble, planning_ensemble_config(cfg));
  const auto buf = load_buffer(paths.buffer, spec);
  std::ifstream in(traj_path);
  const auto trajectories = trajectories_from_json(json::parse(in));

  Rng rng = make_rng(seed, kStreamDiagnose);
  PropagationConfig prop{1, true, false, false};
  const auto value = learned_value(agent);
  const auto flag = [&](const Vector& s, const Vector& g) {
    return estimate_optimum_sampled(s, g, value, ensemble_rollout(model, prop), spec, buf, cfg.diagnose.sampled, rng);
  };
  const auto summary = trajectory_reports(trajectories, value, cfg.diagnose.sampled.horizon, flag);
  json report = to_json(summary);
  report["method"] = cfg.diagnose.method;
  report["sampled"] = {{"horizon", cfg.diagnose.sampled.horizon},
                       {"n_random", cfg.diagnose.sampled.n_random},
                       {"n_next", cfg.diagnose.sampled.n_next}};

  if (cfg.env.type == "chain") {
    const auto& chain = static_cast<const ChainEnv&>(*env);
    report["exact"] = json::array();
    for (std::size_t g = 0; g < chain.size(); ++g) {
      const auto mdp = chain.tabular(g);
      MatrixF states(1, static_cast<Eigen::Index>(chain.size()));
      for (std::size_t s = 0; s < chain.size(); ++s) states(0, static_cast<Eigen::Index>(s)) = static_cast<float>(s);
      const VectorF v = value(states, Vector::Constant(1, static_cast<double>(g)));
      auto r = to_json(find_exact_optima(mdp, [&](std::size_t s) { return static_cast<double>(v[static_cast<Eigen::Index>(s)]); }));
      r["goal"] = g;
      report["exact"].push_back(r);
    }
  }
  const fs::path json_path = out / "diagnose.json", csv_path = out / "diagnose.csv";
  write_text(json_path, report.dump(2) + "\n");
  write_text(csv_path, to_csv(summary));
  write_manifest(cfg, "diagnose", seed, out, {json_path, csv_path});
  return report;
}

}  // namespace curioplan
