#include "curioplan/harness.hpp"

#include <gtest/gtest.h>

using namespace curioplan;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("curioplan_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

json small_maze_config() {
  return json::parse(R"({
    "env": {"type": "pointmass", "layout": "maze.txt", "episode_length": 20, "goal_epsilon": 0.5},
    "exploration": {"steps": 120, "warm_start_steps": 60, "retrain_every": 20, "model_epochs": 2},
    "ensemble": {"members": 3, "elites": 2, "hidden_layers": 1, "hidden_units": 16, "batch_size": 16},
    "propagation": {"particles": 1, "mean_mode": true, "sample": false},
    "td3": {"hidden_layers": 1, "hidden_units": 16, "batch_size": 32, "epochs": 2, "updates_per_epoch": 5},
    "plan_intrinsic": {"horizon": 4, "iterations": 2, "population": 20, "elite_ratio": 0.1},
    "plan_extrinsic": {"horizon": 4, "iterations": 2, "population": 20, "elite_ratio": 0.1},
    "graph": {"n_vertices": 10},
    "eval": {"episodes_per_goal": 2, "goals": [[3.5, 1.5]]},
    "diagnose": {"method": "mbp", "horizon": 2, "n_random": 10, "n_next": 10}
  })");
}

ExperimentConfig maze_config(const fs::path& dir, json j = small_maze_config()) {
  write_text(dir / "maze.txt", "######\n#S...#\n#.##.#\n######\n");
  return config_from_json(j, dir);
}

json chain_config() {
  return json::parse(R"({
    "env": {"type": "chain", "chain_size": 5, "episode_length": 10, "gamma": 0.8},
    "td3": {"hidden_layers": 2, "hidden_units": 64, "critic_lr": 1e-3, "actor_lr": 1e-3, "batch_size": 256,
            "epochs": 20, "updates_per_epoch": 1000},
    "relabel": {"p_g": 0.75, "p_geo": 0.2},
    "plan_extrinsic": {"horizon": 2, "iterations": 2, "population": 20, "elite_ratio": 0.1},
    "eval": {"episodes_per_goal": 3, "goals": [[0]]},
    "diagnose": {"method": "actor", "horizon": 1, "n_random": 10, "n_next": 10}
  })");
}

ReplayBuffer chain_buffer(const ChainEnv& env, std::size_t trajectories, std::size_t length, Rng& rng) {
  ReplayBuffer buf(1, 1, trajectories * length + 1);
  for (std::size_t i = 0; i < trajectories; ++i) {
    std::vector<Vector> states{Vector::Constant(1, static_cast<double>(uniform_index(rng, env.size())))}, actions;
    for (std::size_t t = 0; t < length; ++t) {
      actions.push_back(Vector::Constant(1, 2 * uniform01(rng) - 1));
      states.push_back(env.step(states.back(), actions.back()));
    }
    buf.append_trajectory(states, actions);
  }
  return buf;
}

}  // namespace

TEST(Config, ParsesAndRejectsBadInput) {
  const auto dir = scratch("config");
  const auto cfg = maze_config(dir);
  EXPECT_EQ(cfg.env.layout, dir / "maze.txt");
  EXPECT_EQ(cfg.plan_intrinsic.population, 20u);
  EXPECT_EQ(cfg.td3.gamma, cfg.env.gamma);
  EXPECT_EQ(cfg.eval.goals.size(), 1u);

  auto j = small_maze_config();
  j["exploration"]["stepz"] = 3;
  EXPECT_THROW(config_from_json(j, dir), std::invalid_argument);
  j = small_maze_config();
  j["env"]["layout"] = "absent.txt";
  EXPECT_THROW(config_from_json(j, dir), std::invalid_argument);
  j = small_maze_config();
  j["exploration"]["steps"] = 0;
  EXPECT_THROW(config_from_json(j, dir), std::invalid_argument);
  j = small_maze_config();
  j["exploration"]["warm_start_steps"] = 500;
  EXPECT_THROW(config_from_json(j, dir), std::invalid_argument);
  j = small_maze_config();
  j["plan_intrinsic"]["elite_ratio"] = 0.01;  // 20 * 0.01 < 2 elites
  EXPECT_THROW(config_from_json(j, dir), std::invalid_argument);
  EXPECT_THROW(load_config(dir / "nope.json"), std::runtime_error);
}

TEST(Bootstrap, DegenerateAndMixedSamples) {
  Rng rng = make_rng(1);
  const auto ones = bootstrap_ci(std::vector<bool>(10, true), rng);
  EXPECT_EQ(ones.lo, 1.0);
  EXPECT_EQ(ones.point, 1.0);
  EXPECT_EQ(ones.hi, 1.0);
  const auto zeros = bootstrap_ci(std::vector<bool>(10, false), rng);
  EXPECT_EQ(zeros.lo, 0.0);
  EXPECT_EQ(zeros.hi, 0.0);

  std::vector<bool> mixed(10, false);
  std::fill(mixed.begin(), mixed.begin() + 6, true);
  const auto ci = bootstrap_ci(mixed, rng);
  EXPECT_DOUBLE_EQ(ci.point, 0.6);
  EXPECT_LT(ci.lo, 0.6);
  EXPECT_GT(ci.hi, 0.6);
  // Resampled means are multiples of 1/10; Binomial(10, 0.6) puts < 5% below 0.3 or above 0.9.
  EXPECT_GE(ci.lo, 0.3);
  EXPECT_LE(ci.hi, 0.9);
  EXPECT_THROW(bootstrap_ci({}, rng), std::invalid_argument);
}

TEST(Explore, WarmStartOnlyBudget) {
  const auto dir = scratch("warm");
  auto j = small_maze_config();
  j["exploration"]["steps"] = 60;
  const auto cfg = maze_config(dir, j);
  const auto r = cmd_explore(cfg, 3, dir / "run");
  EXPECT_EQ(r.steps, 60u);
  EXPECT_EQ(r.model_fits, 1u);
  EXPECT_EQ(r.episodes, 3u);
  const auto buf = load_buffer(dir / "run" / "buffer.gcrb", make_env(cfg)->spec());
  EXPECT_EQ(buf.num_transitions(), 60u);
  EXPECT_EQ(slurp(dir / "run" / "explore_log.csv"), "episode,step,best_cost,rejected\n");
  EXPECT_TRUE(fs::exists(dir / "run" / "manifest_explore.json"));
}

TEST(Explore, DeterministicForFixedSeed) {
  const auto dir = scratch("explore_det");
  const auto cfg = maze_config(dir);
  const auto a = cmd_explore(cfg, 7, dir / "a");
  cmd_explore(cfg, 7, dir / "b");
  cmd_explore(cfg, 8, dir / "c");
  EXPECT_EQ(a.steps, 120u);
  EXPECT_EQ(a.model_fits, 3u);  // warm start, then after 20 and 40 planned steps
  EXPECT_EQ(file_hash(dir / "a" / "buffer.gcrb"), file_hash(dir / "b" / "buffer.gcrb"));
  EXPECT_EQ(file_hash(dir / "a" / "ensemble.gcnn"), file_hash(dir / "b" / "ensemble.gcnn"));
  EXPECT_NE(file_hash(dir / "a" / "buffer.gcrb"), file_hash(dir / "c" / "buffer.gcrb"));
  const auto manifest = json::parse(slurp(dir / "a" / "manifest_explore.json"));
  EXPECT_EQ(manifest["artifacts"]["buffer.gcrb"], file_hash(dir / "a" / "buffer.gcrb"));
  EXPECT_EQ(manifest["seed"], 7);
}

TEST(Explore, PlanningModelRefitsOnFinalBuffer) {
  const auto dir = scratch("planning_model");
  auto j = small_maze_config();
  j["planning_model"] = {{"hidden_layers", 2}, {"hidden_units", 8}, {"epochs", 1}};
  const auto cfg = maze_config(dir, j);
  ASSERT_TRUE(cfg.planning_model);
  EXPECT_EQ(cfg.planning_model->ensemble.members, 3u);  // inherited from "ensemble"
  EXPECT_EQ(cfg.planning_model->ensemble.hidden_layers, 2u);
  const auto r = cmd_explore(cfg, 7, dir / "run");
  EXPECT_EQ(r.model_fits, 4u);
  EXPECT_NE(file_hash(dir / "run" / "ensemble.gcnn"), file_hash(dir / "run" / "ensemble_explore.gcnn"));
  const auto manifest = json::parse(slurp(dir / "run" / "manifest_explore.json"));
  EXPECT_EQ(manifest["artifacts"]["ensemble_explore.gcnn"], file_hash(dir / "run" / "ensemble_explore.gcnn"));

  j["planning_model"]["epochs"] = 0;
  EXPECT_THROW(maze_config(dir, j), std::invalid_argument);
  j["planning_model"] = {{"hidden_layer", 2}};
  EXPECT_THROW(maze_config(dir, j), std::invalid_argument);
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  const auto dir = scratch("train0");
  auto j = small_maze_config();
  const auto cfg0 = maze_config(dir, j);
  cmd_explore(cfg0, 1, dir);
  j["td3"]["epochs"] = 0;
  const auto cfg = config_from_json(j, dir);
  cmd_train(cfg, 5, dir / "buffer.gcrb", dir / "t");

  const auto env = make_env(cfg);
  Rng rng = make_rng(5, kStreamTrain);
  Td3Agent init(env->spec(), cfg.td3, rng);
  init.fit_normalizers(load_buffer(dir / "buffer.gcrb", env->spec()), env->spec().goal_indices);
  init.save((dir / "init.gcnn").string());
  EXPECT_EQ(file_hash(dir / "init.gcnn"), file_hash(dir / "t" / "value.gcnn"));
}

TEST(Train, ResumeEqualsUninterrupted) {
  const auto dir = scratch("resume");
  auto j = small_maze_config();
  j["td3"]["epochs"] = 4;
  const auto cfg = maze_config(dir, j);
  cmd_explore(cfg, 1, dir);
  const auto full = cmd_train(cfg, 9, dir / "buffer.gcrb", dir / "full");
  const auto part = cmd_train(cfg, 9, dir / "buffer.gcrb", dir / "split", false, 1);
  EXPECT_EQ(part.epochs_run, 1u);
  const auto rest = cmd_train(cfg, 9, dir / "buffer.gcrb", dir / "split", true);
  EXPECT_EQ(rest.epochs_run, 3u);
  EXPECT_EQ(rest.critic_loss, full.critic_loss);
  EXPECT_EQ(file_hash(dir / "full" / "value.gcnn"), file_hash(dir / "split" / "value.gcnn"));
  EXPECT_EQ(slurp(dir / "full" / "train_losses.csv"), slurp(dir / "split" / "train_losses.csv"));
}

TEST(Train, MissingBufferIsNamed) {
  const auto dir = scratch("nobuf");
  const auto cfg = maze_config(dir);
  try {
    cmd_train(cfg, 1, dir / "buffer.gcrb", dir);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("missing replay buffer"), std::string::npos);
  }
}

// Same target as the value module's chain check, driven through the command.
TEST(Train, ChainBufferMatchesShiftedOracle) {
  const auto dir = scratch("chain");
  const auto cfg = config_from_json(chain_config(), dir);
  const ChainEnv env(5, 10, 0.8);
  Rng rng = make_rng(8);
  chain_buffer(env, 400, 10, rng).save((dir / "buffer.gcrb").string());
  cmd_train(cfg, 2, dir / "buffer.gcrb", dir);
  const auto agent = load_value(dir / "value.gcnn", cfg.td3);
  double worst = 0;
  for (std::size_t g = 0; g < 5; ++g) {
    const auto dist = shortest_steps_to(env.tabular(g), g);
    for (std::size_t s = 0; s < 5; ++s) {
      const double expected = std::pow(0.8, std::max<double>(static_cast<double>(dist[s]) - 1.0, 0.0));
      worst = std::max(worst, std::abs(agent.value(Vector::Constant(1, double(s)), Vector::Constant(1, double(g))) - expected));
    }
  }
  EXPECT_LT(worst, 0.1);
}

TEST(Eval, MissingArtifactsAreNamed) {
  const auto dir = scratch("missing");
  const auto cfg = maze_config(dir);
  auto j = small_maze_config();
  j["exploration"]["steps"] = 60;
  cmd_explore(config_from_json(j, dir), 1, dir);
  const auto paths = ArtifactPaths::in(dir);
  try {
    cmd_eval(cfg, 1, Method::actor, paths, dir);
    FAIL();
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("missing value checkpoint"), std::string::npos);
  }
  fs::remove(paths.ensemble);
  EXPECT_THROW(cmd_eval(cfg, 1, Method::mbp_sparse, paths, dir), std::runtime_error);
  EXPECT_THROW(method_from_string("mpc"), std::invalid_argument);
  EXPECT_EQ(method_from_string("mbp+agg"), Method::mbp_agg);
}

TEST(Eval, GoalAtStartAlwaysSucceeds) {
  const auto dir = scratch("trivial");
  auto j = chain_config();
  j["td3"]["epochs"] = 0;
  const auto cfg = config_from_json(j, dir);
  Rng rng = make_rng(1);
  chain_buffer(ChainEnv(5, 10, 0.8), 10, 5, rng).save((dir / "buffer.gcrb").string());
  cmd_train(cfg, 1, dir / "buffer.gcrb", dir);
  const auto report = cmd_eval(cfg, 1, Method::actor, ArtifactPaths::in(dir), dir);
  EXPECT_EQ(report.success_rate, 1.0);
  EXPECT_EQ(report.ci.lo, 1.0);
  EXPECT_EQ(report.ci.hi, 1.0);
  EXPECT_EQ(report.successes.front().size(), 3u);
  EXPECT_TRUE(fs::exists(dir / "eval_actor.json"));
}

TEST(Pipeline, AllMethodsRunDeterministicallyAndDiagnose) {
  const auto dir = scratch("pipeline");
  const auto cfg = maze_config(dir);
  const auto paths = ArtifactPaths::in(dir);
  cmd_explore(cfg, 4, dir);
  cmd_train(cfg, 4, paths.buffer, dir);
  for (auto m : {Method::actor, Method::mbp, Method::mbp_agg, Method::mbp_sparse}) {
    const auto a = cmd_eval(cfg, 11, m, paths, dir / "a");
    const auto b = cmd_eval(cfg, 11, m, paths, dir / "b");
    EXPECT_EQ(to_json(a), to_json(b)) << to_string(m);
    EXPECT_LE(a.ci.lo, a.success_rate);
    EXPECT_LE(a.success_rate, a.ci.hi);
    EXPECT_EQ(a.trajectories.size(), 2u);
    for (const auto& t : a.trajectories) EXPECT_LE(t.states.size(), cfg.env.episode_length + 1);
  }
  cmd_eval(cfg, 11, Method::mbp, paths, dir);
  const auto report = cmd_diagnose(cfg, 11, paths, dir);
  EXPECT_EQ(report["method"], "mbp");
  EXPECT_TRUE(fs::exists(dir / "diagnose.csv"));
  EXPECT_TRUE(fs::exists(dir / "manifest_diagnose.json"));
}

TEST(Diagnose, ChainReportsExactOptima) {
  const auto dir = scratch("chain_diag");
  auto j = chain_config();
  j["td3"]["epochs"] = 1;
  j["td3"]["updates_per_epoch"] = 10;
  const auto cfg = config_from_json(j, dir);
  Rng rng = make_rng(2);
  chain_buffer(ChainEnv(5, 10, 0.8), 20, 5, rng).save((dir / "buffer.gcrb").string());
  cmd_train(cfg, 1, dir / "buffer.gcrb", dir);
  EnsembleModel(1, 1, cfg.ensemble, rng).save((dir / "ensemble.gcnn").string());
  cmd_eval(cfg, 1, Method::actor, ArtifactPaths::in(dir), dir);
  const auto report = cmd_diagnose(cfg, 1, ArtifactPaths::in(dir), dir);
  ASSERT_EQ(report["exact"].size(), 5u);
  EXPECT_EQ(report["exact"][0]["method"], "exact");
}
