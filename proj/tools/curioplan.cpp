// curioplan explore|train|eval|diagnose --config <path.json> [--seed N] [--method M] [--out DIR]

#include "curioplan/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace curioplan;

int main(int argc, char** argv) {
  CLI::App app{"Curiosity-driven exploration, goal-conditioned values and model-based planning"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1, 1);

  std::string config_path, out_dir, method = "mbp";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> stop_after;
  bool resume = false;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "overrides the config seed");
    sub->add_option("--out", out_dir, "artifact directory; defaults to the config's out_dir");
  };
  auto* explore = app.add_subcommand("explore", "collect a replay buffer with curiosity-driven MPC");
  auto* train = app.add_subcommand("train", "fit the goal-conditioned value on the buffer");
  auto* eval = app.add_subcommand("eval", "evaluate a controller on the goal set");
  auto* diagnose = app.add_subcommand("diagnose", "non-monotonicity and local-optimum reports on evaluation runs");
  for (auto* sub : {explore, train, eval, diagnose}) common(sub);
  train->add_flag("--resume", resume, "continue from train_state.json in the output directory");
  train->add_option("--stop-after", stop_after, "stop after this many epochs (for checkpointed runs)");
  eval->add_option("--method", method, "actor | mbp | mbp+agg | mbp+sparse");
  auto* diag_method = diagnose->add_option("--method", method, "which evaluation run to analyse; defaults to the config");

  CLI11_PARSE(app, argc, argv);

  try {
    auto cfg = load_config(config_path);
    const std::uint64_t s = seed.value_or(cfg.seed);
    const fs::path out = out_dir.empty() ? cfg.out_dir : fs::path(out_dir);
    const auto paths = ArtifactPaths::in(out);

    if (explore->parsed()) {
      const auto r = cmd_explore(cfg, s, out);
      std::cout << "explored " << r.steps << " steps in " << r.episodes << " episodes (" << r.model_fits
                << " model fits)";
      if (cfg.env.type == "pointmass") std::cout << ", " << r.distinct_cells << " distinct cells";
      std::cout << "\n";
    } else if (train->parsed()) {
      const auto r = cmd_train(cfg, s, paths.buffer, out, resume, stop_after);
      std::cout << "trained " << r.epochs_run << " epochs";
      if (!r.critic_loss.empty()) std::cout << ", final critic loss " << r.critic_loss.back();
      std::cout << "\n";
    } else if (eval->parsed()) {
      const auto r = cmd_eval(cfg, s, method_from_string(method), paths, out);
      std::cout << r.method << ": success rate " << r.success_rate << " (90% CI " << r.ci.lo << " - " << r.ci.hi
                << ")\n";
    } else {
      if (diag_method->count()) cfg.diagnose.method = to_string(method_from_string(method));
      const auto r = cmd_diagnose(cfg, s, paths, out);
      std::cout << r["median_non_monotonicity"].dump() << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
