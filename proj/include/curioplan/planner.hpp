#pragma once

// iCEM trajectory optimization with colored-noise sampling, an exhaustive
// planner for tabular MDPs, receding-horizon control, and planning costs.

#include "curioplan/dynamics.hpp"
#include "curioplan/env.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <vector>

namespace curioplan {

struct PlanConfig {
  std::size_t horizon = 30;
  std::size_t iterations = 3;
  std::size_t population = 400;
  double elite_ratio = 0.01;
  double alpha = 0.1;
  double noise_exponent = 3.0;
  double kept_elite_fraction = 0.3;
  std::size_t n_particles = 20;
  std::optional<double> variance_reject_threshold;
  double init_std_fraction = 0.5;  // sigma_0 = fraction * (high - low)
  bool record_candidates = false;

  std::size_t n_elites() const {
    return static_cast<std::size_t>(std::floor(static_cast<double>(population) * elite_ratio + 1e-9));
  }

  void validate() const {
    if (horizon == 0) throw std::invalid_argument("PlanConfig: horizon must be >= 1");
    if (iterations == 0) throw std::invalid_argument("PlanConfig: iterations must be >= 1");
    if (n_elites() < 2) throw std::invalid_argument("PlanConfig: population * elite_ratio must be >= 2");
    if (n_elites() > population) throw std::invalid_argument("PlanConfig: elite_ratio must be <= 1");
    if (!(alpha >= 0 && alpha <= 1)) throw std::invalid_argument("PlanConfig: alpha must lie in [0,1]");
    if (!(kept_elite_fraction >= 0 && kept_elite_fraction <= 1))
      throw std::invalid_argument("PlanConfig: kept_elite_fraction must lie in [0,1]");
    if (n_particles == 0) throw std::invalid_argument("PlanConfig: n_particles must be >= 1");
    if (!(init_std_fraction > 0)) throw std::invalid_argument("PlanConfig: init_std_fraction must be positive");
  }
};

struct PlanResult {
  Matrix best;                       // horizon x action_dim
  double best_cost = std::numeric_limits<double>::infinity();
  std::vector<double> trace;         // best-so-far cost after each iteration
  std::size_t evaluated = 0;
  std::size_t rejected = 0;          // non-finite costs
  std::vector<std::pair<Matrix, double>> candidates;  // when record_candidates
};

/// Candidate action sequences (each horizon x action_dim) -> cost per candidate.
using CostFn = std::function<Eigen::VectorXd(const std::vector<Matrix>&)>;

// ---------------------------------------------------------------------------
// Colored noise

/// Standard deviation of one sample of the synthesized series before normalization.
inline double colored_noise_raw_std(double beta, std::size_t n) {
  double acc = 0.0;
  const double nd = static_cast<double>(n);
  for (std::size_t k = 0; k <= n / 2; ++k) {
    const double f = std::max(static_cast<double>(k), 1.0) / nd;
    const double s2 = std::pow(f, -beta);
    const bool real_only = k == 0 || (n % 2 == 0 && k == n / 2);
    acc += real_only ? s2 : 4.0 * s2;
  }
  return std::sqrt(acc) / nd;
}

/// horizon x dim samples with power spectrum ~ 1/f^beta, unit variance per entry.
/// Inverse real DFT of a white spectrum scaled by f^(-beta/2); the lowest
/// nonzero frequency stands in for f=0 so the constant offset keeps finite weight.
inline Matrix colored_noise(double beta, std::size_t horizon, std::size_t dim, Rng& rng) {
  if (horizon == 0) throw std::invalid_argument("colored_noise: horizon must be >= 1");
  const std::size_t n = horizon, half = n / 2;
  const double nd = static_cast<double>(n);
  const double norm = colored_noise_raw_std(beta, n);
  Matrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  std::vector<double> re(half + 1), im(half + 1);
  for (std::size_t d = 0; d < dim; ++d) {
    for (std::size_t k = 0; k <= half; ++k) {
      const double scale = std::pow(std::max(static_cast<double>(k), 1.0) / nd, -beta / 2.0);
      const bool real_only = k == 0 || (n % 2 == 0 && k == half);
      re[k] = scale * standard_normal(rng);
      im[k] = real_only ? 0.0 : scale * standard_normal(rng);
    }
    for (std::size_t t = 0; t < n; ++t) {
      double x = re[0];
      for (std::size_t k = 1; k <= half; ++k) {
        const double w = 2.0 * std::numbers::pi * static_cast<double>(k * t) / nd;
        const double c = (n % 2 == 0 && k == half) ? 1.0 : 2.0;
        x += c * (re[k] * std::cos(w) - im[k] * std::sin(w));
      }
      out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d)) = x / nd / norm;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// iCEM

/// Minimizes `cost` over action sequences in [low, high]^(horizon x dim).
/// Iteration 0 also scores `init_mean`; kept elites carry over between
/// iterations and the best-so-far sequence is re-scored on the final one.
inline PlanResult icem_optimize(const CostFn& cost, const PlanConfig& cfg, const Vector& low, const Vector& high,
                                const Matrix& init_mean, Rng& rng) {
  cfg.validate();
  const auto H = static_cast<Eigen::Index>(cfg.horizon);
  const Eigen::Index A = low.size();
  if (high.size() != A || init_mean.rows() != H || init_mean.cols() != A)
    throw std::invalid_argument("icem_optimize: shape mismatch between bounds, horizon and init_mean");
  const Eigen::RowVectorXd lo = low.transpose(), hi = high.transpose();
  auto clip = [&](Matrix m) {
    for (Eigen::Index t = 0; t < H; ++t) m.row(t) = m.row(t).cwiseMax(lo).cwiseMin(hi);
    return m;
  };

  Matrix mean = clip(init_mean);
  Matrix std = ((hi - lo) * cfg.init_std_fraction).replicate(H, 1);
  const std::size_t n_elites = cfg.n_elites();
  const auto n_keep = static_cast<std::size_t>(std::floor(cfg.kept_elite_fraction * static_cast<double>(n_elites)));

  PlanResult result;
  result.best = mean;
  std::vector<Matrix> kept;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<Matrix> pop;
    pop.reserve(cfg.population + kept.size() + 2);
    for (std::size_t i = 0; i < cfg.population; ++i) {
      const Matrix noise = colored_noise(cfg.noise_exponent, cfg.horizon, static_cast<std::size_t>(A), rng);
      pop.push_back(clip(mean + std.cwiseProduct(noise)));
    }
    for (auto& k : kept) pop.push_back(k);
    if (it == 0) pop.push_back(mean);
    if (it + 1 == cfg.iterations && std::isfinite(result.best_cost)) pop.push_back(result.best);

    const Eigen::VectorXd costs = cost(pop);
    if (costs.size() != static_cast<Eigen::Index>(pop.size()))
      throw std::runtime_error("icem_optimize: cost function returned wrong number of values");
    result.evaluated += pop.size();
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < pop.size(); ++i) {
      if (std::isfinite(costs[static_cast<Eigen::Index>(i)]))
        order.push_back(i);
      else
        ++result.rejected;
      if (cfg.record_candidates) result.candidates.emplace_back(pop[i], costs[static_cast<Eigen::Index>(i)]);
    }
    if (order.empty() && !std::isfinite(result.best_cost))
      throw std::runtime_error("icem_optimize: every candidate has a non-finite cost");
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
      return costs[static_cast<Eigen::Index>(a)] < costs[static_cast<Eigen::Index>(b)];
    });

    if (!order.empty() && costs[static_cast<Eigen::Index>(order[0])] < result.best_cost) {
      result.best_cost = costs[static_cast<Eigen::Index>(order[0])];
      result.best = pop[order[0]];
    }
    result.trace.push_back(result.best_cost);

    const std::size_t ne = std::min(n_elites, order.size());
    if (ne > 0) {
      Matrix e_mean = Matrix::Zero(H, A), e_sq = Matrix::Zero(H, A);
      for (std::size_t j = 0; j < ne; ++j) {
        e_mean += pop[order[j]];
        e_sq += pop[order[j]].cwiseProduct(pop[order[j]]);
      }
      e_mean /= static_cast<double>(ne);
      const Matrix e_std = (e_sq / static_cast<double>(ne) - e_mean.cwiseProduct(e_mean)).cwiseMax(0.0).cwiseSqrt();
      mean = cfg.alpha * mean + (1.0 - cfg.alpha) * e_mean;
      std = cfg.alpha * std + (1.0 - cfg.alpha) * e_std;
    }
    kept.clear();
    for (std::size_t j = 0; j < std::min(n_keep, order.size()); ++j) kept.push_back(pop[order[j]]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Exhaustive planning on tabular MDPs

struct ExhaustivePlan {
  std::vector<std::size_t> actions;
  std::vector<std::size_t> states;  // s_1 .. s_H
};

/// Maximizes V(s_H) over all action sequences of length H; ties prefer the
/// larger V(s_1), then the lexicographically smallest action sequence.
template <class ValueFn>
ExhaustivePlan exhaustive_plan(const DiscreteMDP& mdp, ValueFn&& value, std::size_t s0, std::size_t horizon) {
  if (horizon == 0) throw std::invalid_argument("exhaustive_plan: horizon must be >= 1");
  if (s0 >= mdp.n_states) throw std::invalid_argument("exhaustive_plan: start state out of range");
  std::vector<std::size_t> seq(horizon, 0), states(horizon);
  ExhaustivePlan best;
  double best_final = -std::numeric_limits<double>::infinity(), best_first = best_final;
  while (true) {
    std::size_t s = s0;
    for (std::size_t t = 0; t < horizon; ++t) states[t] = s = mdp.next(s, seq[t]);
    const double vf = value(states.back()), v1 = value(states.front());
    if (vf > best_final || (vf == best_final && v1 > best_first)) {
      best_final = vf;
      best_first = v1;
      best.actions = seq;
      best.states = states;
    }
    std::size_t pos = horizon;
    while (pos > 0 && ++seq[pos - 1] == mdp.n_actions) seq[--pos] = 0;
    if (pos == 0) break;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Imagined rollouts and costs

/// Rolls candidate action batches (actions[t]: action_dim x P) forward from s0.
using RolloutFn = std::function<Rollout(const VectorF& s0, const std::vector<MatrixF>& actions, Rng& rng)>;

/// Batched value over state columns for a fixed goal.
using BatchValueFn = std::function<VectorF(const MatrixF& states, const Vector& goal)>;

inline RolloutFn ensemble_rollout(const EnsembleModel& model, PropagationConfig cfg) {
  return [&model, cfg](const VectorF& s0, const std::vector<MatrixF>& actions, Rng& rng) {
    return propagate(model, s0, actions, cfg, rng);
  };
}

/// Exact environment dynamics, one particle per candidate, zero disagreement.
inline RolloutFn exact_rollout(const GoalEnv& env) {
  return [&env](const VectorF& s0, const std::vector<MatrixF>& actions, Rng&) {
    const Eigen::Index P = actions.at(0).cols();
    Rollout r;
    r.particles = 1;
    r.states.emplace_back(s0.replicate(1, P));
    r.disagreement = MatrixF::Zero(static_cast<Eigen::Index>(actions.size()), P);
    for (const auto& a : actions) {
      MatrixF next(s0.size(), P);
      for (Eigen::Index p = 0; p < P; ++p)
        next.col(p) = env.step(r.states.back().col(p).cast<double>(), a.col(p).cast<double>()).cast<float>();
      r.states.push_back(std::move(next));
    }
    return r;
  };
}

/// Per-timestep action matrices (action_dim x P) from P candidates (horizon x action_dim).
inline std::vector<MatrixF> to_action_batches(const std::vector<Matrix>& candidates) {
  if (candidates.empty()) throw std::invalid_argument("to_action_batches: no candidates");
  const Eigen::Index H = candidates[0].rows(), A = candidates[0].cols(), P = static_cast<Eigen::Index>(candidates.size());
  std::vector<MatrixF> out(static_cast<std::size_t>(H), MatrixF(A, P));
  for (Eigen::Index p = 0; p < P; ++p)
    for (Eigen::Index t = 0; t < H; ++t) out[static_cast<std::size_t>(t)].col(p) = candidates[static_cast<std::size_t>(p)].row(t).transpose().cast<float>();
  return out;
}

/// Per-candidate mean over particles of a per-column quantity.
inline Eigen::VectorXd particle_mean(const VectorF& per_column, std::size_t particles) {
  const auto k = static_cast<Eigen::Index>(particles);
  Eigen::VectorXd out(per_column.size() / k);
  for (Eigen::Index p = 0; p < out.size(); ++p) out[p] = static_cast<double>(per_column.segment(p * k, k).mean());
  return out;
}

/// Marks candidates whose terminal particle spread (summed per-dim variance) exceeds the threshold.
inline void reject_high_variance(const Rollout& r, std::optional<double> threshold, Eigen::VectorXd& costs) {
  if (!threshold || r.particles < 2) return;
  const auto k = static_cast<Eigen::Index>(r.particles);
  const MatrixF& last = r.states.back();
  for (Eigen::Index p = 0; p < costs.size(); ++p) {
    const MatrixF block = last.middleCols(p * k, k);
    const VectorF mu = block.rowwise().mean();
    const double var = static_cast<double>((block.colwise() - mu).array().square().sum()) / static_cast<double>(k - 1);
    if (var > *threshold) costs[p] = std::numeric_limits<double>::infinity();
  }
}

/// c_int = -sum_t r_int(s_t, a_t), averaged over particles.
inline CostFn intrinsic_cost(RolloutFn rollout, const Vector& s, const PlanConfig& cfg, Rng& rng) {
  return [rollout, s0 = VectorF(s.cast<float>()), threshold = cfg.variance_reject_threshold,
          &rng](const std::vector<Matrix>& candidates) {
    const auto r = rollout(s0, to_action_batches(candidates), rng);
    Eigen::VectorXd costs = -particle_mean(r.disagreement.colwise().sum().transpose(), r.particles);
    reject_high_variance(r, threshold, costs);
    return costs;
  };
}

/// c_ext = -gamma^(H-1) V(s_H; g) on the state reached after all H actions,
/// averaged over particles. Imagined episodes terminate on success: a particle
/// that reaches g on transition t scores gamma^(t-1) instead.
inline CostFn extrinsic_cost(RolloutFn rollout, BatchValueFn value, const EnvSpec& spec, const Vector& s,
                             const Vector& g, const PlanConfig& cfg, Rng& rng) {
  return [rollout, value, spec, s0 = VectorF(s.cast<float>()), g, threshold = cfg.variance_reject_threshold,
          &rng](const std::vector<Matrix>& candidates) {
    const auto r = rollout(s0, to_action_batches(candidates), rng);
    const std::size_t H = r.states.size() - 1;
    VectorF ret = value(r.states.back(), g) * static_cast<float>(std::pow(spec.gamma, static_cast<double>(H) - 1.0));
    for (Eigen::Index j = 0; j < ret.size(); ++j)
      for (std::size_t t = 1; t <= H; ++t)
        if (goal_distance(spec, spec.project_goal(r.states[t].col(j).cast<double>()), g) <= spec.goal_epsilon) {
          ret[j] = static_cast<float>(std::pow(spec.gamma, static_cast<double>(t) - 1.0));
          break;
        }
    Eigen::VectorXd costs = -particle_mean(ret, r.particles);
    reject_high_variance(r, threshold, costs);
    return costs;
  };
}

/// Sparse environment reward: -sum_t gamma^t 1{d(s_{t+1}, g) <= eps}, counting
/// only the first success of each particle (episodes terminate on success).
inline CostFn sparse_cost(RolloutFn rollout, const EnvSpec& spec, const Vector& s, const Vector& g,
                          const PlanConfig& cfg, Rng& rng) {
  return [rollout, spec, s0 = VectorF(s.cast<float>()), g, threshold = cfg.variance_reject_threshold,
          &rng](const std::vector<Matrix>& candidates) {
    const auto r = rollout(s0, to_action_batches(candidates), rng);
    const Eigen::Index n = r.states[0].cols();
    VectorF ret = VectorF::Zero(n);
    std::vector<bool> done(static_cast<std::size_t>(n), false);
    for (std::size_t t = 1; t < r.states.size(); ++t)
      for (Eigen::Index j = 0; j < n; ++j) {
        if (done[static_cast<std::size_t>(j)]) continue;
        const Vector sj = r.states[t].col(j).cast<double>();
        if (goal_distance(spec, spec.project_goal(sj), g) <= spec.goal_epsilon) {
          ret[j] = static_cast<float>(std::pow(spec.gamma, static_cast<double>(t - 1)));
          done[static_cast<std::size_t>(j)] = true;
        }
      }
    Eigen::VectorXd costs = -particle_mean(ret, r.particles);
    reject_high_variance(r, threshold, costs);
    return costs;
  };
}

// ---------------------------------------------------------------------------
// Receding-horizon control

struct MpcStepLog {
  std::size_t step = 0;
  double best_cost = 0.0;
  std::size_t rejected = 0;
  Vector action;
  std::vector<std::pair<Matrix, double>> candidates;  // when record_candidates
};

struct MpcTrace {
  std::vector<Vector> states;   // s_0 .. s_T
  std::vector<Vector> actions;  // a_0 .. a_{T-1}
  bool success = false;
  std::vector<MpcStepLog> log;
};

/// Builds the planning cost for the current state.
using CostBuilder = std::function<CostFn(const Vector& state)>;

/// Replans every step, executes the first action, warm-starts with the shifted solution.
inline MpcTrace mpc_episode(const GoalEnv& env, const CostBuilder& build_cost, const PlanConfig& cfg, const Vector& s0,
                            const std::optional<Vector>& goal, Rng& rng, std::size_t max_steps = 0,
                            const std::function<void(const MpcStepLog&)>& on_step = {}) {
  cfg.validate();
  const auto& spec = env.spec();
  const std::size_t steps = max_steps ? max_steps : spec.episode_length;
  const auto H = static_cast<Eigen::Index>(cfg.horizon);
  const Eigen::RowVectorXd centre = (0.5 * (spec.action_low + spec.action_high)).transpose();
  Matrix mean = centre.replicate(H, 1);
  MpcTrace trace;
  trace.states.push_back(s0);
  if (goal && goal_reward(spec, s0, *goal).done) {
    trace.success = true;
    return trace;
  }
  for (std::size_t step = 0; step < steps; ++step) {
    const Vector& s = trace.states.back();
    const auto plan = icem_optimize(build_cost(s), cfg, spec.action_low, spec.action_high, mean, rng);
    const Vector a = plan.best.row(0).transpose();
    trace.actions.push_back(a);
    trace.states.push_back(env.step(s, a));
    MpcStepLog entry{step, plan.best_cost, plan.rejected, a, {}};
    if (cfg.record_candidates) entry.candidates = plan.candidates;
    if (on_step) on_step(entry);
    trace.log.push_back(std::move(entry));
    if (goal && goal_reward(spec, trace.states.back(), *goal).done) {
      trace.success = true;
      break;
    }
    mean.topRows(H - 1) = plan.best.bottomRows(H - 1);
    mean.row(H - 1) = centre;
  }
  return trace;
}

}  // namespace curioplan
