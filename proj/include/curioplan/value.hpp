#pragma once

// Goal-conditioned values: exact tabular value iteration and an offline
// TD3 actor-critic over hindsight-relabeled replay data.

#include "curioplan/dynamics.hpp"
#include "curioplan/env.hpp"
#include "curioplan/mlp.hpp"
#include "curioplan/replay.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace curioplan {

// ---------------------------------------------------------------------------
// Tabular oracle

struct TabularValue {
  std::vector<double> v;
  std::size_t goal = 0;
  double gamma = 0.99;
  std::vector<double> residuals;  // sup-norm change per sweep

  double operator()(std::size_t s) const { return v.at(s); }
};

/// Jacobi sweeps of V(s) = 1 at the goal, else gamma * max_a V(next(s, a)).
inline TabularValue value_iteration(const DiscreteMDP& mdp, std::optional<std::size_t> goal = {}, double tol = 1e-12,
                                    std::size_t max_sweeps = 100000) {
  mdp.validate();
  TabularValue out;
  out.goal = goal.value_or(mdp.goal_state);
  if (out.goal >= mdp.n_states) throw std::invalid_argument("value_iteration: goal out of range");
  out.gamma = mdp.gamma;
  out.v.assign(mdp.n_states, 0.0);
  out.v[out.goal] = 1.0;
  std::vector<double> next(mdp.n_states);
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    double residual = 0.0;
    for (std::size_t s = 0; s < mdp.n_states; ++s) {
      if (s == out.goal) {
        next[s] = 1.0;
        continue;
      }
      double best = 0.0;
      for (std::size_t a = 0; a < mdp.n_actions; ++a) best = std::max(best, out.v[mdp.next(s, a)]);
      next[s] = mdp.gamma * best;
      residual = std::max(residual, std::abs(next[s] - out.v[s]));
    }
    out.v.swap(next);
    out.residuals.push_back(residual);
    if (residual <= tol) break;
  }
  return out;
}

struct GreedyTrace {
  std::vector<std::size_t> states;  // s_1 .. s_T (s_0 excluded)
  bool success = false;
};

/// Moves to argmax over T({s}) of `value` each step (ties: lowest state index);
/// stops at `goal` or after `max_steps`.
template <class ValueFn>
GreedyTrace greedy_rollout(const DiscreteMDP& mdp, ValueFn&& value, std::size_t s0, std::size_t goal,
                           std::size_t max_steps) {
  if (max_steps == 0) throw std::invalid_argument("greedy_rollout: max_steps must be >= 1");
  GreedyTrace trace;
  std::size_t s = s0;
  trace.success = s == goal;
  for (std::size_t step = 0; step < max_steps && !trace.success; ++step) {
    const auto options = reachable_set(mdp, {s}, 1);
    std::size_t best = options.front();
    double best_v = value(best);
    for (auto o : options) {
      const double v = value(o);
      if (v > best_v) {
        best = o;
        best_v = v;
      }
    }
    s = best;
    trace.states.push_back(s);
    trace.success = s == goal;
  }
  return trace;
}

inline GreedyTrace greedy_rollout(const TabularValue& v, const DiscreteMDP& mdp, std::size_t s0, std::size_t max_steps) {
  return greedy_rollout(mdp, [&](std::size_t s) { return v.v.at(s); }, s0, v.goal, max_steps);
}

// ---------------------------------------------------------------------------
// TD3

struct Td3Config {
  std::size_t hidden_layers = 2;
  std::size_t hidden_units = 512;
  double critic_lr = 1e-5;
  double actor_lr = 1e-5;
  double gamma = 0.99;
  double polyak = 0.995;
  double target_noise = 0.2;
  double noise_clip = 0.5;
  std::size_t policy_delay = 2;
  std::size_t batch_size = 512;
  std::size_t epochs = 200;
  std::size_t updates_per_epoch = 0;  // 0: one pass, num_transitions / batch_size

  void validate() const {
    if (!(gamma >= 0 && gamma < 1)) throw std::invalid_argument("Td3Config: gamma must lie in [0,1)");
    if (!(polyak >= 0 && polyak <= 1)) throw std::invalid_argument("Td3Config: polyak must lie in [0,1]");
    if (policy_delay == 0) throw std::invalid_argument("Td3Config: policy_delay must be >= 1");
    if (batch_size == 0) throw std::invalid_argument("Td3Config: zero batch size");
    if (hidden_units == 0) throw std::invalid_argument("Td3Config: zero hidden units");
  }
};

struct Td3Losses {
  double critic = 0.0;
  std::optional<double> actor;
};

class Td3Agent {
 public:
  using Mat = MatrixF;

  Td3Agent() = default;
  Td3Agent(const EnvSpec& env, const Td3Config& cfg, Rng& rng)
      : state_dim_(env.state_dim), action_dim_(env.action_dim), goal_dim_(env.goal_dim), cfg_(cfg) {
    cfg_.validate();
    low_ = env.action_low.cast<float>();
    high_ = env.action_high.cast<float>();
    auto layers = [&](std::size_t in, std::size_t out) {
      std::vector<std::size_t> sizes{in};
      for (std::size_t i = 0; i < cfg_.hidden_layers; ++i) sizes.push_back(cfg_.hidden_units);
      sizes.push_back(out);
      return sizes;
    };
    const std::size_t sg = state_dim_ + goal_dim_;
    q1_ = Mlp<float>(layers(sg + action_dim_, 1), Activation::relu, Activation::linear);
    q2_ = q1_;
    actor_ = Mlp<float>(layers(sg, action_dim_), Activation::relu, Activation::tanh);
    q1_.init_uniform_fan_in(rng);
    q2_.init_uniform_fan_in(rng);
    actor_.init_uniform_fan_in(rng);
    q1_target_ = q1_;
    q2_target_ = q2_;
    actor_target_ = actor_;
    q1_opt_ = AdamState<float>(q1_, cfg_.critic_lr);
    q2_opt_ = AdamState<float>(q2_, cfg_.critic_lr);
    actor_opt_ = AdamState<float>(actor_, cfg_.actor_lr);
    state_norm_.identity(static_cast<Eigen::Index>(state_dim_));
    goal_norm_.identity(static_cast<Eigen::Index>(goal_dim_));
  }

  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  std::size_t goal_dim() const { return goal_dim_; }
  const Td3Config& config() const { return cfg_; }
  Td3Config& config() { return cfg_; }
  std::uint64_t updates() const { return updates_; }

  Mlp<float>& q1() { return q1_; }
  Mlp<float>& q2() { return q2_; }
  Mlp<float>& actor() { return actor_; }
  const Mlp<float>& q1() const { return q1_; }
  const Mlp<float>& q2() const { return q2_; }
  const Mlp<float>& actor() const { return actor_; }
  const Mlp<float>& q1_target() const { return q1_target_; }
  const Mlp<float>& q2_target() const { return q2_target_; }
  const Mlp<float>& actor_target() const { return actor_target_; }
  Normalizer& state_normalizer() { return state_norm_; }
  Normalizer& goal_normalizer() { return goal_norm_; }

  /// Fits input standardization to the buffer's states and their goal projections.
  void fit_normalizers(const ReplayBuffer& buf, const std::vector<std::size_t>& goal_indices) {
    Mat s(static_cast<Eigen::Index>(state_dim_), static_cast<Eigen::Index>(buf.num_states()));
    Eigen::Index col = 0;
    for (std::size_t i = 0; i < buf.num_trajectories(); ++i)
      for (std::size_t t = 0; t <= buf.trajectory(i).length; ++t, ++col) {
        const auto st = buf.state(i, t);
        for (std::size_t k = 0; k < state_dim_; ++k) s(static_cast<Eigen::Index>(k), col) = st[k];
      }
    state_norm_.fit(s);
    Mat g(static_cast<Eigen::Index>(goal_dim_), s.cols());
    for (std::size_t k = 0; k < goal_dim_; ++k) g.row(static_cast<Eigen::Index>(k)) = s.row(static_cast<Eigen::Index>(goal_indices[k]));
    goal_norm_.fit(g);
  }

  Mat policy_input(const Mat& s, const Mat& g) const {
    Mat x(static_cast<Eigen::Index>(state_dim_ + goal_dim_), s.cols());
    x.topRows(static_cast<Eigen::Index>(state_dim_)) = state_norm_.normalize(s);
    x.bottomRows(static_cast<Eigen::Index>(goal_dim_)) = goal_norm_.normalize(g);
    return x;
  }

  static Mat critic_input(const Mat& sg, const Mat& a) {
    Mat x(sg.rows() + a.rows(), sg.cols());
    x.topRows(sg.rows()) = sg;
    x.bottomRows(a.rows()) = a;
    return x;
  }

  /// tanh output in [-1,1] mapped affinely onto the action box.
  Mat scale_action(const Mat& y) const {
    return ((y.array() + 1.0f).colwise() * (0.5f * (high_ - low_)).array()).matrix().colwise() + low_;
  }

  Mat act(const Mat& s, const Mat& g) const { return scale_action(actor_.forward(policy_input(s, g))); }

  /// V(s;g) = min(Q1, Q2) at the actor's action, one entry per column.
  VectorF value_batch(const Mat& s, const Mat& g) const {
    check_shapes(s, g);
    const Mat sg = policy_input(s, g);
    const Mat x = critic_input(sg, scale_action(actor_.forward(sg)));
    return q1_.forward(x).cwiseMin(q2_.forward(x)).row(0).transpose();
  }

  double value(const Vector& s, const Vector& g) const {
    return static_cast<double>(value_batch(s.cast<float>(), g.cast<float>())[0]);
  }

  /// TD target r + gamma (1 - done) min Q'(s', g, pi'(s', g) + clipped noise), 1 x n.
  Mat td_target(const RelabeledBatch& b, Rng& rng) const {
    const Mat sg_next = policy_input(b.s_next, b.g);
    Mat y_next = actor_target_.forward(sg_next);
    std::normal_distribution<float> normal(0.0f, static_cast<float>(cfg_.target_noise));
    const float clip = static_cast<float>(cfg_.noise_clip);
    for (Eigen::Index i = 0; i < y_next.size(); ++i)
      y_next.data()[i] = std::clamp(y_next.data()[i] + std::clamp(normal(rng), -clip, clip), -1.0f, 1.0f);
    const Mat x_next = critic_input(sg_next, scale_action(y_next));
    const Mat q_next = q1_target_.forward(x_next).cwiseMin(q2_target_.forward(x_next));
    const float gamma = static_cast<float>(cfg_.gamma);
    Mat target(1, b.s.cols());
    target.row(0) = b.r.transpose().array() + gamma * (1.0f - b.done.transpose().array()) * q_next.row(0).array();
    return target;
  }

  Td3Losses update(const RelabeledBatch& b, Rng& rng) {
    const auto n = static_cast<Eigen::Index>(b.size());
    if (n == 0) throw std::invalid_argument("td3_update: empty batch");
    const Mat target = td_target(b, rng);
    if (!target.allFinite()) throw std::runtime_error("td3_update: non-finite TD target");
    const Mat sg = policy_input(b.s, b.g);
    const Mat x = critic_input(sg, b.a);
    Td3Losses losses;
    losses.critic = train_step_regression(q1_, q1_opt_, x, target, Loss::mse) +
                    train_step_regression(q2_, q2_opt_, x, target, Loss::mse);
    ++updates_;

    if (updates_ % cfg_.policy_delay == 0) {
      Mlp<float>::Cache actor_cache, critic_cache;
      const Mat y = actor_.forward(sg, actor_cache);
      const Mat q = q1_.forward(critic_input(sg, scale_action(y)), critic_cache);
      losses.actor = -static_cast<double>(q.mean());
      Mat d_input;
      q1_.backward(critic_cache, Mat::Constant(1, n, -1.0f / static_cast<float>(n)), &d_input);
      const Mat d_action = d_input.bottomRows(static_cast<Eigen::Index>(action_dim_));
      const Mat d_y = d_action.array().colwise() * (0.5f * (high_ - low_)).array();
      actor_opt_.apply(actor_, actor_.backward(actor_cache, d_y));
      polyak_update(q1_target_, q1_, cfg_.polyak);
      polyak_update(q2_target_, q2_, cfg_.polyak);
      polyak_update(actor_target_, actor_, cfg_.polyak);
    }
    return losses;
  }

  void save(const std::string& path) const {
    NetworkArchive<float> ar;
    ar.networks["q1"] = q1_;
    ar.networks["q2"] = q2_;
    ar.networks["q1_target"] = q1_target_;
    ar.networks["q2_target"] = q2_target_;
    ar.networks["actor"] = actor_;
    ar.networks["actor_target"] = actor_target_;
    ar.put_adam("q1", q1_opt_);
    ar.put_adam("q2", q2_opt_);
    ar.put_adam("actor", actor_opt_);
    ar.scalars["updates"] = static_cast<double>(updates_);
    ar.scalars["state_dim"] = static_cast<double>(state_dim_);
    ar.scalars["action_dim"] = static_cast<double>(action_dim_);
    ar.scalars["goal_dim"] = static_cast<double>(goal_dim_);
    put(ar, "action_low", low_);
    put(ar, "action_high", high_);
    put(ar, "state_mean", state_norm_.mean);
    put(ar, "state_std", state_norm_.std);
    put(ar, "goal_mean", goal_norm_.mean);
    put(ar, "goal_std", goal_norm_.std);
    ar.save(path);
  }

  /// Restores networks, optimizer moments and normalizers; hyperparameters come from `cfg`.
  static Td3Agent load(const std::string& path, const Td3Config& cfg) {
    const auto ar = NetworkArchive<float>::load(path);
    Td3Agent a;
    a.cfg_ = cfg;
    a.state_dim_ = static_cast<std::size_t>(ar.scalar("state_dim"));
    a.action_dim_ = static_cast<std::size_t>(ar.scalar("action_dim"));
    a.goal_dim_ = static_cast<std::size_t>(ar.scalar("goal_dim"));
    a.q1_ = ar.network("q1");
    a.q2_ = ar.network("q2");
    a.q1_target_ = ar.network("q1_target");
    a.q2_target_ = ar.network("q2_target");
    a.actor_ = ar.network("actor");
    a.actor_target_ = ar.network("actor_target");
    a.q1_opt_ = ar.get_adam("q1");
    a.q2_opt_ = ar.get_adam("q2");
    a.actor_opt_ = ar.get_adam("actor");
    a.updates_ = static_cast<std::uint64_t>(ar.scalar("updates"));
    a.low_ = get(ar, "action_low", a.action_dim_);
    a.high_ = get(ar, "action_high", a.action_dim_);
    a.state_norm_.mean = get(ar, "state_mean", a.state_dim_);
    a.state_norm_.std = get(ar, "state_std", a.state_dim_);
    a.goal_norm_.mean = get(ar, "goal_mean", a.goal_dim_);
    a.goal_norm_.std = get(ar, "goal_std", a.goal_dim_);
    return a;
  }

  friend bool operator==(const Td3Agent& x, const Td3Agent& y) {
    return x.q1_ == y.q1_ && x.q2_ == y.q2_ && x.actor_ == y.actor_ && x.q1_target_ == y.q1_target_ &&
           x.q2_target_ == y.q2_target_ && x.actor_target_ == y.actor_target_ && x.updates_ == y.updates_;
  }

 private:
  void check_shapes(const Mat& s, const Mat& g) const {
    if (static_cast<std::size_t>(s.rows()) != state_dim_ || static_cast<std::size_t>(g.rows()) != goal_dim_ ||
        s.cols() != g.cols())
      throw std::invalid_argument("Td3Agent: state/goal shape mismatch");
  }
  static void put(NetworkArchive<float>& ar, const std::string& name, const VectorF& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) ar.scalars[name + "." + std::to_string(i)] = v[i];
  }
  static VectorF get(const NetworkArchive<float>& ar, const std::string& name, std::size_t n) {
    VectorF v(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) v[static_cast<Eigen::Index>(i)] = static_cast<float>(ar.scalar(name + "." + std::to_string(i)));
    return v;
  }

  std::size_t state_dim_ = 0, action_dim_ = 0, goal_dim_ = 0;
  Td3Config cfg_;
  VectorF low_, high_;
  Mlp<float> q1_, q2_, q1_target_, q2_target_, actor_, actor_target_;
  AdamState<float> q1_opt_, q2_opt_, actor_opt_;
  Normalizer state_norm_, goal_norm_;
  std::uint64_t updates_ = 0;
};

inline Td3Losses td3_update(Td3Agent& agent, const RelabeledBatch& batch, Rng& rng) { return agent.update(batch, rng); }

inline double value_query(const Td3Agent& agent, const Vector& s, const Vector& g) { return agent.value(s, g); }

/// Values outside [0, 1.5] indicate critic overestimation (the true range is [0, 1]).
inline bool overestimation_flag(double v) { return v < 0.0 || v > 1.5; }

/// Runs `updates` TD3 steps on freshly relabeled batches; returns mean losses.
inline Td3Losses run_td3_updates(Td3Agent& agent, const ReplayBuffer& buf, const RelabelConfig& relabel,
                                 std::size_t updates, Rng& rng) {
  Td3Losses mean;
  std::size_t actor_steps = 0;
  double actor_sum = 0.0;
  for (std::size_t i = 0; i < updates; ++i) {
    const auto batch = sample_relabeled(buf, relabel, agent.config().batch_size, rng);
    const auto l = agent.update(batch, rng);
    mean.critic += l.critic / static_cast<double>(updates);
    if (l.actor) {
      actor_sum += *l.actor;
      ++actor_steps;
    }
  }
  if (actor_steps) mean.actor = actor_sum / static_cast<double>(actor_steps);
  return mean;
}

}  // namespace curioplan
