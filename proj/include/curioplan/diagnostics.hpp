#pragma once

// Detection of T-local optima (exact on tabular MDPs, sampled through a model)
// and trajectory-level non-monotonicity metrics.

#include "curioplan/planner.hpp"
#include "curioplan/replay.hpp"
#include "curioplan/value.hpp"

#include <json.hpp>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

namespace curioplan {

enum class OptimaMethod { exact, sampled };

struct OptimaReport {
  std::vector<bool> flagged;
  std::vector<std::optional<std::size_t>> depth;  // none when flagged but never escapable
  OptimaMethod method = OptimaMethod::exact;
  std::size_t n_random = 0;
  std::size_t n_next = 0;

  std::vector<std::size_t> optima() const {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < flagged.size(); ++s)
      if (flagged[s]) out.push_back(s);
    return out;
  }
};

/// Smallest k >= 1 with V(s) < max V over T^(k+1)({s}); none if no reachable state ever exceeds V(s).
template <class ValueFn>
std::optional<std::size_t> optimum_depth(const DiscreteMDP& mdp, ValueFn&& value, std::size_t s) {
  const double vs = value(s);
  std::vector<std::size_t> frontier{s};
  std::size_t size_before = 0;
  for (std::size_t k = 1; k <= mdp.n_states + 1; ++k) {
    // Self-loops make T^j({s}) grow monotonically, so one step per k suffices.
    frontier = reachable_set(mdp, frontier, 1);
    if (k == 1) continue;  // frontier is T^k; depth k checks T^(k+1)
    for (auto x : frontier)
      if (value(x) > vs) return k - 1;
    if (frontier.size() == size_before) return std::nullopt;
    size_before = frontier.size();
  }
  return std::nullopt;
}

/// Exact check of both strict inequalities for every state. A state whose
/// one-step set is only itself is not flagged (the inner maximum is empty).
template <class ValueFn>
OptimaReport find_exact_optima(const DiscreteMDP& mdp, ValueFn&& value) {
  OptimaReport report;
  report.flagged.assign(mdp.n_states, false);
  report.depth.assign(mdp.n_states, std::nullopt);
  double global_max = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < mdp.n_states; ++s) global_max = std::max(global_max, value(s));
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    const double vs = value(s);
    if (!(global_max > vs)) continue;
    double neighbour_max = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (auto x : reachable_set(mdp, {s}, 1))
      if (x != s) {
        any = true;
        neighbour_max = std::max(neighbour_max, value(x));
      }
    if (!any || !(vs > neighbour_max)) continue;
    report.flagged[s] = true;
    report.depth[s] = optimum_depth(mdp, value, s);
  }
  return report;
}

inline OptimaReport find_exact_optima(const TabularValue& v, const DiscreteMDP& mdp) {
  return find_exact_optima(mdp, [&](std::size_t s) { return v(s); });
}

/// Raises V(s*) to gamma^(d - k - 1/2), with d the shortest-path distance to
/// the goal, making s* a T-local optimum of depth exactly k when V = V*.
inline void plant_optimum(TabularValue& v, const DiscreteMDP& mdp, std::size_t s_star, std::size_t k) {
  if (k == 0) throw std::invalid_argument("plant_optimum: depth must be >= 1");
  const auto d = shortest_steps_from(mdp, s_star)[mdp.goal_state];
  if (d == kUnreachable || d < k + 1) throw std::invalid_argument("plant_optimum: state too close to the goal");
  v.v[s_star] = std::pow(mdp.gamma, static_cast<double>(d) - static_cast<double>(k) - 0.5);
}

// ---------------------------------------------------------------------------
// Sampled estimation

struct SampledOptimumConfig {
  std::size_t horizon = 1;
  std::size_t n_random = 200;
  std::size_t n_next = 200;
};

/// Estimates whether s is a T-local optimum of depth >= H for goal g:
/// (1) some state drawn from the buffer has a higher value, and
/// (2) every state visited by n_next random H-step action sequences through
///     the model (steps 1..H, excluding exact returns to s) has a lower value.
inline bool estimate_optimum_sampled(const Vector& s, const Vector& g, const BatchValueFn& value,
                                     const RolloutFn& model, const EnvSpec& spec, const ReplayBuffer& buf,
                                     const SampledOptimumConfig& cfg, Rng& rng) {
  if (cfg.horizon == 0 || cfg.n_next == 0) throw std::invalid_argument("estimate_optimum_sampled: empty sample budget");
  const VectorF sf = s.cast<float>();
  const float vs = value(MatrixF(sf), g)[0];

  const std::size_t available = buf.num_states();
  if (available == 0) return false;
  MatrixF randoms(s.size(), static_cast<Eigen::Index>(cfg.n_random));
  for (std::size_t i = 0; i < cfg.n_random; ++i) {
    const auto [traj, t] = buf.locate_state(uniform_index(rng, available));
    randoms.col(static_cast<Eigen::Index>(i)) = buf.state_vector(traj, t).cast<float>();
  }
  if (cfg.n_random == 0 || !(value(randoms, g).maxCoeff() > vs)) return false;

  std::vector<MatrixF> actions(cfg.horizon, MatrixF(static_cast<Eigen::Index>(spec.action_dim), static_cast<Eigen::Index>(cfg.n_next)));
  for (auto& a : actions)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      for (Eigen::Index d = 0; d < a.rows(); ++d)
        a(d, j) = static_cast<float>(spec.action_low[d] + (spec.action_high[d] - spec.action_low[d]) * uniform01(rng));
  const auto rollout = model(sf, actions, rng);
  for (std::size_t t = 1; t < rollout.states.size(); ++t) {
    const MatrixF& st = rollout.states[t];
    const VectorF vt = value(st, g);
    for (Eigen::Index j = 0; j < st.cols(); ++j)
      if (st.col(j) != sf && !(vs > vt[j])) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Trajectory reports

struct EvalTrajectory {
  std::vector<Vector> states;
  Vector goal;
  bool success = false;
};

struct MonotonicityReport {
  double non_monotonicity = 0.0;  // share of i in [0, T-H] with V(s_i) >= V(s_{i+H})
  std::optional<double> optimum_occurrence;
  std::size_t horizon = 1;
  bool success = false;
  std::size_t trajectory = 0;
};

struct TrajectorySummary {
  std::vector<MonotonicityReport> reports;
  std::vector<std::string> warnings;
  std::optional<double> median_non_monotonicity_success, median_non_monotonicity_failure;
  std::optional<double> median_occurrence_success, median_occurrence_failure;
};

inline std::optional<double> median(std::vector<double> x) {
  if (x.empty()) return std::nullopt;
  std::sort(x.begin(), x.end());
  const std::size_t n = x.size();
  return n % 2 ? x[n / 2] : 0.5 * (x[n / 2 - 1] + x[n / 2]);
}

/// Share of i in [0, T-H] with values[i] >= values[i+H], where T = values.size() - 1.
inline double non_monotonicity_ratio(const std::vector<double>& values, std::size_t horizon) {
  if (horizon == 0 || values.size() < horizon + 1) throw std::invalid_argument("non_monotonicity_ratio: trajectory shorter than H+1");
  const std::size_t count = values.size() - horizon;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < count; ++i) hits += values[i] >= values[i + horizon];
  return static_cast<double>(hits) / static_cast<double>(count);
}

/// `flag_state`, when set, marks sampled optima; its share per trajectory is the occurrence ratio.
inline TrajectorySummary trajectory_reports(const std::vector<EvalTrajectory>& trajectories, const BatchValueFn& value,
                                            std::size_t horizon,
                                            const std::function<bool(const Vector&, const Vector&)>& flag_state = {}) {
  TrajectorySummary out;
  std::vector<double> nm_s, nm_f, oc_s, oc_f;
  for (std::size_t i = 0; i < trajectories.size(); ++i) {
    const auto& tr = trajectories[i];
    if (tr.states.size() < horizon + 1) {
      out.warnings.push_back("trajectory " + std::to_string(i) + " has " + std::to_string(tr.states.size()) +
                             " states, fewer than H+1; skipped");
      continue;
    }
    MatrixF s(tr.states[0].size(), static_cast<Eigen::Index>(tr.states.size()));
    for (std::size_t t = 0; t < tr.states.size(); ++t) s.col(static_cast<Eigen::Index>(t)) = tr.states[t].cast<float>();
    const VectorF v = value(s, tr.goal);
    std::vector<double> values(v.data(), v.data() + v.size());
    MonotonicityReport r;
    r.non_monotonicity = non_monotonicity_ratio(values, horizon);
    r.horizon = horizon;
    r.success = tr.success;
    r.trajectory = i;
    if (flag_state) {
      std::size_t flagged = 0;
      for (const auto& x : tr.states) flagged += flag_state(x, tr.goal);
      r.optimum_occurrence = static_cast<double>(flagged) / static_cast<double>(tr.states.size());
      (tr.success ? oc_s : oc_f).push_back(*r.optimum_occurrence);
    }
    (tr.success ? nm_s : nm_f).push_back(r.non_monotonicity);
    out.reports.push_back(r);
  }
  out.median_non_monotonicity_success = median(nm_s);
  out.median_non_monotonicity_failure = median(nm_f);
  out.median_occurrence_success = median(oc_s);
  out.median_occurrence_failure = median(oc_f);
  return out;
}

inline nlohmann::json to_json(const OptimaReport& r) {
  nlohmann::json j;
  j["method"] = r.method == OptimaMethod::exact ? "exact" : "sampled";
  j["n_random"] = r.n_random;
  j["n_next"] = r.n_next;
  j["optima"] = nlohmann::json::array();
  for (auto s : r.optima()) {
    nlohmann::json row{{"state", s}};
    row["depth"] = r.depth[s] ? nlohmann::json(*r.depth[s]) : nlohmann::json(nullptr);
    j["optima"].push_back(row);
  }
  return j;
}

inline nlohmann::json to_json(const TrajectorySummary& s) {
  auto opt = [](const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); };
  nlohmann::json j;
  j["warnings"] = s.warnings;
  j["median_non_monotonicity"] = {{"success", opt(s.median_non_monotonicity_success)},
                                  {"failure", opt(s.median_non_monotonicity_failure)}};
  j["median_optimum_occurrence"] = {{"success", opt(s.median_occurrence_success)},
                                    {"failure", opt(s.median_occurrence_failure)}};
  j["trajectories"] = nlohmann::json::array();
  for (const auto& r : s.reports)
    j["trajectories"].push_back({{"index", r.trajectory},
                                 {"success", r.success},
                                 {"horizon", r.horizon},
                                 {"non_monotonicity", r.non_monotonicity},
                                 {"optimum_occurrence", opt(r.optimum_occurrence)}});
  return j;
}

/// CSV rows: trajectory,success,horizon,non_monotonicity,optimum_occurrence
inline std::string to_csv(const TrajectorySummary& s) {
  std::string out = "trajectory,success,horizon,non_monotonicity,optimum_occurrence\n";
  for (const auto& r : s.reports)
    out += std::to_string(r.trajectory) + "," + (r.success ? "1" : "0") + "," + std::to_string(r.horizon) + "," +
           std::to_string(r.non_monotonicity) + "," + (r.optimum_occurrence ? std::to_string(*r.optimum_occurrence) : "") + "\n";
  return out;
}

}  // namespace curioplan
