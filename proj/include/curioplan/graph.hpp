#pragma once

// Value graph over replay states: inverse-density vertex sampling, the widest
// path pruning threshold, best-product path aggregates and the aggregated value.

#include "curioplan/dynamics.hpp"
#include "curioplan/env.hpp"
#include "curioplan/replay.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <vector>

namespace curioplan {

/// V(states[:, i]; goals[:, i]) for each column pair.
using PairValueFn = std::function<VectorF(const MatrixF& states, const MatrixF& goals)>;

inline constexpr double kEdgeFloor = 1e-9;

struct GraphConfig {
  std::size_t n_vertices = 1000;
  double kde_bandwidth = 20.0;
  std::size_t pool_size = 0;  // 0: 2 * n_vertices, capped at the buffer size

  void validate() const {
    if (n_vertices < 2) throw std::invalid_argument("GraphConfig: n_vertices must be >= 2");
    if (!(kde_bandwidth > 0)) throw std::invalid_argument("GraphConfig: kde_bandwidth must be positive");
    if (pool_size != 0 && pool_size < n_vertices) throw std::invalid_argument("GraphConfig: pool_size < n_vertices");
  }
};

struct ValueGraph {
  std::vector<Vector> states;  // vertex states
  MatrixF goals;               // goal_dim x n, the goal each vertex represents
  Matrix weights;              // weights(i, j) = V(v_i; goal of v_j); 0 = no edge
  std::size_t source = 0;
  std::size_t goal = 0;
  double v_min = 0.0;          // edges below this are pruned
  bool pruned = false;
  std::vector<double> aggregates;  // A(v), empty until computed

  std::size_t size() const { return states.size(); }
  double edge(std::size_t u, std::size_t v) const {
    const double w = weights(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v));
    return u != v && w > 0 && w >= v_min ? w : 0.0;
  }
};

// ---------------------------------------------------------------------------
// Vertex sampling

/// Edge-weight matrix V(a_i; goal(b_j)) for all pairs, clamped to [floor, 1].
inline Matrix pairwise_values(const PairValueFn& value, const MatrixF& from_states, const MatrixF& to_goals) {
  const Eigen::Index n = from_states.cols(), m = to_goals.cols();
  Matrix out(n, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const MatrixF g = to_goals.col(j).replicate(1, n);
    const VectorF v = value(from_states, g);
    if (v.size() != n) throw std::runtime_error("pairwise_values: value query returned wrong size");
    for (Eigen::Index i = 0; i < n; ++i) {
      const double w = static_cast<double>(v[i]);
      out(i, j) = std::isfinite(w) ? std::clamp(w, kEdgeFloor, 1.0) : kEdgeFloor;
    }
  }
  return out;
}

/// KDE density of each pool member under d(x, y) = log_gamma V(x; y) and an exponential kernel.
inline Eigen::VectorXd kde_density(const Matrix& pool_values, double gamma, double bandwidth) {
  const double lg = std::log(gamma);
  Eigen::VectorXd rho(pool_values.rows());
  for (Eigen::Index i = 0; i < pool_values.rows(); ++i) {
    double acc = 0.0;
    for (Eigen::Index j = 0; j < pool_values.cols(); ++j) acc += std::exp(-(std::log(pool_values(i, j)) / lg) / bandwidth);
    rho[i] = acc / static_cast<double>(pool_values.cols());
  }
  return rho;
}

/// Weighted sampling of `k` indices without replacement (keys ln(u) / w, largest kept).
inline std::vector<std::size_t> weighted_sample_without_replacement(const Eigen::VectorXd& weights, std::size_t k, Rng& rng) {
  const auto n = static_cast<std::size_t>(weights.size());
  if (k > n) throw std::invalid_argument("weighted_sample_without_replacement: k > n");
  std::vector<std::pair<double, std::size_t>> keys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights[static_cast<Eigen::Index>(i)];
    if (!(w > 0)) throw std::invalid_argument("weighted_sample_without_replacement: weights must be positive");
    keys[i] = {std::log(std::max(uniform01(rng), std::numeric_limits<double>::min())) / w, i};
  }
  std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(k), keys.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = keys[i].second;
  return out;
}

/// Picks `n` pool members with probability proportional to inverse density.
inline std::vector<std::size_t> select_vertices(const PairValueFn& value, const MatrixF& pool_states,
                                                const MatrixF& pool_goals, double gamma, std::size_t n,
                                                double bandwidth, Rng& rng) {
  const auto pool = static_cast<std::size_t>(pool_states.cols());
  if (n > pool) throw std::invalid_argument("select_vertices: more vertices than candidates");
  if (n == pool) {
    std::vector<std::size_t> all(pool);
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  const Eigen::VectorXd rho = kde_density(pairwise_values(value, pool_states, pool_goals), gamma, bandwidth);
  return weighted_sample_without_replacement(rho.cwiseInverse(), n, rng);
}

/// Unpruned graph over inverse-density samples from `buf` plus s and g (last two vertices).
inline ValueGraph build_graph(const ReplayBuffer& buf, const PairValueFn& value, const GoalEnv& env, const Vector& s,
                              const Vector& g, const GraphConfig& cfg, Rng& rng) {
  cfg.validate();
  const auto& spec = env.spec();
  const std::size_t available = buf.num_states();
  if (available < cfg.n_vertices) throw std::invalid_argument("build_graph: buffer holds fewer states than n_vertices");
  const std::size_t pool_n = std::min(available, cfg.pool_size ? cfg.pool_size : 2 * cfg.n_vertices);

  std::vector<std::size_t> flat(available);
  std::iota(flat.begin(), flat.end(), 0);
  for (std::size_t i = 0; i < pool_n; ++i) std::swap(flat[i], flat[i + uniform_index(rng, available - i)]);
  MatrixF pool_states(static_cast<Eigen::Index>(spec.state_dim), static_cast<Eigen::Index>(pool_n));
  MatrixF pool_goals(static_cast<Eigen::Index>(spec.goal_dim), static_cast<Eigen::Index>(pool_n));
  for (std::size_t i = 0; i < pool_n; ++i) {
    const auto [traj, t] = buf.locate_state(flat[i]);
    const Vector x = buf.state_vector(traj, t);
    pool_states.col(static_cast<Eigen::Index>(i)) = x.cast<float>();
    pool_goals.col(static_cast<Eigen::Index>(i)) = spec.project_goal(x).cast<float>();
  }
  const auto chosen = select_vertices(value, pool_states, pool_goals, spec.gamma, cfg.n_vertices, cfg.kde_bandwidth, rng);

  ValueGraph graph;
  const auto n = static_cast<Eigen::Index>(chosen.size() + 2);
  graph.goals.resize(static_cast<Eigen::Index>(spec.goal_dim), n);
  MatrixF vstates(static_cast<Eigen::Index>(spec.state_dim), n);
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const auto c = static_cast<Eigen::Index>(chosen[i]);
    vstates.col(static_cast<Eigen::Index>(i)) = pool_states.col(c);
    graph.goals.col(static_cast<Eigen::Index>(i)) = pool_goals.col(c);
    graph.states.push_back(pool_states.col(c).cast<double>());
  }
  graph.source = chosen.size();
  graph.goal = chosen.size() + 1;
  graph.states.push_back(s);
  graph.states.push_back(env.goal_to_state(g));
  vstates.col(n - 2) = s.cast<float>();
  vstates.col(n - 1) = graph.states.back().cast<float>();
  graph.goals.col(n - 2) = spec.project_goal(s).cast<float>();
  graph.goals.col(n - 1) = g.cast<float>();
  graph.weights = pairwise_values(value, vstates, graph.goals);
  graph.weights.diagonal().setZero();
  return graph;
}

/// Graph whose edge weights are given directly (vertex states are indices 0..n-1).
inline ValueGraph graph_from_weights(const Matrix& weights, std::size_t source, std::size_t goal) {
  if (weights.rows() != weights.cols()) throw std::invalid_argument("graph_from_weights: weights must be square");
  const auto n = static_cast<std::size_t>(weights.rows());
  if (n < 1 || source >= n || goal >= n) throw std::invalid_argument("graph_from_weights: vertex index out of range");
  ValueGraph graph;
  graph.weights = weights;
  graph.source = source;
  graph.goal = goal;
  graph.goals.resize(1, static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    graph.states.push_back(Vector::Constant(1, static_cast<double>(i)));
    graph.goals(0, static_cast<Eigen::Index>(i)) = static_cast<float>(i);
  }
  return graph;
}

// ---------------------------------------------------------------------------
// Threshold, pruning, aggregates

/// Largest w such that `from` reaches `to` using only edges of weight >= w
/// (computed on the unpruned weights).
inline double bottleneck_threshold(const ValueGraph& graph, std::size_t from, std::size_t to) {
  const std::size_t n = graph.size();
  if (from >= n || to >= n) throw std::invalid_argument("bottleneck_threshold: vertex index out of range");
  if (from == to) return 1.0;
  std::vector<double> width(n, 0.0);
  std::vector<char> done(n, 0);
  width[from] = std::numeric_limits<double>::infinity();
  for (std::size_t iter = 0; iter < n; ++iter) {
    std::size_t u = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!done[i] && width[i] > 0 && (u == n || width[i] > width[u])) u = i;
    if (u == n) break;
    if (u == to) return width[u];
    done[u] = 1;
    for (std::size_t v = 0; v < n; ++v) {
      const double w = graph.weights(static_cast<Eigen::Index>(u), static_cast<Eigen::Index>(v));
      if (v != u && w > 0 && !done[v]) width[v] = std::max(width[v], std::min(width[u], w));
    }
  }
  throw std::runtime_error("bottleneck_threshold: disconnected");
}

inline double bottleneck_threshold(const ValueGraph& graph) { return bottleneck_threshold(graph, graph.source, graph.goal); }

/// Removes edges strictly below v_min; weights are kept so the threshold can be recomputed.
inline void prune(ValueGraph& graph, double v_min) {
  graph.v_min = v_min;
  graph.pruned = true;
}

/// A(v) = max over v->goal paths of the product of edge weights; A(goal) = 1, unreachable = 0.
inline std::vector<double> path_aggregates(const ValueGraph& graph) {
  const std::size_t n = graph.size();
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::vector<char> done(n, 0);
  dist[graph.goal] = 0.0;
  for (std::size_t iter = 0; iter < n; ++iter) {
    std::size_t u = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!done[i] && std::isfinite(dist[i]) && (u == n || dist[i] < dist[u])) u = i;
    if (u == n) break;
    done[u] = 1;
    for (std::size_t v = 0; v < n; ++v) {  // reversed edge v -> u
      const double w = graph.edge(v, u);
      if (w > 0 && !done[v]) dist[v] = std::min(dist[v], dist[u] - std::log(w));
    }
  }
  std::vector<double> a(n);
  for (std::size_t i = 0; i < n; ++i) a[i] = std::isfinite(dist[i]) ? std::exp(-dist[i]) : 0.0;
  return a;
}

/// Threshold at the s->g bottleneck, prune, and compute aggregates.
inline void finalize_graph(ValueGraph& graph) {
  prune(graph, bottleneck_threshold(graph));
  graph.aggregates = path_aggregates(graph);
}

/// V_bar(s'; g) = max over v with V(s'; v) >= V_min of V(s'; v) A(v); 0 if none admissible.
inline VectorF aggregated_values(const ValueGraph& graph, const PairValueFn& value, const MatrixF& states) {
  if (graph.aggregates.size() != graph.size()) throw std::logic_error("aggregated_values: aggregates not computed");
  const Eigen::Index n = states.cols();
  VectorF out = VectorF::Zero(n);
  for (std::size_t v = 0; v < graph.size(); ++v) {
    const double a = graph.aggregates[v];
    if (a <= 0) continue;
    const VectorF direct = value(states, graph.goals.col(static_cast<Eigen::Index>(v)).replicate(1, n));
    for (Eigen::Index i = 0; i < n; ++i) {
      const double w = std::min(static_cast<double>(direct[i]), 1.0);
      if (w >= graph.v_min) out[i] = std::max(out[i], static_cast<float>(w * a));
    }
  }
  return out;
}

inline double query_aggregated_value(const ValueGraph& graph, const PairValueFn& value, const Vector& s) {
  return static_cast<double>(aggregated_values(graph, value, MatrixF(s.cast<float>()))[0]);
}

/// Planner value adaptor; the goal argument is ignored because the graph fixes g.
inline std::function<VectorF(const MatrixF&, const Vector&)> aggregated_value_fn(const ValueGraph& graph, PairValueFn value) {
  return [&graph, value = std::move(value)](const MatrixF& states, const Vector&) {
    return aggregated_values(graph, value, states);
  };
}

/// Replaces the source vertex by `s`, recomputes its edges, threshold and aggregates.
inline void reinsert_source(ValueGraph& graph, const PairValueFn& value, const GoalEnv& env, const Vector& s) {
  const auto n = static_cast<Eigen::Index>(graph.size());
  const auto src = static_cast<Eigen::Index>(graph.source);
  graph.states[graph.source] = s;
  graph.goals.col(src) = env.spec().project_goal(s).cast<float>();
  MatrixF vstates(static_cast<Eigen::Index>(env.spec().state_dim), n);
  for (Eigen::Index i = 0; i < n; ++i) vstates.col(i) = graph.states[static_cast<std::size_t>(i)].cast<float>();
  graph.weights.row(src) = pairwise_values(value, MatrixF(vstates.col(src)), graph.goals);
  graph.weights.col(src) = pairwise_values(value, vstates, MatrixF(graph.goals.col(src)));
  graph.weights(src, src) = 0.0;
  finalize_graph(graph);
}

inline nlohmann::json graph_to_json(const ValueGraph& graph) {
  nlohmann::json j;
  j["source"] = graph.source;
  j["goal"] = graph.goal;
  j["v_min"] = graph.v_min;
  j["pruned"] = graph.pruned;
  j["vertices"] = nlohmann::json::array();
  for (const auto& s : graph.states) j["vertices"].push_back(std::vector<double>(s.data(), s.data() + s.size()));
  j["aggregates"] = graph.aggregates;
  j["edges"] = nlohmann::json::array();
  for (Eigen::Index u = 0; u < graph.weights.rows(); ++u)
    for (Eigen::Index v = 0; v < graph.weights.cols(); ++v)
      if (const double w = graph.edge(static_cast<std::size_t>(u), static_cast<std::size_t>(v)); w > 0)
        j["edges"].push_back({u, v, w});
  return j;
}

}  // namespace curioplan
