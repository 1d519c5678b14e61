#pragma once

// Trajectory store for exploration data plus hindsight goal relabeling.

#include "curioplan/binary_io.hpp"
#include "curioplan/common.hpp"

#include <algorithm>
#include <deque>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace curioplan {

struct Transition {
  Vector s;
  Vector a;
  Vector s_next;
};

struct Trajectory {
  std::vector<float> states;   // (length + 1) x state_dim, row-major
  std::vector<float> actions;  // length x action_dim, row-major
  std::size_t length = 0;      // number of transitions
};

class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t state_dim, std::size_t action_dim, std::size_t capacity)
      : state_dim_(state_dim), action_dim_(action_dim), capacity_(capacity) {
    if (state_dim == 0 || action_dim == 0) throw std::invalid_argument("ReplayBuffer: zero dimension");
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: zero capacity");
  }

  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t num_trajectories() const { return trajectories_.size(); }
  std::size_t num_transitions() const { return transitions_; }
  std::size_t num_states() const { return transitions_ + trajectories_.size(); }
  bool empty() const { return trajectories_.empty(); }
  const Trajectory& trajectory(std::size_t i) const { return trajectories_.at(i); }

  /// Appends s_0..s_T and a_0..a_{T-1}; evicts the oldest trajectories beyond capacity.
  void append_trajectory(const std::vector<Vector>& states, const std::vector<Vector>& actions) {
    if (states.size() != actions.size() + 1)
      throw std::invalid_argument("append_trajectory: need exactly one more state than actions");
    if (actions.empty()) throw std::invalid_argument("append_trajectory: trajectory needs at least 2 states");
    Trajectory t;
    t.length = actions.size();
    t.states.reserve(states.size() * state_dim_);
    t.actions.reserve(actions.size() * action_dim_);
    for (const auto& s : states) {
      if (static_cast<std::size_t>(s.size()) != state_dim_) throw std::invalid_argument("append_trajectory: bad state dim");
      for (Eigen::Index i = 0; i < s.size(); ++i) t.states.push_back(static_cast<float>(s[i]));
    }
    for (const auto& a : actions) {
      if (static_cast<std::size_t>(a.size()) != action_dim_) throw std::invalid_argument("append_trajectory: bad action dim");
      for (Eigen::Index i = 0; i < a.size(); ++i) t.actions.push_back(static_cast<float>(a[i]));
    }
    push(std::move(t));
  }

  void push(Trajectory t) {
    if (t.length == 0 || t.states.size() != (t.length + 1) * state_dim_ || t.actions.size() != t.length * action_dim_)
      throw std::invalid_argument("ReplayBuffer::push: malformed trajectory");
    if (t.length > capacity_) throw std::invalid_argument("ReplayBuffer::push: trajectory longer than capacity");
    transitions_ += t.length;
    transition_offsets_.push_back(transition_offsets_.back() + t.length);
    state_offsets_.push_back(state_offsets_.back() + t.length + 1);
    trajectories_.push_back(std::move(t));
    while (transitions_ > capacity_) {
      transitions_ -= trajectories_.front().length;
      trajectories_.pop_front();
      transition_offsets_.pop_front();
      state_offsets_.pop_front();
    }
  }

  std::span<const float> state(std::size_t traj, std::size_t t) const {
    const auto& tr = trajectories_[traj];
    return {tr.states.data() + t * state_dim_, state_dim_};
  }
  std::span<const float> action(std::size_t traj, std::size_t t) const {
    const auto& tr = trajectories_[traj];
    return {tr.actions.data() + t * action_dim_, action_dim_};
  }

  Vector state_vector(std::size_t traj, std::size_t t) const {
    auto s = state(traj, t);
    Vector v(static_cast<Eigen::Index>(s.size()));
    for (std::size_t i = 0; i < s.size(); ++i) v[static_cast<Eigen::Index>(i)] = s[i];
    return v;
  }

  /// Maps a flat transition index to (trajectory, t).
  std::pair<std::size_t, std::size_t> locate_transition(std::size_t flat) const {
    return locate(transition_offsets_, flat);
  }
  /// Maps a flat state index (over all stored states) to (trajectory, t).
  std::pair<std::size_t, std::size_t> locate_state(std::size_t flat) const { return locate(state_offsets_, flat); }

  Transition transition(std::size_t flat) const {
    auto [i, t] = locate_transition(flat);
    Transition tr;
    tr.s = state_vector(i, t);
    tr.s_next = state_vector(i, t + 1);
    auto a = action(i, t);
    tr.a.resize(static_cast<Eigen::Index>(a.size()));
    for (std::size_t k = 0; k < a.size(); ++k) tr.a[static_cast<Eigen::Index>(k)] = a[k];
    return tr;
  }

  friend bool operator==(const ReplayBuffer& x, const ReplayBuffer& y) {
    if (x.state_dim_ != y.state_dim_ || x.action_dim_ != y.action_dim_ || x.trajectories_.size() != y.trajectories_.size())
      return false;
    for (std::size_t i = 0; i < x.trajectories_.size(); ++i) {
      const auto &a = x.trajectories_[i], &b = y.trajectories_[i];
      if (a.length != b.length || a.states != b.states || a.actions != b.actions) return false;
    }
    return true;
  }

  /// Writes the "GCRB" v1 format (little-endian f32 payload).
  void save(const std::string& path) const {
    io::BinaryWriter w(path);
    w.magic("GCRB");
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(state_dim_));
    w.u32(static_cast<std::uint32_t>(action_dim_));
    w.u32(static_cast<std::uint32_t>(trajectories_.size()));
    for (const auto& t : trajectories_) {
      w.u32(static_cast<std::uint32_t>(t.length));
      w.f32_array(t.states.begin(), t.states.end());
      w.f32_array(t.actions.begin(), t.actions.end());
    }
    w.finish();
  }

  static ReplayBuffer load(const std::string& path, std::size_t expected_state_dim, std::size_t expected_action_dim,
                           std::size_t capacity) {
    io::BinaryReader r(path);
    r.expect_magic("GCRB");
    const auto version = r.u32();
    if (version != kVersion) throw io::FormatError("'" + path + "': unsupported GCRB version " + std::to_string(version));
    const auto sd = r.u32(), ad = r.u32();
    if (sd != expected_state_dim || ad != expected_action_dim)
      throw io::FormatError("'" + path + "': dimension mismatch (file state_dim=" + std::to_string(sd) +
                            ", action_dim=" + std::to_string(ad) + "; expected " + std::to_string(expected_state_dim) +
                            ", " + std::to_string(expected_action_dim) + ")");
    const auto count = r.u32();
    ReplayBuffer buf(sd, ad, capacity);
    for (std::uint32_t i = 0; i < count; ++i) {
      Trajectory t;
      t.length = r.u32();
      if (t.length == 0) throw io::FormatError("'" + path + "': zero-length trajectory");
      t.states.resize((t.length + 1) * sd);
      t.actions.resize(t.length * ad);
      r.f32_array(t.states.data(), t.states.size());
      r.f32_array(t.actions.data(), t.actions.size());
      buf.push(std::move(t));
    }
    if (!r.at_end()) throw io::FormatError("'" + path + "': trailing bytes after last trajectory");
    return buf;
  }

  static constexpr std::uint32_t kVersion = 1;

 private:
  // Offsets are absolute since construction; eviction pops the front so the
  // first stored trajectory starts at offsets.front().
  static std::pair<std::size_t, std::size_t> locate(const std::deque<std::size_t>& offsets, std::size_t flat) {
    if (offsets.size() < 2 || flat >= offsets.back() - offsets.front())
      throw std::out_of_range("ReplayBuffer: index out of range");
    const std::size_t abs = flat + offsets.front();
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), abs);
    const auto i = static_cast<std::size_t>(std::distance(offsets.begin(), it)) - 1;
    return {i, abs - offsets[i]};
  }

  std::size_t state_dim_;
  std::size_t action_dim_;
  std::size_t capacity_;
  std::deque<Trajectory> trajectories_;
  std::size_t transitions_ = 0;
  std::deque<std::size_t> transition_offsets_{0};
  std::deque<std::size_t> state_offsets_{0};
};

// ---------------------------------------------------------------------------
// Relabeling

struct RelabelConfig {
  double p_g = 0.75;
  double p_geo = 0.2;
  std::vector<std::size_t> goal_indices;  // state -> goal projection

  void validate(std::size_t state_dim) const {
    if (!(p_g > 0 && p_g <= 1)) throw std::invalid_argument("RelabelConfig: p_g must lie in (0,1]");
    if (!(p_geo > 0 && p_geo <= 1)) throw std::invalid_argument("RelabelConfig: p_geo must lie in (0,1]");
    if (goal_indices.empty()) throw std::invalid_argument("RelabelConfig: empty goal projection");
    for (auto i : goal_indices)
      if (i >= state_dim) throw std::invalid_argument("RelabelConfig: goal index out of range");
  }
};

/// How one sample's goal was drawn.
struct GoalDraw {
  bool positive = true;
  std::size_t tau = 1;               // positive: offset into the future (clamped to trajectory end)
  std::size_t negative_state = 0;    // negative: flat index over all stored states
};

/// Column-major batch: one sample per column.
struct RelabeledBatch {
  Eigen::MatrixXf s, a, s_next, g;
  Eigen::VectorXf r, done;
  std::vector<GoalDraw> draws;

  std::size_t size() const { return static_cast<std::size_t>(s.cols()); }
};

namespace detail {
inline void project_into(std::span<const float> state, const std::vector<std::size_t>& idx, Eigen::MatrixXf& g,
                         Eigen::Index col) {
  for (std::size_t k = 0; k < idx.size(); ++k) g(static_cast<Eigen::Index>(k), col) = state[idx[k]];
}
}  // namespace detail

/// Fills column `col` of `batch` for transition (traj, t) with the given goal draw.
/// r = 1 iff the goal equals the projection of s_{t+1} exactly; done mirrors r.
inline void relabel_into(const ReplayBuffer& buf, const RelabelConfig& cfg, std::size_t traj, std::size_t t,
                         GoalDraw draw, RelabeledBatch& batch, Eigen::Index col) {
  const auto& tr = buf.trajectory(traj);
  if (t >= tr.length) throw std::out_of_range("relabel_into: t beyond trajectory");
  const auto s = buf.state(traj, t), sn = buf.state(traj, t + 1), a = buf.action(traj, t);
  for (std::size_t k = 0; k < s.size(); ++k) {
    batch.s(static_cast<Eigen::Index>(k), col) = s[k];
    batch.s_next(static_cast<Eigen::Index>(k), col) = sn[k];
  }
  for (std::size_t k = 0; k < a.size(); ++k) batch.a(static_cast<Eigen::Index>(k), col) = a[k];
  if (draw.positive) {
    if (draw.tau == 0) throw std::invalid_argument("relabel_into: tau must be >= 1");
    draw.tau = std::min(draw.tau, tr.length - t);
    detail::project_into(buf.state(traj, t + draw.tau), cfg.goal_indices, batch.g, col);
  } else {
    const auto [gi, gt] = buf.locate_state(draw.negative_state);
    detail::project_into(buf.state(gi, gt), cfg.goal_indices, batch.g, col);
  }
  bool hit = true;
  for (std::size_t k = 0; k < cfg.goal_indices.size(); ++k)
    hit &= batch.g(static_cast<Eigen::Index>(k), col) == sn[cfg.goal_indices[k]];
  batch.r[col] = hit ? 1.0f : 0.0f;
  batch.done[col] = batch.r[col];
  batch.draws[static_cast<std::size_t>(col)] = draw;
}

inline RelabeledBatch allocate_batch(const ReplayBuffer& buf, const RelabelConfig& cfg, std::size_t n) {
  RelabeledBatch b;
  const auto cols = static_cast<Eigen::Index>(n);
  b.s.resize(static_cast<Eigen::Index>(buf.state_dim()), cols);
  b.s_next.resize(static_cast<Eigen::Index>(buf.state_dim()), cols);
  b.a.resize(static_cast<Eigen::Index>(buf.action_dim()), cols);
  b.g.resize(static_cast<Eigen::Index>(cfg.goal_indices.size()), cols);
  b.r.resize(cols);
  b.done.resize(cols);
  b.draws.resize(n);
  return b;
}

/// Uniform transitions; with probability p_g a future-state goal with
/// tau ~ Geometric(p_geo) on {1,2,...} clamped to the trajectory end, else a
/// goal drawn uniformly from all stored states.
inline RelabeledBatch sample_relabeled(const ReplayBuffer& buf, const RelabelConfig& cfg, std::size_t batch, Rng& rng) {
  if (buf.empty()) throw std::invalid_argument("sample_relabeled: replay buffer is empty");
  cfg.validate(buf.state_dim());
  RelabeledBatch out = allocate_batch(buf, cfg, batch);
  std::geometric_distribution<std::size_t> geo(cfg.p_geo);
  for (std::size_t i = 0; i < batch; ++i) {
    const auto [traj, t] = buf.locate_transition(uniform_index(rng, buf.num_transitions()));
    GoalDraw draw;
    draw.positive = uniform01(rng) < cfg.p_g;
    if (draw.positive)
      draw.tau = 1 + geo(rng);
    else
      draw.negative_state = uniform_index(rng, buf.num_states());
    relabel_into(buf, cfg, traj, t, draw, out, static_cast<Eigen::Index>(i));
  }
  return out;
}

}  // namespace curioplan
