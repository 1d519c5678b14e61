#pragma once

// Goal-conditioned environments: the continuous point-mass maze, pin-pad-lite,
// and deterministic tabular MDPs used as exact oracles.

#include "curioplan/common.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace curioplan {

enum class GoalMetric { euclidean, per_dim_threshold };

struct EnvSpec {
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t goal_dim = 0;
  Vector action_low;
  Vector action_high;
  std::size_t episode_length = 1;
  double gamma = 0.99;
  double goal_epsilon = 0.0;
  GoalMetric goal_metric = GoalMetric::euclidean;
  // Goal space is the slice of the state at these indices.
  std::vector<std::size_t> goal_indices;

  void validate() const {
    if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("EnvSpec: gamma must lie in (0,1)");
    if (episode_length == 0) throw std::invalid_argument("EnvSpec: episode_length must be positive");
    if (goal_epsilon < 0.0) throw std::invalid_argument("EnvSpec: goal_epsilon must be >= 0");
    if (static_cast<std::size_t>(action_low.size()) != action_dim ||
        static_cast<std::size_t>(action_high.size()) != action_dim)
      throw std::invalid_argument("EnvSpec: action bounds do not match action_dim");
    if ((action_low.array() >= action_high.array()).any())
      throw std::invalid_argument("EnvSpec: action_low must be < action_high element-wise");
    if (goal_indices.size() != goal_dim) throw std::invalid_argument("EnvSpec: goal_indices size != goal_dim");
    for (auto i : goal_indices)
      if (i >= state_dim) throw std::invalid_argument("EnvSpec: goal index out of range");
  }

  Vector project_goal(const Vector& s) const {
    if (static_cast<std::size_t>(s.size()) != state_dim)
      throw std::invalid_argument("project_goal: state has wrong dimension");
    Vector g(goal_dim);
    for (std::size_t i = 0; i < goal_dim; ++i) g[i] = s[goal_indices[i]];
    return g;
  }

  Vector clamp_action(const Vector& a) const {
    if (static_cast<std::size_t>(a.size()) != action_dim)
      throw std::invalid_argument("clamp_action: action has wrong dimension");
    return a.cwiseMax(action_low).cwiseMin(action_high);
  }
};

struct RewardOutcome {
  double reward = 0.0;
  bool done = false;
};

inline double goal_distance(const EnvSpec& spec, const Vector& achieved, const Vector& g) {
  if (achieved.size() != g.size()) throw std::invalid_argument("goal_distance: dimension mismatch");
  if (spec.goal_metric == GoalMetric::euclidean) return (achieved - g).norm();
  return (achieved - g).cwiseAbs().maxCoeff();
}

/// Sparse goal reward 1{d(s,g) <= eps}; the episode terminates on success.
inline RewardOutcome goal_reward(const EnvSpec& spec, const Vector& s, const Vector& g) {
  if (static_cast<std::size_t>(s.size()) != spec.state_dim || static_cast<std::size_t>(g.size()) != spec.goal_dim)
    throw std::invalid_argument("goal_reward: dimension mismatch");
  const bool hit = goal_distance(spec, spec.project_goal(s), g) <= spec.goal_epsilon;
  return {hit ? 1.0 : 0.0, hit};
}

// ---------------------------------------------------------------------------
// Grid layouts

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

class MazeLayout {
 public:
  MazeLayout() = default;

  MazeLayout(std::size_t rows, std::size_t cols, std::vector<bool> walls, std::optional<Cell> start = {})
      : rows_(rows), cols_(cols), walls_(std::move(walls)), start_(start) {
    if (walls_.size() != rows_ * cols_) throw std::invalid_argument("MazeLayout: wall grid size mismatch");
    if (start_ && !is_free(*start_)) throw std::invalid_argument("MazeLayout: start cell is not free");
  }

  /// Parses '#' (wall), '.' (free) and 'S' (free start cell).
  static MazeLayout parse(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) {
      while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
      if (!line.empty()) lines.push_back(line);
    }
    if (lines.empty()) throw std::invalid_argument("MazeLayout: empty layout");
    const std::size_t cols = lines.front().size();
    std::vector<bool> walls;
    std::optional<Cell> start;
    for (std::size_t r = 0; r < lines.size(); ++r) {
      if (lines[r].size() != cols) throw std::invalid_argument("MazeLayout: ragged rows");
      for (std::size_t c = 0; c < cols; ++c) {
        const char ch = lines[r][c];
        if (ch == '#') {
          walls.push_back(true);
        } else if (ch == '.' || ch == 'S') {
          walls.push_back(false);
          if (ch == 'S') {
            if (start) throw std::invalid_argument("MazeLayout: more than one start cell");
            start = Cell{static_cast<int>(r), static_cast<int>(c)};
          }
        } else {
          throw std::invalid_argument(std::string("MazeLayout: unexpected character '") + ch + "'");
        }
      }
    }
    return MazeLayout(lines.size(), cols, std::move(walls), start);
  }

  static MazeLayout load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open maze layout '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  const std::optional<Cell>& start() const { return start_; }

  bool in_grid(Cell c) const {
    return c.row >= 0 && c.col >= 0 && static_cast<std::size_t>(c.row) < rows_ &&
           static_cast<std::size_t>(c.col) < cols_;
  }

  /// Cells outside the grid count as walls.
  bool is_free(Cell c) const { return in_grid(c) && !walls_[static_cast<std::size_t>(c.row) * cols_ + c.col]; }

  /// Continuous coordinates: x spans columns, y spans rows, one unit per cell.
  bool is_free_point(double x, double y) const {
    return is_free(Cell{static_cast<int>(std::floor(y)), static_cast<int>(std::floor(x))});
  }

  std::size_t free_count() const { return static_cast<std::size_t>(std::count(walls_.begin(), walls_.end(), false)); }

  std::string to_string() const {
    std::string out;
    for (std::size_t r = 0; r < rows_; ++r) {
      for (std::size_t c = 0; c < cols_; ++c) {
        const Cell cell{static_cast<int>(r), static_cast<int>(c)};
        out += (start_ && *start_ == cell) ? 'S' : (is_free(cell) ? '.' : '#');
      }
      out += '\n';
    }
    return out;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<bool> walls_;
  std::optional<Cell> start_;
};

/// Random interior walls with a walled boundary.
inline MazeLayout random_layout(std::size_t rows, std::size_t cols, double wall_prob, Rng& rng) {
  if (rows < 3 || cols < 3) throw std::invalid_argument("random_layout: need at least 3x3");
  std::vector<bool> walls(rows * cols, true);
  bool any_free = false;
  for (std::size_t r = 1; r + 1 < rows; ++r)
    for (std::size_t c = 1; c + 1 < cols; ++c) {
      const bool wall = uniform01(rng) < wall_prob;
      walls[r * cols + c] = wall;
      any_free |= !wall;
    }
  if (!any_free) walls[cols + 1] = false;
  return MazeLayout(rows, cols, std::move(walls));
}

/// Depth-first carved maze (odd dimensions), plus `extra_openings` random wall removals.
inline MazeLayout carved_maze(std::size_t rows, std::size_t cols, std::size_t extra_openings, Rng& rng) {
  if (rows < 3 || cols < 3 || rows % 2 == 0 || cols % 2 == 0)
    throw std::invalid_argument("carved_maze: dimensions must be odd and >= 3");
  std::vector<bool> walls(rows * cols, true);
  auto at = [&](int r, int c) -> std::vector<bool>::reference { return walls[static_cast<std::size_t>(r) * cols + c]; };
  std::vector<Cell> stack{{1, 1}};
  at(1, 1) = false;
  const int dr[4] = {-2, 2, 0, 0};
  const int dc[4] = {0, 0, -2, 2};
  while (!stack.empty()) {
    const Cell cur = stack.back();
    std::vector<int> options;
    for (int k = 0; k < 4; ++k) {
      const int r = cur.row + dr[k], c = cur.col + dc[k];
      if (r > 0 && c > 0 && r < static_cast<int>(rows) - 1 && c < static_cast<int>(cols) - 1 && at(r, c))
        options.push_back(k);
    }
    if (options.empty()) {
      stack.pop_back();
      continue;
    }
    const int k = options[uniform_index(rng, options.size())];
    at(cur.row + dr[k] / 2, cur.col + dc[k] / 2) = false;
    at(cur.row + dr[k], cur.col + dc[k]) = false;
    stack.push_back({cur.row + dr[k], cur.col + dc[k]});
  }
  for (std::size_t i = 0; i < extra_openings; ++i) {
    const int r = 1 + static_cast<int>(uniform_index(rng, rows - 2));
    const int c = 1 + static_cast<int>(uniform_index(rng, cols - 2));
    at(r, c) = false;
  }
  return MazeLayout(rows, cols, std::move(walls));
}

// ---------------------------------------------------------------------------
// Continuous environments

class GoalEnv {
 public:
  virtual ~GoalEnv() = default;
  virtual const EnvSpec& spec() const = 0;
  virtual Vector initial_state() const = 0;
  /// Episode start; deterministic unless the environment randomizes starts.
  virtual Vector sample_initial_state(Rng&) const { return initial_state(); }
  virtual Vector step(const Vector& s, const Vector& a) const = 0;
  /// Embeds a goal as a representative state (used for graph vertices).
  virtual Vector goal_to_state(const Vector& g) const = 0;
};

struct PointMassParams {
  double dt = 0.1;
  double max_speed = 2.0;
  double max_accel = 4.0;
  double start_jitter = 0.0;  // uniform position offset at episode start, cells
};

/// Point mass in a maze, state (x, y, vx, vy), action = normalized acceleration in [-1,1]^2.
class PointMassMaze : public GoalEnv {
 public:
  PointMassMaze(MazeLayout layout, PointMassParams params, std::size_t episode_length, double gamma,
                double goal_epsilon)
      : layout_(std::move(layout)), params_(params) {
    if (!layout_.start()) throw std::invalid_argument("PointMassMaze: layout has no start cell 'S'");
    if (params_.dt <= 0 || params_.max_speed <= 0 || params_.max_accel <= 0)
      throw std::invalid_argument("PointMassMaze: dt, max_speed and max_accel must be positive");
    spec_.state_dim = 4;
    spec_.action_dim = 2;
    spec_.goal_dim = 2;
    spec_.action_low = Vector::Constant(2, -1.0);
    spec_.action_high = Vector::Constant(2, 1.0);
    spec_.episode_length = episode_length;
    spec_.gamma = gamma;
    spec_.goal_epsilon = goal_epsilon;
    spec_.goal_metric = GoalMetric::euclidean;
    spec_.goal_indices = {0, 1};
    spec_.validate();
  }

  const EnvSpec& spec() const override { return spec_; }
  const MazeLayout& layout() const { return layout_; }
  const PointMassParams& params() const { return params_; }

  Vector initial_state() const override {
    const Cell s = *layout_.start();
    Vector st(4);
    st << s.col + 0.5, s.row + 0.5, 0.0, 0.0;
    return st;
  }

  Vector sample_initial_state(Rng& rng) const override {
    Vector st = initial_state();
    if (params_.start_jitter > 0)
      for (int i = 0; i < 2; ++i) st[i] += params_.start_jitter * (2.0 * uniform01(rng) - 1.0);
    return st;
  }

  Vector goal_to_state(const Vector& g) const override {
    Vector st = Vector::Zero(4);
    st.head(2) = g;
    return st;
  }

  Vector step(const Vector& s, const Vector& a) const override { return step_pointmass(layout_, params_, s, spec_.clamp_action(a)); }

  static Vector step_pointmass(const MazeLayout& layout, const PointMassParams& p, const Vector& s, const Vector& a) {
    Vector next = s;
    Eigen::Vector2d v = s.segment<2>(2) + p.max_accel * p.dt * a.head<2>();
    const double speed = v.norm();
    if (speed > p.max_speed) v *= p.max_speed / speed;
    next[2] = v[0];
    next[3] = v[1];
    // Axis-separable collision: a blocked axis stops on the face of the first wall cell.
    const auto x = advance(s[0], v[0] * p.dt, [&](int c) { return layout.is_free(Cell{static_cast<int>(std::floor(s[1])), c}); });
    next[0] = x.first;
    if (x.second) next[2] = 0.0;
    const auto y = advance(s[1], v[1] * p.dt, [&](int r) { return layout.is_free(Cell{r, static_cast<int>(std::floor(next[0]))}); });
    next[1] = y.first;
    if (y.second) next[3] = 0.0;
    return next;
  }

  /// Moves `pos` by `delta` along one axis; returns the new coordinate and whether a wall blocked it.
  template <class FreeFn>
  static std::pair<double, bool> advance(double pos, double delta, FreeFn&& free) {
    const double target = pos + delta;
    int cell = static_cast<int>(std::floor(pos));
    const int last = static_cast<int>(std::floor(target));
    const int dir = delta > 0 ? 1 : -1;
    while (cell != last) {
      if (!free(cell + dir)) {
        // Face of the wall cell, nudged into the free cell so floor() stays there.
        const double face = dir > 0 ? static_cast<double>(cell + 1) : static_cast<double>(cell);
        return {dir > 0 ? std::nextafter(face, -std::numeric_limits<double>::infinity()) : face, true};
      }
      cell += dir;
    }
    return {target, false};
  }

  Cell cell_of(const Vector& s) const {
    return Cell{static_cast<int>(std::floor(s[1])), static_cast<int>(std::floor(s[0]))};
  }

 private:
  MazeLayout layout_;
  PointMassParams params_;
  EnvSpec spec_;
};

/// Open room with four corner pads; state (x, y, vx, vy, h1, h2, h3) where h
/// holds the ids (1..4, 0 = none) of the last three distinct pads pressed,
/// oldest first. Goals are target histories.
class PinPadLite : public GoalEnv {
 public:
  PinPadLite(std::size_t room_size, PointMassParams params, std::size_t episode_length, double gamma)
      : room_(room_size), params_(params) {
    if (room_size < 2) throw std::invalid_argument("PinPadLite: room must be at least 2x2");
    std::vector<bool> walls((room_size + 2) * (room_size + 2), true);
    for (std::size_t r = 1; r <= room_size; ++r)
      for (std::size_t c = 1; c <= room_size; ++c) walls[r * (room_size + 2) + c] = false;
    const int mid = static_cast<int>(room_size / 2) + 1;
    layout_ = MazeLayout(room_size + 2, room_size + 2, std::move(walls), Cell{mid, mid});
    spec_.state_dim = 7;
    spec_.action_dim = 2;
    spec_.goal_dim = 3;
    spec_.action_low = Vector::Constant(2, -1.0);
    spec_.action_high = Vector::Constant(2, 1.0);
    spec_.episode_length = episode_length;
    spec_.gamma = gamma;
    spec_.goal_epsilon = 0.0;
    spec_.goal_metric = GoalMetric::per_dim_threshold;
    spec_.goal_indices = {4, 5, 6};
    spec_.validate();
  }

  const EnvSpec& spec() const override { return spec_; }
  const MazeLayout& layout() const { return layout_; }

  Vector initial_state() const override {
    Vector s = Vector::Zero(7);
    const double c = 1.0 + room_ / 2.0;
    s[0] = c;
    s[1] = c;
    return s;
  }

  Vector goal_to_state(const Vector& g) const override {
    Vector s = initial_state();
    s.tail(3) = g;
    return s;
  }

  /// Pad id under a position (corner cells of the room), 0 when none.
  int pad_at(double x, double y) const {
    const int c = static_cast<int>(std::floor(x)), r = static_cast<int>(std::floor(y));
    const int lo = 1, hi = static_cast<int>(room_);
    if (r == lo && c == lo) return 1;
    if (r == lo && c == hi) return 2;
    if (r == hi && c == hi) return 3;
    if (r == hi && c == lo) return 4;
    return 0;
  }

  Vector step(const Vector& s, const Vector& a) const override {
    if (s.size() != 7) throw std::invalid_argument("PinPadLite::step: state must be 7-dimensional");
    Vector next = s;
    next.head(4) = PointMassMaze::step_pointmass(layout_, params_, s.head(4), spec_.clamp_action(a));
    const int pad = pad_at(next[0], next[1]);
    if (pad != 0 && pad != static_cast<int>(s[6])) {
      next[4] = s[5];
      next[5] = s[6];
      next[6] = pad;
    }
    return next;
  }

 private:
  std::size_t room_;
  PointMassParams params_;
  MazeLayout layout_;
  EnvSpec spec_;
};

/// 1-D chain of `n` integer positions; action a > 0.5 moves right, a < -0.5 left,
/// anything else stays. Goals are positions and must be hit exactly.
struct DiscreteMDP;

class ChainEnv : public GoalEnv {
 public:
  ChainEnv(std::size_t n, std::size_t episode_length, double gamma) : n_(n) {
    if (n < 2) throw std::invalid_argument("ChainEnv: need at least 2 states");
    spec_.state_dim = 1;
    spec_.action_dim = 1;
    spec_.goal_dim = 1;
    spec_.action_low = Vector::Constant(1, -1.0);
    spec_.action_high = Vector::Constant(1, 1.0);
    spec_.episode_length = episode_length;
    spec_.gamma = gamma;
    spec_.goal_epsilon = 0.0;
    spec_.goal_indices = {0};
    spec_.validate();
  }

  const EnvSpec& spec() const override { return spec_; }
  std::size_t size() const { return n_; }
  Vector initial_state() const override { return Vector::Zero(1); }
  Vector goal_to_state(const Vector& g) const override { return g; }

  Vector step(const Vector& s, const Vector& a) const override {
    if (s.size() != 1 || a.size() != 1) throw std::invalid_argument("ChainEnv::step: bad dimensions");
    double x = s[0];
    if (a[0] > 0.5) x = std::min(x + 1.0, static_cast<double>(n_ - 1));
    if (a[0] < -0.5) x = std::max(x - 1.0, 0.0);
    return Vector::Constant(1, x);
  }

  /// Equivalent tabular MDP (a 1 x n corridor); state i is position i.
  DiscreteMDP tabular(std::size_t goal) const;

 private:
  std::size_t n_;
  EnvSpec spec_;
};

// ---------------------------------------------------------------------------
// Deterministic tabular MDPs

struct DiscreteMDP {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<std::size_t> next_state;  // row-major [state][action]
  std::size_t goal_state = 0;
  double gamma = 0.99;
  std::vector<Cell> cells;  // grid cell per state, when built from a maze

  std::size_t next(std::size_t s, std::size_t a) const { return next_state[s * n_actions + a]; }

  void validate() const {
    if (n_states == 0 || n_actions == 0) throw std::invalid_argument("DiscreteMDP: empty state or action set");
    if (next_state.size() != n_states * n_actions) throw std::invalid_argument("DiscreteMDP: table size mismatch");
    if (goal_state >= n_states) throw std::invalid_argument("DiscreteMDP: goal out of range");
    if (!(gamma > 0 && gamma < 1)) throw std::invalid_argument("DiscreteMDP: gamma must lie in (0,1)");
    for (std::size_t s = 0; s < n_states; ++s) {
      bool self_loop = false;
      for (std::size_t a = 0; a < n_actions; ++a) {
        if (next(s, a) >= n_states) throw std::invalid_argument("DiscreteMDP: next_state out of range");
        self_loop |= next(s, a) == s;
      }
      if (!self_loop) throw std::invalid_argument("DiscreteMDP: state without a self-loop action");
    }
  }

  std::optional<std::size_t> state_of(Cell c) const {
    for (std::size_t i = 0; i < cells.size(); ++i)
      if (cells[i] == c) return i;
    return std::nullopt;
  }
};

enum GridAction : std::size_t { kStay = 0, kUp = 1, kDown = 2, kLeft = 3, kRight = 4 };

/// States are free cells in row-major order; actions {stay, up, down, left, right};
/// moves into walls map to the current state.
inline DiscreteMDP tabular_from_maze(const MazeLayout& maze, Cell goal_cell, double gamma = 0.99) {
  if (maze.free_count() == 0) throw std::invalid_argument("tabular_from_maze: layout has no free cells");
  if (!maze.is_free(goal_cell)) throw std::invalid_argument("tabular_from_maze: goal cell is not free");
  DiscreteMDP mdp;
  mdp.n_actions = 5;
  mdp.gamma = gamma;
  std::vector<long> index(maze.rows() * maze.cols(), -1);
  for (std::size_t r = 0; r < maze.rows(); ++r)
    for (std::size_t c = 0; c < maze.cols(); ++c) {
      const Cell cell{static_cast<int>(r), static_cast<int>(c)};
      if (maze.is_free(cell)) {
        index[r * maze.cols() + c] = static_cast<long>(mdp.cells.size());
        mdp.cells.push_back(cell);
      }
    }
  mdp.n_states = mdp.cells.size();
  mdp.next_state.resize(mdp.n_states * mdp.n_actions);
  const int dr[5] = {0, -1, 1, 0, 0};
  const int dc[5] = {0, 0, 0, -1, 1};
  for (std::size_t s = 0; s < mdp.n_states; ++s)
    for (std::size_t a = 0; a < 5; ++a) {
      const Cell to{mdp.cells[s].row + dr[a], mdp.cells[s].col + dc[a]};
      mdp.next_state[s * 5 + a] =
          maze.is_free(to) ? static_cast<std::size_t>(index[static_cast<std::size_t>(to.row) * maze.cols() + to.col]) : s;
    }
  mdp.goal_state = static_cast<std::size_t>(index[static_cast<std::size_t>(goal_cell.row) * maze.cols() + goal_cell.col]);
  mdp.validate();
  return mdp;
}

inline DiscreteMDP ChainEnv::tabular(std::size_t goal) const {
  if (goal >= n_) throw std::invalid_argument("ChainEnv::tabular: goal out of range");
  const std::string wall(n_ + 2, '#');
  return tabular_from_maze(MazeLayout::parse(wall + "\n#" + std::string(n_, '.') + "#\n" + wall + "\n"),
                           Cell{1, static_cast<int>(goal) + 1}, spec_.gamma);
}

/// Continuous-action view of a DiscreteMDP: the state is the state index, the
/// action in [-1, 1] selects one of n_actions equal-width bins, goals are indices.
class TabularEnv : public GoalEnv {
 public:
  TabularEnv(DiscreteMDP mdp, std::size_t episode_length) : mdp_(std::move(mdp)) {
    mdp_.validate();
    spec_.state_dim = spec_.action_dim = spec_.goal_dim = 1;
    spec_.action_low = Vector::Constant(1, -1.0);
    spec_.action_high = Vector::Constant(1, 1.0);
    spec_.episode_length = episode_length;
    spec_.gamma = mdp_.gamma;
    spec_.goal_indices = {0};
    spec_.validate();
  }

  const EnvSpec& spec() const override { return spec_; }
  const DiscreteMDP& mdp() const { return mdp_; }
  Vector initial_state() const override { return Vector::Zero(1); }
  Vector goal_to_state(const Vector& g) const override { return g; }

  std::size_t action_index(double a) const {
    const double u = std::clamp((a + 1.0) / 2.0, 0.0, 1.0);
    return std::min(static_cast<std::size_t>(u * static_cast<double>(mdp_.n_actions)), mdp_.n_actions - 1);
  }

  /// Centre of the bin for a discrete action.
  double action_value(std::size_t index) const {
    return -1.0 + (2.0 * static_cast<double>(index) + 1.0) / static_cast<double>(mdp_.n_actions);
  }

  Vector step(const Vector& s, const Vector& a) const override {
    if (s.size() != 1 || a.size() != 1) throw std::invalid_argument("TabularEnv::step: bad dimensions");
    const auto idx = static_cast<std::size_t>(std::llround(s[0]));
    if (idx >= mdp_.n_states) throw std::out_of_range("TabularEnv::step: state out of range");
    return Vector::Constant(1, static_cast<double>(mdp_.next(idx, action_index(a[0]))));
  }

 private:
  DiscreteMDP mdp_;
  EnvSpec spec_;
};

/// Exact k-fold image T^k(S0): states reachable in exactly `steps` transitions.
inline std::vector<std::size_t> reachable_set(const DiscreteMDP& mdp, const std::vector<std::size_t>& start,
                                              std::size_t steps) {
  if (steps == 0) throw std::invalid_argument("reachable_set: steps must be >= 1");
  std::vector<char> cur(mdp.n_states, 0);
  for (auto s : start) {
    if (s >= mdp.n_states) throw std::out_of_range("reachable_set: state out of range");
    cur[s] = 1;
  }
  std::vector<char> nxt(mdp.n_states, 0);
  for (std::size_t k = 0; k < steps; ++k) {
    std::fill(nxt.begin(), nxt.end(), 0);
    for (std::size_t s = 0; s < mdp.n_states; ++s)
      if (cur[s])
        for (std::size_t a = 0; a < mdp.n_actions; ++a) nxt[mdp.next(s, a)] = 1;
    cur.swap(nxt);
  }
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s < mdp.n_states; ++s)
    if (cur[s]) out.push_back(s);
  return out;
}

inline constexpr std::size_t kUnreachable = std::numeric_limits<std::size_t>::max();

/// BFS step counts from `source` to every state.
inline std::vector<std::size_t> shortest_steps_from(const DiscreteMDP& mdp, std::size_t source) {
  std::vector<std::size_t> dist(mdp.n_states, kUnreachable);
  std::deque<std::size_t> queue{source};
  dist[source] = 0;
  while (!queue.empty()) {
    const auto s = queue.front();
    queue.pop_front();
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      const auto t = mdp.next(s, a);
      if (dist[t] == kUnreachable) {
        dist[t] = dist[s] + 1;
        queue.push_back(t);
      }
    }
  }
  return dist;
}

/// BFS step counts from every state to `target` (reverse edges).
inline std::vector<std::size_t> shortest_steps_to(const DiscreteMDP& mdp, std::size_t target) {
  std::vector<std::vector<std::size_t>> preds(mdp.n_states);
  for (std::size_t s = 0; s < mdp.n_states; ++s)
    for (std::size_t a = 0; a < mdp.n_actions; ++a) preds[mdp.next(s, a)].push_back(s);
  std::vector<std::size_t> dist(mdp.n_states, kUnreachable);
  std::deque<std::size_t> queue{target};
  dist[target] = 0;
  while (!queue.empty()) {
    const auto s = queue.front();
    queue.pop_front();
    for (auto p : preds[s])
      if (dist[p] == kUnreachable) {
        dist[p] = dist[s] + 1;
        queue.push_back(p);
      }
  }
  return dist;
}

}  // namespace curioplan
