#include "curioplan/replay.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace curioplan;

namespace {

// Trajectory whose states are (offset + t, -(offset + t)); every state is distinct.
void add_line(ReplayBuffer& buf, std::size_t length, double offset) {
  std::vector<Vector> states, actions;
  for (std::size_t t = 0; t <= length; ++t) {
    Vector s(2);
    s << offset + static_cast<double>(t), -(offset + static_cast<double>(t));
    states.push_back(s);
    if (t < length) actions.push_back(Vector::Constant(1, 0.5));
  }
  buf.append_trajectory(states, actions);
}

RelabelConfig cfg_xy() {
  RelabelConfig c;
  c.goal_indices = {0, 1};
  return c;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("curioplan_" + name)).string();
}

}  // namespace

TEST(Replay, AppendCountsTransitions) {
  ReplayBuffer buf(2, 1, 100);
  add_line(buf, 2, 0);
  EXPECT_EQ(buf.num_transitions(), 2u);
  EXPECT_EQ(buf.num_states(), 3u);
  EXPECT_THROW(buf.append_trajectory({Vector::Zero(2)}, {}), std::invalid_argument);
  EXPECT_THROW(buf.append_trajectory({Vector::Zero(2), Vector::Zero(2)}, {}), std::invalid_argument);
  EXPECT_THROW(buf.append_trajectory({Vector::Zero(3), Vector::Zero(3)}, {Vector::Zero(1)}), std::invalid_argument);
}

TEST(Replay, EvictsOldestBeyondCapacity) {
  ReplayBuffer buf(2, 1, 25);
  for (int i = 0; i < 6; ++i) add_line(buf, 10, 100.0 * i);
  EXPECT_LE(buf.num_transitions(), 25u);
  EXPECT_EQ(buf.num_transitions(), 20u);
  EXPECT_EQ(buf.num_trajectories(), 2u);
  EXPECT_FLOAT_EQ(buf.state(0, 0)[0], 400.0f);
  EXPECT_DOUBLE_EQ(buf.transition(0).s[0], 400.0);
  EXPECT_DOUBLE_EQ(buf.transition(19).s_next[0], 510.0);
  EXPECT_EQ(buf.locate_state(11), (std::pair<std::size_t, std::size_t>{1, 0}));
  EXPECT_THROW(buf.transition(20), std::out_of_range);
}

TEST(Relabel, RewardOnlyForTauOne) {
  ReplayBuffer buf(2, 1, 1000);
  add_line(buf, 10, 0);
  add_line(buf, 10, 1000);
  const auto cfg = cfg_xy();
  auto batch = allocate_batch(buf, cfg, 3);
  relabel_into(buf, cfg, 0, 2, GoalDraw{true, 1, 0}, batch, 0);
  relabel_into(buf, cfg, 0, 2, GoalDraw{true, 3, 0}, batch, 1);
  relabel_into(buf, cfg, 0, 2, GoalDraw{false, 1, 15}, batch, 2);  // state in the second trajectory
  EXPECT_EQ(batch.r[0], 1.0f);
  EXPECT_EQ(batch.done[0], 1.0f);
  EXPECT_EQ(batch.g(0, 0), 3.0f);
  EXPECT_EQ(batch.r[1], 0.0f);
  EXPECT_EQ(batch.g(0, 1), 5.0f);
  EXPECT_EQ(batch.r[2], 0.0f);
  EXPECT_EQ(batch.done[2], 0.0f);
  EXPECT_EQ(batch.g(0, 2), 1004.0f);
}

TEST(Relabel, TauClampedAtTrajectoryEnd) {
  ReplayBuffer buf(2, 1, 100);
  add_line(buf, 5, 0);
  const auto cfg = cfg_xy();
  auto batch = allocate_batch(buf, cfg, 1);
  relabel_into(buf, cfg, 0, 4, GoalDraw{true, 50, 0}, batch, 0);
  EXPECT_EQ(batch.g(0, 0), 5.0f);
  EXPECT_EQ(batch.draws[0].tau, 1u);
  EXPECT_EQ(batch.r[0], 1.0f);
}

TEST(Relabel, NegativeMatchingNextStateStillRewarded) {
  ReplayBuffer buf(2, 1, 100);
  add_line(buf, 5, 0);
  const auto cfg = cfg_xy();
  auto batch = allocate_batch(buf, cfg, 1);
  relabel_into(buf, cfg, 0, 1, GoalDraw{false, 1, 2}, batch, 0);
  EXPECT_EQ(batch.r[0], 1.0f);
}

TEST(Relabel, EmptyBufferErrors) {
  ReplayBuffer buf(2, 1, 100);
  Rng rng = make_rng(1);
  EXPECT_THROW(sample_relabeled(buf, cfg_xy(), 4, rng), std::invalid_argument);
}

TEST(Relabel, RewardImpliesGoalEqualsNextState) {
  ReplayBuffer buf(2, 1, 10000);
  Rng rng = make_rng(2);
  for (int i = 0; i < 20; ++i) {
    // Repeated states (random walk on a coarse lattice) so negatives can hit.
    std::vector<Vector> states{Vector::Zero(2)}, actions;
    for (int t = 0; t < 30; ++t) {
      Vector s = states.back();
      s[0] += static_cast<double>(uniform_index(rng, 3)) - 1.0;
      states.push_back(s);
      actions.push_back(Vector::Zero(1));
    }
    buf.append_trajectory(states, actions);
  }
  const auto cfg = cfg_xy();
  for (int k = 0; k < 20; ++k) {
    const auto b = sample_relabeled(buf, cfg, 256, rng);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(b.size()); ++i) {
      const bool equal = b.g(0, i) == b.s_next(0, i) && b.g(1, i) == b.s_next(1, i);
      EXPECT_EQ(b.r[i] == 1.0f, equal);
      EXPECT_EQ(b.done[i], b.r[i]);
    }
  }
}

TEST(Relabel, PositiveFractionAndGeometricTau) {
  ReplayBuffer buf(2, 1, 1'000'000);
  for (int i = 0; i < 4; ++i) add_line(buf, 5000, 10000.0 * i);
  const auto cfg = cfg_xy();
  Rng rng = make_rng(3);
  std::size_t positives = 0, tau_one = 0, total = 0;
  for (int k = 0; k < 50; ++k) {
    const auto b = sample_relabeled(buf, cfg, 4000, rng);
    for (const auto& d : b.draws) {
      ++total;
      if (d.positive) {
        ++positives;
        tau_one += d.tau == 1;
      }
    }
  }
  EXPECT_NEAR(static_cast<double>(positives) / total, 0.75, 0.01);
  EXPECT_NEAR(static_cast<double>(tau_one) / positives, 0.2, 0.01);
}

TEST(ReplayIo, RoundTripIsBitExact) {
  ReplayBuffer buf(2, 1, 1000);
  add_line(buf, 7, 0.1);
  add_line(buf, 3, -5.3);
  const auto path = temp_path("roundtrip.gcrb");
  buf.save(path);
  const auto loaded = ReplayBuffer::load(path, 2, 1, 1000);
  EXPECT_TRUE(loaded == buf);
  std::filesystem::remove(path);
}

TEST(ReplayIo, TruncatedAndMismatchedFilesError) {
  ReplayBuffer buf(2, 1, 1000);
  add_line(buf, 7, 0.1);
  const auto path = temp_path("truncated.gcrb");
  buf.save(path);
  EXPECT_THROW(ReplayBuffer::load(path, 3, 1, 1000), io::FormatError);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 5);
  EXPECT_THROW(ReplayBuffer::load(path, 2, 1, 1000), io::FormatError);
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << "XXXX0000";
  }
  EXPECT_THROW(ReplayBuffer::load(path, 2, 1, 1000), io::FormatError);
  std::filesystem::remove(path);
  EXPECT_THROW(ReplayBuffer::load(path, 2, 1, 1000), std::runtime_error);
}
