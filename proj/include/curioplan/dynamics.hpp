#pragma once

// Probabilistic ensemble forward model over state deltas, its disagreement
// reward, and particle propagation for planning.

#include "curioplan/mlp.hpp"
#include "curioplan/replay.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

namespace curioplan {

using MatrixF = Eigen::MatrixXf;
using VectorF = Eigen::VectorXf;

struct EnsembleConfig {
  std::size_t members = 7;
  std::size_t elites = 5;
  std::size_t hidden_layers = 4;
  std::size_t hidden_units = 200;
  Activation activation = Activation::silu;
  double learning_rate = 0.00028;
  double weight_decay = 0.0001;
  std::size_t batch_size = 512;
  double holdout_fraction = 0.1;
  std::size_t max_holdout = 5000;
  bool bootstrap = true;
  bool disagreement_mean_only = false;

  void validate() const {
    if (members < 2) throw std::invalid_argument("EnsembleConfig: need at least 2 members");
    if (elites < 1 || elites > members) throw std::invalid_argument("EnsembleConfig: elites must lie in [1, members]");
    if (batch_size == 0) throw std::invalid_argument("EnsembleConfig: zero batch size");
    if (!(holdout_fraction > 0 && holdout_fraction < 1)) throw std::invalid_argument("EnsembleConfig: holdout_fraction in (0,1)");
  }
};

/// Per-feature affine standardization; features with (near) zero spread keep scale 1.
struct Normalizer {
  VectorF mean;
  VectorF std;

  static constexpr float kMinStd = 1e-6f;

  void fit(const MatrixF& data) {
    if (data.cols() == 0) throw std::invalid_argument("Normalizer::fit: no data");
    mean = data.rowwise().mean();
    const MatrixF centered = data.colwise() - mean;
    std = (centered.array().square().rowwise().sum() / static_cast<float>(data.cols())).sqrt();
    for (Eigen::Index i = 0; i < std.size(); ++i)
      if (!(std[i] >= kMinStd)) std[i] = 1.0f;
  }
  void identity(Eigen::Index dim) {
    mean = VectorF::Zero(dim);
    std = VectorF::Ones(dim);
  }
  MatrixF normalize(const MatrixF& x) const {
    return (x.colwise() - mean).array().colwise() / std.array();
  }
  MatrixF denormalize(const MatrixF& x) const {
    return (x.array().colwise() * std.array()).matrix().colwise() + mean;
  }
};

/// Next-state Gaussian in state units, one column per query.
struct GaussianBatch {
  MatrixF mean;
  MatrixF var;
};

struct Gaussian {
  Vector mean;
  Vector var;
};

class EnsembleModel {
 public:
  EnsembleModel() = default;
  EnsembleModel(std::size_t state_dim, std::size_t action_dim, EnsembleConfig cfg, Rng& rng)
      : state_dim_(state_dim), action_dim_(action_dim), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (state_dim == 0 || action_dim == 0) throw std::invalid_argument("EnsembleModel: zero dimension");
    std::vector<std::size_t> sizes{state_dim + action_dim};
    for (std::size_t i = 0; i < cfg_.hidden_layers; ++i) sizes.push_back(cfg_.hidden_units);
    sizes.push_back(2 * state_dim);
    for (std::size_t m = 0; m < cfg_.members; ++m) {
      members_.emplace_back(sizes, cfg_.activation, Activation::linear);
      members_.back().init_uniform_fan_in(rng);
      adam_.emplace_back(members_.back(), cfg_.learning_rate, cfg_.weight_decay);
    }
    input_norm_.identity(static_cast<Eigen::Index>(state_dim + action_dim));
    output_norm_.identity(static_cast<Eigen::Index>(state_dim));
    elites_.resize(cfg_.elites);
    std::iota(elites_.begin(), elites_.end(), 0);
  }

  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  const EnsembleConfig& config() const { return cfg_; }
  std::size_t num_members() const { return members_.size(); }
  const std::vector<std::size_t>& elites() const { return elites_; }
  void set_elites(std::vector<std::size_t> e) {
    if (e.empty()) throw std::invalid_argument("set_elites: empty elite set");
    for (auto i : e)
      if (i >= members_.size()) throw std::invalid_argument("set_elites: member index out of range");
    elites_ = std::move(e);
  }
  bool is_elite(std::size_t m) const { return std::find(elites_.begin(), elites_.end(), m) != elites_.end(); }

  Mlp<float>& member(std::size_t m) { return members_.at(m); }
  const Mlp<float>& member(std::size_t m) const { return members_.at(m); }
  AdamState<float>& optimizer(std::size_t m) { return adam_.at(m); }
  Normalizer& input_normalizer() { return input_norm_; }
  const Normalizer& input_normalizer() const { return input_norm_; }
  Normalizer& output_normalizer() { return output_norm_; }
  const Normalizer& output_normalizer() const { return output_norm_; }

  /// Normalized network input for state/action columns.
  MatrixF network_input(const MatrixF& s, const MatrixF& a) const {
    if (static_cast<std::size_t>(s.rows()) != state_dim_ || static_cast<std::size_t>(a.rows()) != action_dim_ ||
        s.cols() != a.cols())
      throw std::invalid_argument("EnsembleModel: state/action shape mismatch");
    MatrixF x(s.rows() + a.rows(), s.cols());
    x.topRows(s.rows()) = s;
    x.bottomRows(a.rows()) = a;
    return input_norm_.normalize(x);
  }

  /// Prediction of any member (no elite check); used by training and propagation.
  GaussianBatch predict_member(std::size_t m, const MatrixF& s, const MatrixF& a) const {
    return decode(members_.at(m).forward(network_input(s, a)), s);
  }

  GaussianBatch decode(const MatrixF& out, const MatrixF& s) const {
    const auto d = static_cast<Eigen::Index>(state_dim_);
    GaussianBatch g;
    g.mean = s + output_norm_.denormalize(out.topRows(d));
    const MatrixF lv = out.bottomRows(d).cwiseMax(static_cast<float>(kMinLogVar)).cwiseMin(static_cast<float>(kMaxLogVar));
    g.var = lv.array().exp().colwise() * output_norm_.std.array().square();
    return g;
  }

  /// Next-state mean and variance from elite member `m`.
  Gaussian predict_dist(const Vector& s, const Vector& a, std::size_t m) const {
    if (m >= members_.size() || !is_elite(m))
      throw std::invalid_argument("predict_dist: member " + std::to_string(m) + " is not an elite");
    const auto g = predict_member(m, s.cast<float>(), a.cast<float>());
    return {g.mean.col(0).cast<double>(), g.var.col(0).cast<double>()};
  }

  std::vector<GaussianBatch> predict_elites(const MatrixF& s, const MatrixF& a) const {
    const MatrixF x = network_input(s, a);
    std::vector<GaussianBatch> out;
    out.reserve(elites_.size());
    for (auto m : elites_) out.push_back(decode(members_[m].forward(x), s));
    return out;
  }

  /// GCNN archive with one network per member plus normalizers and elites as scalars.
  void save(const std::string& path) const {
    NetworkArchive<float> ar;
    for (std::size_t m = 0; m < members_.size(); ++m) {
      ar.networks["member" + std::to_string(m)] = members_[m];
      ar.put_adam("member" + std::to_string(m), adam_[m]);
    }
    ar.scalars["state_dim"] = static_cast<double>(state_dim_);
    ar.scalars["action_dim"] = static_cast<double>(action_dim_);
    ar.scalars["n_elites"] = static_cast<double>(elites_.size());
    for (std::size_t i = 0; i < elites_.size(); ++i) ar.scalars["elite." + std::to_string(i)] = static_cast<double>(elites_[i]);
    put_vector(ar, "input_mean", input_norm_.mean);
    put_vector(ar, "input_std", input_norm_.std);
    put_vector(ar, "output_mean", output_norm_.mean);
    put_vector(ar, "output_std", output_norm_.std);
    ar.save(path);

    nlohmann::json manifest = {{"members", members_.size()},
                               {"elites", elites_},
                               {"state_dim", state_dim_},
                               {"action_dim", action_dim_},
                               {"hidden_layers", cfg_.hidden_layers},
                               {"hidden_units", cfg_.hidden_units},
                               {"checkpoint", path}};
    std::ofstream(path + ".json") << manifest.dump(2) << '\n';
  }

  /// Loads weights saved by `save`; the architecture in `cfg` must match.
  static EnsembleModel load(const std::string& path, EnsembleConfig cfg) {
    const auto ar = NetworkArchive<float>::load(path);
    EnsembleModel model;
    model.cfg_ = std::move(cfg);
    model.state_dim_ = static_cast<std::size_t>(ar.scalar("state_dim"));
    model.action_dim_ = static_cast<std::size_t>(ar.scalar("action_dim"));
    for (std::size_t m = 0;; ++m) {
      const auto name = "member" + std::to_string(m);
      if (!ar.networks.count(name)) break;
      model.members_.push_back(ar.network(name));
      model.adam_.push_back(ar.get_adam(name));
    }
    if (model.members_.size() < 2) throw io::FormatError("'" + path + "': ensemble needs at least 2 members");
    model.cfg_.members = model.members_.size();
    const auto n_elites = static_cast<std::size_t>(ar.scalar("n_elites"));
    model.elites_.clear();
    for (std::size_t i = 0; i < n_elites; ++i)
      model.elites_.push_back(static_cast<std::size_t>(ar.scalar("elite." + std::to_string(i))));
    model.cfg_.elites = n_elites;
    model.input_norm_.mean = get_vector(ar, "input_mean", model.state_dim_ + model.action_dim_);
    model.input_norm_.std = get_vector(ar, "input_std", model.state_dim_ + model.action_dim_);
    model.output_norm_.mean = get_vector(ar, "output_mean", model.state_dim_);
    model.output_norm_.std = get_vector(ar, "output_std", model.state_dim_);
    return model;
  }

 private:
  static void put_vector(NetworkArchive<float>& ar, const std::string& name, const VectorF& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) ar.scalars[name + "." + std::to_string(i)] = v[i];
  }
  static VectorF get_vector(const NetworkArchive<float>& ar, const std::string& name, std::size_t n) {
    VectorF v(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) v[static_cast<Eigen::Index>(i)] = static_cast<float>(ar.scalar(name + "." + std::to_string(i)));
    return v;
  }

  std::size_t state_dim_ = 0;
  std::size_t action_dim_ = 0;
  EnsembleConfig cfg_;
  std::vector<Mlp<float>> members_;
  std::vector<AdamState<float>> adam_;
  Normalizer input_norm_;
  Normalizer output_norm_;
  std::vector<std::size_t> elites_;
};

// ---------------------------------------------------------------------------
// Training

struct FitReport {
  std::vector<double> holdout_log_likelihood;  // per member, mean per element, normalized space
  std::vector<double> train_loss;              // mean member loss per epoch
  std::vector<std::size_t> elites;
};

namespace detail {
inline MatrixF gather_columns(const MatrixF& m, const std::vector<Eigen::Index>& idx, std::size_t first, std::size_t count) {
  MatrixF out(m.rows(), static_cast<Eigen::Index>(count));
  for (std::size_t j = 0; j < count; ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(idx[first + j]);
  return out;
}

inline double gaussian_log_likelihood(const MatrixF& out, const MatrixF& target) {
  const auto d = target.rows();
  const MatrixF lv = out.bottomRows(d).cwiseMax(static_cast<float>(kMinLogVar)).cwiseMin(static_cast<float>(kMaxLogVar));
  const Eigen::ArrayXXd diff = (out.topRows(d) - target).cast<double>().array();
  const Eigen::ArrayXXd lvd = lv.cast<double>().array();
  const double ll = (-0.5 * (diff.square() * (-lvd).exp() + lvd + std::log(2 * std::numbers::pi))).sum();
  return ll / static_cast<double>(diff.size());
}

inline void shuffle(std::vector<Eigen::Index>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}
}  // namespace detail

/// Trains every member for `epochs` passes with Gaussian NLL, refits the
/// normalizers on the training split, and picks elites by held-out likelihood.
inline FitReport fit_ensemble(EnsembleModel& model, const ReplayBuffer& buf, std::size_t epochs, Rng& rng) {
  const auto& cfg = model.config();
  const std::size_t n = buf.num_transitions();
  if (buf.state_dim() != model.state_dim() || buf.action_dim() != model.action_dim())
    throw std::invalid_argument("fit_ensemble: buffer dimensions do not match the model");
  if (n < 2 * cfg.batch_size)
    throw std::invalid_argument("fit_ensemble: need at least 2 batches of data (" + std::to_string(2 * cfg.batch_size) +
                                " transitions), have " + std::to_string(n));

  const auto sd = static_cast<Eigen::Index>(model.state_dim()), ad = static_cast<Eigen::Index>(model.action_dim());
  MatrixF s(sd, static_cast<Eigen::Index>(n)), a(ad, static_cast<Eigen::Index>(n)), delta(sd, static_cast<Eigen::Index>(n));
  {
    Eigen::Index col = 0;
    for (std::size_t i = 0; i < buf.num_trajectories(); ++i)
      for (std::size_t t = 0; t < buf.trajectory(i).length; ++t, ++col) {
        const auto st = buf.state(i, t), sn = buf.state(i, t + 1), at = buf.action(i, t);
        for (Eigen::Index k = 0; k < sd; ++k) {
          s(k, col) = st[static_cast<std::size_t>(k)];
          delta(k, col) = sn[static_cast<std::size_t>(k)] - st[static_cast<std::size_t>(k)];
        }
        for (Eigen::Index k = 0; k < ad; ++k) a(k, col) = at[static_cast<std::size_t>(k)];
      }
  }

  std::vector<Eigen::Index> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  detail::shuffle(perm, rng);
  const std::size_t n_hold =
      std::clamp<std::size_t>(static_cast<std::size_t>(cfg.holdout_fraction * static_cast<double>(n)), 1, cfg.max_holdout);
  const std::size_t n_train = n - n_hold;
  std::vector<Eigen::Index> train_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<Eigen::Index> hold_idx(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());

  MatrixF x_all(sd + ad, static_cast<Eigen::Index>(n));
  x_all.topRows(sd) = s;
  x_all.bottomRows(ad) = a;
  const MatrixF x_train = detail::gather_columns(x_all, train_idx, 0, n_train);
  model.input_normalizer().fit(x_train);
  model.output_normalizer().fit(detail::gather_columns(delta, train_idx, 0, n_train));
  const MatrixF x_norm = model.input_normalizer().normalize(x_all);
  const MatrixF y_norm = model.output_normalizer().normalize(delta);

  // Per-member index sets: bootstrap resamples or one shared ordering.
  std::vector<std::vector<Eigen::Index>> member_idx(model.num_members());
  for (auto& idx : member_idx) {
    idx.resize(n_train);
    for (std::size_t j = 0; j < n_train; ++j)
      idx[j] = cfg.bootstrap ? train_idx[uniform_index(rng, n_train)] : train_idx[j];
  }

  FitReport report;
  const std::size_t bs = cfg.batch_size;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    if (cfg.bootstrap) {
      for (auto& idx : member_idx) detail::shuffle(idx, rng);
    } else {
      detail::shuffle(member_idx[0], rng);
      for (std::size_t m = 1; m < member_idx.size(); ++m) member_idx[m] = member_idx[0];
    }
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t first = 0; first < n_train; first += bs) {
      const std::size_t count = std::min(bs, n_train - first);
      for (std::size_t m = 0; m < model.num_members(); ++m) {
        const MatrixF xb = detail::gather_columns(x_norm, member_idx[m], first, count);
        const MatrixF yb = detail::gather_columns(y_norm, member_idx[m], first, count);
        loss_sum += train_step_regression(model.member(m), model.optimizer(m), xb, yb, Loss::gaussian_nll);
        ++steps;
      }
    }
    report.train_loss.push_back(loss_sum / static_cast<double>(steps));
  }

  const MatrixF x_hold = detail::gather_columns(x_norm, hold_idx, 0, n_hold);
  const MatrixF y_hold = detail::gather_columns(y_norm, hold_idx, 0, n_hold);
  for (std::size_t m = 0; m < model.num_members(); ++m)
    report.holdout_log_likelihood.push_back(detail::gaussian_log_likelihood(model.member(m).forward(x_hold), y_hold));
  std::vector<std::size_t> order(model.num_members());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) {
    return report.holdout_log_likelihood[i] > report.holdout_log_likelihood[j];
  });
  order.resize(model.config().elites);
  std::sort(order.begin(), order.end());
  model.set_elites(order);
  report.elites = order;
  return report;
}

// ---------------------------------------------------------------------------
// Disagreement

/// Trace of the sample covariance (denominator M-1) of the member output vectors.
inline double trace_covariance(const std::vector<Vector>& outputs) {
  if (outputs.size() < 2) throw std::invalid_argument("trace_covariance: need at least 2 outputs");
  Vector mean = Vector::Zero(outputs[0].size());
  for (const auto& o : outputs) mean += o;
  mean /= static_cast<double>(outputs.size());
  double tr = 0.0;
  for (const auto& o : outputs) tr += (o - mean).squaredNorm();
  return tr / static_cast<double>(outputs.size() - 1);
}

/// Per-column disagreement over member predictions [mean, variance].
inline VectorF disagreement_batch(const std::vector<GaussianBatch>& preds, bool mean_only) {
  if (preds.size() < 2) throw std::invalid_argument("disagreement: need at least 2 elites");
  const float m = static_cast<float>(preds.size());
  MatrixF mu_sum = MatrixF::Zero(preds[0].mean.rows(), preds[0].mean.cols());
  MatrixF var_sum = MatrixF::Zero(preds[0].var.rows(), preds[0].var.cols());
  for (const auto& p : preds) {
    mu_sum += p.mean;
    if (!mean_only) var_sum += p.var;
  }
  const MatrixF mu_bar = mu_sum / m, var_bar = var_sum / m;
  VectorF tr = VectorF::Zero(mu_bar.cols());
  for (const auto& p : preds) {
    tr += (p.mean - mu_bar).colwise().squaredNorm().transpose();
    if (!mean_only) tr += (p.var - var_bar).colwise().squaredNorm().transpose();
  }
  return tr / (m - 1.0f);
}

inline double disagreement_reward(const EnsembleModel& model, const Vector& s, const Vector& a) {
  const auto preds = model.predict_elites(s.cast<float>(), a.cast<float>());
  return static_cast<double>(disagreement_batch(preds, model.config().disagreement_mean_only)[0]);
}

// ---------------------------------------------------------------------------
// Propagation

struct PropagationConfig {
  std::size_t particles = 20;
  bool mean_mode = false;        // deterministic elite-mean propagation, one particle
  bool sample = true;            // TS1: draw from the assigned member's Gaussian
  bool compute_disagreement = true;
};

/// Imagined rollouts: column p * particles + k is particle k of candidate p.
struct Rollout {
  std::vector<MatrixF> states;  // horizon + 1 entries, state_dim x (P * K)
  MatrixF disagreement;         // horizon x (P * K); r_int(s_t, a_t)
  std::size_t particles = 1;
};

/// Propagates P candidate action sequences (`actions[t]` is action_dim x P) from s0.
inline Rollout propagate(const EnsembleModel& model, const VectorF& s0, const std::vector<MatrixF>& actions,
                         const PropagationConfig& cfg, Rng& rng) {
  if (actions.empty()) throw std::invalid_argument("propagate: empty horizon");
  const Eigen::Index P = actions[0].cols();
  const std::size_t k = cfg.mean_mode ? 1 : cfg.particles;
  if (k == 0) throw std::invalid_argument("propagate: zero particles");
  const Eigen::Index n = P * static_cast<Eigen::Index>(k);
  Rollout out;
  out.particles = k;
  out.states.reserve(actions.size() + 1);
  out.states.emplace_back(s0.replicate(1, n));
  if (cfg.compute_disagreement) out.disagreement.resize(static_cast<Eigen::Index>(actions.size()), n);
  const auto& elites = model.elites();
  std::normal_distribution<float> normal(0.0f, 1.0f);
  MatrixF a_rep(actions[0].rows(), n);
  for (std::size_t t = 0; t < actions.size(); ++t) {
    if (actions[t].cols() != P) throw std::invalid_argument("propagate: ragged action batch");
    for (Eigen::Index p = 0; p < P; ++p) a_rep.middleCols(p * static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k)) =
        actions[t].col(p).replicate(1, static_cast<Eigen::Index>(k));
    const MatrixF& s = out.states.back();
    const auto preds = model.predict_elites(s, a_rep);
    if (cfg.compute_disagreement && preds.size() >= 2)
      out.disagreement.row(static_cast<Eigen::Index>(t)) = disagreement_batch(preds, model.config().disagreement_mean_only).transpose();
    else if (cfg.compute_disagreement)
      out.disagreement.row(static_cast<Eigen::Index>(t)).setZero();
    MatrixF next(s.rows(), n);
    if (cfg.mean_mode) {
      next.setZero();
      for (const auto& p : preds) next += p.mean;
      next /= static_cast<float>(preds.size());
    } else {
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto& p = preds[uniform_index(rng, elites.size())];
        next.col(j) = p.mean.col(j);
        if (cfg.sample)
          for (Eigen::Index d = 0; d < s.rows(); ++d) next(d, j) += std::sqrt(p.var(d, j)) * normal(rng);
      }
    }
    out.states.push_back(std::move(next));
  }
  return out;
}

}  // namespace curioplan
