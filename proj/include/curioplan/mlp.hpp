#pragma once

// Dense feed-forward networks with explicit backpropagation and Adam.
// Batches are column-major: one sample per column.

#include "curioplan/binary_io.hpp"
#include "curioplan/common.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace curioplan {

enum class Activation : std::uint32_t { relu = 0, silu = 1, tanh = 2, linear = 3 };

inline Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "silu") return Activation::silu;
  if (name == "tanh") return Activation::tanh;
  if (name == "linear") return Activation::linear;
  throw std::invalid_argument("unknown activation '" + name + "'");
}

template <class T>
class Mlp {
 public:
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

  struct Cache {
    std::vector<Mat> pre;   // pre-activations per layer
    std::vector<Mat> post;  // post[0] = input, post[l+1] = layer l output
  };

  struct Gradients {
    std::vector<Mat> weights;
    std::vector<Vec> biases;
  };

  Mlp() = default;

  /// `sizes` = {input, hidden..., output}; hidden layers use `hidden`, the last layer `head`.
  Mlp(std::vector<std::size_t> sizes, Activation hidden, Activation head = Activation::linear)
      : sizes_(std::move(sizes)), hidden_(hidden), head_(head) {
    if (sizes_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output sizes");
    for (auto s : sizes_)
      if (s == 0) throw std::invalid_argument("Mlp: zero layer size");
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      weights_.push_back(Mat::Zero(static_cast<Eigen::Index>(sizes_[l + 1]), static_cast<Eigen::Index>(sizes_[l])));
      biases_.push_back(Vec::Zero(static_cast<Eigen::Index>(sizes_[l + 1])));
    }
  }

  /// Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  void init_uniform_fan_in(Rng& rng) {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(sizes_[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < weights_[l].size(); ++i) weights_[l].data()[i] = static_cast<T>(u(rng));
      for (Eigen::Index i = 0; i < biases_[l].size(); ++i) biases_[l][i] = static_cast<T>(u(rng));
    }
  }

  void set_zero() {
    for (auto& w : weights_) w.setZero();
    for (auto& b : biases_) b.setZero();
  }

  std::size_t input_size() const { return sizes_.front(); }
  std::size_t output_size() const { return sizes_.back(); }
  std::size_t num_layers() const { return weights_.size(); }
  const std::vector<std::size_t>& sizes() const { return sizes_; }
  Activation hidden_activation() const { return hidden_; }
  Activation head_activation() const { return head_; }

  std::vector<Mat>& weights() { return weights_; }
  const std::vector<Mat>& weights() const { return weights_; }
  std::vector<Vec>& biases() { return biases_; }
  const std::vector<Vec>& biases() const { return biases_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].size() + biases_[l].size();
    return n;
  }

  bool all_finite() const {
    for (std::size_t l = 0; l < weights_.size(); ++l)
      if (!weights_[l].allFinite() || !biases_[l].allFinite()) return false;
    return true;
  }

  Mat forward(const Mat& x) const {
    check_input(x);
    Mat h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Mat z = weights_[l] * h;
      z.colwise() += biases_[l];
      h = activate(z, activation_of(l));
    }
    return h;
  }

  Mat forward(const Mat& x, Cache& cache) const {
    check_input(x);
    cache.pre.clear();
    cache.post.clear();
    cache.post.push_back(x);
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Mat z = weights_[l] * cache.post.back();
      z.colwise() += biases_[l];
      cache.post.push_back(activate(z, activation_of(l)));
      cache.pre.push_back(std::move(z));
    }
    return cache.post.back();
  }

  /// Gradients of sum over the batch of <d_out, output>; optionally the input gradient.
  Gradients backward(const Cache& cache, const Mat& d_out, Mat* d_input = nullptr) const {
    Gradients g;
    g.weights.resize(weights_.size());
    g.biases.resize(weights_.size());
    Mat delta = d_out;
    for (std::size_t l = weights_.size(); l-- > 0;) {
      delta = delta.cwiseProduct(derivative(cache.pre[l], cache.post[l + 1], activation_of(l)));
      g.weights[l].noalias() = delta * cache.post[l].transpose();
      g.biases[l] = delta.rowwise().sum();
      if (l > 0 || d_input) {
        Mat prev = weights_[l].transpose() * delta;
        delta = std::move(prev);
      }
    }
    if (d_input) *d_input = std::move(delta);
    return g;
  }

  template <class U>
  Mlp<U> cast() const {
    Mlp<U> out(sizes_, hidden_, head_);
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.weights()[l] = weights_[l].template cast<U>();
      out.biases()[l] = biases_[l].template cast<U>();
    }
    return out;
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    if (a.sizes_ != b.sizes_ || a.hidden_ != b.hidden_ || a.head_ != b.head_) return false;
    for (std::size_t l = 0; l < a.weights_.size(); ++l)
      if (a.weights_[l] != b.weights_[l] || a.biases_[l] != b.biases_[l]) return false;
    return true;
  }

 private:
  Activation activation_of(std::size_t l) const { return l + 1 == weights_.size() ? head_ : hidden_; }

  void check_input(const Mat& x) const {
    if (static_cast<std::size_t>(x.rows()) != sizes_.front())
      throw std::invalid_argument("Mlp: input has " + std::to_string(x.rows()) + " rows, expected " +
                                  std::to_string(sizes_.front()));
  }

  static Mat activate(const Mat& z, Activation act) {
    switch (act) {
      case Activation::relu:
        return z.cwiseMax(T(0));
      case Activation::silu:
        return (z.array() * ((-z.array()).exp() + T(1)).inverse()).matrix();
      case Activation::tanh:
        return z.array().tanh().matrix();
      case Activation::linear:
        return z;
    }
    return z;
  }

  static Mat derivative(const Mat& z, const Mat& y, Activation act) {
    switch (act) {
      case Activation::relu:
        return (z.array() > T(0)).template cast<T>().matrix();
      case Activation::silu: {
        const auto s = ((-z.array()).exp() + T(1)).inverse().eval();
        return (s * (T(1) + z.array() * (T(1) - s))).matrix();
      }
      case Activation::tanh:
        return (T(1) - y.array().square()).matrix();
      case Activation::linear:
        return Mat::Ones(z.rows(), z.cols());
    }
    return Mat::Ones(z.rows(), z.cols());
  }

  std::vector<std::size_t> sizes_;
  Activation hidden_ = Activation::relu;
  Activation head_ = Activation::linear;
  std::vector<Mat> weights_;
  std::vector<Vec> biases_;
};

/// Adam with coupled L2 weight decay applied to weight matrices.
template <class T>
struct AdamState {
  using Mat = typename Mlp<T>::Mat;
  using Vec = typename Mlp<T>::Vec;

  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  Mlp<T> m;  // first moments, shaped like the network
  Mlp<T> v;  // second moments

  AdamState() = default;
  AdamState(const Mlp<T>& net, double learning_rate, double decay = 0.0)
      : lr(learning_rate), weight_decay(decay), m(net), v(net) {
    m.set_zero();
    v.set_zero();
  }

  void apply(Mlp<T>& net, const typename Mlp<T>::Gradients& g) {
    ++step;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    const T step_size = static_cast<T>(lr / c1);
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T root_c2 = static_cast<T>(std::sqrt(c2)), e = static_cast<T>(eps);
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
      Mat gw = g.weights[l];
      if (weight_decay != 0.0) gw += static_cast<T>(weight_decay) * net.weights()[l];
      m.weights()[l] = b1 * m.weights()[l] + (T(1) - b1) * gw;
      v.weights()[l] = b2 * v.weights()[l] + (T(1) - b2) * gw.cwiseProduct(gw);
      net.weights()[l].array() -=
          step_size * m.weights()[l].array() / (v.weights()[l].array().sqrt() / root_c2 + e);
      const Vec& gb = g.biases[l];
      m.biases()[l] = b1 * m.biases()[l] + (T(1) - b1) * gb;
      v.biases()[l] = b2 * v.biases()[l] + (T(1) - b2) * gb.cwiseProduct(gb);
      net.biases()[l].array() -= step_size * m.biases()[l].array() / (v.biases()[l].array().sqrt() / root_c2 + e);
    }
  }
};

// ---------------------------------------------------------------------------
// Regression losses

enum class Loss { mse, gaussian_nll };

inline constexpr double kMinLogVar = -10.0;
inline constexpr double kMaxLogVar = 4.0;

template <class T>
struct LossResult {
  double value = 0.0;
  typename Mlp<T>::Mat grad;  // d loss / d network output
};

/// mse: mean over all elements of (y - t)^2.
/// gaussian_nll: output rows = [mean; log-variance], log-variance clamped to
/// [-10, 4]; loss = mean over batch and dims of 0.5 * ((t - mu)^2 exp(-lv) + lv).
template <class T>
LossResult<T> evaluate_loss(const typename Mlp<T>::Mat& out, const typename Mlp<T>::Mat& target, Loss loss) {
  using Mat = typename Mlp<T>::Mat;
  LossResult<T> r;
  if (loss == Loss::mse) {
    if (out.rows() != target.rows() || out.cols() != target.cols())
      throw std::invalid_argument("evaluate_loss: target shape mismatch");
    const Mat diff = out - target;
    const double n = static_cast<double>(diff.size());
    r.value = static_cast<double>(diff.squaredNorm()) / n;
    r.grad = diff * static_cast<T>(2.0 / n);
    return r;
  }
  const Eigen::Index d = target.rows();
  if (out.rows() != 2 * d || out.cols() != target.cols())
    throw std::invalid_argument("evaluate_loss: gaussian-nll expects 2x target rows");
  const Mat mu = out.topRows(d);
  const Mat raw_lv = out.bottomRows(d);
  const Mat lv = raw_lv.cwiseMax(static_cast<T>(kMinLogVar)).cwiseMin(static_cast<T>(kMaxLogVar));
  const Mat inv_var = (-lv.array()).exp().matrix();
  const Mat diff = mu - target;
  const double n = static_cast<double>(diff.size());
  const Mat sq = diff.cwiseProduct(diff);
  r.value = 0.5 * static_cast<double>((sq.cwiseProduct(inv_var) + lv).sum()) / n;
  r.grad.resize(out.rows(), out.cols());
  const T scale = static_cast<T>(1.0 / n);
  r.grad.topRows(d) = diff.cwiseProduct(inv_var) * scale;
  Mat dlv = (T(0.5) * (Mat::Ones(d, diff.cols()) - sq.cwiseProduct(inv_var))) * scale;
  for (Eigen::Index i = 0; i < dlv.size(); ++i) {
    const T v = raw_lv.data()[i];
    if (v < static_cast<T>(kMinLogVar) || v > static_cast<T>(kMaxLogVar)) dlv.data()[i] = T(0);
  }
  r.grad.bottomRows(d) = dlv;
  return r;
}

/// One Adam step on the mean loss over the batch; returns the pre-update loss.
template <class T>
double train_step_regression(Mlp<T>& net, AdamState<T>& adam, const typename Mlp<T>::Mat& x,
                             const typename Mlp<T>::Mat& target, Loss loss) {
  if (x.cols() == 0) throw std::invalid_argument("train_step_regression: empty batch");
  typename Mlp<T>::Cache cache;
  const auto out = net.forward(x, cache);
  const auto l = evaluate_loss<T>(out, target, loss);
  if (!std::isfinite(l.value)) throw std::runtime_error("train_step_regression: non-finite loss");
  adam.apply(net, net.backward(cache, l.grad));
  return l.value;
}

/// target <- polyak * target + (1 - polyak) * online
template <class T>
void polyak_update(Mlp<T>& target, const Mlp<T>& online, double polyak) {
  // target + (1 - polyak) (online - target): exact no-op when the two agree.
  const T b = static_cast<T>(1.0 - polyak);
  for (std::size_t l = 0; l < target.num_layers(); ++l) {
    target.weights()[l] += b * (online.weights()[l] - target.weights()[l]);
    target.biases()[l] += b * (online.biases()[l] - target.biases()[l]);
  }
}

// ---------------------------------------------------------------------------
// "GCNN" checkpoints: named networks plus named scalars.

template <class T>
struct NetworkArchive {
  std::map<std::string, Mlp<T>> networks;
  std::map<std::string, double> scalars;

  void put_adam(const std::string& name, const AdamState<T>& adam) {
    networks[name + ".adam_m"] = adam.m;
    networks[name + ".adam_v"] = adam.v;
    scalars[name + ".adam_step"] = static_cast<double>(adam.step);
    scalars[name + ".adam_lr"] = adam.lr;
    scalars[name + ".adam_wd"] = adam.weight_decay;
  }

  AdamState<T> get_adam(const std::string& name) const {
    AdamState<T> a;
    a.m = network(name + ".adam_m");
    a.v = network(name + ".adam_v");
    a.step = static_cast<std::uint64_t>(scalar(name + ".adam_step"));
    a.lr = scalar(name + ".adam_lr");
    a.weight_decay = scalar(name + ".adam_wd");
    return a;
  }

  const Mlp<T>& network(const std::string& name) const {
    auto it = networks.find(name);
    if (it == networks.end()) throw io::FormatError("checkpoint has no network '" + name + "'");
    return it->second;
  }

  double scalar(const std::string& name) const {
    auto it = scalars.find(name);
    if (it == scalars.end()) throw io::FormatError("checkpoint has no scalar '" + name + "'");
    return it->second;
  }

  void save(const std::string& path) const {
    io::BinaryWriter w(path);
    w.magic("GCNN");
    w.u32(kVersion);
    w.u32(static_cast<std::uint32_t>(networks.size()));
    for (const auto& [name, net] : networks) {
      w.string(name);
      w.u32(static_cast<std::uint32_t>(net.sizes().size()));
      for (auto s : net.sizes()) w.u32(static_cast<std::uint32_t>(s));
      w.u32(static_cast<std::uint32_t>(net.hidden_activation()));
      w.u32(static_cast<std::uint32_t>(net.head_activation()));
      for (std::size_t l = 0; l < net.num_layers(); ++l) {
        // Weights row-major.
        const auto& W = net.weights()[l];
        for (Eigen::Index i = 0; i < W.rows(); ++i)
          for (Eigen::Index j = 0; j < W.cols(); ++j) w.f32(static_cast<float>(W(i, j)));
        const auto& b = net.biases()[l];
        w.f32_array(b.data(), b.data() + b.size());
      }
    }
    w.u32(static_cast<std::uint32_t>(scalars.size()));
    for (const auto& [name, v] : scalars) {
      w.string(name);
      w.f64(v);
    }
    w.finish();
  }

  static NetworkArchive load(const std::string& path) {
    io::BinaryReader r(path);
    r.expect_magic("GCNN");
    const auto version = r.u32();
    if (version != kVersion) throw io::FormatError("'" + path + "': unsupported GCNN version " + std::to_string(version));
    NetworkArchive ar;
    const auto n = r.u32();
    for (std::uint32_t k = 0; k < n; ++k) {
      const auto name = r.string();
      const auto depth = r.u32();
      if (depth < 2 || depth > 64) throw io::FormatError("'" + path + "': bad layer count for '" + name + "'");
      std::vector<std::size_t> sizes(depth);
      for (auto& s : sizes) {
        s = r.u32();
        if (s == 0 || s > (1u << 20)) throw io::FormatError("'" + path + "': bad layer size for '" + name + "'");
      }
      const auto hidden = r.u32(), head = r.u32();
      if (hidden > 3 || head > 3) throw io::FormatError("'" + path + "': bad activation for '" + name + "'");
      Mlp<T> net(sizes, static_cast<Activation>(hidden), static_cast<Activation>(head));
      std::vector<float> buf;
      for (std::size_t l = 0; l < net.num_layers(); ++l) {
        auto& W = net.weights()[l];
        buf.resize(static_cast<std::size_t>(W.size()));
        r.f32_array(buf.data(), buf.size());
        std::size_t p = 0;
        for (Eigen::Index i = 0; i < W.rows(); ++i)
          for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = static_cast<T>(buf[p++]);
        auto& b = net.biases()[l];
        buf.resize(static_cast<std::size_t>(b.size()));
        r.f32_array(buf.data(), buf.size());
        for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = static_cast<T>(buf[static_cast<std::size_t>(i)]);
      }
      ar.networks.emplace(name, std::move(net));
    }
    const auto ns = r.u32();
    for (std::uint32_t k = 0; k < ns; ++k) {
      const auto name = r.string();
      ar.scalars[name] = r.f64();
    }
    if (!r.at_end()) throw io::FormatError("'" + path + "': trailing bytes");
    return ar;
  }

  static constexpr std::uint32_t kVersion = 1;
};

}  // namespace curioplan
