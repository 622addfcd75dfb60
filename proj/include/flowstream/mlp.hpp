#pragma once

// Small dense networks with hand-written backpropagation. All parameters of a
// network live in one flat vector so optimizers and checkpoints can treat
// every model the same way; layers are Eigen::Map views into it.

#include <cmath>
#include <utility>
#include <vector>

#include "flowstream/core.hpp"

namespace flowstream {

using Mat = Eigen::MatrixXd;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using VecMap = Eigen::Map<Vec>;
using ConstVecMap = Eigen::Map<const Vec>;

struct TensorShape {
  std::uint32_t rows = 0;
  std::uint32_t cols = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
  friend bool operator==(const TensorShape&, const TensorShape&) = default;
};

/// Offsets of each tensor inside a flat parameter vector.
class ParamLayout {
 public:
  std::size_t add(std::uint32_t rows, std::uint32_t cols) {
    offsets_.push_back(total_);
    shapes_.push_back({rows, cols});
    total_ += static_cast<std::size_t>(rows) * cols;
    return shapes_.size() - 1;
  }

  std::size_t total() const { return total_; }
  const std::vector<TensorShape>& shapes() const { return shapes_; }

  MatMap mat(Vec& flat, std::size_t i) const {
    return MatMap(flat.data() + offsets_[i], shapes_[i].rows, shapes_[i].cols);
  }
  ConstMatMap mat(const Vec& flat, std::size_t i) const {
    return ConstMatMap(flat.data() + offsets_[i], shapes_[i].rows, shapes_[i].cols);
  }
  VecMap vec(Vec& flat, std::size_t i) const {
    return VecMap(flat.data() + offsets_[i], static_cast<Eigen::Index>(shapes_[i].size()));
  }
  ConstVecMap vec(const Vec& flat, std::size_t i) const {
    return ConstVecMap(flat.data() + offsets_[i], static_cast<Eigen::Index>(shapes_[i].size()));
  }

 private:
  std::vector<std::size_t> offsets_;
  std::vector<TensorShape> shapes_;
  std::size_t total_ = 0;
};

/// tanh hidden layers and a linear output layer. Inputs are columns of a
/// (in x batch) matrix.
class Mlp {
 public:
  Mlp() = default;

  Mlp(int in_dim, std::vector<int> hidden, int out_dim) : in_(in_dim), out_(out_dim), hidden_(std::move(hidden)) {
    int prev = in_;
    for (int w : hidden_) {
      weights_.push_back(layout_.add(w, prev));
      biases_.push_back(layout_.add(w, 1));
      prev = w;
    }
    weights_.push_back(layout_.add(out_, prev));
    biases_.push_back(layout_.add(out_, 1));
  }

  int in_dim() const { return in_; }
  int out_dim() const { return out_; }
  const std::vector<int>& hidden() const { return hidden_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return layout_.total(); }
  std::size_t num_layers() const { return weights_.size(); }

  /// Scaled-uniform init of all weights from `rng`; biases zero. With
  /// `zero_output`, the final layer starts at zero so the network is the zero map.
  Vec init_params(Rng& rng, bool zero_output) const {
    Vec p = Vec::Zero(static_cast<Eigen::Index>(num_params()));
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      const bool last = l + 1 == weights_.size();
      if (last && zero_output) continue;
      MatMap W = layout_.mat(p, weights_[l]);
      const double bound = std::sqrt(6.0 / static_cast<double>(W.rows() + W.cols())) * (last ? 0.1 : 1.0);
      for (Eigen::Index j = 0; j < W.cols(); ++j)
        for (Eigen::Index i = 0; i < W.rows(); ++i) W(i, j) = rng.uniform(-bound, bound);
    }
    return p;
  }

  struct Cache {
    Mat input;
    std::vector<Mat> activations;  // post-tanh output of each hidden layer
  };

  Mat forward(const Vec& params, const Mat& X, Cache* cache = nullptr) const {
    require_same_dim(X.rows(), in_, "mlp input");
    Mat a = X;
    if (cache) {
      cache->input = X;
      cache->activations.clear();
    }
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Mat z = layout_.mat(params, weights_[l]) * a;
      z.colwise() += layout_.vec(params, biases_[l]);
      if (l + 1 < weights_.size()) {
        a = z.array().tanh().matrix();
        if (cache) cache->activations.push_back(a);
      } else {
        a = std::move(z);
      }
    }
    return a;
  }

  /// Accumulates dL/dparams into `grad` given dL/doutput. Returns dL/dinput.
  Mat backward(const Vec& params, const Cache& cache, const Mat& d_out, Vec& grad) const {
    Mat delta = d_out;
    for (std::size_t li = weights_.size(); li-- > 0;) {
      const Mat& a_prev = li == 0 ? cache.input : cache.activations[li - 1];
      layout_.mat(grad, weights_[li]).noalias() += delta * a_prev.transpose();
      layout_.vec(grad, biases_[li]) += delta.rowwise().sum();
      Mat d_prev = layout_.mat(params, weights_[li]).transpose() * delta;
      if (li > 0) {
        const Mat& a = cache.activations[li - 1];
        d_prev.array() *= 1.0 - a.array().square();
      }
      delta = std::move(d_prev);
    }
    return delta;
  }

 private:
  int in_ = 0;
  int out_ = 0;
  std::vector<int> hidden_;
  ParamLayout layout_;
  std::vector<std::size_t> weights_;
  std::vector<std::size_t> biases_;
};

// ---------------------------------------------------------------------------
// Adaptive-moment optimizer over flat parameter vectors.

struct OptimizerState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  Vec m;
  Vec v;

  static OptimizerState for_params(std::size_t n, double lr) {
    OptimizerState s;
    s.learning_rate = lr;
    s.m = Vec::Zero(static_cast<Eigen::Index>(n));
    s.v = Vec::Zero(static_cast<Eigen::Index>(n));
    return s;
  }
};

/// One bias-corrected Adam update; `lr_scale` multiplies the base rate (for schedules).
inline void adam_step(Vec& params, const Vec& grads, OptimizerState& state, double lr_scale = 1.0) {
  require_same_dim(params.size(), grads.size(), "adam params/grads");
  require_same_dim(params.size(), state.m.size(), "adam params/first moment");
  require_same_dim(params.size(), state.v.size(), "adam params/second moment");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  const double lr = state.learning_rate * lr_scale;
  for (Eigen::Index i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
  }
}

inline void write_optimizer(io::ByteWriter& w, const OptimizerState& s) {
  w.f64(s.learning_rate);
  w.f64(s.beta1);
  w.f64(s.beta2);
  w.f64(s.eps);
  w.u64(s.step);
  w.u64(static_cast<std::uint64_t>(s.m.size()));
  w.f64s(std::span<const double>(s.m.data(), static_cast<std::size_t>(s.m.size())));
  w.f64s(std::span<const double>(s.v.data(), static_cast<std::size_t>(s.v.size())));
}

inline OptimizerState read_optimizer(io::ByteReader& r) {
  OptimizerState s;
  s.learning_rate = r.f64();
  s.beta1 = r.f64();
  s.beta2 = r.f64();
  s.eps = r.f64();
  s.step = r.u64();
  const std::uint64_t n = r.u64();
  if (n * 16 > r.remaining()) throw Error(ErrorCode::kCorruptFile, "optimizer state truncated");
  s.m.resize(static_cast<Eigen::Index>(n));
  s.v.resize(static_cast<Eigen::Index>(n));
  r.f64s(std::span<double>(s.m.data(), n));
  r.f64s(std::span<double>(s.v.data(), n));
  return s;
}

}  // namespace flowstream
