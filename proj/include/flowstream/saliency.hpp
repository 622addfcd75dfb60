#pragma once

// Action saliency: how much the pending actions will change what the policy
// sees. A frozen random encoder maps observations to embeddings; a small
// network predicts the embedding change after the pending actions, with the
// actions injected through per-layer scale/shift modulation of the hidden
// activations. The norm of that change gates early observation.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>

#include "flowstream/mlp.hpp"
#include "flowstream/velocitynet.hpp"

namespace flowstream {

using Embedding = Tagged<struct EmbeddingTag>;

/// Frozen feature extractor: tanh(W (raw .* feature_scale) + b).
struct Encoder {
  Vec feature_scale;
  Mat weight;
  Vec bias;

  static Encoder create(int feature_dim, int embed_dim, std::uint64_t seed) {
    Rng rng(seed, 0xe11c0de);
    Encoder e;
    e.feature_scale = Vec::Constant(feature_dim, 0.2);
    if (feature_dim > 4) e.feature_scale[4] = 1.0;  // latch bit
    e.weight.resize(embed_dim, feature_dim);
    const double sd = 1.5 / std::sqrt(static_cast<double>(feature_dim));
    for (Eigen::Index j = 0; j < e.weight.cols(); ++j)
      for (Eigen::Index i = 0; i < e.weight.rows(); ++i) e.weight(i, j) = sd * rng.normal();
    e.bias.resize(embed_dim);
    for (Eigen::Index i = 0; i < e.bias.size(); ++i) e.bias[i] = 0.1 * rng.normal();
    return e;
  }

  int feature_dim() const { return static_cast<int>(weight.cols()); }
  int embed_dim() const { return static_cast<int>(weight.rows()); }

  friend bool operator==(const Encoder& a, const Encoder& b) {
    return a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
           (a.weight.array() == b.weight.array()).all() && (a.bias.array() == b.bias.array()).all() &&
           (a.feature_scale.array() == b.feature_scale.array()).all();
  }
};

/// Embedding-change predictor with action-conditioned scale/shift:
///   c' = tanh(Wc c + bc)
///   u_l = (W_l a_{l-1} + b_l) .* (1 + gamma_l) + beta_l,  [gamma_l; beta_l] = G_l c' + g_l
///   a_l = tanh(u_l);   delta = Wo a_L + bo
class ConditionedNet {
 public:
  ConditionedNet() = default;

  ConditionedNet(int in_dim, int cond_dim, int cond_hidden, std::vector<int> hidden, int out_dim)
      : in_(in_dim), cond_(cond_dim), cond_hidden_(cond_hidden), hidden_(std::move(hidden)), out_(out_dim) {
    cw_ = layout_.add(cond_hidden_, cond_);
    cb_ = layout_.add(cond_hidden_, 1);
    int prev = in_;
    for (int w : hidden_) {
      w_.push_back(layout_.add(w, prev));
      b_.push_back(layout_.add(w, 1));
      g_.push_back(layout_.add(2 * w, cond_hidden_));
      gb_.push_back(layout_.add(2 * w, 1));
      prev = w;
    }
    ow_ = layout_.add(out_, prev);
    ob_ = layout_.add(out_, 1);
  }

  int in_dim() const { return in_; }
  int cond_dim() const { return cond_; }
  int cond_hidden() const { return cond_hidden_; }
  int out_dim() const { return out_; }
  const std::vector<int>& hidden() const { return hidden_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return layout_.total(); }

  Vec init_params(Rng& rng, bool zero_output) const {
    Vec p = Vec::Zero(static_cast<Eigen::Index>(num_params()));
    auto fill = [&](std::size_t idx, double gain) {
      MatMap W = layout_.mat(p, idx);
      const double bound = gain * std::sqrt(6.0 / static_cast<double>(W.rows() + W.cols()));
      for (Eigen::Index j = 0; j < W.cols(); ++j)
        for (Eigen::Index i = 0; i < W.rows(); ++i) W(i, j) = rng.uniform(-bound, bound);
    };
    fill(cw_, 1.0);
    for (std::size_t l = 0; l < w_.size(); ++l) {
      fill(w_[l], 1.0);
      fill(g_[l], 0.5);
    }
    if (!zero_output) fill(ow_, 0.1);
    return p;
  }

  struct Cache {
    Mat input, cond, cond_act;
    std::vector<Mat> pre, gamma, act;  // per hidden layer
  };

  Mat forward(const Vec& p, const Mat& X, const Mat& C, Cache* cache = nullptr) const {
    require_same_dim(X.rows(), in_, "conditioned net input");
    require_same_dim(C.rows(), cond_, "conditioned net condition");
    Mat zc = layout_.mat(p, cw_) * C;
    zc.colwise() += layout_.vec(p, cb_);
    Mat ec = zc.array().tanh().matrix();
    Mat a = X;
    if (cache) {
      cache->input = X;
      cache->cond = C;
      cache->cond_act = ec;
      cache->pre.clear();
      cache->gamma.clear();
      cache->act.clear();
    }
    for (std::size_t l = 0; l < w_.size(); ++l) {
      const Eigen::Index H = hidden_[l];
      Mat h = layout_.mat(p, w_[l]) * a;
      h.colwise() += layout_.vec(p, b_[l]);
      Mat mod = layout_.mat(p, g_[l]) * ec;
      mod.colwise() += layout_.vec(p, gb_[l]);
      Mat gamma = mod.topRows(H);
      Mat u = h.cwiseProduct((gamma.array() + 1.0).matrix()) + mod.bottomRows(H);
      a = u.array().tanh().matrix();
      if (cache) {
        cache->pre.push_back(std::move(h));
        cache->gamma.push_back(std::move(gamma));
        cache->act.push_back(a);
      }
    }
    Mat out = layout_.mat(p, ow_) * a;
    out.colwise() += layout_.vec(p, ob_);
    return out;
  }

  void backward(const Vec& p, const Cache& cache, const Mat& d_out, Vec& grad) const {
    const Mat& a_last = cache.act.empty() ? cache.input : cache.act.back();
    layout_.mat(grad, ow_).noalias() += d_out * a_last.transpose();
    layout_.vec(grad, ob_) += d_out.rowwise().sum();
    Mat da = layout_.mat(p, ow_).transpose() * d_out;
    Mat d_ec = Mat::Zero(cond_hidden_, d_out.cols());
    for (std::size_t l = w_.size(); l-- > 0;) {
      const Eigen::Index H = hidden_[l];
      const Mat& a = cache.act[l];
      const Mat du = da.cwiseProduct((1.0 - a.array().square()).matrix());
      const Mat dh = du.cwiseProduct((cache.gamma[l].array() + 1.0).matrix());
      Mat dmod(2 * H, du.cols());
      dmod.topRows(H) = du.cwiseProduct(cache.pre[l]);
      dmod.bottomRows(H) = du;
      layout_.mat(grad, g_[l]).noalias() += dmod * cache.cond_act.transpose();
      layout_.vec(grad, gb_[l]) += dmod.rowwise().sum();
      d_ec.noalias() += layout_.mat(p, g_[l]).transpose() * dmod;
      const Mat& a_prev = l == 0 ? cache.input : cache.act[l - 1];
      layout_.mat(grad, w_[l]).noalias() += dh * a_prev.transpose();
      layout_.vec(grad, b_[l]) += dh.rowwise().sum();
      da = layout_.mat(p, w_[l]).transpose() * dh;
    }
    const Mat dzc = d_ec.cwiseProduct((1.0 - cache.cond_act.array().square()).matrix());
    layout_.mat(grad, cw_).noalias() += dzc * cache.cond.transpose();
    layout_.vec(grad, cb_) += dzc.rowwise().sum();
  }

 private:
  int in_ = 0, cond_ = 0, cond_hidden_ = 0;
  std::vector<int> hidden_;
  int out_ = 0;
  ParamLayout layout_;
  std::size_t cw_ = 0, cb_ = 0, ow_ = 0, ob_ = 0;
  std::vector<std::size_t> w_, b_, g_, gb_;
};

struct PredictorModel {
  Encoder encoder;
  ConditionedNet net;
  Vec params;
  int action_dim = 2;
  int max_actions = 3;      // pending actions accepted, zero-padded
  double action_scale = 4.0;

  struct Options {
    int feature_dim = kObservationFeatures;
    int embed_dim = 16;
    int action_dim = 2;
    int max_actions = 3;
    int cond_hidden = 32;
    std::vector<int> hidden = {64, 64};
    double action_scale = 4.0;
    std::uint64_t encoder_seed = 17;
    bool zero_output = false;
  };

  static PredictorModel create(const Options& opt, Rng& rng) {
    PredictorModel m;
    m.encoder = Encoder::create(opt.feature_dim, opt.embed_dim, opt.encoder_seed);
    m.action_dim = opt.action_dim;
    m.max_actions = opt.max_actions;
    m.action_scale = opt.action_scale;
    m.net = ConditionedNet(opt.embed_dim, opt.max_actions * opt.action_dim, opt.cond_hidden, opt.hidden,
                           opt.embed_dim);
    m.params = m.net.init_params(rng, opt.zero_output);
    return m;
  }

  int embed_dim() const { return encoder.embed_dim(); }
  int cond_dim() const { return max_actions * action_dim; }

  /// Flattened, scaled, zero-padded condition vector.
  void write_condition(std::span<const Vec> actions, double* out) const {
    require(static_cast<int>(actions.size()) <= max_actions, ErrorCode::kInvalidArgument,
            "too many pending actions: " + std::to_string(actions.size()) + " > " + std::to_string(max_actions));
    std::fill(out, out + cond_dim(), 0.0);
    for (std::size_t i = 0; i < actions.size(); ++i) {
      require_same_dim(actions[i].size(), action_dim, "pending action");
      for (int d = 0; d < action_dim; ++d) out[i * action_dim + d] = actions[i][d] * action_scale;
    }
  }
};

inline Embedding encode(const PredictorModel& model, const Observation& obs) {
  const Encoder& e = model.encoder;
  require_same_dim(static_cast<Eigen::Index>(obs.raw_features.size()), e.feature_dim(), "encoder input");
  const Vec x = ConstVecMap(obs.raw_features.data(), e.feature_dim()).cwiseProduct(e.feature_scale);
  return Embedding(Vec((e.weight * x + e.bias).array().tanh()));
}

inline Embedding predict_delta(const PredictorModel& model, const Embedding& emb_early,
                               std::span<const Vec> remaining_actions) {
  require_same_dim(emb_early.size(), model.embed_dim(), "predict_delta embedding");
  Mat C(model.cond_dim(), 1);
  model.write_condition(remaining_actions, C.data());
  return Embedding(Vec(model.net.forward(model.params, emb_early.values(), C).col(0)));
}

inline double saliency_score(const PredictorModel& model, const Observation& obs,
                             std::span<const Vec> remaining_actions) {
  return predict_delta(model, encode(model, obs), remaining_actions).values().norm();
}

inline double action_norm_score(std::span<const Vec> remaining_actions) {
  double sq = 0.0;
  for (const Vec& a : remaining_actions) sq += a.squaredNorm();
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// Training

/// Frame pair (early, late) with the actions executed between them.
struct SaliencySample {
  Embedding early;
  Embedding late;
  std::vector<Vec> actions;
};

/// Mean over the batch of ||late - (early + delta)||^2 and its gradient.
inline LossGrad predictor_loss_and_grad(const PredictorModel& model, std::span<const SaliencySample> batch) {
  require(!batch.empty(), ErrorCode::kEmptyInput, "predictor batch is empty");
  const auto B = static_cast<Eigen::Index>(batch.size());
  const int E = model.embed_dim();
  Mat X(E, B), C(model.cond_dim(), B), target(E, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    X.col(b) = batch[b].early.values();
    target.col(b) = batch[b].late.values() - batch[b].early.values();
    model.write_condition(batch[b].actions, C.col(b).data());
  }
  ConditionedNet::Cache cache;
  const Mat diff = model.net.forward(model.params, X, C, &cache) - target;
  LossGrad lg;
  lg.loss = diff.squaredNorm() / static_cast<double>(B);
  lg.grads = Vec::Zero(model.params.size());
  model.net.backward(model.params, cache, diff * (2.0 / static_cast<double>(B)), lg.grads);
  return lg;
}

struct PredictorTrainConfig {
  int iterations = 6000;
  int batch_size = 64;
  double learning_rate = 1e-4;  // initial value of the cosine schedule
  std::uint64_t seed = 0;
  int min_gap = 1;
  int max_gap = 3;
  int log_every = 100;
  PredictorModel::Options model;
};

struct PredictorTrainResult {
  PredictorModel model;
  std::vector<std::pair<int, double>> loss_log;  // (iteration, mean loss since last entry)
};

/// Temporal gap between the two frames of a training pair, uniform on [min_gap, max_gap].
inline int sample_gap(Rng& rng, int min_gap, int max_gap) {
  return min_gap + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(max_gap - min_gap + 1)));
}

inline double cosine_schedule(int iteration, int total) {
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(iteration) / static_cast<double>(total)));
}

inline PredictorTrainResult train_predictor(std::span<const Trajectory> rollouts, const PredictorTrainConfig& cfg) {
  require(cfg.min_gap >= 1 && cfg.max_gap >= cfg.min_gap && cfg.max_gap <= cfg.model.max_actions,
          ErrorCode::kInvalidArgument, "gap range must lie within [1, max_actions]");
  require(cfg.iterations >= 1 && cfg.batch_size >= 1, ErrorCode::kInvalidArgument, "bad iteration/batch counts");
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < rollouts.size(); ++i) {
    if (rollouts[i].actions.size() >= 4 && rollouts[i].observations.size() == rollouts[i].actions.size() + 1) {
      usable.push_back(i);
    }
  }
  require(!usable.empty(), ErrorCode::kEmptyInput, "no rollout has at least 4 steps");

  Rng init_rng(cfg.seed, 1);
  PredictorTrainResult result{PredictorModel::create(cfg.model, init_rng), {}};
  PredictorModel& model = result.model;
  OptimizerState opt = OptimizerState::for_params(model.net.num_params(), cfg.learning_rate);

  // Embeddings never change (frozen encoder), so compute them once.
  std::vector<std::vector<Embedding>> embeds(rollouts.size());
  for (std::size_t i : usable) {
    for (const Observation& o : rollouts[i].observations) embeds[i].push_back(encode(model, o));
  }

  std::vector<SaliencySample> batch(static_cast<std::size_t>(cfg.batch_size));
  double acc = 0.0;
  int acc_n = 0;
  for (int it = 0; it < cfg.iterations; ++it) {
    Rng rng(cfg.seed, 1000 + static_cast<std::uint64_t>(it));
    for (SaliencySample& s : batch) {
      const std::size_t ep = usable[rng.uniform_int(usable.size())];
      const Trajectory& t = rollouts[ep];
      const int gap = std::min(sample_gap(rng, cfg.min_gap, cfg.max_gap), static_cast<int>(t.actions.size()));
      const std::size_t start = rng.uniform_int(t.actions.size() - gap + 1);
      s.early = embeds[ep][start];
      s.late = embeds[ep][start + gap];
      s.actions.clear();
      for (int g = 0; g < gap; ++g) s.actions.push_back(t.actions[start + g].values());
    }
    LossGrad lg = predictor_loss_and_grad(model, batch);
    if (!std::isfinite(lg.loss)) {
      throw Error(ErrorCode::kNonFiniteLoss, "predictor loss at iteration " + std::to_string(it));
    }
    adam_step(model.params, lg.grads, opt, cosine_schedule(it, cfg.iterations));
    acc += lg.loss;
    ++acc_n;
    if ((it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations) {
      result.loss_log.emplace_back(it + 1, acc / acc_n);
      acc = 0.0;
      acc_n = 0;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Early-observation indicator

enum class EoMode : std::uint8_t { kNone, kNaive, kRandom, kActionNorm, kAdaptive };

inline const char* to_string(EoMode m) {
  switch (m) {
    case EoMode::kNone: return "none";
    case EoMode::kNaive: return "naive";
    case EoMode::kRandom: return "random";
    case EoMode::kActionNorm: return "anao";
    case EoMode::kAdaptive: return "adaptive";
  }
  return "?";
}

inline EoMode parse_eo_mode(const std::string& s) {
  for (EoMode m : {EoMode::kNone, EoMode::kNaive, EoMode::kRandom, EoMode::kActionNorm, EoMode::kAdaptive}) {
    if (s == to_string(m)) return m;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown early-observation mode '" + s + "'");
}

struct Indicator {
  EoMode mode = EoMode::kNone;
  double eta = 0.0;  // threshold for anao / adaptive: fire when score <= eta
  double p = 0.0;    // firing probability for random

  void validate() const {
    require(std::isfinite(eta), ErrorCode::kInvalidArgument, "eta must be finite");
    require(p >= 0.0 && p <= 1.0, ErrorCode::kInvalidArgument, "p must lie in [0, 1]");
  }
};

/// Threshold such that the fraction of scores <= eta reaches `target_rate`.
/// A rate of 1 returns the largest score; a rate too small to admit any
/// score returns a value just below the smallest one.
inline double calibrate_threshold(std::vector<double> scores, double target_rate) {
  require(!scores.empty(), ErrorCode::kEmptyInput, "no scores to calibrate on");
  require(target_rate >= 0.0 && target_rate <= 1.0, ErrorCode::kInvalidArgument, "target rate must lie in [0, 1]");
  std::sort(scores.begin(), scores.end());
  const double n = static_cast<double>(scores.size());
  const auto k = static_cast<std::size_t>(std::ceil(target_rate * n - 1e-9));
  if (k == 0) return std::nextafter(scores.front(), -std::numeric_limits<double>::infinity());
  return scores[std::min(k, scores.size()) - 1];
}

// ---------------------------------------------------------------------------
// Predictor checkpoint (same container as the policy, type tag 2):
//   u32 E | u32 F | u32 max_actions | f64 action_scale | encoder scale F, W E x F, b E |
//   u32 cond_hidden | u32 #hidden, widths | u64 #params, params

inline std::vector<std::uint8_t> encode_predictor(const PredictorModel& m) {
  io::ByteWriter w;
  write_checkpoint_header(w, CheckpointType::kSaliencyPredictor, static_cast<std::uint32_t>(m.action_dim));
  const Encoder& e = m.encoder;
  w.u32(static_cast<std::uint32_t>(e.embed_dim()));
  w.u32(static_cast<std::uint32_t>(e.feature_dim()));
  w.u32(static_cast<std::uint32_t>(m.max_actions));
  w.f64(m.action_scale);
  w.f64s(std::span<const double>(e.feature_scale.data(), static_cast<std::size_t>(e.feature_scale.size())));
  w.f64s(std::span<const double>(e.weight.data(), static_cast<std::size_t>(e.weight.size())));
  w.f64s(std::span<const double>(e.bias.data(), static_cast<std::size_t>(e.bias.size())));
  w.u32(static_cast<std::uint32_t>(m.net.cond_hidden()));
  w.u32(static_cast<std::uint32_t>(m.net.hidden().size()));
  for (int h : m.net.hidden()) w.u32(static_cast<std::uint32_t>(h));
  w.u64(static_cast<std::uint64_t>(m.params.size()));
  w.f64s(std::span<const double>(m.params.data(), static_cast<std::size_t>(m.params.size())));
  return w.take();
}

inline PredictorModel decode_predictor(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  PredictorModel m;
  m.action_dim = static_cast<int>(read_checkpoint_header(r, CheckpointType::kSaliencyPredictor));
  const std::uint32_t E = r.u32();
  const std::uint32_t F = r.u32();
  m.max_actions = static_cast<int>(r.u32());
  m.action_scale = r.f64();
  if (E == 0 || F == 0 || E > 4096 || F > 4096 || m.max_actions <= 0 || m.max_actions > 1024 || m.action_dim <= 0) {
    throw Error(ErrorCode::kCorruptFile, "implausible predictor dimensions");
  }
  Encoder& e = m.encoder;
  e.feature_scale.resize(F);
  e.weight.resize(E, F);
  e.bias.resize(E);
  r.f64s(std::span<double>(e.feature_scale.data(), F));
  r.f64s(std::span<double>(e.weight.data(), static_cast<std::size_t>(E) * F));
  r.f64s(std::span<double>(e.bias.data(), E));
  const int cond_hidden = static_cast<int>(r.u32());
  const std::uint32_t n_hidden = r.u32();
  if (n_hidden > 64) throw Error(ErrorCode::kCorruptFile, "implausible hidden layer count");
  std::vector<int> hidden(n_hidden);
  for (int& h : hidden) h = static_cast<int>(r.u32());
  m.net = ConditionedNet(static_cast<int>(E), m.max_actions * m.action_dim, cond_hidden, hidden, static_cast<int>(E));
  const std::uint64_t n = r.u64();
  if (n != m.net.num_params()) throw Error(ErrorCode::kCorruptFile, "predictor parameter count mismatch");
  m.params.resize(static_cast<Eigen::Index>(n));
  r.f64s(std::span<double>(m.params.data(), n));
  if (r.remaining() != 0) throw Error(ErrorCode::kCorruptFile, "trailing bytes after predictor checkpoint");
  return m;
}

inline void save_predictor(const PredictorModel& m, const std::filesystem::path& path) {
  io::write_file_with_crc(path, encode_predictor(m));
}

inline PredictorModel load_predictor(const std::filesystem::path& path) {
  return decode_predictor(io::read_file_with_crc(path));
}

}  // namespace flowstream
