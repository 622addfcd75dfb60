#pragma once

// The learned velocity field v(x, t | o): an MLP over the normalized action
// state, sinusoidal time features and observation features. Also the policy
// bundle (network + normalization + flow parameters) and its checkpoint file.

#include <array>
#include <optional>

#include "flowstream/flowmatch.hpp"
#include "flowstream/mlp.hpp"
#include "flowstream/normkit.hpp"

namespace flowstream {

inline constexpr std::array<double, 4> kTimeFrequencies = {1.0, 2.0, 4.0, 8.0};
inline constexpr int kTimeFeatures = 1 + 2 * static_cast<int>(kTimeFrequencies.size());

inline void write_time_features(double t, double* out) {
  out[0] = t;
  for (std::size_t i = 0; i < kTimeFrequencies.size(); ++i) {
    const double phase = 2.0 * std::numbers::pi * kTimeFrequencies[i] * t;
    out[1 + 2 * i] = std::sin(phase);
    out[2 + 2 * i] = std::cos(phase);
  }
}

struct VelocityModel {
  int dim = 2;
  int obs_dim = 7;
  Mlp net;
  Vec params;

  static VelocityModel create(int dim, int obs_dim, std::vector<int> hidden, Rng& rng,
                              bool zero_output = false) {
    VelocityModel m;
    m.dim = dim;
    m.obs_dim = obs_dim;
    m.net = Mlp(dim + kTimeFeatures + obs_dim, std::move(hidden), dim);
    m.params = m.net.init_params(rng, zero_output);
    return m;
  }

  int input_dim() const { return dim + kTimeFeatures + obs_dim; }

  void write_input(const Vec& x, double t, const Vec& obs_feat, double* col) const {
    require_same_dim(x.size(), dim, "velocity model state input");
    require_same_dim(obs_feat.size(), obs_dim, "velocity model observation input");
    for (int d = 0; d < dim; ++d) col[d] = x[d];
    write_time_features(t, col + dim);
    for (int i = 0; i < obs_dim; ++i) col[dim + kTimeFeatures + i] = obs_feat[i];
  }
};

inline Velocity forward(const VelocityModel& model, const ActionState& x, double t, const Vec& obs_feat) {
  Mat X(model.input_dim(), 1);
  model.write_input(x.values(), t, obs_feat, X.data());
  return Velocity(Vec(model.net.forward(model.params, X).col(0)));
}

/// One regression sample: network input and target velocity.
struct FlowSample {
  ActionState x;
  double t = 0.0;
  Vec obs_feat;
  Velocity target;
};

struct LossGrad {
  double loss = 0.0;
  Vec grads;
};

/// Mean squared residual over the batch and its exact gradient.
inline LossGrad loss_and_grad(const VelocityModel& model, std::span<const FlowSample> batch) {
  require(!batch.empty(), ErrorCode::kEmptyInput, "loss_and_grad needs a non-empty batch");
  const auto B = static_cast<Eigen::Index>(batch.size());
  Mat X(model.input_dim(), B);
  Mat Y(model.dim, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const FlowSample& s = batch[b];
    model.write_input(s.x.values(), s.t, s.obs_feat, X.col(b).data());
    require_same_dim(s.target.size(), model.dim, "target velocity");
    Y.col(b) = s.target.values();
  }
  Mlp::Cache cache;
  const Mat out = model.net.forward(model.params, X, &cache);
  const Mat diff = out - Y;
  LossGrad lg;
  lg.loss = diff.squaredNorm() / static_cast<double>(B);
  lg.grads = Vec::Zero(model.params.size());
  model.net.backward(model.params, cache, diff * (2.0 / static_cast<double>(B)), lg.grads);
  return lg;
}

// ---------------------------------------------------------------------------
// Policy bundle

struct FlowPolicy {
  VelocityModel model;
  NormStats stats;
  FlowParams flow;
  NormScheme scheme = NormScheme::kScaleOnly;
  AlphaInit alpha_init = AlphaInit::kZero;
  double obs_scale = 0.2;

  int dim() const { return model.dim; }
  int horizon() const { return flow.h; }

  Vec features(const Observation& o) const {
    require_same_dim(static_cast<Eigen::Index>(o.raw_features.size()), model.obs_dim, "observation features");
    return ConstVecMap(o.raw_features.data(), static_cast<Eigen::Index>(o.raw_features.size())) * obs_scale;
  }

  /// Normalized action-space state at the start of an episode.
  ActionState initial_alpha(const Observation& first) const {
    if (alpha_init == AlphaInit::kZero) return ActionState::zero(dim());
    require(static_cast<int>(first.raw_features.size()) >= dim(), ErrorCode::kDimensionMismatch,
            "observation lacks a position prefix");
    const Vec pos = ConstVecMap(first.raw_features.data(), dim());
    return ActionState(to_normalized(pos, stats, scheme));
  }

  /// Normalized action for within-horizon step T given the running state.
  ActionVector act(const ActionState& alpha, int T, const Observation& o) const {
    const double t = static_cast<double>(T) / static_cast<double>(flow.h);
    return extract_action(forward(model, alpha, t, features(o)), flow.h);
  }

  /// Physical delta sent to the environment.
  Vec to_physical(const ActionVector& a) const { return from_normalized(a.values(), stats, scheme); }
};

/// Optimizer progress saved with a policy so training can resume exactly.
struct TrainingState {
  std::uint64_t seed = 0;
  OptimizerState optimizer;
};

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   magic "FSCKPT01" | u32 version | u32 type tag | u32 D | type payload
//   trailer: u32 crc32
//
// Policy payload: u32 obs_dim | f64 obs_scale | u32 #hidden, widths |
//   u32 #tensors, (u32 rows, u32 cols)... | u64 #params, f64 params... |
//   NormStats (3 x D f64) | FlowParams (f64 k, f64 sigma0, u32 h) |
//   u8 scheme | u8 alpha init | u8 has training state [u64 seed, optimizer]

inline constexpr std::string_view kCheckpointMagic = "FSCKPT01";
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointType : std::uint32_t { kPolicy = 1, kSaliencyPredictor = 2 };

inline void write_checkpoint_header(io::ByteWriter& w, CheckpointType type, std::uint32_t dim,
                                    std::uint32_t version = kCheckpointVersion) {
  w.raw(kCheckpointMagic);
  w.u32(version);
  w.u32(static_cast<std::uint32_t>(type));
  w.u32(dim);
}

/// Validates magic, version and type tag; returns D.
inline std::uint32_t read_checkpoint_header(io::ByteReader& r, CheckpointType expected) {
  if (r.raw(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw Error(ErrorCode::kCorruptFile, "not a checkpoint (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersionMismatch, "checkpoint version " + std::to_string(version) +
                                                 ", expected " + std::to_string(kCheckpointVersion));
  }
  const std::uint32_t type = r.u32();
  if (type != static_cast<std::uint32_t>(expected)) {
    throw Error(ErrorCode::kCorruptFile, "checkpoint type tag " + std::to_string(type) +
                                             ", expected " + std::to_string(static_cast<std::uint32_t>(expected)));
  }
  return r.u32();
}

inline void write_mlp(io::ByteWriter& w, const Mlp& net, const Vec& params) {
  w.u32(static_cast<std::uint32_t>(net.hidden().size()));
  for (int width : net.hidden()) w.u32(static_cast<std::uint32_t>(width));
  const auto& shapes = net.layout().shapes();
  w.u32(static_cast<std::uint32_t>(shapes.size()));
  for (const TensorShape& s : shapes) {
    w.u32(s.rows);
    w.u32(s.cols);
  }
  w.u64(static_cast<std::uint64_t>(params.size()));
  w.f64s(std::span<const double>(params.data(), static_cast<std::size_t>(params.size())));
}

/// Reads an MLP written by write_mlp, checking its shapes against the network
/// rebuilt from the stored widths.
inline std::pair<Mlp, Vec> read_mlp(io::ByteReader& r, int in_dim, int out_dim) {
  const std::uint32_t n_hidden = r.u32();
  if (n_hidden > 64) throw Error(ErrorCode::kCorruptFile, "implausible hidden layer count");
  std::vector<int> hidden(n_hidden);
  for (int& width : hidden) width = static_cast<int>(r.u32());
  Mlp net(in_dim, hidden, out_dim);
  const std::uint32_t n_shapes = r.u32();
  if (n_shapes != net.layout().shapes().size()) throw Error(ErrorCode::kCorruptFile, "tensor count mismatch");
  for (const TensorShape& expected : net.layout().shapes()) {
    TensorShape s{r.u32(), r.u32()};
    if (!(s == expected)) throw Error(ErrorCode::kCorruptFile, "tensor shape mismatch");
  }
  const std::uint64_t n = r.u64();
  if (n != net.num_params()) throw Error(ErrorCode::kCorruptFile, "parameter count mismatch");
  Vec params(static_cast<Eigen::Index>(n));
  r.f64s(std::span<double>(params.data(), n));
  return {std::move(net), std::move(params)};
}

inline void write_norm_stats(io::ByteWriter& w, const NormStats& s) {
  const auto n = static_cast<std::size_t>(s.dim());
  w.f64s(std::span<const double>(s.q_min.data(), n));
  w.f64s(std::span<const double>(s.q_max.data(), n));
  w.f64s(std::span<const double>(s.scale.data(), n));
}

inline NormStats read_norm_stats(io::ByteReader& r, std::uint32_t dim) {
  NormStats s;
  s.q_min.resize(dim);
  s.q_max.resize(dim);
  s.scale.resize(dim);
  r.f64s(std::span<double>(s.q_min.data(), dim));
  r.f64s(std::span<double>(s.q_max.data(), dim));
  r.f64s(std::span<double>(s.scale.data(), dim));
  if (!(s.scale.array() > 0.0).all()) throw Error(ErrorCode::kCorruptFile, "non-positive normalization scale");
  return s;
}

inline std::vector<std::uint8_t> encode_policy(const FlowPolicy& p, const std::optional<TrainingState>& training,
                                               std::uint32_t version = kCheckpointVersion) {
  io::ByteWriter w;
  write_checkpoint_header(w, CheckpointType::kPolicy, static_cast<std::uint32_t>(p.dim()), version);
  w.u32(static_cast<std::uint32_t>(p.model.obs_dim));
  w.f64(p.obs_scale);
  write_mlp(w, p.model.net, p.model.params);
  write_norm_stats(w, p.stats);
  w.f64(p.flow.k);
  w.f64(p.flow.sigma0);
  w.u32(static_cast<std::uint32_t>(p.flow.h));
  w.u8(static_cast<std::uint8_t>(p.scheme));
  w.u8(static_cast<std::uint8_t>(p.alpha_init));
  w.u8(training ? 1 : 0);
  if (training) {
    w.u64(training->seed);
    write_optimizer(w, training->optimizer);
  }
  return w.take();
}

struct LoadedPolicy {
  FlowPolicy policy;
  std::optional<TrainingState> training;
};

inline LoadedPolicy decode_policy(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  const std::uint32_t dim = read_checkpoint_header(r, CheckpointType::kPolicy);
  if (dim == 0 || dim > 1024) throw Error(ErrorCode::kCorruptFile, "implausible action dimension");
  LoadedPolicy out;
  FlowPolicy& p = out.policy;
  p.model.dim = static_cast<int>(dim);
  p.model.obs_dim = static_cast<int>(r.u32());
  p.obs_scale = r.f64();
  auto [net, params] = read_mlp(r, p.model.input_dim(), p.model.dim);
  p.model.net = std::move(net);
  p.model.params = std::move(params);
  p.stats = read_norm_stats(r, dim);
  p.flow.k = r.f64();
  p.flow.sigma0 = r.f64();
  p.flow.h = static_cast<int>(r.u32());
  p.flow.validate();
  const std::uint8_t scheme = r.u8();
  const std::uint8_t alpha = r.u8();
  if (scheme > 1 || alpha > 1) throw Error(ErrorCode::kCorruptFile, "unknown policy enum value");
  p.scheme = static_cast<NormScheme>(scheme);
  p.alpha_init = static_cast<AlphaInit>(alpha);
  if (r.u8() != 0) {
    TrainingState ts;
    ts.seed = r.u64();
    ts.optimizer = read_optimizer(r);
    if (static_cast<std::size_t>(ts.optimizer.m.size()) != p.model.net.num_params()) {
      throw Error(ErrorCode::kCorruptFile, "optimizer state does not match the network");
    }
    out.training = std::move(ts);
  }
  if (r.remaining() != 0) throw Error(ErrorCode::kCorruptFile, "trailing bytes after policy checkpoint");
  return out;
}

inline void save_policy(const FlowPolicy& p, const std::filesystem::path& path,
                        const std::optional<TrainingState>& training = std::nullopt) {
  io::write_file_with_crc(path, encode_policy(p, training));
}

inline LoadedPolicy load_policy(const std::filesystem::path& path) {
  return decode_policy(io::read_file_with_crc(path));
}

}  // namespace flowstream
