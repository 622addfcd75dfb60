#pragma once

// Shared domain types: action vectors, accumulated action-space states,
// observations, trajectories, a counter-based random stream, and the
// on-disk dataset container.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "flowstream/binary_io.hpp"
#include "flowstream/error.hpp"

namespace flowstream {

using Vec = Eigen::VectorXd;

/// Fixed-dimension real vector tagged with its domain meaning so that, e.g.,
/// an action cannot be passed where an action-space state is expected.
template <class Tag>
class Tagged {
 public:
  Tagged() = default;
  explicit Tagged(Vec values) : values_(std::move(values)) {}
  Tagged(std::initializer_list<double> values)
      : values_(Eigen::Map<const Vec>(values.begin(), static_cast<Eigen::Index>(values.size()))) {}

  static Tagged zero(Eigen::Index dim) { return Tagged(Vec::Zero(dim)); }

  Eigen::Index size() const { return values_.size(); }
  double operator[](Eigen::Index i) const { return values_[i]; }
  double& operator[](Eigen::Index i) { return values_[i]; }

  const Vec& values() const { return values_; }
  Vec& values() { return values_; }

  bool all_finite() const { return values_.allFinite(); }

  friend bool operator==(const Tagged& a, const Tagged& b) {
    return a.size() == b.size() && (a.values_.array() == b.values_.array()).all();
  }

 private:
  Vec values_;
};

struct ActionTag {};
struct StateTag {};
struct VelocityTag {};

/// Normalized delta applied per control step.
using ActionVector = Tagged<ActionTag>;
/// Accumulated sum of prior actions plus the initial state.
using ActionState = Tagged<StateTag>;
/// Flow velocity in action-state units per unit of within-horizon time.
using Velocity = Tagged<VelocityTag>;

inline void require_same_dim(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b) {
    throw Error(ErrorCode::kDimensionMismatch,
                std::string(what) + " (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}

/// Componentwise sum, evaluated in index order so results are reproducible.
inline ActionState operator+(const ActionState& state, const ActionVector& action) {
  require_same_dim(state.size(), action.size(), "state + action");
  Vec out(state.size());
  for (Eigen::Index d = 0; d < state.size(); ++d) out[d] = state[d] + action[d];
  return ActionState(std::move(out));
}

struct Observation {
  std::vector<double> raw_features;
  std::int64_t frame_id = 0;
  double capture_time = 0.0;

  friend bool operator==(const Observation&, const Observation&) = default;
};

/// How the first action-space state of an episode is chosen.
enum class AlphaInit : std::uint8_t {
  kZero = 0,             // pure action accumulation
  kInitialPosition = 1,  // state space coincides with physical space
};

inline const char* to_string(AlphaInit a) {
  return a == AlphaInit::kZero ? "zero" : "initial_position";
}

struct Trajectory {
  std::vector<Observation> observations;  // one per visited state, length L + 1
  std::vector<ActionVector> actions;      // length L
  std::vector<ActionState> action_states; // length L + 1, [0] is the initial state

  std::size_t length() const { return actions.size(); }
};

/// Prefix sums S[0] = alpha0, S[n] = S[n-1] + actions[n-1].
inline std::vector<ActionState> cumulative_states(std::span<const ActionVector> actions,
                                                  const ActionState& alpha0) {
  std::vector<ActionState> states;
  states.reserve(actions.size() + 1);
  states.push_back(alpha0);
  for (std::size_t n = 0; n < actions.size(); ++n) {
    if (actions[n].size() != alpha0.size()) {
      throw Error(ErrorCode::kMalformedDataset,
                  "action " + std::to_string(n) + " has dimension " +
                      std::to_string(actions[n].size()) + ", expected " +
                      std::to_string(alpha0.size()));
    }
    states.push_back(states.back() + actions[n]);
  }
  return states;
}

/// Checks lengths and the exact prefix-sum relation between actions and states.
inline void validate_trajectory(const Trajectory& traj) {
  const std::size_t L = traj.actions.size();
  require(traj.action_states.size() == L + 1, ErrorCode::kMalformedDataset,
          "action_states must have length actions + 1");
  require(traj.observations.size() == L + 1, ErrorCode::kMalformedDataset,
          "observations must have length actions + 1");
  for (std::size_t i = 1; i < traj.observations.size(); ++i) {
    require(traj.observations[i].frame_id > traj.observations[i - 1].frame_id,
            ErrorCode::kMalformedDataset, "frame ids must be strictly increasing");
  }
  for (std::size_t n = 1; n <= L; ++n) {
    if (!(traj.action_states[n] == traj.action_states[n - 1] + traj.actions[n - 1])) {
      throw Error(ErrorCode::kMalformedDataset,
                  "action state " + std::to_string(n) + " breaks the prefix-sum invariant");
    }
  }
}

// ---------------------------------------------------------------------------
// Random numbers

/// Counter-based generator: draw i of stream (seed, stream) is a pure function
/// of (seed, stream, i), so substreams can be derived without shared state.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    require(n > 0, ErrorCode::kInvalidArgument, "uniform_int needs n > 0");
    // Lemire's multiply-shift with rejection keeps the draw unbiased.
    while (true) {
      const unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
      const auto low = static_cast<std::uint64_t>(m);
      if (low >= n || low >= (0 - n) % n) return static_cast<std::uint64_t>(m >> 64);
    }
  }

  /// Standard normal via Box-Muller (one value per call).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent substream keyed on this generator's seed.
  Rng derive(std::uint64_t stream) const { return Rng(seed_, mix(stream_ + 1) ^ stream); }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Dataset file
//
//   magic "FSTRAJ01" | u32 version | u32 D | u64 episodes | str metadata-json
//   per episode: u64 L | u32 F | observations (i64 frame, f64 time, F x f64)
//                | L x D actions | (L + 1) x D action states
//   trailer: u32 crc32 of everything above

inline constexpr std::string_view kDatasetMagic = "FSTRAJ01";
inline constexpr std::uint32_t kDatasetVersion = 1;

struct Dataset {
  std::uint32_t dim = 2;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<Trajectory> episodes;
};

inline std::vector<std::uint8_t> encode_dataset(const Dataset& ds) {
  io::ByteWriter w;
  w.raw(kDatasetMagic);
  w.u32(kDatasetVersion);
  w.u32(ds.dim);
  w.u64(ds.episodes.size());
  w.str(ds.metadata.dump());
  for (const Trajectory& t : ds.episodes) {
    const std::size_t L = t.actions.size();
    const std::size_t F = t.observations.empty() ? 0 : t.observations.front().raw_features.size();
    w.u64(L);
    w.u32(static_cast<std::uint32_t>(F));
    require(t.observations.size() == L + 1 && t.action_states.size() == L + 1,
            ErrorCode::kMalformedDataset, "inconsistent trajectory lengths");
    for (const Observation& o : t.observations) {
      require(o.raw_features.size() == F, ErrorCode::kMalformedDataset,
              "observation feature length varies within an episode");
      w.i64(o.frame_id);
      w.f64(o.capture_time);
      w.f64s(o.raw_features);
    }
    for (const ActionVector& a : t.actions) {
      require_same_dim(a.size(), ds.dim, "dataset action");
      w.f64s(std::span<const double>(a.values().data(), ds.dim));
    }
    for (const ActionState& s : t.action_states) {
      require_same_dim(s.size(), ds.dim, "dataset action state");
      w.f64s(std::span<const double>(s.values().data(), ds.dim));
    }
  }
  return w.take();
}

inline Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.raw(kDatasetMagic.size()) != kDatasetMagic) {
    throw Error(ErrorCode::kCorruptFile, "not a trajectory dataset (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw Error(ErrorCode::kVersionMismatch, "dataset version " + std::to_string(version) +
                                                 ", expected " + std::to_string(kDatasetVersion));
  }
  Dataset ds;
  ds.dim = r.u32();
  const std::uint64_t count = r.u64();
  try {
    ds.metadata = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kCorruptFile, std::string("dataset metadata: ") + e.what());
  }
  const Eigen::Index D = ds.dim;
  for (std::uint64_t e = 0; e < count; ++e) {
    Trajectory t;
    const std::uint64_t L = r.u64();
    const std::uint32_t F = r.u32();
    if (L > r.remaining()) throw Error(ErrorCode::kCorruptFile, "episode length exceeds file");
    t.observations.resize(L + 1);
    for (Observation& o : t.observations) {
      o.frame_id = r.i64();
      o.capture_time = r.f64();
      o.raw_features.resize(F);
      r.f64s(o.raw_features);
    }
    t.actions.reserve(L);
    for (std::uint64_t n = 0; n < L; ++n) {
      Vec v(D);
      r.f64s(std::span<double>(v.data(), ds.dim));
      t.actions.emplace_back(std::move(v));
    }
    t.action_states.reserve(L + 1);
    for (std::uint64_t n = 0; n <= L; ++n) {
      Vec v(D);
      r.f64s(std::span<double>(v.data(), ds.dim));
      t.action_states.emplace_back(std::move(v));
    }
    ds.episodes.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::kCorruptFile, "trailing bytes after dataset");
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  io::write_file_with_crc(path, encode_dataset(ds));
}

/// Loads and validates every episode's prefix-sum invariant.
inline Dataset load_dataset(const std::filesystem::path& path) {
  const auto payload = io::read_file_with_crc(path);
  Dataset ds = decode_dataset(payload);
  for (const Trajectory& t : ds.episodes) validate_trajectory(t);
  return ds;
}

}  // namespace flowstream
