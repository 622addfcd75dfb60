#pragma once

// Planar toy environments. The agent moves a point in [-5, 5]^2. Entering the
// latch box sets a one-way latch and moves the goal by a fixed offset; success
// needs the latch set and the point within 0.2 of the goal.
//
// Direct: position += a.
// Controller: position += c * tanh(a / c), a saturating controller, so the
// accumulated actions drift away from the physical position.

#include <algorithm>
#include <cmath>
#include <string>

#include "flowstream/core.hpp"

namespace flowstream {

using Vec2 = Eigen::Vector2d;

inline constexpr double kWorkspaceHalfWidth = 5.0;
inline constexpr double kSuccessRadius = 0.2;
inline constexpr int kObservationFeatures = 7;

enum class EnvVariant : std::uint8_t { kDirect = 0, kController = 1 };

inline const char* to_string(EnvVariant v) { return v == EnvVariant::kDirect ? "direct" : "controller"; }

inline EnvVariant parse_env_variant(const std::string& s) {
  if (s == "direct") return EnvVariant::kDirect;
  if (s == "controller") return EnvVariant::kController;
  throw Error(ErrorCode::kInvalidArgument, "unknown environment '" + s + "'");
}

struct Box {
  Vec2 lo;
  Vec2 hi;

  bool contains(const Vec2& p) const {
    return p.x() >= lo.x() && p.x() <= hi.x() && p.y() >= lo.y() && p.y() <= hi.y();
  }
  Vec2 center() const { return 0.5 * (lo + hi); }
};

struct EnvKind {
  EnvVariant variant = EnvVariant::kDirect;
  double saturation = 0.3;  // controller limit c
  Box latch_region{Vec2(-0.9, 0.1), Vec2(-0.1, 0.9)};
  Vec2 goal_shift{1.5, -1.5};
  int episode_cap = 120;

  // Initial-state distribution.
  Box start_region{Vec2(-4.0, -4.0), Vec2(-2.0, -2.0)};
  Box goal_region{Vec2(0.5, 1.5), Vec2(2.5, 3.5)};

  static EnvKind direct() { return EnvKind{}; }
  static EnvKind controller(double c = 0.3) {
    EnvKind k;
    k.variant = EnvVariant::kController;
    k.saturation = c;
    // near-fixed home pose
    k.start_region = Box{Vec2(-3.05, -3.05), Vec2(-2.95, -2.95)};
    return k;
  }

  void validate() const {
    require(variant == EnvVariant::kDirect || saturation > 0.0, ErrorCode::kInvalidArgument,
            "controller saturation must be positive");
    require(episode_cap >= 1, ErrorCode::kInvalidArgument, "episode cap must be >= 1");
  }

  AlphaInit alpha_init() const {
    return variant == EnvVariant::kDirect ? AlphaInit::kInitialPosition : AlphaInit::kZero;
  }
};

inline nlohmann::json to_json(const EnvKind& k) {
  auto box = [](const Box& b) { return nlohmann::json{b.lo.x(), b.lo.y(), b.hi.x(), b.hi.y()}; };
  return {{"variant", to_string(k.variant)},
          {"saturation", k.saturation},
          {"latch_region", box(k.latch_region)},
          {"goal_shift", {k.goal_shift.x(), k.goal_shift.y()}},
          {"episode_cap", k.episode_cap},
          {"start_region", box(k.start_region)},
          {"goal_region", box(k.goal_region)},
          {"alpha_init", to_string(k.alpha_init())}};
}

struct EnvState {
  Vec2 position = Vec2::Zero();
  Vec2 goal = Vec2::Zero();
  bool latch = false;
  int step_count = 0;

  friend bool operator==(const EnvState& a, const EnvState& b) {
    return a.position == b.position && a.goal == b.goal && a.latch == b.latch && a.step_count == b.step_count;
  }
};

inline Vec2 clip_to_workspace(const Vec2& p) {
  return p.cwiseMax(Vec2::Constant(-kWorkspaceHalfWidth)).cwiseMin(Vec2::Constant(kWorkspaceHalfWidth));
}

/// True when the point touches the workspace boundary.
inline bool at_workspace_edge(const EnvState& s) {
  return s.position.cwiseAbs().maxCoeff() >= kWorkspaceHalfWidth;
}

/// Physical displacement produced by action `a`.
inline Vec2 displacement(const EnvKind& kind, const Vec2& a) {
  if (kind.variant == EnvVariant::kDirect) return a;
  const double c = kind.saturation;
  return Vec2(c * std::tanh(a.x() / c), c * std::tanh(a.y() / c));
}

inline EnvState step(const EnvKind& kind, const EnvState& state, const Vec2& a) {
  require(a.allFinite(), ErrorCode::kInvalidArgument, "non-finite action");
  EnvState next = state;
  next.position = clip_to_workspace(state.position + displacement(kind, a));
  if (!next.latch && kind.latch_region.contains(next.position)) {
    next.latch = true;
    next.goal += kind.goal_shift;
  }
  ++next.step_count;
  return next;
}

inline EnvState step(const EnvKind& kind, const EnvState& state, const ActionVector& a) {
  require_same_dim(a.size(), 2, "environment action");
  return step(kind, state, Vec2(a[0], a[1]));
}

/// Features: position, goal, latch (0/1), goal - position.
inline Observation observe(const EnvState& s, std::int64_t frame_id = 0, double capture_time = 0.0) {
  Observation o;
  o.raw_features = {s.position.x(), s.position.y(), s.goal.x(), s.goal.y(), s.latch ? 1.0 : 0.0,
                    s.goal.x() - s.position.x(), s.goal.y() - s.position.y()};
  o.frame_id = frame_id;
  o.capture_time = capture_time;
  return o;
}

inline bool success(const EnvState& s) { return s.latch && (s.position - s.goal).norm() < kSuccessRadius; }

inline EnvState sample_initial_state(const EnvKind& kind, Rng& rng) {
  auto draw = [&](const Box& b) { return Vec2(rng.uniform(b.lo.x(), b.hi.x()), rng.uniform(b.lo.y(), b.hi.y())); };
  EnvState s;
  s.position = draw(kind.start_region);
  s.goal = draw(kind.goal_region);
  return s;
}

// ---------------------------------------------------------------------------
// Scripted expert

struct ExpertConfig {
  double gain = 0.35;        // proportional gain toward the active waypoint
  double max_speed = 0.25;   // physical displacement per step
  double noise = 0.02;       // action noise, physical units
  double settle_radius = 0.05;
  int hold_steps = 10;       // extra steps recorded after settling
};

/// Physical displacement the expert wants from `s`.
inline Vec2 expert_displacement(const EnvKind& kind, const EnvState& s, const ExpertConfig& cfg) {
  const Vec2 waypoint = s.latch ? s.goal : kind.latch_region.center();
  Vec2 d = cfg.gain * (waypoint - s.position);
  const double n = d.norm();
  if (n > cfg.max_speed) d *= cfg.max_speed / n;
  return d;
}

/// Action realizing a desired displacement (inverts the controller where possible).
inline Vec2 action_for_displacement(const EnvKind& kind, const Vec2& d) {
  if (kind.variant == EnvVariant::kDirect) return d;
  const double c = kind.saturation;
  auto inv = [c](double v) { return c * std::atanh(std::clamp(v / c, -0.95, 0.95)); };
  return Vec2(inv(d.x()), inv(d.y()));
}

/// One scripted episode. Returns nullopt if it fails to reach the goal in time.
inline std::optional<Trajectory> run_expert_episode(const EnvKind& kind, Rng& rng, const ExpertConfig& cfg = {}) {
  EnvState s = sample_initial_state(kind, rng);
  const EnvState initial = s;
  Trajectory t;
  t.observations.push_back(observe(s, 0, 0.0));
  int settled_for = -1;
  while (s.step_count < kind.episode_cap) {
    Vec2 a = action_for_displacement(kind, expert_displacement(kind, s, cfg));
    a += Vec2(rng.normal(), rng.normal()) * cfg.noise;
    s = step(kind, s, a);
    t.actions.emplace_back(Vec(a));
    t.observations.push_back(observe(s, s.step_count, static_cast<double>(s.step_count)));
    if (settled_for < 0 && s.latch && (s.position - s.goal).norm() < cfg.settle_radius) settled_for = 0;
    if (settled_for >= 0 && ++settled_for > cfg.hold_steps) break;
  }
  if (!success(s)) return std::nullopt;
  const ActionState alpha0 = kind.alpha_init() == AlphaInit::kZero
                                 ? ActionState::zero(2)
                                 : ActionState{initial.position.x(), initial.position.y()};
  t.action_states = cumulative_states(t.actions, alpha0);
  return t;
}

/// `n` successful demonstrations; failed scripts are resampled up to 10n attempts.
inline std::vector<Trajectory> generate_demos(const EnvKind& kind, std::size_t n, std::uint64_t seed,
                                              const ExpertConfig& cfg = {}) {
  require(n >= 1, ErrorCode::kInvalidArgument, "need at least one demonstration");
  kind.validate();
  std::vector<Trajectory> out;
  out.reserve(n);
  const Rng base(seed);
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (attempts >= 10 * n) {
      throw Error(ErrorCode::kGenerationFailed, "only " + std::to_string(out.size()) + " of " +
                                                    std::to_string(n) + " demonstrations after " +
                                                    std::to_string(attempts) + " attempts");
    }
    Rng rng = base.derive(attempts++);
    if (auto t = run_expert_episode(kind, rng, cfg)) out.push_back(std::move(*t));
  }
  return out;
}

}  // namespace flowstream
