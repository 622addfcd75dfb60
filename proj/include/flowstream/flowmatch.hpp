#pragma once

// Conditional action flow around a demonstrated action-state path xi(t):
//
//   v_xi(x, t) = xi'(t) - k (x - xi(t)),    x(0) ~ N(xi(0), sigma0^2 I)
//
// whose marginal stays Gaussian, N(xi(t), sigma0^2 exp(-2 k t) I). Time t is
// the normalized action index within a horizon of h actions, so one Euler step
// of size 1/h yields exactly one action.

#include <cmath>
#include <string>
#include <vector>

#include "flowstream/core.hpp"

namespace flowstream {

struct FlowParams {
  double k = 5.0;       // stabilizing factor
  double sigma0 = 0.4;  // initial standard deviation, normalized units
  int h = 10;           // actions per observation

  void validate() const {
    require(k > 0.0, ErrorCode::kInvalidArgument, "flow k must be positive");
    require(sigma0 > 0.0, ErrorCode::kInvalidArgument, "flow sigma0 must be positive");
    require(h >= 1, ErrorCode::kInvalidArgument, "horizon h must be >= 1");
  }

  friend bool operator==(const FlowParams&, const FlowParams&) = default;
};

/// Consecutive action states of one trajectory, starting at `start_index`,
/// together with the observation taken there.
struct SubTrajectory {
  std::vector<ActionState> states;  // h + 1 entries
  Observation observation;
  std::size_t start_index = 0;
};

inline Velocity target_velocity(const ActionState& xi_t, const Velocity& xi_dot_t,
                                const ActionState& x, double k) {
  require_same_dim(xi_t.size(), xi_dot_t.size(), "target_velocity xi/xi_dot");
  require_same_dim(xi_t.size(), x.size(), "target_velocity xi/x");
  Vec out(x.size());
  for (Eigen::Index d = 0; d < x.size(); ++d) out[d] = xi_dot_t[d] - k * (x[d] - xi_t[d]);
  return Velocity(std::move(out));
}

/// Forward difference with dt = 1/h, so that xi_dot * dt reproduces the
/// recorded action exactly.
inline Velocity discrete_xi_dot(const SubTrajectory& sub, int T, int h) {
  require(h >= 1, ErrorCode::kInvalidArgument, "h must be >= 1");
  require(T >= 0 && T < h, ErrorCode::kInvalidArgument,
          "T=" + std::to_string(T) + " outside [0, " + std::to_string(h) + ")");
  require(static_cast<std::size_t>(T + 1) < sub.states.size(), ErrorCode::kInvalidArgument,
          "sub-trajectory too short for T=" + std::to_string(T));
  const Vec& a = sub.states[T].values();
  const Vec& b = sub.states[T + 1].values();
  require_same_dim(a.size(), b.size(), "discrete_xi_dot");
  return Velocity((b - a) * static_cast<double>(h));
}

/// Variance of the contracting marginal at within-horizon time t.
inline double marginal_variance(const FlowParams& fp, double t) {
  return fp.sigma0 * fp.sigma0 * std::exp(-2.0 * fp.k * t);
}

inline ActionState marginal_sample(const ActionState& mean, const FlowParams& fp, double t, Rng& rng) {
  require(t >= 0.0 && t <= 1.0, ErrorCode::kInvalidArgument, "t must lie in [0, 1]");
  const double sd = std::sqrt(marginal_variance(fp, t));
  Vec out(mean.size());
  for (Eigen::Index d = 0; d < mean.size(); ++d) out[d] = mean[d] + sd * rng.normal();
  return ActionState(std::move(out));
}

inline double cfm_residual(const Velocity& v_pred, const Velocity& v_target) {
  require_same_dim(v_pred.size(), v_target.size(), "cfm_residual");
  return (v_pred.values() - v_target.values()).squaredNorm();
}

/// Euler integration x_{T+1} = x_T + v(x_T, T/h) / h for T = 0..steps-1.
/// Returns x_0..x_steps.
template <class Field>
std::vector<ActionState> euler_integrate(Field&& v_fn, const ActionState& x0, int h, int steps) {
  require(h >= 1, ErrorCode::kInvalidArgument, "h must be >= 1");
  require(steps >= 0, ErrorCode::kInvalidArgument, "steps must be >= 0");
  const double dt = 1.0 / static_cast<double>(h);
  std::vector<ActionState> xs;
  xs.reserve(static_cast<std::size_t>(steps) + 1);
  xs.push_back(x0);
  for (int T = 0; T < steps; ++T) {
    const ActionState& x = xs.back();
    const Velocity v = v_fn(x, static_cast<double>(T) * dt);
    require_same_dim(v.size(), x.size(), "euler_integrate field output");
    Vec next(x.size());
    for (Eigen::Index d = 0; d < x.size(); ++d) next[d] = x[d] + v[d] * dt;
    xs.emplace_back(std::move(next));
  }
  return xs;
}

inline ActionVector extract_action(const Velocity& v, int h) {
  require(h >= 1, ErrorCode::kInvalidArgument, "h must be >= 1");
  return ActionVector(v.values() / static_cast<double>(h));
}

}  // namespace flowstream
