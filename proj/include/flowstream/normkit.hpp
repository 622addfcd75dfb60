#pragma once

// Scale-only normalization shared between actions and action-space states.
// Dropping the offset keeps normalize(x) + normalize(a) == normalize(x + a),
// which the accumulated action state relies on. The offset form is kept
// alongside for comparison.

#include <algorithm>
#include <limits>
#include <span>

#include "flowstream/core.hpp"

namespace flowstream {

struct NormStats {
  Vec q_min;
  Vec q_max;
  Vec scale;

  Eigen::Index dim() const { return scale.size(); }

  /// Builds stats from extrema; a dimension with no spread gets scale 1.
  static NormStats from_extrema(Vec q_min, Vec q_max) {
    require_same_dim(q_min.size(), q_max.size(), "norm extrema");
    NormStats s;
    s.scale.resize(q_min.size());
    for (Eigen::Index d = 0; d < q_min.size(); ++d) {
      const double spread = q_max[d] - q_min[d];
      s.scale[d] = spread > 0.0 ? spread : 1.0;
    }
    s.q_min = std::move(q_min);
    s.q_max = std::move(q_max);
    return s;
  }

  friend bool operator==(const NormStats& a, const NormStats& b) {
    return a.dim() == b.dim() && (a.q_min.array() == b.q_min.array()).all() &&
           (a.q_max.array() == b.q_max.array()).all() &&
           (a.scale.array() == b.scale.array()).all();
  }
};

enum class NormScheme : std::uint8_t {
  kScaleOnly = 0,  // a / scale
  kLegacy = 1,     // (a - q_min) / scale * 2 - 1
};

/// Extrema over the union of every action and every action-space state.
inline NormStats fit_stats(std::span<const Trajectory> dataset) {
  require(!dataset.empty(), ErrorCode::kEmptyInput, "cannot fit normalization on an empty dataset");
  Eigen::Index D = -1;
  Vec lo, hi;
  auto absorb = [&](const Vec& v) {
    if (D < 0) {
      D = v.size();
      lo = Vec::Constant(D, std::numeric_limits<double>::infinity());
      hi = Vec::Constant(D, -std::numeric_limits<double>::infinity());
    }
    require_same_dim(v.size(), D, "fit_stats");
    lo = lo.cwiseMin(v);
    hi = hi.cwiseMax(v);
  };
  for (const Trajectory& t : dataset) {
    for (const ActionVector& a : t.actions) absorb(a.values());
    for (const ActionState& s : t.action_states) absorb(s.values());
  }
  require(D > 0, ErrorCode::kEmptyInput, "dataset contains no actions or states");
  return NormStats::from_extrema(std::move(lo), std::move(hi));
}

inline Vec normalize(const Vec& v, const NormStats& stats) {
  require_same_dim(v.size(), stats.dim(), "normalize");
  return v.cwiseQuotient(stats.scale);
}

inline Vec denormalize(const Vec& v, const NormStats& stats) {
  require_same_dim(v.size(), stats.dim(), "denormalize");
  return v.cwiseProduct(stats.scale);
}

inline Vec normalize_legacy(const Vec& v, const NormStats& stats) {
  require_same_dim(v.size(), stats.dim(), "normalize_legacy");
  return ((v - stats.q_min).cwiseQuotient(stats.scale) * 2.0).array() - 1.0;
}

inline Vec denormalize_legacy(const Vec& v, const NormStats& stats) {
  require_same_dim(v.size(), stats.dim(), "denormalize_legacy");
  return ((v.array() + 1.0) * 0.5).matrix().cwiseProduct(stats.scale) + stats.q_min;
}

template <class Tag>
Tagged<Tag> normalize(const Tagged<Tag>& v, const NormStats& stats) {
  return Tagged<Tag>(normalize(v.values(), stats));
}

template <class Tag>
Tagged<Tag> denormalize(const Tagged<Tag>& v, const NormStats& stats) {
  return Tagged<Tag>(denormalize(v.values(), stats));
}

inline Vec to_normalized(const Vec& v, const NormStats& stats, NormScheme scheme) {
  return scheme == NormScheme::kScaleOnly ? normalize(v, stats) : normalize_legacy(v, stats);
}

inline Vec from_normalized(const Vec& v, const NormStats& stats, NormScheme scheme) {
  return scheme == NormScheme::kScaleOnly ? denormalize(v, stats) : denormalize_legacy(v, stats);
}

}  // namespace flowstream
