#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "rvcnmpc/quad_dynamics.hpp"

namespace rvcnmpc {

using AgentId = int;

/// Timestamped neighbor state as delivered by the communication channel.
struct NeighborObservation {
  AgentId id = -1;
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  double stamp = 0.0;  // sender-side measurement time
};

/// Neighbor state extrapolated to the current time.
struct PredictedNeighbor {
  AgentId id = -1;
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
};

/// Reciprocal velocity constraint A . v >= b, valid for t_v seconds.
struct TimedHalfPlane {
  Vec3 A = Vec3::Zero();
  double b = 0.0;
  double t_v = 0.0;
  AgentId neighbor_id = -1;
};

struct RvcConfig {
  double r_ca = 2.0;        // combined center-to-center avoidance radius
  double tau = 8.0;         // avoidance time window
  double activation_dist = 160.0;
  int max_neighbors = 9;
  double staleness = 1.0;   // observations older than this are discarded
  double r_push = 1.0;      // separation speed demanded when already overlapping
  bool time_dependent = true;
  // Keep stage 1 when closest approach falls inside the first stage interval.
  bool cover_first_stage = true;

  void validate() const {
    if (!(r_ca > 0.0)) throw ConfigError("rvc: r_ca must be positive");
    if (!(tau > 0.0)) throw ConfigError("rvc: tau must be positive");
    if (max_neighbors < 0) throw ConfigError("rvc: max_neighbors must be non-negative");
    if (!(staleness > 0.0)) throw ConfigError("rvc: staleness must be positive");
  }
};

/// First-order extrapolation of an observation; nullopt when stale.
inline std::optional<PredictedNeighbor> predict_neighbor(const NeighborObservation& obs, double now,
                                                         double staleness = 1.0) {
  const double age = std::max(0.0, now - obs.stamp);
  if (age > staleness) return std::nullopt;
  return PredictedNeighbor{obs.id, obs.p + obs.v * age, obs.v};
}

/// Relative velocity v leads to contact within tau: exists t in [0, tau]
/// with |v t - p_rel| < r. Requires |p_rel| > r.
inline bool vo_contains(const Vec3& p_rel, const Vec3& v, double r, double tau) {
  if (p_rel.norm() <= r) throw InvalidStateError("vo_contains: agents already overlap");
  const double vv = v.squaredNorm();
  const double t = vv > 0.0 ? std::clamp(v.dot(p_rel) / vv, 0.0, tau) : 0.0;
  return (v * t - p_rel).norm() < r;
}

/// Minimal change u of the relative velocity onto the boundary of the
/// truncated velocity-obstacle cone, and the outward boundary normal there.
struct VoProjection {
  Vec3 u = Vec3::Zero();
  Vec3 n = Vec3::Zero();
  enum class Region { kCap, kCone } region = Region::kCone;
  bool inside = false;
};

namespace detail {

// Lateral unit direction perpendicular to `axis`, used when the relative
// velocity lies on the cone axis.
inline Vec3 tie_break_lateral(const Vec3& axis) {
  Vec3 e = Vec3::UnitZ().cross(axis);
  if (e.norm() < 1e-9) e = Vec3::UnitY().cross(axis);
  return e.normalized();
}

}  // namespace detail

/// The boundary consists of the apex-facing cap of the sphere centered at
/// p_rel/tau with radius r/tau, and the lateral cone surface beyond the
/// tangent circle. Evaluated in the meridian half-plane containing v_rel.
inline VoProjection compute_u(const Vec3& p_rel, const Vec3& v_rel, double r, double tau) {
  const double dist = p_rel.norm();
  if (dist <= r) throw InvalidStateError("compute_u: agents already overlap");

  const Vec3 axis = p_rel / dist;
  const double sin_t = r / dist;
  const double cos_t = std::sqrt(1.0 - sin_t * sin_t);
  const double c = dist / tau;  // cap sphere center distance from the apex
  const double R = r / tau;

  // Meridian coordinates (x along the axis, y >= 0 lateral).
  const double x = v_rel.dot(axis);
  Vec3 lateral = v_rel - x * axis;
  double y = lateral.norm();
  Vec3 e_lat;
  if (y > 1e-12 * std::max(1.0, v_rel.norm())) {
    e_lat = lateral / y;
  } else {
    e_lat = detail::tie_break_lateral(axis);
    y = 0.0;
  }

  // Lateral ray: points s * (cos, sin) for s >= s_t.
  const double s_t = c * cos_t;
  const double s = std::max(x * cos_t + y * sin_t, s_t);
  const double ray_x = s * cos_t, ray_y = s * sin_t;
  const double ray_d2 = (x - ray_x) * (x - ray_x) + (y - ray_y) * (y - ray_y);

  // Cap arc: directions from the sphere center between -axis and the
  // tangent point direction (-sin, cos).
  double cap_x, cap_y;
  {
    const double dx = x - c, dy = y;
    const double len = std::hypot(dx, dy);
    // Angle from -axis toward +lateral, valid range [0, pi/2 - theta].
    const double ang = len > 0.0 ? std::atan2(dy, -dx) : 0.0;
    const double max_ang = std::atan2(cos_t, sin_t);
    const double a = std::clamp(ang, 0.0, max_ang);
    cap_x = c - R * std::cos(a);
    cap_y = R * std::sin(a);
  }
  const double cap_d2 = (x - cap_x) * (x - cap_x) + (y - cap_y) * (y - cap_y);

  VoProjection out;
  double qx, qy, nx, ny;
  if (cap_d2 < ray_d2) {
    qx = cap_x;
    qy = cap_y;
    nx = (cap_x - c) / R;
    ny = cap_y / R;
    out.region = VoProjection::Region::kCap;
  } else {
    qx = ray_x;
    qy = ray_y;
    nx = -sin_t;
    ny = cos_t;
    out.region = VoProjection::Region::kCone;
  }
  const Vec3 q = qx * axis + qy * e_lat;
  out.u = q - v_rel;
  out.n = (nx * axis + ny * e_lat).normalized();
  out.inside = vo_contains(p_rel, v_rel, r, tau);
  return out;
}

/// Half-plane A . v >= b requiring the agent to take half of the change u;
/// A is the outward boundary normal. Nullopt when u is negligible.
inline std::optional<std::pair<Vec3, double>> build_halfplane(const Vec3& v_self, const Vec3& u, const Vec3& n) {
  if (u.norm() <= 1e-9) return std::nullopt;
  const Vec3 A = n.normalized();
  return std::make_pair(A, A.dot(v_self + 0.5 * u));
}

/// Time of closest approach under constant velocities, floored at zero.
/// p_rel = p_j - p_i, v_rel = v_i - v_j. Returns `fallback` for v_rel ~ 0.
inline double time_validity(const Vec3& p_rel, const Vec3& v_rel, double fallback) {
  const double vv = v_rel.squaredNorm();
  if (vv <= 1e-18) return fallback;
  return std::max(p_rel.dot(v_rel) / vv, 0.0);
}

inline std::vector<TimedHalfPlane> generate_constraints(const Vec3& self_p, const Vec3& self_v,
                                                        const std::vector<PredictedNeighbor>& neighbors,
                                                        const RvcConfig& cfg) {
  std::vector<std::pair<double, const PredictedNeighbor*>> near;
  near.reserve(neighbors.size());
  for (const auto& nb : neighbors) {
    const double d = (nb.p - self_p).norm();
    if (d <= cfg.activation_dist) near.emplace_back(d, &nb);
  }
  std::stable_sort(near.begin(), near.end(), [](const auto& a, const auto& b) {
    return a.first < b.first || (a.first == b.first && a.second->id < b.second->id);
  });
  if (near.size() > static_cast<std::size_t>(cfg.max_neighbors)) near.resize(static_cast<std::size_t>(cfg.max_neighbors));

  std::vector<TimedHalfPlane> out;
  out.reserve(near.size());
  for (const auto& [d, nb] : near) {
    const Vec3 p_rel = nb->p - self_p;
    const Vec3 v_rel = self_v - nb->v;
    TimedHalfPlane hp;
    hp.neighbor_id = nb->id;
    if (d <= cfg.r_ca) {
      if (d < 1e-12) continue;
      hp.A = -p_rel / d;
      hp.b = hp.A.dot(self_v) + cfg.r_push;
      hp.t_v = cfg.tau;
      out.push_back(hp);
      continue;
    }
    const VoProjection proj = compute_u(p_rel, v_rel, cfg.r_ca, cfg.tau);
    const auto plane = build_halfplane(self_v, proj.u, proj.n);
    if (!plane) continue;
    hp.A = plane->first;
    hp.b = plane->second;
    hp.t_v = cfg.time_dependent ? time_validity(p_rel, v_rel, cfg.tau) : cfg.tau;
    out.push_back(hp);
  }
  return out;
}

/// Per-stage constraint rows for one horizon; disabled stages are zero.
struct StageConstraint {
  Vec3 A = Vec3::Zero();
  double b = 0.0;
  bool active() const { return A.squaredNorm() > 0.0; }
};

/// Row m holds the stages of constraint m: result[m][k-1] for t_k.
/// With `cover_first_stage`, a constraint with 0 < t_v < t_1 still binds t_1.
inline std::vector<std::vector<StageConstraint>> schedule_constraints(const std::vector<TimedHalfPlane>& constraints,
                                                                      const std::vector<double>& stage_times,
                                                                      bool cover_first_stage = false) {
  std::vector<std::vector<StageConstraint>> sched(constraints.size(),
                                                  std::vector<StageConstraint>(stage_times.size()));
  for (std::size_t m = 0; m < constraints.size(); ++m) {
    for (std::size_t k = 0; k < stage_times.size(); ++k) {
      const bool covered = cover_first_stage && k == 0 && constraints[m].t_v > 0.0;
      if (stage_times[k] <= constraints[m].t_v || covered) sched[m][k] = {constraints[m].A, constraints[m].b};
    }
  }
  return sched;
}

inline std::vector<double> stage_times(int horizon, double dt) {
  std::vector<double> t(static_cast<std::size_t>(horizon));
  for (int k = 1; k <= horizon; ++k) t[static_cast<std::size_t>(k - 1)] = k * dt;
  return t;
}

}  // namespace rvcnmpc
