#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "rvcnmpc/quad_dynamics.hpp"

namespace rvcnmpc {

/// Norm limits on velocity and acceleration of the point-mass reference.
struct PmmLimits {
  double v_max = 20.0;
  double a_max = 40.0;

  void validate() const {
    if (!(v_max > 0.0) || !(a_max > 0.0)) throw ConfigError("pmm: limits must be positive");
  }
};

/// Piecewise-constant-acceleration profile of one axis.
class AxisProfile {
 public:
  struct Segment {
    double duration;
    double accel;
  };

  AxisProfile() = default;
  AxisProfile(double p0, double v0) : p0_(p0), v0_(v0) {}

  void push(double duration, double accel) {
    if (duration > 0.0) segments_.push_back({duration, accel});
  }

  double duration() const {
    double t = 0.0;
    for (const auto& s : segments_) t += s.duration;
    return t;
  }

  const std::vector<Segment>& segments() const { return segments_; }
  double start_position() const { return p0_; }
  double start_velocity() const { return v0_; }

  struct Sample {
    double p, v, a;
  };

  /// Beyond the end the axis continues at its terminal velocity.
  Sample sample(double t) const {
    double p = p0_, v = v0_;
    for (const auto& s : segments_) {
      if (t < s.duration) return {p + v * t + 0.5 * s.accel * t * t, v + s.accel * t, s.accel};
      p += v * s.duration + 0.5 * s.accel * s.duration * s.duration;
      v += s.accel * s.duration;
      t -= s.duration;
    }
    return {p + v * t, v, 0.0};
  }

  Sample terminal() const { return sample(duration()); }

 private:
  double p0_ = 0.0;
  double v0_ = 0.0;
  std::vector<Segment> segments_;
};

namespace detail {

// Braking phase when the start velocity exceeds the axis limit.
inline AxisProfile brake_to_limit(double& p0, double& v0, double a_lim, double v_lim) {
  AxisProfile prof(p0, v0);
  if (std::abs(v0) > v_lim) {
    const double sgn = v0 > 0.0 ? 1.0 : -1.0;
    const double t = (std::abs(v0) - v_lim) / a_lim;
    const double acc = -sgn * a_lim;
    prof.push(t, acc);
    p0 += v0 * t + 0.5 * acc * t * t;
    v0 = sgn * v_lim;
  }
  return prof;
}

}  // namespace detail

/// Minimum-time bang-bang profile (accelerate, optional cruise at the velocity
/// limit, decelerate) from (p0, v0) to (pg, vg).
inline AxisProfile solve_axis_profile(double p0, double v0, double pg, double vg, double a_lim, double v_lim) {
  if (!(a_lim > 0.0) || !(v_lim > 0.0)) throw std::invalid_argument("axis profile: limits must be positive");
  vg = std::clamp(vg, -v_lim, v_lim);
  AxisProfile prof = detail::brake_to_limit(p0, v0, a_lim, v_lim);

  const double d = pg - p0;
  const double tol = 1e-12 * std::max({1.0, std::abs(d), v_lim * v_lim / a_lim});
  double best = std::numeric_limits<double>::infinity();
  std::array<double, 3> best_t{0.0, 0.0, 0.0};
  double best_sigma = 1.0;

  for (const double sigma : {1.0, -1.0}) {
    const double vp_sq = (2.0 * sigma * a_lim * d + v0 * v0 + vg * vg) / 2.0;
    if (vp_sq < -tol) continue;
    double vp = sigma * std::sqrt(std::max(vp_sq, 0.0));
    double t1 = sigma * (vp - v0) / a_lim;
    double t3 = sigma * (vp - vg) / a_lim;
    if (t1 < -1e-12 || t3 < -1e-12) continue;
    double t2 = 0.0;
    if (std::abs(vp) > v_lim) {
      vp = sigma * v_lim;
      t1 = sigma * (vp - v0) / a_lim;
      t3 = sigma * (vp - vg) / a_lim;
      const double d13 = sigma * (2.0 * vp * vp - v0 * v0 - vg * vg) / (2.0 * a_lim);
      t2 = (d - d13) / vp;
      if (t2 < -1e-12) continue;
    }
    t1 = std::max(t1, 0.0);
    t2 = std::max(t2, 0.0);
    t3 = std::max(t3, 0.0);
    const double total = t1 + t2 + t3;
    if (total < best) {
      best = total;
      best_t = {t1, t2, t3};
      best_sigma = sigma;
    }
  }
  if (!std::isfinite(best)) {
    // Both branches rejected only through rounding at a switching point.
    throw std::logic_error("axis profile: no bang-bang solution found");
  }
  prof.push(best_t[0], best_sigma * a_lim);
  prof.push(best_t[1], 0.0);
  prof.push(best_t[2], -best_sigma * a_lim);
  return prof;
}

/// Profile that reaches (pg, vg) at exactly `duration` by moving to a cruise
/// velocity at full acceleration, cruising, then matching vg. Used when
/// acceleration scaling cannot stretch an axis (non-zero boundary velocities).
inline AxisProfile axis_profile_with_cruise(double p0, double v0, double pg, double vg, double a_lim, double v_lim,
                                            double duration) {
  AxisProfile brake = detail::brake_to_limit(p0, v0, a_lim, v_lim);
  const double T = duration - brake.duration();
  const double d = pg - p0;
  auto shape = [&](double vc, double& t1, double& t2, double& t3) {
    t1 = std::abs(vc - v0) / a_lim;
    t3 = std::abs(vg - vc) / a_lim;
    t2 = T - t1 - t3;
    return (v0 + vc) / 2.0 * t1 + vc * t2 + (vc + vg) / 2.0 * t3;
  };
  // Covered distance increases with vc while t2 >= 0; bisect on vc.
  double lo = -v_lim, hi = v_lim;
  double t1 = 0.0, t2 = 0.0, t3 = 0.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double dist = shape(mid, t1, t2, t3);
    if (t2 < 0.0) {
      // Infeasible cruise: move vc toward the boundary velocities.
      if (mid > 0.5 * (v0 + vg)) hi = mid; else lo = mid;
      continue;
    }
    if (dist < d) lo = mid; else hi = mid;
  }
  const double vc = 0.5 * (lo + hi);
  shape(vc, t1, t2, t3);
  AxisProfile prof(brake.start_position(), brake.start_velocity());
  for (const auto& s : brake.segments()) prof.push(s.duration, s.accel);
  prof.push(t1, vc >= v0 ? a_lim : -a_lim);
  prof.push(std::max(t2, 0.0), 0.0);
  prof.push(t3, vg >= vc ? a_lim : -a_lim);
  return prof;
}

/// Re-solve an axis so that it completes at `duration` (>= its minimum time)
/// by scaling its acceleration limit down. Bisection on the scale factor.
inline AxisProfile stretch_axis_profile(double p0, double v0, double pg, double vg, double a_lim, double v_lim,
                                        double duration) {
  AxisProfile fastest = solve_axis_profile(p0, v0, pg, vg, a_lim, v_lim);
  if (fastest.duration() >= duration - 1e-12) return fastest;
  if (fastest.duration() == 0.0 && std::abs(v0) < 1e-15 && std::abs(vg) < 1e-15) return fastest;

  constexpr double kMinScale = 1e-6;
  AxisProfile slowest = solve_axis_profile(p0, v0, pg, vg, a_lim * kMinScale, v_lim);
  if (slowest.duration() < duration) {
    return axis_profile_with_cruise(p0, v0, pg, vg, a_lim, v_lim, duration);
  }
  double lo = kMinScale, hi = 1.0;
  AxisProfile best = fastest;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    AxisProfile cand = solve_axis_profile(p0, v0, pg, vg, a_lim * mid, v_lim);
    if (cand.duration() > duration) {
      lo = mid;
    } else {
      hi = mid;
      best = std::move(cand);
    }
    if (std::abs(best.duration() - duration) < 1e-12 * std::max(1.0, duration)) break;
  }
  return best;
}

struct PmmPoint {
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 a = Vec3::Zero();
  double t = 0.0;
};

/// Three synchronized axis profiles.
class PmmTrajectory {
 public:
  PmmTrajectory() = default;
  explicit PmmTrajectory(std::array<AxisProfile, 3> axes) : axes_(std::move(axes)) {
    for (const auto& a : axes_) duration_ = std::max(duration_, a.duration());
  }

  double duration() const { return duration_; }
  const AxisProfile& axis(int i) const { return axes_[static_cast<std::size_t>(i)]; }

  PmmPoint sample(double t) const {
    PmmPoint pt;
    pt.t = t;
    for (int i = 0; i < 3; ++i) {
      const auto s = axes_[static_cast<std::size_t>(i)].sample(t);
      pt.p(i) = s.p;
      pt.v(i) = s.v;
      pt.a(i) = s.a;
    }
    return pt;
  }

  /// `count` points at t = t0, t0 + dt, t0 + 2 dt, ...; the returned times
  /// are relative to t0.
  std::vector<PmmPoint> sample_uniform(double dt, int count, double t0 = 0.0) const {
    std::vector<PmmPoint> pts;
    pts.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
      pts.push_back(sample(t0 + k * dt));
      pts.back().t = k * dt;
    }
    return pts;
  }

 private:
  std::array<AxisProfile, 3> axes_;
  double duration_ = 0.0;
};

/// Per-axis limits a_max/sqrt(3), v_max/sqrt(3) bound the norms; all axes are
/// stretched to the slowest one's minimum time.
inline PmmTrajectory synchronize_axes(const Vec3& p0, const Vec3& v0, const Vec3& pg, const Vec3& vg,
                                      const PmmLimits& limits) {
  limits.validate();
  const double a_axis = limits.a_max / std::sqrt(3.0);
  const double v_axis = limits.v_max / std::sqrt(3.0);
  std::array<AxisProfile, 3> fastest;
  double T = 0.0;
  for (int i = 0; i < 3; ++i) {
    fastest[static_cast<std::size_t>(i)] = solve_axis_profile(p0(i), v0(i), pg(i), vg(i), a_axis, v_axis);
    T = std::max(T, fastest[static_cast<std::size_t>(i)].duration());
  }
  std::array<AxisProfile, 3> synced;
  for (int i = 0; i < 3; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    synced[idx] = fastest[idx].duration() >= T - 1e-12
                      ? fastest[idx]
                      : stretch_axis_profile(p0(i), v0(i), pg(i), vg(i), a_axis, v_axis, T);
  }
  return PmmTrajectory(std::move(synced));
}

inline std::vector<PmmPoint> synchronize_axes(const Vec3& p0, const Vec3& v0, const Vec3& pg, const Vec3& vg,
                                              const PmmLimits& limits, double dt, int count) {
  return synchronize_axes(p0, v0, pg, vg, limits).sample_uniform(dt, count);
}

struct ReferencePoint {
  Vec3 p = Vec3::Zero();
  Quat q = Quat::Identity();
  Vec3 v = Vec3::Zero();
  Vec3 w = Vec3::Zero();
  double t = 0.0;

  QuadState state() const { return {p, q, v, w}; }
};

/// Full-state reference over the horizon: points[0..N] and one rotor
/// reference per stage (u_ref[0..N-1]).
struct ReferenceTrajectory {
  std::vector<ReferencePoint> points;
  std::vector<RotorCommand> u_ref;
};

/// Attitude whose body z-axis is along `thrust_dir` with heading `yaw`.
inline Quat attitude_from_thrust(const Vec3& thrust_dir, double yaw) {
  const Vec3 zb = thrust_dir.normalized();
  const Vec3 xc(std::cos(yaw), std::sin(yaw), 0.0);
  Vec3 yb = zb.cross(xc);
  if (yb.norm() < 1e-9) {
    // Thrust along the heading direction; fall back to the lateral axis.
    const Vec3 yc(-std::sin(yaw), std::cos(yaw), 0.0);
    yb = yc - yc.dot(zb) * zb;
  }
  yb.normalize();
  const Vec3 xb = yb.cross(zb);
  Eigen::Matrix3d R;
  R.col(0) = xb;
  R.col(1) = yb;
  R.col(2) = zb;
  return Quat(R).normalized();
}

/// Adds attitude, body rates and rotor references to point-mass samples.
inline ReferenceTrajectory augment_reference(const std::vector<PmmPoint>& pmm, double yaw_ref, const QuadParams& params) {
  if (pmm.empty()) throw std::invalid_argument("augment_reference: empty input");
  const double g = params.gravity.norm();
  ReferenceTrajectory ref;
  ref.points.resize(pmm.size());
  std::vector<double> thrust_acc(pmm.size());
  for (std::size_t k = 0; k < pmm.size(); ++k) {
    Vec3 t_dir = pmm[k].a - params.gravity;
    if (t_dir.norm() < 0.1 * g) t_dir = Vec3(0.0, 0.0, std::max(t_dir.norm(), 1e-9));
    thrust_acc[k] = t_dir.norm();
    auto& r = ref.points[k];
    r.p = pmm[k].p;
    r.v = pmm[k].v;
    r.t = pmm[k].t;
    r.q = attitude_from_thrust(t_dir, yaw_ref);
    if (k > 0 && r.q.coeffs().dot(ref.points[k - 1].q.coeffs()) < 0.0) r.q.coeffs() = -r.q.coeffs();
  }
  for (std::size_t k = 1; k < pmm.size(); ++k) {
    const double dt = pmm[k].t - pmm[k - 1].t;
    if (dt > 0.0) ref.points[k].w = attitude_error(ref.points[k].q, ref.points[k - 1].q) / dt;
  }
  if (pmm.size() > 1) ref.points[0].w = ref.points[1].w;

  const std::size_t stages = pmm.size() > 1 ? pmm.size() - 1 : 1;
  ref.u_ref.reserve(stages);
  for (std::size_t k = 0; k < stages; ++k) {
    ref.u_ref.push_back(RotorCommand::uniform(params.mass * thrust_acc[k] / 4.0));
  }
  return ref;
}

/// Hover at `goal` repeated over the horizon (reference without planning).
inline ReferenceTrajectory hover_reference(const Vec3& goal, int horizon, double dt, double yaw_ref,
                                           const QuadParams& params) {
  std::vector<PmmPoint> pts(static_cast<std::size_t>(horizon + 1));
  for (int k = 0; k <= horizon; ++k) {
    pts[static_cast<std::size_t>(k)].p = goal;
    pts[static_cast<std::size_t>(k)].t = k * dt;
  }
  return augment_reference(pts, yaw_ref, params);
}

/// Minimum-time reference from the current state to (goal, goal_v), sampled
/// at the stage period over N stages and padded with the terminal state.
inline ReferenceTrajectory generate_reference(const QuadState& x, const Vec3& goal, const Vec3& goal_v,
                                              const PmmLimits& limits, int horizon, double dt, double yaw_ref,
                                              const QuadParams& params) {
  if (horizon < 1 || !(dt > 0.0)) throw std::invalid_argument("generate_reference: bad horizon");
  Vec3 v0 = x.v;
  if (v0.norm() > limits.v_max) v0 *= limits.v_max / v0.norm();
  const PmmTrajectory traj = synchronize_axes(x.p, v0, goal, goal_v, limits);
  return augment_reference(traj.sample_uniform(dt, horizon + 1), yaw_ref, params);
}

/// Reference from an existing plan, starting `t0` seconds into it.
inline ReferenceTrajectory plan_reference(const PmmTrajectory& plan, double t0, int horizon, double dt,
                                          double yaw_ref, const QuadParams& params) {
  if (horizon < 1 || !(dt > 0.0)) throw std::invalid_argument("plan_reference: bad horizon");
  return augment_reference(plan.sample_uniform(dt, horizon + 1, t0), yaw_ref, params);
}

}  // namespace rvcnmpc
