#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace rvcnmpc {

using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Quat = Eigen::Quaterniond;

inline constexpr double kGravity = 9.81;

class InvalidStateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Physical and actuator parameters of one quadrotor.
///
/// Rotors are in X configuration, ordered front-right, back-left, front-left,
/// back-right. Drag is linear in body-frame velocity.
struct QuadParams {
  double mass = 1.0;
  Vec3 inertia{0.007, 0.007, 0.012};  // diagonal of J
  double arm_length = 0.15;
  double torque_constant = 0.016;
  Vec3 drag{0.30, 0.30, 0.15};
  Vec3 gravity{0.0, 0.0, -kGravity};
  double rotor_thrust_min = 0.0;
  double rotor_thrust_max = 12.5;
  double collective_min = 0.5;
  double collective_max = 50.0;
  Vec3 rate_min{-10.0, -10.0, -4.0};
  Vec3 rate_max{10.0, 10.0, 4.0};

  double hover_rotor_thrust() const { return mass * gravity.norm() / 4.0; }

  void validate() const {
    if (!(mass > 0.0)) throw ConfigError("quad: mass must be positive");
    if (!(inertia.minCoeff() > 0.0)) throw ConfigError("quad: inertia must be positive");
    if (!(arm_length > 0.0)) throw ConfigError("quad: arm length must be positive");
    if (!(rotor_thrust_min >= 0.0 && rotor_thrust_min < rotor_thrust_max))
      throw ConfigError("quad: need 0 <= f_min < f_max");
    if (!(collective_min <= collective_max && collective_max <= 4.0 * rotor_thrust_max))
      throw ConfigError("quad: need F_min <= F_max <= 4 f_max");
    if (!(rate_min.array() < rate_max.array()).all())
      throw ConfigError("quad: body-rate bounds inverted");
    if (!(drag.minCoeff() >= 0.0)) throw ConfigError("quad: drag must be non-negative");
  }
};

struct QuadState {
  Vec3 p = Vec3::Zero();
  Quat q = Quat::Identity();  // world-from-body, Hamilton
  Vec3 v = Vec3::Zero();
  Vec3 w = Vec3::Zero();  // body frame

  bool finite() const {
    return p.allFinite() && q.coeffs().allFinite() && v.allFinite() && w.allFinite();
  }
};

/// Single-rotor thrusts in newtons.
struct RotorCommand {
  Vec4 f = Vec4::Zero();

  RotorCommand() = default;
  explicit RotorCommand(const Vec4& thrusts) : f(thrusts) {}
  static RotorCommand uniform(double each) { return RotorCommand(Vec4::Constant(each)); }

  double collective() const { return f.sum(); }
};

struct StateDerivative {
  Vec3 p_dot;
  Vec4 q_dot;  // (w, x, y, z)
  Vec3 v_dot;
  Vec3 w_dot;
};

// Raw 13-element state layout used by the templated model:
// [p(3), q(w,x,y,z)(4), v(3), w(3)].
template <typename S>
using RawState = Eigen::Matrix<S, 13, 1>;
template <typename S>
using RawInput = Eigen::Matrix<S, 4, 1>;

namespace detail {

// Hamilton product, scalar-first.
template <typename S>
Eigen::Matrix<S, 4, 1> quat_mul(const Eigen::Matrix<S, 4, 1>& a, const Eigen::Matrix<S, 4, 1>& b) {
  Eigen::Matrix<S, 4, 1> r;
  r(0) = a(0) * b(0) - a(1) * b(1) - a(2) * b(2) - a(3) * b(3);
  r(1) = a(0) * b(1) + a(1) * b(0) + a(2) * b(3) - a(3) * b(2);
  r(2) = a(0) * b(2) - a(1) * b(3) + a(2) * b(0) + a(3) * b(1);
  r(3) = a(0) * b(3) + a(1) * b(2) - a(2) * b(1) + a(3) * b(0);
  return r;
}

template <typename S>
Eigen::Matrix<S, 3, 3> quat_to_rot(const Eigen::Matrix<S, 4, 1>& q) {
  const S w = q(0), x = q(1), y = q(2), z = q(3);
  Eigen::Matrix<S, 3, 3> R;
  R(0, 0) = S(1) - S(2) * (y * y + z * z);
  R(0, 1) = S(2) * (x * y - w * z);
  R(0, 2) = S(2) * (x * z + w * y);
  R(1, 0) = S(2) * (x * y + w * z);
  R(1, 1) = S(1) - S(2) * (x * x + z * z);
  R(1, 2) = S(2) * (y * z - w * x);
  R(2, 0) = S(2) * (x * z - w * y);
  R(2, 1) = S(2) * (y * z + w * x);
  R(2, 2) = S(1) - S(2) * (x * x + y * y);
  return R;
}

inline Vec4 quat_coeffs_wxyz(const Quat& q) { return Vec4(q.w(), q.x(), q.y(), q.z()); }
inline Quat quat_from_wxyz(const Vec4& c) { return Quat(c(0), c(1), c(2), c(3)); }

}  // namespace detail

/// Mixing matrix mapping rotor thrusts to body torques.
inline Eigen::Matrix<double, 3, 4> mixing_matrix(const QuadParams& params) {
  const double a = params.arm_length / std::sqrt(2.0);
  const double k = params.torque_constant;
  Eigen::Matrix<double, 3, 4> M;
  M << -a, a, -a, a,
       -a, a, a, -a,
       -k, -k, k, k;
  return M;
}

/// Collective thrust T and the body-frame thrust vector (0, 0, T).
inline std::pair<double, Vec3> collective_thrust(const RotorCommand& cmd) {
  const double T = cmd.f.sum();
  return {T, Vec3(0.0, 0.0, T)};
}

inline Vec3 body_torque(const RotorCommand& cmd, const QuadParams& params) {
  return mixing_matrix(params) * cmd.f;
}

inline Vec3 drag_force(const Vec3& v_body, const Vec3& drag_coeffs) {
  return -drag_coeffs.cwiseProduct(v_body);
}

/// Continuous-time dynamics on the raw state; templated so it can be
/// evaluated with automatic-differentiation scalars.
template <typename S>
RawState<S> raw_derivative(const RawState<S>& x, const RawInput<S>& f, const QuadParams& P) {
  const Eigen::Matrix<S, 4, 1> q = x.template segment<4>(3);
  const Eigen::Matrix<S, 3, 1> v = x.template segment<3>(7);
  const Eigen::Matrix<S, 3, 1> w = x.template segment<3>(10);
  const Eigen::Matrix<S, 3, 3> R = detail::quat_to_rot(q);

  const Eigen::Matrix<S, 3, 1> v_body = R.transpose() * v;
  Eigen::Matrix<S, 3, 1> force;
  force(0) = -S(P.drag(0)) * v_body(0);
  force(1) = -S(P.drag(1)) * v_body(1);
  force(2) = -S(P.drag(2)) * v_body(2) + f.sum();

  const double a = P.arm_length / std::sqrt(2.0);
  const double k = P.torque_constant;
  Eigen::Matrix<S, 3, 1> tau;
  tau(0) = a * (-f(0) + f(1) - f(2) + f(3));
  tau(1) = a * (-f(0) + f(1) + f(2) - f(3));
  tau(2) = k * (-f(0) - f(1) + f(2) + f(3));

  Eigen::Matrix<S, 3, 1> Jw;
  Jw << S(P.inertia(0)) * w(0), S(P.inertia(1)) * w(1), S(P.inertia(2)) * w(2);
  const Eigen::Matrix<S, 3, 1> gyro = tau - w.cross(Jw);

  Eigen::Matrix<S, 4, 1> wq;
  wq << S(0), w(0), w(1), w(2);

  RawState<S> dx;
  dx.template segment<3>(0) = v;
  dx.template segment<4>(3) = S(0.5) * detail::quat_mul(q, wq);
  dx.template segment<3>(7) = R * force / S(P.mass) + P.gravity.template cast<S>();
  dx(10) = gyro(0) / S(P.inertia(0));
  dx(11) = gyro(1) / S(P.inertia(1));
  dx(12) = gyro(2) / S(P.inertia(2));
  return dx;
}

/// One classical RK4 step with zero-order-hold input; no renormalization.
template <typename S>
RawState<S> raw_rk4(const RawState<S>& x, const RawInput<S>& f, double dt, const QuadParams& P) {
  const S h(dt);
  const RawState<S> k1 = raw_derivative<S>(x, f, P);
  const RawState<S> k2 = raw_derivative<S>(RawState<S>(x + S(0.5) * h * k1), f, P);
  const RawState<S> k3 = raw_derivative<S>(RawState<S>(x + S(0.5) * h * k2), f, P);
  const RawState<S> k4 = raw_derivative<S>(RawState<S>(x + h * k3), f, P);
  return x + h / S(6) * (k1 + S(2) * k2 + S(2) * k3 + k4);
}

inline RawState<double> to_raw(const QuadState& x) {
  RawState<double> r;
  r << x.p, x.q.w(), x.q.x(), x.q.y(), x.q.z(), x.v, x.w;
  return r;
}

inline QuadState from_raw(const RawState<double>& r) {
  QuadState x;
  x.p = r.segment<3>(0);
  x.q = Quat(r(3), r(4), r(5), r(6));
  x.v = r.segment<3>(7);
  x.w = r.segment<3>(10);
  return x;
}

inline void require_unit_quaternion(const Quat& q, double tol = 1e-6) {
  if (!q.coeffs().allFinite() || std::abs(q.norm() - 1.0) > tol)
    throw InvalidStateError("quaternion is not unit norm (|q| = " + std::to_string(q.norm()) + ")");
}

inline StateDerivative derivative(const QuadState& x, const RotorCommand& cmd, const QuadParams& params) {
  require_unit_quaternion(x.q);
  const RawState<double> d = raw_derivative<double>(to_raw(x), cmd.f, params);
  return {d.segment<3>(0), d.segment<4>(3), d.segment<3>(7), d.segment<3>(10)};
}

inline QuadState rk4_step(const QuadState& x, const RotorCommand& cmd, double dt, const QuadParams& params) {
  if (!(dt > 0.0)) throw std::invalid_argument("rk4_step: dt must be positive");
  require_unit_quaternion(x.q);
  QuadState next = from_raw(raw_rk4<double>(to_raw(x), cmd.f, dt, params));
  next.q.normalize();
  return next;
}

// Local tangent of the attitude: q = q_ref * exp(0.5 * delta), delta in R^3.
inline Vec3 attitude_error(const Quat& q, const Quat& q_ref) {
  Quat e = q_ref.conjugate() * q;
  if (e.w() < 0.0) e.coeffs() = -e.coeffs();
  return 2.0 * e.vec();
}

// Inverse of attitude_error: the unit quaternion with vector part delta/2.
inline Quat quat_from_error(const Vec3& delta) {
  const Vec3 half = 0.5 * delta;
  const double s = half.squaredNorm();
  if (s >= 1.0) return Quat(0.0, half.x(), half.y(), half.z()).normalized();
  return Quat(std::sqrt(1.0 - s), half.x(), half.y(), half.z());
}

/// 12-dimensional error [dp, dtheta, dv, dw] of x relative to ref.
inline Eigen::Matrix<double, 12, 1> state_error(const QuadState& x, const QuadState& ref) {
  Eigen::Matrix<double, 12, 1> e;
  e << x.p - ref.p, attitude_error(x.q, ref.q), x.v - ref.v, x.w - ref.w;
  return e;
}

inline QuadState retract(const QuadState& x, const Eigen::Matrix<double, 12, 1>& delta) {
  QuadState r;
  r.p = x.p + delta.segment<3>(0);
  r.q = (x.q * quat_from_error(delta.segment<3>(3))).normalized();
  r.v = x.v + delta.segment<3>(6);
  r.w = x.w + delta.segment<3>(9);
  return r;
}

}  // namespace rvcnmpc
