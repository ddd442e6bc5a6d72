#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <unsupported/Eigen/AutoDiff>

#include "rvcnmpc/pmm_reference.hpp"
#include "rvcnmpc/qp_solver.hpp"
#include "rvcnmpc/quad_dynamics.hpp"
#include "rvcnmpc/rvc.hpp"

namespace rvcnmpc {

using Mat12 = Eigen::Matrix<double, 12, 12>;
using Mat12x4 = Eigen::Matrix<double, 12, 4>;
using Vec12 = Eigen::Matrix<double, 12, 1>;

/// Diagonal weights of the tracking cost; state blocks are ordered
/// [position, attitude tangent, velocity, body rate].
struct NmpcWeights {
  Vec12 Q = (Vec12() << 200, 200, 200, 50, 50, 50, 10, 10, 10, 1, 1, 1).finished();
  Vec4 R = Vec4::Constant(0.1);
  double Z = 1e5;

  void validate() const {
    if ((Q.array() < 0.0).any() || (R.array() < 0.0).any()) throw ConfigError("nmpc: weights must be >= 0");
    if (!(Z > 0.0)) throw ConfigError("nmpc: slack weight must be positive");
  }
};

struct NmpcConfig {
  int horizon = 20;
  double dt = 0.05;
  double control_period = 0.01;  // spacing of consecutive control_step calls
  NmpcWeights weights;
  QpSettings qp;

  void validate(double tau) const {
    if (horizon < 2) throw ConfigError("nmpc: horizon must be >= 2");
    if (!(dt > 0.0)) throw ConfigError("nmpc: dt must be positive");
    if (horizon * dt > tau + 1e-12) throw ConfigError("nmpc: horizon length exceeds tau");
    if (!(control_period > 0.0)) throw ConfigError("nmpc: control period must be positive");
    weights.validate();
  }
};

struct StageJacobian {
  Mat12 A;    // d x+ / d x (tangent coordinates)
  Mat12x4 B;  // d x+ / d u
  QuadState next;
};

/// Jacobians of one RK4 step in the 12-dimensional error coordinates
/// (multiplicative attitude error), by forward-mode automatic differentiation.
inline StageJacobian linearize(const QuadState& x, const RotorCommand& u, double dt, const QuadParams& params) {
  using Deriv = Eigen::Matrix<double, 16, 1>;
  using AD = Eigen::AutoDiffScalar<Deriv>;

  RawState<AD> xa;
  RawInput<AD> ua;
  const Vec4 q(x.q.w(), x.q.x(), x.q.y(), x.q.z());
  Eigen::Matrix4d Lq;
  Lq << q(0), -q(1), -q(2), -q(3),
        q(1), q(0), -q(3), q(2),
        q(2), q(3), q(0), -q(1),
        q(3), -q(2), q(1), q(0);
  for (int i = 0; i < 3; ++i) {
    xa(i) = AD(x.p(i), 16, i);
    xa(7 + i) = AD(x.v(i), 16, 6 + i);
    xa(10 + i) = AD(x.w(i), 16, 9 + i);
  }
  for (int j = 0; j < 4; ++j) {
    Deriv der = Deriv::Zero();
    for (int i = 0; i < 3; ++i) der(3 + i) = 0.5 * Lq(j, i + 1);
    xa(3 + j) = AD(q(j), der);
    ua(j) = AD(u.f(j), 16, 12 + j);
  }

  const RawState<AD> out = raw_rk4<AD>(xa, ua, dt, params);

  Eigen::Matrix<double, 13, 16> D;
  RawState<double> val;
  for (int i = 0; i < 13; ++i) {
    val(i) = out(i).value();
    D.row(i) = out(i).derivatives().transpose();
  }
  const Vec4 qn = val.segment<4>(3);
  const double norm = qn.norm();
  const Vec4 qh = qn / norm;
  // Vector part of conj(qh) * (.) as a 3x4 map.
  Eigen::Matrix<double, 3, 4> Vc;
  Vc << -qh(1), qh(0), qh(3), -qh(2),
        -qh(2), -qh(3), qh(0), qh(1),
        -qh(3), qh(2), -qh(1), qh(0);

  Eigen::Matrix<double, 12, 16> Jt;
  Jt.block<3, 16>(0, 0) = D.block<3, 16>(0, 0);
  Jt.block<3, 16>(3, 0) = (2.0 / norm) * Vc * D.block<4, 16>(3, 0);
  Jt.block<6, 16>(6, 0) = D.block<6, 16>(7, 0);

  StageJacobian jac;
  jac.A = Jt.leftCols<12>();
  jac.B = Jt.rightCols<4>();
  jac.next = from_raw(val);
  jac.next.q.normalize();
  return jac;
}

/// Per-stage reciprocal velocity constraints: schedule[m][k-1] for k = 1..N.
using StageSchedule = std::vector<std::vector<StageConstraint>>;

/// Metadata of a soft velocity row of the QP.
struct RvcRow {
  int neighbor_slot;
  int stage;  // 1..N
  Vec3 A;
  double b;
};

/// Condensed QP over input deltas around a nominal rollout.
struct NmpcQp {
  QpProblem qp;
  std::vector<QuadState> nominal_states;   // x_0..x_N
  std::vector<RotorCommand> nominal_inputs;  // u_0..u_{N-1}
  Eigen::MatrixXd S;                       // 12N x 4N state sensitivities
  int first_rvc_row = 0;
  std::vector<RvcRow> rvc_rows;
};

struct NmpcSolution {
  std::vector<QuadState> states;
  std::vector<RotorCommand> inputs;
  Eigen::MatrixXd slacks;  // M x N
  double kkt_residual = 0.0;
  double solve_time = 0.0;
  double plan_age = 0.0;  // time since inputs[0] became the current stage
  int qp_iterations = 0;
  bool converged = false;
  bool valid = false;

  bool empty() const { return inputs.empty(); }
};

struct ControlOutput {
  RotorCommand command;
  double collective = 0.0;
  Vec3 body_rate = Vec3::Zero();
  bool degraded = false;
  int active_constraints = 0;
};

namespace detail {

inline RotorCommand clamp_rotors(const RotorCommand& u, const QuadParams& P) {
  RotorCommand c(u.f.cwiseMax(P.rotor_thrust_min).cwiseMin(P.rotor_thrust_max));
  const double sum = c.collective();
  if (sum > P.collective_max) {
    c.f *= P.collective_max / sum;
  } else if (sum < P.collective_min) {
    // Raise the lowest rotors first so the per-rotor limits stay satisfied.
    double deficit = P.collective_min - sum;
    for (int pass = 0; pass < 4 && deficit > 1e-15; ++pass) {
      int free = 0;
      for (int i = 0; i < 4; ++i) free += c.f(i) < P.rotor_thrust_max ? 1 : 0;
      if (free == 0) break;
      const double share = deficit / free;
      for (int i = 0; i < 4; ++i) {
        if (c.f(i) >= P.rotor_thrust_max) continue;
        const double add = std::min(share, P.rotor_thrust_max - c.f(i));
        c.f(i) += add;
        deficit -= add;
      }
    }
  }
  return c;
}

}  // namespace detail

/// Nominal inputs for the next linearization: the previous plan shifted by
/// the elapsed control period, or the reference inputs.
inline std::vector<RotorCommand> shifted_inputs(const NmpcSolution& prev, const ReferenceTrajectory& ref,
                                                const NmpcConfig& cfg, const QuadParams& params) {
  const auto N = static_cast<std::size_t>(cfg.horizon);
  std::vector<RotorCommand> u(N);
  if (prev.valid && prev.inputs.size() == N) {
    const auto shift = static_cast<std::size_t>(std::lround(cfg.control_period / cfg.dt));
    for (std::size_t k = 0; k < N; ++k) u[k] = prev.inputs[std::min(k + shift, N - 1)];
  } else {
    for (std::size_t k = 0; k < N; ++k) u[k] = ref.u_ref[std::min(k, ref.u_ref.size() - 1)];
  }
  for (auto& c : u) c = detail::clamp_rotors(c, params);
  return u;
}

inline NmpcQp build_qp(const QuadState& x0, const ReferenceTrajectory& ref, const StageSchedule& rvc,
                       const std::vector<RotorCommand>& nominal, const NmpcConfig& cfg, const QuadParams& params) {
  const int N = cfg.horizon;
  if (static_cast<int>(ref.points.size()) < N + 1 || static_cast<int>(ref.u_ref.size()) < N)
    throw ConfigError("build_qp: reference shorter than the horizon");
  if (static_cast<int>(nominal.size()) != N) throw ConfigError("build_qp: nominal input count mismatch");
  for (const auto& row : rvc)
    if (static_cast<int>(row.size()) != N) throw ConfigError("build_qp: constraint schedule length mismatch");

  NmpcQp out;
  out.nominal_inputs = nominal;
  out.nominal_states.resize(static_cast<std::size_t>(N + 1));
  out.nominal_states[0] = x0;
  std::vector<StageJacobian> jac(static_cast<std::size_t>(N));
  for (int k = 0; k < N; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    jac[ks] = linearize(out.nominal_states[ks], nominal[ks], cfg.dt, params);
    out.nominal_states[ks + 1] = jac[ks].next;
  }

  const int nu = 4 * N;
  Eigen::MatrixXd& S = out.S;
  S.setZero(12 * N, nu);
  for (int k = 1; k <= N; ++k) {
    const auto& J = jac[static_cast<std::size_t>(k - 1)];
    if (k > 1) S.block(12 * (k - 1), 0, 12, 4 * (k - 1)).noalias() = J.A * S.block(12 * (k - 2), 0, 12, 4 * (k - 1));
    S.block<12, 4>(12 * (k - 1), 4 * (k - 1)) = J.B;
  }

  const Vec12 sqrtQ = cfg.weights.Q.cwiseSqrt();
  Eigen::MatrixXd M(12 * N, nu);
  Eigen::VectorXd e(12 * N);
  for (int k = 1; k <= N; ++k) {
    const QuadState& xk = out.nominal_states[static_cast<std::size_t>(k)];
    const ReferencePoint& rk = ref.points[static_cast<std::size_t>(k)];
    M.middleRows(12 * (k - 1), 12) = sqrtQ.asDiagonal() * S.middleRows(12 * (k - 1), 12);
    // Attitude error 2 vec(q_ref^-1 q exp(d/2)) changes with d through
    // w_e I + [v_e]x of the current error quaternion.
    Quat qe = rk.q.conjugate() * xk.q;
    if (qe.w() < 0.0) qe.coeffs() = -qe.coeffs();
    Eigen::Matrix3d W = qe.w() * Eigen::Matrix3d::Identity();
    W(0, 1) = -qe.z();
    W(0, 2) = qe.y();
    W(1, 0) = qe.z();
    W(1, 2) = -qe.x();
    W(2, 0) = -qe.y();
    W(2, 1) = qe.x();
    M.middleRows(12 * (k - 1) + 3, 3) = W * M.middleRows(12 * (k - 1) + 3, 3).eval();
    e.segment<12>(12 * (k - 1)) = sqrtQ.cwiseProduct(state_error(xk, rk.state()));
  }

  // Row layout: collective (2N), body rates (6N), soft velocity rows.
  int n_rvc = 0;
  for (const auto& row : rvc)
    for (const auto& sc : row) n_rvc += sc.active() ? 1 : 0;

  QpProblem& qp = out.qp;
  qp.resize(nu, 8 * N + n_rvc);
  qp.H.noalias() = M.transpose() * M;
  qp.g.noalias() = M.transpose() * e;
  for (int k = 0; k < N; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const Vec4 du_ref = nominal[ks].f - ref.u_ref[ks].f;
    for (int i = 0; i < 4; ++i) {
      qp.H(4 * k + i, 4 * k + i) += cfg.weights.R(i);
      qp.g(4 * k + i) += cfg.weights.R(i) * du_ref(i);
      qp.lower(4 * k + i) = params.rotor_thrust_min - nominal[ks].f(i);
      qp.upper(4 * k + i) = params.rotor_thrust_max - nominal[ks].f(i);
    }
    const double sum = nominal[ks].collective();
    qp.C.block<1, 4>(2 * k, 4 * k).setOnes();
    qp.d(2 * k) = params.collective_min - sum;
    qp.C.block<1, 4>(2 * k + 1, 4 * k).setConstant(-1.0);
    qp.d(2 * k + 1) = sum - params.collective_max;
  }
  int row = 2 * N;
  for (int k = 1; k <= N; ++k) {
    const Vec3& w = out.nominal_states[static_cast<std::size_t>(k)].w;
    for (int a = 0; a < 3; ++a) {
      const auto sens = S.row(12 * (k - 1) + 9 + a).head(4 * k);
      qp.C.row(row).head(4 * k) = sens;
      qp.d(row++) = params.rate_min(a) - w(a);
      qp.C.row(row).head(4 * k) = -sens;
      qp.d(row++) = w(a) - params.rate_max(a);
    }
  }
  out.first_rvc_row = row;
  for (std::size_t m = 0; m < rvc.size(); ++m) {
    for (int k = 1; k <= N; ++k) {
      const StageConstraint& sc = rvc[m][static_cast<std::size_t>(k - 1)];
      if (!sc.active()) continue;
      const Vec3& v = out.nominal_states[static_cast<std::size_t>(k)].v;
      qp.C.row(row).head(4 * k) = sc.A.transpose() * S.block(12 * (k - 1) + 6, 0, 3, 4 * k);
      qp.d(row) = sc.b - sc.A.dot(v);
      qp.soft(row) = cfg.weights.Z;
      out.rvc_rows.push_back({static_cast<int>(m), k, sc.A, sc.b});
      ++row;
    }
  }
  return out;
}

/// One real-time iteration: linearize around the shifted previous plan,
/// solve the condensed QP, emit the first stage.
inline std::pair<ControlOutput, NmpcSolution> control_step(const QuadState& x, const ReferenceTrajectory& ref,
                                                           const StageSchedule& rvc, const NmpcSolution& prev,
                                                           const NmpcConfig& cfg, const QuadParams& params,
                                                           DualActiveSetSolver* solver = nullptr) {
  const auto t_start = std::chrono::steady_clock::now();
  const int N = cfg.horizon;
  const std::vector<RotorCommand> nominal = shifted_inputs(prev, ref, cfg, params);
  const NmpcQp built = build_qp(x, ref, rvc, nominal, cfg, params);

  DualActiveSetSolver local(cfg.qp);
  DualActiveSetSolver& qp_solver = solver ? *solver : local;
  const QpSolution qs = qp_solver.solve(built.qp);

  NmpcSolution sol;
  sol.converged = qs.converged;
  sol.kkt_residual = qs.kkt_residual;
  sol.qp_iterations = qs.iterations;
  sol.slacks = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(rvc.size()), N);

  ControlOutput out;
  if (qs.converged) {
    sol.inputs.resize(static_cast<std::size_t>(N));
    for (int k = 0; k < N; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      sol.inputs[ks] = detail::clamp_rotors(RotorCommand(nominal[ks].f + qs.x.segment<4>(4 * k)), params);
    }
    for (std::size_t r = 0; r < built.rvc_rows.size(); ++r) {
      const auto& info = built.rvc_rows[r];
      sol.slacks(info.neighbor_slot, info.stage - 1) = qs.slack(built.first_rvc_row + static_cast<int>(r));
    }
    for (std::size_t r = 0; r < built.rvc_rows.size(); ++r)
      out.active_constraints += built.rvc_rows[r].stage == 1 ? 1 : 0;
    sol.valid = true;
  } else {
    // Hold the last plan, advancing one stage per elapsed dt.
    sol.inputs = nominal;
    sol.valid = prev.valid;
    const double shifted = static_cast<double>(std::lround(cfg.control_period / cfg.dt)) * cfg.dt;
    sol.plan_age = std::max(0.0, prev.plan_age + cfg.control_period - shifted);
    if (sol.plan_age >= cfg.dt - 1e-12) {
      std::rotate(sol.inputs.begin(), sol.inputs.begin() + 1, sol.inputs.end());
      sol.inputs.back() = sol.inputs[sol.inputs.size() - 2];
      sol.plan_age -= cfg.dt;
    }
    out.degraded = true;
  }

  sol.states.resize(static_cast<std::size_t>(N + 1));
  sol.states[0] = x;
  for (int k = 0; k < N; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    sol.states[ks + 1] = rk4_step(sol.states[ks], sol.inputs[ks], cfg.dt, params);
  }

  out.command = sol.inputs[0];
  out.collective = out.command.collective();
  out.body_rate = sol.states[1].w.cwiseMax(params.rate_min).cwiseMin(params.rate_max);
  sol.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return {out, std::move(sol)};
}

/// Stateful wrapper holding the warm start between calls. Not reentrant.
class NmpcController {
 public:
  NmpcController(NmpcConfig cfg, QuadParams params) : cfg_(std::move(cfg)), params_(std::move(params)), solver_(cfg_.qp) {
    params_.validate();
  }

  ControlOutput control_step(const QuadState& x, const ReferenceTrajectory& ref, const StageSchedule& rvc) {
    auto [out, sol] = rvcnmpc::control_step(x, ref, rvc, prev_, cfg_, params_, &solver_);
    prev_ = std::move(sol);
    return out;
  }

  void reset() { prev_ = NmpcSolution{}; }

  const NmpcSolution& last_solution() const { return prev_; }
  const NmpcConfig& config() const { return cfg_; }
  const QuadParams& params() const { return params_; }

 private:
  NmpcConfig cfg_;
  QuadParams params_;
  DualActiveSetSolver solver_;
  NmpcSolution prev_;
};

}  // namespace rvcnmpc
