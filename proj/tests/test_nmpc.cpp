#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "rvcnmpc/nmpc.hpp"

using namespace rvcnmpc;

namespace {

QuadState random_state(std::mt19937& rng) {
  std::normal_distribution<double> N(0.0, 1.0);
  QuadState x;
  x.p = Vec3(N(rng), N(rng), N(rng));
  x.q = Quat(1.0 + 0.3 * N(rng), 0.3 * N(rng), 0.3 * N(rng), 0.3 * N(rng)).normalized();
  x.v = 3.0 * Vec3(N(rng), N(rng), N(rng));
  x.w = Vec3(N(rng), N(rng), 0.5 * N(rng));
  return x;
}

ReferenceTrajectory level_line(const Vec3& p0, const Vec3& vel, int N, double dt, const QuadParams& params) {
  std::vector<PmmPoint> pts(static_cast<std::size_t>(N + 1));
  for (int k = 0; k <= N; ++k) {
    auto& pt = pts[static_cast<std::size_t>(k)];
    pt.t = k * dt;
    pt.p = p0 + vel * pt.t;
    pt.v = vel;
  }
  return augment_reference(pts, 0.0, params);
}

double total_violation(const NmpcSolution& sol, const Vec3& A, double b) {
  double sum = 0.0;
  for (std::size_t k = 1; k < sol.states.size(); ++k) {
    const double g = b - A.dot(sol.states[k].v);
    if (g > 0) sum += g * g;
  }
  return sum;
}

}  // namespace

TEST(Linearize, HoverPositionVelocityBlock) {
  QuadParams p;
  p.drag.setZero();
  const auto jac = linearize(QuadState{}, RotorCommand::uniform(p.hover_rotor_thrust()), 0.05, p);
  EXPECT_LT((jac.A.block<3, 3>(0, 6) - 0.05 * Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Linearize, MatchesCentralDifferences) {
  std::mt19937 rng(7);
  const QuadParams params;
  std::uniform_real_distribution<double> U(1.0, 10.0);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const QuadState x = random_state(rng);
    const RotorCommand u(Vec4(U(rng), U(rng), U(rng), U(rng)));
    const auto jac = linearize(x, u, 0.05, params);
    const QuadState nominal = rk4_step(x, u, 0.05, params);
    EXPECT_LT((jac.next.p - nominal.p).norm(), 1e-12);

    Eigen::Matrix<double, 12, 16> fd;
    for (int i = 0; i < 12; ++i) {
      Vec12 d = Vec12::Zero();
      d(i) = h;
      const auto plus = state_error(rk4_step(retract(x, d), u, 0.05, params), nominal);
      const auto minus = state_error(rk4_step(retract(x, -d), u, 0.05, params), nominal);
      fd.col(i) = (plus - minus) / (2 * h);
    }
    for (int j = 0; j < 4; ++j) {
      RotorCommand up = u, um = u;
      up.f(j) += h;
      um.f(j) -= h;
      fd.col(12 + j) = (state_error(rk4_step(x, up, 0.05, params), nominal) -
                        state_error(rk4_step(x, um, 0.05, params), nominal)) / (2 * h);
    }
    Eigen::Matrix<double, 12, 16> ad;
    ad << jac.A, jac.B;
    for (int r = 0; r < 12; ++r)
      for (int c = 0; c < 16; ++c)
        ASSERT_LE(std::abs(ad(r, c) - fd(r, c)), 1e-4 * std::abs(fd(r, c)) + 1e-7) << r << ',' << c;
  }
}

TEST(Linearize, ApproachesIdentityForSmallSteps) {
  std::mt19937 rng(9);
  const QuadParams params;
  const QuadState x = random_state(rng);
  const auto jac = linearize(x, RotorCommand::uniform(3.0), 1e-5, params);
  EXPECT_LT((jac.A - Mat12::Identity()).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(BuildQp, InequalityCountWithoutNeighbors) {
  NmpcConfig cfg;
  const QuadParams params;
  const auto ref = hover_reference(Vec3::Zero(), cfg.horizon, cfg.dt, 0.0, params);
  const std::vector<RotorCommand> nominal(static_cast<std::size_t>(cfg.horizon), ref.u_ref[0]);
  const NmpcQp built = build_qp(QuadState{}, ref, {}, nominal, cfg, params);
  EXPECT_EQ(built.qp.num_slacks(), 0);
  EXPECT_EQ(built.qp.inequality_count(), cfg.horizon * (2 * 4 + 2 + 2 * 3));
}

TEST(BuildQp, ZeroDeltaOnReference) {
  NmpcConfig cfg;
  const QuadParams params;
  const auto ref = hover_reference(Vec3(1, 2, 3), cfg.horizon, cfg.dt, 0.0, params);
  std::vector<RotorCommand> nominal(ref.u_ref.begin(), ref.u_ref.end());
  const NmpcQp built = build_qp(ref.points[0].state(), ref, {}, nominal, cfg, params);
  const auto sol = solve_qp(built.qp);
  ASSERT_TRUE(sol.converged);
  EXPECT_LT(sol.x.norm(), 1e-9);
}

TEST(BuildQp, RepeatsConstraintRowsOverActiveStages) {
  NmpcConfig cfg;
  const QuadParams params;
  const auto ref = level_line(Vec3::Zero(), Vec3(2, 0, 0), cfg.horizon, cfg.dt, params);
  TimedHalfPlane hp;
  hp.A = Vec3(-0.5, std::sqrt(3.0) / 2, 0);
  hp.b = 0.0;
  hp.t_v = 0.42;
  const StageSchedule sched = schedule_constraints({hp}, stage_times(cfg.horizon, cfg.dt));
  const std::vector<RotorCommand> nominal(ref.u_ref.begin(), ref.u_ref.end());
  const NmpcQp built = build_qp(ref.points[0].state(), ref, sched, nominal, cfg, params);
  ASSERT_EQ(built.rvc_rows.size(), 8u);  // t_k <= 0.42 for k = 1..8
  for (const auto& row : built.rvc_rows) {
    EXPECT_EQ(row.A, hp.A);
    EXPECT_EQ(row.b, hp.b);
  }
  EXPECT_EQ(built.qp.num_slacks(), 8);
}

TEST(BuildQp, RejectsShortReference) {
  NmpcConfig cfg;
  const QuadParams params;
  const auto ref = hover_reference(Vec3::Zero(), 5, cfg.dt, 0.0, params);
  const std::vector<RotorCommand> nominal(static_cast<std::size_t>(cfg.horizon), ref.u_ref[0]);
  EXPECT_THROW(build_qp(QuadState{}, ref, {}, nominal, cfg, params), ConfigError);
}

TEST(ControlStep, HoverFixedPoint) {
  NmpcController ctrl(NmpcConfig{}, QuadParams{});
  QuadState x;
  x.p = Vec3(0, 0, 1);
  const auto ref = hover_reference(x.p, 20, 0.05, 0.0, ctrl.params());
  const ControlOutput out = ctrl.control_step(x, ref, {});
  EXPECT_LT((out.command.f - Vec4::Constant(ctrl.params().hover_rotor_thrust())).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT(out.body_rate.norm(), 1e-6);
  EXPECT_FALSE(out.degraded);
}

TEST(ControlStep, PositionOffsetTiltsTowardGoal) {
  NmpcController ctrl(NmpcConfig{}, QuadParams{});
  const auto ref = hover_reference(Vec3(2, 0, 1), 20, 0.05, 0.0, ctrl.params());
  QuadState x;
  x.p = Vec3(0, 0, 1);
  const ControlOutput out = ctrl.control_step(x, ref, {});
  EXPECT_GT(out.body_rate.y(), 0.0);
  const auto& sol = ctrl.last_solution();
  for (int k = 1; k <= 3; ++k) EXPECT_GT(sol.states[static_cast<std::size_t>(k)].w.y(), 0.0) << k;
  EXPECT_NEAR(out.body_rate.x(), 0.0, 1e-6);
}

TEST(ControlStep, HeadOnConstraintSlackShrinksWithZ) {
  const QuadParams params;
  const Vec3 A(-0.5, std::sqrt(3.0) / 2, 0);
  QuadState x;
  x.p = Vec3(0, 0, 1);
  double prev_violation = std::numeric_limits<double>::infinity();
  for (const double Z : {1e2, 1e3, 1e4, 1e5}) {
    NmpcConfig cfg;
    cfg.weights.Z = Z;
    const auto ref = level_line(x.p, Vec3(2, 0, 0), cfg.horizon, cfg.dt, params);
    TimedHalfPlane hp;
    hp.A = A;
    hp.b = 0.0;
    hp.t_v = 8.0;
    const StageSchedule sched = schedule_constraints({hp}, stage_times(cfg.horizon, cfg.dt));
    const auto [out, sol] = control_step(x, ref, sched, NmpcSolution{}, cfg, params);
    ASSERT_TRUE(sol.converged);
    const double viol = total_violation(sol, A, 0.0);
    EXPECT_LE(viol, prev_violation + 1e-12) << "Z=" << Z;
    prev_violation = viol;
    EXPECT_GE(sol.slacks.minCoeff(), 0.0);
    if (Z >= 1e4) EXPECT_LE(sol.slacks.maxCoeff(), 0.1 * 1.0) << "Z=" << Z;
  }
}

TEST(ControlStep, SlacksVanishWhenReferenceSatisfiesConstraints) {
  NmpcConfig cfg;
  const QuadParams params;
  QuadState x;
  x.p = Vec3(0, 0, 1);
  x.v = Vec3(0, 2, 0);
  const auto ref = level_line(x.p, Vec3(0, 2, 0), cfg.horizon, cfg.dt, params);
  TimedHalfPlane hp;
  hp.A = Vec3(0, 1, 0);
  hp.b = 1.0;
  hp.t_v = 8.0;
  const StageSchedule sched = schedule_constraints({hp}, stage_times(cfg.horizon, cfg.dt));
  const auto [out, sol] = control_step(x, ref, sched, NmpcSolution{}, cfg, params);
  ASSERT_TRUE(sol.converged);
  EXPECT_LE(sol.slacks.maxCoeff(), 1e-6);
}

TEST(ControlStep, RtiContractsToFixedCommand) {
  // At 100 Hz the shift is zero stages, so repeated calls on a held state are
  // successive SQP iterations on the same problem.
  NmpcController ctrl(NmpcConfig{}, QuadParams{});
  const auto ref = hover_reference(Vec3(0, 0, 1), 20, 0.05, 0.0, ctrl.params());
  {
    std::vector<Vec4> cmds;
    for (int i = 0; i < 3; ++i) cmds.push_back(ctrl.control_step(ref.points[0].state(), ref, {}).command.f);
    EXPECT_LT((cmds[2] - cmds[0]).norm(), 1e-9);
  }
  ctrl.reset();
  QuadState x = ref.points[0].state();
  x.q = Quat(Eigen::AngleAxisd(0.2, Vec3::UnitX()));
  std::vector<double> change;
  Vec4 last = ctrl.control_step(x, ref, {}).command.f;
  for (int i = 0; i < 8; ++i) {
    const Vec4 now = ctrl.control_step(x, ref, {}).command.f;
    change.push_back((now - last).norm());
    last = now;
  }
  for (std::size_t i = 1; i < change.size(); ++i) EXPECT_LT(change[i], change[i - 1] + 1e-12) << i;
  EXPECT_LT(change.back(), 1e-3 * change.front());
}

TEST(ControlStep, EmittedCommandsRespectHardBounds) {
  std::mt19937 rng(13);
  const QuadParams params;
  NmpcConfig cfg;
  for (int trial = 0; trial < 30; ++trial) {
    QuadState x = random_state(rng);
    x.v *= 3.0;
    const auto ref = generate_reference(x, Vec3(20, -5, 2), Vec3::Zero(), PmmLimits{}, cfg.horizon, cfg.dt, 0.0, params);
    const auto [out, sol] = control_step(x, ref, {}, NmpcSolution{}, cfg, params);
    EXPECT_GE(out.command.f.minCoeff(), params.rotor_thrust_min);
    EXPECT_LE(out.command.f.maxCoeff(), params.rotor_thrust_max);
    EXPECT_GE(out.collective, params.collective_min - 1e-12);
    EXPECT_LE(out.collective, params.collective_max + 1e-12);
    EXPECT_TRUE((out.body_rate.array() >= params.rate_min.array()).all());
    EXPECT_TRUE((out.body_rate.array() <= params.rate_max.array()).all());
    if (sol.converged) EXPECT_LE(sol.kkt_residual, 1e-6);
  }
}

TEST(ControlStep, FallbackHoldsShiftedPlan) {
  NmpcConfig cfg;
  cfg.qp.max_iterations = 1;
  const QuadParams params;
  QuadState x;
  const auto ref = generate_reference(x, Vec3(20, 0, 0), Vec3::Zero(), PmmLimits{}, cfg.horizon, cfg.dt, 0.0, params);
  NmpcSolution prev;
  prev.valid = true;
  for (int k = 0; k < cfg.horizon; ++k) prev.inputs.push_back(RotorCommand::uniform(2.0 + 0.1 * k));
  cfg.control_period = cfg.dt;
  const auto [out, sol] = control_step(x, ref, {}, prev, cfg, params);
  ASSERT_FALSE(sol.converged);
  EXPECT_TRUE(out.degraded);
  EXPECT_NEAR(out.command.f(0), 2.1, 1e-12);
}

TEST(ControlStep, FallbackAdvancesOneStagePerStagePeriod) {
  NmpcConfig cfg;
  cfg.qp.max_iterations = 1;
  const QuadParams params;
  QuadState x;
  const auto ref = generate_reference(x, Vec3(20, 0, 0), Vec3::Zero(), PmmLimits{}, cfg.horizon, cfg.dt, 0.0, params);
  NmpcSolution prev;
  prev.valid = true;
  for (int k = 0; k < cfg.horizon; ++k) prev.inputs.push_back(RotorCommand::uniform(2.0 + 0.1 * k));
  // 100 Hz calls against 20 Hz stages: five calls per stage.
  std::vector<double> first;
  for (int call = 0; call < 10; ++call) {
    const auto [out, sol] = control_step(x, ref, {}, prev, cfg, params);
    ASSERT_TRUE(out.degraded);
    first.push_back(out.command.f(0));
    prev = sol;
  }
  for (int call = 0; call < 10; ++call) {
    const double expected = 2.0 + 0.1 * ((call + 1) / 5);
    EXPECT_NEAR(first[static_cast<std::size_t>(call)], expected, 1e-12) << "call " << call;
  }
}

TEST(NmpcConfig, Validation) {
  NmpcConfig cfg;
  EXPECT_NO_THROW(cfg.validate(8.0));
  EXPECT_THROW(cfg.validate(0.5), ConfigError);
  cfg.horizon = 1;
  EXPECT_THROW(cfg.validate(8.0), ConfigError);
}
