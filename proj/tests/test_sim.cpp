#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "rvcnmpc/sim.hpp"

using namespace rvcnmpc;

namespace {

Scenario two_agents(const Vec3& a, const Vec3& ga, const Vec3& b, const Vec3& gb) {
  Scenario sc;
  QuadState x;
  x.p = a;
  sc.initial.push_back(x);
  x.p = b;
  sc.initial.push_back(x);
  sc.goals = {ga, gb};
  return sc;
}

Scenario one_agent(const Vec3& start, const Vec3& goal) {
  Scenario sc;
  QuadState x;
  x.p = start;
  sc.initial.push_back(x);
  sc.goals = {goal};
  return sc;
}

Scenario circle(int n, double radius, double z) {
  Scenario sc;
  for (int i = 0; i < n; ++i) {
    const double a = 2.0 * M_PI * i / n;
    QuadState x;
    x.p = Vec3(radius * std::cos(a), radius * std::sin(a), z);
    sc.initial.push_back(x);
    sc.goals.push_back(Vec3(-x.p.x(), -x.p.y(), z));
  }
  return sc;
}

void expect_same_report(const RunReport& a, const RunReport& b) {
  EXPECT_EQ(a.transition_time, b.transition_time);
  EXPECT_EQ(a.min_distance, b.min_distance);
  EXPECT_EQ(a.min_distance_time, b.min_distance_time);
  EXPECT_EQ(a.collisions.size(), b.collisions.size());
  EXPECT_EQ(a.sim_time, b.sim_time);
  EXPECT_EQ(a.degraded_steps, b.degraded_steps);
  EXPECT_EQ(a.solver_ms.size(), b.solver_ms.size());
  ASSERT_EQ(a.agents.size(), b.agents.size());
  for (std::size_t i = 0; i < a.agents.size(); ++i) {
    EXPECT_EQ(a.agents[i].reach_time, b.agents[i].reach_time);
    EXPECT_EQ(a.agents[i].distance, b.agents[i].distance);
    EXPECT_EQ(a.agents[i].max_velocity, b.agents[i].max_velocity);
  }
}

}  // namespace

TEST(World, HoverAtGoalIsStationary) {
  SimConfig cfg;
  const Vec3 p0(1, -2, 2);
  World w(cfg, one_agent(p0, p0), 3);
  for (int k = 0; k < 1000; ++k) {
    w.step();
    ASSERT_LT((w.state(0).p - p0).norm(), 1e-4) << "step " << k;
  }
}

TEST(World, DistantAgentsDoNotInteract) {
  SimConfig cfg;
  cfg.rvc.activation_dist = 50.0;
  cfg.timeout = 4.0;
  const Vec3 a(0, 0, 2), ga(5, 3, 2), b(100, 0, 2), gb(96, -4, 2.5);
  std::vector<TraceRow> pair_trace, solo_a, solo_b;
  simulate(cfg, two_agents(a, ga, b, gb), 9, &pair_trace);
  // Same control phases as in the pair run: the phases are drawn first, in
  // agent order, so a solo run of agent 0 shares its phase.
  simulate(cfg, one_agent(a, ga), 9, &solo_a);
  std::vector<TraceRow> pair_a;
  for (const auto& r : pair_trace) {
    EXPECT_EQ(r.active_constraints, 0);
    if (r.agent == 0) pair_a.push_back(r);
  }
  ASSERT_FALSE(pair_a.empty());
  const std::size_t n = std::min(pair_a.size(), solo_a.size());
  ASSERT_GT(n, 100u);
  for (std::size_t k = 0; k < n; ++k) {
    ASSERT_EQ(pair_a[k].t, solo_a[k].t);
    ASSERT_EQ(pair_a[k].x.p, solo_a[k].x.p);
    ASSERT_EQ(pair_a[k].cmd.f, solo_a[k].cmd.f);
  }
}

TEST(World, SameSeedSameReport) {
  SimConfig cfg;
  cfg.comm.sigma_p = 0.05;
  cfg.comm.drop_prob = 0.1;
  cfg.timeout = 6.0;
  const Scenario sc = circle(4, 6.0, 2.0);
  std::vector<TraceRow> t1, t2;
  const RunReport a = simulate(cfg, sc, 21, &t1);
  const RunReport b = simulate(cfg, sc, 21, &t2);
  expect_same_report(a, b);
  ASSERT_EQ(t1.size(), t2.size());
  for (std::size_t k = 0; k < t1.size(); ++k) {
    ASSERT_EQ(t1[k].x.p, t2[k].x.p);
    ASSERT_EQ(t1[k].cmd.f, t2[k].cmd.f);
  }
}

TEST(World, IdealChannelDeliversGroundTruth) {
  SimConfig cfg;
  cfg.comm.rate = 1.0 / cfg.nmpc.control_period;
  World w(cfg, circle(3, 5.0, 2.0), 4);
  std::vector<std::vector<QuadState>> history;
  for (int k = 0; k < 400; ++k) {
    history.push_back({w.state(0), w.state(1), w.state(2)});
    w.step();
    const double now = w.time();
    for (std::size_t i = 0; i < w.size(); ++i) {
      for (const auto& [id, obs] : w.mailbox(i)) {
        const auto stamp_step = static_cast<std::size_t>(std::lround(obs.stamp / cfg.sim_dt));
        ASSERT_LT(stamp_step, history.size());
        const QuadState& truth = history[stamp_step][static_cast<std::size_t>(id)];
        ASSERT_EQ(obs.p, truth.p);
        ASSERT_EQ(obs.v, truth.v);
        ASSERT_LE(now - obs.stamp, cfg.nmpc.control_period + 1e-9);
      }
    }
  }
}

TEST(World, ObservationAgeBound) {
  SimConfig cfg;
  cfg.comm.rate = 10.0;
  cfg.comm.delay = 0.05;
  cfg.timeout = 3.0;
  const RunReport r = simulate(cfg, circle(4, 8.0, 2.0), 5);
  EXPECT_GE(r.max_observation_age, 0.05 - 1e-9);
  EXPECT_LE(r.max_observation_age, 0.15 + cfg.nmpc.control_period + 1e-9);
}

TEST(World, StarvedNeighborsAreDiscarded) {
  SimConfig cfg;
  cfg.comm.drop_prob = 0.97;
  cfg.comm.rate = 10.0;
  cfg.timeout = 20.0;
  const Vec3 a(0, 0, 2), b(4, 0, 2);
  World w(cfg, two_agents(a, a, b, b), 2);
  std::vector<TraceRow> trace;
  w.set_trace(&trace);
  for (int k = 0; k < 20000; ++k) w.step();
  const RunReport r = w.finish();
  EXPECT_GT(r.stale_discards, 0);
  // Each agent's mailbox is empty or holds a fresh message; stale ones were
  // dropped and produced no constraints.
  bool saw_empty = false;
  for (const auto& row : trace)
    if (row.active_constraints == 0) saw_empty = true;
  EXPECT_TRUE(saw_empty);
  for (std::size_t i = 0; i < w.size(); ++i)
    for (const auto& [id, obs] : w.mailbox(i)) EXPECT_LE(w.time() - obs.stamp, cfg.rvc.staleness + cfg.sim_dt);
}

TEST(World, CollisionThreshold) {
  SimConfig cfg;
  cfg.timeout = 0.2;
  {
    World w(cfg, two_agents(Vec3(0, 0, 2), Vec3(0, 0, 2), Vec3(0.49, 0, 2), Vec3(0.49, 0, 2)), 1);
    const RunReport r = w.finish();
    ASSERT_EQ(r.collisions.size(), 1u);
    EXPECT_EQ(r.collisions[0].t, 0.0);
    EXPECT_FALSE(r.success);
  }
  {
    cfg.rvc.r_ca = 0.3;  // both hover in place
    const RunReport r = simulate(cfg, two_agents(Vec3(0, 0, 2), Vec3(0, 0, 2), Vec3(0.51, 0, 2), Vec3(0.51, 0, 2)), 1);
    EXPECT_TRUE(r.collisions.empty());
    EXPECT_NEAR(r.min_distance, 0.51, 1e-4);
  }
}

TEST(World, RejectsCoincidentStarts) {
  SimConfig cfg;
  EXPECT_THROW(World(cfg, two_agents(Vec3(0, 0, 2), Vec3(1, 0, 2), Vec3(0, 0, 2), Vec3(2, 0, 2)), 1), ConfigError);
}

TEST(ReachTime, Examples) {
  const Vec3 goal(1, 2, 3);
  std::vector<double> t;
  std::vector<Vec3> p;
  for (int k = 0; k <= 50; ++k) {
    t.push_back(0.1 * k);
    p.push_back(goal);
  }
  EXPECT_EQ(reach_time(t, p, goal, 0.1).value(), 0.0);

  // Enters at 2.0 s, leaves at 2.1 s, back for good at 3.0 s.
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double tk = t[k];
    const bool in = (tk >= 2.0 - 1e-9 && tk < 2.1 - 1e-9) || tk >= 3.0 - 1e-9;
    p[k] = in ? goal : goal + Vec3(1, 0, 0);
  }
  EXPECT_NEAR(reach_time(t, p, goal, 0.1).value(), 3.0, 1e-12);

  p.back() = goal + Vec3(0, 0, 0.5);
  EXPECT_FALSE(reach_time(t, p, goal, 0.1).has_value());
  EXPECT_THROW(reach_time({0.0}, {}, goal, 0.1), std::invalid_argument);
}

TEST(World, SingleAgentReachesGoalAlongPlan) {
  SimConfig cfg;
  const Vec3 a(10, 0, 2), g(-10, 0, 2);
  const RunReport r = simulate(cfg, one_agent(a, g), 3);
  ASSERT_TRUE(r.success);
  const double plan = synchronize_axes(a, Vec3::Zero(), g, Vec3::Zero(), cfg.limits).duration();
  EXPECT_GT(r.transition_time, plan - 0.15);  // the last 0.1 m of the braking arc
  EXPECT_LT(r.transition_time, plan + 1.0);
  EXPECT_NEAR(r.agents[0].distance, 20.0, 0.5);
}

TEST(World, MinDistanceOverEverySimStep) {
  SimConfig cfg;
  cfg.rvc.r_ca = 1.0;
  cfg.timeout = 5.0;
  World w(cfg, circle(4, 6.0, 2.0), 8);
  double dense = std::numeric_limits<double>::infinity();
  auto sample = [&] {
    for (std::size_t i = 0; i < w.size(); ++i)
      for (std::size_t j = i + 1; j < w.size(); ++j) dense = std::min(dense, (w.state(i).p - w.state(j).p).norm());
  };
  sample();
  while (!w.done()) {
    w.step();
    sample();
  }
  const RunReport r = w.finish();
  EXPECT_EQ(r.min_distance, dense);
}

TEST(World, NoTeleportsAndAgentCountConserved) {
  SimConfig cfg;
  const RunReport r = simulate(cfg, circle(6, 10.0, 2.0), 12);
  ASSERT_EQ(r.agents.size(), 6u);
  double vmax = 0.0;
  for (const auto& a : r.agents) vmax = std::max(vmax, a.max_velocity);
  EXPECT_GT(r.max_step_displacement, 0.0);
  EXPECT_LE(r.max_step_displacement, 1.05 * vmax * cfg.sim_dt + 1e-6);
}

TEST(World, TransitionTimeIsLatestReach) {
  SimConfig cfg;
  const RunReport r = simulate(cfg, circle(3, 5.0, 2.0), 6);
  ASSERT_TRUE(r.all_reached);
  double latest = 0.0;
  for (const auto& a : r.agents) latest = std::max(latest, a.reach_time);
  EXPECT_EQ(r.transition_time, latest);
  EXPECT_EQ(r.success, r.collisions.empty());
}

TEST(World, GoalStreamIssuesNewGoals) {
  SimConfig cfg;
  Scenario sc = one_agent(Vec3(0, 0, 2), Vec3(2, 0, 2));
  sc.duration = 8.0;
  int issued = 0;
  sc.next_goal = [&](AgentId) {
    ++issued;
    return issued % 2 ? Vec3(0, 0, 2) : Vec3(2, 0, 2);
  };
  const RunReport r = simulate(cfg, sc, 1);
  EXPECT_NEAR(r.sim_time, 8.0, 1e-9);
  EXPECT_GE(r.goals_reached, 3);
  EXPECT_EQ(r.goals_reached, issued);
}

TEST(SimConfig, Validation) {
  SimConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.sim_dt = 0.003;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SimConfig{};
  cfg.comm.drop_prob = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SimConfig{};
  cfg.replan_tolerance = -1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  Scenario sc = one_agent(Vec3::Zero(), Vec3::Ones());
  sc.next_goal = [](AgentId) { return Vec3::Zero(); };
  EXPECT_THROW(World(SimConfig{}, sc, 1), ConfigError);
}
