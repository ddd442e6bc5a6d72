#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rvcnmpc/nmpc.hpp"
#include "rvcnmpc/pmm_reference.hpp"
#include "rvcnmpc/quad_dynamics.hpp"
#include "rvcnmpc/rvc.hpp"

namespace rvcnmpc {

/// Neighbor broadcast channel: periodic, delayed, noisy and lossy.
struct CommModel {
  double rate = 100.0;  // Hz
  double delay = 0.0;   // s
  double sigma_p = 0.0;
  double sigma_v = 0.0;
  double drop_prob = 0.0;
  double jitter = 0.0;  // uniform +- extra delay, s

  void validate() const {
    if (!(rate > 0.0)) throw ConfigError("comm: rate must be positive");
    if (!(delay >= 0.0)) throw ConfigError("comm: delay must be >= 0");
    if (!(sigma_p >= 0.0) || !(sigma_v >= 0.0)) throw ConfigError("comm: noise std must be >= 0");
    if (!(drop_prob >= 0.0 && drop_prob < 1.0)) throw ConfigError("comm: drop probability must be in [0, 1)");
    if (!(jitter >= 0.0) || jitter > delay) throw ConfigError("comm: jitter must be in [0, delay]");
  }
};

struct SimConfig {
  QuadParams params;
  PmmLimits limits;
  RvcConfig rvc;
  NmpcConfig nmpc;
  CommModel comm;
  double sim_dt = 0.001;
  double physical_radius = 0.25;
  double timeout = 30.0;
  double epsilon = 0.1;
  double settle_time = 1.0;  // all agents inside epsilon this long ends the run
  double yaw_ref = 0.0;
  bool use_pmm = true;
  double self_sigma_p = 0.0;
  double self_sigma_v = 0.0;
  // The reference follows the stored plan until the position error exceeds this.
  double replan_tolerance = 0.5;

  int control_steps() const { return static_cast<int>(std::lround(nmpc.control_period / sim_dt)); }

  void validate() const {
    params.validate();
    limits.validate();
    rvc.validate();
    nmpc.validate(rvc.tau);
    comm.validate();
    if (!(sim_dt > 0.0)) throw ConfigError("sim: sim_dt must be positive");
    const double ratio = nmpc.control_period / sim_dt;
    if (std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1.0)
      throw ConfigError("sim: sim_dt must divide the control period");
    if (!(physical_radius > 0.0)) throw ConfigError("sim: physical radius must be positive");
    if (!(timeout > 0.0)) throw ConfigError("sim: timeout must be positive");
    if (!(epsilon > 0.0)) throw ConfigError("sim: epsilon must be positive");
    if (!(settle_time >= 0.0)) throw ConfigError("sim: settle time must be >= 0");
    if (self_sigma_p < 0.0 || self_sigma_v < 0.0) throw ConfigError("sim: self noise must be >= 0");
    if (!(replan_tolerance >= 0.0)) throw ConfigError("sim: replan tolerance must be >= 0");
  }
};

/// Supplies the next goal of an agent once it reaches the current one.
using GoalSource = std::function<Vec3(AgentId)>;

struct Scenario {
  std::vector<QuadState> initial;
  std::vector<Vec3> goals;
  GoalSource next_goal;  // empty: single goal per agent, run ends when all settle
  double duration = 0.0;  // fixed run length for goal streams

  std::size_t size() const { return initial.size(); }

  /// Overlapping starts are allowed and register as a collision at t = 0.
  void validate() const {
    if (initial.empty()) throw ConfigError("scenario: no agents");
    if (goals.size() != initial.size()) throw ConfigError("scenario: one goal per agent required");
    for (std::size_t i = 0; i < initial.size(); ++i)
      for (std::size_t j = i + 1; j < initial.size(); ++j)
        if ((initial[i].p - initial[j].p).norm() < 1e-9) throw ConfigError("scenario: coincident start positions");
    if (next_goal && !(duration > 0.0)) throw ConfigError("scenario: goal streams need a positive duration");
  }
};

struct CollisionEvent {
  double t = 0.0;
  AgentId a = -1;
  AgentId b = -1;
  double distance = 0.0;
};

struct AgentReport {
  AgentId id = -1;
  bool reached = false;
  double reach_time = std::numeric_limits<double>::quiet_NaN();
  double distance = 0.0;  // path length until reach (whole run if not reached)
  double mean_velocity = 0.0;
  double max_velocity = 0.0;
  int goals_reached = 0;
  int degraded_steps = 0;
};

struct RunReport {
  std::vector<AgentReport> agents;
  double transition_time = std::numeric_limits<double>::quiet_NaN();
  double min_distance = std::numeric_limits<double>::infinity();
  AgentId min_pair_a = -1;
  AgentId min_pair_b = -1;
  double min_distance_time = 0.0;
  std::vector<CollisionEvent> collisions;
  std::vector<double> solver_ms;
  double sim_time = 0.0;
  int goals_reached = 0;
  int degraded_steps = 0;
  int stale_discards = 0;
  double max_observation_age = 0.0;
  double max_step_displacement = 0.0;
  bool all_reached = false;
  bool success = false;

  double flight_time() const { return transition_time; }
  double mean_distance() const {
    double s = 0.0;
    for (const auto& a : agents) s += a.distance;
    return agents.empty() ? 0.0 : s / static_cast<double>(agents.size());
  }
  double mean_velocity() const {
    double s = 0.0;
    for (const auto& a : agents) s += a.mean_velocity;
    return agents.empty() ? 0.0 : s / static_cast<double>(agents.size());
  }
  double max_velocity() const {
    double m = 0.0;
    for (const auto& a : agents) m = std::max(m, a.max_velocity);
    return m;
  }
};

/// One control-tick sample of one agent.
struct TraceRow {
  double t;
  AgentId agent;
  QuadState x;
  RotorCommand cmd;
  int active_constraints;
  double solver_ms;
};

/// Earliest time after which every sample stays within eps of the goal;
/// nullopt when the last sample is outside.
inline std::optional<double> reach_time(const std::vector<double>& t, const std::vector<Vec3>& p, const Vec3& goal,
                                        double eps) {
  if (t.size() != p.size()) throw std::invalid_argument("reach_time: length mismatch");
  std::optional<double> tb;
  for (std::size_t k = p.size(); k-- > 0;) {
    if ((p[k] - goal).norm() > eps) break;
    tb = t[k];
  }
  return tb;
}

/// Deterministic multi-agent world. All randomness comes from the seed.
class World {
 public:
  World(SimConfig cfg, Scenario scenario, std::uint64_t seed)
      : cfg_(std::move(cfg)), scenario_(std::move(scenario)), rng_(seed) {
    cfg_.validate();
    scenario_.validate();
    const int ctrl_steps = cfg_.control_steps();
    bcast_steps_ = std::max<long>(1, std::lround(1.0 / (cfg_.comm.rate * cfg_.sim_dt)));
    delay_steps_ = std::lround(cfg_.comm.delay / cfg_.sim_dt);
    jitter_steps_ = std::lround(cfg_.comm.jitter / cfg_.sim_dt);
    times_ = stage_times(cfg_.nmpc.horizon, cfg_.nmpc.dt);
    std::uniform_int_distribution<int> ctrl_phase(0, ctrl_steps - 1);
    std::uniform_int_distribution<long> bcast_phase(0, bcast_steps_ - 1);
    for (std::size_t i = 0; i < scenario_.size(); ++i) {
      Agent a{static_cast<AgentId>(i), scenario_.initial[i], scenario_.goals[i],
              NmpcController(cfg_.nmpc, cfg_.params)};
      a.cmd = RotorCommand::uniform(cfg_.params.hover_rotor_thrust());
      a.ctrl_phase = ctrl_phase(rng_);
      a.bcast_phase = bcast_phase(rng_);
      a.inside = (a.x.p - a.goal).norm() <= cfg_.epsilon;
      agents_.push_back(std::move(a));
    }
    report_.agents.resize(agents_.size());
    update_metrics();
  }

  double time() const { return static_cast<double>(step_) * cfg_.sim_dt; }
  long step_index() const { return step_; }
  const SimConfig& config() const { return cfg_; }
  std::size_t size() const { return agents_.size(); }
  const QuadState& state(std::size_t i) const { return agents_[i].x; }
  const Vec3& goal(std::size_t i) const { return agents_[i].goal; }
  const std::map<AgentId, NeighborObservation>& mailbox(std::size_t i) const { return agents_[i].mailbox; }
  const RunReport& metrics() const { return report_; }

  void set_trace(std::vector<TraceRow>* sink) { trace_ = sink; }

  /// Advances by one sim step: deliver, control, integrate, metrics.
  void step() {
    broadcast_and_deliver();
    control();
    for (auto& a : agents_) {
      const Vec3 before = a.x.p;
      a.x = rk4_step(a.x, a.cmd, cfg_.sim_dt, cfg_.params);
      const double moved = (a.x.p - before).norm();
      a.path += moved;
      report_.max_step_displacement = std::max(report_.max_step_displacement, moved);
      if (!a.x.finite()) throw InvalidStateError("sim: non-finite state");
    }
    ++step_;
    update_metrics();
  }

  bool done() const {
    if (scenario_.next_goal) return time() >= scenario_.duration - 1e-12;
    if (time() >= cfg_.timeout - 1e-12) return true;
    for (const auto& a : agents_)
      if (!a.inside || time() - a.enter_time < cfg_.settle_time - 1e-12) return false;
    return true;
  }

  RunReport run() {
    while (!done()) step();
    return finish();
  }

  RunReport finish() {
    RunReport r = report_;
    r.sim_time = time();
    r.all_reached = true;
    double tx = 0.0;
    for (std::size_t i = 0; i < agents_.size(); ++i) {
      const Agent& a = agents_[i];
      AgentReport& ar = r.agents[i];
      ar.id = a.id;
      ar.goals_reached = a.goals_reached;
      ar.degraded_steps = a.degraded;
      if (scenario_.next_goal) {
        ar.reached = a.goals_reached > 0;
        ar.distance = a.path;
        ar.mean_velocity = r.sim_time > 0.0 ? a.path / r.sim_time : 0.0;
      } else if (a.inside) {
        ar.reached = true;
        ar.reach_time = a.enter_time;
        ar.distance = a.path_at_enter;
        ar.mean_velocity = a.enter_time > 0.0 ? a.path_at_enter / a.enter_time : 0.0;
        tx = std::max(tx, a.enter_time);
      } else {
        ar.distance = a.path;
      }
      ar.max_velocity = a.max_speed;
      r.all_reached = r.all_reached && ar.reached;
      r.goals_reached += a.goals_reached;
      r.degraded_steps += a.degraded;
    }
    if (!scenario_.next_goal && r.all_reached) r.transition_time = tx;
    r.success = r.collisions.empty() && r.all_reached;
    return r;
  }

 private:
  struct Agent {
    AgentId id;
    QuadState x;
    Vec3 goal;
    NmpcController ctrl;
    RotorCommand cmd;
    std::map<AgentId, NeighborObservation> mailbox;
    int ctrl_phase = 0;
    long bcast_phase = 0;
    bool inside = false;
    double enter_time = 0.0;
    double path = 0.0;
    double path_at_enter = 0.0;
    double max_speed = 0.0;
    int goals_reached = 0;
    int degraded = 0;
    PmmTrajectory plan;
    double plan_start = 0.0;
    bool has_plan = false;
  };

  struct Message {
    AgentId to;
    NeighborObservation obs;
  };

  void broadcast_and_deliver() {
    const double now = time();
    std::normal_distribution<double> noise(0.0, 1.0);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::uniform_int_distribution<long> jit(-jitter_steps_, jitter_steps_);
    for (const auto& a : agents_) {
      if ((step_ - a.bcast_phase) % bcast_steps_ != 0 || step_ < a.bcast_phase) continue;
      for (const auto& b : agents_) {
        if (b.id == a.id) continue;
        // Draws happen in a fixed order regardless of the outcome.
        const double u = uni(rng_);
        Vec3 np(noise(rng_), noise(rng_), noise(rng_));
        Vec3 nv(noise(rng_), noise(rng_), noise(rng_));
        const long extra = jitter_steps_ > 0 ? jit(rng_) : 0;
        if (u < cfg_.comm.drop_prob) continue;
        NeighborObservation obs{a.id, a.x.p + cfg_.comm.sigma_p * np, a.x.v + cfg_.comm.sigma_v * nv, now};
        const long due = step_ + delay_steps_ + extra;
        queue_.emplace(std::make_pair(due, seq_++), Message{b.id, obs});
      }
    }
    while (!queue_.empty() && queue_.begin()->first.first <= step_) {
      const Message& m = queue_.begin()->second;
      auto& box = agents_[static_cast<std::size_t>(m.to)].mailbox;
      auto it = box.find(m.obs.id);
      if (it == box.end() || it->second.stamp <= m.obs.stamp) box[m.obs.id] = m.obs;
      queue_.erase(queue_.begin());
    }
  }

  void control() {
    const int ctrl_steps = cfg_.control_steps();
    const double now = time();
    for (auto& a : agents_) {
      if ((step_ - a.ctrl_phase) % ctrl_steps != 0 || step_ < a.ctrl_phase) continue;
      std::vector<PredictedNeighbor> nbs;
      nbs.reserve(a.mailbox.size());
      for (auto it = a.mailbox.begin(); it != a.mailbox.end();) {
        report_.max_observation_age = std::max(report_.max_observation_age, now - it->second.stamp);
        auto pred = predict_neighbor(it->second, now, cfg_.rvc.staleness);
        if (!pred) {
          ++report_.stale_discards;
          it = a.mailbox.erase(it);
          continue;
        }
        nbs.push_back(*pred);
        ++it;
      }
      QuadState seen = a.x;
      if (cfg_.self_sigma_p > 0.0 || cfg_.self_sigma_v > 0.0) {
        std::normal_distribution<double> noise(0.0, 1.0);
        for (int i = 0; i < 3; ++i) seen.p(i) += cfg_.self_sigma_p * noise(rng_);
        for (int i = 0; i < 3; ++i) seen.v(i) += cfg_.self_sigma_v * noise(rng_);
      }
      const auto constraints = generate_constraints(seen.p, seen.v, nbs, cfg_.rvc);
      const StageSchedule sched = schedule_constraints(constraints, times_, cfg_.rvc.cover_first_stage);
      const ReferenceTrajectory ref = cfg_.use_pmm ? reference(a, seen, now)
                                                   : hover_reference(a.goal, cfg_.nmpc.horizon, cfg_.nmpc.dt,
                                                                     cfg_.yaw_ref, cfg_.params);
      const ControlOutput out = a.ctrl.control_step(seen, ref, sched);
      a.cmd = out.command;
      if (out.degraded) ++a.degraded;
      const double ms = 1e3 * a.ctrl.last_solution().solve_time;
      report_.solver_ms.push_back(ms);
      if (trace_) trace_->push_back({now, a.id, a.x, a.cmd, out.active_constraints, ms});
    }
  }

  ReferenceTrajectory reference(Agent& a, const QuadState& seen, double now) {
    if (a.has_plan) {
      const PmmPoint pt = a.plan.sample(now - a.plan_start);
      if ((pt.p - seen.p).norm() > cfg_.replan_tolerance) a.has_plan = false;
    }
    if (!a.has_plan) {
      Vec3 v0 = seen.v;
      if (v0.norm() > cfg_.limits.v_max) v0 *= cfg_.limits.v_max / v0.norm();
      a.plan = synchronize_axes(seen.p, v0, a.goal, Vec3::Zero(), cfg_.limits);
      a.plan_start = now;
      a.has_plan = true;
    }
    return plan_reference(a.plan, now - a.plan_start, cfg_.nmpc.horizon, cfg_.nmpc.dt, cfg_.yaw_ref, cfg_.params);
  }

  void update_metrics() {
    const double now = time();
    for (std::size_t i = 0; i < agents_.size(); ++i) {
      for (std::size_t j = i + 1; j < agents_.size(); ++j) {
        const double d = (agents_[i].x.p - agents_[j].x.p).norm();
        if (d < report_.min_distance) {
          report_.min_distance = d;
          report_.min_pair_a = agents_[i].id;
          report_.min_pair_b = agents_[j].id;
          report_.min_distance_time = now;
        }
        const auto key = std::make_pair(i, j);
        const bool touching = d < 2.0 * cfg_.physical_radius;
        const bool was = contact_.count(key) > 0;
        if (touching && !was) {
          report_.collisions.push_back({now, agents_[i].id, agents_[j].id, d});
          contact_.insert(key);
        } else if (!touching && was) {
          contact_.erase(key);
        }
      }
    }
    for (auto& a : agents_) {
      a.max_speed = std::max(a.max_speed, a.x.v.norm());
      const bool in = (a.x.p - a.goal).norm() <= cfg_.epsilon;
      if (in && !a.inside) {
        a.enter_time = now;
        a.path_at_enter = a.path;
      }
      a.inside = in;
      if (in && scenario_.next_goal && step_ > 0) {
        ++a.goals_reached;
        a.goal = scenario_.next_goal(a.id);
        a.has_plan = false;
        a.inside = (a.x.p - a.goal).norm() <= cfg_.epsilon;
      }
    }
  }

  SimConfig cfg_;
  Scenario scenario_;
  std::mt19937_64 rng_;
  std::vector<Agent> agents_;
  std::map<std::pair<long, long>, Message> queue_;  // (delivery step, sequence)
  std::set<std::pair<std::size_t, std::size_t>> contact_;
  std::vector<double> times_;
  std::vector<TraceRow>* trace_ = nullptr;
  RunReport report_;
  long step_ = 0;
  long seq_ = 0;
  long bcast_steps_ = 1;
  long delay_steps_ = 0;
  long jitter_steps_ = 0;
};

inline RunReport simulate(const SimConfig& cfg, const Scenario& scenario, std::uint64_t seed,
                          std::vector<TraceRow>* trace = nullptr) {
  World world(cfg, scenario, seed);
  world.set_trace(trace);
  return world.run();
}

}  // namespace rvcnmpc
