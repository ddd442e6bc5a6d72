#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rvcnmpc/sim.hpp"

namespace rvcnmpc {

inline constexpr int kSchemaVersion = 1;

enum class ScenarioKind { kApcx, kRandomGoals, kRobustnessGrid, kCustom };

inline std::string to_string(ScenarioKind k) {
  switch (k) {
    case ScenarioKind::kApcx: return "apcx";
    case ScenarioKind::kRandomGoals: return "random_goals";
    case ScenarioKind::kRobustnessGrid: return "robustness_grid";
    case ScenarioKind::kCustom: return "custom";
  }
  return "apcx";
}

inline ScenarioKind scenario_kind_from(const std::string& s) {
  if (s == "apcx") return ScenarioKind::kApcx;
  if (s == "random_goals") return ScenarioKind::kRandomGoals;
  if (s == "robustness_grid") return ScenarioKind::kRobustnessGrid;
  if (s == "custom") return ScenarioKind::kCustom;
  throw ConfigError("config: unknown scenario kind '" + s + "'");
}

/// Everything needed to reproduce one experiment.
struct ScenarioConfig {
  ScenarioKind kind = ScenarioKind::kApcx;
  int n_agents = 10;
  double circle_radius = 10.0;
  double altitude = 2.0;
  Vec3 arena_min{-10.0, -10.0, 1.5};
  Vec3 arena_max{10.0, 10.0, 2.5};
  double duration = 600.0;  // goal-stream runs
  std::vector<Vec3> custom_starts;
  std::vector<Vec3> custom_goals;

  SimConfig sim;

  std::uint64_t seed = 1;
  int trials = 20;
  double success_floor = 100.0;  // percent
  std::vector<double> grid_delays{0.0, 0.05, 0.1, 0.2, 0.4};
  std::vector<double> grid_rates{100.0, 50.0, 20.0, 10.0, 5.0, 2.0};
  std::vector<double> grid_sigma_p{0.0};
  std::vector<double> grid_sigma_v{0.0};

  void validate() const {
    sim.validate();
    if (n_agents < 1) throw ConfigError("config: n_agents must be >= 1");
    if (trials < 0) throw ConfigError("config: trials must be >= 0");
    if (!(success_floor >= 0.0 && success_floor <= 100.0)) throw ConfigError("config: success_floor must be in [0, 100]");
    switch (kind) {
      case ScenarioKind::kApcx:
      case ScenarioKind::kRobustnessGrid:
        if (n_agents < 2) throw ConfigError("config: apcx needs >= 2 agents");
        if (!(circle_radius > 0.0)) throw ConfigError("config: circle radius must be positive");
        break;
      case ScenarioKind::kRandomGoals:
        if (!(arena_min.array() <= arena_max.array()).all()) throw ConfigError("config: arena bounds inverted");
        if (!(duration > 0.0)) throw ConfigError("config: duration must be positive");
        break;
      case ScenarioKind::kCustom:
        if (custom_starts.empty() || custom_starts.size() != custom_goals.size())
          throw ConfigError("config: custom scenario needs matching starts and goals");
        break;
    }
    if (kind == ScenarioKind::kRobustnessGrid) {
      if (grid_delays.empty() || grid_rates.empty() || grid_sigma_p.empty() || grid_sigma_v.empty())
        throw ConfigError("config: robustness grid axes must be nonempty");
      for (double d : grid_delays)
        if (!(d >= 0.0)) throw ConfigError("config: grid delays must be >= 0");
      for (double r : grid_rates)
        if (!(r > 0.0)) throw ConfigError("config: grid rates must be positive");
      for (double s : grid_sigma_p)
        if (!(s >= 0.0)) throw ConfigError("config: grid sigma_p must be >= 0");
      for (double s : grid_sigma_v)
        if (!(s >= 0.0)) throw ConfigError("config: grid sigma_v must be >= 0");
    }
  }
};

// ---------------------------------------------------------------- JSON

namespace detail {

using nlohmann::json;

template <int N>
json vec_json(const Eigen::Matrix<double, N, 1>& v) {
  json a = json::array();
  for (int i = 0; i < N; ++i) a.push_back(v(i));
  return a;
}

inline json points_json(const std::vector<Vec3>& pts) {
  json a = json::array();
  for (const auto& p : pts) a.push_back(vec_json<3>(p));
  return a;
}

/// Reads known keys of one object and rejects the rest.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("config: '" + where_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config: bad value for '" + where_ + "." + key + "'");
    }
  }

  template <int N>
  void vec(const char* key, Eigen::Matrix<double, N, 1>& out) {
    std::vector<double> v;
    get(key, v);
    if (!j_.contains(key)) return;
    if (static_cast<int>(v.size()) != N)
      throw ConfigError("config: '" + where_ + "." + key + "' needs " + std::to_string(N) + " entries");
    for (int i = 0; i < N; ++i) out(i) = v[static_cast<std::size_t>(i)];
  }

  void points(const char* key, std::vector<Vec3>& out) {
    std::vector<std::vector<double>> v;
    get(key, v);
    if (!j_.contains(key)) return;
    out.clear();
    for (const auto& p : v) {
      if (p.size() != 3) throw ConfigError("config: '" + where_ + "." + key + "' entries need 3 coordinates");
      out.emplace_back(p[0], p[1], p[2]);
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("config: unknown key '" + where_ + "." + it.key() + "'");
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline nlohmann::json to_json(const ScenarioConfig& c) {
  using detail::points_json;
  using detail::vec_json;
  using nlohmann::json;
  const SimConfig& s = c.sim;
  json j;
  j["schema_version"] = kSchemaVersion;
  j["scenario"] = {{"kind", to_string(c.kind)},
                   {"n_agents", c.n_agents},
                   {"circle_radius", c.circle_radius},
                   {"altitude", c.altitude},
                   {"arena_min", vec_json<3>(c.arena_min)},
                   {"arena_max", vec_json<3>(c.arena_max)},
                   {"duration", c.duration},
                   {"custom_starts", points_json(c.custom_starts)},
                   {"custom_goals", points_json(c.custom_goals)}};
  j["limits"] = {{"v_max", s.limits.v_max}, {"a_max", s.limits.a_max}};
  j["rvc"] = {{"r_ca", s.rvc.r_ca},
              {"tau", s.rvc.tau},
              {"activation_dist", s.rvc.activation_dist},
              {"max_neighbors", s.rvc.max_neighbors},
              {"staleness", s.rvc.staleness},
              {"r_push", s.rvc.r_push},
              {"time_dependent", s.rvc.time_dependent},
              {"cover_first_stage", s.rvc.cover_first_stage}};
  j["comm"] = {{"rate", s.comm.rate},       {"delay", s.comm.delay},         {"sigma_p", s.comm.sigma_p},
               {"sigma_v", s.comm.sigma_v}, {"drop_prob", s.comm.drop_prob}, {"jitter", s.comm.jitter}};
  j["nmpc"] = {{"horizon", s.nmpc.horizon},
               {"dt", s.nmpc.dt},
               {"control_period", s.nmpc.control_period},
               {"Q", vec_json<12>(s.nmpc.weights.Q)},
               {"R", vec_json<4>(s.nmpc.weights.R)},
               {"Z", s.nmpc.weights.Z},
               {"qp_max_iterations", s.nmpc.qp.max_iterations}};
  j["quad"] = {{"mass", s.params.mass},
               {"inertia", vec_json<3>(s.params.inertia)},
               {"arm_length", s.params.arm_length},
               {"torque_constant", s.params.torque_constant},
               {"drag", vec_json<3>(s.params.drag)},
               {"rotor_thrust_min", s.params.rotor_thrust_min},
               {"rotor_thrust_max", s.params.rotor_thrust_max},
               {"collective_min", s.params.collective_min},
               {"collective_max", s.params.collective_max},
               {"rate_min", vec_json<3>(s.params.rate_min)},
               {"rate_max", vec_json<3>(s.params.rate_max)}};
  j["sim"] = {{"sim_dt", s.sim_dt},
              {"physical_radius", s.physical_radius},
              {"timeout", s.timeout},
              {"epsilon", s.epsilon},
              {"settle_time", s.settle_time},
              {"yaw_ref", s.yaw_ref},
              {"use_pmm", s.use_pmm},
              {"self_sigma_p", s.self_sigma_p},
              {"self_sigma_v", s.self_sigma_v},
              {"replan_tolerance", s.replan_tolerance}};
  j["batch"] = {{"seed", c.seed},
                {"trials", c.trials},
                {"success_floor", c.success_floor},
                {"grid_delays", c.grid_delays},
                {"grid_rates", c.grid_rates},
                {"grid_sigma_p", c.grid_sigma_p},
                {"grid_sigma_v", c.grid_sigma_v}};
  return j;
}

/// Parses a config; missing fields keep their defaults, unknown fields are
/// errors. When "activation_dist" is absent it follows v_max * tau.
inline ScenarioConfig config_from_json(const nlohmann::json& j, ScenarioConfig c = {}) {
  detail::Reader top(j, "config");
  int version = -1;
  top.get("schema_version", version);
  if (version != kSchemaVersion) throw ConfigError("config: unsupported schema_version " + std::to_string(version));
  SimConfig& s = c.sim;
  bool activation_given = false;

  if (const auto* o = top.child("scenario")) {
    detail::Reader r(*o, "scenario");
    std::string kind = to_string(c.kind);
    r.get("kind", kind);
    c.kind = scenario_kind_from(kind);
    r.get("n_agents", c.n_agents);
    r.get("circle_radius", c.circle_radius);
    r.get("altitude", c.altitude);
    r.vec<3>("arena_min", c.arena_min);
    r.vec<3>("arena_max", c.arena_max);
    r.get("duration", c.duration);
    r.points("custom_starts", c.custom_starts);
    r.points("custom_goals", c.custom_goals);
    r.finish();
  }
  if (const auto* o = top.child("limits")) {
    detail::Reader r(*o, "limits");
    r.get("v_max", s.limits.v_max);
    r.get("a_max", s.limits.a_max);
    r.finish();
  }
  if (const auto* o = top.child("rvc")) {
    detail::Reader r(*o, "rvc");
    r.get("r_ca", s.rvc.r_ca);
    r.get("tau", s.rvc.tau);
    activation_given = o->contains("activation_dist");
    r.get("activation_dist", s.rvc.activation_dist);
    r.get("max_neighbors", s.rvc.max_neighbors);
    r.get("staleness", s.rvc.staleness);
    r.get("r_push", s.rvc.r_push);
    r.get("time_dependent", s.rvc.time_dependent);
    r.get("cover_first_stage", s.rvc.cover_first_stage);
    r.finish();
  }
  if (!activation_given) s.rvc.activation_dist = s.limits.v_max * s.rvc.tau;
  if (const auto* o = top.child("comm")) {
    detail::Reader r(*o, "comm");
    r.get("rate", s.comm.rate);
    r.get("delay", s.comm.delay);
    r.get("sigma_p", s.comm.sigma_p);
    r.get("sigma_v", s.comm.sigma_v);
    r.get("drop_prob", s.comm.drop_prob);
    r.get("jitter", s.comm.jitter);
    r.finish();
  }
  if (const auto* o = top.child("nmpc")) {
    detail::Reader r(*o, "nmpc");
    r.get("horizon", s.nmpc.horizon);
    r.get("dt", s.nmpc.dt);
    r.get("control_period", s.nmpc.control_period);
    r.vec<12>("Q", s.nmpc.weights.Q);
    r.vec<4>("R", s.nmpc.weights.R);
    r.get("Z", s.nmpc.weights.Z);
    r.get("qp_max_iterations", s.nmpc.qp.max_iterations);
    r.finish();
  }
  if (const auto* o = top.child("quad")) {
    detail::Reader r(*o, "quad");
    r.get("mass", s.params.mass);
    r.vec<3>("inertia", s.params.inertia);
    r.get("arm_length", s.params.arm_length);
    r.get("torque_constant", s.params.torque_constant);
    r.vec<3>("drag", s.params.drag);
    r.get("rotor_thrust_min", s.params.rotor_thrust_min);
    r.get("rotor_thrust_max", s.params.rotor_thrust_max);
    r.get("collective_min", s.params.collective_min);
    r.get("collective_max", s.params.collective_max);
    r.vec<3>("rate_min", s.params.rate_min);
    r.vec<3>("rate_max", s.params.rate_max);
    r.finish();
  }
  if (const auto* o = top.child("sim")) {
    detail::Reader r(*o, "sim");
    r.get("sim_dt", s.sim_dt);
    r.get("physical_radius", s.physical_radius);
    r.get("timeout", s.timeout);
    r.get("epsilon", s.epsilon);
    r.get("settle_time", s.settle_time);
    r.get("yaw_ref", s.yaw_ref);
    r.get("use_pmm", s.use_pmm);
    r.get("self_sigma_p", s.self_sigma_p);
    r.get("self_sigma_v", s.self_sigma_v);
    r.get("replan_tolerance", s.replan_tolerance);
    r.finish();
  }
  if (const auto* o = top.child("batch")) {
    detail::Reader r(*o, "batch");
    r.get("seed", c.seed);
    r.get("trials", c.trials);
    r.get("success_floor", c.success_floor);
    r.get("grid_delays", c.grid_delays);
    r.get("grid_rates", c.grid_rates);
    r.get("grid_sigma_p", c.grid_sigma_p);
    r.get("grid_sigma_v", c.grid_sigma_v);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

inline ScenarioConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

// ------------------------------------------------------------- scenarios

/// Agents evenly spaced on a horizontal circle, each bound for the
/// antipodal point.
inline Scenario make_apcx(int n, double radius, double altitude) {
  if (n < 2) throw ConfigError("apcx: need at least 2 agents");
  if (!(radius > 0.0)) throw ConfigError("apcx: radius must be positive");
  Scenario sc;
  for (int i = 0; i < n; ++i) {
    const double a = 2.0 * M_PI * i / n;
    QuadState x;
    x.p = Vec3(radius * std::cos(a), radius * std::sin(a), altitude);
    sc.initial.push_back(x);
    sc.goals.push_back(Vec3(-x.p.x(), -x.p.y(), altitude));
  }
  return sc;
}

/// Agents spawned on a grid inside the arena; each receives uniform random
/// goals, a new one whenever it reaches the current one. Goals keep
/// `separation` from the other agents' current goals when possible.
inline Scenario make_random_goals(int n, const Vec3& lo, const Vec3& hi, double duration, std::uint64_t seed,
                                  double separation) {
  if (n < 1) throw ConfigError("random goals: need at least 1 agent");
  if (!(lo.array() <= hi.array()).all()) throw ConfigError("random goals: arena bounds inverted");
  Scenario sc;
  sc.duration = duration;
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  const int rows = (n + cols - 1) / cols;
  const Vec3 span = hi - lo;
  for (int i = 0; i < n; ++i) {
    const int r = i / cols, c = i % cols;
    QuadState x;
    x.p = Vec3(lo.x() + span.x() * (c + 0.5) / cols, lo.y() + span.y() * (r + 0.5) / rows, lo.z() + 0.5 * span.z());
    sc.initial.push_back(x);
  }

  struct Stream {
    std::mt19937_64 rng;
    Vec3 lo, hi;
    double separation;
    std::vector<Vec3> current;

    Vec3 draw(std::size_t self) {
      std::uniform_real_distribution<double> U(0.0, 1.0);
      Vec3 g;
      for (int attempt = 0; attempt < 100; ++attempt) {
        for (int k = 0; k < 3; ++k) g(k) = lo(k) + (hi(k) - lo(k)) * U(rng);
        bool clear = true;
        for (std::size_t j = 0; j < current.size(); ++j)
          if (j != self && (current[j] - g).norm() < separation) clear = false;
        if (clear) break;
      }
      return g;
    }
  };
  auto stream = std::make_shared<Stream>(Stream{std::mt19937_64(seed), lo, hi, separation, sc.goals});
  stream->current = std::vector<Vec3>(sc.initial.size(), Vec3::Constant(std::numeric_limits<double>::infinity()));
  for (std::size_t i = 0; i < sc.initial.size(); ++i) {
    stream->current[i] = stream->draw(i);
    sc.goals.push_back(stream->current[i]);
  }
  sc.next_goal = [stream](AgentId id) {
    const auto i = static_cast<std::size_t>(id);
    stream->current[i] = stream->draw(i);
    return stream->current[i];
  };
  return sc;
}

/// Goal stream seeds derive from the trial seed.
inline Scenario build_scenario(const ScenarioConfig& cfg, std::uint64_t trial_seed) {
  switch (cfg.kind) {
    case ScenarioKind::kApcx:
    case ScenarioKind::kRobustnessGrid: return make_apcx(cfg.n_agents, cfg.circle_radius, cfg.altitude);
    case ScenarioKind::kRandomGoals:
      return make_random_goals(cfg.n_agents, cfg.arena_min, cfg.arena_max, cfg.duration,
                               trial_seed ^ 0x9e3779b97f4a7c15ULL, 2.0 * cfg.sim.rvc.r_ca);
    case ScenarioKind::kCustom: {
      Scenario sc;
      for (std::size_t i = 0; i < cfg.custom_starts.size(); ++i) {
        QuadState x;
        x.p = cfg.custom_starts[i];
        sc.initial.push_back(x);
        sc.goals.push_back(cfg.custom_goals[i]);
      }
      return sc;
    }
  }
  throw ConfigError("config: unknown scenario kind");
}

// ----------------------------------------------------------- reporting

/// One trials.csv row. Values are stored as printed so that aggregates can
/// be recomputed exactly from the file.
struct TrialRow {
  int trial = 0;
  std::uint64_t seed = 0;
  bool success = false;
  bool all_reached = false;
  int collisions = 0;
  double flight_time = std::numeric_limits<double>::quiet_NaN();
  double mean_distance = 0.0;
  double mean_velocity = 0.0;
  double max_velocity = 0.0;
  double min_distance = 0.0;
  int goals_reached = 0;
  int degraded_steps = 0;
  int stale_discards = 0;
  double sim_time = 0.0;
};

inline const char* trials_csv_header() {
  return "trial,seed,success,all_reached,collisions,flight_time,mean_distance,mean_velocity,max_velocity,"
         "min_distance,goals_reached,degraded_steps,stale_discards,sim_time";
}

namespace detail {

inline std::string fixed(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline double rounded(double v) { return std::isfinite(v) ? std::stod(fixed(v)) : v; }

}  // namespace detail

inline TrialRow make_trial_row(int trial, std::uint64_t seed, const RunReport& r) {
  TrialRow row;
  row.trial = trial;
  row.seed = seed;
  row.success = r.success;
  row.all_reached = r.all_reached;
  row.collisions = static_cast<int>(r.collisions.size());
  row.flight_time = detail::rounded(r.transition_time);
  row.mean_distance = detail::rounded(r.mean_distance());
  row.mean_velocity = detail::rounded(r.mean_velocity());
  row.max_velocity = detail::rounded(r.max_velocity());
  row.min_distance = detail::rounded(r.min_distance);
  row.goals_reached = r.goals_reached;
  row.degraded_steps = r.degraded_steps;
  row.stale_discards = r.stale_discards;
  row.sim_time = detail::rounded(r.sim_time);
  return row;
}

inline std::string format_trial_row(const TrialRow& r) {
  using detail::fixed;
  std::ostringstream os;
  os << r.trial << ',' << r.seed << ',' << (r.success ? 1 : 0) << ',' << (r.all_reached ? 1 : 0) << ','
     << r.collisions << ',' << fixed(r.flight_time) << ',' << fixed(r.mean_distance) << ','
     << fixed(r.mean_velocity) << ',' << fixed(r.max_velocity) << ',' << fixed(r.min_distance) << ','
     << r.goals_reached << ',' << r.degraded_steps << ',' << r.stale_discards << ',' << fixed(r.sim_time);
  return os.str();
}

inline TrialRow parse_trial_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) f.push_back(cell);
  if (f.size() != 14) throw std::invalid_argument("trials.csv: expected 14 columns");
  TrialRow r;
  r.trial = std::stoi(f[0]);
  r.seed = std::stoull(f[1]);
  r.success = f[2] == "1";
  r.all_reached = f[3] == "1";
  r.collisions = std::stoi(f[4]);
  r.flight_time = std::stod(f[5]);
  r.mean_distance = std::stod(f[6]);
  r.mean_velocity = std::stod(f[7]);
  r.max_velocity = std::stod(f[8]);
  r.min_distance = std::stod(f[9]);
  r.goals_reached = std::stoi(f[10]);
  r.degraded_steps = std::stoi(f[11]);
  r.stale_discards = std::stoi(f[12]);
  r.sim_time = std::stod(f[13]);
  return r;
}

struct Stat {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
  double min = std::numeric_limits<double>::quiet_NaN();
  double max = std::numeric_limits<double>::quiet_NaN();
  int count = 0;
};

/// Mean, sample standard deviation and range of the finite values.
inline Stat summarize(const std::vector<double>& values) {
  Stat s;
  std::vector<double> v;
  for (double x : values)
    if (std::isfinite(x)) v.push_back(x);
  s.count = static_cast<int>(v.size());
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  s.min = *std::min_element(v.begin(), v.end());
  s.max = *std::max_element(v.begin(), v.end());
  return s;
}

/// Table I columns over a batch. Flight time counts trials where every
/// agent reached its goal.
struct AggregateReport {
  int trials = 0;
  int successes = 0;
  double success_rate = 0.0;  // percent
  Stat flight_time;
  Stat flight_distance;
  Stat flight_velocity;
  Stat max_velocity;
  Stat min_distance;
  int collisions = 0;
  int goals_reached = 0;
  int degraded_steps = 0;
};

inline AggregateReport aggregate(const std::vector<TrialRow>& rows) {
  if (rows.empty()) throw std::invalid_argument("aggregate: no trials");
  AggregateReport a;
  a.trials = static_cast<int>(rows.size());
  std::vector<double> ft, fd, fv, mv, md;
  for (const auto& r : rows) {
    a.successes += r.success ? 1 : 0;
    a.collisions += r.collisions;
    a.goals_reached += r.goals_reached;
    a.degraded_steps += r.degraded_steps;
    ft.push_back(r.all_reached ? r.flight_time : std::numeric_limits<double>::quiet_NaN());
    fd.push_back(r.mean_distance);
    fv.push_back(r.mean_velocity);
    mv.push_back(r.max_velocity);
    md.push_back(r.min_distance);
  }
  a.success_rate = 100.0 * a.successes / a.trials;
  a.flight_time = summarize(ft);
  a.flight_distance = summarize(fd);
  a.flight_velocity = summarize(fv);
  a.max_velocity = summarize(mv);
  a.min_distance = summarize(md);
  return a;
}

/// Wall-clock solver statistics; never part of the deterministic outputs.
struct TimingReport {
  double mean_ms = 0.0;
  double p99_ms = 0.0;
  double max_ms = 0.0;
  std::size_t samples = 0;
};

inline TimingReport timing(std::vector<double> ms) {
  TimingReport t;
  t.samples = ms.size();
  if (ms.empty()) return t;
  std::sort(ms.begin(), ms.end());
  double s = 0.0;
  for (double m : ms) s += m;
  t.mean_ms = s / static_cast<double>(ms.size());
  const auto idx = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(ms.size()))) - 1;
  t.p99_ms = ms[std::min(idx, ms.size() - 1)];
  t.max_ms = ms.back();
  return t;
}

inline nlohmann::json stat_json(const Stat& s) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"mean", num(s.mean)}, {"std", num(s.std)}, {"min", num(s.min)}, {"max", num(s.max)}, {"count", s.count}};
}

inline nlohmann::json to_json(const AggregateReport& a) {
  return {{"trials", a.trials},
          {"successes", a.successes},
          {"success_rate", a.success_rate},
          {"flight_time", stat_json(a.flight_time)},
          {"flight_distance", stat_json(a.flight_distance)},
          {"flight_velocity", stat_json(a.flight_velocity)},
          {"max_velocity", stat_json(a.max_velocity)},
          {"min_distance", stat_json(a.min_distance)},
          {"collisions", a.collisions},
          {"goals_reached", a.goals_reached},
          {"degraded_steps", a.degraded_steps}};
}

inline nlohmann::json to_json(const TimingReport& t) {
  return {{"mean_ms", t.mean_ms}, {"p99_ms", t.p99_ms}, {"max_ms", t.max_ms}, {"samples", t.samples}};
}

inline nlohmann::json to_json(const RunReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  nlohmann::json agents = nlohmann::json::array();
  for (const auto& a : r.agents)
    agents.push_back({{"id", a.id},
                      {"reached", a.reached},
                      {"reach_time", num(a.reach_time)},
                      {"distance", a.distance},
                      {"mean_velocity", a.mean_velocity},
                      {"max_velocity", a.max_velocity},
                      {"goals_reached", a.goals_reached},
                      {"degraded_steps", a.degraded_steps}});
  nlohmann::json collisions = nlohmann::json::array();
  for (const auto& c : r.collisions) collisions.push_back({{"t", c.t}, {"a", c.a}, {"b", c.b}, {"distance", c.distance}});
  return {{"agents", agents},
          {"transition_time", num(r.transition_time)},
          {"min_distance", num(r.min_distance)},
          {"min_pair", {r.min_pair_a, r.min_pair_b}},
          {"min_distance_time", r.min_distance_time},
          {"collisions", collisions},
          {"sim_time", r.sim_time},
          {"goals_reached", r.goals_reached},
          {"degraded_steps", r.degraded_steps},
          {"stale_discards", r.stale_discards},
          {"max_observation_age", r.max_observation_age},
          {"all_reached", r.all_reached},
          {"success", r.success}};
}

// ---------------------------------------------------------------- batch

struct BatchOptions {
  int parallel = 1;
  bool traces = false;
};

struct BatchResult {
  std::vector<TrialRow> rows;
  std::vector<RunReport> reports;
  std::vector<std::vector<TraceRow>> traces;  // filled when requested
  AggregateReport aggregate;
  TimingReport timing;
};

/// Trial k runs with seed `cfg.seed + k`; results do not depend on the
/// degree of parallelism.
inline BatchResult run_batch(const ScenarioConfig& cfg, const BatchOptions& opt = {}) {
  cfg.validate();
  if (cfg.trials <= 0) throw ConfigError("batch: no trials requested");
  const auto n = static_cast<std::size_t>(cfg.trials);
  BatchResult out;
  out.reports.resize(n);
  if (opt.traces) out.traces.resize(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t k = next++; k < n; k = next++) {
      try {
        const std::uint64_t seed = cfg.seed + k;
        out.reports[k] = simulate(cfg.sim, build_scenario(cfg, seed), seed, opt.traces ? &out.traces[k] : nullptr);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(opt.parallel, static_cast<int>(n)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::vector<double> ms;
  for (std::size_t k = 0; k < n; ++k) {
    out.rows.push_back(make_trial_row(static_cast<int>(k), cfg.seed + k, out.reports[k]));
    ms.insert(ms.end(), out.reports[k].solver_ms.begin(), out.reports[k].solver_ms.end());
  }
  out.aggregate = aggregate(out.rows);
  out.timing = timing(std::move(ms));
  return out;
}

inline void write_trials_csv(const std::filesystem::path& path, const std::vector<TrialRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << trials_csv_header() << '\n';
  for (const auto& r : rows) f << format_trial_row(r) << '\n';
}

inline std::vector<TrialRow> read_trials_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != trials_csv_header()) throw std::invalid_argument("trials.csv: unexpected header");
  std::vector<TrialRow> rows;
  while (std::getline(f, line))
    if (!line.empty()) rows.push_back(parse_trial_row(line));
  return rows;
}

inline const char* trace_csv_header() {
  return "t,agent_id,px,py,pz,vx,vy,vz,qw,qx,qy,qz,wx,wy,wz,cmd_f1,cmd_f2,cmd_f3,cmd_f4,n_active_constraints,solver_ms";
}

inline void write_trace_csv(const std::filesystem::path& path, const std::vector<TraceRow>& trace) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << trace_csv_header() << '\n';
  char buf[512];
  for (const auto& r : trace) {
    const auto& x = r.x;
    std::snprintf(buf, sizeof buf,
                  "%.3f,%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.8f,%.8f,%.8f,%.8f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%d,%.4f\n",
                  r.t, r.agent, x.p.x(), x.p.y(), x.p.z(), x.v.x(), x.v.y(), x.v.z(), x.q.w(), x.q.x(), x.q.y(),
                  x.q.z(), x.w.x(), x.w.y(), x.w.z(), r.cmd.f(0), r.cmd.f(1), r.cmd.f(2), r.cmd.f(3),
                  r.active_constraints, r.solver_ms);
    f << buf;
  }
}

/// aggregate.json, trials.csv and (optionally) traces/trial_<k>.csv.
inline void write_batch(const std::filesystem::path& dir, const ScenarioConfig& cfg, const BatchResult& b) {
  std::filesystem::create_directories(dir);
  write_trials_csv(dir / "trials.csv", b.rows);
  nlohmann::json j;
  j["config"] = to_json(cfg);
  j["aggregate"] = to_json(b.aggregate);
  j["timing"] = to_json(b.timing);
  std::ofstream(dir / "aggregate.json") << j.dump(2) << '\n';
  if (!b.traces.empty()) {
    std::filesystem::create_directories(dir / "traces");
    for (std::size_t k = 0; k < b.traces.size(); ++k)
      write_trace_csv(dir / "traces" / ("trial_" + std::to_string(k) + ".csv"), b.traces[k]);
  }
}

// ------------------------------------------------------ robustness grid

struct GridCell {
  double delay = 0.0;
  double rate = 0.0;
  double sigma_p = 0.0;
  double sigma_v = 0.0;
  AggregateReport aggregate;
};

/// One batch per (delay, rate, sigma_p, sigma_v) cell on the configured
/// APCX scenario.
inline std::vector<GridCell> run_robustness_grid(const ScenarioConfig& base, const BatchOptions& opt = {}) {
  ScenarioConfig cfg = base;
  if (cfg.kind == ScenarioKind::kRobustnessGrid) cfg.kind = ScenarioKind::kApcx;
  if (base.grid_delays.empty() || base.grid_rates.empty() || base.grid_sigma_p.empty() || base.grid_sigma_v.empty())
    throw ConfigError("robustness: grid axes must be nonempty");
  std::vector<GridCell> cells;
  for (double d : base.grid_delays)
    for (double r : base.grid_rates)
      for (double sp : base.grid_sigma_p)
        for (double sv : base.grid_sigma_v) {
          cfg.sim.comm.delay = d;
          cfg.sim.comm.rate = r;
          cfg.sim.comm.sigma_p = sp;
          cfg.sim.comm.sigma_v = sv;
          BatchOptions o = opt;
          o.traces = false;
          cells.push_back({d, r, sp, sv, run_batch(cfg, o).aggregate});
        }
  return cells;
}

inline void write_grid_csv(const std::filesystem::path& path, const std::vector<GridCell>& cells) {
  using detail::fixed;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "delay_s,rate_hz,sigma_p,sigma_v,trials,success_rate,collisions,min_distance,mean_min_distance,"
       "mean_flight_time\n";
  for (const auto& c : cells)
    f << fixed(c.delay) << ',' << fixed(c.rate) << ',' << fixed(c.sigma_p) << ',' << fixed(c.sigma_v) << ','
      << c.aggregate.trials << ',' << fixed(c.aggregate.success_rate) << ',' << c.aggregate.collisions << ','
      << fixed(c.aggregate.min_distance.min) << ',' << fixed(c.aggregate.min_distance.mean) << ','
      << fixed(c.aggregate.flight_time.mean) << '\n';
}

// --------------------------------------------------------------- ablation

enum class AblationVariant { kFull, kNoTimeDep, kNoPmm, kNoTdNoPmm };

inline std::string to_string(AblationVariant v) {
  switch (v) {
    case AblationVariant::kFull: return "full";
    case AblationVariant::kNoTimeDep: return "no_time_dep";
    case AblationVariant::kNoPmm: return "no_pmm";
    case AblationVariant::kNoTdNoPmm: return "no_td_no_pmm";
  }
  return "full";
}

inline AblationVariant ablation_variant_from(const std::string& s) {
  for (auto v : {AblationVariant::kFull, AblationVariant::kNoTimeDep, AblationVariant::kNoPmm,
                 AblationVariant::kNoTdNoPmm})
    if (to_string(v) == s) return v;
  throw ConfigError("ablation: unknown variant '" + s + "'");
}

inline ScenarioConfig apply_variant(ScenarioConfig cfg, AblationVariant v) {
  if (v == AblationVariant::kNoTimeDep || v == AblationVariant::kNoTdNoPmm) cfg.sim.rvc.time_dependent = false;
  if (v == AblationVariant::kNoPmm || v == AblationVariant::kNoTdNoPmm) cfg.sim.use_pmm = false;
  return cfg;
}

inline BatchResult run_ablation(const ScenarioConfig& cfg, AblationVariant v, const BatchOptions& opt = {}) {
  return run_batch(apply_variant(cfg, v), opt);
}

// ------------------------------------------------------------- presets

/// APCX at the given limits and avoidance radius.
inline ScenarioConfig apcx_config(int n, double v_max, double a_max, double r_ca) {
  ScenarioConfig c;
  c.kind = ScenarioKind::kApcx;
  c.n_agents = n;
  c.sim.limits = {v_max, a_max};
  c.sim.rvc.r_ca = r_ca;
  c.sim.rvc.activation_dist = v_max * c.sim.rvc.tau;
  return c;
}

/// Goal-stream reliability run: 20 x 20 x 1 m arena.
inline ScenarioConfig reliability_config() {
  ScenarioConfig c;
  c.kind = ScenarioKind::kRandomGoals;
  c.n_agents = 10;
  c.arena_min = Vec3(-10.0, -10.0, 1.5);
  c.arena_max = Vec3(10.0, 10.0, 2.5);
  c.duration = 600.0;
  c.sim.limits = {20.0, 40.0};
  c.sim.rvc.r_ca = 1.0;
  c.sim.rvc.activation_dist = c.sim.limits.v_max * c.sim.rvc.tau;
  c.trials = 1;
  return c;
}

/// Four-agent APCX swept over delay and broadcast rate.
inline ScenarioConfig robustness_config() {
  ScenarioConfig c = apcx_config(4, 20.0, 40.0, 2.0);
  c.kind = ScenarioKind::kRobustnessGrid;
  c.success_floor = 0.0;
  return c;
}

}  // namespace rvcnmpc
