#include "otr/envs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <thread>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "otr/env_constants.hpp"
#include "otr/errors.hpp"

namespace otr {

namespace mc = constants::mountain_car;
namespace pd = constants::pendulum;

EnvId parse_env_id(std::string_view name) {
  if (name == "mountain_car" || name == "mountain_car_continuous" ||
      name == "MountainCarContinuous-v0") {
    return EnvId::mountain_car_continuous;
  }
  if (name == "pendulum" || name == "Pendulum-v1") return EnvId::pendulum;
  throw UnknownEnvironment(fmt::format("unknown environment '{}'", name));
}

std::string_view to_string(EnvId id) {
  return id == EnvId::pendulum ? "pendulum" : "mountain_car";
}

const EnvInfo& env_info(EnvId id) {
  static const EnvInfo kMountainCar{2, 1, mc::kMinAction, mc::kMaxAction, mc::kMaxSteps};
  static const EnvInfo kPendulum{3, 1, -pd::kMaxTorque, pd::kMaxTorque, pd::kMaxSteps};
  return id == EnvId::pendulum ? kPendulum : kMountainCar;
}

EnvId env_of(const EnvState& state) {
  return std::holds_alternative<PendulumState>(state) ? EnvId::pendulum
                                                      : EnvId::mountain_car_continuous;
}

std::vector<double> observe(const EnvState& state) {
  if (const auto* p = std::get_if<PendulumState>(&state)) {
    return {std::cos(p->theta), std::sin(p->theta), p->theta_dot};
  }
  const auto& m = std::get<MountainCarState>(state);
  return {m.position, m.velocity};
}

EnvState reset_state(EnvId id, SplitMix64& rng) {
  if (id == EnvId::pendulum) {
    PendulumState s;
    s.theta = rng.uniform(-std::numbers::pi, std::numbers::pi);
    s.theta_dot = rng.uniform(-pd::kInitMaxSpeed, pd::kInitMaxSpeed);
    return s;
  }
  return MountainCarState{rng.uniform(mc::kInitLow, mc::kInitHigh), 0.0};
}

namespace {

/// Wraps to [-pi, pi) with a floored modulo.
double angle_normalize(double x) {
  const double two_pi = 2.0 * std::numbers::pi;
  double r = std::fmod(x + std::numbers::pi, two_pi);
  if (r < 0.0) r += two_pi;
  return r - std::numbers::pi;
}

StepResult step_mountain_car(const MountainCarState& s, double force) {
  StepResult out;
  // Same association as the reference implementation: v += (f * power - g * cos(3x)).
  double velocity = s.velocity + (force * mc::kPower - mc::kGravity * std::cos(mc::kHillFrequency * s.position));
  velocity = std::clamp(velocity, -mc::kMaxSpeed, mc::kMaxSpeed);
  double position = s.position + velocity;
  position = std::clamp(position, mc::kMinPosition, mc::kMaxPosition);
  if (position == mc::kMinPosition && velocity < 0.0) velocity = 0.0;
  out.terminated = position >= mc::kGoalPosition && velocity >= mc::kGoalVelocity;
  out.reward = (out.terminated ? mc::kGoalReward : 0.0) - force * force * mc::kActionCost;
  out.next = MountainCarState{position, velocity};
  return out;
}

StepResult step_pendulum(const PendulumState& s, double torque) {
  StepResult out;
  const double th = angle_normalize(s.theta);
  const double cost = th * th + pd::kVelocityCost * (s.theta_dot * s.theta_dot) +
                      pd::kTorqueCost * (torque * torque);
  double theta_dot =
      s.theta_dot + (3.0 * pd::kGravity / (2.0 * pd::kLength) * std::sin(s.theta) +
                     3.0 / (pd::kMass * pd::kLength * pd::kLength) * torque) *
                        pd::kDt;
  theta_dot = std::clamp(theta_dot, -pd::kMaxSpeed, pd::kMaxSpeed);
  out.next = PendulumState{s.theta + theta_dot * pd::kDt, theta_dot};
  out.reward = -cost;
  return out;
}

}  // namespace

StepResult env_step(const EnvState& state, std::span<const double> action) {
  const EnvInfo& info = env_info(env_of(state));
  if (action.size() != info.action_dim) {
    throw DimensionError(fmt::format("action has {} entries, environment expects {}",
                                     action.size(), info.action_dim));
  }
  if (!std::isfinite(action[0])) throw NonFiniteAction("non-finite action");
  const double u = std::clamp(action[0], info.action_low, info.action_high);
  StepResult out = std::holds_alternative<PendulumState>(state)
                       ? step_pendulum(std::get<PendulumState>(state), u)
                       : step_mountain_car(std::get<MountainCarState>(state), u);
  out.action_clipped = u != action[0];
  return out;
}

// --- rollouts ---------------------------------------------------------------

namespace {

struct EpisodeOutcome {
  double reward = 0.0;
  std::size_t steps = 0;
  std::size_t clipped = 0;
  std::size_t fallbacks = 0;
  ActivationTrace trace;
};

void check_policy(const Policy& policy, const EnvInfo& info) {
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        std::size_t in = 0, out = 0;
        if constexpr (std::is_same_v<T, NetworkSpec>) {
          in = p.input_dim;
          out = p.output_dim();
          if (p.task != TaskKind::regression) throw DimensionError("policy network must be a regression model");
        } else if constexpr (std::is_same_v<T, ObliqueTree>) {
          in = p.input_dim;
          out = p.output_dim;
          if (p.task != TaskKind::regression) throw DimensionError("policy tree must be a regression model");
        } else {
          in = p.state_dim();
          out = p.action_dim;
        }
        if (in != info.obs_dim) {
          throw DimensionError(fmt::format("policy reads {} inputs, environment observes {}", in,
                                           info.obs_dim));
        }
        if (out != info.action_dim) {
          throw DimensionError(fmt::format("policy emits {} actions, environment takes {}", out,
                                           info.action_dim));
        }
      },
      policy);
}

EpisodeOutcome run_episode(const Policy& policy, EnvId env, std::uint64_t episode_seed,
                           Behavior behavior, bool want_trace) {
  const EnvInfo& info = env_info(env);
  SplitMix64 rng(episode_seed);
  EnvState state = reset_state(env, rng);
  EpisodeOutcome out;
  std::optional<PidState> pid;
  if (const auto* spec = std::get_if<PidPolicySpec>(&policy)) pid.emplace(spec->history_len);

  for (int t = 0; t < info.max_steps; ++t) {
    const std::vector<double> obs = observe(state);
    std::vector<double> action;
    if (const auto* net = std::get_if<NetworkSpec>(&policy)) {
      ForwardResult fr = forward_with_pattern(*net, obs);
      if (want_trace) out.trace.add(fr.pattern);
      action = std::move(fr.output);
    } else if (const auto* tree = std::get_if<ObliqueTree>(&policy)) {
      Prediction p = infer(*tree, obs);
      if (p.unresolved) throw Error("policy tree reached a pruned leaf with no fallback");
      out.fallbacks += p.fallback ? 1 : 0;
      action = std::move(p.value);
    } else {
      PidStep step = pid_act(std::get<PidPolicySpec>(policy), obs, *pid);
      out.fallbacks += step.fallback ? 1 : 0;
      action = std::move(step.action);
      *pid = std::move(step.next);
    }
    if (behavior == Behavior::uniform_random) {
      for (double& a : action) a = rng.uniform(info.action_low, info.action_high);
    }
    for (double a : action) {
      if (!std::isfinite(a)) {
        throw NonFiniteAction(fmt::format("policy produced a non-finite action at state [{}]",
                                          fmt::join(obs, ", ")));
      }
    }
    const StepResult r = env_step(state, action);
    out.reward += r.reward;
    out.clipped += r.action_clipped ? 1 : 0;
    ++out.steps;
    state = r.next;
    if (r.terminated) break;
  }
  return out;
}

}  // namespace

RolloutResult rollout(const Policy& policy, EnvId env, const RolloutOptions& opts) {
  const EnvInfo& info = env_info(env);
  check_policy(policy, info);
  const bool want_trace = std::holds_alternative<NetworkSpec>(policy);

  std::vector<EpisodeOutcome> episodes(opts.episodes);
  const std::size_t jobs = std::clamp<std::size_t>(opts.jobs, 1, std::max<std::size_t>(1, opts.episodes));
  std::vector<std::exception_ptr> errors(jobs);
  auto worker = [&](std::size_t shard) {
    try {
      for (std::size_t e = shard; e < opts.episodes; e += jobs) {
        episodes[e] = run_episode(policy, env, derive_seed(opts.seed, e), opts.behavior, want_trace);
      }
    } catch (...) {
      errors[shard] = std::current_exception();
    }
  };
  if (jobs == 1) {
    worker(0);
  } else {
    std::vector<std::thread> threads;
    for (std::size_t s = 0; s < jobs; ++s) threads.emplace_back(worker, s);
    for (auto& t : threads) t.join();
  }
  for (const auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }

  RolloutResult result;
  result.env = env;
  result.seed = opts.seed;
  if (want_trace) {
    result.trace.emplace();
    result.trace->network_hash = network_hash(std::get<NetworkSpec>(policy));
  }
  for (const auto& ep : episodes) {
    result.episode_rewards.push_back(ep.reward);
    result.episode_steps.push_back(ep.steps);
    result.total_steps += ep.steps;
    result.clipped_actions += ep.clipped;
    result.fallback_count += ep.fallbacks;
    if (want_trace) result.trace->merge(ep.trace);
  }
  if (!result.episode_rewards.empty()) {
    const double n = static_cast<double>(result.episode_rewards.size());
    double sum = 0.0;
    for (double r : result.episode_rewards) sum += r;
    result.mean = sum / n;
    double sq = 0.0;
    for (double r : result.episode_rewards) sq += (r - result.mean) * (r - result.mean);
    result.std = std::sqrt(sq / n);
  }
  return result;
}

ActivationTrace collect_trace(const NetworkSpec& net, EnvId env, const RolloutOptions& opts) {
  return std::move(*rollout(net, env, opts).trace);
}

nlohmann::ordered_json rollout_to_json(const RolloutResult& r) {
  nlohmann::ordered_json j;
  j["env"] = to_string(r.env);
  j["seed"] = r.seed;
  j["episodes"] = r.episode_rewards.size();
  j["mean"] = r.mean;
  j["std"] = r.std;
  j["total_steps"] = r.total_steps;
  j["clipped_actions"] = r.clipped_actions;
  j["fallback_count"] = r.fallback_count;
  if (r.trace) j["distinct_patterns"] = r.trace->distinct();
  j["episode_rewards"] = r.episode_rewards;
  j["episode_steps"] = r.episode_steps;
  return j;
}

Policy load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(fmt::format("cannot open policy file '{}'", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
  }
  const std::string kind = j.is_object() ? j.value("kind", std::string()) : std::string();
  if (kind == "pid") return pid_policy_from_json(j);
  if (kind == "oblique_tree" || (j.is_object() && j.contains("root"))) return tree_from_json(j);
  return network_from_json(j);
}

}  // namespace otr
