#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "otr/network.hpp"
#include "otr/pid_policy.hpp"
#include "otr/rng.hpp"
#include "otr/tree.hpp"

namespace otr {

enum class EnvId { mountain_car_continuous, pendulum };

EnvId parse_env_id(std::string_view name);
std::string_view to_string(EnvId id);

struct EnvInfo {
  std::size_t obs_dim;
  std::size_t action_dim;
  double action_low;
  double action_high;
  int max_steps;
};

const EnvInfo& env_info(EnvId id);

struct MountainCarState {
  double position = 0.0;
  double velocity = 0.0;
};

/// theta is measured from upright; the observation is (cos, sin, theta_dot).
struct PendulumState {
  double theta = 0.0;
  double theta_dot = 0.0;
};

using EnvState = std::variant<MountainCarState, PendulumState>;

EnvId env_of(const EnvState& state);
std::vector<double> observe(const EnvState& state);

/// Initial-state draw. Mountain car: position = -0.6 + 0.2 * u. Pendulum:
/// theta = -pi + 2 pi * u1, then theta_dot = -1 + 2 * u2. u = rng.uniform01().
EnvState reset_state(EnvId id, SplitMix64& rng);

struct StepResult {
  EnvState next;
  double reward = 0.0;
  /// Goal reached (mountain car). Step limits are the caller's business.
  bool terminated = false;
  bool action_clipped = false;
};

/// Deterministic transition; actions outside the bounds are clipped first
/// and the reward is charged on the clipped action.
StepResult env_step(const EnvState& state, std::span<const double> action);

using Policy = std::variant<NetworkSpec, ObliqueTree, PidPolicySpec>;

/// Which actions drive the environment while a trace is collected.
enum class Behavior { policy, uniform_random };

struct RolloutOptions {
  std::size_t episodes = 100;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  Behavior behavior = Behavior::policy;
};

struct RolloutResult {
  EnvId env = EnvId::mountain_car_continuous;
  std::uint64_t seed = 0;
  std::vector<double> episode_rewards;
  std::vector<std::size_t> episode_steps;
  double mean = 0.0;
  /// Population standard deviation.
  double std = 0.0;
  std::size_t total_steps = 0;
  std::size_t clipped_actions = 0;
  /// Network policies only.
  std::optional<ActivationTrace> trace;
  /// Pruned-tree policies only: steps that used the fallback route.
  std::size_t fallback_count = 0;
};

/// Episode e starts from reset_state(env, SplitMix64(derive_seed(seed, e))).
RolloutResult rollout(const Policy& policy, EnvId env, const RolloutOptions& opts);

ActivationTrace collect_trace(const NetworkSpec& net, EnvId env, const RolloutOptions& opts);

nlohmann::ordered_json rollout_to_json(const RolloutResult& r);

/// Loads a network, tree or PID policy file, telling them apart by content.
Policy load_policy(const std::filesystem::path& path);

}  // namespace otr
