#pragma once

#include <cstddef>
#include <deque>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "otr/network.hpp"
#include "otr/tree.hpp"

namespace otr {

/// Bounded history of past states, oldest first.
class PidState {
 public:
  explicit PidState(std::size_t capacity = 5) : capacity_(capacity) {}

  void push(std::span<const double> state);
  bool empty() const { return history_.empty(); }
  std::size_t size() const { return history_.size(); }
  std::size_t capacity() const { return capacity_; }
  const std::deque<std::vector<double>>& history() const { return history_; }
  /// Most recent entry.
  const std::vector<double>& last() const { return history_.back(); }

 private:
  std::size_t capacity_;
  std::deque<std::vector<double>> history_;
};

struct PidFeatures {
  std::vector<double> proportional;  ///< eps - s
  std::vector<double> integral;      ///< sum over history of (eps - h)
  std::vector<double> derivative;    ///< last(h) - s, zero on an empty history
};

PidFeatures pid_features(std::span<const double> epsilon, std::span<const double> state,
                         const PidState& history);

using ThetaSource = std::variant<ObliqueTree, NetworkSpec>;

/// Discretized PID controller whose gains come from a tree (or network)
/// evaluated on the raw state. Gain vector layout, per action dimension:
/// theta_P | theta_I | theta_D, each either state_dim wide or one scalar
/// that multiplies every state dimension.
struct PidPolicySpec {
  std::vector<double> epsilon;
  std::size_t history_len = 5;
  std::size_t action_dim = 1;
  ThetaSource theta;

  std::size_t state_dim() const { return epsilon.size(); }
  std::size_t theta_width() const;
  bool scalar_gains() const { return theta_width() == 3 * action_dim; }
};

void validate(const PidPolicySpec& spec);

struct PidStep {
  std::vector<double> action;
  PidState next;
  /// The gain tree took a pruned-leaf fallback.
  bool fallback = false;
};

/// Gains at s, then action_a = theta_P.P + theta_I.I + theta_D.D. The
/// returned state has s appended (evicting the oldest beyond history_len).
PidStep pid_act(const PidPolicySpec& spec, std::span<const double> state, const PidState& st);

/// Raw gain vector at s.
std::vector<double> pid_gains(const PidPolicySpec& spec, std::span<const double> state,
                              bool* fallback = nullptr);

PidPolicySpec pid_policy_from_json(const nlohmann::json& j);
nlohmann::ordered_json pid_policy_to_json(const PidPolicySpec& spec);
PidPolicySpec load_pid_policy(const std::filesystem::path& path);
void save_pid_policy(const PidPolicySpec& spec, const std::filesystem::path& path);

}  // namespace otr
