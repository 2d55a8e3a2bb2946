#include "otr/pid_policy.hpp"

#include <fstream>

#include <fmt/format.h>

#include "otr/errors.hpp"

namespace otr {

void PidState::push(std::span<const double> state) {
  history_.emplace_back(state.begin(), state.end());
  while (history_.size() > capacity_) history_.pop_front();
}

PidFeatures pid_features(std::span<const double> epsilon, std::span<const double> state,
                         const PidState& history) {
  const std::size_t n = epsilon.size();
  if (state.size() != n) {
    throw DimensionError(fmt::format("state has {} entries, stable point has {}", state.size(), n));
  }
  PidFeatures f;
  f.proportional.resize(n);
  f.integral.assign(n, 0.0);
  f.derivative.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) f.proportional[i] = epsilon[i] - state[i];
  for (const auto& past : history.history()) {
    if (past.size() != n) throw DimensionError("history entry width differs from the state");
    for (std::size_t i = 0; i < n; ++i) f.integral[i] += epsilon[i] - past[i];
  }
  if (!history.empty()) {
    const auto& last = history.last();
    for (std::size_t i = 0; i < n; ++i) f.derivative[i] = last[i] - state[i];
  }
  return f;
}

std::size_t PidPolicySpec::theta_width() const {
  return std::visit(
      [](const auto& src) -> std::size_t {
        using T = std::decay_t<decltype(src)>;
        if constexpr (std::is_same_v<T, ObliqueTree>) {
          return src.output_dim;
        } else {
          return src.output_dim();
        }
      },
      theta);
}

void validate(const PidPolicySpec& spec) {
  if (spec.epsilon.empty()) throw ShapeError("PID stable point is empty");
  if (spec.history_len == 0) throw ShapeError("PID history length must be at least 1");
  if (spec.action_dim == 0) throw ShapeError("PID action dimension must be at least 1");
  const std::size_t input = std::visit([](const auto& src) { return src.input_dim; }, spec.theta);
  if (input != spec.state_dim()) {
    throw ThetaShapeError(fmt::format("gain source reads {} inputs but the state has {}", input,
                                      spec.state_dim()));
  }
  const std::size_t width = spec.theta_width();
  const std::size_t full = 3 * spec.action_dim * spec.state_dim();
  if (width != full && width != 3 * spec.action_dim) {
    throw ThetaShapeError(fmt::format("gain source produces {} values; expected {} or {}", width,
                                      full, 3 * spec.action_dim));
  }
  const TaskKind task = std::visit([](const auto& src) { return src.task; }, spec.theta);
  if (task != TaskKind::regression) throw ThetaShapeError("gain source must be a regression model");
}

std::vector<double> pid_gains(const PidPolicySpec& spec, std::span<const double> state,
                              bool* fallback) {
  if (const auto* tree = std::get_if<ObliqueTree>(&spec.theta)) {
    Prediction p = infer(*tree, state);
    if (p.unresolved) throw Error("gain tree reached a pruned leaf with no fallback");
    if (fallback != nullptr) *fallback = p.fallback;
    return std::move(p.value);
  }
  if (fallback != nullptr) *fallback = false;
  return forward(std::get<NetworkSpec>(spec.theta), state);
}

PidStep pid_act(const PidPolicySpec& spec, std::span<const double> state, const PidState& st) {
  const PidFeatures f = pid_features(spec.epsilon, state, st);
  PidStep step{{}, st, false};
  const std::vector<double> theta = pid_gains(spec, state, &step.fallback);
  const std::size_t n = spec.state_dim();
  const bool scalar = theta.size() == 3 * spec.action_dim;
  if (!scalar && theta.size() != 3 * spec.action_dim * n) {
    throw ThetaShapeError(fmt::format("gain source produced {} values", theta.size()));
  }
  const std::size_t block = scalar ? 1 : n;
  const std::vector<double>* features[3] = {&f.proportional, &f.integral, &f.derivative};
  step.action.assign(spec.action_dim, 0.0);
  for (std::size_t a = 0; a < spec.action_dim; ++a) {
    double u = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      const std::size_t base = (a * 3 + k) * block;
      for (std::size_t i = 0; i < n; ++i) u += theta[base + (scalar ? 0 : i)] * (*features[k])[i];
    }
    step.action[a] = u;
  }
  step.next.push(state);
  return step;
}

PidPolicySpec pid_policy_from_json(const nlohmann::json& j) {
  if (!j.is_object() || j.value("kind", std::string()) != "pid") {
    throw ParseError("PID policy file must have \"kind\": \"pid\"");
  }
  PidPolicySpec spec;
  try {
    spec.epsilon = j.at("epsilon").get<std::vector<double>>();
    spec.history_len = j.value("history_len", std::size_t{5});
    spec.action_dim = j.value("action_dim", std::size_t{1});
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(fmt::format("malformed PID policy: {}", e.what()));
  }
  if (j.contains("theta_tree")) {
    spec.theta = tree_from_json(j["theta_tree"]);
  } else if (j.contains("theta_network")) {
    spec.theta = network_from_json(j["theta_network"]);
  } else {
    throw ParseError("PID policy needs theta_tree or theta_network");
  }
  validate(spec);
  return spec;
}

nlohmann::ordered_json pid_policy_to_json(const PidPolicySpec& spec) {
  nlohmann::ordered_json j;
  j["kind"] = "pid";
  j["epsilon"] = spec.epsilon;
  j["history_len"] = spec.history_len;
  j["action_dim"] = spec.action_dim;
  if (const auto* tree = std::get_if<ObliqueTree>(&spec.theta)) {
    j["theta_tree"] = tree_to_json(*tree);
  } else {
    j["theta_network"] = network_to_json(std::get<NetworkSpec>(spec.theta));
  }
  return j;
}

PidPolicySpec load_pid_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(fmt::format("cannot open policy file '{}'", path.string()));
  try {
    return pid_policy_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void save_pid_policy(const PidPolicySpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write '{}'", path.string()));
  out << pid_policy_to_json(spec).dump(2) << '\n';
}

}  // namespace otr
