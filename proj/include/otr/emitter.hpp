#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "otr/translator.hpp"
#include "otr/tree.hpp"

namespace otr {

/// How to render leaves of a tree whose outputs are PID gains.
struct PidLayout {
  std::size_t state_dim = 0;
  std::size_t action_dim = 1;
};

struct EmitOptions {
  /// Variable names, one per input; x1..xd when empty.
  std::vector<std::string> names;
  int precision = 10;
  /// Terms with |coefficient| <= this are omitted. 0 prints every nonzero term.
  double drop_threshold = 0.0;
  std::optional<PidLayout> pid;
};

std::vector<std::string> default_names(std::size_t dim);

/// Decimal rendering with `precision` significant digits; no exponent below
/// 1e6 in magnitude, trailing zeros trimmed.
std::string format_number(double value, int precision);

/// Renders the tree in the if-then-else DSL:
///
///   E ::= C | if B then E else E
///   B ::= L <= 0
///   C ::= L | [L, ...] | tanh(C) | class N | pruned | PID
///   PID ::= T * P + T * I + T * D      (T ::= [L, ...] | (L); {PID, ...} for
///                                       several action dimensions)
///   L ::= linear expression over the variable names, bias first
std::string emit_program(const ObliqueTree& tree, const EmitOptions& opts = {});

/// Parsed DSL program, evaluable without the tree it came from.
class Program {
 public:
  struct Linear {
    std::vector<double> coef;
    double bias = 0.0;
  };
  struct If {
    Linear test;
    std::size_t then_branch = 0;
    std::size_t else_branch = 0;
  };
  struct Value {
    std::vector<Linear> outputs;
    bool tanh = false;
  };
  struct Pid {
    /// Per action dimension: (theta_P, theta_I, theta_D), each a list of
    /// linear expressions (one per state dim, or a single scalar gain).
    std::vector<std::array<std::vector<Linear>, 3>> actions;
  };
  struct Label {
    std::size_t label = 0;
  };
  struct Pruned {};
  using Node = std::variant<If, Value, Pid, Label, Pruned>;

  struct Result {
    /// Regression outputs, or flattened PID gains (theta_P | theta_I | theta_D
    /// per action), matching what the source tree's leaf returns.
    std::vector<double> value;
    std::optional<std::size_t> label;
    bool pruned = false;
  };

  Result evaluate(std::span<const double> x) const;

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<std::string>& names() const { return names_; }

 private:
  friend class ProgramParser;
  std::vector<Node> nodes_;  // nodes_[0] is the root
  std::vector<std::string> names_;
};

/// Parses text produced by emit_program (or written by hand in the same
/// grammar). Throws ParseError with a line/column on malformed input.
Program parse_program(std::string_view text, std::vector<std::string> names);

struct RoundTripReport {
  std::size_t samples = 0;
  std::size_t compared = 0;
  /// Samples skipped because a decision on the path sits within rounding
  /// distance of its threshold, so the printed program may branch the other way.
  std::size_t near_boundary = 0;
  std::size_t pruned = 0;
  std::size_t mismatches = 0;
  /// Largest |program - tree| divided by the sample's rounding scale.
  double max_scaled_error = 0.0;
  bool pass = true;
};

/// Emits, re-parses and evaluates the program against infer(tree) on sampled
/// inputs. A value passes when |program - tree| <= 10^(1 - precision) * scale,
/// where scale = max(1, sum_j |p_j x_j| + |v|) for the leaf row being compared.
/// Terms removed by drop_threshold are zeroed in the reference tree first.
RoundTripReport round_trip_check(const ObliqueTree& tree, const EmitOptions& opts,
                                 const BoxSampler& sampler, std::size_t n_samples,
                                 std::uint64_t seed);

nlohmann::ordered_json round_trip_to_json(const RoundTripReport& r);

struct ZeroOutResult {
  ObliqueTree tree;
  std::size_t zeroed = 0;
  std::size_t samples = 0;
  /// Largest output change over the sample set (label flips count as 1).
  double max_output_change = 0.0;
};

/// Sets every decision and leaf coefficient with 0 < |p| <= epsilon to
/// exactly zero. Biases are left alone.
ZeroOutResult zero_out(const ObliqueTree& tree, double epsilon,
                       const std::optional<BoxSampler>& sampler = std::nullopt,
                       std::size_t n_samples = 1000, std::uint64_t seed = 0);

using InputBox = std::vector<std::pair<double, double>>;

struct NodeDominance {
  NodeId node = 0;
  /// |p_i| * max(|lo_i|, |hi_i|) per input.
  std::vector<double> contributions;
  double bias_contribution = 0.0;
  /// Inputs by decreasing contribution.
  std::vector<std::size_t> ranking;
  /// Unset when every coefficient is zero.
  std::optional<std::size_t> dominant;
  std::vector<bool> droppable;
  bool bias_droppable = false;
};

struct DominanceReport {
  double tau = 0.1;
  std::vector<NodeDominance> nodes;
};

DominanceReport dominance_report(const ObliqueTree& tree, const InputBox& box, double tau = 0.1);
nlohmann::ordered_json dominance_to_json(const DominanceReport& report,
                                         const std::vector<std::string>& names);

}  // namespace otr
