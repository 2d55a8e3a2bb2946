#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "otr/matrix.hpp"
#include "otr/network.hpp"

namespace otr {

using NodeId = std::uint32_t;

/// Neuron index carried by decisions that do not test a hidden neuron
/// (output-sign and argmax nodes, hand-written trees).
inline constexpr std::int32_t kNoNeuron = -1;

struct DecisionNode {
  std::vector<double> p;
  double v = 0.0;
  /// Global hidden-neuron index this node tests, or kNoNeuron.
  std::int32_t neuron = kNoNeuron;
  NodeId left = 0;
  NodeId right = 0;

  bool operator==(const DecisionNode&) const = default;
};

/// Returns activation(P_out * x + v_out); one row per output dimension.
struct RegressionLeaf {
  Matrix p_out;
  std::vector<double> v_out;
  LeafActivation activation = LeafActivation::identity;

  bool operator==(const RegressionLeaf&) const = default;
};

struct LabelLeaf {
  std::size_t label = 0;
  bool operator==(const LabelLeaf&) const = default;
};

/// Stand-in for a removed subtree. `fallback` names the materialized sibling
/// that inference is rerouted to.
struct PrunedLeaf {
  std::optional<NodeId> fallback;
  std::uint64_t visit_hint = 0;

  bool operator==(const PrunedLeaf&) const = default;
};

using NodeBody = std::variant<DecisionNode, RegressionLeaf, LabelLeaf, PrunedLeaf>;

struct TreeNode {
  NodeBody body;
  /// Trace visits that passed through this node (0 when built without a trace).
  std::uint64_t visits = 0;

  bool operator==(const TreeNode&) const = default;
};

struct TreeMeta {
  std::string network_hash;
  /// "full", "trace_driven", "pruned", "topk" or "manual".
  std::string mode = "manual";
  std::string trace_id;
  std::size_t hidden_neurons = 0;

  bool operator==(const TreeMeta&) const = default;
};

/// Oblique decision tree stored as a preorder arena (node 0 is the root, a
/// decision's left subtree directly follows it). Decision semantics:
/// p.x + v <= 0 goes left, otherwise right.
struct ObliqueTree {
  std::vector<TreeNode> nodes;
  std::size_t input_dim = 0;
  std::size_t output_dim = 1;
  TaskKind task = TaskKind::regression;
  TreeMeta meta;

  const TreeNode& node(NodeId id) const { return nodes.at(id); }
  bool operator==(const ObliqueTree&) const = default;
};

/// Checks arena shape, preorder numbering and leaf/task consistency.
void validate(const ObliqueTree& tree);

/// Same node kinds and parameters in the same places; ignores visit counts
/// and provenance.
bool structurally_equal(const ObliqueTree& a, const ObliqueTree& b);

/// Multiset of activation patterns observed on one network.
struct ActivationTrace {
  std::map<std::string, std::uint64_t> pattern_counts;
  std::string network_hash;
  std::uint64_t total_visits = 0;

  void add(const ActivationPattern& pattern, std::uint64_t count = 1);
  void merge(const ActivationTrace& other);
  std::size_t distinct() const { return pattern_counts.size(); }
  std::size_t pattern_length() const;
  /// Digest of the trace contents, recorded in trees derived from it.
  std::string id() const;

  bool operator==(const ActivationTrace&) const = default;
};

nlohmann::ordered_json trace_to_json(const ActivationTrace& trace);
ActivationTrace trace_from_json(const nlohmann::json& j);
ActivationTrace load_trace(const std::filesystem::path& path);
void save_trace(const ActivationTrace& trace, const std::filesystem::path& path);

/// Throws TraceMismatch unless the trace was recorded on `net`.
void check_trace_matches(const ActivationTrace& trace, const NetworkSpec& net);

struct Prediction {
  std::vector<double> value;  ///< regression output (empty for labels)
  std::optional<std::size_t> label;
  /// A PrunedLeaf was reached and the fallback route was taken.
  bool fallback = false;
  /// Inference reached a PrunedLeaf with nowhere to fall back to.
  bool unresolved = false;
  NodeId leaf = 0;
};

Prediction infer(const ObliqueTree& tree, std::span<const double> x);

/// Node ids from root to the leaf reached by ordinary routing (no fallback).
std::vector<NodeId> inference_path(const ObliqueTree& tree, std::span<const double> x);

/// Hidden-neuron bits decided along x's inference path, in path order.
ActivationPattern path_pattern(const ObliqueTree& tree, std::span<const double> x);

/// Replaces every subtree reached by no traced pattern with a PrunedLeaf.
ObliqueTree prune_unvisited(const ObliqueTree& tree, const ActivationTrace& trace);

/// Keeps the k most visited patterns (ties: lexicographically smaller bit
/// string first); everything else becomes a PrunedLeaf carrying its visits.
ObliqueTree prune_topk(const ObliqueTree& tree, const ActivationTrace& trace, std::size_t k);

/// Patterns ranked by descending count, ties by ascending bit string.
std::vector<std::string> ranked_patterns(const ActivationTrace& trace);

struct TreeStats {
  std::size_t node_count = 0;
  std::size_t decision_count = 0;
  std::size_t leaf_count = 0;  ///< materialized (non-pruned) leaves
  std::size_t pruned_count = 0;
  std::size_t max_depth = 0;
  double effective_depth = 0.0;  ///< log2(leaf_count)
  std::size_t pattern_count = 0;  ///< distinct hidden-activation paths materialized
  std::vector<double> node_sparsity;  ///< per decision node, preorder
  double mean_sparsity = 0.0;
};

TreeStats stats(const ObliqueTree& tree, double sparse_epsilon = 1e-8);
nlohmann::ordered_json stats_to_json(const TreeStats& s);

nlohmann::ordered_json tree_to_json(const ObliqueTree& tree);
ObliqueTree tree_from_json(const nlohmann::json& j);
ObliqueTree load_tree(const std::filesystem::path& path);
void save_tree(const ObliqueTree& tree, const std::filesystem::path& path);

}  // namespace otr
