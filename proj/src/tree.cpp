#include "otr/tree.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "detail.hpp"
#include "otr/errors.hpp"

namespace otr {

namespace detail {

NodeId subtree_end(const ObliqueTree& tree, NodeId id) {
  // Preorder arena: the subtree ends after the right child's subtree.
  while (const auto* d = std::get_if<DecisionNode>(&tree.nodes[id].body)) id = d->right;
  return id + 1;
}

NodeId copy_subtree(const ObliqueTree& src, NodeId id, ObliqueTree& dst) {
  const NodeId end = subtree_end(src, id);
  const NodeId base = static_cast<NodeId>(dst.nodes.size());
  const auto shift = [&](NodeId n) { return n - id + base; };
  for (NodeId i = id; i < end; ++i) {
    TreeNode copy = src.nodes[i];
    if (auto* d = std::get_if<DecisionNode>(&copy.body)) {
      d->left = shift(d->left);
      d->right = shift(d->right);
    } else if (auto* p = std::get_if<PrunedLeaf>(&copy.body); p && p->fallback) {
      if (*p->fallback >= id && *p->fallback < end) {
        p->fallback = shift(*p->fallback);
      } else {
        p->fallback.reset();
      }
    }
    dst.nodes.push_back(std::move(copy));
  }
  return base;
}

void link_fallbacks(ObliqueTree& tree) {
  for (auto& node : tree.nodes) {
    const auto* d = std::get_if<DecisionNode>(&node.body);
    if (d == nullptr) continue;
    const NodeId left = d->left;
    const NodeId right = d->right;
    auto* lp = std::get_if<PrunedLeaf>(&tree.nodes[left].body);
    auto* rp = std::get_if<PrunedLeaf>(&tree.nodes[right].body);
    if (lp != nullptr && rp == nullptr) lp->fallback = right;
    if (rp != nullptr && lp == nullptr) rp->fallback = left;
  }
}

}  // namespace detail

namespace {

bool is_hidden_decision(const TreeNode& node) {
  const auto* d = std::get_if<DecisionNode>(&node.body);
  return d != nullptr && d->neuron != kNoNeuron;
}

}  // namespace

void validate(const ObliqueTree& tree) {
  if (tree.nodes.empty()) throw ShapeError("tree has no nodes");
  if (tree.input_dim == 0) throw ShapeError("tree input_dim must be positive");
  std::size_t visited = 0;
  // Returns one past the subtree end, checking preorder numbering on the way.
  auto walk = [&](auto&& self, NodeId id) -> NodeId {
    if (id >= tree.nodes.size()) throw ShapeError(fmt::format("node {} out of range", id));
    ++visited;
    const NodeBody& body = tree.nodes[id].body;
    if (const auto* d = std::get_if<DecisionNode>(&body)) {
      if (d->p.size() != tree.input_dim) {
        throw ShapeError(fmt::format("decision node {}: p has {} entries, expected {}", id,
                                     d->p.size(), tree.input_dim));
      }
      if (!std::isfinite(d->v)) throw ShapeError(fmt::format("node {}: non-finite bias", id));
      if (d->left != id + 1) throw ShapeError(fmt::format("node {}: arena is not preorder", id));
      const NodeId after_left = self(self, d->left);
      if (d->right != after_left) {
        throw ShapeError(fmt::format("node {}: arena is not preorder", id));
      }
      return self(self, d->right);
    }
    if (const auto* r = std::get_if<RegressionLeaf>(&body)) {
      if (tree.task != TaskKind::regression) {
        throw ShapeError(fmt::format("node {}: regression leaf in a classification tree", id));
      }
      if (r->p_out.cols() != tree.input_dim || r->p_out.rows() != tree.output_dim ||
          r->v_out.size() != tree.output_dim) {
        throw ShapeError(fmt::format("node {}: leaf model is {}x{}, expected {}x{}", id,
                                     r->p_out.rows(), r->p_out.cols(), tree.output_dim,
                                     tree.input_dim));
      }
    } else if (const auto* l = std::get_if<LabelLeaf>(&body)) {
      if (tree.task == TaskKind::regression) {
        throw ShapeError(fmt::format("node {}: label leaf in a regression tree", id));
      }
      const std::size_t classes = tree.task == TaskKind::classification_binary ? 2 : tree.output_dim;
      if (l->label >= classes) throw ShapeError(fmt::format("node {}: label out of range", id));
    } else if (const auto* p = std::get_if<PrunedLeaf>(&body)) {
      if (p->fallback && *p->fallback >= tree.nodes.size()) {
        throw ShapeError(fmt::format("node {}: fallback out of range", id));
      }
    }
    return id + 1;
  };
  walk(walk, 0);
  if (visited != tree.nodes.size()) {
    throw ShapeError(fmt::format("tree arena holds {} unreachable nodes",
                                 tree.nodes.size() - visited));
  }
}

bool structurally_equal(const ObliqueTree& a, const ObliqueTree& b) {
  if (a.input_dim != b.input_dim || a.output_dim != b.output_dim || a.task != b.task ||
      a.nodes.size() != b.nodes.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    const NodeBody& x = a.nodes[i].body;
    const NodeBody& y = b.nodes[i].body;
    if (x.index() != y.index()) return false;
    if (std::holds_alternative<PrunedLeaf>(x)) continue;
    if (x != y) return false;
  }
  return true;
}

// --- traces -----------------------------------------------------------------

void ActivationTrace::add(const ActivationPattern& pattern, std::uint64_t count) {
  if (count == 0) return;
  if (!pattern_counts.empty() && pattern.size() != pattern_length()) {
    throw TraceMismatch(fmt::format("pattern of length {} added to a trace of length {}",
                                    pattern.size(), pattern_length()));
  }
  pattern_counts[pattern.str()] += count;
  total_visits += count;
}

void ActivationTrace::merge(const ActivationTrace& other) {
  for (const auto& [bits, count] : other.pattern_counts) add(ActivationPattern(bits), count);
}

std::size_t ActivationTrace::pattern_length() const {
  return pattern_counts.empty() ? 0 : pattern_counts.begin()->first.size();
}

std::string ActivationTrace::id() const { return detail::fnv1a_hex(trace_to_json(*this).dump()); }

nlohmann::ordered_json trace_to_json(const ActivationTrace& trace) {
  nlohmann::ordered_json j;
  j["network_hash"] = trace.network_hash;
  j["total_visits"] = trace.total_visits;
  j["patterns"] = nlohmann::ordered_json::array();
  for (const auto& [bits, count] : trace.pattern_counts) {
    nlohmann::ordered_json p;
    p["bits"] = bits;
    p["count"] = count;
    j["patterns"].push_back(std::move(p));
  }
  return j;
}

ActivationTrace trace_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("network_hash") || !j.contains("patterns")) {
    throw ParseError("trace file needs network_hash and patterns");
  }
  ActivationTrace trace;
  trace.network_hash = j["network_hash"].get<std::string>();
  for (const auto& p : j["patterns"]) {
    const auto count = p.at("count").get<std::uint64_t>();
    if (count == 0) throw ParseError("trace pattern counts must be at least 1");
    const ActivationPattern pattern(p.at("bits").get<std::string>());
    if (trace.pattern_counts.contains(pattern.str())) {
      throw ParseError(fmt::format("duplicate trace pattern {}", pattern.str()));
    }
    trace.add(pattern, count);
  }
  if (j.contains("total_visits") && j["total_visits"].get<std::uint64_t>() != trace.total_visits) {
    throw ParseError("trace total_visits does not equal the sum of pattern counts");
  }
  return trace;
}

ActivationTrace load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(fmt::format("cannot open trace file '{}'", path.string()));
  try {
    return trace_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

void save_trace(const ActivationTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write '{}'", path.string()));
  out << trace_to_json(trace).dump(2) << '\n';
}

void check_trace_matches(const ActivationTrace& trace, const NetworkSpec& net) {
  const std::string hash = network_hash(net);
  if (trace.network_hash != hash) {
    throw TraceMismatch(fmt::format("trace was recorded on network {}, not {}",
                                    trace.network_hash, hash));
  }
  if (trace.distinct() > 0 && trace.pattern_length() != net.hidden_neuron_count()) {
    throw TraceMismatch(fmt::format("trace patterns have {} bits but the network has {} hidden "
                                    "neurons",
                                    trace.pattern_length(), net.hidden_neuron_count()));
  }
}

// --- inference --------------------------------------------------------------

namespace {

void check_dim(const ObliqueTree& tree, std::span<const double> x) {
  if (x.size() != tree.input_dim) {
    throw DimensionError(
        fmt::format("input has {} entries, tree expects {}", x.size(), tree.input_dim));
  }
}

bool goes_left(const DecisionNode& d, std::span<const double> x) { return dot(d.p, x) + d.v <= 0.0; }

// Follows the most-visited materialized child until a leaf.
NodeId greedy_descend(const ObliqueTree& tree, NodeId id) {
  while (const auto* d = std::get_if<DecisionNode>(&tree.nodes[id].body)) {
    const TreeNode& l = tree.nodes[d->left];
    const TreeNode& r = tree.nodes[d->right];
    const bool l_pruned = std::holds_alternative<PrunedLeaf>(l.body);
    const bool r_pruned = std::holds_alternative<PrunedLeaf>(r.body);
    if (l_pruned != r_pruned) {
      id = l_pruned ? d->right : d->left;
    } else {
      id = r.visits > l.visits ? d->right : d->left;
    }
  }
  return id;
}

}  // namespace

Prediction infer(const ObliqueTree& tree, std::span<const double> x) {
  check_dim(tree, x);
  Prediction pred;
  NodeId id = 0;
  for (std::size_t hops = 0; hops <= tree.nodes.size(); ++hops) {
    const NodeBody& body = tree.nodes[id].body;
    if (const auto* d = std::get_if<DecisionNode>(&body)) {
      id = goes_left(*d, x) ? d->left : d->right;
      continue;
    }
    pred.leaf = id;
    if (const auto* r = std::get_if<RegressionLeaf>(&body)) {
      pred.value.resize(r->v_out.size());
      for (std::size_t k = 0; k < pred.value.size(); ++k) {
        double y = dot(r->p_out.row(k), x) + r->v_out[k];
        pred.value[k] = r->activation == LeafActivation::tanh ? std::tanh(y) : y;
      }
      return pred;
    }
    if (const auto* l = std::get_if<LabelLeaf>(&body)) {
      pred.label = l->label;
      return pred;
    }
    const auto& pruned = std::get<PrunedLeaf>(body);
    if (!pruned.fallback) {
      pred.unresolved = true;
      return pred;
    }
    pred.fallback = true;
    id = greedy_descend(tree, *pruned.fallback);
  }
  pred.unresolved = true;
  return pred;
}

std::vector<NodeId> inference_path(const ObliqueTree& tree, std::span<const double> x) {
  check_dim(tree, x);
  std::vector<NodeId> path{0};
  while (const auto* d = std::get_if<DecisionNode>(&tree.nodes[path.back()].body)) {
    path.push_back(goes_left(*d, x) ? d->left : d->right);
  }
  return path;
}

ActivationPattern path_pattern(const ObliqueTree& tree, std::span<const double> x) {
  ActivationPattern pattern;
  const auto path = inference_path(tree, x);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    const auto& d = std::get<DecisionNode>(tree.nodes[path[i]].body);
    if (d.neuron != kNoNeuron) pattern.push_back(path[i + 1] == d.right);
  }
  return pattern;
}

// --- pruning ----------------------------------------------------------------

namespace {

struct TracedPattern {
  const std::string* bits;
  std::uint64_t count;
  bool kept;
};

class Pruner {
 public:
  explicit Pruner(const ObliqueTree& src) : src_(src) {
    out_.input_dim = src.input_dim;
    out_.output_dim = src.output_dim;
    out_.task = src.task;
    out_.meta = src.meta;
  }

  ObliqueTree run(const std::vector<TracedPattern>& patterns) {
    build(0, patterns);
    detail::link_fallbacks(out_);
    return std::move(out_);
  }

 private:
  NodeId emit(TreeNode node) {
    out_.nodes.push_back(std::move(node));
    return static_cast<NodeId>(out_.nodes.size() - 1);
  }

  NodeId build(NodeId src_id, const std::vector<TracedPattern>& here) {
    std::uint64_t visits = 0;
    bool any_kept = false;
    for (const auto& p : here) {
      visits += p.count;
      any_kept = any_kept || p.kept;
    }
    const TreeNode& node = src_.nodes[src_id];
    if (!any_kept || std::holds_alternative<PrunedLeaf>(node.body)) {
      return emit({PrunedLeaf{std::nullopt, visits}, visits});
    }
    if (!is_hidden_decision(node)) {
      const NodeId id = detail::copy_subtree(src_, src_id, out_);
      out_.nodes[id].visits = visits;
      return id;
    }
    const auto& d = std::get<DecisionNode>(node.body);
    std::vector<TracedPattern> left, right;
    for (const auto& p : here) {
      const std::size_t bit = static_cast<std::size_t>(d.neuron);
      ((*p.bits)[bit] == '1' ? right : left).push_back(p);
    }
    const NodeId id = emit({d, visits});
    const NodeId l = build(d.left, left);
    const NodeId r = build(d.right, right);
    auto& out_d = std::get<DecisionNode>(out_.nodes[id].body);
    out_d.left = l;
    out_d.right = r;
    return id;
  }

  const ObliqueTree& src_;
  ObliqueTree out_;
};

void check_trace_matches_tree(const ActivationTrace& trace, const ObliqueTree& tree) {
  if (trace.network_hash != tree.meta.network_hash) {
    throw TraceMismatch(fmt::format("trace was recorded on network {}, tree came from {}",
                                    trace.network_hash,
                                    tree.meta.network_hash.empty() ? std::string("<unknown>")
                                                                   : tree.meta.network_hash));
  }
  if (trace.distinct() > 0 && trace.pattern_length() != tree.meta.hidden_neurons) {
    throw TraceMismatch(fmt::format("trace patterns have {} bits, tree tests {} hidden neurons",
                                    trace.pattern_length(), tree.meta.hidden_neurons));
  }
}

ObliqueTree prune_keeping(const ObliqueTree& tree, const ActivationTrace& trace,
                          const std::vector<std::string>& keep, std::string mode) {
  check_trace_matches_tree(trace, tree);
  std::vector<TracedPattern> patterns;
  patterns.reserve(trace.distinct());
  for (const auto& [bits, count] : trace.pattern_counts) {
    const bool kept = std::binary_search(keep.begin(), keep.end(), bits);
    patterns.push_back({&bits, count, kept});
  }
  ObliqueTree out = Pruner(tree).run(patterns);
  out.meta.mode = std::move(mode);
  out.meta.trace_id = trace.id();
  return out;
}

}  // namespace

std::vector<std::string> ranked_patterns(const ActivationTrace& trace) {
  std::vector<std::pair<std::string, std::uint64_t>> entries(trace.pattern_counts.begin(),
                                                             trace.pattern_counts.end());
  std::stable_sort(entries.begin(), entries.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> out;
  out.reserve(entries.size());
  for (auto& e : entries) out.push_back(std::move(e.first));
  return out;
}

ObliqueTree prune_unvisited(const ObliqueTree& tree, const ActivationTrace& trace) {
  std::vector<std::string> keep;
  for (const auto& [bits, count] : trace.pattern_counts) keep.push_back(bits);
  return prune_keeping(tree, trace, keep, "pruned");
}

ObliqueTree prune_topk(const ObliqueTree& tree, const ActivationTrace& trace, std::size_t k) {
  if (k == 0) throw Error("prune_topk needs k >= 1");
  auto keep = ranked_patterns(trace);
  if (keep.size() > k) keep.resize(k);
  std::sort(keep.begin(), keep.end());
  return prune_keeping(tree, trace, keep, "topk");
}

// --- statistics -------------------------------------------------------------

TreeStats stats(const ObliqueTree& tree, double sparse_epsilon) {
  TreeStats s;
  s.node_count = tree.nodes.size();
  auto walk = [&](auto&& self, NodeId id, std::size_t depth, bool in_hidden_prefix) -> void {
    const TreeNode& node = tree.nodes[id];
    const bool hidden = is_hidden_decision(node);
    const bool pruned = std::holds_alternative<PrunedLeaf>(node.body);
    if (in_hidden_prefix && !hidden && !pruned) ++s.pattern_count;
    if (const auto* d = std::get_if<DecisionNode>(&node.body)) {
      ++s.decision_count;
      std::size_t zeros = 0;
      for (double p : d->p) zeros += std::abs(p) <= sparse_epsilon ? 1 : 0;
      s.node_sparsity.push_back(d->p.empty() ? 0.0 : static_cast<double>(zeros) / d->p.size());
      self(self, d->left, depth + 1, in_hidden_prefix && hidden);
      self(self, d->right, depth + 1, in_hidden_prefix && hidden);
      return;
    }
    if (pruned) {
      ++s.pruned_count;
      return;
    }
    ++s.leaf_count;
    s.max_depth = std::max(s.max_depth, depth);
  };
  walk(walk, 0, 0, true);
  s.effective_depth = s.leaf_count > 0 ? std::log2(static_cast<double>(s.leaf_count)) : 0.0;
  if (!s.node_sparsity.empty()) {
    double total = 0.0;
    for (double v : s.node_sparsity) total += v;
    s.mean_sparsity = total / static_cast<double>(s.node_sparsity.size());
  }
  return s;
}

nlohmann::ordered_json stats_to_json(const TreeStats& s) {
  nlohmann::ordered_json j;
  j["node_count"] = s.node_count;
  j["decision_count"] = s.decision_count;
  j["leaf_count"] = s.leaf_count;
  j["pruned_count"] = s.pruned_count;
  j["max_depth"] = s.max_depth;
  j["effective_depth"] = s.effective_depth;
  j["pattern_count"] = s.pattern_count;
  j["mean_sparsity"] = s.mean_sparsity;
  j["node_sparsity"] = s.node_sparsity;
  return j;
}

// --- persistence ------------------------------------------------------------

namespace {

nlohmann::ordered_json node_to_json(const ObliqueTree& tree, NodeId id) {
  const TreeNode& node = tree.nodes[id];
  nlohmann::ordered_json j;
  std::visit(
      [&](const auto& body) {
        using T = std::decay_t<decltype(body)>;
        if constexpr (std::is_same_v<T, DecisionNode>) {
          j["kind"] = "decision";
          j["neuron"] = body.neuron;
          j["visits"] = node.visits;
          j["p"] = body.p;
          j["v"] = body.v;
          j["left"] = node_to_json(tree, body.left);
          j["right"] = node_to_json(tree, body.right);
        } else if constexpr (std::is_same_v<T, RegressionLeaf>) {
          j["kind"] = "leaf_reg";
          j["visits"] = node.visits;
          j["p"] = body.p_out.to_rows();
          j["v"] = body.v_out;
          j["activation"] = to_string(body.activation);
        } else if constexpr (std::is_same_v<T, LabelLeaf>) {
          j["kind"] = "leaf_label";
          j["visits"] = node.visits;
          j["label"] = body.label;
        } else {
          j["kind"] = "pruned";
          j["visits"] = node.visits;
          j["visit_hint"] = body.visit_hint;
          j["fallback"] = body.fallback ? nlohmann::ordered_json(*body.fallback) : nlohmann::ordered_json(nullptr);
        }
      },
      node.body);
  return j;
}

void node_from_json(const nlohmann::json& j, ObliqueTree& tree) {
  if (!j.is_object() || !j.contains("kind")) throw ParseError("tree node lacks \"kind\"");
  const auto kind = j["kind"].get<std::string>();
  const NodeId id = static_cast<NodeId>(tree.nodes.size());
  TreeNode node;
  node.visits = j.value("visits", std::uint64_t{0});
  if (kind == "decision") {
    DecisionNode d;
    d.p = j.at("p").get<std::vector<double>>();
    d.v = j.at("v").get<double>();
    d.neuron = j.value("neuron", kNoNeuron);
    node.body = std::move(d);
    tree.nodes.push_back(std::move(node));
    const NodeId left = static_cast<NodeId>(tree.nodes.size());
    node_from_json(j.at("left"), tree);
    const NodeId right = static_cast<NodeId>(tree.nodes.size());
    node_from_json(j.at("right"), tree);
    auto& dn = std::get<DecisionNode>(tree.nodes[id].body);
    dn.left = left;
    dn.right = right;
    return;
  }
  if (kind == "leaf_reg") {
    RegressionLeaf leaf;
    const auto& pj = j.at("p");
    // A single row may be written flat.
    if (!pj.empty() && pj.front().is_number()) {
      leaf.p_out = Matrix::from_rows({pj.get<std::vector<double>>()});
    } else {
      leaf.p_out = Matrix::from_rows(pj.get<std::vector<std::vector<double>>>());
    }
    const auto& vj = j.at("v");
    leaf.v_out = vj.is_number() ? std::vector<double>{vj.get<double>()}
                                : vj.get<std::vector<double>>();
    leaf.activation = parse_leaf_activation(j.value("activation", std::string("identity")));
    node.body = std::move(leaf);
  } else if (kind == "leaf_label") {
    node.body = LabelLeaf{j.at("label").get<std::size_t>()};
  } else if (kind == "pruned") {
    PrunedLeaf p;
    p.visit_hint = j.value("visit_hint", std::uint64_t{0});
    if (j.contains("fallback") && !j["fallback"].is_null()) p.fallback = j["fallback"].get<NodeId>();
    node.body = p;
  } else {
    throw ParseError(fmt::format("unknown tree node kind '{}'", kind));
  }
  tree.nodes.push_back(std::move(node));
}

}  // namespace

nlohmann::ordered_json tree_to_json(const ObliqueTree& tree) {
  nlohmann::ordered_json j;
  j["kind"] = "oblique_tree";
  j["version"] = 1;
  j["input_dim"] = tree.input_dim;
  j["output_dim"] = tree.output_dim;
  j["task"] = to_string(tree.task);
  nlohmann::ordered_json meta;
  meta["network_hash"] = tree.meta.network_hash;
  meta["mode"] = tree.meta.mode;
  meta["trace_id"] = tree.meta.trace_id;
  meta["hidden_neurons"] = tree.meta.hidden_neurons;
  j["meta"] = std::move(meta);
  j["root"] = node_to_json(tree, 0);
  return j;
}

ObliqueTree tree_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("root") || !j.contains("input_dim")) {
    throw ParseError("tree file needs input_dim and root");
  }
  ObliqueTree tree;
  try {
    tree.input_dim = j["input_dim"].get<std::size_t>();
    tree.output_dim = j.value("output_dim", std::size_t{1});
    tree.task = parse_task(j.value("task", std::string("regression")));
    if (j.contains("meta")) {
      const auto& m = j["meta"];
      tree.meta.network_hash = m.value("network_hash", std::string());
      tree.meta.mode = m.value("mode", std::string("manual"));
      tree.meta.trace_id = m.value("trace_id", std::string());
      tree.meta.hidden_neurons = m.value("hidden_neurons", std::size_t{0});
    }
    node_from_json(j["root"], tree);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(fmt::format("malformed tree: {}", e.what()));
  }
  validate(tree);
  return tree;
}

ObliqueTree load_tree(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(fmt::format("cannot open tree file '{}'", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return tree_from_json(j);
}

void save_tree(const ObliqueTree& tree, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write '{}'", path.string()));
  out << tree_to_json(tree).dump(2) << '\n';
}

}  // namespace otr
