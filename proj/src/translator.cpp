#include "otr/translator.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include <fmt/format.h>

#include "detail.hpp"
#include "otr/errors.hpp"

namespace otr {

namespace {

/// A neuron's value written as p.x + v, valid inside one tree branch.
struct Rewrite {
  std::vector<double> p;
  double v = 0.0;
};

struct NeuronRef {
  std::size_t layer;
  std::size_t row;
};

struct TracedPattern {
  const std::string* bits;
  std::uint64_t count;
};

using PatternList = std::vector<TracedPattern>;

class Translator {
 public:
  explicit Translator(const NetworkSpec& net) : net_(net) {
    for (std::size_t l = 0; l + 1 < net.layers.size(); ++l) {
      layer_offset_.push_back(neurons_.size());
      for (std::size_t k = 0; k < net.layers[l].width(); ++k) neurons_.push_back({l, k});
    }
    layer_offset_.push_back(neurons_.size());
    out_.input_dim = net.input_dim;
    out_.output_dim = net.output_dim();
    out_.task = net.task;
    out_.meta.network_hash = network_hash(net);
    out_.meta.hidden_neurons = neurons_.size();
  }

  ObliqueTree run(const PatternList* patterns) {
    traced_ = patterns != nullptr;
    std::vector<Rewrite> done;
    done.reserve(neurons_.size());
    build(0, std::move(done), traced_ ? *patterns : PatternList{});
    if (traced_) detail::link_fallbacks(out_);
    return std::move(out_);
  }

 private:
  NodeId emit(TreeNode node) {
    out_.nodes.push_back(std::move(node));
    return static_cast<NodeId>(out_.nodes.size() - 1);
  }

  /// Row `row` of layer `layer` rewritten over x, given the rewrites of all
  /// hidden neurons already decided on this branch.
  Rewrite rewrite(std::size_t layer, std::size_t row, const std::vector<Rewrite>& done) const {
    const LayerSpec& spec = net_.layers[layer];
    const auto w = spec.weights.row(row);
    Rewrite r;
    r.p.assign(net_.input_dim, 0.0);
    std::size_t col = 0;
    std::size_t first_source = 0;
    if (layer == 0 || net_.dense) {
      std::copy_n(w.begin(), net_.input_dim, r.p.begin());
      col = net_.input_dim;
    }
    if (layer > 0 && !net_.dense) first_source = layer_offset_[layer - 1];
    const std::size_t last_source = layer_offset_[layer];
    double v = 0.0;
    for (std::size_t src = first_source; src < last_source; ++src, ++col) {
      const double weight = w[col];
      const Rewrite& in = done[src];
      for (std::size_t i = 0; i < r.p.size(); ++i) r.p[i] += weight * in.p[i];
      v += weight * in.v;
    }
    r.v = v + spec.biases[row];
    return r;
  }

  NodeId build(std::size_t neuron, std::vector<Rewrite> done, const PatternList& patterns) {
    std::uint64_t visits = 0;
    for (const auto& p : patterns) visits += p.count;
    if (traced_ && patterns.empty()) return emit({PrunedLeaf{std::nullopt, 0}, 0});
    if (neuron == neurons_.size()) return build_output(done, visits);

    const auto [layer, row] = neurons_[neuron];
    Rewrite active = rewrite(layer, row, done);
    const NodeId id = emit({DecisionNode{active.p, active.v, static_cast<std::int32_t>(neuron), 0, 0},
                            visits});

    PatternList left_patterns, right_patterns;
    for (const auto& p : patterns) {
      ((*p.bits)[neuron] == '1' ? right_patterns : left_patterns).push_back(p);
    }

    Rewrite inactive = active;
    const double scale = net_.layers[layer].activation.inactive_scale();
    for (double& c : inactive.p) c *= scale;
    inactive.v *= scale;

    std::vector<Rewrite> left_done = done;
    left_done.push_back(std::move(inactive));
    const NodeId left = build(neuron + 1, std::move(left_done), left_patterns);

    done.push_back(std::move(active));
    const NodeId right = build(neuron + 1, std::move(done), right_patterns);

    auto& d = std::get<DecisionNode>(out_.nodes[id].body);
    d.left = left;
    d.right = right;
    return id;
  }

  NodeId build_output(const std::vector<Rewrite>& done, std::uint64_t visits) {
    const std::size_t out_layer = net_.layers.size() - 1;
    std::vector<Rewrite> outputs;
    for (std::size_t k = 0; k < net_.output_dim(); ++k) outputs.push_back(rewrite(out_layer, k, done));

    switch (net_.task) {
      case TaskKind::regression: {
        RegressionLeaf leaf;
        leaf.p_out = Matrix(outputs.size(), net_.input_dim);
        leaf.v_out.resize(outputs.size());
        for (std::size_t k = 0; k < outputs.size(); ++k) {
          std::copy(outputs[k].p.begin(), outputs[k].p.end(), leaf.p_out.row(k).begin());
          leaf.v_out[k] = outputs[k].v;
        }
        leaf.activation = net_.leaf_activation;
        return emit({std::move(leaf), visits});
      }
      case TaskKind::classification_binary: {
        const NodeId id = emit({DecisionNode{outputs[0].p, outputs[0].v, kNoNeuron, 0, 0}, visits});
        const NodeId left = emit({LabelLeaf{0}, 0});
        const NodeId right = emit({LabelLeaf{1}, 0});
        auto& d = std::get<DecisionNode>(out_.nodes[id].body);
        d.left = left;
        d.right = right;
        return id;
      }
      case TaskKind::classification_multi: {
        const NodeId id = argmax_chain(outputs, 0, 1);
        out_.nodes[id].visits = visits;
        return id;
      }
    }
    throw Error("unreachable task kind");
  }

  /// Leader vs candidate: z_leader - z_candidate <= 0 hands the lead to the
  /// candidate (so exact ties favour the later class).
  NodeId argmax_chain(const std::vector<Rewrite>& outputs, std::size_t leader,
                      std::size_t candidate) {
    if (candidate == outputs.size()) return emit({LabelLeaf{leader}, 0});
    DecisionNode d;
    d.p.resize(net_.input_dim);
    for (std::size_t i = 0; i < d.p.size(); ++i) {
      d.p[i] = outputs[leader].p[i] - outputs[candidate].p[i];
    }
    d.v = outputs[leader].v - outputs[candidate].v;
    const NodeId id = emit({std::move(d), 0});
    const NodeId left = argmax_chain(outputs, candidate, candidate + 1);
    const NodeId right = argmax_chain(outputs, leader, candidate + 1);
    auto& node = std::get<DecisionNode>(out_.nodes[id].body);
    node.left = left;
    node.right = right;
    return id;
  }

  const NetworkSpec& net_;
  std::vector<NeuronRef> neurons_;
  std::vector<std::size_t> layer_offset_;
  ObliqueTree out_;
  bool traced_ = false;
};

std::uint64_t output_subtree_nodes(const NetworkSpec& net) {
  switch (net.task) {
    case TaskKind::regression: return 1;
    case TaskKind::classification_binary: return 3;
    case TaskKind::classification_multi: {
      const std::uint64_t classes = net.output_dim();
      return (std::uint64_t{1} << classes) - 1;
    }
  }
  return 1;
}

}  // namespace

ObliqueTree translate(const NetworkSpec& net, const TranslateOptions& opts) {
  validate(net);
  Translator translator(net);
  const std::size_t hidden = net.hidden_neuron_count();

  if (opts.mode == TranslateMode::full) {
    const double patterns = std::ldexp(1.0, static_cast<int>(hidden));
    if (patterns > static_cast<double>(opts.node_budget)) {
      const double required = (patterns - 1.0) + patterns * output_subtree_nodes(net);
      throw BudgetExceeded(
          fmt::format("full translation of {} hidden neurons needs {:.0f} nodes ({:.0f} "
                      "activation patterns) but the budget allows {} patterns; use trace-driven "
                      "mode",
                      hidden, required, patterns, opts.node_budget),
          required > 1.8e19 ? ~0ULL : static_cast<unsigned long long>(required));
    }
    ObliqueTree tree = translator.run(nullptr);
    tree.meta.mode = "full";
    return tree;
  }

  if (!opts.trace) throw TraceMismatch("trace-driven translation needs a trace");
  check_trace_matches(*opts.trace, net);
  PatternList patterns;
  for (const auto& [bits, count] : opts.trace->pattern_counts) patterns.push_back({&bits, count});
  ObliqueTree tree = translator.run(&patterns);
  tree.meta.mode = "trace_driven";
  tree.meta.trace_id = opts.trace->id();
  return tree;
}

BoxSampler BoxSampler::uniform(std::size_t dim, double lo, double hi) {
  return {std::vector<double>(dim, lo), std::vector<double>(dim, hi)};
}

std::vector<double> BoxSampler::sample(SplitMix64& rng) const {
  std::vector<double> x(lo.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(lo[i], hi[i]);
  return x;
}

void VerificationReport::merge(const VerificationReport& other) {
  samples += other.samples;
  compared += other.compared;
  pruned_hits += other.pruned_hits;
  label_disagreements += other.label_disagreements;
  label_ties += other.label_ties;
  max_abs_diff = std::max(max_abs_diff, other.max_abs_diff);
  max_rel_diff = std::max(max_rel_diff, other.max_rel_diff);
  pass = pass && other.pass;
}

namespace {

constexpr double kLabelTieTolerance = 1e-9;

bool near_tie(const NetworkSpec& net, std::span<const double> logits) {
  if (net.task == TaskKind::classification_binary) return std::abs(logits[0]) <= kLabelTieTolerance;
  std::vector<double> sorted(logits.begin(), logits.end());
  std::partial_sort(sorted.begin(), sorted.begin() + 2, sorted.end(), std::greater<>());
  return sorted[0] - sorted[1] <= kLabelTieTolerance * std::max(1.0, std::abs(sorted[0]));
}

void compare_one(const NetworkSpec& net, const ObliqueTree& tree, std::span<const double> x,
                 VerificationReport& report) {
  ++report.samples;
  const ForwardResult expected = forward_with_pattern(net, x);
  const Prediction got = infer(tree, x);
  if (got.fallback || got.unresolved) {
    ++report.pruned_hits;
    return;
  }
  ++report.compared;
  if (net.task == TaskKind::regression) {
    if (got.value.size() != expected.output.size()) {
      throw DimensionError("tree and network disagree on output width");
    }
    for (std::size_t k = 0; k < got.value.size(); ++k) {
      const double diff = std::abs(got.value[k] - expected.output[k]);
      report.max_abs_diff = std::max(report.max_abs_diff, diff);
      report.max_rel_diff =
          std::max(report.max_rel_diff, diff / std::max(1.0, std::abs(expected.output[k])));
    }
    return;
  }
  if (near_tie(net, expected.logits)) {
    ++report.label_ties;
    return;
  }
  if (!got.label || *got.label != predicted_label(net, expected.logits)) {
    ++report.label_disagreements;
  }
}

void finish(VerificationReport& r) {
  r.pass = r.max_rel_diff <= kEquivalenceTolerance && r.label_disagreements == 0;
}

}  // namespace

VerificationReport verify_equivalence(const NetworkSpec& net, const ObliqueTree& tree,
                                      const BoxSampler& sampler, std::size_t n_samples,
                                      std::uint64_t seed, std::size_t jobs) {
  if (sampler.dim() != net.input_dim || tree.input_dim != net.input_dim) {
    throw DimensionError(fmt::format("sampler/tree/network input widths differ ({}/{}/{})",
                                     sampler.dim(), tree.input_dim, net.input_dim));
  }
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(1, n_samples));
  std::vector<VerificationReport> shards(jobs);
  // Sample i always comes from sub-stream i, so sharding never changes results.
  auto run_shard = [&](std::size_t shard) {
    for (std::size_t i = shard; i < n_samples; i += jobs) {
      SplitMix64 rng(derive_seed(seed, i));
      const auto x = sampler.sample(rng);
      compare_one(net, tree, x, shards[shard]);
    }
  };
  if (jobs == 1) {
    run_shard(0);
  } else {
    std::vector<std::thread> workers;
    for (std::size_t s = 0; s < jobs; ++s) workers.emplace_back(run_shard, s);
    for (auto& w : workers) w.join();
  }
  VerificationReport report;
  for (const auto& s : shards) report.merge(s);
  finish(report);
  return report;
}

VerificationReport verify_on_inputs(const NetworkSpec& net, const ObliqueTree& tree,
                                    std::span<const std::vector<double>> inputs) {
  VerificationReport report;
  for (const auto& x : inputs) compare_one(net, tree, x, report);
  finish(report);
  return report;
}

nlohmann::ordered_json report_to_json(const VerificationReport& r) {
  nlohmann::ordered_json j;
  j["pass"] = r.pass;
  j["samples"] = r.samples;
  j["compared"] = r.compared;
  j["pruned_hits"] = r.pruned_hits;
  j["label_disagreements"] = r.label_disagreements;
  j["label_ties"] = r.label_ties;
  j["max_abs_diff"] = r.max_abs_diff;
  j["max_rel_diff"] = r.max_rel_diff;
  j["tolerance"] = kEquivalenceTolerance;
  return j;
}

}  // namespace otr
