#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "otr/network.hpp"
#include "otr/rng.hpp"
#include "otr/tree.hpp"

namespace otr {

enum class TranslateMode { full, trace_driven };

struct TranslateOptions {
  TranslateMode mode = TranslateMode::full;
  /// Full mode refuses networks with more than this many activation patterns.
  std::uint64_t node_budget = std::uint64_t{1} << 20;
  /// Required in trace_driven mode; only its patterns are materialized.
  std::optional<ActivationTrace> trace;
};

/// Compiles a ReLU / leaky-ReLU network into an equivalent oblique tree.
///
/// Every hidden neuron becomes one tree level, visited in layer-major order.
/// Each node tests the neuron's pre-activation rewritten as a linear function
/// of the input under the activation decisions taken above it; the right
/// branch keeps the rewrite (active), the left branch replaces it by zero
/// (relu) or by slope * rewrite (leaky relu). Leaves carry the output layer
/// rewritten the same way; classification adds a sign test (binary) or an
/// argmax chain (multi-class).
ObliqueTree translate(const NetworkSpec& net, const TranslateOptions& opts = {});

/// Uniform sampling box, one [lo, hi] interval per input dimension.
struct BoxSampler {
  std::vector<double> lo;
  std::vector<double> hi;

  static BoxSampler uniform(std::size_t dim, double lo, double hi);
  std::vector<double> sample(SplitMix64& rng) const;
  std::size_t dim() const { return lo.size(); }
};

struct VerificationReport {
  std::size_t samples = 0;
  std::size_t compared = 0;
  std::size_t pruned_hits = 0;
  std::size_t label_disagreements = 0;
  /// Classification samples whose top two logits tie within tolerance.
  std::size_t label_ties = 0;
  double max_abs_diff = 0.0;
  /// |tree - net| / max(1, |net|), maximized over samples and outputs.
  double max_rel_diff = 0.0;
  bool pass = true;

  /// Associative, so shards can be merged in any grouping.
  void merge(const VerificationReport& other);
};

inline constexpr double kEquivalenceTolerance = 1e-6;

VerificationReport verify_equivalence(const NetworkSpec& net, const ObliqueTree& tree,
                                      const BoxSampler& sampler, std::size_t n_samples,
                                      std::uint64_t seed, std::size_t jobs = 1);

/// Same comparison on an explicit list of inputs.
VerificationReport verify_on_inputs(const NetworkSpec& net, const ObliqueTree& tree,
                                    std::span<const std::vector<double>> inputs);

nlohmann::ordered_json report_to_json(const VerificationReport& r);

}  // namespace otr
