#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "otr/matrix.hpp"

namespace otr {

enum class TaskKind { regression, classification_binary, classification_multi };
enum class LeafActivation { identity, tanh };

std::string_view to_string(TaskKind task);
std::string_view to_string(LeafActivation act);
TaskKind parse_task(std::string_view s);
LeafActivation parse_leaf_activation(std::string_view s);

struct Activation {
  enum class Kind { relu, leaky_relu, linear, logistic, softmax };
  Kind kind = Kind::relu;
  /// Negative-side slope; only meaningful for leaky_relu (0 < slope < 1).
  double slope = 0.0;

  static Activation relu() { return {Kind::relu, 0.0}; }
  static Activation leaky_relu(double a) { return {Kind::leaky_relu, a}; }
  static Activation linear() { return {Kind::linear, 0.0}; }
  static Activation logistic() { return {Kind::logistic, 0.0}; }
  static Activation softmax() { return {Kind::softmax, 0.0}; }

  bool is_hidden_kind() const { return kind == Kind::relu || kind == Kind::leaky_relu; }
  /// Multiplier applied to a non-positive pre-activation.
  double inactive_scale() const { return kind == Kind::leaky_relu ? slope : 0.0; }

  bool operator==(const Activation&) const = default;
};

struct LayerSpec {
  Matrix weights;
  std::vector<double> biases;
  Activation activation;

  std::size_t width() const { return biases.size(); }
  bool operator==(const LayerSpec&) const = default;
};

/// Fully-connected network. Layer i maps the previous layer's activations
/// (or, when `dense`, the concatenation [x, A^2, ..., A^i] in layer order)
/// to its own width. The last layer is the output layer.
struct NetworkSpec {
  std::size_t input_dim = 0;
  TaskKind task = TaskKind::regression;
  bool dense = false;
  LeafActivation leaf_activation = LeafActivation::identity;
  std::vector<LayerSpec> layers;

  std::size_t hidden_layer_count() const { return layers.empty() ? 0 : layers.size() - 1; }
  std::size_t hidden_neuron_count() const;
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().width(); }
  /// Width of the vector consumed by layer `index` (0-based).
  std::size_t layer_input_width(std::size_t index) const;

  bool operator==(const NetworkSpec&) const = default;
};

/// Which hidden neurons have a strictly positive pre-activation. Bit j is
/// global hidden neuron j in layer-major, then row, order.
class ActivationPattern {
 public:
  ActivationPattern() = default;
  explicit ActivationPattern(std::string bits);

  std::size_t size() const noexcept { return bits_.size(); }
  bool active(std::size_t neuron) const { return bits_[neuron] == '1'; }
  void push_back(bool active) { bits_.push_back(active ? '1' : '0'); }
  std::size_t active_count() const;
  const std::string& str() const noexcept { return bits_; }

  auto operator<=>(const ActivationPattern&) const = default;

 private:
  std::string bits_;
};

/// Throws ShapeError / ActivationError on the first violated invariant.
void validate(const NetworkSpec& net);

NetworkSpec network_from_json(const nlohmann::json& j);
nlohmann::ordered_json network_to_json(const NetworkSpec& net);
NetworkSpec load_network(const std::filesystem::path& path);
void save_network(const NetworkSpec& net, const std::filesystem::path& path);

/// Stable 64-bit FNV-1a digest of the canonical JSON, as 16 hex digits.
std::string network_hash(const NetworkSpec& net);

struct ForwardResult {
  /// A^m: the output layer's activation (tanh-squished when the net's leaf
  /// activation is tanh).
  std::vector<double> output;
  /// Z^m: output pre-activations. Labels are decided on these.
  std::vector<double> logits;
  ActivationPattern pattern;
};

std::vector<double> forward(const NetworkSpec& net, std::span<const double> x);
ForwardResult forward_with_pattern(const NetworkSpec& net, std::span<const double> x);

/// Class decided by the network: z > 0 for binary, argmax for multi-class
/// with exact ties going to the later index.
std::size_t predicted_label(const NetworkSpec& net, std::span<const double> logits);

}  // namespace otr
