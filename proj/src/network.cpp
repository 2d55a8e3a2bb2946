#include "otr/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "detail.hpp"
#include "otr/errors.hpp"

namespace otr {

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  const std::size_t cols = rows.empty() ? 0 : rows.front().size();
  Matrix m(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) {
      throw ShapeError(fmt::format("ragged matrix: row {} has {} entries, expected {}", r,
                                   rows[r].size(), cols));
    }
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

std::vector<std::vector<double>> Matrix::to_rows() const {
  std::vector<std::vector<double>> out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r].assign(row(r).begin(), row(r).end());
  return out;
}

std::string_view to_string(TaskKind task) {
  switch (task) {
    case TaskKind::regression: return "regression";
    case TaskKind::classification_binary: return "classification_binary";
    case TaskKind::classification_multi: return "classification_multi";
  }
  return "?";
}

std::string_view to_string(LeafActivation act) {
  return act == LeafActivation::tanh ? "tanh" : "identity";
}

TaskKind parse_task(std::string_view s) {
  if (s == "regression") return TaskKind::regression;
  if (s == "classification_binary") return TaskKind::classification_binary;
  if (s == "classification_multi") return TaskKind::classification_multi;
  throw ParseError(fmt::format("unknown task kind '{}'", s));
}

LeafActivation parse_leaf_activation(std::string_view s) {
  if (s == "identity") return LeafActivation::identity;
  if (s == "tanh") return LeafActivation::tanh;
  throw ParseError(fmt::format("unknown leaf activation '{}'", s));
}

std::size_t NetworkSpec::hidden_neuron_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) n += layers[i].width();
  return n;
}

std::size_t NetworkSpec::layer_input_width(std::size_t index) const {
  if (index == 0 || !dense) return index == 0 ? input_dim : layers[index - 1].width();
  std::size_t w = input_dim;
  for (std::size_t i = 0; i < index; ++i) w += layers[i].width();
  return w;
}

ActivationPattern::ActivationPattern(std::string bits) : bits_(std::move(bits)) {
  for (char c : bits_) {
    if (c != '0' && c != '1') throw ParseError("activation pattern must contain only 0/1");
  }
}

std::size_t ActivationPattern::active_count() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), '1'));
}

void validate(const NetworkSpec& net) {
  if (net.input_dim == 0) throw ShapeError("input_dim must be positive");
  if (net.layers.empty()) throw ShapeError("network has no layers");

  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& layer = net.layers[i];
    const std::size_t number = i + 1;
    const bool is_output = i + 1 == net.layers.size();
    if (layer.width() == 0) throw ShapeError(fmt::format("layer {}: zero width", number));
    if (layer.weights.rows() != layer.biases.size()) {
      throw ShapeError(fmt::format("layer {}: weights have {} rows but biases have {} entries",
                                   number, layer.weights.rows(), layer.biases.size()));
    }
    const std::size_t expected_cols = net.layer_input_width(i);
    if (layer.weights.cols() != expected_cols) {
      throw ShapeError(fmt::format("layer {}: weights have {} columns, expected {}", number,
                                   layer.weights.cols(), expected_cols));
    }
    for (double w : layer.weights.data()) {
      if (!std::isfinite(w)) throw ShapeError(fmt::format("layer {}: non-finite weight", number));
    }
    for (double b : layer.biases) {
      if (!std::isfinite(b)) throw ShapeError(fmt::format("layer {}: non-finite bias", number));
    }

    const Activation& act = layer.activation;
    if (!is_output) {
      if (!act.is_hidden_kind()) {
        throw ActivationError(
            fmt::format("layer {}: hidden layers must use relu or leaky_relu", number));
      }
      if (act.kind == Activation::Kind::leaky_relu && !(act.slope > 0.0 && act.slope < 1.0)) {
        throw ActivationError(
            fmt::format("layer {}: leaky_relu slope {} outside (0, 1)", number, act.slope));
      }
      continue;
    }
    switch (act.kind) {
      case Activation::Kind::linear:
        if (net.task != TaskKind::regression) {
          throw ActivationError("linear output requires task 'regression'");
        }
        break;
      case Activation::Kind::logistic:
        if (net.task != TaskKind::classification_binary) {
          throw ActivationError("logistic output requires task 'classification_binary'");
        }
        if (layer.width() != 1) throw ActivationError("logistic output must have exactly one unit");
        break;
      case Activation::Kind::softmax:
        if (net.task != TaskKind::classification_multi) {
          throw ActivationError("softmax output requires task 'classification_multi'");
        }
        if (layer.width() < 2) throw ActivationError("softmax output needs at least two units");
        break;
      default:
        throw ActivationError(
            fmt::format("layer {}: output layer must be linear, logistic or softmax", number));
    }
  }
  if (net.leaf_activation == LeafActivation::tanh && net.task != TaskKind::regression) {
    throw ActivationError("tanh leaf activation is only valid for regression networks");
  }
}

namespace {

Activation activation_from_json(const nlohmann::json& j, std::size_t layer_number) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "relu") return Activation::relu();
    if (s == "linear") return Activation::linear();
    if (s == "logistic") return Activation::logistic();
    if (s == "softmax") return Activation::softmax();
    if (s == "leaky_relu") {
      throw ActivationError(
          fmt::format("layer {}: leaky_relu needs a slope, write {{\"leaky_relu\": a}}",
                      layer_number));
    }
    throw ActivationError(fmt::format("layer {}: unsupported activation '{}'", layer_number, s));
  }
  if (j.is_object() && j.size() == 1 && j.contains("leaky_relu") && j["leaky_relu"].is_number()) {
    return Activation::leaky_relu(j["leaky_relu"].get<double>());
  }
  throw ActivationError(fmt::format("layer {}: malformed activation {}", layer_number, j.dump()));
}

nlohmann::ordered_json activation_to_json(const Activation& a) {
  switch (a.kind) {
    case Activation::Kind::relu: return "relu";
    case Activation::Kind::leaky_relu: {
      nlohmann::ordered_json j;
      j["leaky_relu"] = a.slope;
      return j;
    }
    case Activation::Kind::linear: return "linear";
    case Activation::Kind::logistic: return "logistic";
    case Activation::Kind::softmax: return "softmax";
  }
  return nullptr;
}

std::vector<double> number_array(const nlohmann::json& j, const std::string& what) {
  if (!j.is_array()) throw ParseError(what + " must be an array");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_number()) throw ParseError(what + " must contain only numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

}  // namespace

NetworkSpec network_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("network file must hold a JSON object");
  for (const char* key : {"input_dim", "task", "layers"}) {
    if (!j.contains(key)) throw ParseError(fmt::format("network file lacks \"{}\"", key));
  }
  NetworkSpec net;
  if (!j["input_dim"].is_number_unsigned()) throw ParseError("input_dim must be a positive integer");
  net.input_dim = j["input_dim"].get<std::size_t>();
  net.task = parse_task(j["task"].get<std::string>());
  net.dense = j.value("dense", false);
  net.leaf_activation = parse_leaf_activation(j.value("leaf_activation", std::string("identity")));
  if (!j["layers"].is_array()) throw ParseError("layers must be an array");

  std::size_t number = 0;
  for (const auto& lj : j["layers"]) {
    ++number;
    if (!lj.is_object() || !lj.contains("weights") || !lj.contains("biases") ||
        !lj.contains("activation")) {
      throw ParseError(
          fmt::format("layer {}: expected object with weights, biases, activation", number));
    }
    LayerSpec layer;
    const auto& wj = lj["weights"];
    if (!wj.is_array()) throw ParseError(fmt::format("layer {}: weights must be an array", number));
    std::vector<std::vector<double>> rows;
    for (const auto& rj : wj) {
      rows.push_back(number_array(rj, fmt::format("layer {} weight row", number)));
    }
    try {
      layer.weights = Matrix::from_rows(rows);
    } catch (const ShapeError& e) {
      throw ShapeError(fmt::format("layer {}: {}", number, e.what()));
    }
    layer.biases = number_array(lj["biases"], fmt::format("layer {} biases", number));
    layer.activation = activation_from_json(lj["activation"], number);
    net.layers.push_back(std::move(layer));
  }
  validate(net);
  return net;
}

nlohmann::ordered_json network_to_json(const NetworkSpec& net) {
  nlohmann::ordered_json j;
  j["input_dim"] = net.input_dim;
  j["task"] = to_string(net.task);
  j["dense"] = net.dense;
  j["leaf_activation"] = to_string(net.leaf_activation);
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& layer : net.layers) {
    nlohmann::ordered_json lj;
    lj["weights"] = layer.weights.to_rows();
    lj["biases"] = layer.biases;
    lj["activation"] = activation_to_json(layer.activation);
    j["layers"].push_back(std::move(lj));
  }
  return j;
}

NetworkSpec load_network(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(fmt::format("cannot open network file '{}'", path.string()));
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return network_from_json(j);
}

void save_network(const NetworkSpec& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(fmt::format("cannot write '{}'", path.string()));
  out << network_to_json(net).dump(2) << '\n';
}

std::string network_hash(const NetworkSpec& net) {
  return detail::fnv1a_hex(network_to_json(net).dump());
}

namespace {

void check_input(const NetworkSpec& net, std::span<const double> x) {
  if (x.size() != net.input_dim) {
    throw DimensionError(
        fmt::format("input has {} entries, network expects {}", x.size(), net.input_dim));
  }
  for (double v : x) {
    if (!std::isfinite(v)) throw DimensionError("input contains non-finite values");
  }
}

void apply_output_activation(const NetworkSpec& net, std::vector<double>& z) {
  switch (net.layers.back().activation.kind) {
    case Activation::Kind::logistic:
      for (double& v : z) v = 1.0 / (1.0 + std::exp(-v));
      break;
    case Activation::Kind::softmax: {
      const double top = *std::max_element(z.begin(), z.end());
      double total = 0.0;
      for (double& v : z) total += (v = std::exp(v - top));
      for (double& v : z) v /= total;
      break;
    }
    default:
      if (net.leaf_activation == LeafActivation::tanh) {
        for (double& v : z) v = std::tanh(v);
      }
      break;
  }
}

}  // namespace

ForwardResult forward_with_pattern(const NetworkSpec& net, std::span<const double> x) {
  check_input(net, x);
  ForwardResult result;
  // `consumed` holds what the next layer reads: the previous activations, or
  // for dense nets everything produced so far with x first.
  std::vector<double> consumed(x.begin(), x.end());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerSpec& layer = net.layers[i];
    std::vector<double> z(layer.width());
    for (std::size_t k = 0; k < z.size(); ++k) {
      z[k] = dot(layer.weights.row(k), consumed) + layer.biases[k];
    }
    if (i + 1 == net.layers.size()) {
      result.logits = z;
      apply_output_activation(net, z);
      result.output = std::move(z);
      break;
    }
    const double inactive = layer.activation.inactive_scale();
    for (double& v : z) {
      const bool on = v > 0.0;
      result.pattern.push_back(on);
      if (!on) v *= inactive;
    }
    if (net.dense) {
      consumed.insert(consumed.end(), z.begin(), z.end());
    } else {
      consumed = std::move(z);
    }
  }
  return result;
}

std::vector<double> forward(const NetworkSpec& net, std::span<const double> x) {
  return forward_with_pattern(net, x).output;
}

std::size_t predicted_label(const NetworkSpec& net, std::span<const double> logits) {
  if (net.task == TaskKind::classification_binary) return logits[0] > 0.0 ? 1 : 0;
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] >= logits[best]) best = i;
  }
  return best;
}

}  // namespace otr
