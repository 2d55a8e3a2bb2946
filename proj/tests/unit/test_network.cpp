#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "otr/errors.hpp"
#include "otr/network.hpp"
#include "oracles.hpp"

using namespace otr;

namespace {

NetworkSpec tiny() { return load_network(std::filesystem::path(OTR_FIXTURE_DIR) / "tiny_net.json"); }

nlohmann::json tiny_json() {
  return network_to_json(tiny());
}

}  // namespace

TEST_CASE("tiny fixture loads with the expected shape") {
  const NetworkSpec net = tiny();
  CHECK(net.input_dim == 2);
  REQUIRE(net.layers.size() == 2);
  CHECK(net.layers[0].weights.rows() == 3);
  CHECK(net.layers[0].weights.cols() == 2);
  CHECK(net.layers[1].width() == 1);
  CHECK(net.hidden_neuron_count() == 3);
  CHECK(net.layers[0].weights(0, 0) == -2.7);
  CHECK(net.layers[0].biases[1] == 0.6);
}

TEST_CASE("tiny net forward pass at [0.5, -0.5]") {
  const NetworkSpec net = tiny();
  const std::vector<double> x{0.5, -0.5};
  const ForwardResult r = forward_with_pattern(net, x);
  REQUIRE(r.output.size() == 1);
  CHECK(r.output[0] == doctest::Approx(3.5).epsilon(1e-12));
  CHECK(r.pattern.str() == "001");
  // Z^2 = [-1.35, -0.30, 1.75] per the worked example.
  const auto naive = oracle::naive_forward(net, x);
  CHECK(naive.output[0] == doctest::Approx(3.5).epsilon(1e-12));
}

TEST_CASE("bias-only network is constant") {
  NetworkSpec net = tiny();
  for (auto& layer : net.layers) {
    for (double& w : layer.weights.data()) w = 0.0;
  }
  net.layers[1].biases = {1.4};
  for (double x0 : {-3.0, 0.0, 2.5}) {
    const std::vector<double> x{x0, -x0};
    CHECK(forward(net, x)[0] == 1.4);
  }
}

TEST_CASE("zero weights with positive biases give an all-ones pattern") {
  NetworkSpec net = tiny();
  for (double& w : net.layers[0].weights.data()) w = 0.0;
  net.layers[0].biases = {0.1, 0.2, 0.3};
  const std::vector<double> x{0.7, -0.2};
  CHECK(forward_with_pattern(net, x).pattern.str() == "111");
}

TEST_CASE("mismatched bias length names the layer") {
  nlohmann::json j = tiny_json();
  j["layers"][0]["biases"] = {0.1, 0.2};
  try {
    network_from_json(j);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("activation and task invariants are enforced") {
  nlohmann::json j = tiny_json();
  SUBCASE("leaky slope out of range") {
    j["layers"][0]["activation"] = {{"leaky_relu", 1.5}};
    CHECK_THROWS_AS(network_from_json(j), ActivationError);
  }
  SUBCASE("hidden softmax") {
    j["layers"][0]["activation"] = "softmax";
    CHECK_THROWS_AS(network_from_json(j), ActivationError);
  }
  SUBCASE("logistic output with a regression task") {
    j["layers"][1]["activation"] = "logistic";
    CHECK_THROWS_AS(network_from_json(j), ActivationError);
  }
  SUBCASE("softmax needs two units") {
    j["task"] = "classification_multi";
    j["layers"][1]["activation"] = "softmax";
    CHECK_THROWS_AS(network_from_json(j), ActivationError);
  }
  SUBCASE("tanh leaf on a classifier") {
    j["task"] = "classification_binary";
    j["layers"][1]["activation"] = "logistic";
    j["leaf_activation"] = "tanh";
    CHECK_THROWS_AS(network_from_json(j), ActivationError);
  }
  SUBCASE("unknown kind") {
    j["layers"][0]["activation"] = "gelu";
    CHECK_THROWS_AS(network_from_json(j), ActivationError);
  }
  SUBCASE("malformed JSON values") {
    j["layers"][0]["weights"][0][0] = "x";
    CHECK_THROWS_AS(network_from_json(j), ParseError);
  }
}

TEST_CASE("dimension mismatch on forward") {
  const NetworkSpec net = tiny();
  const std::vector<double> x{1.0, 2.0, 3.0};
  CHECK_THROWS_AS(forward(net, x), DimensionError);
}

TEST_CASE("serialization round trip is the identity") {
  SplitMix64 rng(11);
  const std::filesystem::path dir = std::filesystem::temp_directory_path() / "otr_test_network";
  std::filesystem::create_directories(dir);
  for (int i = 0; i < 30; ++i) {
    const auto task = static_cast<TaskKind>(i % 3);
    const NetworkSpec net = oracle::random_network(rng, task, i % 2 == 0);
    CHECK(network_from_json(network_to_json(net)) == net);
    const auto path = dir / "net.json";
    save_network(net, path);
    CHECK(load_network(path) == net);
    CHECK(network_hash(load_network(path)) == network_hash(net));
  }
}

TEST_CASE("forward matches the naive oracle on random nets") {
  SplitMix64 rng(2024);
  double worst = 0.0;
  std::size_t pattern_errors = 0;
  for (int n = 0; n < 100; ++n) {
    const auto task = static_cast<TaskKind>(n % 3);
    const NetworkSpec net = oracle::random_network(rng, task, n % 4 == 1);
    for (int i = 0; i < 100; ++i) {
      const auto x = oracle::uniform_point(rng, net.input_dim, -2.0, 2.0);
      const ForwardResult got = forward_with_pattern(net, x);
      const auto want = oracle::naive_forward(net, x);
      REQUIRE(got.output.size() == want.output.size());
      for (std::size_t k = 0; k < want.output.size(); ++k) {
        worst = std::max(worst, std::abs(got.output[k] - want.output[k]));
      }
      pattern_errors += got.pattern.str() != want.pattern;
    }
  }
  CHECK(worst < 1e-12);
  CHECK(pattern_errors == 0);
}

TEST_CASE("inactive neurons contribute nothing downstream") {
  SplitMix64 rng(5);
  for (int n = 0; n < 40; ++n) {
    const NetworkSpec net = oracle::random_relu_net(rng, 3, 4);
    const auto x = oracle::uniform_point(rng, 3);
    const ForwardResult r = forward_with_pattern(net, x);
    NetworkSpec cut = net;
    for (std::size_t j = 0; j < 4; ++j) {
      if (r.pattern.active(j)) continue;
      for (std::size_t c = 0; c < 3; ++c) cut.layers[0].weights(j, c) = 0.0;
      cut.layers[0].biases[j] = -1.0;  // keeps the neuron off without changing the output
      cut.layers[1].weights(0, j) = 0.0;
    }
    CHECK(forward(cut, x)[0] == doctest::Approx(r.output[0]).epsilon(1e-12));
  }
}

TEST_CASE("leaky and relu differ exactly when some neuron is inactive") {
  SplitMix64 rng(6);
  for (int n = 0; n < 60; ++n) {
    NetworkSpec relu = oracle::random_relu_net(rng, 2, 3);
    NetworkSpec leaky = relu;
    leaky.layers[0].activation = Activation::leaky_relu(0.2);
    const auto x = oracle::uniform_point(rng, 2);
    const ForwardResult r = forward_with_pattern(relu, x);
    const bool any_off = r.pattern.active_count() < r.pattern.size();
    const double diff = std::abs(forward(leaky, x)[0] - r.output[0]);
    if (!any_off) {
      CHECK(diff == 0.0);
    }
    // With an inactive neuron the outputs differ unless its outgoing weight
    // happens to cancel, which has probability zero for random weights.
    if (any_off) {
      CHECK(diff > 0.0);
    }
  }
}

TEST_CASE("predicted label conventions") {
  NetworkSpec net;
  net.input_dim = 1;
  net.task = TaskKind::classification_multi;
  net.layers.resize(2);
  net.layers[0] = {Matrix(1, 1, 1.0), {0.0}, Activation::relu()};
  net.layers[1] = {Matrix(3, 1, 0.0), {0.0, 0.0, 0.0}, Activation::softmax()};
  const std::vector<double> tie{1.0, 1.0, 0.5};
  CHECK(predicted_label(net, tie) == 1);
  const std::vector<double> clear{0.0, 2.0, 3.0};
  CHECK(predicted_label(net, clear) == 2);
}
