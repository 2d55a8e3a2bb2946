#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "otr/errors.hpp"
#include "otr/translator.hpp"
#include "otr/tree.hpp"
#include "oracles.hpp"

using namespace otr;

namespace {

NetworkSpec tiny() { return load_network(std::filesystem::path(OTR_FIXTURE_DIR) / "tiny_net.json"); }

}  // namespace

TEST_CASE("tiny net leaf on the (<=, <=, >) path") {
  const NetworkSpec net = tiny();
  const ObliqueTree tree = translate(net);
  const std::vector<double> x{0.5, -0.5};
  const std::vector<NodeId> path = inference_path(tree, x);
  REQUIRE(path.size() == 4);
  const auto& root = std::get<DecisionNode>(tree.nodes[path[0]].body);
  CHECK(path[1] == root.left);
  const auto& second = std::get<DecisionNode>(tree.nodes[path[1]].body);
  CHECK(path[2] == second.left);
  const auto& third = std::get<DecisionNode>(tree.nodes[path[2]].body);
  CHECK(path[3] == third.right);
  const auto& leaf = std::get<RegressionLeaf>(tree.nodes[path[3]].body);
  CHECK(leaf.p_out(0, 0) == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(leaf.p_out(0, 1) == doctest::Approx(-0.12).epsilon(1e-12));
  CHECK(leaf.v_out[0] == doctest::Approx(2.84).epsilon(1e-12));
  CHECK(infer(tree, x).value[0] == doctest::Approx(3.5).epsilon(1e-12));
}

TEST_CASE("single hidden neuron") {
  NetworkSpec net;
  net.input_dim = 1;
  net.layers = {{Matrix(1, 1, 2.0), {-0.5}, Activation::relu()},
                {Matrix(1, 1, 3.0), {0.25}, Activation::linear()}};
  const ObliqueTree t = translate(net);
  REQUIRE(t.nodes.size() == 3);
  const auto& root = std::get<DecisionNode>(t.nodes[0].body);
  CHECK(root.p == std::vector<double>{2.0});
  CHECK(root.v == -0.5);
  const auto& left = std::get<RegressionLeaf>(t.nodes[root.left].body);
  CHECK(left.p_out(0, 0) == 0.0);
  CHECK(left.v_out[0] == 0.25);
  const auto& right = std::get<RegressionLeaf>(t.nodes[root.right].body);
  CHECK(right.p_out(0, 0) == 6.0);
  CHECK(right.v_out[0] == doctest::Approx(3.0 * -0.5 + 0.25));
}

TEST_CASE("random networks of every kind translate exactly") {
  SplitMix64 rng(77);
  for (int n = 0; n < 60; ++n) {
    const auto task = static_cast<TaskKind>(n % 3);
    const NetworkSpec net = oracle::random_network(rng, task, (n / 3) % 2 == 1);
    const ObliqueTree tree = translate(net);
    for (int i = 0; i < 200; ++i) {
      const auto x = oracle::uniform_point(rng, net.input_dim);
      const auto want = oracle::naive_forward(net, x);
      const Prediction got = infer(tree, x);
      if (task == TaskKind::regression) {
        for (std::size_t k = 0; k < want.output.size(); ++k) {
          CHECK(std::abs(got.value[k] - want.output[k]) <= 1e-6 * std::max(1.0, std::abs(want.output[k])));
        }
      } else if (task == TaskKind::classification_binary) {
        if (std::abs(want.logits[0]) > 1e-9) CHECK(*got.label == (want.logits[0] > 0 ? 1u : 0u));
      } else {
        const long best = oracle::unique_argmax(want.logits);
        if (best >= 0) CHECK(*got.label == static_cast<std::size_t>(best));
      }
    }
  }
}

TEST_CASE("structure counts for n = 1..10") {
  SplitMix64 rng(3);
  for (std::size_t n = 1; n <= 10; ++n) {
    const NetworkSpec net = oracle::random_relu_net(rng, 2, n);
    const ObliqueTree t = translate(net);
    const TreeStats s = stats(t);
    CHECK(s.decision_count == (std::size_t{1} << n) - 1);
    CHECK(s.leaf_count == (std::size_t{1} << n));
    CHECK(s.max_depth == n);
  }
}

TEST_CASE("classification adds one level") {
  SplitMix64 rng(4);
  NetworkSpec net = oracle::random_relu_net(rng, 2, 3);
  net.task = TaskKind::classification_binary;
  net.layers[1].activation = Activation::logistic();
  const TreeStats s = stats(translate(net));
  CHECK(s.max_depth == 4);
  CHECK(s.decision_count == 15);
}

TEST_CASE("first-layer nodes carry W1 and B1 unchanged") {
  SplitMix64 rng(9);
  NetworkSpec net = oracle::random_network(rng, TaskKind::regression, false);
  while (net.layers.size() < 3) net = oracle::random_network(rng, TaskKind::regression, false);
  const ObliqueTree t = translate(net);
  const std::size_t first = net.layers[0].width();
  for (std::size_t id = 0; id < t.nodes.size(); ++id) {
    const auto* d = std::get_if<DecisionNode>(&t.nodes[id].body);
    if (d == nullptr || d->neuron < 0 || static_cast<std::size_t>(d->neuron) >= first) continue;
    const auto row = net.layers[0].weights.row(static_cast<std::size_t>(d->neuron));
    CHECK(d->p == std::vector<double>(row.begin(), row.end()));
    CHECK(d->v == net.layers[0].biases[static_cast<std::size_t>(d->neuron)]);
  }
}

TEST_CASE("leaky construction approaches relu as the slope vanishes") {
  SplitMix64 rng(10);
  NetworkSpec relu = oracle::random_network(rng, TaskKind::regression, false);
  for (auto& l : relu.layers) {
    if (l.activation.is_hidden_kind()) l.activation = Activation::relu();
  }
  NetworkSpec leaky = relu;
  for (std::size_t i = 0; i + 1 < leaky.layers.size(); ++i) leaky.layers[i].activation = Activation::leaky_relu(1e-12);
  const ObliqueTree a = translate(relu);
  const ObliqueTree b = translate(leaky);
  REQUIRE(a.nodes.size() == b.nodes.size());
  for (std::size_t id = 0; id < a.nodes.size(); ++id) {
    REQUIRE(a.nodes[id].body.index() == b.nodes[id].body.index());
    if (const auto* da = std::get_if<DecisionNode>(&a.nodes[id].body)) {
      const auto& db = std::get<DecisionNode>(b.nodes[id].body);
      CHECK(da->v == doctest::Approx(db.v).epsilon(1e-9));
      for (std::size_t k = 0; k < da->p.size(); ++k) CHECK(da->p[k] == doctest::Approx(db.p[k]).epsilon(1e-9));
    }
  }
}

TEST_CASE("inference path mirrors the activation pattern") {
  SplitMix64 rng(12);
  for (int n = 0; n < 20; ++n) {
    const NetworkSpec net = oracle::random_network(rng, TaskKind::regression, n % 2 == 0);
    const ObliqueTree t = translate(net);
    for (int i = 0; i < 50; ++i) {
      const auto x = oracle::uniform_point(rng, net.input_dim);
      CHECK(path_pattern(t, x).str() == oracle::naive_forward(net, x).pattern);
    }
  }
}

TEST_CASE("budget guard reports the required size") {
  SplitMix64 rng(13);
  const NetworkSpec net = oracle::random_relu_net(rng, 2, 12);
  TranslateOptions opts;
  opts.node_budget = 1000;
  try {
    translate(net, opts);
    FAIL("expected BudgetExceeded");
  } catch (const BudgetExceeded& e) {
    CHECK(e.required_nodes() >= 4096);
  }
}

TEST_CASE("trace mode preconditions") {
  const NetworkSpec net = tiny();
  TranslateOptions opts;
  opts.mode = TranslateMode::trace_driven;
  CHECK_THROWS_AS(translate(net, opts), TraceMismatch);
  ActivationTrace other;
  other.network_hash = "0000000000000000";
  other.add(ActivationPattern("001"));
  opts.trace = other;
  CHECK_THROWS_AS(translate(net, opts), TraceMismatch);
}

TEST_CASE("verification passes on tiny net and catches a perturbed leaf") {
  const NetworkSpec net = tiny();
  ObliqueTree t = translate(net);
  const BoxSampler box = BoxSampler::uniform(2, -1.0, 1.0);
  const VerificationReport ok = verify_equivalence(net, t, box, 1000, 7, 4);
  CHECK(ok.pass);
  CHECK(ok.max_abs_diff <= 1e-9);
  CHECK(ok.compared == 1000);

  // Sharding must not change the report.
  const VerificationReport serial = verify_equivalence(net, t, box, 1000, 7, 1);
  CHECK(report_to_json(serial) == report_to_json(ok));

  for (auto& node : t.nodes) {
    if (auto* leaf = std::get_if<RegressionLeaf>(&node.body)) leaf->v_out[0] += 1.0;
  }
  const VerificationReport bad = verify_equivalence(net, t, box, 1000, 7);
  CHECK_FALSE(bad.pass);
  CHECK(bad.max_abs_diff >= 1.0);
}

TEST_CASE("trace-driven tree has no pruned hits on its own trace inputs") {
  const NetworkSpec net = tiny();
  SplitMix64 rng(21);
  std::vector<std::vector<double>> inputs;
  ActivationTrace trace;
  trace.network_hash = network_hash(net);
  for (int i = 0; i < 300; ++i) {
    inputs.push_back(oracle::uniform_point(rng, 2, -0.3, 0.3));
    trace.add(forward_with_pattern(net, inputs.back()).pattern);
  }
  TranslateOptions opts;
  opts.mode = TranslateMode::trace_driven;
  opts.trace = trace;
  const ObliqueTree t = translate(net, opts);
  const VerificationReport r = verify_on_inputs(net, t, inputs);
  CHECK(r.pass);
  CHECK(r.pruned_hits == 0);
  CHECK(r.max_abs_diff <= 1e-9);
  CHECK(stats(t).leaf_count == trace.distinct());
}
