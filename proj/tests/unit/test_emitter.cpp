#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "otr/emitter.hpp"
#include "otr/errors.hpp"
#include "otr/pid_policy.hpp"
#include "otr/translator.hpp"
#include "oracles.hpp"

using namespace otr;

namespace {

std::filesystem::path fixture(const char* name) { return std::filesystem::path(OTR_FIXTURE_DIR) / name; }

std::string squash(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (!std::isspace(static_cast<unsigned char>(c))) out.push_back(c);
  }
  return out;
}

}  // namespace

TEST_CASE("oblique car tree renders as expected") {
  const ObliqueTree t = load_tree(fixture("car_oblique.tree.json"));
  EmitOptions opts;
  opts.names = {"x", "v_x"};
  const std::string text = emit_program(t, opts);
  CHECK(text ==
        "if -2.2 - 3.8 x + 114.3 v_x <= 0 then\n"
        "  -6.1\n"
        "else\n"
        "  -102.3 - 169.8 x + 5116.5 v_x\n");
  // Same token stream as the compact one-line form.
  CHECK(squash(text) == squash("if -2.2 -3.8x + 114.3v_x <= 0 then -6.1 else -102.3 -169.8x + 5116.5 v_x"));
}

TEST_CASE("sign car tree renders as expected") {
  EmitOptions opts;
  opts.names = {"x", "v_x"};
  CHECK(emit_program(load_tree(fixture("car_sign.tree.json")), opts) ==
        "if v_x <= 0 then\n  -1\nelse\n  1\n");
}

TEST_CASE("PID policy renders theta blocks") {
  const PidPolicySpec spec = load_pid_policy(fixture("pendulum_pid.policy.json"));
  EmitOptions opts;
  opts.names = {"x", "y", "w"};
  opts.pid = PidLayout{3, 1};
  const std::string text = emit_program(std::get<ObliqueTree>(spec.theta), opts);
  CHECK(text.find("[3.15, 3.24, 0.65] * P") != std::string::npos);
  CHECK(text.find("[10.94, 11.89, 0.13] * D") != std::string::npos);
  CHECK(text.find("[-0.25 + 0.75 x + 1.04 y + 0.41 w, 0.52, 0.1 - 0.13 x - 0.17 y - 0.07 w] * I") !=
        std::string::npos);
  CHECK(text.rfind("if 7.78 - 15.7 x - 21.7 y - 8.48 w <= 0 then", 0) == 0);
}

TEST_CASE("constant leaf renders as the bare number") {
  ObliqueTree t;
  t.input_dim = 2;
  t.nodes.push_back({RegressionLeaf{Matrix(1, 2), {2.5}, LeafActivation::identity}, 0});
  CHECK(emit_program(t) == "2.5\n");
  t.nodes[0].body = RegressionLeaf{Matrix(1, 2), {0.0}, LeafActivation::identity};
  CHECK(emit_program(t) == "0\n");
}

TEST_CASE("number formatting") {
  CHECK(format_number(114.3, 10) == "114.3");
  CHECK(format_number(-0.12, 10) == "-0.12");
  CHECK(format_number(1.0 / 3.0, 4) == "0.3333");
  CHECK(format_number(123456.7, 3) == "123457");
  CHECK(format_number(2.5e7, 10) == "25000000");
  CHECK(format_number(1e-7, 3) == "0.0000001");
  CHECK(format_number(-0.0, 5) == "0");
}

TEST_CASE("random trees survive emit, parse and evaluate") {
  SplitMix64 rng(90);
  for (int n = 0; n < 30; ++n) {
    const NetworkSpec net = oracle::random_network(rng, static_cast<TaskKind>(n % 3), n % 2 == 0);
    if (net.hidden_neuron_count() > 9) continue;
    const ObliqueTree t = translate(net);
    EmitOptions opts;
    opts.precision = 17;
    const Program program = parse_program(emit_program(t, opts), default_names(t.input_dim));
    for (int i = 0; i < 200; ++i) {
      const auto x = oracle::uniform_point(rng, t.input_dim);
      const Prediction want = infer(t, x);
      const Program::Result got = program.evaluate(x);
      CHECK(got.label == want.label);
      REQUIRE(got.value.size() == want.value.size());
      for (std::size_t k = 0; k < want.value.size(); ++k) {
        CHECK(std::abs(got.value[k] - want.value[k]) <= 1e-8 * std::max(1.0, std::abs(want.value[k])));
      }
    }
    const RoundTripReport r = round_trip_check(t, EmitOptions{}, BoxSampler::uniform(t.input_dim, -1, 1), 300, n);
    CHECK(r.pass);
    CHECK(r.compared + r.near_boundary == 300);
  }
}

TEST_CASE("round trip tolerance follows the printed precision") {
  const ObliqueTree t = load_tree(fixture("car_oblique.tree.json"));
  EmitOptions opts;
  opts.precision = 2;  // 5116.5 prints as 5100
  const auto box = BoxSampler{{-1.2, -0.07}, {0.6, 0.07}};
  CHECK(round_trip_check(t, opts, box, 500, 1).pass);
}

TEST_CASE("parser reports positions") {
  const std::vector<std::string> names{"x", "y"};
  try {
    parse_program("if x + y <= 0 then\n  1\nels\n  2\n", names);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_program("if z <= 0 then 1 else 2", names), ParseError);
  CHECK_THROWS_AS(parse_program("1 2", names), ParseError);
  CHECK_THROWS_AS(parse_program("if x <= 1 then 1 else 2", names), ParseError);
}

TEST_CASE("hand-written programs evaluate") {
  const std::vector<std::string> names{"x", "y"};
  const Program p = parse_program("if 1 - 2 x <= 0 then class 1 else tanh([x + y, 0.5])", names);
  const std::vector<double> right{0.6, 0.0};
  CHECK(p.evaluate(right).label == 1u);
  const std::vector<double> left{0.25, 1.0};
  const auto r = p.evaluate(left);
  REQUIRE(r.value.size() == 2);
  CHECK(r.value[0] == doctest::Approx(std::tanh(1.25)));
  CHECK(r.value[1] == doctest::Approx(std::tanh(0.5)));
  CHECK(parse_program("pruned", names).evaluate(left).pruned);
}

TEST_CASE("drop threshold hides small terms") {
  ObliqueTree t = load_tree(fixture("car_oblique.tree.json"));
  EmitOptions opts;
  opts.names = {"x", "v_x"};
  opts.drop_threshold = 5.0;
  CHECK(emit_program(t, opts) == "if -2.2 + 114.3 v_x <= 0 then\n  -6.1\nelse\n  -102.3 - 169.8 x + 5116.5 v_x\n");
}

TEST_CASE("zero_out") {
  const ObliqueTree t = load_tree(fixture("car_oblique.tree.json"));
  SUBCASE("epsilon zero is the identity") {
    const ZeroOutResult z = zero_out(t, 0.0);
    CHECK(z.zeroed == 0);
    CHECK(z.tree == t);
  }
  SUBCASE("nothing below threshold") {
    const ZeroOutResult z = zero_out(t, 0.5);
    CHECK(z.tree == t);
  }
  SUBCASE("idempotent") {
    const ZeroOutResult once = zero_out(t, 10.0);
    CHECK(once.zeroed == 1);
    CHECK(zero_out(once.tree, 10.0).tree == once.tree);
    CHECK(zero_out(once.tree, 10.0).zeroed == 0);
  }
  SUBCASE("negative epsilon") { CHECK_THROWS(zero_out(t, -1.0)); }
}

TEST_CASE("zeroing L1-killed weights in the PID policy barely moves the gains") {
  const PidPolicySpec spec = load_pid_policy(fixture("pendulum_pid.policy.json"));
  ObliqueTree t = std::get<ObliqueTree>(spec.theta);
  // Weights that aggressive L1 drives to numerical zero but not exactly zero.
  SplitMix64 noise(3);
  for (auto& node : t.nodes) {
    if (auto* leaf = std::get_if<RegressionLeaf>(&node.body)) {
      for (double& c : leaf->p_out.data()) {
        if (c == 0.0) c = noise.uniform(-1e-9, 1e-9);
      }
    }
  }
  // Pendulum observations: (cos, sin, theta_dot).
  BoxSampler box{{-1, -1, -8}, {1, 1, 8}};
  const ZeroOutResult z = zero_out(t, 1e-6, box, 1000, 5);
  CHECK(z.zeroed > 0);
  CHECK(z.samples == 1000);
  CHECK(z.max_output_change < 1e-6);
  CHECK(structurally_equal(z.tree, std::get<ObliqueTree>(spec.theta)));
}

TEST_CASE("dominance report on the car tree root") {
  const ObliqueTree t = load_tree(fixture("car_oblique.tree.json"));
  const DominanceReport r = dominance_report(t, {{-1.2, 0.6}, {-0.07, 0.07}});
  REQUIRE(r.nodes.size() == 1);
  const NodeDominance& root = r.nodes[0];
  CHECK(root.contributions[0] == doctest::Approx(3.8 * 1.2));
  CHECK(root.contributions[1] == doctest::Approx(114.3 * 0.07));
  CHECK(root.bias_contribution == doctest::Approx(2.2));
  CHECK(root.dominant == 1u);
  CHECK(root.ranking == std::vector<std::size_t>{1, 0});
  CHECK_FALSE(root.droppable[0]);
  const auto j = dominance_to_json(r, {"x", "v_x"});
  CHECK(j["nodes"][0]["dominant"] == "v_x");
}

TEST_CASE("dominance edge cases") {
  ObliqueTree t;
  t.input_dim = 2;
  t.nodes.push_back({DecisionNode{{1.0, 1.0}, 0.0, kNoNeuron, 1, 2}, 0});
  t.nodes.push_back({RegressionLeaf{Matrix(1, 2), {0.0}, LeafActivation::identity}, 0});
  t.nodes.push_back({RegressionLeaf{Matrix(1, 2), {1.0}, LeafActivation::identity}, 0});
  SUBCASE("symmetric box") {
    const auto r = dominance_report(t, {{-2, 2}, {-2, 2}});
    CHECK(r.nodes[0].contributions[0] == r.nodes[0].contributions[1]);
    CHECK_FALSE(r.nodes[0].droppable[0]);
    CHECK_FALSE(r.nodes[0].droppable[1]);
  }
  SUBCASE("all-zero row") {
    std::get<DecisionNode>(t.nodes[0].body).p = {0.0, 0.0};
    const auto r = dominance_report(t, {{-2, 2}, {-2, 2}});
    CHECK_FALSE(r.nodes[0].dominant.has_value());
    CHECK(dominance_to_json(r, {"a", "b"})["nodes"][0]["dominant"].is_null());
  }
  SUBCASE("degenerate point box") {
    const auto r = dominance_report(t, {{0.5, 0.5}, {0.5, 0.5}});
    CHECK(r.nodes[0].contributions[0] == 0.5);
  }
  SUBCASE("wrong box width") { CHECK_THROWS_AS(dominance_report(t, {{0, 1}}), DimensionError); }
}
