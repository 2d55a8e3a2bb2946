#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "otr/translator.hpp"
#include "otr/tree.hpp"
#include "oracles.hpp"

using namespace otr;
namespace fs = std::filesystem;

namespace {

int otr_main(std::vector<std::string> args) {
  args.insert(args.begin(), "otr");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run(static_cast<int>(argv.size()), argv.data());
}

std::string fixture(const char* name) { return (fs::path(OTR_FIXTURE_DIR) / name).string(); }

fs::path scratch() {
  const fs::path dir = fs::temp_directory_path() / "otr_test_cli";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("translate then verify the tiny network") {
  const auto tree = (scratch() / "tiny.tree.json").string();
  const auto report = (scratch() / "tiny.verify.json").string();
  CHECK(otr_main({"translate", "--net", fixture("tiny_net.json"), "--mode", "full", "--out", tree}) == 0);
  CHECK(otr_main({"verify", "--net", fixture("tiny_net.json"), "--tree", tree, "--samples", "1000",
                  "--seed", "7", "--out", report}) == 0);
  const auto j = nlohmann::json::parse(slurp(report));
  CHECK(j["pass"] == true);
  CHECK(j["compared"] == 1000);
}

TEST_CASE("verify exits non-zero on a broken tree") {
  ObliqueTree t = translate(load_network(fixture("tiny_net.json")));
  for (auto& node : t.nodes) {
    if (auto* leaf = std::get_if<RegressionLeaf>(&node.body)) leaf->v_out[0] += 1.0;
  }
  const auto path = scratch() / "broken.tree.json";
  save_tree(t, path);
  CHECK(otr_main({"verify", "--net", fixture("tiny_net.json"), "--tree", path.string(), "--out",
                  (scratch() / "broken.json").string()}) == cli::kExitVerifyFailed);
}

TEST_CASE("emit reproduces the car tree text") {
  const auto out = scratch() / "car.otr-dsl";
  CHECK(otr_main({"emit", "--tree", fixture("car_oblique.tree.json"), "--names", "x,v_x", "--check", "--out",
                  out.string()}) == 0);
  CHECK(slurp(out) == "if -2.2 - 3.8 x + 114.3 v_x <= 0 then\n  -6.1\nelse\n  -102.3 - 169.8 x + 5116.5 v_x\n");
}

TEST_CASE("prune with a one-pattern trace saturates at one leaf") {
  SplitMix64 rng(1);
  const NetworkSpec big = oracle::random_relu_net(rng, 3, 14);
  const auto net = scratch() / "big.json";
  save_network(big, net);
  ActivationTrace t;
  t.network_hash = network_hash(big);
  t.add(forward_with_pattern(big, std::vector<double>{0.1, 0.2, 0.3}).pattern, 12);
  const auto trace = scratch() / "t.json";
  save_trace(t, trace);
  const auto out = scratch() / "big.pruned.json";
  CHECK(otr_main({"prune", "--net", net.string(), "--trace", trace.string(), "--topk", "2", "--out",
                  out.string()}) == 0);
  CHECK(stats(load_tree(out)).leaf_count == 1);
}

TEST_CASE("usage errors exit with 2 before doing work") {
  const auto out = (scratch() / "never.json").string();
  fs::remove(out);
  CHECK(otr_main({"prune", "--net", fixture("tiny_net.json"), "--out", out}) == cli::kExitUsage);
  CHECK(otr_main({"translate", "--net", fixture("tiny_net.json"), "--mode", "trace", "--out", out}) ==
        cli::kExitUsage);
  CHECK(otr_main({"translate", "--net", fixture("tiny_net.json"), "--mode", "bogus", "--out", out}) ==
        cli::kExitUsage);
  CHECK(otr_main({"eval", "--policy", fixture("car_oblique.tree.json"), "--env", "cartpole"}) == cli::kExitUsage);
  CHECK(otr_main({"prune", "--tree", fixture("car_oblique.tree.json"), "--trace", fixture("tiny_net.json"),
                  "--topk", "0", "--out", out}) == cli::kExitUsage);
  CHECK(otr_main({"verify", "--net", "/nonexistent.json", "--tree", "x"}) == cli::kExitUsage);
  CHECK(otr_main({}) == cli::kExitUsage);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("pipeline errors exit with 1") {
  // A network file passed where a trace is expected fails inside the pipeline.
  CHECK(otr_main({"prune", "--tree", fixture("car_oblique.tree.json"), "--trace", fixture("tiny_net.json"),
                  "--out", (scratch() / "x.json").string()}) == cli::kExitPipeline);
  CHECK(otr_main({"eval", "--policy", fixture("tiny_net.json"), "--env", "pendulum", "--episodes", "1"}) ==
        cli::kExitPipeline);
}

TEST_CASE("trace, translate, prune, eval and stats compose and repeat byte for byte") {
  SplitMix64 rng(2);
  const auto net = scratch() / "pend.json";
  save_network(oracle::random_relu_net(rng, 3, 10), net);
  std::vector<std::string> first;
  for (int round = 0; round < 2; ++round) {
    const auto dir = scratch() / ("round" + std::to_string(round));
    fs::create_directories(dir);
    const auto p = [&](const char* n) { return (dir / n).string(); };
    REQUIRE(otr_main({"--jobs", "3", "trace", "--net", net.string(), "--env", "pendulum", "--episodes", "6",
                      "--seed", "5", "--behavior", "random", "--out", p("trace.json")}) == 0);
    REQUIRE(otr_main({"translate", "--net", net.string(), "--mode", "trace", "--trace", p("trace.json"),
                      "--out", p("tree.json")}) == 0);
    REQUIRE(otr_main({"translate", "--net", net.string(), "--out", p("full.json")}) == 0);
    REQUIRE(otr_main({"prune", "--tree", p("full.json"), "--trace", p("trace.json"), "--topk", "3", "--out",
                      p("top3.json")}) == 0);
    REQUIRE(otr_main({"eval", "--policy", p("top3.json"), "--env", "pendulum", "--episodes", "4", "--out",
                      p("eval.json")}) == 0);
    REQUIRE(otr_main({"stats", "--tree", p("top3.json"), "--box", "-1:1,-1:1,-8:8", "--out", p("stats.json")}) ==
            0);
    REQUIRE(otr_main({"emit", "--tree", p("tree.json"), "--check", "--out", p("tree.otr-dsl")}) == 0);
    std::vector<std::string> texts;
    for (const char* n : {"trace.json", "tree.json", "top3.json", "eval.json", "stats.json", "tree.otr-dsl"}) {
      texts.push_back(slurp(dir / n));
    }
    if (round == 0) {
      first = texts;
    } else {
      CHECK(texts == first);
    }
  }
  const auto s = nlohmann::json::parse(first[4]);
  CHECK(s["stats"]["leaf_count"] == 3);
  CHECK(s["dominance"]["nodes"].size() > 0);
}

TEST_CASE("emit and stats accept a PID policy file") {
  const auto out = scratch() / "pid.otr-dsl";
  CHECK(otr_main({"emit", "--policy", fixture("pendulum_pid.policy.json"), "--names", "x,y,w", "--check", "--box",
                  "-1:1,-1:1,-8:8", "--out", out.string()}) == 0);
  CHECK(slurp(out).find("[3.15, 3.24, 0.65] * P") != std::string::npos);
  CHECK(otr_main({"stats", "--tree", fixture("pendulum_pid.policy.json"), "--out",
                  (scratch() / "pid.stats.json").string()}) == 0);
}
