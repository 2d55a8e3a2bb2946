#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "otr/emitter.hpp"
#include "otr/envs.hpp"
#include "otr/errors.hpp"
#include "otr/network.hpp"
#include "otr/pid_policy.hpp"
#include "otr/translator.hpp"
#include "otr/tree.hpp"

namespace otr::cli {
namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- logging ----------------------------------------------------------------

bool g_json_log = false;

void setup_logging(const std::string& format) {
  g_json_log = format == "json";
  spdlog::drop("otr");
  auto logger = spdlog::stderr_logger_st("otr");
  if (g_json_log) {
    logger->set_pattern(R"({"ts":"%Y-%m-%dT%H:%M:%S.%e","level":"%l","msg":%v})");
  } else {
    logger->set_pattern("otr: %l: %v");
  }
  logger->set_level(spdlog::level::info);
  if (const char* env = std::getenv("OTR_LOG"); env != nullptr && *env != '\0') {
    const std::string name = env;
    const auto level = spdlog::level::from_str(name);
    if (level == spdlog::level::off && name != "off") {
      throw UsageError(fmt::format("OTR_LOG: unknown log level '{}'", name));
    }
    logger->set_level(level);
  }
  spdlog::set_default_logger(logger);
}

void emit_log(spdlog::level::level_enum level, const std::string& msg) {
  spdlog::log(level, "{}", g_json_log ? nlohmann::json(msg).dump() : msg);
}

template <typename... Args>
void info(fmt::format_string<Args...> f, Args&&... args) {
  emit_log(spdlog::level::info, fmt::format(f, std::forward<Args>(args)...));
}

template <typename... Args>
void error(fmt::format_string<Args...> f, Args&&... args) {
  emit_log(spdlog::level::err, fmt::format(f, std::forward<Args>(args)...));
}

// --- shared helpers -----------------------------------------------------------

void write_output(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    std::cout.flush();
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(fmt::format("cannot write '{}'", path));
  out << text;
  if (!out) throw Error(fmt::format("failed writing '{}'", path));
}

std::string json_text(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

std::size_t resolve_jobs(std::size_t jobs) {
  if (jobs != 0) return jobs;
  return std::max(1u, std::thread::hardware_concurrency());
}

/// "lo:hi" per dimension, comma separated on the command line.
InputBox parse_box(const std::vector<std::string>& parts, const char* flag) {
  InputBox box;
  for (const auto& part : parts) {
    const auto colon = part.find(':', part.empty() ? 0 : 1);
    if (colon == std::string::npos) {
      throw UsageError(fmt::format("{}: expected lo:hi, got '{}'", flag, part));
    }
    try {
      std::size_t used_lo = 0, used_hi = 0;
      const std::string lo_text = part.substr(0, colon), hi_text = part.substr(colon + 1);
      const double lo = std::stod(lo_text, &used_lo);
      const double hi = std::stod(hi_text, &used_hi);
      if (used_lo != lo_text.size() || used_hi != hi_text.size()) throw std::invalid_argument("");
      if (!(lo <= hi)) throw UsageError(fmt::format("{}: lo > hi in '{}'", flag, part));
      box.emplace_back(lo, hi);
    } catch (const std::logic_error&) {
      throw UsageError(fmt::format("{}: cannot parse '{}'", flag, part));
    }
  }
  return box;
}

struct SamplingFlags {
  double lo = -1.0;
  double hi = 1.0;
  std::vector<std::string> box;
  std::size_t samples = 1000;
  std::uint64_t seed = 0;

  void add_to(CLI::App* cmd, bool with_seed = true) {
    cmd->add_option("--samples", samples, "Number of sampled inputs")->capture_default_str();
    if (with_seed) cmd->add_option("--seed", seed, "Master seed")->capture_default_str();
    cmd->add_option("--lo", lo, "Lower bound of every input dimension")->capture_default_str();
    cmd->add_option("--hi", hi, "Upper bound of every input dimension")->capture_default_str();
    cmd->add_option("--box", box, "Per-dimension box lo:hi,lo:hi,... (overrides --lo/--hi)")
        ->delimiter(',');
  }

  void check() const {
    if (!(lo <= hi)) throw UsageError("--lo must not exceed --hi");
    if (!box.empty()) parse_box(box, "--box");
  }

  BoxSampler sampler(std::size_t dim) const {
    if (box.empty()) return BoxSampler::uniform(dim, lo, hi);
    const InputBox b = parse_box(box, "--box");
    if (b.size() != dim) {
      throw UsageError(fmt::format("--box has {} intervals, input has {} dimensions", b.size(), dim));
    }
    BoxSampler s;
    for (const auto& [l, h] : b) {
      s.lo.push_back(l);
      s.hi.push_back(h);
    }
    return s;
  }
};

/// A plain tree file, or the gain tree inside a PID policy file.
struct LoadedTree {
  ObliqueTree tree;
  std::optional<PidPolicySpec> pid;
};

LoadedTree load_tree_or_pid(const std::string& path) {
  Policy policy = load_policy(path);
  if (auto* tree = std::get_if<ObliqueTree>(&policy)) return {std::move(*tree), std::nullopt};
  if (auto* spec = std::get_if<PidPolicySpec>(&policy)) {
    auto* tree = std::get_if<ObliqueTree>(&spec->theta);
    if (tree == nullptr) throw Error(fmt::format("'{}': PID gains come from a network, not a tree", path));
    ObliqueTree copy = *tree;
    return {std::move(copy), std::move(*spec)};
  }
  throw Error(fmt::format("'{}' holds a network, expected a tree", path));
}

std::vector<std::string> check_names(const std::vector<std::string>& names, std::size_t dim) {
  if (!names.empty() && names.size() != dim) {
    throw UsageError(fmt::format("--names lists {} names, input has {} dimensions", names.size(), dim));
  }
  return names;
}

// --- subcommands --------------------------------------------------------------

struct Globals {
  std::string log = "text";
  std::size_t jobs = 1;
};

struct TranslateCmd {
  std::string net, trace, out, mode = "full";
  std::uint64_t budget = std::uint64_t{1} << 20;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("translate", "Compile a network into an oblique tree");
    cmd->add_option("--net", net, "Network JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--mode", mode, "full | trace")
        ->check(CLI::IsMember({"full", "trace"}))
        ->capture_default_str();
    cmd->add_option("--trace", trace, "Activation trace (required with --mode trace)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--budget", budget, "Maximum leaves in full mode")->capture_default_str();
    cmd->add_option("--out", out, "Output tree JSON")->required();
    cmd->callback([this] { validate(); });
  }

  void validate() const {
    if (mode == "trace" && trace.empty()) throw UsageError("--trace is required with --mode trace");
    if (mode == "full" && !trace.empty()) throw UsageError("--trace only applies to --mode trace");
  }

  int run() const {
    const NetworkSpec network = load_network(net);
    TranslateOptions opts;
    opts.node_budget = budget;
    if (mode == "trace") {
      opts.mode = TranslateMode::trace_driven;
      opts.trace = load_trace(trace);
      check_trace_matches(*opts.trace, network);
    }
    info("translating {} ({} hidden neurons, mode {})", net, network.hidden_neuron_count(), mode);
    const ObliqueTree tree = translate(network, opts);
    const TreeStats s = stats(tree);
    info("tree has {} nodes, {} leaves, {} pruned", s.node_count, s.leaf_count, s.pruned_count);
    write_output(out, json_text(tree_to_json(tree)));
    return kExitOk;
  }
};

struct VerifyCmd {
  std::string net, tree, out;
  SamplingFlags sampling;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("verify", "Check a tree against its source network");
    cmd->add_option("--net", net, "Network JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--tree", tree, "Tree JSON")->required()->check(CLI::ExistingFile);
    sampling.add_to(cmd);
    cmd->add_option("--out", out, "Report JSON (stdout when omitted)");
    cmd->callback([this] { sampling.check(); });
  }

  int run(const Globals& g) const {
    const NetworkSpec network = load_network(net);
    const ObliqueTree t = load_tree(tree);
    const BoxSampler sampler = sampling.sampler(network.input_dim);
    info("verifying {} against {} on {} samples (seed {})", tree, net, sampling.samples, sampling.seed);
    const VerificationReport r =
        verify_equivalence(network, t, sampler, sampling.samples, sampling.seed, resolve_jobs(g.jobs));
    write_output(out, json_text(report_to_json(r)));
    if (!r.pass) {
      error("equivalence check failed: max relative difference {:.3g}, {} label disagreements",
            r.max_rel_diff, r.label_disagreements);
      return kExitVerifyFailed;
    }
    info("equivalent on {} compared samples ({} hit pruned leaves)", r.compared, r.pruned_hits);
    return kExitOk;
  }
};

struct PruneCmd {
  std::string net, tree, trace, out;
  std::optional<std::size_t> topk;
  std::uint64_t budget = std::uint64_t{1} << 20;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("prune", "Remove tree paths not reached by a trace");
    auto* tree_opt = cmd->add_option("--tree", tree, "Tree JSON to prune")->check(CLI::ExistingFile);
    auto* net_opt = cmd->add_option("--net", net, "Network JSON; builds the trace-driven tree directly")
                        ->check(CLI::ExistingFile);
    tree_opt->excludes(net_opt);
    cmd->add_option("--trace", trace, "Activation trace")->required()->check(CLI::ExistingFile);
    cmd->add_option("--topk", topk, "Keep only the k most visited patterns");
    cmd->add_option("--out", out, "Output tree JSON")->required();
    cmd->callback([this] { validate(); });
  }

  void validate() const {
    if (tree.empty() && net.empty()) throw UsageError("prune needs --tree or --net");
    if (topk && *topk == 0) throw UsageError("--topk must be at least 1");
  }

  int run() const {
    const ActivationTrace t = load_trace(trace);
    ObliqueTree result;
    if (!net.empty()) {
      const NetworkSpec network = load_network(net);
      check_trace_matches(t, network);
      TranslateOptions opts;
      opts.mode = TranslateMode::trace_driven;
      opts.trace = t;
      result = translate(network, opts);
      if (topk) result = prune_topk(result, t, *topk);
    } else {
      const ObliqueTree full = load_tree(tree);
      result = topk ? prune_topk(full, t, *topk) : prune_unvisited(full, t);
    }
    const TreeStats s = stats(result);
    info("kept {} leaves of {} traced patterns, {} pruned stubs", s.leaf_count, t.distinct(),
         s.pruned_count);
    write_output(out, json_text(tree_to_json(result)));
    return kExitOk;
  }
};

struct EmitCmd {
  std::string tree, policy, out;
  std::vector<std::string> names;
  int precision = 10;
  double drop = 0.0;
  std::optional<double> zero_eps;
  bool check = false;
  SamplingFlags sampling;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("emit", "Render a tree or PID policy as a DSL program");
    auto* tree_opt = cmd->add_option("--tree", tree, "Tree JSON")->check(CLI::ExistingFile);
    auto* pol_opt = cmd->add_option("--policy", policy, "PID policy JSON with a gain tree")
                        ->check(CLI::ExistingFile);
    tree_opt->excludes(pol_opt);
    cmd->add_option("--names", names, "Comma-separated variable names")->delimiter(',');
    cmd->add_option("--precision", precision, "Significant digits")
        ->check(CLI::Range(1, 17))
        ->capture_default_str();
    cmd->add_option("--drop", drop, "Omit terms with |coefficient| <= this")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    cmd->add_option("--zero-out", zero_eps, "Zero coefficients with |p| <= eps before emitting")
        ->check(CLI::NonNegativeNumber);
    cmd->add_flag("--check", check, "Re-parse the program and compare it with the tree");
    sampling.add_to(cmd);
    cmd->add_option("--out", out, "Output .otr-dsl file (stdout when omitted)");
    cmd->callback([this] {
      if (tree.empty() && policy.empty()) throw UsageError("emit needs --tree or --policy");
      sampling.check();
    });
  }

  int run() const {
    LoadedTree loaded = load_tree_or_pid(tree.empty() ? policy : tree);
    if (!policy.empty() && !loaded.pid) throw UsageError("--policy expects a PID policy file");
    EmitOptions opts;
    opts.names = check_names(names, loaded.tree.input_dim);
    opts.precision = precision;
    opts.drop_threshold = drop;
    if (loaded.pid) opts.pid = PidLayout{loaded.pid->state_dim(), loaded.pid->action_dim};
    if (zero_eps) {
      ZeroOutResult z = zero_out(loaded.tree, *zero_eps, sampling.sampler(loaded.tree.input_dim),
                                 sampling.samples, sampling.seed);
      info("zeroed {} coefficients; max output change {:.3g} over {} samples", z.zeroed,
           z.max_output_change, z.samples);
      loaded.tree = std::move(z.tree);
    }
    const std::string text = emit_program(loaded.tree, opts);
    if (check) {
      const RoundTripReport r = round_trip_check(loaded.tree, opts, sampling.sampler(loaded.tree.input_dim),
                                                 sampling.samples, sampling.seed);
      info("round trip: {}", round_trip_to_json(r).dump());
      if (!r.pass) {
        error("emitted program disagrees with the tree on {} of {} samples", r.mismatches, r.compared);
        return kExitPipeline;
      }
    }
    write_output(out, text);
    return kExitOk;
  }
};

struct EvalCmd {
  std::string policy, env, out, trace_out;
  std::size_t episodes = 100;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("eval", "Roll a policy out in an environment");
    cmd->add_option("--policy", policy, "Network, tree or PID policy JSON")
        ->required()
        ->check(CLI::ExistingFile);
    cmd->add_option("--env", env, "mountain_car | pendulum")->required();
    cmd->add_option("--episodes", episodes, "Episode count")->capture_default_str();
    cmd->add_option("--seed", seed, "Master seed")->capture_default_str();
    cmd->add_option("--out", out, "Rollout report JSON (stdout when omitted)");
    cmd->add_option("--trace-out", trace_out, "Also save the activation trace (network policies)");
    cmd->callback([this] {
      try {
        parse_env_id(env);
      } catch (const UnknownEnvironment& e) {
        throw UsageError(fmt::format("--env: {}", e.what()));
      }
    });
  }

  int run(const Globals& g) const {
    const Policy p = load_policy(policy);
    if (!trace_out.empty() && !std::holds_alternative<NetworkSpec>(p)) {
      throw UsageError("--trace-out needs a network policy");
    }
    const EnvId id = parse_env_id(env);
    RolloutOptions opts;
    opts.episodes = episodes;
    opts.seed = seed;
    opts.jobs = resolve_jobs(g.jobs);
    info("evaluating {} on {} for {} episodes (seed {})", policy, to_string(id), episodes, seed);
    const RolloutResult r = rollout(p, id, opts);
    info("mean reward {:.4f} (std {:.4f}), {} fallbacks", r.mean, r.std, r.fallback_count);
    if (!trace_out.empty()) write_output(trace_out, json_text(trace_to_json(*r.trace)));
    write_output(out, json_text(rollout_to_json(r)));
    return kExitOk;
  }
};

struct TraceCmd {
  std::string net, env, out, behavior = "policy";
  std::size_t episodes = 100;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("trace", "Record the activation patterns a network visits");
    cmd->add_option("--net", net, "Network JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--env", env, "mountain_car | pendulum")->required();
    cmd->add_option("--episodes", episodes, "Episode count")->capture_default_str();
    cmd->add_option("--seed", seed, "Master seed")->capture_default_str();
    cmd->add_option("--behavior", behavior, "policy | random: which actions drive the environment")
        ->check(CLI::IsMember({"policy", "random"}))
        ->capture_default_str();
    cmd->add_option("--out", out, "Output trace JSON")->required();
    cmd->callback([this] {
      try {
        parse_env_id(env);
      } catch (const UnknownEnvironment& e) {
        throw UsageError(fmt::format("--env: {}", e.what()));
      }
    });
  }

  int run(const Globals& g) const {
    const NetworkSpec network = load_network(net);
    RolloutOptions opts;
    opts.episodes = episodes;
    opts.seed = seed;
    opts.jobs = resolve_jobs(g.jobs);
    opts.behavior = behavior == "random" ? Behavior::uniform_random : Behavior::policy;
    const ActivationTrace t = collect_trace(network, parse_env_id(env), opts);
    info("{} visits, {} distinct patterns over {} neurons", t.total_visits, t.distinct(),
         network.hidden_neuron_count());
    write_output(out, json_text(trace_to_json(t)));
    return kExitOk;
  }
};

struct StatsCmd {
  std::string tree, out;
  std::vector<std::string> box, names;
  double sparse_eps = 1e-8;
  double tau = 0.1;

  void add(CLI::App& app) {
    auto* cmd = app.add_subcommand("stats", "Tree statistics and, with --box, a dominance report");
    cmd->add_option("--tree", tree, "Tree JSON or PID policy JSON")->required()->check(CLI::ExistingFile);
    cmd->add_option("--sparse-eps", sparse_eps, "Coefficients with |p| <= this count as zero")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    cmd->add_option("--box", box, "Input box lo:hi,lo:hi,... for the dominance report")->delimiter(',');
    cmd->add_option("--tau", tau, "Droppable-term threshold relative to the largest contribution")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    cmd->add_option("--names", names, "Comma-separated variable names")->delimiter(',');
    cmd->add_option("--out", out, "Output JSON (stdout when omitted)");
    cmd->callback([this] {
      if (!box.empty()) parse_box(box, "--box");
    });
  }

  int run() const {
    const LoadedTree loaded = load_tree_or_pid(tree);
    nlohmann::ordered_json j;
    j["stats"] = stats_to_json(stats(loaded.tree, sparse_eps));
    if (!box.empty()) {
      std::vector<std::string> n = check_names(names, loaded.tree.input_dim);
      if (n.empty()) n = default_names(loaded.tree.input_dim);
      const InputBox b = parse_box(box, "--box");
      if (b.size() != loaded.tree.input_dim) {
        throw UsageError(fmt::format("--box has {} intervals, tree has {} inputs", b.size(),
                                     loaded.tree.input_dim));
      }
      j["dominance"] = dominance_to_json(dominance_report(loaded.tree, b, tau), n);
    }
    write_output(out, json_text(j));
    return kExitOk;
  }
};

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Compile ReLU policies into oblique decision trees and programs", "otr"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--log", g.log, "Progress log format: text | json")
      ->check(CLI::IsMember({"text", "json"}))
      ->capture_default_str();
  app.add_option("--jobs", g.jobs, "Worker threads (0 = hardware concurrency)")->capture_default_str();

  TranslateCmd translate_cmd;
  VerifyCmd verify_cmd;
  PruneCmd prune_cmd;
  EmitCmd emit_cmd;
  EvalCmd eval_cmd;
  TraceCmd trace_cmd;
  StatsCmd stats_cmd;
  translate_cmd.add(app);
  verify_cmd.add(app);
  prune_cmd.add(app);
  emit_cmd.add(app);
  eval_cmd.add(app);
  trace_cmd.add(app);
  stats_cmd.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  } catch (const UsageError& e) {
    std::cerr << "otr: usage error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    setup_logging(g.log);
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "translate") return translate_cmd.run();
    if (name == "verify") return verify_cmd.run(g);
    if (name == "prune") return prune_cmd.run();
    if (name == "emit") return emit_cmd.run();
    if (name == "eval") return eval_cmd.run(g);
    if (name == "trace") return trace_cmd.run(g);
    return stats_cmd.run();
  } catch (const UsageError& e) {
    std::cerr << "otr: usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    if (spdlog::get("otr")) {
      error("{}", e.what());
    } else {
      std::cerr << "otr: error: " << e.what() << "\n";
    }
    return kExitPipeline;
  }
}

}  // namespace otr::cli
