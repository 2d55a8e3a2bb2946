#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "otr/emitter.hpp"
#include "otr/envs.hpp"
#include "otr/errors.hpp"
#include "otr/pid_policy.hpp"
#include "otr/translator.hpp"
#include "otr/tree.hpp"

namespace py = pybind11;
using namespace otr;

namespace {

// JSON crosses the boundary as text; the Python side wraps it with json.loads.
std::string dump(const nlohmann::ordered_json& j) { return j.dump(); }

BoxSampler box_for(std::size_t dim, double lo, double hi,
                   const std::optional<std::vector<std::pair<double, double>>>& box) {
  if (!box) return BoxSampler::uniform(dim, lo, hi);
  BoxSampler b;
  for (const auto& [l, h] : *box) {
    b.lo.push_back(l);
    b.hi.push_back(h);
  }
  return b;
}

py::dict prediction_dict(const Prediction& p) {
  py::dict d;
  d["value"] = p.value;
  d["label"] = p.label ? py::object(py::int_(*p.label)) : py::none();
  d["fallback"] = p.fallback;
  return d;
}

}  // namespace

PYBIND11_MODULE(_otr, m) {
  m.doc() = "Native core of the otr toolchain";
  py::register_exception<Error>(m, "OtrError", PyExc_ValueError);

  py::class_<NetworkSpec>(m, "Network")
      .def_static("from_json", [](const std::string& s) { return network_from_json(nlohmann::json::parse(s)); })
      .def_static("load", &load_network)
      .def("to_json", [](const NetworkSpec& n) { return dump(network_to_json(n)); })
      .def("save", [](const NetworkSpec& n, const std::filesystem::path& p) { save_network(n, p); })
      .def_property_readonly("input_dim", [](const NetworkSpec& n) { return n.input_dim; })
      .def_property_readonly("output_dim", &NetworkSpec::output_dim)
      .def_property_readonly("hidden_neurons", &NetworkSpec::hidden_neuron_count)
      .def_property_readonly("hash", [](const NetworkSpec& n) { return network_hash(n); })
      .def("forward", [](const NetworkSpec& n, const std::vector<double>& x) { return forward(n, x); })
      .def("pattern", [](const NetworkSpec& n, const std::vector<double>& x) {
        return forward_with_pattern(n, x).pattern.str();
      });

  py::class_<ActivationTrace>(m, "Trace")
      .def_static("from_json", [](const std::string& s) { return trace_from_json(nlohmann::json::parse(s)); })
      .def_static("load", &load_trace)
      .def("to_json", [](const ActivationTrace& t) { return dump(trace_to_json(t)); })
      .def("save", [](const ActivationTrace& t, const std::filesystem::path& p) { save_trace(t, p); })
      .def_property_readonly("distinct", &ActivationTrace::distinct)
      .def_property_readonly("total_visits", [](const ActivationTrace& t) { return t.total_visits; })
      .def_property_readonly("counts", [](const ActivationTrace& t) { return t.pattern_counts; });

  py::class_<ObliqueTree>(m, "Tree")
      .def_static("from_json", [](const std::string& s) { return tree_from_json(nlohmann::json::parse(s)); })
      .def_static("load", &load_tree)
      .def("to_json", [](const ObliqueTree& t) { return dump(tree_to_json(t)); })
      .def("save", [](const ObliqueTree& t, const std::filesystem::path& p) { save_tree(t, p); })
      .def_property_readonly("input_dim", [](const ObliqueTree& t) { return t.input_dim; })
      .def("infer", [](const ObliqueTree& t, const std::vector<double>& x) { return prediction_dict(infer(t, x)); })
      .def("path_pattern", [](const ObliqueTree& t, const std::vector<double>& x) {
        return path_pattern(t, x).str();
      })
      .def("stats", [](const ObliqueTree& t, double eps) { return dump(stats_to_json(stats(t, eps))); },
           py::arg("sparse_eps") = 1e-8)
      .def(
          "emit",
          [](const ObliqueTree& t, std::vector<std::string> names, int precision, double drop) {
            EmitOptions o;
            o.names = std::move(names);
            o.precision = precision;
            o.drop_threshold = drop;
            return emit_program(t, o);
          },
          py::arg("names") = std::vector<std::string>{}, py::arg("precision") = 10, py::arg("drop") = 0.0)
      .def("__eq__", [](const ObliqueTree& a, const ObliqueTree& b) { return a == b; });

  m.def(
      "translate",
      [](const NetworkSpec& net, const std::optional<ActivationTrace>& trace, std::uint64_t budget) {
        TranslateOptions o;
        o.node_budget = budget;
        if (trace) {
          o.mode = TranslateMode::trace_driven;
          o.trace = *trace;
        }
        py::gil_scoped_release release;
        return translate(net, o);
      },
      py::arg("net"), py::arg("trace") = std::nullopt, py::arg("budget") = std::uint64_t{1} << 20);

  m.def(
      "verify",
      [](const NetworkSpec& net, const ObliqueTree& tree, std::size_t samples, std::uint64_t seed, double lo,
         double hi, const std::optional<std::vector<std::pair<double, double>>>& box, std::size_t jobs) {
        const BoxSampler b = box_for(net.input_dim, lo, hi, box);
        py::gil_scoped_release release;
        return dump(report_to_json(verify_equivalence(net, tree, b, samples, seed, jobs)));
      },
      py::arg("net"), py::arg("tree"), py::arg("samples") = 1000, py::arg("seed") = 0, py::arg("lo") = -1.0,
      py::arg("hi") = 1.0, py::arg("box") = std::nullopt, py::arg("jobs") = 1);

  m.def("prune", [](const ObliqueTree& t, const ActivationTrace& tr) { return prune_unvisited(t, tr); });
  m.def("prune_topk", &prune_topk, py::arg("tree"), py::arg("trace"), py::arg("k"));

  m.def(
      "parse_and_eval",
      [](const std::string& text, std::vector<std::string> names, const std::vector<double>& x) {
        const Program::Result r = parse_program(text, std::move(names)).evaluate(x);
        py::dict d;
        d["value"] = r.value;
        d["label"] = r.label ? py::object(py::int_(*r.label)) : py::none();
        d["pruned"] = r.pruned;
        return d;
      },
      py::arg("text"), py::arg("names"), py::arg("x"));

  m.def(
      "rollout",
      [](const std::filesystem::path& policy, const std::string& env, std::size_t episodes, std::uint64_t seed,
         std::size_t jobs, bool random_behavior) {
        RolloutOptions o;
        o.episodes = episodes;
        o.seed = seed;
        o.jobs = jobs;
        o.behavior = random_behavior ? Behavior::uniform_random : Behavior::policy;
        const Policy p = load_policy(policy);
        const EnvId id = parse_env_id(env);
        py::gil_scoped_release release;
        return dump(rollout_to_json(rollout(p, id, o)));
      },
      py::arg("policy"), py::arg("env"), py::arg("episodes") = 100, py::arg("seed") = 0, py::arg("jobs") = 1,
      py::arg("random_behavior") = false);

  m.def(
      "collect_trace",
      [](const NetworkSpec& net, const std::string& env, std::size_t episodes, std::uint64_t seed,
         bool random_behavior) {
        RolloutOptions o;
        o.episodes = episodes;
        o.seed = seed;
        o.behavior = random_behavior ? Behavior::uniform_random : Behavior::policy;
        const EnvId id = parse_env_id(env);
        py::gil_scoped_release release;
        return collect_trace(net, id, o);
      },
      py::arg("net"), py::arg("env"), py::arg("episodes") = 100, py::arg("seed") = 0,
      py::arg("random_behavior") = false);

  m.def(
      "pid_act",
      [](const std::filesystem::path& policy, const std::vector<double>& state,
         const std::vector<std::vector<double>>& history) {
        const PidPolicySpec spec = load_pid_policy(policy);
        PidState st(spec.history_len);
        for (const auto& h : history) st.push(h);
        return pid_act(spec, state, st).action;
      },
      py::arg("policy"), py::arg("state"), py::arg("history") = std::vector<std::vector<double>>{});
}
