#include "otr/emitter.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "otr/errors.hpp"

namespace otr {

namespace {

const std::set<std::string, std::less<>> kKeywords = {"if", "then", "else", "class", "pruned", "tanh"};

bool is_identifier(std::string_view s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  return std::all_of(s.begin(), s.end(),
                     [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; });
}

void check_names(const std::vector<std::string>& names, std::size_t dim) {
  if (names.size() != dim) {
    throw DimensionError(fmt::format("{} variable names given for {} inputs", names.size(), dim));
  }
  std::set<std::string_view> seen;
  for (const auto& n : names) {
    if (!is_identifier(n) || kKeywords.contains(n)) {
      throw ParseError(fmt::format("'{}' cannot be used as a variable name", n));
    }
    if (!seen.insert(n).second) throw ParseError(fmt::format("duplicate variable name '{}'", n));
  }
}

}  // namespace

std::vector<std::string> default_names(std::size_t dim) {
  std::vector<std::string> names;
  for (std::size_t i = 1; i <= dim; ++i) names.push_back(fmt::format("x{}", i));
  return names;
}

std::string format_number(double value, int precision) {
  if (value == 0.0) return "0";
  precision = std::clamp(precision, 1, 17);
  const double mag = std::abs(value);
  if (mag >= 1e6) return fmt::format("{:.{}g}", value, precision);
  const int exponent = static_cast<int>(std::floor(std::log10(mag)));
  const int decimals = std::max(0, precision - 1 - exponent);
  std::string s = fmt::format("{:.{}f}", value, decimals);
  if (s.find('.') != std::string::npos) {
    s.erase(s.find_last_not_of('0') + 1);
    if (s.back() == '.') s.pop_back();
  }
  if (s == "-0") s = "0";
  return s;
}

// --- emission ---------------------------------------------------------------

namespace {

class Emitter {
 public:
  Emitter(const ObliqueTree& tree, const EmitOptions& opts)
      : tree_(tree), opts_(opts), names_(opts.names.empty() ? default_names(tree.input_dim) : opts.names) {
    check_names(names_, tree.input_dim);
    if (opts_.pid) {
      const auto& pid = *opts_.pid;
      const std::size_t full = 3 * pid.action_dim * pid.state_dim;
      const std::size_t scalar = 3 * pid.action_dim;
      if (tree.output_dim != full && tree.output_dim != scalar) {
        throw ThetaShapeError(fmt::format("tree outputs {} values; PID gains need {} or {}",
                                          tree.output_dim, full, scalar));
      }
    }
  }

  std::string run() {
    node(0, 0);
    return out_;
  }

 private:
  std::string linear(std::span<const double> coef, double bias) const {
    std::string s;
    bool first = true;
    auto append = [&](double c, const std::string* name) {
      const bool negative = c < 0.0;
      const double mag = std::abs(c);
      std::string body;
      if (name == nullptr) {
        body = format_number(mag, opts_.precision);
      } else if (mag == 1.0) {
        body = *name;
      } else {
        body = format_number(mag, opts_.precision) + " " + *name;
      }
      if (first) {
        s = (negative ? "-" : "") + body;
        first = false;
      } else {
        s += (negative ? " - " : " + ") + body;
      }
    };
    const bool any_term = std::any_of(coef.begin(), coef.end(), [&](double c) {
      return c != 0.0 && std::abs(c) > opts_.drop_threshold;
    });
    if (bias != 0.0 || !any_term) append(bias, nullptr);
    for (std::size_t i = 0; i < coef.size(); ++i) {
      if (coef[i] != 0.0 && std::abs(coef[i]) > opts_.drop_threshold) append(coef[i], &names_[i]);
    }
    return s;
  }

  std::string row(const RegressionLeaf& leaf, std::size_t r) const {
    return linear(leaf.p_out.row(r), leaf.v_out[r]);
  }

  std::string pid_leaf(const RegressionLeaf& leaf) const {
    const auto& pid = *opts_.pid;
    const bool scalar = leaf.v_out.size() == 3 * pid.action_dim;
    const std::size_t block = scalar ? 1 : pid.state_dim;
    static constexpr const char* kFeature[3] = {"P", "I", "D"};
    std::vector<std::string> actions;
    for (std::size_t a = 0; a < pid.action_dim; ++a) {
      std::string s;
      for (std::size_t f = 0; f < 3; ++f) {
        const std::size_t base = (a * 3 + f) * block;
        std::string theta;
        if (scalar) {
          theta = "(" + row(leaf, base) + ")";
        } else {
          theta = "[";
          for (std::size_t i = 0; i < block; ++i) theta += (i ? ", " : "") + row(leaf, base + i);
          theta += "]";
        }
        s += (f ? " + " : "") + theta + " * " + kFeature[f];
      }
      actions.push_back(std::move(s));
    }
    if (actions.size() == 1) return actions.front();
    std::string s = "{";
    for (std::size_t a = 0; a < actions.size(); ++a) s += (a ? ", " : "") + actions[a];
    return s + "}";
  }

  std::string leaf(const NodeBody& body) const {
    if (const auto* r = std::get_if<RegressionLeaf>(&body)) {
      if (opts_.pid) return pid_leaf(*r);
      std::string s;
      if (r->v_out.size() == 1) {
        s = row(*r, 0);
      } else {
        s = "[";
        for (std::size_t k = 0; k < r->v_out.size(); ++k) s += (k ? ", " : "") + row(*r, k);
        s += "]";
      }
      return r->activation == LeafActivation::tanh ? "tanh(" + s + ")" : s;
    }
    if (const auto* l = std::get_if<LabelLeaf>(&body)) return fmt::format("class {}", l->label);
    return "pruned";
  }

  void line(std::size_t depth, const std::string& text) {
    out_.append(depth * 2, ' ');
    out_ += text;
    out_ += '\n';
  }

  void node(NodeId id, std::size_t depth) {
    const NodeBody& body = tree_.nodes[id].body;
    if (const auto* d = std::get_if<DecisionNode>(&body)) {
      line(depth, "if " + linear(d->p, d->v) + " <= 0 then");
      node(d->left, depth + 1);
      line(depth, "else");
      node(d->right, depth + 1);
      return;
    }
    line(depth, leaf(body));
  }

  const ObliqueTree& tree_;
  const EmitOptions& opts_;
  std::vector<std::string> names_;
  std::string out_;
};

}  // namespace

std::string emit_program(const ObliqueTree& tree, const EmitOptions& opts) {
  return Emitter(tree, opts).run();
}

// --- parsing ----------------------------------------------------------------

namespace {

struct Token {
  enum class Kind { number, name, symbol, end };
  Kind kind = Kind::end;
  std::string text;
  double number = 0.0;
  std::size_t line = 1;
  std::size_t column = 1;
};

std::vector<Token> tokenize(std::string_view text) {
  std::vector<Token> tokens;
  std::size_t line = 1, column = 1, i = 0;
  auto advance = [&](std::size_t n) {
    for (std::size_t k = 0; k < n; ++k, ++i) {
      if (text[i] == '\n') {
        ++line;
        column = 1;
      } else {
        ++column;
      }
    }
  };
  auto error = [&](const std::string& msg) {
    return ParseError(fmt::format("line {}, column {}: {}", line, column, msg));
  };
  while (i < text.size()) {
    const char c = text[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      advance(1);
      continue;
    }
    Token t;
    t.line = line;
    t.column = column;
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      std::size_t j = i;
      while (j < text.size() && (std::isdigit(static_cast<unsigned char>(text[j])) || text[j] == '.')) ++j;
      // Exponent only when followed by a digit, so "2 e1" stays a product.
      if (j < text.size() && (text[j] == 'e' || text[j] == 'E')) {
        std::size_t k = j + 1;
        if (k < text.size() && (text[k] == '+' || text[k] == '-')) ++k;
        if (k < text.size() && std::isdigit(static_cast<unsigned char>(text[k]))) {
          j = k;
          while (j < text.size() && std::isdigit(static_cast<unsigned char>(text[j]))) ++j;
        }
      }
      t.kind = Token::Kind::number;
      t.text = std::string(text.substr(i, j - i));
      const auto [ptr, ec] = std::from_chars(t.text.data(), t.text.data() + t.text.size(), t.number);
      if (ec != std::errc() || ptr != t.text.data() + t.text.size()) {
        throw error(fmt::format("malformed number '{}'", t.text));
      }
      advance(j - i);
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < text.size() && (std::isalnum(static_cast<unsigned char>(text[j])) || text[j] == '_')) ++j;
      t.kind = Token::Kind::name;
      t.text = std::string(text.substr(i, j - i));
      advance(j - i);
    } else if (c == '<' && i + 1 < text.size() && text[i + 1] == '=') {
      t.kind = Token::Kind::symbol;
      t.text = "<=";
      advance(2);
    } else if (std::string_view("+-*[](){},").find(c) != std::string_view::npos) {
      t.kind = Token::Kind::symbol;
      t.text = std::string(1, c);
      advance(1);
    } else {
      throw error(fmt::format("unexpected character '{}'", c));
    }
    tokens.push_back(std::move(t));
  }
  Token end;
  end.line = line;
  end.column = column;
  tokens.push_back(end);
  return tokens;
}

}  // namespace

class ProgramParser {
 public:
  ProgramParser(std::string_view text, std::vector<std::string> names) : tokens_(tokenize(text)) {
    program_.names_ = std::move(names);
    for (std::size_t i = 0; i < program_.names_.size(); ++i) index_[program_.names_[i]] = i;
  }

  Program run() {
    expr();
    if (peek().kind != Token::Kind::end) throw error("trailing input after program");
    return std::move(program_);
  }

 private:
  const Token& peek() const { return tokens_[pos_]; }
  bool at(std::string_view sym) const {
    return peek().kind != Token::Kind::number && peek().text == sym;
  }
  Token take() { return tokens_[pos_++]; }

  ParseError error(const std::string& msg) const {
    const Token& t = peek();
    const std::string found = t.kind == Token::Kind::end ? "end of input" : "'" + t.text + "'";
    return ParseError(fmt::format("line {}, column {}: {} (found {})", t.line, t.column, msg, found));
  }

  void expect(std::string_view sym) {
    if (!at(sym)) throw error(fmt::format("expected '{}'", sym));
    ++pos_;
  }

  std::size_t add(Program::Node node) {
    program_.nodes_.push_back(std::move(node));
    return program_.nodes_.size() - 1;
  }

  std::size_t expr() {
    if (at("if")) {
      ++pos_;
      Program::If node;
      node.test = linear();
      expect("<=");
      if (peek().kind != Token::Kind::number || peek().number != 0.0) throw error("expected '0'");
      ++pos_;
      expect("then");
      const std::size_t id = add(node);
      const std::size_t then_branch = expr();
      expect("else");
      const std::size_t else_branch = expr();
      auto& n = std::get<Program::If>(program_.nodes_[id]);
      n.then_branch = then_branch;
      n.else_branch = else_branch;
      return id;
    }
    return leaf();
  }

  std::size_t leaf() {
    if (at("class")) {
      ++pos_;
      if (peek().kind != Token::Kind::number) throw error("expected class index");
      const double v = take().number;
      if (v < 0 || v != std::floor(v)) throw error("class index must be a non-negative integer");
      return add(Program::Label{static_cast<std::size_t>(v)});
    }
    if (at("pruned")) {
      ++pos_;
      return add(Program::Pruned{});
    }
    if (at("tanh")) {
      ++pos_;
      expect("(");
      Program::Value v;
      v.tanh = true;
      v.outputs = at("[") ? bracketed() : std::vector<Program::Linear>{linear()};
      expect(")");
      return add(std::move(v));
    }
    if (at("{")) {
      ++pos_;
      Program::Pid pid;
      pid.actions.push_back(pid_action(theta()));
      while (at(",")) {
        ++pos_;
        pid.actions.push_back(pid_action(theta()));
      }
      expect("}");
      return add(std::move(pid));
    }
    if (at("(")) {
      Program::Pid pid;
      pid.actions.push_back(pid_action(theta()));
      return add(std::move(pid));
    }
    if (at("[")) {
      auto outputs = bracketed();
      if (at("*")) {
        Program::Pid pid;
        pid.actions.push_back(pid_action(std::move(outputs)));
        return add(std::move(pid));
      }
      return add(Program::Value{std::move(outputs), false});
    }
    return add(Program::Value{{linear()}, false});
  }

  std::vector<Program::Linear> theta() {
    if (at("(")) {
      ++pos_;
      std::vector<Program::Linear> gain{linear()};
      expect(")");
      return gain;
    }
    if (!at("[")) throw error("expected PID gain '[...]' or '(...)'");
    return bracketed();
  }

  /// Parses "* P + T * I + T * D" after the first gain.
  std::array<std::vector<Program::Linear>, 3> pid_action(std::vector<Program::Linear> first) {
    std::array<std::vector<Program::Linear>, 3> gains;
    gains[0] = std::move(first);
    static constexpr std::string_view kFeature[3] = {"P", "I", "D"};
    for (std::size_t f = 0; f < 3; ++f) {
      if (f > 0) {
        expect("+");
        gains[f] = theta();
      }
      expect("*");
      expect(kFeature[f]);
      if (gains[f].size() != gains[0].size()) throw error("PID gains must have equal lengths");
    }
    return gains;
  }

  std::vector<Program::Linear> bracketed() {
    expect("[");
    std::vector<Program::Linear> out{linear()};
    while (at(",")) {
      ++pos_;
      out.push_back(linear());
    }
    expect("]");
    return out;
  }

  Program::Linear linear() {
    Program::Linear lin;
    lin.coef.assign(program_.names_.size(), 0.0);
    double sign = 1.0;
    if (at("-") || at("+")) sign = take().text == "-" ? -1.0 : 1.0;
    term(lin, sign);
    while (at("+") || at("-")) {
      sign = take().text == "-" ? -1.0 : 1.0;
      term(lin, sign);
    }
    return lin;
  }

  void term(Program::Linear& lin, double sign) {
    double coef = sign;
    bool have_number = false;
    if (peek().kind == Token::Kind::number) {
      coef *= take().number;
      have_number = true;
    }
    if (peek().kind == Token::Kind::name && !kKeywords.contains(peek().text)) {
      const auto it = index_.find(peek().text);
      if (it == index_.end()) throw error(fmt::format("unknown variable '{}'", peek().text));
      ++pos_;
      lin.coef[it->second] += coef;
      return;
    }
    if (!have_number) throw error("expected a number or variable");
    lin.bias += coef;
  }

  std::vector<Token> tokens_;
  std::size_t pos_ = 0;
  Program program_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

Program parse_program(std::string_view text, std::vector<std::string> names) {
  return ProgramParser(text, std::move(names)).run();
}

Program::Result Program::evaluate(std::span<const double> x) const {
  if (x.size() != names_.size()) {
    throw DimensionError(fmt::format("input has {} entries, program expects {}", x.size(),
                                     names_.size()));
  }
  auto eval = [&](const Linear& l) { return dot(l.coef, x) + l.bias; };
  Result result;
  std::size_t id = 0;
  while (true) {
    const Node& node = nodes_.at(id);
    if (const auto* n = std::get_if<If>(&node)) {
      id = eval(n->test) <= 0.0 ? n->then_branch : n->else_branch;
      continue;
    }
    if (const auto* v = std::get_if<Value>(&node)) {
      for (const auto& l : v->outputs) {
        const double y = eval(l);
        result.value.push_back(v->tanh ? std::tanh(y) : y);
      }
    } else if (const auto* p = std::get_if<Pid>(&node)) {
      for (const auto& action : p->actions) {
        for (const auto& gain : action) {
          for (const auto& l : gain) result.value.push_back(eval(l));
        }
      }
    } else if (const auto* l = std::get_if<Label>(&node)) {
      result.label = l->label;
    } else {
      result.pruned = true;
    }
    return result;
  }
}

// --- round trip -------------------------------------------------------------

namespace {

double rounding_scale(std::span<const double> p, double v, std::span<const double> x) {
  double s = std::abs(v);
  for (std::size_t j = 0; j < p.size(); ++j) s += std::abs(p[j] * x[j]);
  return std::max(1.0, s);
}

}  // namespace

RoundTripReport round_trip_check(const ObliqueTree& tree, const EmitOptions& opts,
                                 const BoxSampler& sampler, std::size_t n_samples,
                                 std::uint64_t seed) {
  if (sampler.dim() != tree.input_dim) throw DimensionError("sampler width differs from tree input");
  const ObliqueTree reference =
      opts.drop_threshold > 0.0 ? zero_out(tree, opts.drop_threshold).tree : tree;
  const std::string text = emit_program(tree, opts);
  const Program program =
      parse_program(text, opts.names.empty() ? default_names(tree.input_dim) : opts.names);
  const double unit = std::pow(10.0, 1 - std::clamp(opts.precision, 1, 17));

  RoundTripReport report;
  for (std::size_t i = 0; i < n_samples; ++i) {
    SplitMix64 rng(derive_seed(seed, i));
    const std::vector<double> x = sampler.sample(rng);
    ++report.samples;
    const std::vector<NodeId> path = inference_path(reference, x);
    bool close_call = false;
    for (NodeId id : path) {
      if (const auto* d = std::get_if<DecisionNode>(&reference.nodes[id].body)) {
        const double z = dot(d->p, x) + d->v;
        if (std::abs(z) <= unit * rounding_scale(d->p, d->v, x)) close_call = true;
      }
    }
    if (close_call) {
      ++report.near_boundary;
      continue;
    }
    const NodeBody& leaf = reference.nodes[path.back()].body;
    if (std::holds_alternative<PrunedLeaf>(leaf)) {
      ++report.pruned;
      continue;
    }
    const Program::Result got = program.evaluate(x);
    ++report.compared;
    bool ok = !got.pruned;
    if (const auto* l = std::get_if<LabelLeaf>(&leaf)) {
      ok = ok && got.label == l->label;
    } else if (const auto* r = std::get_if<RegressionLeaf>(&leaf)) {
      const Prediction want = infer(reference, x);
      ok = ok && got.value.size() == want.value.size();
      for (std::size_t k = 0; ok && k < want.value.size(); ++k) {
        const double scaled = std::abs(got.value[k] - want.value[k]) /
                              (unit * rounding_scale(r->p_out.row(k), r->v_out[k], x));
        report.max_scaled_error = std::max(report.max_scaled_error, scaled);
        ok = scaled <= 1.0;
      }
    }
    if (!ok) ++report.mismatches;
  }
  report.pass = report.mismatches == 0;
  return report;
}

nlohmann::ordered_json round_trip_to_json(const RoundTripReport& r) {
  nlohmann::ordered_json j;
  j["samples"] = r.samples;
  j["compared"] = r.compared;
  j["near_boundary"] = r.near_boundary;
  j["pruned"] = r.pruned;
  j["mismatches"] = r.mismatches;
  j["max_scaled_error"] = r.max_scaled_error;
  j["pass"] = r.pass;
  return j;
}

// --- simplification aids ----------------------------------------------------

ZeroOutResult zero_out(const ObliqueTree& tree, double epsilon,
                       const std::optional<BoxSampler>& sampler, std::size_t n_samples,
                       std::uint64_t seed) {
  if (!(epsilon >= 0.0)) throw Error("zero_out threshold must be non-negative");
  ZeroOutResult result{tree};
  auto kill = [&](double& c) {
    if (c != 0.0 && std::abs(c) <= epsilon) {
      c = 0.0;
      ++result.zeroed;
    }
  };
  for (auto& node : result.tree.nodes) {
    if (auto* d = std::get_if<DecisionNode>(&node.body)) {
      for (double& c : d->p) kill(c);
    } else if (auto* r = std::get_if<RegressionLeaf>(&node.body)) {
      for (double& c : r->p_out.data()) kill(c);
    }
  }
  if (!sampler) return result;
  if (sampler->dim() != tree.input_dim) throw DimensionError("sampler width differs from tree input");
  for (std::size_t i = 0; i < n_samples; ++i) {
    SplitMix64 rng(derive_seed(seed, i));
    const auto x = sampler->sample(rng);
    const Prediction before = infer(tree, x);
    const Prediction after = infer(result.tree, x);
    double change = before.label != after.label ? 1.0 : 0.0;
    for (std::size_t k = 0; k < std::min(before.value.size(), after.value.size()); ++k) {
      change = std::max(change, std::abs(before.value[k] - after.value[k]));
    }
    result.max_output_change = std::max(result.max_output_change, change);
    ++result.samples;
  }
  return result;
}

DominanceReport dominance_report(const ObliqueTree& tree, const InputBox& box, double tau) {
  if (box.size() != tree.input_dim) {
    throw DimensionError(fmt::format("box has {} intervals, tree has {} inputs", box.size(),
                                     tree.input_dim));
  }
  std::vector<double> reach;
  for (const auto& [lo, hi] : box) {
    if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) {
      throw DimensionError(fmt::format("invalid box interval [{}, {}]", lo, hi));
    }
    reach.push_back(std::max(std::abs(lo), std::abs(hi)));
  }
  DominanceReport report;
  report.tau = tau;
  for (NodeId id = 0; id < tree.nodes.size(); ++id) {
    const auto* d = std::get_if<DecisionNode>(&tree.nodes[id].body);
    if (d == nullptr) continue;
    NodeDominance nd;
    nd.node = id;
    for (std::size_t i = 0; i < d->p.size(); ++i) nd.contributions.push_back(std::abs(d->p[i]) * reach[i]);
    nd.bias_contribution = std::abs(d->v);
    nd.ranking.resize(nd.contributions.size());
    std::iota(nd.ranking.begin(), nd.ranking.end(), std::size_t{0});
    std::stable_sort(nd.ranking.begin(), nd.ranking.end(), [&](std::size_t a, std::size_t b) {
      return nd.contributions[a] > nd.contributions[b];
    });
    if (!nd.ranking.empty() && nd.contributions[nd.ranking.front()] > 0.0) {
      nd.dominant = nd.ranking.front();
    }
    double top = nd.bias_contribution;
    for (double c : nd.contributions) top = std::max(top, c);
    for (double c : nd.contributions) nd.droppable.push_back(c < tau * top);
    nd.bias_droppable = nd.bias_contribution < tau * top;
    report.nodes.push_back(std::move(nd));
  }
  return report;
}

nlohmann::ordered_json dominance_to_json(const DominanceReport& report,
                                         const std::vector<std::string>& names) {
  nlohmann::ordered_json j;
  j["tau"] = report.tau;
  j["nodes"] = nlohmann::ordered_json::array();
  for (const auto& nd : report.nodes) {
    nlohmann::ordered_json n;
    n["node"] = nd.node;
    nlohmann::ordered_json contrib;
    for (std::size_t i = 0; i < nd.contributions.size(); ++i) contrib[names.at(i)] = nd.contributions[i];
    n["contributions"] = std::move(contrib);
    n["bias"] = nd.bias_contribution;
    n["dominant"] = nd.dominant ? nlohmann::ordered_json(names.at(*nd.dominant)) : nlohmann::ordered_json(nullptr);
    n["ranking"] = nlohmann::ordered_json::array();
    for (std::size_t i : nd.ranking) n["ranking"].push_back(names.at(i));
    n["droppable"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < nd.droppable.size(); ++i) {
      if (nd.droppable[i]) n["droppable"].push_back(names.at(i));
    }
    n["bias_droppable"] = nd.bias_droppable;
    j["nodes"].push_back(std::move(n));
  }
  return j;
}

}  // namespace otr
