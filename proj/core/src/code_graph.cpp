#include "cgfuse/code_graph.hpp"

#include <algorithm>
#include <map>
#include <nlohmann/json.hpp>
#include <set>

#include "cgfuse/errors.hpp"

namespace cgfuse::graph {

using frontend::Ast;
using frontend::AstNode;
using frontend::SyntaxKind;

namespace {

using DefState = std::map<std::string, std::set<std::size_t>>;

DefState join(const DefState& a, const DefState& b) {
  DefState r = a;
  for (const auto& [k, v] : b) r[k].insert(v.begin(), v.end());
  return r;
}

// Reaching-definitions walk over the statement structure of the AST.
class DataflowWalker {
 public:
  DataflowWalker(const Ast& ast, std::span<const frontend::CodeToken> tokens)
      : ast_(ast), tokens_(tokens) {}

  DataflowResult run() {
    if (ast_.empty()) return {};
    DefState st;
    scopes_.push_back({});
    const auto& root = node(ast_.root);
    if (root.kind == SyntaxKind::MethodDecl) {
      for (auto c : root.children)
        if (node(c).kind == SyntaxKind::Block) block(c, st);
    } else {
      statements(root.children, st);
    }
    DataflowResult out;
    out.edges.assign(edges_.begin(), edges_.end());
    out.unresolved = unresolved_.size();
    return out;
  }

 private:
  struct ExprInfo {
    std::vector<std::size_t> identifiers;  // every identifier leaf
    std::vector<std::size_t> uses;         // leaves of operand-head names
  };

  const AstNode& node(std::size_t id) const { return ast_.nodes[id]; }
  SyntaxKind kind(std::size_t id) const { return node(id).kind; }
  const std::string& text(std::size_t leaf) const { return tokens_[*node(leaf).token].text; }

  std::optional<std::size_t> child_of_kind(std::size_t id, SyntaxKind k) const {
    for (auto c : node(id).children)
      if (kind(c) == k) return c;
    return std::nullopt;
  }

  // Identifier leaf inside a Name node.
  std::size_t name_leaf(std::size_t name_node) const { return node(name_node).children.front(); }

  void collect(std::size_t expr, ExprInfo& info) const {
    for (auto c : node(expr).children) {
      if (kind(c) == SyntaxKind::Name) info.uses.push_back(name_leaf(c));
      collect_identifiers_and_nested(c, info);
    }
  }

  void collect_identifiers_and_nested(std::size_t id, ExprInfo& info) const {
    if (kind(id) == SyntaxKind::IdentifierLeaf) {
      info.identifiers.push_back(id);
      return;
    }
    for (auto c : node(id).children) {
      if (kind(c) == SyntaxKind::Expression) {
        collect(c, info);
      } else {
        collect_identifiers_and_nested(c, info);
      }
    }
  }

  ExprInfo info_of(std::optional<std::size_t> expr) const {
    ExprInfo info;
    if (expr) collect(*expr, info);
    return info;
  }

  void resolve(const ExprInfo& info, const DefState& st) {
    for (auto use : info.uses) {
      auto it = st.find(text(use));
      if (it == st.end() || it->second.empty()) {
        unresolved_.insert(use);
        continue;
      }
      for (auto d : it->second) edges_.insert({use, d, Relation::CO});
    }
  }

  void define(DefState& st, std::size_t leaf, const ExprInfo& info) {
    for (auto id : info.identifiers)
      if (id != leaf) edges_.insert({leaf, id, Relation::CA});
    st[text(leaf)] = {leaf};
  }

  void statements(const std::vector<std::size_t>& items, DefState& st) {
    for (auto c : items) statement(c, st);
  }

  void block(std::size_t id, DefState& st) {
    scopes_.push_back({});
    statements(node(id).children, st);
    for (const auto& name : scopes_.back()) st.erase(name);
    scopes_.pop_back();
  }

  void statement(std::size_t id, DefState& st) {
    switch (kind(id)) {
      case SyntaxKind::LocalVarDecl: {
        auto name = child_of_kind(id, SyntaxKind::Name);
        if (!name) return;
        const auto leaf = name_leaf(*name);
        scopes_.back().insert(text(leaf));
        bool has_assign = false;
        for (auto c : node(id).children) has_assign |= kind(c) == SyntaxKind::OperatorLeaf;
        if (has_assign) {
          auto info = info_of(child_of_kind(id, SyntaxKind::Expression));
          resolve(info, st);
          define(st, leaf, info);
        } else {
          st.erase(text(leaf));
        }
        break;
      }
      case SyntaxKind::AssignStmt: {
        const auto& kids = node(id).children;
        const std::size_t target = kids.front();
        std::optional<std::size_t> value;
        if (kids.size() >= 3) value = kids[2];
        auto info = info_of(value);
        const auto& tkids = node(target).children;
        std::optional<std::size_t> def;
        if (tkids.size() == 1 && kind(tkids[0]) == SyntaxKind::Name) {
          def = name_leaf(tkids[0]);
        } else if (tkids.size() == 2 && kind(tkids[0]) == SyntaxKind::ThisExpr &&
                   kind(tkids[1]) == SyntaxKind::FieldAccess) {
          if (auto n = child_of_kind(tkids[1], SyntaxKind::Name)) def = name_leaf(*n);
        } else {
          resolve(info_of(target), st);
        }
        resolve(info, st);
        if (def) define(st, *def, info);
        break;
      }
      case SyntaxKind::ReturnStmt:
      case SyntaxKind::ExprStmt:
        resolve(info_of(child_of_kind(id, SyntaxKind::Expression)), st);
        break;
      case SyntaxKind::Block:
        block(id, st);
        break;
      case SyntaxKind::IfStmt:
        if_stmt(id, st);
        break;
      case SyntaxKind::WhileStmt: {
        const auto cond = condition_info(id);
        resolve(cond, st);
        auto body = child_of_kind(id, SyntaxKind::Block);
        if (!body) return;
        DefState pass1 = st;
        block(*body, pass1);
        DefState mid = join(st, pass1);
        resolve(cond, mid);
        DefState pass2 = mid;
        block(*body, pass2);
        st = join(st, pass2);
        break;
      }
      default:
        break;  // punctuation, Incomplete
    }
  }

  ExprInfo condition_info(std::size_t stmt) const {
    auto cond = child_of_kind(stmt, SyntaxKind::Condition);
    if (!cond) return {};
    return info_of(child_of_kind(*cond, SyntaxKind::Expression));
  }

  void if_stmt(std::size_t id, DefState& st) {
    resolve(condition_info(id), st);
    std::vector<std::size_t> branches;
    for (auto c : node(id).children)
      if (kind(c) == SyntaxKind::Block || kind(c) == SyntaxKind::IfStmt) branches.push_back(c);
    if (branches.empty()) return;
    DefState then_st = st;
    block(branches[0], then_st);
    DefState else_st = st;
    if (branches.size() > 1) {
      if (kind(branches[1]) == SyntaxKind::IfStmt) {
        if_stmt(branches[1], else_st);
      } else {
        block(branches[1], else_st);
      }
    }
    st = join(then_st, else_st);
  }

  const Ast& ast_;
  std::span<const frontend::CodeToken> tokens_;
  std::set<GraphEdge> edges_;
  std::set<std::size_t> unresolved_;
  std::vector<std::set<std::string>> scopes_;
};

std::vector<std::size_t> parents_of(const CodeGraph& g) {
  std::vector<std::size_t> parent(g.size(), static_cast<std::size_t>(-1));
  for (const auto& e : g.edges)
    if (e.rel == Relation::P) parent[e.dst] = e.src;
  return parent;
}

CodeGraph induced(const CodeGraph& g, const std::vector<bool>& keep) {
  CodeGraph out;
  std::vector<std::size_t> remap(g.size(), static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!keep[i]) continue;
    remap[i] = out.nodes.size();
    out.nodes.push_back(g.nodes[i]);
  }
  for (const auto& e : g.edges)
    if (keep[e.src] && keep[e.dst]) out.edges.push_back({remap[e.src], remap[e.dst], e.rel});
  std::sort(out.edges.begin(), out.edges.end());
  return out;
}

std::vector<bool> keep_with_ancestors(const CodeGraph& g, const std::vector<bool>& keep_terminal) {
  const auto parent = parents_of(g);
  std::vector<bool> keep(g.size(), false);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!keep_terminal[i]) continue;
    for (std::size_t v = i; v != static_cast<std::size_t>(-1) && !keep[v]; v = parent[v]) keep[v] = true;
  }
  return keep;
}

}  // namespace

std::string_view to_string(Relation r) {
  switch (r) {
    case Relation::P: return "p";
    case Relation::CO: return "co";
    case Relation::CA: return "ca";
  }
  return "?";
}

std::vector<std::size_t> CodeGraph::syntax_nodes() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (!nodes[i].is_terminal()) out.push_back(i);
  return out;
}

std::vector<std::size_t> CodeGraph::terminal_nodes() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes.size(); ++i)
    if (nodes[i].is_terminal()) out.push_back(i);
  return out;
}

std::size_t CodeGraph::count(Relation r) const {
  return static_cast<std::size_t>(
      std::count_if(edges.begin(), edges.end(), [r](const GraphEdge& e) { return e.rel == r; }));
}

DataflowResult dataflow_edges(const Ast& ast, std::span<const frontend::CodeToken> tokens) {
  return DataflowWalker(ast, tokens).run();
}

CodeGraph build_code_graph(const Ast& ast, std::span<const frontend::CodeToken> tokens) {
  CodeGraph g;
  g.nodes.reserve(ast.nodes.size());
  for (const auto& n : ast.nodes) {
    GraphNode gn{n.kind, std::nullopt};
    if (n.token) gn.token = tokens[*n.token];
    g.nodes.push_back(std::move(gn));
  }
  for (std::size_t i = 0; i < ast.nodes.size(); ++i)
    for (auto c : ast.nodes[i].children) g.edges.push_back({i, c, Relation::P});
  auto df = dataflow_edges(ast, tokens);
  g.edges.insert(g.edges.end(), df.edges.begin(), df.edges.end());
  std::sort(g.edges.begin(), g.edges.end());
  return g;
}

CodeGraph build_from_source(std::string_view source, bool tolerant) {
  auto tokens = tolerant ? frontend::tokenize_lenient(source) : frontend::tokenize(source);
  auto ast = frontend::parse(tokens, tolerant);
  return build_code_graph(ast, tokens);
}

CodeGraph context_subgraph(const CodeGraph& g, std::size_t visible_terminals) {
  std::vector<bool> keep_terminal(g.size(), false);
  std::size_t seen = 0;
  for (std::size_t i = 0; i < g.size() && seen < visible_terminals; ++i) {
    if (!g.nodes[i].is_terminal()) continue;
    keep_terminal[i] = true;
    ++seen;
  }
  return induced(g, keep_with_ancestors(g, keep_terminal));
}

CodeGraph remove_terminals(const CodeGraph& g, std::span<const std::size_t> terminal_ordinals) {
  std::vector<bool> keep_terminal(g.size(), false);
  std::set<std::size_t> drop(terminal_ordinals.begin(), terminal_ordinals.end());
  std::size_t ordinal = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!g.nodes[i].is_terminal()) continue;
    keep_terminal[i] = !drop.count(ordinal);
    ++ordinal;
  }
  return induced(g, keep_with_ancestors(g, keep_terminal));
}

std::vector<std::size_t> incomplete_terminals(const CodeGraph& g) {
  const auto parent = parents_of(g);
  std::vector<std::size_t> out;
  std::size_t ordinal = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!g.nodes[i].is_terminal()) continue;
    const auto p = parent[i];
    if (p != static_cast<std::size_t>(-1) && g.nodes[p].kind == SyntaxKind::Incomplete)
      out.push_back(ordinal);
    ++ordinal;
  }
  return out;
}

void validate(const CodeGraph& g) {
  const std::size_t n = g.size();
  std::vector<int> indegree(n, 0);
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto& e = g.edges[i];
    if (e.src >= n || e.dst >= n) throw InvariantViolation("edge endpoint out of range");
    if (e.src == e.dst) throw InvariantViolation("self loop");
    if (i > 0 && !(g.edges[i - 1] < e)) throw InvariantViolation("edges not sorted/unique");
    if (e.rel == Relation::P) {
      if (e.dst <= e.src) throw InvariantViolation("P edge not in pre-order");
      if (g.nodes[e.src].is_terminal()) throw InvariantViolation("terminal with children");
      ++indegree[e.dst];
    } else if (!g.nodes[e.src].is_terminal() || !g.nodes[e.dst].is_terminal()) {
      throw InvariantViolation("dataflow edge touching a syntax node");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (indegree[i] != (i == 0 ? 0 : 1)) throw InvariantViolation("P edges do not form a tree");
    if (g.nodes[i].is_terminal() != frontend::is_leaf_kind(g.nodes[i].kind))
      throw InvariantViolation("terminal/leaf-kind mismatch");
  }
  if (n > 0 && g.count(Relation::P) != n - 1) throw InvariantViolation("P edge count");
}

std::string serialize(const CodeGraph& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nlohmann::json j = nlohmann::json::array({std::string(frontend::to_string(n.kind))});
    if (n.token) {
      j.push_back(n.token->text);
      j.push_back(std::string(frontend::to_string(n.token->kind)));
      j.push_back(n.token->begin);
      j.push_back(n.token->end);
    }
    nodes.push_back(std::move(j));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges)
    edges.push_back(nlohmann::json::array({e.src, e.dst, std::string(to_string(e.rel))}));
  nlohmann::json doc;
  doc["nodes"] = std::move(nodes);
  doc["edges"] = std::move(edges);
  return doc.dump();
}

CodeGraph deserialize(std::string_view text) {
  CodeGraph g;
  try {
    const auto doc = nlohmann::json::parse(text);
    for (const auto& j : doc.at("nodes")) {
      if (!j.is_array() || j.empty()) throw FormatError("node entry must be a nonempty array");
      auto kind = frontend::syntax_kind_from_string(j.at(0).get<std::string>());
      if (!kind) throw FormatError("unknown syntax kind " + j.at(0).dump());
      GraphNode n{*kind, std::nullopt};
      if (j.size() == 5) {
        frontend::CodeToken t;
        t.text = j.at(1).get<std::string>();
        const auto k = j.at(2).get<std::string>();
        bool found = false;
        for (auto tk : {frontend::TokenKind::Identifier, frontend::TokenKind::Keyword,
                        frontend::TokenKind::Literal, frontend::TokenKind::Operator,
                        frontend::TokenKind::Punct}) {
          if (frontend::to_string(tk) == k) {
            t.kind = tk;
            found = true;
          }
        }
        if (!found) throw FormatError("unknown token kind " + k);
        t.begin = j.at(3).get<std::size_t>();
        t.end = j.at(4).get<std::size_t>();
        n.token = std::move(t);
      } else if (j.size() != 1) {
        throw FormatError("node entry must have 1 or 5 fields");
      }
      g.nodes.push_back(std::move(n));
    }
    for (const auto& j : doc.at("edges")) {
      if (!j.is_array() || j.size() != 3) throw FormatError("edge entry must have 3 fields");
      const auto rel = j.at(2).get<std::string>();
      Relation r;
      if (rel == "p") r = Relation::P;
      else if (rel == "co") r = Relation::CO;
      else if (rel == "ca") r = Relation::CA;
      else throw FormatError("unknown relation " + rel);
      g.edges.push_back({j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>(), r});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed graph: ") + e.what());
  }
  try {
    validate(g);
  } catch (const InvariantViolation& e) {
    throw FormatError(std::string("invalid graph: ") + e.what());
  }
  return g;
}

TerminalAlignment align_terminals(const CodeGraph& g,
                                  std::span<const std::optional<std::size_t>> provenance) {
  const auto terminals = g.terminal_nodes();
  TerminalAlignment out;
  out.spans.reserve(terminals.size());
  constexpr auto kNone = static_cast<std::size_t>(-1);
  std::vector<std::size_t> first(terminals.size(), kNone), last(terminals.size(), kNone);
  std::vector<std::size_t> count(terminals.size(), 0);
  for (std::size_t pos = 0; pos < provenance.size(); ++pos) {
    if (!provenance[pos]) continue;
    const auto t = *provenance[pos];
    if (t >= terminals.size()) continue;
    if (first[t] == kNone) first[t] = pos;
    last[t] = pos;
    ++count[t];
  }
  for (std::size_t t = 0; t < terminals.size(); ++t) {
    if (count[t] == 0)
      throw AlignmentError("terminal " + std::to_string(t) + " ('" +
                           g.nodes[terminals[t]].token->text + "') has no subtokens");
    if (last[t] - first[t] + 1 != count[t])
      throw AlignmentError("terminal " + std::to_string(t) + " maps to non-contiguous subtokens");
    out.spans.push_back({terminals[t], first[t], last[t] + 1});
  }
  return out;
}

}  // namespace cgfuse::graph
