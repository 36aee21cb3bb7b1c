#pragma once

// Code graphs: AST hierarchy edges plus comingFrom / calculatedBy dataflow
// edges between terminal (token) nodes.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cgfuse/frontend.hpp"

namespace cgfuse::graph {

enum class Relation : std::uint8_t { P, CO, CA };
inline constexpr std::size_t kRelationCount = 3;

std::string_view to_string(Relation r);

struct GraphEdge {
  std::size_t src;
  std::size_t dst;
  Relation rel;

  auto operator<=>(const GraphEdge&) const = default;
};

struct GraphNode {
  frontend::SyntaxKind kind;
  std::optional<frontend::CodeToken> token;  // set exactly for terminal nodes

  bool is_terminal() const noexcept { return token.has_value(); }
  bool operator==(const GraphNode&) const = default;
};

/// Node ids are positions in `nodes`, which is the AST pre-order; terminals
/// therefore appear in source order. `edges` is sorted and duplicate-free.
struct CodeGraph {
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;

  std::size_t size() const noexcept { return nodes.size(); }
  bool empty() const noexcept { return nodes.empty(); }

  std::vector<std::size_t> syntax_nodes() const;
  std::vector<std::size_t> terminal_nodes() const;
  std::size_t count(Relation r) const;

  bool operator==(const CodeGraph&) const = default;
};

struct DataflowResult {
  std::vector<GraphEdge> edges;
  /// Identifier uses with no visible definition (parameters, fields, callees).
  std::size_t unresolved = 0;
};

/// CO/CA edges over AST node ids (= graph node ids). The AST's leaves index
/// into `tokens`, which supply variable names.
DataflowResult dataflow_edges(const frontend::Ast& ast, std::span<const frontend::CodeToken> tokens);

CodeGraph build_code_graph(const frontend::Ast& ast, std::span<const frontend::CodeToken> tokens);

/// Tokenize + tolerant parse + build; never throws on bad source (lexes up to
/// the first invalid byte).
CodeGraph build_from_source(std::string_view source, bool tolerant);

/// Keeps the first `visible_terminals` terminals, every syntax node with at
/// least one kept terminal descendant, and edges between kept nodes.
CodeGraph context_subgraph(const CodeGraph& g, std::size_t visible_terminals);

/// Drops the given terminal ordinals (and syntax nodes left without terminal
/// descendants), renumbering in order.
CodeGraph remove_terminals(const CodeGraph& g, std::span<const std::size_t> terminal_ordinals);

/// Terminal ordinals that sit under an Incomplete node.
std::vector<std::size_t> incomplete_terminals(const CodeGraph& g);

std::string serialize(const CodeGraph& g);
/// Throws FormatError on malformed input or violated graph invariants.
CodeGraph deserialize(std::string_view text);

/// Throws InvariantViolation when a structural invariant does not hold.
void validate(const CodeGraph& g);

struct TerminalSpan {
  std::size_t node;   // graph node id
  std::size_t begin;  // subtoken positions, half-open
  std::size_t end;

  bool operator==(const TerminalSpan&) const = default;
};

/// One span per terminal, in terminal order.
struct TerminalAlignment {
  std::vector<TerminalSpan> spans;
};

/// `provenance[i]` is the code-token index subtoken i came from (nullopt for
/// non-code subtokens). Terminal ordinal t corresponds to code token t.
TerminalAlignment align_terminals(const CodeGraph& g,
                                  std::span<const std::optional<std::size_t>> provenance);

}  // namespace cgfuse::graph
