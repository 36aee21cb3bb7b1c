#pragma once

// Lexer and recursive-descent parser for the Java-like mini-language.
//
// The AST is a concrete-ish syntax tree: every token is a leaf, and every
// leaf hangs under a syntax node whose terminal children all share one
// lexical class (identifiers under Name, literals under Literal, operators
// under Expression/AssignStmt/LocalVarDecl, ...). Expressions are flat
// operand/operator sequences so that the tree of a source prefix is the
// tree of the full source restricted to that prefix.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cgfuse::frontend {

enum class TokenKind : std::uint8_t { Identifier, Keyword, Literal, Operator, Punct };

struct CodeToken {
  std::string text;
  TokenKind kind;
  std::size_t begin;  // byte offsets, half-open
  std::size_t end;

  bool operator==(const CodeToken&) const = default;
};

std::string_view to_string(TokenKind kind);

/// Throws InvalidCharacter on bytes outside the lexical alphabet.
std::vector<CodeToken> tokenize(std::string_view source);

/// Lexes up to the first invalid character instead of throwing.
std::vector<CodeToken> tokenize_lenient(std::string_view source);

bool is_keyword(std::string_view word);

enum class SyntaxKind : std::uint8_t {
  Program,
  MethodDecl,
  Modifiers,
  PrimitiveType,
  ClassType,
  ParamList,
  Param,
  Block,
  LocalVarDecl,
  AssignStmt,
  ReturnStmt,
  IfStmt,
  WhileStmt,
  ExprStmt,
  Condition,
  Expression,
  FieldAccess,
  CallExpr,
  ParenExpr,
  Name,
  Literal,
  ThisExpr,
  Incomplete,
  // leaves
  IdentifierLeaf,
  KeywordLeaf,
  LiteralLeaf,
  OperatorLeaf,
  PunctLeaf,
};

inline constexpr std::size_t kSyntaxKindCount = static_cast<std::size_t>(SyntaxKind::PunctLeaf) + 1;

std::string_view to_string(SyntaxKind kind);
std::optional<SyntaxKind> syntax_kind_from_string(std::string_view name);
bool is_leaf_kind(SyntaxKind kind);
SyntaxKind leaf_kind_for(TokenKind kind);

struct AstNode {
  SyntaxKind kind;
  std::vector<std::size_t> children;
  std::optional<std::size_t> token;  // index into the token list, leaves only

  bool operator==(const AstNode&) const = default;
};

struct Ast {
  std::vector<AstNode> nodes;
  std::size_t root = 0;
  /// Tolerant parses that hit end of input mid-construct.
  bool truncated = false;

  bool empty() const noexcept { return nodes.empty(); }
  bool operator==(const Ast&) const = default;
};

/// Strict mode throws SyntaxError; tolerant mode always returns a tree.
Ast parse(std::span<const CodeToken> tokens, bool tolerant);

/// Leaf token indices in pre-order (equals 0..n-1 for any parse).
std::vector<std::size_t> leaf_tokens(const Ast& ast);

/// Pre-order node sequence starting at the root.
std::vector<std::size_t> preorder(const Ast& ast);

/// S-expression rendering, handy in tests and debugging.
std::string dump(const Ast& ast, std::span<const CodeToken> tokens);

}  // namespace cgfuse::frontend
