#include "cgfuse/frontend.hpp"

#include <algorithm>
#include <array>
#include <sstream>

#include "cgfuse/errors.hpp"

namespace cgfuse::frontend {

namespace {

constexpr std::array<std::string_view, 20> kKeywords = {
    "int",    "long",    "double", "float",     "boolean", "char",   "byte",
    "short",  "void",    "return", "if",        "else",    "while",  "this",
    "public", "private", "static", "protected", "final",   "new"};

constexpr std::array<std::string_view, 9> kPrimitiveTypes = {
    "int", "long", "double", "float", "boolean", "char", "byte", "short", "void"};

constexpr std::array<std::string_view, 5> kModifiers = {"public", "private", "static",
                                                        "protected", "final"};

constexpr std::array<std::string_view, kSyntaxKindCount> kKindNames = {
    "Program",      "MethodDecl",   "Modifiers",   "PrimitiveType", "ClassType",  "ParamList",
    "Param",        "Block",        "LocalVarDecl", "AssignStmt",   "ReturnStmt", "IfStmt",
    "WhileStmt",    "ExprStmt",     "Condition",   "Expression",    "FieldAccess", "CallExpr",
    "ParenExpr",    "Name",         "Literal",     "ThisExpr",      "Incomplete", "IdentifierLeaf",
    "KeywordLeaf",  "LiteralLeaf",  "OperatorLeaf", "PunctLeaf"};

bool contains(std::span<const std::string_view> set, std::string_view word) {
  return std::find(set.begin(), set.end(), word) != set.end();
}

bool ident_start(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c == '$';
}
bool ident_char(unsigned char c) { return ident_start(c) || (c >= '0' && c <= '9'); }
bool digit(unsigned char c) { return c >= '0' && c <= '9'; }

// Returns the length of the token at `i`, or 0 if the byte is not lexable.
std::size_t lex_one(std::string_view s, std::size_t i, TokenKind& kind) {
  const auto c = static_cast<unsigned char>(s[i]);
  const std::size_t n = s.size();
  if (ident_start(c)) {
    std::size_t j = i + 1;
    while (j < n && ident_char(static_cast<unsigned char>(s[j]))) ++j;
    const auto word = s.substr(i, j - i);
    if (word == "true" || word == "false" || word == "null") {
      kind = TokenKind::Literal;
    } else {
      kind = is_keyword(word) ? TokenKind::Keyword : TokenKind::Identifier;
    }
    return j - i;
  }
  if (digit(c)) {
    std::size_t j = i + 1;
    while (j < n && digit(static_cast<unsigned char>(s[j]))) ++j;
    if (j + 1 < n && s[j] == '.' && digit(static_cast<unsigned char>(s[j + 1]))) {
      j += 1;
      while (j < n && digit(static_cast<unsigned char>(s[j]))) ++j;
    }
    if (j < n && (s[j] == 'L' || s[j] == 'f')) ++j;
    kind = TokenKind::Literal;
    return j - i;
  }
  if (c == '"' || c == '\'') {
    std::size_t j = i + 1;
    while (j < n && s[j] != static_cast<char>(c) && s[j] != '\n') {
      if (s[j] == '\\' && j + 1 < n) ++j;
      ++j;
    }
    if (j >= n || s[j] != static_cast<char>(c)) return 0;
    kind = TokenKind::Literal;
    return j + 1 - i;
  }
  if (i + 1 < n && s[i + 1] == '=' && (c == '=' || c == '!' || c == '<' || c == '>')) {
    kind = TokenKind::Operator;
    return 2;
  }
  switch (c) {
    case '+': case '-': case '*': case '/': case '<': case '>': case '=':
      kind = TokenKind::Operator;
      return 1;
    case '(': case ')': case '{': case '}': case ';': case ',': case '.':
      kind = TokenKind::Punct;
      return 1;
    default:
      return 0;
  }
}

std::vector<CodeToken> lex(std::string_view source, bool lenient) {
  std::vector<CodeToken> out;
  std::size_t i = 0;
  while (i < source.size()) {
    const char c = source[i];
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      ++i;
      continue;
    }
    TokenKind kind{};
    const std::size_t len = lex_one(source, i, kind);
    if (len == 0) {
      if (lenient) break;
      throw InvalidCharacter(i);
    }
    out.push_back(CodeToken{std::string(source.substr(i, len)), kind, i, i + len});
    i += len;
  }
  return out;
}

// Temporary tree; flattened to pre-order once parsing finishes.
struct Tmp {
  SyntaxKind kind;
  std::vector<Tmp> kids;
  std::optional<std::size_t> token;

  bool has_tokens() const { return token.has_value() || !kids.empty(); }
};

class Parser {
 public:
  Parser(std::span<const CodeToken> tokens, bool tolerant) : toks_(tokens), tolerant_(tolerant) {}

  Ast run() {
    Ast ast;
    if (toks_.empty()) {
      if (!tolerant_) throw SyntaxError(0, "program");
      return ast;
    }
    Tmp root;
    switch (classify_unit()) {
      case Unit::Method:
        root = parse_method();
        if (!stopped_ && pos_ < toks_.size()) fail("end of input");
        break;
      case Unit::Statements:
        root = Tmp{SyntaxKind::Program, {}, {}};
        while (!stopped_ && pos_ < toks_.size()) block_item(root);
        break;
      case Unit::Undetermined:
        root = Tmp{SyntaxKind::Program, {}, {}};
        incomplete_from_ = 0;
        stopped_ = true;
        break;
    }
    if (stopped_) {
      ast.truncated = true;
      const std::size_t from = std::min(incomplete_from_, pos_);
      if (from < toks_.size()) {
        Tmp inc{SyntaxKind::Incomplete, {}, {}};
        for (std::size_t t = from; t < toks_.size(); ++t) inc.kids.push_back(leaf_at(t));
        root.kids.push_back(std::move(inc));
      }
    }
    flatten(root, ast);
    ast.root = 0;
    return ast;
  }

 private:
  enum class Unit { Method, Statements, Undetermined };

  const CodeToken* peek(std::size_t k = 0) const {
    return pos_ + k < toks_.size() ? &toks_[pos_ + k] : nullptr;
  }
  bool peek_is(std::string_view text, std::size_t k = 0) const {
    const auto* t = peek(k);
    return t && t->text == text && t->kind != TokenKind::Literal;
  }
  bool peek_kind(TokenKind kind, std::size_t k = 0) const {
    const auto* t = peek(k);
    return t && t->kind == kind;
  }
  bool peek_primitive(std::size_t k = 0) const {
    const auto* t = peek(k);
    return t && t->kind == TokenKind::Keyword && contains(kPrimitiveTypes, t->text);
  }

  void fail(std::string_view expected) {
    if (!tolerant_) {
      const std::size_t offset = pos_ < toks_.size() ? toks_[pos_].begin
                                                     : (toks_.empty() ? 0 : toks_.back().end);
      throw SyntaxError(offset, std::string(expected));
    }
    stopped_ = true;
  }

  Tmp leaf_at(std::size_t t) const {
    return Tmp{leaf_kind_for(toks_[t].kind), {}, t};
  }
  Tmp take() { return leaf_at(pos_++); }

  // Consumes the expected punctuation/keyword into `into`; false on failure.
  bool expect(Tmp& into, std::string_view text) {
    if (!peek_is(text)) {
      fail(std::string("'") + std::string(text) + "'");
      return false;
    }
    into.kids.push_back(take());
    return true;
  }

  void adopt(Tmp& parent, Tmp child) {
    if (child.has_tokens()) parent.kids.push_back(std::move(child));
  }

  Unit classify_unit() const {
    if (peek_kind(TokenKind::Keyword) && contains(kModifiers, peek()->text)) return Unit::Method;
    const bool type_start = peek_primitive() || peek_kind(TokenKind::Identifier);
    if (!type_start) return Unit::Statements;
    if (!peek(1)) return tolerant_ ? Unit::Undetermined : Unit::Statements;
    if (!peek_kind(TokenKind::Identifier, 1)) return Unit::Statements;
    if (!peek(2)) return tolerant_ ? Unit::Undetermined : Unit::Statements;
    return peek_is("(", 2) ? Unit::Method : Unit::Statements;
  }

  Tmp name() {
    Tmp n{SyntaxKind::Name, {}, {}};
    if (!peek_kind(TokenKind::Identifier)) {
      fail("identifier");
      return n;
    }
    n.kids.push_back(take());
    return n;
  }

  Tmp type() {
    if (peek_primitive()) return Tmp{SyntaxKind::PrimitiveType, {take()}, {}};
    if (peek_kind(TokenKind::Identifier)) return Tmp{SyntaxKind::ClassType, {name()}, {}};
    fail("type");
    return Tmp{SyntaxKind::ClassType, {}, {}};
  }

  Tmp parse_method() {
    Tmp m{SyntaxKind::MethodDecl, {}, {}};
    if (peek_kind(TokenKind::Keyword) && contains(kModifiers, peek()->text)) {
      Tmp mods{SyntaxKind::Modifiers, {}, {}};
      while (peek_kind(TokenKind::Keyword) && contains(kModifiers, peek()->text))
        mods.kids.push_back(take());
      m.kids.push_back(std::move(mods));
    }
    adopt(m, type());
    if (stopped_) return m;
    adopt(m, name());
    if (stopped_) return m;
    Tmp params{SyntaxKind::ParamList, {}, {}};
    if (expect(params, "(")) {
      if (!peek_is(")")) {
        while (true) {
          Tmp p{SyntaxKind::Param, {}, {}};
          adopt(p, type());
          if (!stopped_) adopt(p, name());
          adopt(params, std::move(p));
          if (stopped_ || !peek_is(",")) break;
          params.kids.push_back(take());
        }
      }
      if (!stopped_) expect(params, ")");
    }
    adopt(m, std::move(params));
    if (stopped_) return m;
    adopt(m, block());
    return m;
  }

  Tmp block() {
    Tmp b{SyntaxKind::Block, {}, {}};
    if (!expect(b, "{")) return b;
    while (!stopped_) {
      if (!peek()) {
        fail("'}'");
        break;
      }
      if (peek_is("}")) {
        b.kids.push_back(take());
        break;
      }
      block_item(b);
    }
    return b;
  }

  // One statement plus its terminating ';' (owned by the container).
  void block_item(Tmp& container) {
    if (peek_is(";")) {
      container.kids.push_back(take());
      return;
    }
    bool needs_semi = true;
    Tmp stmt = statement(needs_semi);
    adopt(container, std::move(stmt));
    if (!stopped_ && needs_semi) expect(container, ";");
  }

  Tmp statement(bool& needs_semi) {
    if (peek_primitive()) return local_var(type());
    if (peek_is("return")) {
      Tmp r{SyntaxKind::ReturnStmt, {take()}, {}};
      if (peek() && !peek_is(";")) adopt(r, expression());
      else if (!peek()) fail("expression or ';'");
      return r;
    }
    if (peek_is("if")) {
      needs_semi = false;
      return if_stmt();
    }
    if (peek_is("while")) {
      needs_semi = false;
      Tmp w{SyntaxKind::WhileStmt, {take()}, {}};
      adopt(w, condition());
      if (!stopped_) adopt(w, block());
      return w;
    }
    if (peek_is("{")) {
      needs_semi = false;
      return block();
    }
    return chain_statement();
  }

  Tmp local_var(Tmp ty) {
    Tmp d{SyntaxKind::LocalVarDecl, {}, {}};
    adopt(d, std::move(ty));
    if (stopped_) return d;
    adopt(d, name());
    if (stopped_) return d;
    if (peek_is("=")) {
      d.kids.push_back(take());
      adopt(d, expression());
    } else if (!peek()) {
      fail("'=' or ';'");
    }
    return d;
  }

  Tmp if_stmt() {
    Tmp s{SyntaxKind::IfStmt, {take()}, {}};
    adopt(s, condition());
    if (stopped_) return s;
    adopt(s, block());
    if (stopped_) return s;
    if (peek_is("else")) {
      s.kids.push_back(take());
      if (peek_is("if")) {
        adopt(s, if_stmt());
      } else {
        adopt(s, block());
      }
    }
    return s;
  }

  Tmp condition() {
    Tmp c{SyntaxKind::Condition, {}, {}};
    if (!expect(c, "(")) return c;
    adopt(c, expression());
    if (!stopped_) expect(c, ")");
    return c;
  }

  // Statements that begin with an operand: class-typed declaration,
  // assignment or expression statement. The kind is unknown until the token
  // after the leading operand; tokens seen before that go to Incomplete when
  // input ends early.
  Tmp chain_statement() {
    const std::size_t start = pos_;
    const bool single_ident = peek_kind(TokenKind::Identifier);
    std::vector<Tmp> lead;
    operand(lead);
    if (stopped_ || !peek()) {
      if (!stopped_) fail("statement continuation");
      incomplete_from_ = std::min(incomplete_from_, start);
      return Tmp{SyntaxKind::ExprStmt, {}, {}};
    }
    if (single_ident && lead.size() == 1 && peek_kind(TokenKind::Identifier)) {
      Tmp ty{SyntaxKind::ClassType, {std::move(lead.front())}, {}};
      return local_var(std::move(ty));
    }
    if (peek_is("=")) {
      Tmp a{SyntaxKind::AssignStmt, {}, {}};
      a.kids.push_back(Tmp{SyntaxKind::Expression, std::move(lead), {}});
      a.kids.push_back(take());
      adopt(a, expression());
      return a;
    }
    Tmp e{SyntaxKind::Expression, std::move(lead), {}};
    binary_tail(e);
    return Tmp{SyntaxKind::ExprStmt, {std::move(e)}, {}};
  }

  static bool is_binop(const CodeToken* t) {
    return t && t->kind == TokenKind::Operator && t->text != "=";
  }

  Tmp expression() {
    Tmp e{SyntaxKind::Expression, {}, {}};
    if (!peek()) {
      fail("expression");
      return e;
    }
    operand(e.kids);
    binary_tail(e);
    return e;
  }

  void binary_tail(Tmp& e) {
    while (!stopped_ && is_binop(peek())) {
      e.kids.push_back(take());
      if (!peek()) {
        fail("operand");
        return;
      }
      operand(e.kids);
    }
  }

  // primary selector*, appended flat into `out`.
  void operand(std::vector<Tmp>& out) {
    const auto* t = peek();
    if (!t) {
      fail("operand");
      return;
    }
    if (t->kind == TokenKind::Identifier) {
      out.push_back(name());
    } else if (t->kind == TokenKind::Literal) {
      out.push_back(Tmp{SyntaxKind::Literal, {take()}, {}});
    } else if (peek_is("this")) {
      out.push_back(Tmp{SyntaxKind::ThisExpr, {take()}, {}});
    } else if (peek_is("(")) {
      Tmp p{SyntaxKind::ParenExpr, {take()}, {}};
      adopt(p, expression());
      if (!stopped_) expect(p, ")");
      out.push_back(std::move(p));
    } else {
      fail("operand");
      return;
    }
    while (!stopped_) {
      if (peek_is(".")) {
        Tmp f{SyntaxKind::FieldAccess, {take()}, {}};
        adopt(f, name());
        out.push_back(std::move(f));
      } else if (peek_is("(")) {
        Tmp c{SyntaxKind::CallExpr, {take()}, {}};
        if (!peek()) {
          fail("argument or ')'");
        } else if (!peek_is(")")) {
          while (true) {
            adopt(c, expression());
            if (stopped_ || !peek_is(",")) break;
            c.kids.push_back(take());
          }
        }
        if (!stopped_) expect(c, ")");
        out.push_back(std::move(c));
      } else {
        break;
      }
    }
  }

  static std::size_t flatten(const Tmp& t, Ast& ast) {
    const std::size_t id = ast.nodes.size();
    ast.nodes.push_back(AstNode{t.kind, {}, t.token});
    std::vector<std::size_t> kids;
    kids.reserve(t.kids.size());
    for (const auto& k : t.kids) kids.push_back(flatten(k, ast));
    ast.nodes[id].children = std::move(kids);
    return id;
  }

  std::span<const CodeToken> toks_;
  bool tolerant_;
  std::size_t pos_ = 0;
  bool stopped_ = false;
  std::size_t incomplete_from_ = static_cast<std::size_t>(-1);
};

void dump_rec(const Ast& ast, std::span<const CodeToken> tokens, std::size_t id, std::ostream& os) {
  const auto& n = ast.nodes[id];
  if (n.token) {
    os << tokens[*n.token].text;
    return;
  }
  os << '(' << to_string(n.kind);
  for (auto c : n.children) {
    os << ' ';
    dump_rec(ast, tokens, c, os);
  }
  os << ')';
}

}  // namespace

std::string_view to_string(TokenKind kind) {
  switch (kind) {
    case TokenKind::Identifier: return "Identifier";
    case TokenKind::Keyword: return "Keyword";
    case TokenKind::Literal: return "Literal";
    case TokenKind::Operator: return "Operator";
    case TokenKind::Punct: return "Punct";
  }
  return "?";
}

std::string_view to_string(SyntaxKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

std::optional<SyntaxKind> syntax_kind_from_string(std::string_view name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (kKindNames[i] == name) return static_cast<SyntaxKind>(i);
  return std::nullopt;
}

bool is_leaf_kind(SyntaxKind kind) { return kind >= SyntaxKind::IdentifierLeaf; }

SyntaxKind leaf_kind_for(TokenKind kind) {
  switch (kind) {
    case TokenKind::Identifier: return SyntaxKind::IdentifierLeaf;
    case TokenKind::Keyword: return SyntaxKind::KeywordLeaf;
    case TokenKind::Literal: return SyntaxKind::LiteralLeaf;
    case TokenKind::Operator: return SyntaxKind::OperatorLeaf;
    case TokenKind::Punct: return SyntaxKind::PunctLeaf;
  }
  return SyntaxKind::PunctLeaf;
}

bool is_keyword(std::string_view word) { return contains(kKeywords, word); }

std::vector<CodeToken> tokenize(std::string_view source) { return lex(source, false); }

std::vector<CodeToken> tokenize_lenient(std::string_view source) { return lex(source, true); }

Ast parse(std::span<const CodeToken> tokens, bool tolerant) {
  return Parser(tokens, tolerant).run();
}

std::vector<std::size_t> preorder(const Ast& ast) {
  std::vector<std::size_t> out;
  if (ast.empty()) return out;
  std::vector<std::size_t> stack{ast.root};
  while (!stack.empty()) {
    const auto id = stack.back();
    stack.pop_back();
    out.push_back(id);
    const auto& kids = ast.nodes[id].children;
    for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(*it);
  }
  return out;
}

std::vector<std::size_t> leaf_tokens(const Ast& ast) {
  std::vector<std::size_t> out;
  for (auto id : preorder(ast))
    if (ast.nodes[id].token) out.push_back(*ast.nodes[id].token);
  return out;
}

std::string dump(const Ast& ast, std::span<const CodeToken> tokens) {
  if (ast.empty()) return "()";
  std::ostringstream os;
  dump_rec(ast, tokens, ast.root, os);
  return os.str();
}

}  // namespace cgfuse::frontend
