#include "cgfuse/frontend.hpp"

#include <gtest/gtest.h>

#include "cgfuse/errors.hpp"
#include "support/random_programs.hpp"

namespace fe = cgfuse::frontend;

namespace {

const char* kCalcTotalSize =
    "int calcTotalSize() {\n"
    "    _total = extractList().size();\n"
    "    return _total;\n"
    "}";

std::vector<std::string> texts(const std::vector<fe::CodeToken>& toks) {
  std::vector<std::string> out;
  for (const auto& t : toks) out.push_back(t.text);
  return out;
}

std::size_t count_leaves(const fe::Ast& ast) {
  std::size_t n = 0;
  for (const auto& node : ast.nodes) n += node.token.has_value();
  return n;
}

}  // namespace

TEST(Tokenize, SmallestStatement) {
  auto toks = fe::tokenize("return 0;");
  ASSERT_EQ(toks.size(), 3u);
  EXPECT_EQ(toks[0].kind, fe::TokenKind::Keyword);
  EXPECT_EQ(toks[0].text, "return");
  EXPECT_EQ(toks[1].kind, fe::TokenKind::Literal);
  EXPECT_EQ(toks[1].text, "0");
  EXPECT_EQ(toks[2].kind, fe::TokenKind::Punct);
  EXPECT_EQ(toks[2].text, ";");
}

TEST(Tokenize, NoWhitespaceAdjacency) {
  auto toks = fe::tokenize("a+b");
  ASSERT_EQ(toks.size(), 3u);
  EXPECT_EQ(toks[0].kind, fe::TokenKind::Identifier);
  EXPECT_EQ(toks[1].kind, fe::TokenKind::Operator);
  EXPECT_EQ(toks[1].text, "+");
  EXPECT_EQ(toks[2].kind, fe::TokenKind::Identifier);
}

TEST(Tokenize, FigureMethodIdentifiers) {
  auto t = texts(fe::tokenize(kCalcTotalSize));
  for (const char* want : {"calcTotalSize", "_total", "extractList"})
    EXPECT_NE(std::find(t.begin(), t.end(), want), t.end()) << want;
}

TEST(Tokenize, SpansReproduceSource) {
  const std::string src = kCalcTotalSize;
  auto toks = fe::tokenize(src);
  std::size_t prev_end = 0;
  std::string rebuilt;
  for (const auto& t : toks) {
    ASSERT_GE(t.begin, prev_end);
    ASSERT_LT(t.begin, t.end);
    rebuilt += src.substr(prev_end, t.begin - prev_end);
    rebuilt += t.text;
    prev_end = t.end;
  }
  rebuilt += src.substr(prev_end);
  EXPECT_EQ(rebuilt, src);
}

TEST(Tokenize, InvalidCharacterReportsOffset) {
  try {
    fe::tokenize("int x = 1 # 2;");
    FAIL() << "expected InvalidCharacter";
  } catch (const cgfuse::InvalidCharacter& e) {
    EXPECT_EQ(e.offset(), 10u);
  }
  EXPECT_THROW(fe::tokenize("s = \"unterminated"), cgfuse::InvalidCharacter);
  EXPECT_EQ(fe::tokenize_lenient("a # b").size(), 1u);
}

TEST(Tokenize, KeywordsAndLiterals) {
  auto toks = fe::tokenize("while if else void true null \"s t\" 3.5 x1");
  EXPECT_EQ(toks[0].kind, fe::TokenKind::Keyword);
  EXPECT_EQ(toks[3].kind, fe::TokenKind::Keyword);
  EXPECT_EQ(toks[4].kind, fe::TokenKind::Literal);
  EXPECT_EQ(toks[5].kind, fe::TokenKind::Literal);
  EXPECT_EQ(toks[6].text, "\"s t\"");
  EXPECT_EQ(toks[7].text, "3.5");
  EXPECT_EQ(toks[8].kind, fe::TokenKind::Identifier);
}

TEST(Parse, SingleDeclaration) {
  auto toks = fe::tokenize("int x = 1;");
  auto ast = fe::parse(toks, false);
  EXPECT_EQ(ast.nodes[ast.root].kind, fe::SyntaxKind::Program);
  ASSERT_FALSE(ast.nodes[ast.root].children.empty());
  EXPECT_EQ(ast.nodes[ast.nodes[ast.root].children[0]].kind, fe::SyntaxKind::LocalVarDecl);
  EXPECT_EQ(count_leaves(ast), 5u);
}

TEST(Parse, FigureMethod) {
  auto toks = fe::tokenize(kCalcTotalSize);
  auto ast = fe::parse(toks, false);
  const auto& root = ast.nodes[ast.root];
  ASSERT_EQ(root.kind, fe::SyntaxKind::MethodDecl);
  const auto& block = ast.nodes[root.children.back()];
  ASSERT_EQ(block.kind, fe::SyntaxKind::Block);
  std::vector<fe::SyntaxKind> stmt_kinds;
  for (auto c : block.children) stmt_kinds.push_back(ast.nodes[c].kind);
  EXPECT_NE(std::find(stmt_kinds.begin(), stmt_kinds.end(), fe::SyntaxKind::AssignStmt), stmt_kinds.end());
  EXPECT_NE(std::find(stmt_kinds.begin(), stmt_kinds.end(), fe::SyntaxKind::ReturnStmt), stmt_kinds.end());
  EXPECT_EQ(fe::dump(ast, toks),
            "(MethodDecl (PrimitiveType int) (Name calcTotalSize) (ParamList ( )) (Block { "
            "(AssignStmt (Expression (Name _total)) = (Expression (Name extractList) (CallExpr ( )) "
            "(FieldAccess . (Name size)) (CallExpr ( )))) ; (ReturnStmt return (Expression (Name "
            "_total))) ; }))");
}

TEST(Parse, StrictErrorsCarryOffsetAndExpectation) {
  auto toks = fe::tokenize("int x = ;");
  try {
    fe::parse(toks, false);
    FAIL();
  } catch (const cgfuse::SyntaxError& e) {
    EXPECT_EQ(e.offset(), 8u);
    EXPECT_EQ(e.expected(), "operand");
  }
  EXPECT_THROW(fe::parse({}, false), cgfuse::SyntaxError);
}

TEST(Parse, TolerantMissingInitializer) {
  auto toks = fe::tokenize("int x = ");
  auto ast = fe::parse(toks, true);
  EXPECT_TRUE(ast.truncated);
  const auto& decl = ast.nodes[ast.nodes[ast.root].children[0]];
  EXPECT_EQ(decl.kind, fe::SyntaxKind::LocalVarDecl);
  for (auto c : decl.children) EXPECT_NE(ast.nodes[c].kind, fe::SyntaxKind::Expression);
  EXPECT_EQ(count_leaves(ast), 3u);
}

TEST(Parse, TolerantWrapsUnparsableTail) {
  auto toks = fe::tokenize("int x = 1; ) ) y");
  auto ast = fe::parse(toks, true);
  const auto& root = ast.nodes[ast.root];
  const auto& inc = ast.nodes[root.children.back()];
  ASSERT_EQ(inc.kind, fe::SyntaxKind::Incomplete);
  EXPECT_EQ(inc.children.size(), 3u);
  for (auto c : inc.children) EXPECT_TRUE(ast.nodes[c].token.has_value());
}

TEST(Parse, TolerantUndeterminedStatementGoesToIncomplete) {
  auto toks = fe::tokenize("int a = 1; total");
  auto ast = fe::parse(toks, true);
  const auto& root = ast.nodes[ast.root];
  EXPECT_EQ(ast.nodes[root.children.back()].kind, fe::SyntaxKind::Incomplete);
}

TEST(Parse, EmptyTolerantInputGivesEmptyTree) {
  auto ast = fe::parse({}, true);
  EXPECT_TRUE(ast.empty());
}

// Round-trip, prefix monotonicity and determinism over random programs.
TEST(ParseProperties, RandomPrograms) {
  testing_support::ProgramGen gen(7);
  testing_support::OracleRenderer render;
  for (int i = 0; i < 100; ++i) {
    auto r = render.render(gen.program());
    auto toks = fe::tokenize(r.source);
    ASSERT_EQ(toks.size(), r.tokens.size());
    fe::Ast ast;
    ASSERT_NO_THROW(ast = fe::parse(toks, false)) << r.source;
    auto leaves = fe::leaf_tokens(ast);
    ASSERT_EQ(leaves.size(), toks.size());
    for (std::size_t k = 0; k < leaves.size(); ++k) ASSERT_EQ(leaves[k], k);
    EXPECT_EQ(fe::parse(toks, false), ast);

    for (const auto& n : ast.nodes) {
      EXPECT_EQ(n.token.has_value(), n.children.empty());
      EXPECT_EQ(n.token.has_value(), fe::is_leaf_kind(n.kind));
    }
    for (std::size_t k = 0; k <= toks.size(); ++k) {
      std::span<const fe::CodeToken> prefix(toks.data(), k);
      fe::Ast p;
      ASSERT_NO_THROW(p = fe::parse(prefix, true)) << r.source << " prefix " << k;
      auto pl = fe::leaf_tokens(p);
      ASSERT_EQ(pl.size(), k);
      for (std::size_t j = 0; j < k; ++j) ASSERT_EQ(pl[j], j);
    }
  }
}
