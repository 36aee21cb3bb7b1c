#include "cgfuse/code_graph.hpp"

#include <gtest/gtest.h>

#include "cgfuse/errors.hpp"
#include "support/random_programs.hpp"

namespace fe = cgfuse::frontend;
namespace cg = cgfuse::graph;
using cg::Relation;

namespace {

const char* kCalcTotalSize =
    "int calcTotalSize() {\n"
    "    _total = extractList().size();\n"
    "    return _total;\n"
    "}";

struct Built {
  std::vector<fe::CodeToken> tokens;
  cg::CodeGraph graph;
};

Built build(const std::string& src) {
  Built b;
  b.tokens = fe::tokenize(src);
  b.graph = cg::build_code_graph(fe::parse(b.tokens, false), b.tokens);
  return b;
}

// Terminal node id -> token ordinal.
std::map<std::size_t, std::size_t> ordinals(const cg::CodeGraph& g) {
  std::map<std::size_t, std::size_t> m;
  auto ts = g.terminal_nodes();
  for (std::size_t i = 0; i < ts.size(); ++i) m[ts[i]] = i;
  return m;
}

std::set<testing_support::Edge> token_edges(const cg::CodeGraph& g) {
  auto ord = ordinals(g);
  std::set<testing_support::Edge> out;
  for (const auto& e : g.edges) {
    if (e.rel == Relation::P) continue;
    out.insert({ord.at(e.src), ord.at(e.dst), e.rel == Relation::CO ? 'o' : 'a'});
  }
  return out;
}

std::set<testing_support::Edge> edge_set(std::vector<std::tuple<std::size_t, std::size_t, char>> want) {
  std::set<testing_support::Edge> out;
  for (auto [s, d, r] : want) out.insert({s, d, r});
  return out;
}

}  // namespace

TEST(CodeGraph, ReturnZeroHasNoDataflow) {
  auto b = build("return 0;");
  EXPECT_EQ(b.graph.count(Relation::CO), 0u);
  EXPECT_EQ(b.graph.count(Relation::CA), 0u);
  EXPECT_NO_THROW(cg::validate(b.graph));
}

TEST(CodeGraph, FigureMethodEdges) {
  auto b = build(kCalcTotalSize);
  // tokens: int calcTotalSize ( ) { _total = extractList ( ) . size ( ) ; return _total ; }
  //         0   1             2 3 4 5      6 7           8 9 10 11  12 13 14 15    16     17 18
  auto e = token_edges(b.graph);
  EXPECT_TRUE(e.count({16, 5, 'o'}));
  EXPECT_TRUE(e.count({5, 7, 'a'}));
  EXPECT_TRUE(e.count({5, 11, 'a'}));
  EXPECT_EQ(e.size(), 3u);
}

TEST(CodeGraph, DeclarationAndReturn) {
  auto b = build("int a = b + c; return a;");
  // int a = b + c ; return a ;
  // 0   1 2 3 4 5 6 7      8 9
  auto e = token_edges(b.graph);
  EXPECT_EQ(e, edge_set({{1, 3, 'a'}, {1, 5, 'a'}, {8, 1, 'o'}}));
}

TEST(CodeGraph, StraightLineUseDef) {
  auto b = build("x = 1; y = x;");
  // x = 1 ; y = x ;
  // 0 1 2 3 4 5 6 7
  EXPECT_EQ(token_edges(b.graph), edge_set({{6, 0, 'o'}, {4, 6, 'a'}}));
}

TEST(CodeGraph, BothBranchesReachJoin) {
  auto b = build("if (c) { x = 1; } else { x = 2; } return x;");
  // if ( c ) { x = 1 ; } else { x = 2 ; } return x ;
  // 0  1 2 3 4 5 6 7 8 9 10  11 12 ...      17     18
  auto e = token_edges(b.graph);
  EXPECT_TRUE(e.count({18, 5, 'o'}));
  EXPECT_TRUE(e.count({18, 12, 'o'}));
  EXPECT_EQ(b.graph.count(Relation::CO), 2u);
}

TEST(CodeGraph, LoopBackEdge) {
  auto b = build("while (go) { y = x; x = y + 1; }");
  // while ( go ) { y = x ; x = y + 1 ; }
  // 0     1 2  3 4 5 6 7 8 9 10 11 ...
  auto e = token_edges(b.graph);
  EXPECT_TRUE(e.count({7, 9, 'o'}));  // x in body reaches the later def via the back edge
  EXPECT_TRUE(e.count({11, 5, 'o'}));
}

TEST(CodeGraph, NoAssignmentsNoDataflow) {
  auto b = build("foo(a, b); bar.baz();");
  EXPECT_EQ(b.graph.count(Relation::CO) + b.graph.count(Relation::CA), 0u);
}

TEST(CodeGraph, NodeAndTreeEdgeCounts) {
  auto b = build(kCalcTotalSize);
  auto ast = fe::parse(b.tokens, false);
  EXPECT_EQ(b.graph.size(), ast.nodes.size());
  EXPECT_EQ(b.graph.count(Relation::P), b.graph.size() - 1);
  EXPECT_EQ(b.graph.terminal_nodes().size(), b.tokens.size());
}

TEST(ContextSubgraph, FullAndEmpty) {
  auto b = build(kCalcTotalSize);
  EXPECT_EQ(cg::context_subgraph(b.graph, b.tokens.size()), b.graph);
  EXPECT_TRUE(cg::context_subgraph(b.graph, 0).empty());
}

TEST(ContextSubgraph, TruncatedBeforeReturnDropsComingFrom) {
  auto b = build(kCalcTotalSize);
  auto sub = cg::context_subgraph(b.graph, 15);  // up to and including the first ';'
  EXPECT_EQ(sub.count(Relation::CO), 0u);
  EXPECT_EQ(sub.count(Relation::CA), 2u);
  // Recompute from the induced prefix: the same as parsing the prefix.
  std::span<const fe::CodeToken> prefix(b.tokens.data(), 15);
  auto direct = cg::build_code_graph(fe::parse(prefix, true), prefix);
  EXPECT_EQ(sub, direct);
  EXPECT_NO_THROW(cg::validate(sub));
}

TEST(Dataflow, MatchesIndependentOracle) {
  testing_support::ProgramGen gen(2024);
  testing_support::OracleRenderer oracle;
  for (int i = 0; i < 300; ++i) {
    auto r = oracle.render(gen.program());
    auto b = build(r.source);
    ASSERT_EQ(token_edges(b.graph), r.edges) << r.source;
  }
}

TEST(ContextSubgraph, EqualsPrefixParseUpToIncomplete) {
  testing_support::ProgramGen gen(99, /*straight_line=*/true);
  testing_support::OracleRenderer oracle;
  for (int i = 0; i < 100; ++i) {
    auto r = oracle.render(gen.program());
    auto b = build(r.source);
    for (std::size_t k = 0; k <= b.tokens.size(); ++k) {
      std::span<const fe::CodeToken> prefix(b.tokens.data(), k);
      auto direct = cg::build_code_graph(fe::parse(prefix, true), prefix);
      auto masked = cg::context_subgraph(b.graph, k);
      auto inc = cg::incomplete_terminals(direct);
      ASSERT_EQ(cg::remove_terminals(masked, inc), cg::remove_terminals(direct, inc))
          << r.source << " k=" << k;
    }
  }
}

TEST(Serialize, RoundTrip) {
  auto b = build(kCalcTotalSize);
  auto text = cg::serialize(b.graph);
  EXPECT_EQ(cg::deserialize(text), b.graph);
  EXPECT_EQ(text.find('\n'), std::string::npos);
  cg::CodeGraph empty;
  EXPECT_EQ(cg::deserialize(cg::serialize(empty)), empty);
}

TEST(Serialize, FuzzReserializesByteIdentically) {
  testing_support::ProgramGen gen(5);
  testing_support::OracleRenderer oracle;
  for (int i = 0; i < 500; ++i) {
    auto b = build(oracle.render(gen.program()).source);
    auto text = cg::serialize(b.graph);
    auto back = cg::deserialize(text);
    ASSERT_EQ(back, b.graph);
    ASSERT_EQ(cg::serialize(back), text);
  }
}

TEST(Serialize, MalformedInputThrowsFormatError) {
  EXPECT_THROW(cg::deserialize("not json"), cgfuse::FormatError);
  EXPECT_THROW(cg::deserialize(R"({"nodes":[["Bogus"]],"edges":[]})"), cgfuse::FormatError);
  EXPECT_THROW(cg::deserialize(R"({"nodes":[["Program"],["Name"]],"edges":[[0,0,"p"]]})"),
               cgfuse::FormatError);
  EXPECT_THROW(cg::deserialize(R"({"nodes":[["Program"]],"edges":[[0,1,"zz"]]})"), cgfuse::FormatError);
}

TEST(Align, SingleAndMultiSubtoken) {
  auto b = build("x = calcTotalSize;");
  // subtokens: x | ' ' | = | ' ' | calc Total Size | ;
  std::vector<std::optional<std::size_t>> prov = {0, std::nullopt, 1, std::nullopt, std::nullopt,
                                                  2, 2, 2, 3};
  auto al = cg::align_terminals(b.graph, prov);
  ASSERT_EQ(al.spans.size(), 4u);
  EXPECT_EQ(al.spans[0].end - al.spans[0].begin, 1u);
  EXPECT_EQ(al.spans[2].begin, 5u);
  EXPECT_EQ(al.spans[2].end, 8u);
}

TEST(Align, MissingOrScatteredSubtokensThrow) {
  auto b = build("x = y;");
  std::vector<std::optional<std::size_t>> missing = {0, 1, 3};
  EXPECT_THROW(cg::align_terminals(b.graph, missing), cgfuse::AlignmentError);
  std::vector<std::optional<std::size_t>> scattered = {0, 1, 2, 0, 3};
  EXPECT_THROW(cg::align_terminals(b.graph, scattered), cgfuse::AlignmentError);
}
