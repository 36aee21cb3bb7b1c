#include "cgfuse/gnn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <queue>

#include "cgfuse/errors.hpp"
#include "support/random_programs.hpp"

namespace gn = cgfuse::gnn;
namespace gr = cgfuse::graph;
namespace fe = cgfuse::frontend;
namespace ts = cgfuse::tensor;
using ts::Tensor;

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Affine + GELU with the bias given as a 1-D tensor.
Mat dense_layer(const Mat& x, const Tensor& w, const Tensor& b) {
  Mat y = mm(x, to_mat(w));
  for (auto& row : y)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = gelu(row[j] + b.data()[j]);
  return y;
}

// Dense adjacency per effective relation: A[r][v][u] = 1 when u sends to v.
std::vector<Mat> dense_adjacency(const gr::CodeGraph& g) {
  const std::size_t n = g.size();
  std::vector<Mat> A(gn::kEffectiveRelations, Mat(n, std::vector<double>(n, 0.0)));
  for (const auto& e : g.edges) {
    const auto r = static_cast<std::size_t>(e.rel);
    A[r][e.dst][e.src] += 1.0;
    A[r + gr::kRelationCount][e.src][e.dst] += 1.0;
  }
  return A;
}

Mat row_mean(const Mat& A, const Mat& h) {
  Mat out = mm(A, h);
  for (std::size_t v = 0; v < A.size(); ++v) {
    const double deg = std::accumulate(A[v].begin(), A[v].end(), 0.0);
    if (deg > 0)
      for (auto& x : out[v]) x /= deg;
  }
  return out;
}

Mat dense_forward(const gr::CodeGraph& g, const Tensor& init, const gn::GnnModel& model) {
  const auto& cfg = model.config();
  const auto& ps = model.params();
  const std::size_t n = g.size(), d = cfg.hidden_dim;
  auto A = dense_adjacency(g);
  Mat all(n, std::vector<double>(n, 0.0));
  for (const auto& Ar : A)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) all[i][j] += Ar[i][j];
  Mat h = to_mat(init);
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    if (cfg.arch == gn::Arch::GIN) {
      Mat z = mm(all, h);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) z[i][j] += (1.0 + cfg.epsilon) * h[i][j];
      h = dense_layer(dense_layer(z, ps.get(p + "w1"), ps.get(p + "b1")), ps.get(p + "w2"), ps.get(p + "b2"));
      continue;
    }
    Mat cat = h;
    if (cfg.arch == gn::Arch::RGCN) {
      for (const auto& Ar : A) {
        Mat m = row_mean(Ar, h);
        for (std::size_t i = 0; i < n; ++i) cat[i].insert(cat[i].end(), m[i].begin(), m[i].end());
      }
    } else {
      Mat agg(n, std::vector<double>(d, 0.0));
      if (cfg.use_relational) {
        for (const auto& Ar : A) {
          Mat m = row_mean(Ar, h);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) agg[i][j] += m[i][j];
        }
      } else {
        agg = row_mean(all, h);
      }
      for (std::size_t i = 0; i < n; ++i) cat[i].insert(cat[i].end(), agg[i].begin(), agg[i].end());
    }
    h = dense_layer(cat, ps.get(p + "w"), ps.get(p + "b"));
  }
  return h;
}

Tensor random_init(std::size_t n, std::size_t d, std::uint64_t seed) {
  ts::CounterRng rng(seed);
  std::vector<float> v(n * d);
  for (auto& x : v) x = rng.normal();
  return Tensor::from({n, d}, std::move(v));
}

gr::CodeGraph program_graph(unsigned seed, bool straight = false) {
  testing_support::ProgramGen gen(seed, straight);
  testing_support::OracleRenderer r;
  return gr::build_from_source(r.render(gen.program()).source, false);
}

gr::CodeGraph permuted(const gr::CodeGraph& g, const std::vector<std::size_t>& perm) {
  // perm[old] = new
  gr::CodeGraph out;
  out.nodes.resize(g.size());
  for (std::size_t v = 0; v < g.size(); ++v) out.nodes[perm[v]] = g.nodes[v];
  for (const auto& e : g.edges) out.edges.push_back({perm[e.src], perm[e.dst], e.rel});
  std::sort(out.edges.begin(), out.edges.end());
  return out;
}

gr::GraphNode leaf(std::string text) {
  const std::size_t len = text.size();
  return {fe::SyntaxKind::IdentifierLeaf, fe::CodeToken{std::move(text), fe::TokenKind::Identifier, 0, len}};
}

gn::GnnModel make_model(gn::Arch arch, std::size_t layers, std::size_t d, bool relational = false,
                        std::uint64_t seed = 7) {
  gn::GnnConfig cfg;
  cfg.arch = arch;
  cfg.num_layers = layers;
  cfg.hidden_dim = d;
  cfg.use_relational = relational;
  cfg.epsilon = 0.25f;
  ts::CounterRng rng(seed);
  return gn::GnnModel(cfg, rng);
}

std::vector<std::size_t> bfs_distance(const gr::CodeGraph& g, std::size_t src) {
  std::vector<std::vector<std::size_t>> nbr(g.size());
  for (const auto& e : g.edges) {
    nbr[e.src].push_back(e.dst);
    nbr[e.dst].push_back(e.src);
  }
  std::vector<std::size_t> dist(g.size(), SIZE_MAX);
  std::queue<std::size_t> q;
  dist[src] = 0;
  q.push(src);
  while (!q.empty()) {
    auto v = q.front();
    q.pop();
    for (auto u : nbr[v])
      if (dist[u] == SIZE_MAX) {
        dist[u] = dist[v] + 1;
        q.push(u);
      }
  }
  return dist;
}

struct ArchCase {
  gn::Arch arch;
  bool relational;
};

const std::vector<ArchCase> kArchCases = {
    {gn::Arch::RGCN, false}, {gn::Arch::SAGE, false}, {gn::Arch::SAGE, true}, {gn::Arch::GIN, false}};

}  // namespace

TEST(GnnConfig, ArchNamesAndValidation) {
  EXPECT_EQ(gn::arch_from_string("GIN"), gn::Arch::GIN);
  EXPECT_EQ(gn::arch_from_string("rgcn"), gn::Arch::RGCN);
  EXPECT_EQ(gn::arch_from_string("Sage"), gn::Arch::SAGE);
  EXPECT_THROW(gn::arch_from_string("gat"), cgfuse::UsageError);
  gn::GnnConfig c;
  EXPECT_EQ(c.arch, gn::Arch::GIN);
  EXPECT_EQ(c.num_layers, 1u);
  c.num_layers = 0;
  EXPECT_THROW(c.validate(), cgfuse::UsageError);
}

TEST(NodeInit, SyntaxRowsAndSubtokenMeans) {
  cgfuse::tokenizer::Vocab vocab;
  const auto ab = vocab.add("ab");
  const auto c = *vocab.find("c");
  gr::CodeGraph g;
  g.nodes.push_back({fe::SyntaxKind::Expression, std::nullopt});
  g.nodes.push_back(leaf("abc"));
  g.edges.push_back({0, 1, gr::Relation::P});
  const std::size_t d = 3;
  auto plm = random_init(vocab.size(), d, 1);
  auto syntax = random_init(gn::kLabelCount, d, 2);
  auto init = gn::node_init(g, plm, syntax, vocab);
  ASSERT_EQ(init.shape(), (ts::Shape{2, d}));
  const auto expr = static_cast<std::size_t>(fe::SyntaxKind::Expression);
  for (std::size_t j = 0; j < d; ++j) {
    EXPECT_FLOAT_EQ(init.at(0, j), syntax.at(expr, j));
    EXPECT_NEAR(init.at(1, j), 0.5 * (plm.at(ab, j) + plm.at(c, j)), 1e-6);
  }
  EXPECT_THROW(gn::node_init(g, plm, random_init(gn::kLabelCount, d + 1, 3), vocab), cgfuse::ShapeMismatch);
}

TEST(NodeInit, LabelsAreKinds) {
  auto g = gr::build_from_source("return x;", false);
  auto labels = gn::node_labels(g);
  ASSERT_EQ(labels.size(), g.size());
  for (std::size_t v = 0; v < g.size(); ++v) EXPECT_EQ(labels[v], static_cast<std::size_t>(g.nodes[v].kind));
}

TEST(GnnForward, IsolatedGinNodeByHand) {
  auto model = make_model(gn::Arch::GIN, 1, 1);
  auto& ps = model.params();
  ps.get("l0.w1").data()[0] = 2.0f;
  ps.get("l0.b1").data()[0] = 0.0f;
  ps.get("l0.w2").data()[0] = 1.0f;
  ps.get("l0.b2").data()[0] = 0.5f;
  gr::CodeGraph g;
  g.nodes.push_back(leaf("x"));
  auto out = gn::gnn_forward(g, Tensor::from({1, 1}, {1.0f}), model);
  // z = 1.25 * 1; hidden = gelu(2.5)
  EXPECT_NEAR(out.item(), gelu(gelu(2.5) + 0.5), 1e-6);
}

TEST(GnnForward, SagePathByHand) {
  auto model = make_model(gn::Arch::SAGE, 1, 1);
  auto& ps = model.params();
  ps.get("l0.w").data()[0] = 1.0f;
  ps.get("l0.w").data()[1] = 1.0f;
  ps.get("l0.b").data()[0] = 0.0f;
  gr::CodeGraph g;
  g.nodes = {{fe::SyntaxKind::Block, std::nullopt}, {fe::SyntaxKind::ExprStmt, std::nullopt}, leaf("x")};
  g.edges = {{0, 1, gr::Relation::P}, {1, 2, gr::Relation::P}};
  auto out = gn::gnn_forward(g, Tensor::from({3, 1}, {1, 2, 3}), model);
  EXPECT_NEAR(out.at(0, 0), gelu(1 + 2), 1e-6);
  EXPECT_NEAR(out.at(1, 0), gelu(2 + 2), 1e-6);
  EXPECT_NEAR(out.at(2, 0), gelu(3 + 2), 1e-6);
}

TEST(GnnForward, EmptyGraphAndShapeErrors) {
  auto model = make_model(gn::Arch::RGCN, 2, 4);
  gr::CodeGraph empty;
  EXPECT_EQ(gn::gnn_forward(empty, Tensor::zeros({0, 4}), model).rows(), 0u);
  auto g = gr::build_from_source("return x;", false);
  EXPECT_THROW(gn::gnn_forward(g, Tensor::zeros({g.size(), 5}), model), cgfuse::ShapeMismatch);
}

TEST(GnnForward, MatchesDenseOracleOnSmallGraphs) {
  std::size_t checked = 0;
  for (unsigned seed = 1; checked < 40 && seed < 2000; ++seed) {
    auto g = program_graph(seed, true);
    if (g.size() > 20) continue;
    for (const auto& ac : kArchCases) {
      auto model = make_model(ac.arch, 2, 6, ac.relational, seed);
      auto init = random_init(g.size(), 6, seed);
      auto got = gn::gnn_forward(g, init, model);
      auto want = dense_forward(g, init, model);
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < 6; ++j)
          ASSERT_NEAR(got.at(i, j), want[i][j], 1e-5) << gn::to_string(ac.arch) << " seed " << seed;
    }
    ++checked;
  }
  EXPECT_EQ(checked, 40u);
}

TEST(GnnForward, PermutationEquivariant) {
  for (unsigned seed = 1; seed <= 20; ++seed) {
    auto g = program_graph(seed);
    std::vector<std::size_t> perm(g.size());
    std::iota(perm.begin(), perm.end(), 0);
    ts::CounterRng rng(seed, 5);
    rng.shuffle(perm.begin(), perm.end());
    auto pg = permuted(g, perm);
    auto init = random_init(g.size(), 8, seed);
    std::vector<float> pinit(init.numel());
    for (std::size_t v = 0; v < g.size(); ++v)
      for (std::size_t j = 0; j < 8; ++j) pinit[perm[v] * 8 + j] = init.at(v, j);
    for (const auto& ac : kArchCases) {
      auto model = make_model(ac.arch, 2, 8, ac.relational, seed);
      auto a = gn::gnn_forward(g, init, model);
      auto b = gn::gnn_forward(pg, Tensor::from({g.size(), 8}, pinit), model);
      for (std::size_t v = 0; v < g.size(); ++v)
        for (std::size_t j = 0; j < 8; ++j) ASSERT_NEAR(a.at(v, j), b.at(perm[v], j), 1e-5);
    }
  }
}

TEST(GnnForward, FarNodesDoNotInfluence) {
  for (unsigned seed = 1; seed <= 10; ++seed) {
    auto g = program_graph(seed);
    for (std::size_t layers : {1u, 2u}) {
      const std::size_t target = g.size() - 1;
      auto dist = bfs_distance(g, target);
      auto init = random_init(g.size(), 8, seed);
      std::vector<float> moved(init.data().begin(), init.data().end());
      std::size_t far = 0;
      for (std::size_t v = 0; v < g.size(); ++v)
        if (dist[v] > layers) {
          ++far;
          for (std::size_t j = 0; j < 8; ++j) moved[v * 8 + j] += 3.0f;
        }
      ASSERT_GT(far, 0u);
      for (const auto& ac : kArchCases) {
        auto model = make_model(ac.arch, layers, 8, ac.relational, seed);
        auto a = gn::gnn_forward(g, init, model);
        auto b = gn::gnn_forward(g, Tensor::from({g.size(), 8}, moved), model);
        for (std::size_t j = 0; j < 8; ++j) ASSERT_EQ(a.at(target, j), b.at(target, j));
      }
    }
  }
}

TEST(GnnGradients, AllArchitecturesOnFiveNodes) {
  gr::CodeGraph g;
  g.nodes = {{fe::SyntaxKind::ReturnStmt, std::nullopt},
             {fe::SyntaxKind::Expression, std::nullopt},
             leaf("a"),
             leaf("b"),
             {fe::SyntaxKind::PunctLeaf, fe::CodeToken{";", fe::TokenKind::Punct, 0, 1}}};
  g.edges = {{0, 1, gr::Relation::P}, {0, 4, gr::Relation::P}, {1, 2, gr::Relation::P},
             {1, 3, gr::Relation::P}, {2, 3, gr::Relation::CO}, {3, 2, gr::Relation::CA}};
  for (const auto& ac : kArchCases) {
    auto model = make_model(ac.arch, 2, 4, ac.relational);
    auto init = random_init(5, 4, 11);
    init.set_requires_grad(true);
    std::vector<Tensor> inputs{init};
    for (auto& [name, t] : model.params().items())
      if (name != "syntax" && name != "mask") inputs.push_back(t);
    auto w = random_init(5, gn::kLabelCount, 12);
    auto r = ts::grad_check(
        [&] { return ts::sum(ts::mul(model.classify(gn::gnn_forward(g, init, model)), w)); }, inputs);
    EXPECT_LT(r.max_rel_error, 1e-3) << gn::to_string(ac.arch);
    EXPECT_GT(r.checked, 0u);
  }
}

TEST(SampleMask, IndependentAndSized) {
  for (unsigned seed = 1; seed <= 50; ++seed) {
    auto g = program_graph(seed);
    auto adj = gn::Adjacency::of(g);
    ts::CounterRng rng(seed);
    auto m = gn::sample_mask(adj, 0.15, rng);
    ASSERT_FALSE(m.empty());
    EXPECT_LE(m.size(), std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.15 * g.size()))));
    std::set<std::size_t> s(m.begin(), m.end());
    EXPECT_EQ(s.size(), m.size());
    for (const auto& e : g.edges) EXPECT_FALSE(s.count(e.src) && s.count(e.dst));
  }
  gr::CodeGraph one;
  one.nodes.push_back(leaf("x"));
  ts::CounterRng rng(1);
  EXPECT_EQ(gn::sample_mask(gn::Adjacency::of(one), 0.15, rng), std::vector<std::size_t>{0});
}

TEST(Adjacency, MergeOffsetsNodes) {
  auto a = gr::build_from_source("return x;", false);
  auto b = gr::build_from_source("x = y;", false);
  std::vector<gn::Adjacency> parts{gn::Adjacency::of(a), gn::Adjacency::of(b)};
  auto m = gn::Adjacency::merge(parts);
  gr::CodeGraph u = a;
  for (const auto& n : b.nodes) u.nodes.push_back(n);
  for (const auto& e : b.edges) u.edges.push_back({e.src + a.size(), e.dst + a.size(), e.rel});
  auto want = gn::Adjacency::of(u);
  EXPECT_EQ(m.nodes, want.nodes);
  for (std::size_t r = 0; r < gn::kEffectiveRelations; ++r) {
    EXPECT_EQ(m.from[r], want.from[r]);
    EXPECT_EQ(m.to[r], want.to[r]);
    EXPECT_EQ(m.inv_degree[r], want.inv_degree[r]);
  }
}

namespace {

struct PretrainFixture {
  std::vector<gr::CodeGraph> graphs;
  cgfuse::tokenizer::Vocab vocab;
  Tensor plm;
};

PretrainFixture pretrain_fixture(std::size_t n, std::size_t d) {
  PretrainFixture f;
  testing_support::ProgramGen gen(3);
  testing_support::OracleRenderer r;
  std::vector<std::string> sources;
  for (std::size_t i = 0; i < n; ++i) sources.push_back(r.render(gen.program()).source);
  for (const auto& s : sources) f.graphs.push_back(gr::build_from_source(s, false));
  f.vocab = cgfuse::tokenizer::train_vocab(sources, 500);
  f.plm = random_init(f.vocab.size(), d, 4);
  return f;
}

}  // namespace

TEST(Pretrain, ErrorsAndDeterminism) {
  auto f = pretrain_fixture(40, 16);
  gn::PretrainOptions opt;
  opt.epochs = 2;
  auto m1 = make_model(gn::Arch::GIN, 1, 16);
  auto m2 = make_model(gn::Arch::GIN, 1, 16);
  auto r1 = gn::pretrain_nodes(m1, f.graphs, f.plm, f.vocab, opt, 9);
  auto r2 = gn::pretrain_nodes(m2, f.graphs, f.plm, f.vocab, opt, 9);
  EXPECT_EQ(r1.to_text(), r2.to_text());
  EXPECT_EQ(r1.epochs.size(), 2u);
  EXPECT_EQ(r1.heldout_graphs, 4u);
  EXPECT_EQ(r1.train_graphs, 36u);
  EXPECT_NE(r1.to_text().find("epoch 2 loss "), std::string::npos);
  std::vector<gr::CodeGraph> none;
  EXPECT_THROW(gn::pretrain_nodes(m1, none, f.plm, f.vocab, opt, 1), cgfuse::EmptyCorpus);
  opt.mask_ratio = 1.5;
  EXPECT_THROW(gn::pretrain_nodes(m1, f.graphs, f.plm, f.vocab, opt, 1), cgfuse::UsageError);
}

TEST(Pretrain, LearnsMaskedKinds) {
  auto f = pretrain_fixture(300, 32);
  gn::PretrainOptions opt;
  opt.epochs = 3;
  auto model = make_model(gn::Arch::GIN, 1, 32);
  auto r = gn::pretrain_nodes(model, f.graphs, f.plm, f.vocab, opt, 1);
  EXPECT_LT(r.epochs.back().loss, r.epochs.front().loss);
  EXPECT_GT(r.final_accuracy(), 0.8) << r.to_text();
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  auto m = make_model(gn::Arch::SAGE, 2, 8, true);
  const auto path = (std::filesystem::temp_directory_path() / "cgfuse_gnn.ckpt").string();
  gn::save_gnn(path, m);
  const auto back = gn::load_gnn(path);
  EXPECT_EQ(back.config(), m.config());
  for (const auto& [name, t] : m.params().items()) {
    auto a = t.data();
    auto b = back.params().get(name).data();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << name;
  }
  EXPECT_THROW(gn::load_gnn(path + ".missing"), cgfuse::IoError);
  std::filesystem::remove(path);
  std::filesystem::remove(path + ".cfg");
}
