#include <benchmark/benchmark.h>

#include "cgfuse/code_graph.hpp"
#include "cgfuse/fusion.hpp"
#include "cgfuse/gnn.hpp"
#include "cgfuse/harness.hpp"
#include "cgfuse/metrics.hpp"
#include "cgfuse/plm.hpp"
#include "cgfuse/tensor.hpp"
#include "cgfuse/tokenizer.hpp"

namespace ts = cgfuse::tensor;
namespace hs = cgfuse::harness;
using namespace cgfuse;

namespace {

const std::vector<hs::Example>& corpus() {
  static const auto c = hs::generate_synthetic(256, 3);
  return c;
}

const tokenizer::Vocab& vocab() {
  static const auto v = [] {
    std::vector<std::string> texts;
    for (const auto& e : corpus()) {
      texts.push_back(e.nl);
      texts.push_back(e.code);
    }
    return tokenizer::train_vocab(texts, 600);
  }();
  return v;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  ts::CounterRng rng(1);
  auto a = ts::randn_parameter({n, n}, 1.0f, rng);
  auto b = ts::randn_parameter({n, n}, 1.0f, rng);
  for (auto _ : state) {
    benchmark::DoNotOptimize(ts::matmul(a, b).data().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_BuildGraph(benchmark::State& state) {
  const auto& c = corpus();
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(graph::build_from_source(c[i++ % c.size()].code, false));
}
BENCHMARK(BM_BuildGraph);

void BM_Encode(benchmark::State& state) {
  const auto& c = corpus();
  const auto& v = vocab();
  std::size_t i = 0;
  for (auto _ : state) benchmark::DoNotOptimize(tokenizer::encode(c[i++ % c.size()].code, v, true));
}
BENCHMARK(BM_Encode);

void BM_GnnForward(benchmark::State& state) {
  gnn::GnnConfig cfg;
  cfg.arch = static_cast<gnn::Arch>(state.range(0));
  cfg.num_layers = static_cast<std::size_t>(state.range(1));
  cfg.hidden_dim = 64;
  ts::CounterRng rng(2);
  gnn::GnnModel model(cfg, rng);
  auto emb = ts::randn_parameter({vocab().size(), 64}, 0.1f, rng);
  const auto g = graph::build_from_source(corpus()[5].code, false);
  const auto adj = gnn::Adjacency::of(g);
  const auto init = gnn::InitPlan::of(g, vocab());
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.forward(adj, gnn::node_init(init, emb, model.params().get("syntax"))));
  }
  state.SetLabel(std::string(gnn::to_string(cfg.arch)) + " x" + std::to_string(cfg.num_layers));
}
BENCHMARK(BM_GnnForward)->ArgsProduct({{0, 1, 2}, {1, 3}});

void BM_TrainStep(benchmark::State& state) {
  const bool fused = state.range(0) != 0;
  plm::PlmConfig pc;
  pc.vocab_size = vocab().size();
  pc.hidden_dim = 64;
  pc.heads = 4;
  pc.ffn_dim = 128;
  pc.enc_layers = 2;
  pc.dec_layers = 2;
  pc.max_len = 128;
  pc.dropout = 0.0f;
  ts::CounterRng rng(4);
  gnn::GnnConfig gc;
  gc.hidden_dim = 64;
  fusion::FusionPlan plan;
  plan.lambda = fused ? 1.0f : 0.0f;
  plan.warmup_epochs = 0;
  auto model = fusion::make_fused(plm::Plm(pc, rng), gc, plan, rng);
  std::vector<fusion::FusedExample> ex;
  for (std::size_t i = 0; i < 16; ++i) ex.push_back(fusion::make_example(corpus()[i].nl, corpus()[i].code, vocab()));
  plm::TrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 16;
  for (auto _ : state) benchmark::DoNotOptimize(fusion::fused_train(model, ex, opt, 1, vocab()));
  state.SetLabel(fused ? "fused gin x1" : "lambda 0");
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_CodeBleu(benchmark::State& state) {
  std::vector<std::string> hyp, ref;
  for (std::size_t i = 0; i < 64; ++i) {
    ref.push_back(corpus()[i].code);
    hyp.push_back(corpus()[i + 64].code);
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::evaluate(hyp, ref));
}
BENCHMARK(BM_CodeBleu)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
