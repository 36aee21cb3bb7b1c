#include "cgfuse/harness.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "cgfuse/code_graph.hpp"
#include "cgfuse/errors.hpp"

namespace hs = cgfuse::harness;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& content) {
  auto p = fs::temp_directory_path() / name;
  std::ofstream(p) << content;
  return p;
}

const char* kTinyConfig = R"(
[experiment]
seed = 5
synthetic_train = 48
synthetic_test = 6
vocab_size = 300
free_decode_limit = 3

[plm]
enc_layers = 1
dec_layers = 1
hidden_dim = 16
heads = 2
ffn_dim = 32
max_len = 160
dropout = 0.0

[train]
epochs = 1
batch_size = 8
lr = 0.003

[pretrain]
epochs = 1

[decode]
max_steps = 12

[variant.gin1]
arch = gin
layers = 1
lambda = 1
warmup_epochs = 1

[variant.zero]
arch = gin
layers = 1
lambda = 0
warmup_epochs = 1
)";

}  // namespace

TEST(Corpus, LoadsRecordsInOrder) {
  auto empty = temp_file("cgfuse_empty.jsonl", "");
  EXPECT_TRUE(hs::load_corpus(empty.string()).empty());
  auto one = temp_file("cgfuse_one.jsonl",
                       "{\"nl\": \"compute the total size\", \"code\": \"int calcTotalSize() { _total = "
                       "extractList().size(); return _total; }\", \"varNames\": [\"_total\"]}\n\n");
  auto ex = hs::load_corpus(one.string());
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(ex[0].nl, "compute the total size");
  EXPECT_EQ(ex[0].code, "int calcTotalSize() { _total = extractList().size(); return _total; }");
  fs::remove(empty);
  fs::remove(one);
}

TEST(Corpus, ReportsBadLinesAndMissingFiles) {
  auto bad = temp_file("cgfuse_bad.jsonl", "{\"nl\": \"a\", \"code\": \"b\"}\n{\"nl\": \"a\"}\n");
  try {
    hs::load_corpus(bad.string());
    FAIL() << "expected FormatError";
  } catch (const cgfuse::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  auto junk = temp_file("cgfuse_junk.jsonl", "not json\n");
  EXPECT_THROW(hs::load_corpus(junk.string()), cgfuse::FormatError);
  EXPECT_THROW(hs::load_corpus("/nonexistent/cgfuse.jsonl"), cgfuse::IoError);
  fs::remove(bad);
  fs::remove(junk);
}

TEST(Corpus, SaveLoadRoundTrip) {
  auto ex = hs::generate_synthetic(20, 3);
  ex.push_back({"quote \" and\nnewline", "int f() { return 1; }"});
  auto p = fs::temp_directory_path() / "cgfuse_roundtrip.jsonl";
  hs::save_corpus(p.string(), ex);
  EXPECT_EQ(hs::load_corpus(p.string()), ex);
  fs::remove(p);
}

TEST(Synthetic, DeterministicParsableAndDataflowRich) {
  auto a = hs::generate_synthetic(1000, 11);
  EXPECT_EQ(a, hs::generate_synthetic(1000, 11));
  EXPECT_NE(a, hs::generate_synthetic(1000, 12));
  std::size_t with_edges = 0;
  for (const auto& e : a) {
    EXPECT_FALSE(e.nl.empty());
    cgfuse::graph::CodeGraph g;
    ASSERT_NO_THROW(g = cgfuse::graph::build_from_source(e.code, false)) << e.code;
    with_edges += g.count(cgfuse::graph::Relation::CO) + g.count(cgfuse::graph::Relation::CA) > 0;
  }
  EXPECT_GE(with_edges, 500u);
}

TEST(ExperimentSpec, ParsesAndRoundTrips) {
  auto spec = hs::ExperimentSpec::from_text(kTinyConfig);
  EXPECT_EQ(spec.seed, 5u);
  EXPECT_EQ(spec.plm.hidden_dim, 16u);
  ASSERT_EQ(spec.variants.size(), 2u);
  EXPECT_EQ(spec.variants[0].name, "gin1");
  EXPECT_EQ(spec.variants[0].gnn.hidden_dim, 16u);
  EXPECT_EQ(spec.variants[1].plan.lambda, 0.0f);
  auto back = hs::ExperimentSpec::from_text(spec.to_text());
  EXPECT_EQ(back.to_text(), spec.to_text());
  EXPECT_THROW(hs::ExperimentSpec::from_text("[bogus]\nx = 1\n"), cgfuse::FormatError);
  EXPECT_THROW(hs::ExperimentSpec::from_text("[variant.a]\narch = gin\n"), cgfuse::UsageError);
  EXPECT_THROW(hs::ExperimentSpec::from_text("[variant.a]\nlambda = 1\ncolour = red\n"), cgfuse::FormatError);
  EXPECT_THROW(hs::ExperimentSpec::from_text("[experiment]\ntrain = a.jsonl\n"), cgfuse::UsageError);
}

TEST(Experiment, DeterministicAndZeroLambdaMatchesBaseline) {
  auto spec = hs::ExperimentSpec::from_text(kTinyConfig);
  auto a = hs::run_experiment(spec);
  ASSERT_EQ(a.rows.size(), 3u);
  EXPECT_EQ(a.rows[0].name, "baseline");
  EXPECT_EQ(a.train_examples, 48u);
  const auto& base = a.rows[0];
  const auto& zero = a.rows[2];
  EXPECT_EQ(zero.train_loss, base.train_loss);
  EXPECT_EQ(zero.teacher_forced.to_text(), base.teacher_forced.to_text());
  ASSERT_TRUE(zero.free && base.free);
  EXPECT_EQ(zero.free->to_text(), base.free->to_text());

  auto b = hs::run_experiment(spec);
  EXPECT_EQ(a.table(), b.table());
  EXPECT_EQ(a.to_text(), b.to_text());
  spec.parallel = true;
  EXPECT_EQ(hs::run_experiment(spec).to_text(), a.to_text());
  EXPECT_NE(a.table().find("Arch"), std::string::npos);
}

TEST(Experiment, BaselineOnlyTableAndOutputs) {
  auto spec = hs::ExperimentSpec::from_text(kTinyConfig);
  spec.variants.clear();
  spec.out_dir = (fs::temp_directory_path() / "cgfuse_exp_test").string();
  fs::remove_all(spec.out_dir);
  auto r = hs::run_experiment(spec);
  ASSERT_EQ(r.rows.size(), 1u);
  auto table = r.table();
  EXPECT_EQ(table.find("Arch"), std::string::npos);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 3);
  for (const char* f : {"table.txt", "results.txt", "vocab.txt", "baseline.ckpt", "baseline.ckpt.cfg"})
    EXPECT_TRUE(fs::exists(fs::path(spec.out_dir) / f)) << f;
  fs::remove_all(spec.out_dir);
}

TEST(Data, SplitsAndReusedVocabulary) {
  auto spec = hs::ExperimentSpec::from_text(kTinyConfig);
  auto [train, test] = hs::load_splits(spec);
  ASSERT_EQ(train.size(), 48u);
  ASSERT_EQ(test.size(), 6u);
  auto all = hs::generate_synthetic(54, spec.seed);
  EXPECT_EQ(train.front(), all.front());
  EXPECT_EQ(test.back(), all.back());
  auto data = hs::load_data(spec);
  auto again = hs::load_data(spec, data.vocab, spec.plm.max_len);
  EXPECT_EQ(again.test_raw, data.test_raw);
  EXPECT_EQ(again.train.size(), data.train.size());
  EXPECT_THROW(hs::train_tokenizer({}, 300), cgfuse::EmptyCorpus);
}
