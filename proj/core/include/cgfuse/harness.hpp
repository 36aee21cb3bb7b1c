#pragma once

// Corpus I/O, the synthetic corpus, experiment configuration and the
// baseline-versus-fused experiment driver.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cgfuse/fusion.hpp"
#include "cgfuse/gnn.hpp"
#include "cgfuse/metrics.hpp"
#include "cgfuse/plm.hpp"
#include "cgfuse/tokenizer.hpp"

namespace cgfuse::harness {

struct Example {
  std::string nl;
  std::string code;

  bool operator==(const Example&) const = default;
};

/// One JSON object per line with string fields "nl" and "code"; other
/// fields are ignored and blank lines skipped. IoError when unreadable,
/// FormatError naming the line otherwise.
std::vector<Example> load_corpus(const std::string& path);
void save_corpus(const std::string& path, std::span<const Example> examples);

/// Template-generated method/docstring pairs; every snippet strict-parses.
std::vector<Example> generate_synthetic(std::size_t n, std::uint64_t seed);

struct VariantSpec {
  std::string name;
  gnn::GnnConfig gnn;
  fusion::FusionPlan plan;
};

/// Sections: [experiment], [plm], [train], [pretrain], [decode] and one
/// [variant.<name>] per fused variant holding GNN keys (arch, layers,
/// hidden_dim, relational, epsilon) and fusion keys (lambda, mode, sites,
/// warmup_epochs, rebuild_stride). The baseline is implicit.
struct ExperimentSpec {
  std::string train_path;  // empty: synthetic corpus
  std::string test_path;
  std::size_t synthetic_train = 2000;
  std::size_t synthetic_test = 200;
  std::size_t vocab_size = 1000;
  plm::PlmConfig plm;  // vocab_size is taken from the trained tokenizer
  plm::TrainOptions train;
  gnn::PretrainOptions pretrain;
  plm::DecodeOptions decode;
  bool free_decoding = true;
  std::size_t free_decode_limit = 0;  // 0: the whole test split
  bool parallel = false;
  std::uint64_t seed = 1;
  std::string out_dir;  // empty: nothing written
  std::vector<VariantSpec> variants;

  /// FormatError / UsageError on bad input.
  static ExperimentSpec from_text(std::string_view text);
  static ExperimentSpec load(const std::string& path);
  std::string to_text() const;
};

/// Tokenized, graph-annotated splits ready for training.
struct PreparedData {
  tokenizer::Vocab vocab;
  std::vector<Example> train_raw;
  std::vector<Example> test_raw;
  std::vector<fusion::FusedExample> train;
  std::vector<fusion::FusedExample> test;
  std::size_t skipped_unparsable = 0;
  std::size_t skipped_too_long = 0;
};

/// Keeps examples whose code strict-parses and whose sequences fit max_len.
/// EmptyCorpus when no training example survives.
PreparedData prepare_data(std::vector<Example> train, std::vector<Example> test, const tokenizer::Vocab& vocab,
                          std::size_t max_len);

/// Raw train and test splits: the two corpus files, or one synthetic corpus
/// cut in two.
std::pair<std::vector<Example>, std::vector<Example>> load_splits(const ExperimentSpec& spec);

/// Tokenizer trained on the NL and code of the training split.
tokenizer::Vocab train_tokenizer(std::span<const Example> train, std::size_t vocab_size);

/// Loads or synthesizes the corpus and trains the tokenizer.
PreparedData load_data(const ExperimentSpec& spec);
/// Same splits with an existing vocabulary.
PreparedData load_data(const ExperimentSpec& spec, const tokenizer::Vocab& vocab, std::size_t max_len);

struct VariantResult {
  std::string name;
  bool baseline = true;
  gnn::GnnConfig gnn;
  float lambda = 0.0f;
  double gnn_accuracy = 0.0;  // held-out masked node-kind accuracy
  std::vector<double> train_loss;
  metrics::EvalReport teacher_forced;
  std::optional<metrics::EvalReport> free;
};

struct ExperimentResult {
  std::size_t train_examples = 0;
  std::size_t test_examples = 0;
  std::size_t skipped_unparsable = 0;
  std::size_t skipped_too_long = 0;
  std::vector<VariantResult> rows;  // baseline first, then variants in order

  /// Aligned plain-text table, one row per variant. Fused-only columns are
  /// left out when there is no fused variant.
  std::string table() const;
  /// "key = value" lines per row, for machines.
  std::string to_text() const;
};

/// Baseline plus every variant on one data split. With out_dir set, writes
/// table.txt, results.txt, vocab.txt and a checkpoint per row. Errors carry
/// the failing variant's name and keep their category.
ExperimentResult run_experiment(const ExperimentSpec& spec);

/// Baseline transformer trained on `data` with the experiment seed.
plm::Plm train_baseline(const ExperimentSpec& spec, const PreparedData& data, std::vector<double>* losses = nullptr);

/// Expert initialised and pre-trained on the training graphs; `accuracy`
/// receives the final held-out accuracy.
gnn::GnnModel pretrain_expert(const ExperimentSpec& spec, const gnn::GnnConfig& cfg, const PreparedData& data,
                              const plm::Plm& init_plm, double* accuracy = nullptr);

/// Pre-trains the expert, then warmup and joint training.
fusion::FusedModel train_fused(const ExperimentSpec& spec, const VariantSpec& variant, const PreparedData& data,
                               double* gnn_accuracy = nullptr, std::vector<double>* losses = nullptr);

/// Teacher-forced evaluation of a plain transformer.
metrics::EvalReport evaluate_teacher_forced(const plm::Plm& model, const PreparedData& data);
/// Teacher-forced evaluation of a fused model with full gold graphs.
metrics::EvalReport evaluate_teacher_forced(const fusion::FusedModel& model, const PreparedData& data);
/// Free decoding on the first `limit` test examples (0: all).
metrics::EvalReport evaluate_free(const plm::Plm& model, const PreparedData& data, const plm::DecodeOptions& opt,
                                  std::size_t limit = 0);
/// Free decoding with causal-prefix graphs.
metrics::EvalReport evaluate_free(const fusion::FusedModel& model, const PreparedData& data,
                                  const plm::DecodeOptions& opt, std::size_t limit = 0);

}  // namespace cgfuse::harness
