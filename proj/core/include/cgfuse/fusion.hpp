#pragma once

// Adds lambda-scaled GNN node vectors to transformer hidden states at the
// positions of each terminal's subtokens.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cgfuse/code_graph.hpp"
#include "cgfuse/gnn.hpp"
#include "cgfuse/kv_text.hpp"
#include "cgfuse/plm.hpp"
#include "cgfuse/tokenizer.hpp"

namespace cgfuse::fusion {

enum class Mode : std::uint8_t { GoldFullGraph, CausalPrefix };

std::string_view to_string(Mode m);
/// "gold" / "gold_full_graph" or "causal" / "causal_prefix"; UsageError otherwise.
Mode mode_from_string(std::string_view s);

struct FusionPlan {
  float lambda = 1.0f;
  /// Empty means the output of the last decoder layer.
  std::vector<plm::LayerSite> sites;
  Mode mode = Mode::GoldFullGraph;
  std::size_t warmup_epochs = 2;
  /// Generation: steps between graph rebuilds.
  std::size_t rebuild_stride = 1;

  /// Throws UsageError for negative lambda or a zero stride.
  void validate() const;
  /// "key = value" lines; sites as e.g. "decoder:3,decoder:1".
  std::string to_text() const;
  static FusionPlan from_section(const kv::Section& s);
};

/// A graph ready for message passing plus where its terminals sit in a
/// sequence.
struct PreparedGraph {
  gnn::Adjacency adj;
  gnn::InitPlan init;
  /// Per terminal ordinal: graph node id and its half-open position range.
  std::vector<graph::TerminalSpan> spans;
};

PreparedGraph prepare_graph(const graph::CodeGraph& g, const graph::TerminalAlignment& alignment,
                            const tokenizer::Vocab& vocab);

/// Terminal vectors scattered onto `rows` positions ([rows, d]); rows without
/// an aligned terminal stay zero.
tensor::Tensor graph_states(const gnn::GnnModel& expert, const PreparedGraph& g, std::size_t rows,
                            const tensor::Tensor& plm_embeddings);

/// h_theta + lambda * graph_states(...). Returns h_theta itself when lambda is
/// zero or nothing is aligned. Throws AlignmentError when a span reaches past
/// h_theta's rows.
tensor::Tensor fuse_states(const tensor::Tensor& h_theta, const PreparedGraph& g, float lambda,
                           const gnn::GnnModel& expert, const tensor::Tensor& plm_embeddings);

/// Convenience: prepares `g` first.
tensor::Tensor fuse_states(const tensor::Tensor& h_theta, const graph::CodeGraph& g,
                           const graph::TerminalAlignment& alignment, float lambda, const gnn::GnnModel& expert,
                           const tensor::Tensor& plm_embeddings, const tokenizer::Vocab& vocab);

/// Transformer plus one GNN expert per fusion site. Parameter names in
/// checkpoints: "plm.<name>" and "gnn<i>.<name>" for site i.
class FusedModel {
 public:
  /// Throws UsageError when the expert count differs from the site count or a
  /// hidden width disagrees.
  FusedModel(plm::Plm plm, std::vector<gnn::GnnModel> experts, FusionPlan plan);

  plm::Plm& plm() noexcept { return plm_; }
  const plm::Plm& plm() const noexcept { return plm_; }
  gnn::GnnModel& expert(std::size_t i) { return experts_.at(i); }
  const gnn::GnnModel& expert(std::size_t i) const { return experts_.at(i); }
  std::size_t expert_count() const noexcept { return experts_.size(); }
  const FusionPlan& plan() const noexcept { return plan_; }
  FusionPlan& plan() noexcept { return plan_; }
  const std::vector<plm::LayerSite>& sites() const noexcept { return sites_; }

  std::vector<std::pair<std::string, tensor::Tensor>> named_tensors() const;
  /// Tensors at `path`, configuration ([plm], [gnn], [fusion]) at path + ".cfg".
  void save(const std::string& path) const;
  /// Reverse of save(). FormatError when a tensor is missing or misshaped.
  static FusedModel load(const std::string& path);
  /// Copies values of every tensor this model has from `tensors`.
  void load_values(const std::vector<std::pair<std::string, tensor::Tensor>>& tensors);

 private:
  plm::Plm plm_;
  std::vector<gnn::GnnModel> experts_;
  FusionPlan plan_;
  std::vector<plm::LayerSite> sites_;
};

/// One expert per site, freshly initialised from `rng`.
FusedModel make_fused(plm::Plm plm, const gnn::GnnConfig& gnn_cfg, const FusionPlan& plan, tensor::CounterRng& rng);

/// A training / evaluation pair with its pre-extracted target-code graph.
struct FusedExample {
  plm::Example text;
  /// Code-token index per target subtoken.
  std::vector<std::optional<std::size_t>> provenance;
  std::optional<graph::CodeGraph> graph;
};

/// Encodes nl and code, builds the strict graph of `code`.
FusedExample make_example(std::string_view nl, std::string_view code, const tokenizer::Vocab& vocab);

/// Per example: the full graph aligned to decoder positions and, for
/// CausalPrefix, one context subgraph per terminal j (the first j + 1
/// terminals) whose only placement is terminal j at its last position.
struct PreparedExample {
  PreparedGraph full;
  std::vector<PreparedGraph> prefixes;
};

/// Decoder position p holds [BOS] + target at p, so target subtoken i sits
/// at p = i + 1. Throws MissingGraph when the example has no graph and
/// AlignmentError when provenance and graph disagree.
PreparedExample prepare_example(const FusedExample& ex, std::size_t index, Mode mode, const tokenizer::Vocab& vocab);

/// Hooks that fuse every site for a row-stacked batch; prepared[b] belongs
/// to decoder sequence b.
plm::HookSet fusion_hooks(const FusedModel& model, std::vector<const PreparedExample*> prepared, Mode mode);

struct FusedTrainReport {
  std::vector<double> warmup_loss;
  std::vector<double> joint_loss;
};

/// Warmup epochs (labelled "warmup.<e>") update only the experts with the
/// transformer frozen; then `opt.epochs` joint epochs labelled "1".."E" use
/// the same example order and dropout streams as plm::train_plm, and the
/// transformer and experts keep separate Adam states.
FusedTrainReport fused_train(FusedModel& model, std::span<const FusedExample> examples, const plm::TrainOptions& opt,
                             std::uint64_t seed, const tokenizer::Vocab& vocab);

/// Teacher-forced logits of each example with the plan's mode.
tensor::Tensor fused_logits(const FusedModel& model, const FusedExample& ex, const tokenizer::Vocab& vocab);

/// Argmax of teacher-forced logits per position, cut at the first EOS.
std::vector<std::vector<tokenizer::TokenId>> teacher_forced_predict(const FusedModel& model,
                                                                   std::span<const FusedExample> examples,
                                                                   const tokenizer::Vocab& vocab,
                                                                   std::size_t batch_size = 16);

/// Free decoding: before each step whose index is a multiple of the rebuild
/// stride, each hypothesis prefix is detokenized, tolerant-parsed and
/// graph-built; between rebuilds the last graph is reused. Throws UsageError
/// unless the plan's mode is CausalPrefix.
std::vector<tokenizer::TokenId> fused_generate(const FusedModel& model, std::span<const tokenizer::TokenId> nl,
                                               const tokenizer::Vocab& vocab, const plm::DecodeOptions& opt);

}  // namespace cgfuse::fusion
