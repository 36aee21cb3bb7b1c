#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "cgfuse/code_graph.hpp"
#include "cgfuse/kv_text.hpp"
#include "cgfuse/tensor.hpp"
#include "cgfuse/tokenizer.hpp"

namespace cgfuse::gnn {

enum class Arch { RGCN, SAGE, GIN };

std::string_view to_string(Arch a);
/// Accepts "rgcn", "sage", "gin" (any case); throws UsageError otherwise.
Arch arch_from_string(std::string_view s);

struct GnnConfig {
  Arch arch = Arch::GIN;
  std::size_t num_layers = 1;
  std::size_t hidden_dim = 128;
  /// SAGE only: per-relation means summed instead of one mean over all
  /// neighbours. RGCN is always relational; GIN never is.
  bool use_relational = false;
  float epsilon = 0.0f;  // GIN only

  /// Throws UsageError for out-of-range values.
  void validate() const;
  /// "key = value" lines: arch, layers, hidden_dim, relational, epsilon.
  std::string to_text() const;
  /// FormatError on unknown keys or bad values, UsageError on a bad arch.
  static GnnConfig from_section(const kv::Section& s);
  bool operator==(const GnnConfig&) const = default;
};

/// Stored relations plus their inverses.
inline constexpr std::size_t kEffectiveRelations = 2 * graph::kRelationCount;

/// Message lists per effective relation. Relation r < 3 carries messages
/// along stored edges (src -> dst); r + 3 carries them backwards.
struct Adjacency {
  std::size_t nodes = 0;
  std::array<std::vector<std::size_t>, kEffectiveRelations> from, to;
  /// 1/|N_r(v)|, or 1 when v has no r-neighbours.
  std::array<std::vector<float>, kEffectiveRelations> inv_degree;
  /// Same over the union of all relations.
  std::vector<float> inv_degree_all;

  static Adjacency of(const graph::CodeGraph& g);
  /// Disjoint union, offsetting node ids in argument order.
  static Adjacency merge(std::span<const Adjacency> parts);
};

/// Which embedding rows build each node's initial vector.
struct InitPlan {
  std::size_t nodes = 0;
  std::vector<std::size_t> syntax_nodes;
  std::vector<std::size_t> syntax_kinds;
  std::vector<tokenizer::TokenId> subtokens;  // for all terminals, concatenated
  std::vector<std::size_t> subtoken_owner;    // node id per subtoken
  std::vector<float> subtoken_weight;         // 1 / subtokens of the owner

  /// Terminals are encoded standalone (no surrounding whitespace).
  static InitPlan of(const graph::CodeGraph& g, const tokenizer::Vocab& vocab);
  static InitPlan merge(std::span<const InitPlan> parts);
};

/// Terminal rows: mean of the PLM embeddings of the terminal's subtokens.
/// Syntax rows: the kind's row of `syntax_table`.
tensor::Tensor node_init(const InitPlan& plan, const tensor::Tensor& plm_embeddings,
                         const tensor::Tensor& syntax_table);
tensor::Tensor node_init(const graph::CodeGraph& g, const tensor::Tensor& plm_embeddings,
                         const tensor::Tensor& syntax_table, const tokenizer::Vocab& vocab);

/// Classification target per node: the node's SyntaxKind index (leaf kinds
/// stand for the lexical classes of terminals).
std::vector<std::size_t> node_labels(const graph::CodeGraph& g);
inline constexpr std::size_t kLabelCount = frontend::kSyntaxKindCount;

/// Parameters of one expert. Names: "syntax" [kinds, d], "mask" [1, d],
/// "l{i}.w" / "l{i}.b" (RGCN: w is [7d, d] = self block then one block per
/// effective relation; SAGE: [2d, d]; GIN: "l{i}.w1", "l{i}.b1", "l{i}.w2",
/// "l{i}.b2"), "head.w" [d, labels], "head.b".
class GnnModel {
 public:
  GnnModel(const GnnConfig& cfg, tensor::CounterRng& rng);

  const GnnConfig& config() const noexcept { return cfg_; }
  tensor::ParamStore& params() noexcept { return params_; }
  const tensor::ParamStore& params() const noexcept { return params_; }

  /// Per-node vectors after cfg.num_layers message-passing layers.
  tensor::Tensor forward(const Adjacency& adj, const tensor::Tensor& init) const;
  /// Node-kind logits from final node vectors.
  tensor::Tensor classify(const tensor::Tensor& h) const;

 private:
  GnnConfig cfg_;
  tensor::ParamStore params_;
};

/// Convenience: forward from a graph.
tensor::Tensor gnn_forward(const graph::CodeGraph& g, const tensor::Tensor& init, const GnnModel& model);

/// Picks round(ratio * n) nodes (at least one) such that no two picked nodes
/// are adjacent, scanning nodes in random order; stops early when no
/// non-adjacent node is left.
std::vector<std::size_t> sample_mask(const Adjacency& adj, double ratio, tensor::CounterRng& rng);

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double masked_accuracy = 0.0;  // held-out split
};

struct PretrainReport {
  std::vector<EpochStats> epochs;
  std::size_t train_graphs = 0;
  std::size_t heldout_graphs = 0;
  std::size_t heldout_masked_nodes = 0;

  double final_accuracy() const { return epochs.empty() ? 0.0 : epochs.back().masked_accuracy; }
  /// One line per epoch: "epoch E loss L masked_accuracy A".
  std::string to_text() const;
};

struct PretrainOptions {
  double mask_ratio = 0.15;
  std::size_t epochs = 3;
  std::size_t batch_graphs = 16;
  float lr = 3e-3f;
  double heldout_fraction = 0.1;
};

/// Masked node-kind pre-training. Terminal inits come from `plm_embeddings`
/// (kept frozen). Throws EmptyCorpus with no graphs and UsageError when the
/// mask ratio is outside (0, 1).
PretrainReport pretrain_nodes(GnnModel& model, std::span<const graph::CodeGraph> graphs,
                              const tensor::Tensor& plm_embeddings, const tokenizer::Vocab& vocab,
                              const PretrainOptions& opt, std::uint64_t seed);

/// Tensors under "gnn." plus the config text at path + ".cfg".
void save_gnn(const std::string& path, const GnnModel& model);
GnnModel load_gnn(const std::string& path);

}  // namespace cgfuse::gnn
