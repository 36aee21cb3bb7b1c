#pragma once

// Small pre-LN encoder-decoder transformer with learned positions and a tied
// output projection. Hidden states can be intercepted after every layer.

#include <compare>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cgfuse/kv_text.hpp"
#include "cgfuse/tensor.hpp"
#include "cgfuse/tokenizer.hpp"

namespace cgfuse::plm {

using tokenizer::TokenId;

struct PlmConfig {
  std::size_t vocab_size = 0;
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 4;
  std::size_t hidden_dim = 128;
  std::size_t heads = 4;
  std::size_t ffn_dim = 512;
  std::size_t max_len = 256;
  float dropout = 0.1f;

  /// Throws UsageError (e.g. hidden_dim not divisible by heads).
  void validate() const;
  /// "key = value" lines.
  std::string to_text() const;
  /// Accepts the output of to_text() (or the body of a [plm] section); unknown
  /// keys or bad values throw FormatError.
  static PlmConfig from_text(std::string_view text);
  static PlmConfig from_section(const kv::Section& s);
  bool operator==(const PlmConfig&) const = default;
};

struct LayerSite {
  enum class Part : std::uint8_t { Encoder, Decoder };
  Part part;
  std::size_t layer;

  auto operator<=>(const LayerSite&) const = default;
};

inline LayerSite encoder_layer_out(std::size_t i) { return {LayerSite::Part::Encoder, i}; }
inline LayerSite decoder_layer_out(std::size_t i) { return {LayerSite::Part::Decoder, i}; }
std::string to_string(const LayerSite& s);

/// Row-stacked batch: sequence b owns rows [offsets[b], offsets[b+1]) and
/// row offsets[b] + j holds position j.
struct SequenceLayout {
  std::vector<std::size_t> offsets{0};

  static SequenceLayout of(std::span<const std::vector<TokenId>> seqs);
  std::size_t batch() const noexcept { return offsets.size() - 1; }
  std::size_t length(std::size_t b) const { return offsets[b + 1] - offsets[b]; }
  std::size_t rows() const noexcept { return offsets.back(); }
};

/// Receives the stacked states of a site and returns same-shaped replacements.
using LayerHook = std::function<tensor::Tensor(const tensor::Tensor& states, const SequenceLayout& layout)>;

class HookSet {
 public:
  /// Throws UsageError when the site already has a hook.
  void set(const LayerSite& site, LayerHook hook);
  const LayerHook* find(const LayerSite& site) const;
  bool empty() const noexcept { return hooks_.empty(); }

 private:
  std::map<LayerSite, LayerHook> hooks_;
};

/// Dropout is active only when `train` is set and an rng is supplied.
struct RunMode {
  bool train = false;
  tensor::CounterRng* rng = nullptr;
};

struct EncoderOutput {
  /// enc_layers + 1 entries; [0] is embeddings + positions, [i+1] the output
  /// of layer i after its hook.
  std::vector<tensor::Tensor> layers;
  /// Final layer-normed states the decoder attends to.
  tensor::Tensor memory;
  SequenceLayout layout;
};

class Plm {
 public:
  Plm(const PlmConfig& cfg, tensor::CounterRng& rng);

  const PlmConfig& config() const noexcept { return cfg_; }
  tensor::ParamStore& params() noexcept { return params_; }
  const tensor::ParamStore& params() const noexcept { return params_; }
  /// Shared input / output token table [vocab, hidden].
  const tensor::Tensor& embeddings() const { return params_.get("tok_emb"); }

  /// Throws TooLong when a sequence exceeds max_len.
  EncoderOutput encode(std::span<const std::vector<TokenId>> sources, const HookSet& hooks = {},
                       RunMode mode = {}) const;
  /// Teacher-forced logits [sum of input lengths, vocab] for decoder inputs
  /// (BOS-prefixed), sequence b attending to source b of `enc`.
  tensor::Tensor decode_train(const EncoderOutput& enc, std::span<const std::vector<TokenId>> dec_inputs,
                              const HookSet& hooks = {}, RunMode mode = {}) const;

 private:
  tensor::Tensor embed(std::span<const std::vector<TokenId>> seqs, const SequenceLayout& layout, RunMode mode) const;

  PlmConfig cfg_;
  tensor::ParamStore params_;
};

// ---- teacher forcing ------------------------------------------------------

struct Example {
  std::vector<TokenId> source;
  std::vector<TokenId> target;  // code subtokens, no BOS / EOS
};

/// [BOS] + target.
std::vector<TokenId> decoder_input(std::span<const TokenId> target);

struct Batch {
  std::vector<std::size_t> ids;  // example indices
  std::vector<std::vector<TokenId>> sources;
  std::vector<std::vector<TokenId>> inputs;  // decoder inputs
  std::vector<std::int64_t> targets;         // stacked: target + [EOS] per example
};

Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> ids);

/// Mean token cross-entropy of the batch.
tensor::Tensor batch_loss(const Plm& model, const Batch& batch, const HookSet& hooks = {}, RunMode mode = {});

// ---- training -------------------------------------------------------------

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  float lr = 1e-3f;
  float clip = 1.0f;  // 0 disables clipping
};

/// Parameters sharing one Adam state.
struct TrainGroup {
  std::vector<tensor::Tensor> params;
  tensor::AdamState adam;
};

using HookFactory = std::function<HookSet(const Batch&)>;

/// Argmax of the teacher-forced logits at every decoder position, cut at the
/// first EOS; batches are consecutive runs of `batch_size` examples.
std::vector<std::vector<TokenId>> teacher_forced_argmax(const Plm& model, std::span<const Example> examples,
                                                        std::size_t batch_size = 16, const HookFactory& hooks = {});

/// One pass over `examples` in an order derived from (seed, label). Clears
/// gradients of the model and all groups before each step and steps every
/// group. Returns the mean batch loss.
double run_epoch(Plm& model, std::span<const Example> examples, const TrainOptions& opt, std::uint64_t seed,
                 const std::string& label, std::span<TrainGroup* const> groups, const HookFactory& hooks = {});

/// Plain training of every PLM parameter; epochs labelled "1", "2", ...
std::vector<double> train_plm(Plm& model, std::span<const Example> examples, const TrainOptions& opt,
                              std::uint64_t seed);

// ---- generation -----------------------------------------------------------

struct DecodeOptions {
  enum class Strategy : std::uint8_t { Greedy, Beam };
  Strategy strategy = Strategy::Greedy;
  std::size_t beam_size = 4;
  std::size_t max_steps = 128;
};

/// Called before each step with the current hypothesis prefixes (no BOS);
/// the returned hooks apply to that step's decoder pass, whose sequence b is
/// [BOS] + prefixes[b].
using StepHook = std::function<HookSet(std::span<const std::vector<TokenId>> prefixes)>;

/// Stops at EOS (not included) or after max_steps tokens. Beam search ranks
/// finished hypotheses by total log-probability. Sources longer than max_len
/// are truncated.
std::vector<TokenId> generate(const Plm& model, std::span<const TokenId> source, const DecodeOptions& opt,
                              const StepHook& step_hook = {});

/// Tensors under "plm." plus the config text at path + ".cfg".
void save_plm(const std::string& path, const Plm& model);
Plm load_plm(const std::string& path);

}  // namespace cgfuse::plm
