#include "cgfuse/plm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cgfuse/errors.hpp"
#include "cgfuse/kv_text.hpp"

namespace cgfuse::plm {

namespace ts = cgfuse::tensor;
using ts::Tensor;

// ---- config -------------------------------------------------------------------

void PlmConfig::validate() const {
  if (vocab_size < tokenizer::kReserved) throw UsageError("vocab_size must cover the reserved ids");
  if (hidden_dim == 0 || heads == 0 || hidden_dim % heads != 0)
    throw UsageError("hidden_dim " + std::to_string(hidden_dim) + " not divisible by heads " + std::to_string(heads));
  if (ffn_dim == 0) throw UsageError("ffn_dim must be positive");
  if (max_len < 2) throw UsageError("max_len must be at least 2");
  if (!(dropout >= 0.0f && dropout < 1.0f)) throw UsageError("dropout must lie in [0, 1)");
}

std::string PlmConfig::to_text() const {
  std::ostringstream out;
  out << "vocab_size = " << vocab_size << '\n'
      << "enc_layers = " << enc_layers << '\n'
      << "dec_layers = " << dec_layers << '\n'
      << "hidden_dim = " << hidden_dim << '\n'
      << "heads = " << heads << '\n'
      << "ffn_dim = " << ffn_dim << '\n'
      << "max_len = " << max_len << '\n'
      << "dropout = " << dropout << '\n';
  return out.str();
}

PlmConfig PlmConfig::from_text(std::string_view text) {
  const auto doc = kv::parse(text);
  for (const auto& name : doc.order)
    if (!name.empty()) throw FormatError("unexpected section [" + name + "] in model config");
  return from_section(doc.section(""));
}

PlmConfig PlmConfig::from_section(const kv::Section& s) {
  kv::require_known(s, {"vocab_size", "enc_layers", "dec_layers", "hidden_dim", "heads", "ffn_dim", "max_len", "dropout"},
                    "plm");
  PlmConfig c;
  c.vocab_size = kv::get_size(s, "vocab_size", c.vocab_size);
  c.enc_layers = kv::get_size(s, "enc_layers", c.enc_layers);
  c.dec_layers = kv::get_size(s, "dec_layers", c.dec_layers);
  c.hidden_dim = kv::get_size(s, "hidden_dim", c.hidden_dim);
  c.heads = kv::get_size(s, "heads", c.heads);
  c.ffn_dim = kv::get_size(s, "ffn_dim", c.ffn_dim);
  c.max_len = kv::get_size(s, "max_len", c.max_len);
  c.dropout = static_cast<float>(kv::get_double(s, "dropout", c.dropout));
  return c;
}

std::string to_string(const LayerSite& s) {
  return std::string(s.part == LayerSite::Part::Encoder ? "encoder" : "decoder") + "[" + std::to_string(s.layer) + "]";
}

SequenceLayout SequenceLayout::of(std::span<const std::vector<TokenId>> seqs) {
  SequenceLayout l;
  for (const auto& s : seqs) l.offsets.push_back(l.offsets.back() + s.size());
  return l;
}

void HookSet::set(const LayerSite& site, LayerHook hook) {
  if (hooks_.count(site)) throw UsageError("a hook is already installed at " + to_string(site));
  hooks_.emplace(site, std::move(hook));
}

const LayerHook* HookSet::find(const LayerSite& site) const {
  auto it = hooks_.find(site);
  return it == hooks_.end() ? nullptr : &it->second;
}

// ---- model ----------------------------------------------------------------------

namespace {

Tensor zeros_param(ts::Shape s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return Tensor::parameter(std::move(s), std::vector<float>(n, 0.0f));
}

Tensor ones_param(std::size_t n) { return Tensor::parameter({n}, std::vector<float>(n, 1.0f)); }

void add_linear(ts::ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, float stddev,
                ts::CounterRng& rng) {
  ps.add(name + ".w", ts::randn_parameter({in, out}, stddev, rng));
  ps.add(name + ".b", zeros_param({out}));
}

void add_norm(ts::ParamStore& ps, const std::string& name, std::size_t d) {
  ps.add(name + ".g", ones_param(d));
  ps.add(name + ".b", zeros_param({d}));
}

struct Ctx {
  const ts::ParamStore& ps;
  const PlmConfig& cfg;
  RunMode mode;

  Tensor linear(const Tensor& x, const std::string& name) const {
    return ts::add(ts::matmul(x, ps.get(name + ".w")), ps.get(name + ".b"));
  }
  Tensor norm(const Tensor& x, const std::string& name) const {
    return ts::layer_norm(x, ps.get(name + ".g"), ps.get(name + ".b"));
  }
  Tensor drop(const Tensor& x) const {
    if (!mode.train || !mode.rng || cfg.dropout <= 0.0f) return x;
    std::vector<std::uint8_t> keep(x.numel());
    for (auto& k : keep) k = mode.rng->uniform() >= cfg.dropout ? 1 : 0;
    return ts::dropout(x, keep, cfg.dropout);
  }
  Tensor ffn(const Tensor& x, const std::string& p) const {
    return linear(ts::gelu(linear(x, p + ".ffn1")), p + ".ffn2");
  }
};

std::vector<ts::AttentionSegment> self_segments(const SequenceLayout& l) {
  std::vector<ts::AttentionSegment> s;
  for (std::size_t b = 0; b < l.batch(); ++b)
    if (l.length(b)) s.push_back({l.offsets[b], l.length(b), l.offsets[b], l.length(b)});
  return s;
}

Tensor apply_hook(const HookSet& hooks, const LayerSite& site, const Tensor& x, const SequenceLayout& layout) {
  const LayerHook* h = hooks.find(site);
  if (!h) return x;
  Tensor y = (*h)(x, layout);
  if (y.shape() != x.shape())
    throw ShapeMismatch("hook at " + to_string(site) + " returned " + ts::shape_string(y.shape()) + " for " +
                        ts::shape_string(x.shape()));
  return y;
}

}  // namespace

Plm::Plm(const PlmConfig& cfg, ts::CounterRng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.hidden_dim, f = cfg_.ffn_dim;
  const float sd = 1.0f / std::sqrt(static_cast<float>(d));
  const float sf = 1.0f / std::sqrt(static_cast<float>(f));
  const float resid = 1.0f / std::sqrt(static_cast<float>(2 * std::max<std::size_t>(1, cfg_.enc_layers + cfg_.dec_layers)));
  params_.add("tok_emb", ts::randn_parameter({cfg_.vocab_size, d}, 0.5f * sd, rng));
  params_.add("pos_emb", ts::randn_parameter({cfg_.max_len, d}, 0.5f * sd, rng));
  for (std::size_t i = 0; i < cfg_.enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    add_norm(params_, p + ".ln1", d);
    add_linear(params_, p + ".qkv", d, 3 * d, sd, rng);
    add_linear(params_, p + ".o", d, d, sd * resid, rng);
    add_norm(params_, p + ".ln2", d);
    add_linear(params_, p + ".ffn1", d, f, sd, rng);
    add_linear(params_, p + ".ffn2", f, d, sf * resid, rng);
  }
  add_norm(params_, "enc.ln", d);
  for (std::size_t i = 0; i < cfg_.dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    add_norm(params_, p + ".ln1", d);
    add_linear(params_, p + ".qkv", d, 3 * d, sd, rng);
    add_linear(params_, p + ".o", d, d, sd * resid, rng);
    add_norm(params_, p + ".ln2", d);
    add_linear(params_, p + ".xq", d, d, sd, rng);
    add_linear(params_, p + ".xkv", d, 2 * d, sd, rng);
    add_linear(params_, p + ".xo", d, d, sd * resid, rng);
    add_norm(params_, p + ".ln3", d);
    add_linear(params_, p + ".ffn1", d, f, sd, rng);
    add_linear(params_, p + ".ffn2", f, d, sf * resid, rng);
  }
  add_norm(params_, "dec.ln", d);
  params_.add("out.b", zeros_param({cfg_.vocab_size}));
}

Tensor Plm::embed(std::span<const std::vector<TokenId>> seqs, const SequenceLayout& layout, RunMode mode) const {
  std::vector<std::size_t> ids, pos;
  ids.reserve(layout.rows());
  pos.reserve(layout.rows());
  for (const auto& s : seqs) {
    if (s.size() > cfg_.max_len)
      throw TooLong("sequence of " + std::to_string(s.size()) + " subtokens exceeds max_len " +
                    std::to_string(cfg_.max_len));
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] >= cfg_.vocab_size) throw InvariantViolation("token id " + std::to_string(s[j]) + " outside vocabulary");
      ids.push_back(s[j]);
      pos.push_back(j);
    }
  }
  if (ids.empty()) return Tensor::zeros({0, cfg_.hidden_dim});
  Ctx c{params_, cfg_, mode};
  return c.drop(ts::add(ts::embedding_lookup(params_.get("tok_emb"), ids), ts::embedding_lookup(params_.get("pos_emb"), pos)));
}

EncoderOutput Plm::encode(std::span<const std::vector<TokenId>> sources, const HookSet& hooks, RunMode mode) const {
  EncoderOutput out;
  out.layout = SequenceLayout::of(sources);
  Tensor x = embed(sources, out.layout, mode);
  out.layers.push_back(x);
  const auto segs = self_segments(out.layout);
  const std::size_t d = cfg_.hidden_dim;
  Ctx c{params_, cfg_, mode};
  for (std::size_t i = 0; i < cfg_.enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    if (x.rows() > 0) {
      Tensor qkv = c.linear(c.norm(x, p + ".ln1"), p + ".qkv");
      Tensor a = ts::attention(ts::slice(qkv, 1, 0, d), ts::slice(qkv, 1, d, 2 * d), ts::slice(qkv, 1, 2 * d, 3 * d),
                               segs, cfg_.heads, false);
      x = ts::add(x, c.drop(c.linear(a, p + ".o")));
      x = ts::add(x, c.drop(c.ffn(c.norm(x, p + ".ln2"), p)));
    }
    x = apply_hook(hooks, encoder_layer_out(i), x, out.layout);
    out.layers.push_back(x);
  }
  out.memory = x.rows() > 0 ? c.norm(x, "enc.ln") : x;
  return out;
}

namespace {

// Final pre-norm decoder states; decoder sequence b attends to encoder
// sequence memory_of[b].
Tensor decoder_states(const ts::ParamStore& ps, const PlmConfig& cfg, const EncoderOutput& enc,
                      std::span<const std::vector<TokenId>> inputs, std::span<const std::size_t> memory_of,
                      const Tensor& embedded, const SequenceLayout& layout, const HookSet& hooks, RunMode mode) {
  const std::size_t d = cfg.hidden_dim;
  Ctx c{ps, cfg, mode};
  const auto self = self_segments(layout);
  std::vector<ts::AttentionSegment> cross;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    const std::size_t m = memory_of[b];
    if (layout.length(b) && enc.layout.length(m))
      cross.push_back({layout.offsets[b], layout.length(b), enc.layout.offsets[m], enc.layout.length(m)});
  }
  Tensor x = embedded;
  Tensor mem_kv;
  for (std::size_t i = 0; i < cfg.dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    Tensor qkv = c.linear(c.norm(x, p + ".ln1"), p + ".qkv");
    Tensor a = ts::attention(ts::slice(qkv, 1, 0, d), ts::slice(qkv, 1, d, 2 * d), ts::slice(qkv, 1, 2 * d, 3 * d),
                             self, cfg.heads, true);
    x = ts::add(x, c.drop(c.linear(a, p + ".o")));
    if (!cross.empty()) {
      Tensor q = c.linear(c.norm(x, p + ".ln2"), p + ".xq");
      Tensor kv = c.linear(enc.memory, p + ".xkv");
      Tensor xa = ts::attention(q, ts::slice(kv, 1, 0, d), ts::slice(kv, 1, d, 2 * d), cross, cfg.heads, false);
      x = ts::add(x, c.drop(c.linear(xa, p + ".xo")));
    }
    x = ts::add(x, c.drop(c.ffn(c.norm(x, p + ".ln3"), p)));
    x = apply_hook(hooks, decoder_layer_out(i), x, layout);
  }
  return x;
}

Tensor project(const ts::ParamStore& ps, const Tensor& states) {
  Tensor h = ts::layer_norm(states, ps.get("dec.ln.g"), ps.get("dec.ln.b"));
  return ts::add(ts::matmul(h, ps.get("tok_emb"), false, true), ps.get("out.b"));
}

}  // namespace

Tensor Plm::decode_train(const EncoderOutput& enc, std::span<const std::vector<TokenId>> dec_inputs,
                         const HookSet& hooks, RunMode mode) const {
  if (dec_inputs.size() != enc.layout.batch())
    throw ShapeMismatch("decode_train: " + std::to_string(dec_inputs.size()) + " decoder sequences for " +
                        std::to_string(enc.layout.batch()) + " sources");
  const auto layout = SequenceLayout::of(dec_inputs);
  Tensor x = embed(dec_inputs, layout, mode);
  if (x.rows() == 0) return Tensor::zeros({0, cfg_.vocab_size});
  std::vector<std::size_t> memory_of(dec_inputs.size());
  std::iota(memory_of.begin(), memory_of.end(), 0);
  return project(params_, decoder_states(params_, cfg_, enc, dec_inputs, memory_of, x, layout, hooks, mode));
}

// ---- teacher forcing --------------------------------------------------------------

std::vector<TokenId> decoder_input(std::span<const TokenId> target) {
  std::vector<TokenId> out;
  out.reserve(target.size() + 1);
  out.push_back(tokenizer::kBos);
  out.insert(out.end(), target.begin(), target.end());
  return out;
}

Batch make_batch(std::span<const Example> examples, std::span<const std::size_t> ids) {
  Batch b;
  b.ids.assign(ids.begin(), ids.end());
  for (auto i : ids) {
    const auto& e = examples[i];
    b.sources.push_back(e.source);
    b.inputs.push_back(decoder_input(e.target));
    for (auto t : e.target) b.targets.push_back(static_cast<std::int64_t>(t));
    b.targets.push_back(static_cast<std::int64_t>(tokenizer::kEos));
  }
  return b;
}

Tensor batch_loss(const Plm& model, const Batch& batch, const HookSet& hooks, RunMode mode) {
  auto enc = model.encode(batch.sources, hooks, mode);
  return ts::cross_entropy(model.decode_train(enc, batch.inputs, hooks, mode), batch.targets);
}

// ---- training ---------------------------------------------------------------------

double run_epoch(Plm& model, std::span<const Example> examples, const TrainOptions& opt, std::uint64_t seed,
                 const std::string& label, std::span<TrainGroup* const> groups, const HookFactory& hooks) {
  if (examples.empty()) throw EmptyCorpus("no training examples");
  if (opt.batch_size == 0) throw UsageError("batch size must be positive");
  ts::CounterRng root(seed);
  auto order_rng = root.fork("plm.epoch." + label);
  auto drop_rng = root.fork("plm.dropout." + label);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  order_rng.shuffle(order.begin(), order.end());

  std::vector<Tensor> all;
  for (auto* g : groups) all.insert(all.end(), g->params.begin(), g->params.end());
  ts::AdamConfig acfg;
  acfg.lr = opt.lr;
  double total = 0.0;
  std::size_t steps = 0;
  for (std::size_t s = 0; s < order.size(); s += opt.batch_size) {
    const std::size_t e = std::min(order.size(), s + opt.batch_size);
    Batch b = make_batch(examples, std::span<const std::size_t>(order.data() + s, e - s));
    model.params().zero_grad();
    for (auto& t : all) t.zero_grad();
    ts::Tape tape;
    const HookSet hs = hooks ? hooks(b) : HookSet{};
    Tensor loss = batch_loss(model, b, hs, RunMode{true, &drop_rng});
    tape.backward(loss);
    if (opt.clip > 0.0f) ts::clip_grad_norm(all, opt.clip);
    for (auto* g : groups) ts::adam_step(g->params, g->adam, acfg);
    total += loss.item();
    ++steps;
  }
  return total / static_cast<double>(steps);
}

std::vector<std::vector<TokenId>> teacher_forced_argmax(const Plm& model, std::span<const Example> examples,
                                                        std::size_t batch_size, const HookFactory& hooks) {
  batch_size = std::max<std::size_t>(1, batch_size);
  std::vector<std::vector<TokenId>> out;
  out.reserve(examples.size());
  for (std::size_t s = 0; s < examples.size(); s += batch_size) {
    std::vector<std::size_t> ids(std::min(examples.size(), s + batch_size) - s);
    std::iota(ids.begin(), ids.end(), s);
    const Batch b = make_batch(examples, ids);
    const HookSet hs = hooks ? hooks(b) : HookSet{};
    const Tensor logits = model.decode_train(model.encode(b.sources, hs), b.inputs, hs);
    const std::size_t V = logits.cols();
    std::size_t row = 0;
    for (const auto& seq : b.inputs) {
      std::vector<TokenId> pred;
      for (std::size_t j = 0; j < seq.size(); ++j) {
        auto r = logits.data().subspan((row + j) * V, V);
        const auto best = static_cast<TokenId>(std::max_element(r.begin(), r.end()) - r.begin());
        if (best == tokenizer::kEos) break;
        pred.push_back(best);
      }
      row += seq.size();
      out.push_back(std::move(pred));
    }
  }
  return out;
}

std::vector<double> train_plm(Plm& model, std::span<const Example> examples, const TrainOptions& opt,
                              std::uint64_t seed) {
  TrainGroup g;
  for (auto& [name, t] : model.params().items()) g.params.push_back(t);
  TrainGroup* groups[] = {&g};
  std::vector<double> losses;
  for (std::size_t e = 1; e <= opt.epochs; ++e)
    losses.push_back(run_epoch(model, examples, opt, seed, std::to_string(e), groups));
  model.params().zero_grad();
  return losses;
}

// ---- generation ---------------------------------------------------------------------

namespace {

// Log-probabilities of the last position of every hypothesis.
std::vector<std::vector<double>> next_log_probs(const Plm& model, const EncoderOutput& enc,
                                                const std::vector<std::vector<TokenId>>& prefixes,
                                                const StepHook& step_hook) {
  std::vector<std::vector<TokenId>> inputs;
  for (const auto& p : prefixes) inputs.push_back(decoder_input(p));
  const HookSet hooks = step_hook ? step_hook(prefixes) : HookSet{};
  const auto layout = SequenceLayout::of(inputs);
  const std::vector<std::size_t> memory_of(inputs.size(), 0);
  const auto& ps = model.params();
  Tensor states = decoder_states(ps, model.config(), enc, inputs, memory_of, [&] {
    std::vector<std::size_t> ids, pos;
    for (const auto& s : inputs)
      for (std::size_t j = 0; j < s.size(); ++j) {
        ids.push_back(s[j]);
        pos.push_back(j);
      }
    return ts::add(ts::embedding_lookup(ps.get("tok_emb"), ids), ts::embedding_lookup(ps.get("pos_emb"), pos));
  }(), layout, hooks, RunMode{});
  std::vector<std::size_t> last;
  for (std::size_t b = 0; b < layout.batch(); ++b) last.push_back(layout.offsets[b + 1] - 1);
  Tensor logits = project(ps, ts::embedding_lookup(states, last));
  const std::size_t V = logits.cols();
  std::vector<std::vector<double>> out(last.size(), std::vector<double>(V));
  for (std::size_t b = 0; b < last.size(); ++b) {
    auto row = logits.data().subspan(b * V, V);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (float v : row) z += std::exp(static_cast<double>(v) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < V; ++j) out[b][j] = static_cast<double>(row[j]) - lse;
  }
  return out;
}

}  // namespace

std::vector<TokenId> generate(const Plm& model, std::span<const TokenId> source, const DecodeOptions& opt,
                              const StepHook& step_hook) {
  const auto& cfg = model.config();
  std::vector<std::vector<TokenId>> src{std::vector<TokenId>(
      source.begin(), source.begin() + static_cast<std::ptrdiff_t>(std::min(source.size(), cfg.max_len)))};
  const auto enc = model.encode(src);
  const std::size_t max_steps = std::min(opt.max_steps, cfg.max_len - 1);

  if (opt.strategy == DecodeOptions::Strategy::Greedy) {
    std::vector<std::vector<TokenId>> prefix(1);
    for (std::size_t step = 0; step < max_steps; ++step) {
      const auto lp = next_log_probs(model, enc, prefix, step_hook)[0];
      const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
      if (best == tokenizer::kEos) break;
      prefix[0].push_back(best);
    }
    return prefix[0];
  }

  const std::size_t k = std::max<std::size_t>(1, opt.beam_size);
  struct Hyp {
    std::vector<TokenId> toks;
    double score;
  };
  std::vector<Hyp> alive{{{}, 0.0}}, finished;
  for (std::size_t step = 0; step < max_steps && !alive.empty(); ++step) {
    std::vector<std::vector<TokenId>> prefixes;
    for (const auto& h : alive) prefixes.push_back(h.toks);
    const auto lp = next_log_probs(model, enc, prefixes, step_hook);
    struct Cand {
      double score;
      std::size_t hyp;
      TokenId tok;
    };
    std::vector<Cand> cands;
    for (std::size_t a = 0; a < alive.size(); ++a) {
      std::vector<TokenId> idx(lp[a].size());
      std::iota(idx.begin(), idx.end(), 0);
      const auto take = std::min(k, idx.size());
      std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end(),
                        [&](TokenId x, TokenId y) { return lp[a][x] > lp[a][y] || (lp[a][x] == lp[a][y] && x < y); });
      for (std::size_t j = 0; j < take; ++j) cands.push_back({alive[a].score + lp[a][idx[j]], a, idx[j]});
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) { return x.score > y.score; });
    std::vector<Hyp> next;
    for (const auto& c : cands) {
      if (next.size() >= k) break;
      if (c.tok == tokenizer::kEos) {
        finished.push_back({alive[c.hyp].toks, c.score});
      } else {
        auto toks = alive[c.hyp].toks;
        toks.push_back(c.tok);
        next.push_back({std::move(toks), c.score});
      }
    }
    alive = std::move(next);
    if (finished.size() >= k) break;
    if (!finished.empty() && !alive.empty()) {
      double best_finished = finished[0].score;
      for (const auto& f : finished) best_finished = std::max(best_finished, f.score);
      if (best_finished >= alive.front().score) break;
    }
  }
  const auto& pool = finished.empty() ? alive : finished;
  if (pool.empty()) return {};
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i)
    if (pool[i].score > pool[best].score) best = i;
  return pool[best].toks;
}

// ---- persistence --------------------------------------------------------------------

void save_plm(const std::string& path, const Plm& model) {
  std::vector<std::pair<std::string, Tensor>> items;
  for (const auto& [name, t] : model.params().items()) items.emplace_back("plm." + name, t);
  ts::save_checkpoint(path, items);
  std::ofstream cfg(path + ".cfg");
  if (!cfg) throw IoError("cannot write " + path + ".cfg");
  cfg << model.config().to_text();
}

Plm load_plm(const std::string& path) {
  std::ifstream in(path + ".cfg");
  if (!in) throw IoError("cannot read " + path + ".cfg");
  std::stringstream text;
  text << in.rdbuf();
  ts::CounterRng rng(0);
  Plm model(PlmConfig::from_text(text.str()), rng);
  ts::ParamStore loaded;
  for (auto& [name, t] : ts::load_checkpoint(path))
    if (name.rfind("plm.", 0) == 0) loaded.add(name.substr(4), t);
  for (const auto& [name, t] : model.params().items()) {
    if (!loaded.contains(name)) throw FormatError("checkpoint lacks tensor plm." + name);
    if (loaded.get(name).shape() != t.shape()) throw FormatError("checkpoint tensor plm." + name + " has wrong shape");
  }
  model.params().load_values(loaded);
  return model;
}

}  // namespace cgfuse::plm
