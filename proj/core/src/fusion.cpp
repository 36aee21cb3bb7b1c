#include "cgfuse/fusion.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

#include "cgfuse/errors.hpp"
#include "cgfuse/frontend.hpp"

namespace cgfuse::fusion {

namespace ts = cgfuse::tensor;
using ts::Tensor;
using tokenizer::TokenId;

std::string_view to_string(Mode m) { return m == Mode::GoldFullGraph ? "gold_full_graph" : "causal_prefix"; }

Mode mode_from_string(std::string_view s) {
  if (s == "gold" || s == "gold_full_graph" || s == "GoldFullGraph") return Mode::GoldFullGraph;
  if (s == "causal" || s == "causal_prefix" || s == "CausalPrefix") return Mode::CausalPrefix;
  throw UsageError("unknown fusion mode '" + std::string(s) + "'");
}

void FusionPlan::validate() const {
  if (!(lambda >= 0.0f)) throw UsageError("fusion lambda must be non-negative");
  if (rebuild_stride == 0) throw UsageError("rebuild stride must be positive");
}

std::string FusionPlan::to_text() const {
  std::ostringstream out;
  out << "lambda = " << lambda << '\n' << "mode = " << to_string(mode) << '\n';
  if (!sites.empty()) {
    out << "sites = ";
    for (std::size_t i = 0; i < sites.size(); ++i) out << (i ? "," : "") << "decoder:" << sites[i].layer;
    out << '\n';
  }
  out << "warmup_epochs = " << warmup_epochs << '\n' << "rebuild_stride = " << rebuild_stride << '\n';
  return out.str();
}

FusionPlan FusionPlan::from_section(const kv::Section& s) {
  kv::require_known(s, {"lambda", "mode", "sites", "warmup_epochs", "rebuild_stride"}, "fusion");
  FusionPlan p;
  p.lambda = static_cast<float>(kv::get_double(s, "lambda", p.lambda));
  p.mode = mode_from_string(kv::get_string(s, "mode", std::string(to_string(p.mode))));
  p.warmup_epochs = kv::get_size(s, "warmup_epochs", p.warmup_epochs);
  p.rebuild_stride = kv::get_size(s, "rebuild_stride", p.rebuild_stride);
  std::stringstream list(kv::get_string(s, "sites", ""));
  std::string item;
  while (std::getline(list, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), [](unsigned char c) { return std::isspace(c); }), item.end());
    if (item.empty()) continue;
    const auto colon = item.find(':');
    if (colon == std::string::npos || item.substr(0, colon) != "decoder")
      throw FormatError("fusion site '" + item + "' is not of the form decoder:<layer>");
    kv::Section tmp{{"layer", item.substr(colon + 1)}};
    p.sites.push_back(plm::decoder_layer_out(kv::get_size(tmp, "layer", 0)));
  }
  return p;
}

// ---- single-graph fusion --------------------------------------------------------

PreparedGraph prepare_graph(const graph::CodeGraph& g, const graph::TerminalAlignment& alignment,
                            const tokenizer::Vocab& vocab) {
  return {gnn::Adjacency::of(g), gnn::InitPlan::of(g, vocab), alignment.spans};
}

namespace {

struct Placed {
  const PreparedGraph* graph;
  std::size_t row_offset;
};

// Runs the expert once over the disjoint union of all graphs and scatters
// terminal vectors onto their rows.
Tensor scatter_graphs(const gnn::GnnModel& expert, const std::vector<Placed>& parts, std::size_t rows,
                      const Tensor& plm_embeddings) {
  std::vector<gnn::Adjacency> adjs;
  std::vector<gnn::InitPlan> inits;
  std::vector<std::size_t> nodes, positions;
  std::size_t node_offset = 0;
  for (const auto& p : parts) {
    if (p.graph->spans.empty()) continue;
    for (const auto& s : p.graph->spans) {
      if (s.end + p.row_offset > rows || s.end < s.begin)
        throw AlignmentError("terminal span [" + std::to_string(s.begin) + ", " + std::to_string(s.end) +
                             ") outside " + std::to_string(rows) + " positions");
      for (std::size_t q = s.begin; q < s.end; ++q) {
        nodes.push_back(s.node + node_offset);
        positions.push_back(q + p.row_offset);
      }
    }
    adjs.push_back(p.graph->adj);
    inits.push_back(p.graph->init);
    node_offset += p.graph->adj.nodes;
  }
  const std::size_t d = expert.config().hidden_dim;
  if (nodes.empty()) return Tensor::zeros({rows, d});
  const auto adj = gnn::Adjacency::merge(adjs);
  const auto init = gnn::InitPlan::merge(inits);
  Tensor h = expert.forward(adj, gnn::node_init(init, plm_embeddings, expert.params().get("syntax")));
  return ts::scatter_add_rows(ts::embedding_lookup(h, nodes), positions, rows);
}

bool has_placements(const std::vector<Placed>& parts) {
  return std::any_of(parts.begin(), parts.end(), [](const Placed& p) { return !p.graph->spans.empty(); });
}

}  // namespace

Tensor graph_states(const gnn::GnnModel& expert, const PreparedGraph& g, std::size_t rows,
                    const Tensor& plm_embeddings) {
  return scatter_graphs(expert, {{&g, 0}}, rows, plm_embeddings);
}

Tensor fuse_states(const Tensor& h_theta, const PreparedGraph& g, float lambda, const gnn::GnnModel& expert,
                   const Tensor& plm_embeddings) {
  if (h_theta.cols() != expert.config().hidden_dim)
    throw ShapeMismatch("fuse_states: hidden width " + std::to_string(h_theta.cols()) + " vs GNN width " +
                        std::to_string(expert.config().hidden_dim));
  for (const auto& s : g.spans)
    if (s.end > h_theta.rows())
      throw AlignmentError("terminal span ends at " + std::to_string(s.end) + " but the sequence has " +
                           std::to_string(h_theta.rows()) + " positions");
  if (lambda == 0.0f || g.spans.empty()) return h_theta;
  return ts::add(h_theta, ts::mul_scalar(graph_states(expert, g, h_theta.rows(), plm_embeddings), lambda));
}

Tensor fuse_states(const Tensor& h_theta, const graph::CodeGraph& g, const graph::TerminalAlignment& alignment,
                   float lambda, const gnn::GnnModel& expert, const Tensor& plm_embeddings,
                   const tokenizer::Vocab& vocab) {
  return fuse_states(h_theta, prepare_graph(g, alignment, vocab), lambda, expert, plm_embeddings);
}

// ---- model ------------------------------------------------------------------------

FusedModel::FusedModel(plm::Plm plm, std::vector<gnn::GnnModel> experts, FusionPlan plan)
    : plm_(std::move(plm)), experts_(std::move(experts)), plan_(std::move(plan)) {
  plan_.validate();
  if (plm_.config().dec_layers == 0) throw UsageError("fusion needs at least one decoder layer");
  sites_ = plan_.sites;
  if (sites_.empty()) sites_.push_back(plm::decoder_layer_out(plm_.config().dec_layers - 1));
  for (const auto& s : sites_) {
    if (s.part != plm::LayerSite::Part::Decoder) throw UsageError("fusion sites must be decoder layers");
    if (s.layer >= plm_.config().dec_layers) throw UsageError("fusion site " + plm::to_string(s) + " does not exist");
  }
  if (experts_.size() != sites_.size())
    throw UsageError(std::to_string(experts_.size()) + " GNN experts for " + std::to_string(sites_.size()) + " sites");
  for (const auto& e : experts_)
    if (e.config().hidden_dim != plm_.config().hidden_dim)
      throw UsageError("GNN hidden_dim " + std::to_string(e.config().hidden_dim) + " differs from transformer width " +
                       std::to_string(plm_.config().hidden_dim));
}

std::vector<std::pair<std::string, Tensor>> FusedModel::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [n, t] : plm_.params().items()) out.emplace_back("plm." + n, t);
  for (std::size_t i = 0; i < experts_.size(); ++i)
    for (const auto& [n, t] : experts_[i].params().items()) out.emplace_back("gnn" + std::to_string(i) + "." + n, t);
  return out;
}

void FusedModel::save(const std::string& path) const {
  ts::save_checkpoint(path, named_tensors());
  std::ofstream cfg(path + ".cfg");
  if (!cfg) throw IoError("cannot write " + path + ".cfg");
  cfg << "[plm]\n" << plm_.config().to_text() << "\n[gnn]\n" << experts_.front().config().to_text() << "\n[fusion]\n"
      << plan_.to_text();
}

void FusedModel::load_values(const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : tensors) by_name[n] = &t;
  for (auto& [n, t] : named_tensors()) {
    auto it = by_name.find(n);
    if (it == by_name.end()) throw FormatError("checkpoint lacks tensor " + n);
    if (it->second->shape() != t.shape()) throw FormatError("checkpoint tensor " + n + " has the wrong shape");
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), t.data().begin());
  }
}

FusedModel FusedModel::load(const std::string& path) {
  std::ifstream in(path + ".cfg");
  if (!in) throw IoError("cannot read " + path + ".cfg");
  std::stringstream text;
  text << in.rdbuf();
  const auto doc = kv::parse(text.str());
  ts::CounterRng rng(0);
  auto model = make_fused(plm::Plm(plm::PlmConfig::from_section(doc.section("plm")), rng),
                          gnn::GnnConfig::from_section(doc.section("gnn")),
                          FusionPlan::from_section(doc.section("fusion")), rng);
  model.load_values(ts::load_checkpoint(path));
  return model;
}

FusedModel make_fused(plm::Plm plm, const gnn::GnnConfig& gnn_cfg, const FusionPlan& plan, ts::CounterRng& rng) {
  const std::size_t n = plan.sites.empty() ? 1 : plan.sites.size();
  std::vector<gnn::GnnModel> experts;
  for (std::size_t i = 0; i < n; ++i) {
    auto r = rng.fork("fusion.expert." + std::to_string(i));
    experts.emplace_back(gnn_cfg, r);
  }
  return FusedModel(std::move(plm), std::move(experts), plan);
}

// ---- examples ---------------------------------------------------------------------

FusedExample make_example(std::string_view nl, std::string_view code, const tokenizer::Vocab& vocab) {
  FusedExample ex;
  ex.text.source = tokenizer::encode(nl, vocab).ids;
  auto enc = tokenizer::encode(code, vocab, true);
  ex.text.target = std::move(enc.ids);
  ex.provenance = std::move(enc.provenance);
  try {
    const auto toks = frontend::tokenize(code);
    ex.graph = graph::build_code_graph(frontend::parse(toks, false), toks);
  } catch (const DataError&) {
    ex.graph.reset();
  }
  return ex;
}

PreparedExample prepare_example(const FusedExample& ex, std::size_t index, Mode mode, const tokenizer::Vocab& vocab) {
  if (!ex.graph) throw MissingGraph(index);
  std::vector<std::optional<std::size_t>> prov;
  prov.reserve(ex.provenance.size() + 1);
  prov.push_back(std::nullopt);
  prov.insert(prov.end(), ex.provenance.begin(), ex.provenance.end());
  const auto alignment = graph::align_terminals(*ex.graph, prov);
  PreparedExample out;
  out.full = prepare_graph(*ex.graph, alignment, vocab);
  if (mode == Mode::CausalPrefix) {
    for (std::size_t j = 0; j < alignment.spans.size(); ++j) {
      const auto sub = graph::context_subgraph(*ex.graph, j + 1);
      const auto terms = sub.terminal_nodes();
      const auto& s = alignment.spans[j];
      graph::TerminalAlignment one{{{terms.at(j), s.end - 1, s.end}}};
      out.prefixes.push_back(prepare_graph(sub, one, vocab));
    }
  }
  return out;
}

plm::HookSet fusion_hooks(const FusedModel& model, std::vector<const PreparedExample*> prepared, Mode mode) {
  plm::HookSet hooks;
  const float lambda = model.plan().lambda;
  for (std::size_t i = 0; i < model.sites().size(); ++i) {
    hooks.set(model.sites()[i], [&model, i, prepared, mode, lambda](const Tensor& states,
                                                                   const plm::SequenceLayout& layout) {
      if (lambda == 0.0f) return states;
      if (prepared.size() != layout.batch())
        throw InvariantViolation("fusion hook: " + std::to_string(prepared.size()) + " graphs for a batch of " +
                                 std::to_string(layout.batch()));
      std::vector<Placed> parts;
      for (std::size_t b = 0; b < prepared.size(); ++b) {
        if (mode == Mode::GoldFullGraph) {
          parts.push_back({&prepared[b]->full, layout.offsets[b]});
        } else {
          for (const auto& g : prepared[b]->prefixes) parts.push_back({&g, layout.offsets[b]});
        }
      }
      for (std::size_t b = 0; b < prepared.size(); ++b) {
        const auto check = [&](const PreparedGraph& g) {
          for (const auto& s : g.spans)
            if (s.end > layout.length(b))
              throw AlignmentError("terminal span ends at " + std::to_string(s.end) + " but decoder sequence " +
                                   std::to_string(b) + " has " + std::to_string(layout.length(b)) + " positions");
        };
        check(prepared[b]->full);
        for (const auto& g : prepared[b]->prefixes) check(g);
      }
      if (!has_placements(parts)) return states;
      const Tensor contrib = scatter_graphs(model.expert(i), parts, states.rows(), model.plm().embeddings());
      return ts::add(states, ts::mul_scalar(contrib, lambda));
    });
  }
  return hooks;
}

// ---- training / evaluation --------------------------------------------------------------

namespace {

std::vector<PreparedExample> prepare_all(std::span<const FusedExample> examples, Mode mode,
                                         const tokenizer::Vocab& vocab) {
  std::vector<PreparedExample> out;
  out.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) out.push_back(prepare_example(examples[i], i, mode, vocab));
  return out;
}

}  // namespace

FusedTrainReport fused_train(FusedModel& model, std::span<const FusedExample> examples, const plm::TrainOptions& opt,
                             std::uint64_t seed, const tokenizer::Vocab& vocab) {
  if (examples.empty()) throw EmptyCorpus("no training examples");
  const Mode mode = model.plan().mode;
  const auto prepared = prepare_all(examples, mode, vocab);
  std::vector<plm::Example> texts;
  texts.reserve(examples.size());
  for (const auto& e : examples) texts.push_back(e.text);
  auto factory = [&](const plm::Batch& b) {
    std::vector<const PreparedExample*> ps;
    for (auto id : b.ids) ps.push_back(&prepared[id]);
    return fusion_hooks(model, std::move(ps), mode);
  };

  plm::TrainGroup plm_group, gnn_group;
  for (auto& [n, t] : model.plm().params().items()) plm_group.params.push_back(t);
  for (std::size_t i = 0; i < model.expert_count(); ++i)
    for (auto& [n, t] : model.expert(i).params().items()) gnn_group.params.push_back(t);

  FusedTrainReport report;
  model.plm().params().set_requires_grad(false);
  try {
    plm::TrainGroup* warm[] = {&gnn_group};
    for (std::size_t e = 1; e <= model.plan().warmup_epochs; ++e)
      report.warmup_loss.push_back(
          plm::run_epoch(model.plm(), texts, opt, seed, "warmup." + std::to_string(e), warm, factory));
  } catch (...) {
    model.plm().params().set_requires_grad(true);
    throw;
  }
  model.plm().params().set_requires_grad(true);
  plm::TrainGroup* joint[] = {&plm_group, &gnn_group};
  for (std::size_t e = 1; e <= opt.epochs; ++e)
    report.joint_loss.push_back(plm::run_epoch(model.plm(), texts, opt, seed, std::to_string(e), joint, factory));
  model.plm().params().zero_grad();
  for (auto& t : gnn_group.params) t.zero_grad();
  return report;
}

Tensor fused_logits(const FusedModel& model, const FusedExample& ex, const tokenizer::Vocab& vocab) {
  const auto prepared = prepare_example(ex, 0, model.plan().mode, vocab);
  const auto hooks = fusion_hooks(model, {&prepared}, model.plan().mode);
  std::vector<std::vector<TokenId>> src{ex.text.source}, in{plm::decoder_input(ex.text.target)};
  return model.plm().decode_train(model.plm().encode(src, hooks), in, hooks);
}

std::vector<std::vector<TokenId>> teacher_forced_predict(const FusedModel& model, std::span<const FusedExample> examples,
                                                        const tokenizer::Vocab& vocab, std::size_t batch_size) {
  const Mode mode = model.plan().mode;
  const auto prepared = prepare_all(examples, mode, vocab);
  std::vector<plm::Example> texts;
  texts.reserve(examples.size());
  for (const auto& e : examples) texts.push_back(e.text);
  return plm::teacher_forced_argmax(model.plm(), texts, batch_size, [&](const plm::Batch& b) {
    std::vector<const PreparedExample*> ps;
    for (auto id : b.ids) ps.push_back(&prepared[id]);
    return fusion_hooks(model, std::move(ps), mode);
  });
}

std::vector<TokenId> fused_generate(const FusedModel& model, std::span<const TokenId> nl, const tokenizer::Vocab& vocab,
                                    const plm::DecodeOptions& opt) {
  if (model.plan().mode != Mode::CausalPrefix)
    throw UsageError("fused generation runs in causal_prefix mode only");
  const std::size_t stride = model.plan().rebuild_stride;
  std::map<std::vector<TokenId>, PreparedExample> cache;
  auto graph_for = [&](const std::vector<TokenId>& prefix) -> const PreparedExample& {
    std::vector<TokenId> key(prefix.begin(), prefix.begin() + static_cast<std::ptrdiff_t>(prefix.size() / stride * stride));
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    PreparedExample p;
    try {
      const auto g = graph::build_from_source(tokenizer::decode(key, vocab), true);
      std::vector<TokenId> with_bos{tokenizer::kBos};
      with_bos.insert(with_bos.end(), key.begin(), key.end());
      p.full = prepare_graph(g, graph::align_terminals(g, tokenizer::provenance(with_bos, vocab)), vocab);
    } catch (const DataError&) {
      p = PreparedExample{};
    }
    return cache.emplace(std::move(key), std::move(p)).first->second;
  };
  auto step_hook = [&](std::span<const std::vector<TokenId>> prefixes) {
    std::vector<const PreparedExample*> ps;
    for (const auto& p : prefixes) ps.push_back(&graph_for(p));
    return fusion_hooks(model, std::move(ps), Mode::GoldFullGraph);
  };
  if (model.plan().lambda == 0.0f) return plm::generate(model.plm(), nl, opt);
  return plm::generate(model.plm(), nl, opt, step_hook);
}

}  // namespace cgfuse::fusion
