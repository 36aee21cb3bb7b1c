#include "cgfuse/gnn.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cgfuse/errors.hpp"

namespace cgfuse::gnn {

namespace ts = cgfuse::tensor;
using ts::Tensor;

std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::RGCN: return "rgcn";
    case Arch::SAGE: return "sage";
    case Arch::GIN: return "gin";
  }
  return "?";
}

Arch arch_from_string(std::string_view s) {
  std::string low(s);
  for (auto& c : low) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (low == "rgcn" || low == "r-gcn") return Arch::RGCN;
  if (low == "sage" || low == "graphsage" || low == "gs") return Arch::SAGE;
  if (low == "gin") return Arch::GIN;
  throw UsageError("unknown GNN architecture '" + std::string(s) + "'");
}

void GnnConfig::validate() const {
  if (num_layers < 1) throw UsageError("GNN needs at least one layer");
  if (hidden_dim < 1) throw UsageError("GNN hidden_dim must be positive");
}

std::string GnnConfig::to_text() const {
  std::ostringstream out;
  out << "arch = " << to_string(arch) << '\n'
      << "layers = " << num_layers << '\n'
      << "hidden_dim = " << hidden_dim << '\n'
      << "relational = " << (use_relational ? "true" : "false") << '\n'
      << "epsilon = " << epsilon << '\n';
  return out.str();
}

GnnConfig GnnConfig::from_section(const kv::Section& s) {
  kv::require_known(s, {"arch", "layers", "hidden_dim", "relational", "epsilon"}, "gnn");
  GnnConfig c;
  c.arch = arch_from_string(kv::get_string(s, "arch", std::string(to_string(c.arch))));
  c.num_layers = kv::get_size(s, "layers", c.num_layers);
  c.hidden_dim = kv::get_size(s, "hidden_dim", c.hidden_dim);
  c.use_relational = kv::get_bool(s, "relational", c.use_relational);
  c.epsilon = static_cast<float>(kv::get_double(s, "epsilon", c.epsilon));
  return c;
}

// ---- adjacency / init ---------------------------------------------------------

Adjacency Adjacency::of(const graph::CodeGraph& g) {
  Adjacency a;
  a.nodes = g.size();
  for (const auto& e : g.edges) {
    const auto r = static_cast<std::size_t>(e.rel);
    a.from[r].push_back(e.src);
    a.to[r].push_back(e.dst);
    a.from[r + graph::kRelationCount].push_back(e.dst);
    a.to[r + graph::kRelationCount].push_back(e.src);
  }
  std::vector<std::size_t> all(a.nodes, 0);
  for (std::size_t r = 0; r < kEffectiveRelations; ++r) {
    std::vector<std::size_t> deg(a.nodes, 0);
    for (auto v : a.to[r]) {
      ++deg[v];
      ++all[v];
    }
    a.inv_degree[r].resize(a.nodes);
    for (std::size_t v = 0; v < a.nodes; ++v) a.inv_degree[r][v] = deg[v] ? 1.0f / static_cast<float>(deg[v]) : 1.0f;
  }
  a.inv_degree_all.resize(a.nodes);
  for (std::size_t v = 0; v < a.nodes; ++v) a.inv_degree_all[v] = all[v] ? 1.0f / static_cast<float>(all[v]) : 1.0f;
  return a;
}

Adjacency Adjacency::merge(std::span<const Adjacency> parts) {
  Adjacency out;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < kEffectiveRelations; ++r) {
      for (auto v : p.from[r]) out.from[r].push_back(v + out.nodes);
      for (auto v : p.to[r]) out.to[r].push_back(v + out.nodes);
      out.inv_degree[r].insert(out.inv_degree[r].end(), p.inv_degree[r].begin(), p.inv_degree[r].end());
    }
    out.inv_degree_all.insert(out.inv_degree_all.end(), p.inv_degree_all.begin(), p.inv_degree_all.end());
    out.nodes += p.nodes;
  }
  return out;
}

InitPlan InitPlan::of(const graph::CodeGraph& g, const tokenizer::Vocab& vocab) {
  InitPlan p;
  p.nodes = g.size();
  for (std::size_t v = 0; v < g.size(); ++v) {
    const auto& n = g.nodes[v];
    if (!n.is_terminal()) {
      p.syntax_nodes.push_back(v);
      p.syntax_kinds.push_back(static_cast<std::size_t>(n.kind));
      continue;
    }
    auto ids = tokenizer::encode(n.token->text, vocab).ids;
    if (ids.empty()) throw InvariantViolation("terminal with empty text");
    const float w = 1.0f / static_cast<float>(ids.size());
    for (auto id : ids) {
      p.subtokens.push_back(id);
      p.subtoken_owner.push_back(v);
      p.subtoken_weight.push_back(w);
    }
  }
  return p;
}

InitPlan InitPlan::merge(std::span<const InitPlan> parts) {
  InitPlan out;
  for (const auto& p : parts) {
    for (auto v : p.syntax_nodes) out.syntax_nodes.push_back(v + out.nodes);
    out.syntax_kinds.insert(out.syntax_kinds.end(), p.syntax_kinds.begin(), p.syntax_kinds.end());
    out.subtokens.insert(out.subtokens.end(), p.subtokens.begin(), p.subtokens.end());
    for (auto v : p.subtoken_owner) out.subtoken_owner.push_back(v + out.nodes);
    out.subtoken_weight.insert(out.subtoken_weight.end(), p.subtoken_weight.begin(), p.subtoken_weight.end());
    out.nodes += p.nodes;
  }
  return out;
}

Tensor node_init(const InitPlan& plan, const Tensor& plm_embeddings, const Tensor& syntax_table) {
  if (plm_embeddings.cols() != syntax_table.cols())
    throw ShapeMismatch("node_init: embedding widths differ: " + ts::shape_string(plm_embeddings.shape()) + " and " +
                        ts::shape_string(syntax_table.shape()));
  const std::size_t d = syntax_table.cols();
  if (plan.nodes == 0) return Tensor::zeros({0, d});
  std::vector<Tensor> rows;
  std::vector<std::size_t> index;
  if (!plan.syntax_nodes.empty()) {
    rows.push_back(ts::embedding_lookup(syntax_table, plan.syntax_kinds));
    index.insert(index.end(), plan.syntax_nodes.begin(), plan.syntax_nodes.end());
  }
  if (!plan.subtokens.empty()) {
    rows.push_back(ts::scale_rows(ts::embedding_lookup(plm_embeddings, plan.subtokens), plan.subtoken_weight));
    index.insert(index.end(), plan.subtoken_owner.begin(), plan.subtoken_owner.end());
  }
  Tensor src = rows.size() == 1 ? rows[0] : ts::concat(rows, 0);
  return ts::scatter_add_rows(src, index, plan.nodes);
}

Tensor node_init(const graph::CodeGraph& g, const Tensor& plm_embeddings, const Tensor& syntax_table,
                 const tokenizer::Vocab& vocab) {
  return node_init(InitPlan::of(g, vocab), plm_embeddings, syntax_table);
}

std::vector<std::size_t> node_labels(const graph::CodeGraph& g) {
  std::vector<std::size_t> out;
  out.reserve(g.size());
  for (const auto& n : g.nodes) out.push_back(static_cast<std::size_t>(n.kind));
  return out;
}

// ---- model ----------------------------------------------------------------------

GnnModel::GnnModel(const GnnConfig& cfg, ts::CounterRng& rng) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.hidden_dim;
  const float emb_std = 1.0f / std::sqrt(static_cast<float>(d));
  params_.add("syntax", ts::randn_parameter({kLabelCount, d}, emb_std, rng));
  params_.add("mask", ts::randn_parameter({1, d}, emb_std, rng));
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    switch (cfg_.arch) {
      case Arch::RGCN: {
        const std::size_t in = (kEffectiveRelations + 1) * d;
        params_.add(p + "w", ts::randn_parameter({in, d}, 1.0f / std::sqrt(static_cast<float>(2 * d)), rng));
        params_.add(p + "b", Tensor::parameter({d}, std::vector<float>(d, 0.0f)));
        break;
      }
      case Arch::SAGE:
        params_.add(p + "w", ts::randn_parameter({2 * d, d}, 1.0f / std::sqrt(static_cast<float>(2 * d)), rng));
        params_.add(p + "b", Tensor::parameter({d}, std::vector<float>(d, 0.0f)));
        break;
      case Arch::GIN:
        params_.add(p + "w1", ts::randn_parameter({d, d}, 1.0f / std::sqrt(static_cast<float>(d)), rng));
        params_.add(p + "b1", Tensor::parameter({d}, std::vector<float>(d, 0.0f)));
        params_.add(p + "w2", ts::randn_parameter({d, d}, 1.0f / std::sqrt(static_cast<float>(d)), rng));
        params_.add(p + "b2", Tensor::parameter({d}, std::vector<float>(d, 0.0f)));
        break;
    }
  }
  params_.add("head.w", ts::randn_parameter({d, kLabelCount}, 1.0f / std::sqrt(static_cast<float>(d)), rng));
  params_.add("head.b", Tensor::parameter({kLabelCount}, std::vector<float>(kLabelCount, 0.0f)));
}

namespace {

Tensor neighbour_sum(const Tensor& h, const std::vector<std::size_t>& from, const std::vector<std::size_t>& to,
                     std::size_t n) {
  if (from.empty()) return Tensor::zeros({n, h.cols()});
  return ts::scatter_add_rows(ts::embedding_lookup(h, from), to, n);
}

}  // namespace

Tensor GnnModel::forward(const Adjacency& adj, const Tensor& init) const {
  if (init.rank() != 2 || init.rows() != adj.nodes || init.cols() != cfg_.hidden_dim)
    throw ShapeMismatch("gnn_forward: init " + ts::shape_string(init.shape()) + " for " +
                        std::to_string(adj.nodes) + " nodes of width " + std::to_string(cfg_.hidden_dim));
  const std::size_t n = adj.nodes;
  if (n == 0) return init;
  Tensor h = init;
  for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    switch (cfg_.arch) {
      case Arch::RGCN: {
        std::vector<Tensor> parts{h};
        for (std::size_t r = 0; r < kEffectiveRelations; ++r)
          parts.push_back(ts::scale_rows(neighbour_sum(h, adj.from[r], adj.to[r], n), adj.inv_degree[r]));
        h = ts::gelu(ts::add(ts::matmul(ts::concat(parts, 1), params_.get(p + "w")), params_.get(p + "b")));
        break;
      }
      case Arch::SAGE: {
        Tensor a;
        if (cfg_.use_relational) {
          for (std::size_t r = 0; r < kEffectiveRelations; ++r) {
            Tensor m = ts::scale_rows(neighbour_sum(h, adj.from[r], adj.to[r], n), adj.inv_degree[r]);
            a = a.defined() ? ts::add(a, m) : m;
          }
        } else {
          std::vector<std::size_t> from, to;
          for (std::size_t r = 0; r < kEffectiveRelations; ++r) {
            from.insert(from.end(), adj.from[r].begin(), adj.from[r].end());
            to.insert(to.end(), adj.to[r].begin(), adj.to[r].end());
          }
          a = ts::scale_rows(neighbour_sum(h, from, to, n), adj.inv_degree_all);
        }
        std::vector<Tensor> parts{h, a};
        h = ts::gelu(ts::add(ts::matmul(ts::concat(parts, 1), params_.get(p + "w")), params_.get(p + "b")));
        break;
      }
      case Arch::GIN: {
        std::vector<std::size_t> from, to;
        for (std::size_t r = 0; r < kEffectiveRelations; ++r) {
          from.insert(from.end(), adj.from[r].begin(), adj.from[r].end());
          to.insert(to.end(), adj.to[r].begin(), adj.to[r].end());
        }
        Tensor z = ts::add(ts::mul_scalar(h, 1.0f + cfg_.epsilon), neighbour_sum(h, from, to, n));
        Tensor hid = ts::gelu(ts::add(ts::matmul(z, params_.get(p + "w1")), params_.get(p + "b1")));
        h = ts::gelu(ts::add(ts::matmul(hid, params_.get(p + "w2")), params_.get(p + "b2")));
        break;
      }
    }
  }
  return h;
}

Tensor GnnModel::classify(const Tensor& h) const {
  return ts::add(ts::matmul(h, params_.get("head.w")), params_.get("head.b"));
}

Tensor gnn_forward(const graph::CodeGraph& g, const Tensor& init, const GnnModel& model) {
  return model.forward(Adjacency::of(g), init);
}

std::vector<std::size_t> sample_mask(const Adjacency& adj, double ratio, ts::CounterRng& rng) {
  const std::size_t n = adj.nodes;
  if (n == 0) return {};
  const auto want = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n))));
  std::vector<std::vector<std::size_t>> nbr(n);
  for (std::size_t r = 0; r < graph::kRelationCount; ++r)
    for (std::size_t i = 0; i < adj.from[r].size(); ++i) {
      nbr[adj.from[r][i]].push_back(adj.to[r][i]);
      nbr[adj.to[r][i]].push_back(adj.from[r][i]);
    }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order.begin(), order.end());
  std::vector<char> blocked(n, 0);
  std::vector<std::size_t> picked;
  for (auto v : order) {
    if (picked.size() >= want) break;
    if (blocked[v]) continue;
    picked.push_back(v);
    blocked[v] = 1;
    for (auto u : nbr[v]) blocked[u] = 1;
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

// ---- pre-training ---------------------------------------------------------------

std::string PretrainReport::to_text() const {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(4);
  for (const auto& e : epochs)
    out << "epoch " << e.epoch << " loss " << e.loss << " masked_accuracy " << e.masked_accuracy << '\n';
  return out.str();
}

namespace {

struct Prepared {
  Adjacency adj;
  InitPlan plan;
  std::vector<std::size_t> labels;
};

struct Batch {
  Adjacency adj;
  InitPlan plan;
  std::vector<std::size_t> masked;
  std::vector<std::int64_t> targets;
};

Batch make_batch(const std::vector<Prepared>& data, std::span<const std::size_t> ids,
                 const std::vector<std::vector<std::size_t>>& masks) {
  std::vector<Adjacency> adjs;
  std::vector<InitPlan> plans;
  Batch b;
  std::size_t off = 0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const auto& p = data[ids[k]];
    adjs.push_back(p.adj);
    plans.push_back(p.plan);
    for (auto v : masks[k]) {
      b.masked.push_back(v + off);
      b.targets.push_back(static_cast<std::int64_t>(p.labels[v]));
    }
    off += p.adj.nodes;
  }
  b.adj = Adjacency::merge(adjs);
  b.plan = InitPlan::merge(plans);
  return b;
}

Tensor masked_logits(const GnnModel& model, const Batch& b, const Tensor& plm) {
  const auto& ps = model.params();
  Tensor init = node_init(b.plan, plm, ps.get("syntax"));
  std::vector<std::size_t> zeros(b.masked.size(), 0);
  init = ts::replace_rows(init, b.masked, ts::embedding_lookup(ps.get("mask"), zeros));
  Tensor h = model.forward(b.adj, init);
  return model.classify(ts::embedding_lookup(h, b.masked));
}

}  // namespace

PretrainReport pretrain_nodes(GnnModel& model, std::span<const graph::CodeGraph> graphs, const Tensor& plm_embeddings,
                              const tokenizer::Vocab& vocab, const PretrainOptions& opt, std::uint64_t seed) {
  if (graphs.empty()) throw EmptyCorpus("no graphs to pre-train on");
  if (!(opt.mask_ratio > 0.0 && opt.mask_ratio < 1.0)) throw UsageError("mask ratio must lie in (0, 1)");
  if (opt.batch_graphs == 0) throw UsageError("batch size must be positive");

  std::vector<Prepared> data;
  data.reserve(graphs.size());
  for (const auto& g : graphs) {
    if (g.empty()) continue;
    data.push_back({Adjacency::of(g), InitPlan::of(g, vocab), node_labels(g)});
  }
  if (data.empty()) throw EmptyCorpus("every graph is empty");

  ts::CounterRng root(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  auto split_rng = root.fork("gnn.split");
  split_rng.shuffle(order.begin(), order.end());
  std::size_t n_hold = static_cast<std::size_t>(std::floor(opt.heldout_fraction * static_cast<double>(data.size())));
  if (data.size() >= 2) n_hold = std::clamp<std::size_t>(n_hold, 1, data.size() - 1);
  else n_hold = 0;
  std::vector<std::size_t> heldout(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_hold));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());
  if (heldout.empty()) heldout = train;

  // Fixed evaluation masks.
  auto eval_rng = root.fork("gnn.eval-mask");
  std::vector<std::vector<std::size_t>> eval_masks;
  for (auto i : heldout) eval_masks.push_back(sample_mask(data[i].adj, opt.mask_ratio, eval_rng));

  Tensor plm = plm_embeddings.detach();
  std::vector<Tensor> trainable;
  for (auto& [name, t] : model.params().items())
    if (t.requires_grad()) trainable.push_back(t);
  ts::AdamState adam;
  ts::AdamConfig acfg;
  acfg.lr = opt.lr;

  PretrainReport report;
  report.train_graphs = train.size();
  report.heldout_graphs = n_hold;
  for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
    auto ep_rng = root.fork("gnn.epoch." + std::to_string(epoch));
    std::vector<std::size_t> perm = train;
    ep_rng.shuffle(perm.begin(), perm.end());
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t s = 0; s < perm.size(); s += opt.batch_graphs) {
      const std::size_t e = std::min(perm.size(), s + opt.batch_graphs);
      std::span<const std::size_t> ids(perm.data() + s, e - s);
      std::vector<std::vector<std::size_t>> masks;
      for (auto i : ids) masks.push_back(sample_mask(data[i].adj, opt.mask_ratio, ep_rng));
      Batch b = make_batch(data, ids, masks);
      model.params().zero_grad();
      ts::Tape tape;
      Tensor loss = ts::cross_entropy(masked_logits(model, b, plm), b.targets);
      tape.backward(loss);
      ts::adam_step(trainable, adam, acfg);
      loss_sum += loss.item();
      ++steps;
    }
    // held-out accuracy
    std::size_t correct = 0, total = 0;
    for (std::size_t s = 0; s < heldout.size(); s += opt.batch_graphs) {
      const std::size_t e = std::min(heldout.size(), s + opt.batch_graphs);
      std::span<const std::size_t> ids(heldout.data() + s, e - s);
      std::vector<std::vector<std::size_t>> masks(eval_masks.begin() + static_cast<std::ptrdiff_t>(s),
                                                  eval_masks.begin() + static_cast<std::ptrdiff_t>(e));
      Batch b = make_batch(data, ids, masks);
      Tensor logits = masked_logits(model, b, plm);
      const std::size_t C = logits.cols();
      for (std::size_t i = 0; i < b.targets.size(); ++i) {
        auto row = logits.data().subspan(i * C, C);
        const auto arg = static_cast<std::int64_t>(std::max_element(row.begin(), row.end()) - row.begin());
        correct += arg == b.targets[i];
        ++total;
      }
    }
    report.heldout_masked_nodes = total;
    report.epochs.push_back({epoch, steps ? loss_sum / static_cast<double>(steps) : 0.0,
                             total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0});
  }
  model.params().zero_grad();
  return report;
}

// ---- checkpoints ------------------------------------------------------------------

void save_gnn(const std::string& path, const GnnModel& model) {
  std::vector<std::pair<std::string, tensor::Tensor>> items;
  for (const auto& [name, t] : model.params().items()) items.emplace_back("gnn." + name, t);
  tensor::save_checkpoint(path, items);
  std::ofstream cfg(path + ".cfg");
  if (!cfg) throw IoError("cannot write " + path + ".cfg");
  cfg << model.config().to_text();
}

GnnModel load_gnn(const std::string& path) {
  std::ifstream in(path + ".cfg");
  if (!in) throw IoError("cannot read " + path + ".cfg");
  std::stringstream text;
  text << in.rdbuf();
  tensor::CounterRng rng(0);
  GnnModel model(GnnConfig::from_section(kv::parse(text.str()).section("")), rng);
  tensor::ParamStore loaded;
  for (auto& [name, t] : tensor::load_checkpoint(path))
    if (name.rfind("gnn.", 0) == 0) loaded.add(name.substr(4), t);
  for (const auto& [name, t] : model.params().items()) {
    if (!loaded.contains(name)) throw FormatError("checkpoint lacks tensor gnn." + name);
    if (loaded.get(name).shape() != t.shape()) throw FormatError("checkpoint tensor gnn." + name + " has wrong shape");
  }
  model.params().load_values(loaded);
  return model;
}

}  // namespace cgfuse::gnn
