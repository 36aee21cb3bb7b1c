#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "cgfuse/code_graph.hpp"
#include "cgfuse/errors.hpp"
#include "cgfuse/fusion.hpp"
#include "cgfuse/gnn.hpp"
#include "cgfuse/harness.hpp"
#include "cgfuse/kv_text.hpp"
#include "cgfuse/metrics.hpp"
#include "cgfuse/plm.hpp"
#include "cgfuse/tokenizer.hpp"

namespace fs = std::filesystem;
namespace hs = cgfuse::harness;
using namespace cgfuse;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
};

hs::ExperimentSpec load_spec(const Globals& g) {
  auto spec = g.config.empty() ? hs::ExperimentSpec{} : hs::ExperimentSpec::load(g.config);
  if (g.seed) spec.seed = *g.seed;
  if (!g.out.empty()) spec.out_dir = g.out;
  return spec;
}

fs::path out_dir(const hs::ExperimentSpec& spec) {
  fs::path p = spec.out_dir.empty() ? fs::path("cgfuse-out") : fs::path(spec.out_dir);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + p.string());
  f << text;
}

const hs::VariantSpec* find_variant(const hs::ExperimentSpec& spec, const std::string& name) {
  if (name.empty() || name == "baseline") return nullptr;
  for (const auto& v : spec.variants)
    if (v.name == name) return &v;
  throw UsageError("no [variant." + name + "] in the config");
}

bool is_fused_checkpoint(const std::string& path) {
  std::ifstream in(path + ".cfg");
  if (!in) throw IoError("cannot read " + path + ".cfg");
  std::stringstream text;
  text << in.rdbuf();
  return kv::parse(text.str()).has("fusion");
}

std::string losses_text(const std::vector<double>& losses) {
  std::ostringstream out;
  for (std::size_t e = 0; e < losses.size(); ++e) out << "epoch " << e + 1 << " loss " << losses[e] << '\n';
  return out.str();
}

// ---- verbs -----------------------------------------------------------------------

struct GraphArgs {
  std::string code;
  std::string corpus;
  bool tolerant = false;
};

void graph_extract(const Globals& g, const GraphArgs& a) {
  if (a.code.empty() == a.corpus.empty()) throw UsageError("graph extract needs exactly one of --code or --corpus");
  if (!a.code.empty()) {
    std::cout << graph::serialize(graph::build_from_source(a.code, a.tolerant)) << "\n";
    return;
  }
  const auto examples = hs::load_corpus(a.corpus);
  std::optional<fs::path> dir;
  if (!g.out.empty()) {
    dir = fs::path(g.out) / "graphs";
    fs::create_directories(*dir);
  }
  std::size_t ok = 0, skipped = 0, co = 0, ca = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    graph::CodeGraph cg;
    try {
      cg = graph::build_from_source(examples[i].code, a.tolerant);
    } catch (const DataError& e) {
      ++skipped;
      std::cerr << "example " << i << ": " << e.what() << '\n';
      continue;
    }
    ++ok;
    co += cg.count(graph::Relation::CO);
    ca += cg.count(graph::Relation::CA);
    if (dir) write_text(*dir / (std::to_string(i) + ".graph"), graph::serialize(cg));
  }
  std::cout << "examples " << examples.size() << " graphs " << ok << " skipped " << skipped << " co_edges " << co
            << " ca_edges " << ca << '\n';
}

void tokenizer_train(const Globals& g, const std::string& corpus, std::optional<std::size_t> size) {
  auto spec = load_spec(g);
  std::vector<hs::Example> train;
  if (corpus.empty())
    train = hs::load_splits(spec).first;
  else
    train = hs::load_corpus(corpus);
  const auto vocab = hs::train_tokenizer(train, size.value_or(spec.vocab_size));
  const auto path = out_dir(spec) / "vocab.txt";
  vocab.save(path.string());
  std::cout << "vocab " << vocab.size() << " pieces -> " << path.string() << '\n';
}

void gnn_pretrain(const Globals& g, const std::string& variant) {
  const auto spec = load_spec(g);
  const auto* v = find_variant(spec, variant);
  gnn::GnnConfig cfg;
  cfg.hidden_dim = spec.plm.hidden_dim;
  if (v) cfg = v->gnn;
  const auto data = hs::load_data(spec);
  auto plm_cfg = spec.plm;
  plm_cfg.vocab_size = data.vocab.size();
  auto rng = tensor::CounterRng(spec.seed).fork("plm.init");
  const plm::Plm init(plm_cfg, rng);
  double acc = 0.0;
  const auto expert = hs::pretrain_expert(spec, cfg, data, init, &acc);
  const auto dir = out_dir(spec);
  gnn::save_gnn((dir / "gnn.ckpt").string(), expert);
  data.vocab.save((dir / "vocab.txt").string());
  std::cout << "graphs " << data.train.size() << " masked_accuracy " << acc << " -> " << (dir / "gnn.ckpt").string()
            << '\n';
}

void train(const Globals& g, const std::string& variant) {
  const auto spec = load_spec(g);
  const auto* v = find_variant(spec, variant);
  const auto data = hs::load_data(spec);
  const auto dir = out_dir(spec);
  const auto ckpt = (dir / "model.ckpt").string();
  std::vector<double> losses;
  if (v) {
    double acc = 0.0;
    const auto model = hs::train_fused(spec, *v, data, &acc, &losses);
    model.save(ckpt);
    std::cout << "gnn masked_accuracy " << acc << '\n';
  } else {
    plm::save_plm(ckpt, hs::train_baseline(spec, data, &losses));
  }
  data.vocab.save((dir / "vocab.txt").string());
  write_text(dir / "train.txt", losses_text(losses));
  std::cout << losses_text(losses) << "examples " << data.train.size() << " -> " << ckpt << '\n';
}

struct ModelArgs {
  std::string model;
  std::string vocab;
};

void eval(const Globals& g, const ModelArgs& m, bool free, std::size_t limit) {
  const auto spec = load_spec(g);
  const auto vocab = tokenizer::Vocab::load(m.vocab);
  std::ostringstream out;
  if (is_fused_checkpoint(m.model)) {
    const auto model = fusion::FusedModel::load(m.model);
    const auto data = hs::load_data(spec, vocab, model.plm().config().max_len);
    out << "[teacher_forced]\n" << hs::evaluate_teacher_forced(model, data).to_text();
    if (free) out << "[free]\n" << hs::evaluate_free(model, data, spec.decode, limit).to_text();
  } else {
    const auto model = plm::load_plm(m.model);
    const auto data = hs::load_data(spec, vocab, model.config().max_len);
    out << "[teacher_forced]\n" << hs::evaluate_teacher_forced(model, data).to_text();
    if (free) out << "[free]\n" << hs::evaluate_free(model, data, spec.decode, limit).to_text();
  }
  if (!g.out.empty()) write_text(out_dir(spec) / "eval.txt", out.str());
  std::cout << out.str();
}

void generate(const Globals& g, const ModelArgs& m, const std::string& nl, std::optional<std::size_t> beam,
              std::optional<std::size_t> max_steps) {
  const auto spec = load_spec(g);
  auto opt = spec.decode;
  if (beam) {
    opt.strategy = *beam > 1 ? plm::DecodeOptions::Strategy::Beam : plm::DecodeOptions::Strategy::Greedy;
    opt.beam_size = *beam;
  }
  if (max_steps) opt.max_steps = *max_steps;
  const auto vocab = tokenizer::Vocab::load(m.vocab);
  const auto src = tokenizer::encode(nl, vocab).ids;
  std::vector<tokenizer::TokenId> ids;
  if (is_fused_checkpoint(m.model)) {
    auto model = fusion::FusedModel::load(m.model);
    model.plan().mode = fusion::Mode::CausalPrefix;
    ids = fusion::fused_generate(model, src, vocab, opt);
  } else {
    ids = plm::generate(plm::load_plm(m.model), src, opt);
  }
  std::cout << tokenizer::decode(ids, vocab) << '\n';
}

void experiment_run(const Globals& g, bool parallel) {
  auto spec = load_spec(g);
  if (parallel) spec.parallel = true;
  if (spec.out_dir.empty()) spec.out_dir = out_dir(spec).string();
  const auto result = hs::run_experiment(spec);
  std::cout << "train " << result.train_examples << " test " << result.test_examples << " skipped_unparsable "
            << result.skipped_unparsable << " skipped_too_long " << result.skipped_too_long << "\n\n"
            << result.table();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cgfuse: code generation with graph-fused transformers"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Override the experiment seed");
  app.add_option("--config", g.config, "Experiment config file");
  app.add_option("--out", g.out, "Output directory");

  auto* graph_cmd = app.add_subcommand("graph", "Code graph tools")->require_subcommand(1);
  GraphArgs graph_args;
  auto* extract = graph_cmd->add_subcommand("extract", "Build code graphs from source or a corpus");
  extract->add_option("--code", graph_args.code, "Source snippet; the graph goes to stdout");
  extract->add_option("--corpus", graph_args.corpus, "JSON-lines corpus; graphs go to <out>/graphs");
  extract->add_flag("--tolerant", graph_args.tolerant, "Accept incomplete code");

  auto* tok_cmd = app.add_subcommand("tokenizer", "Tokenizer tools")->require_subcommand(1);
  std::string tok_corpus;
  std::optional<std::size_t> tok_size;
  auto* tok_train = tok_cmd->add_subcommand("train", "Train a subword vocabulary");
  tok_train->add_option("--corpus", tok_corpus, "JSON-lines corpus (default: the config's training split)");
  tok_train->add_option("--vocab-size", tok_size, "Target vocabulary size");

  auto* gnn_cmd = app.add_subcommand("gnn", "GNN expert tools")->require_subcommand(1);
  std::string gnn_variant;
  auto* pretrain = gnn_cmd->add_subcommand("pretrain", "Masked node-kind pre-training");
  pretrain->add_option("--variant", gnn_variant, "Take the GNN settings from [variant.NAME]");

  std::string train_variant;
  auto* train_cmd = app.add_subcommand("train", "Train the baseline or a fused variant");
  train_cmd->add_option("--variant", train_variant, "Fused variant name (default: baseline)");

  ModelArgs eval_args;
  bool eval_free = false;
  std::size_t eval_limit = 0;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on the test split");
  eval_cmd->add_option("--model", eval_args.model, "Checkpoint path")->required();
  eval_cmd->add_option("--vocab", eval_args.vocab, "Vocabulary file")->required();
  eval_cmd->add_flag("--free", eval_free, "Also run free decoding");
  eval_cmd->add_option("--limit", eval_limit, "Free-decode at most N examples (0: all)");

  ModelArgs gen_args;
  std::string gen_nl;
  std::optional<std::size_t> gen_beam, gen_steps;
  auto* gen_cmd = app.add_subcommand("generate", "Generate code for one description");
  gen_cmd->add_option("--model", gen_args.model, "Checkpoint path")->required();
  gen_cmd->add_option("--vocab", gen_args.vocab, "Vocabulary file")->required();
  gen_cmd->add_option("--nl", gen_nl, "Natural-language description")->required();
  gen_cmd->add_option("--beam", gen_beam, "Beam size (1: greedy)");
  gen_cmd->add_option("--max-steps", gen_steps, "Maximum generated tokens");

  auto* exp_cmd = app.add_subcommand("experiment", "Experiments")->require_subcommand(1);
  bool exp_parallel = false;
  auto* run = exp_cmd->add_subcommand("run", "Baseline plus every configured variant");
  run->add_flag("--parallel", exp_parallel, "Run variants in parallel workers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*extract) graph_extract(g, graph_args);
    if (*tok_train) tokenizer_train(g, tok_corpus, tok_size);
    if (*pretrain) gnn_pretrain(g, gnn_variant);
    if (*train_cmd) train(g, train_variant);
    if (*eval_cmd) eval(g, eval_args, eval_free, eval_limit);
    if (*gen_cmd) generate(g, gen_args, gen_nl, gen_beam, gen_steps);
    if (*run) experiment_run(g, exp_parallel);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
