#include "cgfuse/harness.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <sstream>

#include <json.hpp>

#include "cgfuse/errors.hpp"
#include "cgfuse/frontend.hpp"
#include "cgfuse/kv_text.hpp"

namespace cgfuse::harness {

namespace ts = cgfuse::tensor;
using tokenizer::TokenId;

// ---- corpus I/O --------------------------------------------------------------

std::vector<Example> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read corpus " + path);
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path + ":" + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + "malformed record (" + e.what() + ")");
    }
    if (!j.is_object()) throw FormatError(where + "record is not an object");
    for (const char* key : {"nl", "code"})
      if (!j.contains(key) || !j[key].is_string()) throw FormatError(where + "missing string field '" + key + "'");
    Example ex{j["nl"].get<std::string>(), j["code"].get<std::string>()};
    if (ex.nl.empty() || ex.code.empty()) throw FormatError(where + "empty nl or code");
    out.push_back(std::move(ex));
  }
  return out;
}

void save_corpus(const std::string& path, std::span<const Example> examples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write corpus " + path);
  for (const auto& e : examples) out << nlohmann::json{{"nl", e.nl}, {"code", e.code}}.dump() << '\n';
}

// ---- synthetic corpus -----------------------------------------------------------

namespace {

const std::vector<std::string> kNouns = {"item",  "count", "total",  "value",  "size",    "price", "score",
                                         "index", "limit", "offset", "weight", "level",   "amount", "rate",
                                         "width", "height", "length", "balance", "margin", "step"};
const std::vector<std::string> kPrefixes = {"", "max", "min", "base", "cur", "next", "prev", "raw", "net", "old"};

std::string capitalize(std::string s) {
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

struct Name {
  std::string id;     // camelCase identifier
  std::string words;  // space separated
};

class Synth {
 public:
  explicit Synth(std::uint64_t seed) : rng_(seed, 0x53594e) {}

  Example next() {
    used_.clear();
    switch (rng_.below(9)) {
      case 0: {
        auto a = name();
        return {"get the " + a.words, "int get" + capitalize(a.id) + "() { return " + a.id + "; }"};
      }
      case 1: {
        auto a = name(), b = name(), r = name();
        return {"add " + a.words + " and " + b.words + " into " + r.words,
                "int compute" + capitalize(r.id) + "(int " + a.id + ", int " + b.id + ") { int " + r.id + " = " +
                    a.id + " + " + b.id + "; return " + r.id + "; }"};
      }
      case 2: {
        auto a = name(), b = name(), r = name();
        const auto k = std::to_string(2 + rng_.below(8));
        return {"scale " + a.words + " by " + k + " plus " + b.words + " as " + r.words,
                "int compute" + capitalize(r.id) + "(int " + a.id + ", int " + b.id + ") { int " + r.id + " = " +
                    a.id + " * " + k + " + " + b.id + "; return " + r.id + "; }"};
      }
      case 3: {
        auto a = name(), b = name();
        return {"return the larger of " + a.words + " and " + b.words,
                "int max" + capitalize(a.id) + "(int " + a.id + ", int " + b.id + ") { if (" + a.id + " > " + b.id +
                    ") { return " + a.id + "; } return " + b.id + "; }"};
      }
      case 4: {
        auto a = name(), r = name();
        const auto k = std::to_string(10 + rng_.below(90));
        return {"clamp " + a.words + " to at most " + k + " in " + r.words,
                "int clamp" + capitalize(a.id) + "(int " + a.id + ") { int " + r.id + " = " + a.id + "; if (" + r.id +
                    " > " + k + ") { " + r.id + " = " + k + "; } return " + r.id + "; }"};
      }
      case 5: {
        auto a = name(), r = name();
        return {"sum integers below " + a.words + " into " + r.words,
                "int sum" + capitalize(r.id) + "(int " + a.id + ") { int " + r.id + " = 0; int i = 0; while (i < " +
                    a.id + ") { " + r.id + " = " + r.id + " + i; i = i + 1; } return " + r.id + "; }"};
      }
      case 6: {
        auto a = name();
        const auto k = std::to_string(2 + rng_.below(8));
        return {"count steps of " + k + " until " + a.words,
                "int count" + capitalize(a.id) + "(int " + a.id + ") { int steps = 0; int pos = 0; while (pos < " +
                    a.id + ") { pos = pos + " + k + "; steps = steps + 1; } return steps; }"};
      }
      case 7: {
        auto a = name(), b = name();
        return {"increase " + a.words + " by " + b.words,
                "void add" + capitalize(a.id) + "(int " + b.id + ") { " + a.id + " = " + a.id + " + " + b.id + "; }"};
      }
      default: {
        auto a = name(), b = name(), r = name();
        return {"positive difference of " + a.words + " and " + b.words + " as " + r.words,
                "int diff" + capitalize(r.id) + "(int " + a.id + ", int " + b.id + ") { int " + r.id + " = " + a.id +
                    " - " + b.id + "; if (" + r.id + " < 0) { " + r.id + " = 0 - " + r.id + "; } return " + r.id +
                    "; }"};
      }
    }
  }

 private:
  // Distinct within one example.
  Name name() {
    for (;;) {
      const auto& p = kPrefixes[rng_.below(kPrefixes.size())];
      const auto& n = kNouns[rng_.below(kNouns.size())];
      // Docstrings leave the qualifier out half of the time.
      const bool spoken = rng_.below(2) == 0;
      Name out = p.empty() ? Name{n, n} : Name{p + capitalize(n), spoken ? p + " " + n : n};
      if (std::find(used_.begin(), used_.end(), out.id) != used_.end()) continue;
      used_.push_back(out.id);
      return out;
    }
  }

  ts::CounterRng rng_;
  std::vector<std::string> used_;
};

}  // namespace

std::vector<Example> generate_synthetic(std::size_t n, std::uint64_t seed) {
  Synth s(seed);
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(s.next());
  return out;
}

// ---- configuration ------------------------------------------------------------

namespace {

const std::initializer_list<std::string_view> kGnnKeys = {"arch", "layers", "hidden_dim", "relational", "epsilon"};
const std::initializer_list<std::string_view> kFusionKeys = {"lambda", "mode", "sites", "warmup_epochs",
                                                            "rebuild_stride"};

bool in(std::initializer_list<std::string_view> keys, const std::string& k) {
  return std::find(keys.begin(), keys.end(), k) != keys.end();
}

std::string strategy_name(plm::DecodeOptions::Strategy s) {
  return s == plm::DecodeOptions::Strategy::Greedy ? "greedy" : "beam";
}

}  // namespace

ExperimentSpec ExperimentSpec::from_text(std::string_view text) {
  const auto doc = kv::parse(text);
  ExperimentSpec spec;
  for (const auto& name : doc.order) {
    if (name.empty() && doc.section(name).empty()) continue;
    if (name != "experiment" && name != "plm" && name != "train" && name != "pretrain" && name != "decode" &&
        name.rfind("variant.", 0) != 0)
      throw FormatError("unknown config section [" + name + "]");
  }

  const auto& e = doc.section("experiment");
  kv::require_known(e,
                    {"seed", "train", "test", "synthetic_train", "synthetic_test", "vocab_size", "out", "parallel",
                     "free_decoding", "free_decode_limit"},
                    "experiment");
  spec.seed = kv::get_u64(e, "seed", spec.seed);
  spec.train_path = kv::get_string(e, "train", "");
  spec.test_path = kv::get_string(e, "test", "");
  spec.synthetic_train = kv::get_size(e, "synthetic_train", spec.synthetic_train);
  spec.synthetic_test = kv::get_size(e, "synthetic_test", spec.synthetic_test);
  spec.vocab_size = kv::get_size(e, "vocab_size", spec.vocab_size);
  spec.out_dir = kv::get_string(e, "out", "");
  spec.parallel = kv::get_bool(e, "parallel", false);
  spec.free_decoding = kv::get_bool(e, "free_decoding", true);
  spec.free_decode_limit = kv::get_size(e, "free_decode_limit", 0);
  if (spec.train_path.empty() != spec.test_path.empty())
    throw UsageError("[experiment] needs both train and test paths, or neither");

  spec.plm = plm::PlmConfig::from_section(doc.section("plm"));

  const auto& t = doc.section("train");
  kv::require_known(t, {"epochs", "batch_size", "lr", "clip"}, "train");
  spec.train.epochs = kv::get_size(t, "epochs", spec.train.epochs);
  spec.train.batch_size = kv::get_size(t, "batch_size", spec.train.batch_size);
  spec.train.lr = static_cast<float>(kv::get_double(t, "lr", spec.train.lr));
  spec.train.clip = static_cast<float>(kv::get_double(t, "clip", spec.train.clip));

  const auto& p = doc.section("pretrain");
  kv::require_known(p, {"epochs", "mask_ratio", "batch_graphs", "lr", "heldout_fraction"}, "pretrain");
  spec.pretrain.epochs = kv::get_size(p, "epochs", spec.pretrain.epochs);
  spec.pretrain.mask_ratio = kv::get_double(p, "mask_ratio", spec.pretrain.mask_ratio);
  spec.pretrain.batch_graphs = kv::get_size(p, "batch_graphs", spec.pretrain.batch_graphs);
  spec.pretrain.lr = static_cast<float>(kv::get_double(p, "lr", spec.pretrain.lr));
  spec.pretrain.heldout_fraction = kv::get_double(p, "heldout_fraction", spec.pretrain.heldout_fraction);

  const auto& d = doc.section("decode");
  kv::require_known(d, {"strategy", "beam_size", "max_steps"}, "decode");
  const auto strategy = kv::get_string(d, "strategy", "greedy");
  if (strategy == "greedy")
    spec.decode.strategy = plm::DecodeOptions::Strategy::Greedy;
  else if (strategy == "beam")
    spec.decode.strategy = plm::DecodeOptions::Strategy::Beam;
  else
    throw UsageError("decode strategy must be greedy or beam, got '" + strategy + "'");
  spec.decode.beam_size = kv::get_size(d, "beam_size", spec.decode.beam_size);
  spec.decode.max_steps = kv::get_size(d, "max_steps", spec.decode.max_steps);

  for (const auto& name : doc.order) {
    if (name.rfind("variant.", 0) != 0) continue;
    VariantSpec v;
    v.name = name.substr(8);
    if (v.name.empty() || v.name == "baseline") throw UsageError("variant name '" + v.name + "' is reserved or empty");
    kv::Section g, f;
    for (const auto& [k, val] : doc.section(name)) {
      if (in(kGnnKeys, k))
        g[k] = val;
      else if (in(kFusionKeys, k))
        f[k] = val;
      else
        throw FormatError("unknown key '" + k + "' in section [" + name + "]");
    }
    if (!f.count("lambda")) throw UsageError("[" + name + "] needs lambda; the baseline is implicit");
    if (!g.count("hidden_dim")) g["hidden_dim"] = std::to_string(spec.plm.hidden_dim);
    v.gnn = gnn::GnnConfig::from_section(g);
    v.plan = fusion::FusionPlan::from_section(f);
    v.plan.validate();
    spec.variants.push_back(std::move(v));
  }
  return spec;
}

ExperimentSpec ExperimentSpec::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_text(ss.str());
}

std::string ExperimentSpec::to_text() const {
  std::ostringstream out;
  out << "[experiment]\nseed = " << seed << '\n';
  if (!train_path.empty()) out << "train = " << train_path << "\ntest = " << test_path << '\n';
  out << "synthetic_train = " << synthetic_train << "\nsynthetic_test = " << synthetic_test
      << "\nvocab_size = " << vocab_size << '\n';
  if (!out_dir.empty()) out << "out = " << out_dir << '\n';
  out << "parallel = " << (parallel ? "true" : "false") << "\nfree_decoding = " << (free_decoding ? "true" : "false")
      << "\nfree_decode_limit = " << free_decode_limit << "\n\n[plm]\n";
  auto plm_text = plm.to_text();
  // vocab_size comes from the tokenizer at run time.
  std::istringstream lines(plm_text);
  for (std::string l; std::getline(lines, l);)
    if (l.rfind("vocab_size", 0) != 0) out << l << '\n';
  out << "\n[train]\nepochs = " << train.epochs << "\nbatch_size = " << train.batch_size << "\nlr = " << train.lr
      << "\nclip = " << train.clip << "\n\n[pretrain]\nepochs = " << pretrain.epochs
      << "\nmask_ratio = " << pretrain.mask_ratio << "\nbatch_graphs = " << pretrain.batch_graphs
      << "\nlr = " << pretrain.lr << "\nheldout_fraction = " << pretrain.heldout_fraction
      << "\n\n[decode]\nstrategy = " << strategy_name(decode.strategy) << "\nbeam_size = " << decode.beam_size
      << "\nmax_steps = " << decode.max_steps << '\n';
  for (const auto& v : variants) out << "\n[variant." << v.name << "]\n" << v.gnn.to_text() << v.plan.to_text();
  return out.str();
}

// ---- data ------------------------------------------------------------------------

PreparedData prepare_data(std::vector<Example> train, std::vector<Example> test, const tokenizer::Vocab& vocab,
                          std::size_t max_len) {
  PreparedData d;
  d.vocab = vocab;
  auto keep = [&](std::vector<Example>& raw, std::vector<Example>& kept_raw, std::vector<fusion::FusedExample>& kept) {
    for (auto& ex : raw) {
      auto fe = fusion::make_example(ex.nl, ex.code, vocab);
      if (!fe.graph) {
        ++d.skipped_unparsable;
        continue;
      }
      if (fe.text.source.size() > max_len || fe.text.target.size() + 1 > max_len) {
        ++d.skipped_too_long;
        continue;
      }
      kept.push_back(std::move(fe));
      kept_raw.push_back(std::move(ex));
    }
  };
  keep(train, d.train_raw, d.train);
  keep(test, d.test_raw, d.test);
  if (d.train.empty()) throw EmptyCorpus("no usable training examples");
  return d;
}

std::pair<std::vector<Example>, std::vector<Example>> load_splits(const ExperimentSpec& spec) {
  if (!spec.train_path.empty()) return {load_corpus(spec.train_path), load_corpus(spec.test_path)};
  auto all = generate_synthetic(spec.synthetic_train + spec.synthetic_test, spec.seed);
  std::vector<Example> test(all.begin() + static_cast<std::ptrdiff_t>(spec.synthetic_train), all.end());
  all.resize(spec.synthetic_train);
  return {std::move(all), std::move(test)};
}

tokenizer::Vocab train_tokenizer(std::span<const Example> train, std::size_t vocab_size) {
  std::vector<std::string> texts;
  for (const auto& e : train) {
    texts.push_back(e.nl);
    texts.push_back(e.code);
  }
  if (texts.empty()) throw EmptyCorpus("training corpus is empty");
  return tokenizer::train_vocab(texts, vocab_size);
}

PreparedData load_data(const ExperimentSpec& spec) {
  auto [train, test] = load_splits(spec);
  const auto vocab = train_tokenizer(train, spec.vocab_size);
  return prepare_data(std::move(train), std::move(test), vocab, spec.plm.max_len);
}

PreparedData load_data(const ExperimentSpec& spec, const tokenizer::Vocab& vocab, std::size_t max_len) {
  auto [train, test] = load_splits(spec);
  return prepare_data(std::move(train), std::move(test), vocab, max_len);
}

// ---- training and evaluation -----------------------------------------------------

namespace {

std::vector<plm::Example> texts_of(std::span<const fusion::FusedExample> ex) {
  std::vector<plm::Example> out;
  out.reserve(ex.size());
  for (const auto& e : ex) out.push_back(e.text);
  return out;
}

plm::PlmConfig model_config(const ExperimentSpec& spec, const PreparedData& data) {
  auto c = spec.plm;
  c.vocab_size = data.vocab.size();
  return c;
}

plm::Plm fresh_plm(const ExperimentSpec& spec, const PreparedData& data) {
  auto rng = ts::CounterRng(spec.seed).fork("plm.init");
  return plm::Plm(model_config(spec, data), rng);
}

std::vector<std::string> decode_all(const std::vector<std::vector<TokenId>>& ids, const tokenizer::Vocab& vocab) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (const auto& s : ids) out.push_back(tokenizer::decode(s, vocab));
  return out;
}

std::vector<std::string> refs_of(const PreparedData& data, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(data.test_raw[i].code);
  return out;
}

std::size_t limit_of(const PreparedData& data, std::size_t limit) {
  return limit == 0 ? data.test.size() : std::min(limit, data.test.size());
}

}  // namespace

plm::Plm train_baseline(const ExperimentSpec& spec, const PreparedData& data, std::vector<double>* losses) {
  auto model = fresh_plm(spec, data);
  auto l = plm::train_plm(model, texts_of(data.train), spec.train, spec.seed);
  if (losses) *losses = std::move(l);
  return model;
}

gnn::GnnModel pretrain_expert(const ExperimentSpec& spec, const gnn::GnnConfig& cfg, const PreparedData& data,
                              const plm::Plm& init_plm, double* accuracy) {
  auto rng = ts::CounterRng(spec.seed).fork("gnn.init");
  gnn::GnnModel expert(cfg, rng);
  if (spec.pretrain.epochs == 0) return expert;
  std::vector<graph::CodeGraph> graphs;
  graphs.reserve(data.train.size());
  for (const auto& e : data.train) graphs.push_back(*e.graph);
  const auto report =
      gnn::pretrain_nodes(expert, graphs, init_plm.embeddings().detach(), data.vocab, spec.pretrain, spec.seed);
  if (accuracy) *accuracy = report.final_accuracy();
  return expert;
}

fusion::FusedModel train_fused(const ExperimentSpec& spec, const VariantSpec& variant, const PreparedData& data,
                               double* gnn_accuracy, std::vector<double>* losses) {
  auto plm_model = fresh_plm(spec, data);
  const auto expert = pretrain_expert(spec, variant.gnn, data, plm_model, gnn_accuracy);
  const std::size_t n_sites = variant.plan.sites.empty() ? 1 : variant.plan.sites.size();
  std::vector<gnn::GnnModel> experts;
  for (std::size_t i = 0; i < n_sites; ++i) {
    auto rng = ts::CounterRng(spec.seed).fork("gnn.init");
    gnn::GnnModel copy(variant.gnn, rng);
    copy.params().load_values(expert.params());
    experts.push_back(std::move(copy));
  }
  fusion::FusedModel model(std::move(plm_model), std::move(experts), variant.plan);
  auto report = fusion::fused_train(model, data.train, spec.train, spec.seed, data.vocab);
  if (losses) *losses = std::move(report.joint_loss);
  return model;
}

metrics::EvalReport evaluate_teacher_forced(const plm::Plm& model, const PreparedData& data) {
  const auto preds = plm::teacher_forced_argmax(model, texts_of(data.test));
  return metrics::evaluate(decode_all(preds, data.vocab), refs_of(data, data.test.size()));
}

metrics::EvalReport evaluate_teacher_forced(const fusion::FusedModel& model, const PreparedData& data) {
  auto& m = const_cast<fusion::FusedModel&>(model);
  const auto saved = m.plan().mode;
  m.plan().mode = fusion::Mode::GoldFullGraph;
  std::vector<std::vector<TokenId>> preds;
  try {
    preds = fusion::teacher_forced_predict(m, data.test, data.vocab);
  } catch (...) {
    m.plan().mode = saved;
    throw;
  }
  m.plan().mode = saved;
  return metrics::evaluate(decode_all(preds, data.vocab), refs_of(data, data.test.size()));
}

metrics::EvalReport evaluate_free(const plm::Plm& model, const PreparedData& data, const plm::DecodeOptions& opt,
                                  std::size_t limit) {
  const std::size_t n = limit_of(data, limit);
  std::vector<std::vector<TokenId>> preds;
  for (std::size_t i = 0; i < n; ++i) preds.push_back(plm::generate(model, data.test[i].text.source, opt));
  return metrics::evaluate(decode_all(preds, data.vocab), refs_of(data, n));
}

metrics::EvalReport evaluate_free(const fusion::FusedModel& model, const PreparedData& data,
                                  const plm::DecodeOptions& opt, std::size_t limit) {
  const std::size_t n = limit_of(data, limit);
  auto& m = const_cast<fusion::FusedModel&>(model);
  const auto saved = m.plan().mode;
  m.plan().mode = fusion::Mode::CausalPrefix;
  std::vector<std::vector<TokenId>> preds;
  try {
    for (std::size_t i = 0; i < n; ++i)
      preds.push_back(fusion::fused_generate(m, data.test[i].text.source, data.vocab, opt));
  } catch (...) {
    m.plan().mode = saved;
    throw;
  }
  m.plan().mode = saved;
  return metrics::evaluate(decode_all(preds, data.vocab), refs_of(data, n));
}

// ---- experiment ------------------------------------------------------------------

namespace {

std::string fmt(double v, int digits) {
  std::ostringstream o;
  o.setf(std::ios::fixed);
  o.precision(digits);
  o << v;
  return o.str();
}

// Re-throws with the variant's name, keeping the error category.
[[noreturn]] void rethrow_for(const std::string& variant) {
  const std::string prefix = "variant " + variant + ": ";
  try {
    throw;
  } catch (const UsageError& e) {
    throw UsageError(prefix + e.what());
  } catch (const DataError& e) {
    throw DataError(prefix + e.what());
  } catch (const InvariantViolation& e) {
    throw InvariantViolation(prefix + e.what());
  } catch (const Error& e) {
    throw Error(prefix + e.what());
  }
}

VariantResult run_row(const ExperimentSpec& spec, const PreparedData& data, const VariantSpec* variant) {
  VariantResult r;
  r.name = variant ? variant->name : "baseline";
  try {
    if (!variant) {
      auto model = train_baseline(spec, data, &r.train_loss);
      r.teacher_forced = evaluate_teacher_forced(model, data);
      if (spec.free_decoding) r.free = evaluate_free(model, data, spec.decode, spec.free_decode_limit);
      if (!spec.out_dir.empty()) plm::save_plm((std::filesystem::path(spec.out_dir) / "baseline.ckpt").string(), model);
    } else {
      r.baseline = false;
      r.gnn = variant->gnn;
      r.lambda = variant->plan.lambda;
      auto model = train_fused(spec, *variant, data, &r.gnn_accuracy, &r.train_loss);
      r.teacher_forced = evaluate_teacher_forced(model, data);
      if (spec.free_decoding) r.free = evaluate_free(model, data, spec.decode, spec.free_decode_limit);
      if (!spec.out_dir.empty()) model.save((std::filesystem::path(spec.out_dir) / (r.name + ".ckpt")).string());
    }
  } catch (const Error&) {
    rethrow_for(r.name);
  }
  return r;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  if (!spec.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(spec.out_dir, ec);
    if (ec) throw IoError("cannot create " + spec.out_dir + ": " + ec.message());
  }
  const auto data = load_data(spec);
  ExperimentResult res;
  res.train_examples = data.train.size();
  res.test_examples = data.test.size();
  res.skipped_unparsable = data.skipped_unparsable;
  res.skipped_too_long = data.skipped_too_long;
  if (data.test.empty()) throw EmptyCorpus("no usable test examples");

  std::vector<const VariantSpec*> jobs{nullptr};
  for (const auto& v : spec.variants) jobs.push_back(&v);
  if (spec.parallel) {
    std::vector<std::future<VariantResult>> futures;
    for (auto* v : jobs) futures.push_back(std::async(std::launch::async, run_row, std::cref(spec), std::cref(data), v));
    for (auto& f : futures) res.rows.push_back(f.get());
  } else {
    for (auto* v : jobs) res.rows.push_back(run_row(spec, data, v));
  }

  if (!spec.out_dir.empty()) {
    const std::filesystem::path dir(spec.out_dir);
    write_file(dir / "table.txt", res.table());
    write_file(dir / "results.txt", res.to_text());
    data.vocab.save((dir / "vocab.txt").string());
  }
  return res;
}

std::string ExperimentResult::table() const {
  const bool fused = std::any_of(rows.begin(), rows.end(), [](const VariantResult& r) { return !r.baseline; });
  const bool free = std::any_of(rows.begin(), rows.end(), [](const VariantResult& r) { return r.free.has_value(); });
  std::vector<std::string> header{"Model"};
  if (fused) header.insert(header.end(), {"Arch", "Layers", "Lambda", "GNN-Acc"});
  header.insert(header.end(), {"TF-BLEU", "TF-CodeBLEU", "TF-EM"});
  if (free) header.insert(header.end(), {"BLEU", "CodeBLEU", "EM"});

  std::vector<std::vector<std::string>> cells{header};
  for (const auto& r : rows) {
    std::vector<std::string> c{r.name};
    if (fused) {
      if (r.baseline)
        c.insert(c.end(), {"-", "-", "-", "-"});
      else
        c.insert(c.end(), {std::string(gnn::to_string(r.gnn.arch)), std::to_string(r.gnn.num_layers),
                           fmt(r.lambda, 2), fmt(100.0 * r.gnn_accuracy, 2)});
    }
    c.insert(c.end(), {fmt(r.teacher_forced.bleu, 2), fmt(r.teacher_forced.codebleu, 2), fmt(r.teacher_forced.em, 2)});
    if (free) {
      if (r.free)
        c.insert(c.end(), {fmt(r.free->bleu, 2), fmt(r.free->codebleu, 2), fmt(r.free->em, 2)});
      else
        c.insert(c.end(), {"-", "-", "-"});
    }
    cells.push_back(std::move(c));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : cells)
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  std::ostringstream out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      const auto& s = cells[r][i];
      const std::string pad(width[i] - s.size(), ' ');
      if (i == 0)
        out << s << pad;
      else
        out << "  " << pad << s;
    }
    out << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      out << std::string(total - 2, '-') << '\n';
    }
  }
  return out.str();
}

std::string ExperimentResult::to_text() const {
  std::ostringstream out;
  out << "train_examples = " << train_examples << "\ntest_examples = " << test_examples
      << "\nskipped_unparsable = " << skipped_unparsable << "\nskipped_too_long = " << skipped_too_long << '\n';
  for (const auto& r : rows) {
    out << "\n[" << r.name << "]\nkind = " << (r.baseline ? "baseline" : "fused") << '\n';
    if (!r.baseline)
      out << "arch = " << gnn::to_string(r.gnn.arch) << "\nlayers = " << r.gnn.num_layers
          << "\nlambda = " << fmt(r.lambda, 4) << "\ngnn_accuracy = " << fmt(r.gnn_accuracy, 4) << '\n';
    out << "final_train_loss = " << fmt(r.train_loss.empty() ? 0.0 : r.train_loss.back(), 6) << '\n';
    auto emit = [&](const std::string& prefix, const metrics::EvalReport& e) {
      out << prefix << "bleu = " << fmt(e.bleu, 4) << '\n'
          << prefix << "codebleu = " << fmt(e.codebleu, 4) << '\n'
          << prefix << "ngram = " << fmt(e.ngram, 4) << '\n'
          << prefix << "weighted_ngram = " << fmt(e.weighted_ngram, 4) << '\n'
          << prefix << "syntax = " << fmt(e.syntax, 4) << '\n'
          << prefix << "dataflow = " << fmt(e.dataflow, 4) << '\n'
          << prefix << "em = " << fmt(e.em, 4) << '\n';
    };
    emit("tf_", r.teacher_forced);
    if (r.free) emit("free_", *r.free);
  }
  return out.str();
}

}  // namespace cgfuse::harness
