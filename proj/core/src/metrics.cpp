#include "cgfuse/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "cgfuse/code_graph.hpp"
#include "cgfuse/errors.hpp"
#include "cgfuse/frontend.hpp"

namespace cgfuse::metrics {

namespace fe = cgfuse::frontend;

namespace {

void check_lengths(std::size_t h, std::size_t r) {
  if (h != r)
    throw LengthMismatch(std::to_string(h) + " hypotheses for " + std::to_string(r) + " references");
}

template <typename T>
std::size_t multiset_overlap(std::vector<T> a, std::vector<T> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<T> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  return common.size();
}

double percent(double num, double den) { return den == 0.0 ? 100.0 : 100.0 * num / den; }

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void shape(const fe::Ast& ast, std::size_t node, std::size_t depth, std::string& out) {
  const auto& n = ast.nodes[node];
  out += '(';
  out += fe::to_string(n.kind);
  if (depth > 1)
    for (auto c : n.children) {
      out += ' ';
      shape(ast, c, depth - 1, out);
    }
  out += ')';
}

}  // namespace

std::string normalize_whitespace(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending = !out.empty();
      continue;
    }
    if (pending) out += ' ';
    pending = false;
    out += c;
  }
  return out;
}

double exact_match(std::span<const std::string> hyps, std::span<const std::string> refs) {
  check_lengths(hyps.size(), refs.size());
  if (hyps.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i)
    hits += normalize_whitespace(hyps[i]) == normalize_whitespace(refs[i]);
  return 100.0 * static_cast<double>(hits) / static_cast<double>(hyps.size());
}

std::vector<std::string> code_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (auto& t : fe::tokenize_lenient(s)) out.push_back(std::move(t.text));
  return out;
}

void BleuStats::add(const BleuStats& other) {
  if (orders.size() < other.orders.size()) orders.resize(other.orders.size());
  for (std::size_t n = 0; n < other.orders.size(); ++n) {
    orders[n].matched += other.orders[n].matched;
    orders[n].total += other.orders[n].total;
  }
  hyp_length += other.hyp_length;
  ref_length += other.ref_length;
}

double BleuStats::score() const {
  if (hyp_length == 0) return ref_length == 0 ? 100.0 : 0.0;
  const bool smooth = std::any_of(orders.begin(), orders.end(), [](const NgramCounts& c) { return c.matched == 0.0; });
  double log_sum = 0.0;
  for (std::size_t n = 0; n < orders.size(); ++n) {
    double m = orders[n].matched, t = orders[n].total;
    if (n > 0 && smooth) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_sum += std::log(m / t);
  }
  const double c = static_cast<double>(hyp_length), r = static_cast<double>(ref_length);
  const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_sum / static_cast<double>(orders.size()));
}

BleuStats bleu_stats(std::span<const std::string> hyp, std::span<const std::string> ref, std::size_t max_n,
                     double keyword_weight) {
  if (max_n == 0) throw UsageError("BLEU order must be positive");
  BleuStats s;
  s.orders.resize(max_n);
  s.hyp_length = hyp.size();
  s.ref_length = ref.size();
  for (std::size_t n = 1; n <= max_n; ++n) {
    std::map<std::vector<std::string>, std::size_t> hc, rc;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hc[{hyp.begin() + i, hyp.begin() + i + n}];
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++rc[{ref.begin() + i, ref.begin() + i + n}];
    auto& o = s.orders[n - 1];
    for (const auto& [gram, count] : hc) {
      const double w = n == 1 && fe::is_keyword(gram[0]) ? keyword_weight : 1.0;
      auto it = rc.find(gram);
      const std::size_t clipped = it == rc.end() ? 0 : std::min(count, it->second);
      o.matched += w * static_cast<double>(clipped);
      o.total += w * static_cast<double>(count);
    }
  }
  return s;
}

double bleu(std::span<const std::string> hyps, std::span<const std::string> refs, std::size_t max_n) {
  check_lengths(hyps.size(), refs.size());
  BleuStats total;
  total.orders.resize(max_n);
  for (std::size_t i = 0; i < hyps.size(); ++i) total.add(bleu_stats(code_tokens(hyps[i]), code_tokens(refs[i]), max_n));
  return total.score();
}

std::vector<std::string> subtree_shapes(std::string_view code, std::size_t depth) {
  const auto tokens = fe::tokenize_lenient(code);
  const auto ast = fe::parse(tokens, true);
  std::vector<std::string> out;
  if (ast.empty()) return out;
  for (std::size_t i = 0; i < ast.nodes.size(); ++i) {
    if (fe::is_leaf_kind(ast.nodes[i].kind)) continue;
    std::string s;
    shape(ast, i, depth, s);
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<std::string> dataflow_signatures(std::string_view code) {
  const auto tokens = fe::tokenize_lenient(code);
  const auto g = graph::build_code_graph(fe::parse(tokens, true), tokens);
  std::vector<std::string> out;
  for (const auto& e : g.edges) {
    if (e.rel == graph::Relation::P) continue;
    out.push_back(std::string(graph::to_string(e.rel)) + ' ' + g.nodes[e.src].token->text + ' ' +
                  g.nodes[e.dst].token->text);
  }
  return out;
}

EvalReport evaluate(std::span<const std::string> hyps, std::span<const std::string> refs) {
  check_lengths(hyps.size(), refs.size());
  EvalReport rep;
  BleuStats plain, weighted;
  plain.orders.resize(4);
  weighted.orders.resize(4);
  std::size_t exact = 0, st_m = 0, st_t = 0, df_m = 0, df_t = 0;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    ExampleScores ex;
    ex.exact = normalize_whitespace(hyps[i]) == normalize_whitespace(refs[i]);
    const auto ht = code_tokens(hyps[i]), rt = code_tokens(refs[i]);
    const auto p = bleu_stats(ht, rt);
    const auto w = bleu_stats(ht, rt, 4, kKeywordWeight);
    ex.bleu = p.score();
    ex.weighted_ngram = w.score();
    plain.add(p);
    weighted.add(w);

    const auto ref_shapes = subtree_shapes(refs[i]);
    const auto ref_edges = dataflow_signatures(refs[i]);
    ex.subtrees_total = ref_shapes.size();
    ex.edges_total = ref_edges.size();
    try {
      ex.subtrees_matched = multiset_overlap(subtree_shapes(hyps[i]), ref_shapes);
      ex.edges_matched = multiset_overlap(dataflow_signatures(hyps[i]), ref_edges);
    } catch (const DataError&) {
      ex.subtrees_matched = 0;
      ex.edges_matched = 0;
    }
    exact += ex.exact;
    st_m += ex.subtrees_matched;
    st_t += ex.subtrees_total;
    df_m += ex.edges_matched;
    df_t += ex.edges_total;
    rep.examples.push_back(ex);
  }
  rep.em = hyps.empty() ? 0.0 : 100.0 * static_cast<double>(exact) / static_cast<double>(hyps.size());
  rep.ngram = plain.score();
  rep.bleu = rep.ngram;
  rep.weighted_ngram = weighted.score();
  rep.syntax = percent(static_cast<double>(st_m), static_cast<double>(st_t));
  rep.dataflow = percent(static_cast<double>(df_m), static_cast<double>(df_t));
  rep.codebleu = 0.25 * (rep.ngram + rep.weighted_ngram + rep.syntax + rep.dataflow);
  return rep;
}

EvalReport codebleu(std::span<const std::string> hyps, std::span<const std::string> refs) {
  auto r = evaluate(hyps, refs);
  r.examples.clear();
  return r;
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out << "bleu = " << fixed(bleu, 4) << '\n'
      << "codebleu = " << fixed(codebleu, 4) << '\n'
      << "ngram = " << fixed(ngram, 4) << '\n'
      << "weighted_ngram = " << fixed(weighted_ngram, 4) << '\n'
      << "syntax = " << fixed(syntax, 4) << '\n'
      << "dataflow = " << fixed(dataflow, 4) << '\n'
      << "em = " << fixed(em, 4) << '\n';
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    out << "example " << i << " exact " << e.exact << " bleu " << fixed(e.bleu, 4) << " weighted_ngram "
        << fixed(e.weighted_ngram, 4) << " syntax " << e.subtrees_matched << '/' << e.subtrees_total << " dataflow "
        << e.edges_matched << '/' << e.edges_total << '\n';
  }
  return out.str();
}

std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::size_t name_w = 5;
  for (const auto& [name, r] : rows) name_w = std::max(name_w, name.size());
  auto pad = [](std::string s, std::size_t w, bool left) {
    if (s.size() >= w) return s;
    return left ? s + std::string(w - s.size(), ' ') : std::string(w - s.size(), ' ') + s;
  };
  std::ostringstream out;
  out << pad("Model", name_w, true) << "  " << pad("BLEU", 8, false) << "  " << pad("CodeBLEU", 8, false) << "  "
      << pad("EM", 8, false) << '\n';
  out << std::string(name_w + 30, '-') << '\n';
  for (const auto& [name, r] : rows)
    out << pad(name, name_w, true) << "  " << pad(fixed(r.bleu, 2), 8, false) << "  "
        << pad(fixed(r.codebleu, 2), 8, false) << "  " << pad(fixed(r.em, 2), 8, false) << '\n';
  return out.str();
}

}  // namespace cgfuse::metrics
