#pragma once

// Exact match, corpus BLEU and CodeBLEU over mini-language code. All scores
// are percentages in [0, 100]. Every function throws LengthMismatch when the
// hypothesis and reference lists differ in length.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cgfuse::metrics {

/// Collapses whitespace runs to one space and trims both ends.
std::string normalize_whitespace(std::string_view s);

double exact_match(std::span<const std::string> hyps, std::span<const std::string> refs);

/// Code tokens of `s` (lenient lexing: stops at the first invalid byte).
std::vector<std::string> code_tokens(std::string_view s);

/// Clipped n-gram statistics for one order, summed over a corpus.
struct NgramCounts {
  double matched = 0.0;
  double total = 0.0;
};

struct BleuStats {
  std::vector<NgramCounts> orders;  // index n - 1
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;

  void add(const BleuStats& other);
  /// Geometric mean of the precisions times the brevity penalty. When any
  /// order has zero matches, orders n > 1 use (matched + 1) / (total + 1).
  double score() const;
};

/// Keyword unigrams count `keyword_weight` times in both the clipped
/// matches and the hypothesis total; higher orders are unweighted.
BleuStats bleu_stats(std::span<const std::string> hyp, std::span<const std::string> ref, std::size_t max_n = 4,
                     double keyword_weight = 1.0);

double bleu(std::span<const std::string> hyps, std::span<const std::string> refs, std::size_t max_n = 4);

inline constexpr double kKeywordWeight = 5.0;
inline constexpr std::size_t kSubtreeDepth = 3;

struct ExampleScores {
  bool exact = false;
  double bleu = 0.0;
  double weighted_ngram = 0.0;
  /// Matched / reference counts; syntax and dataflow fall to zero matches
  /// when the hypothesis cannot be processed.
  std::size_t subtrees_matched = 0;
  std::size_t subtrees_total = 0;
  std::size_t edges_matched = 0;
  std::size_t edges_total = 0;
};

struct EvalReport {
  double bleu = 0.0;
  double codebleu = 0.0;
  double ngram = 0.0;
  double weighted_ngram = 0.0;
  double syntax = 0.0;
  double dataflow = 0.0;
  double em = 0.0;
  std::vector<ExampleScores> examples;

  /// "key = value" lines with four decimals, then one line per example.
  std::string to_text() const;
};

/// Multiset of depth-bounded kind-labelled subtree shapes rooted at every
/// syntax node of the tolerant parse.
std::vector<std::string> subtree_shapes(std::string_view code, std::size_t depth = kSubtreeDepth);

/// Dataflow edges of the tolerant parse as (relation, from-name, to-name).
std::vector<std::string> dataflow_signatures(std::string_view code);

/// Syntax and dataflow matches are corpus ratios; dataflow is 100 when no
/// reference has an edge.
EvalReport evaluate(std::span<const std::string> hyps, std::span<const std::string> refs);

/// Sub-scores and aggregate only.
EvalReport codebleu(std::span<const std::string> hyps, std::span<const std::string> refs);

/// Aligned plain-text table with columns Model, BLEU, CodeBLEU, EM.
std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows);

}  // namespace cgfuse::metrics
