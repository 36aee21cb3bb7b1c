#pragma once

// Subword vocabulary shared by the transformer and the GNN terminal
// initialisation. Text is pre-split into units (camelCase humps, underscore,
// digit runs, single symbols, whitespace; one leading space is glued to the
// following unit), pair merges are learned inside units, and encoding is a
// greedy longest match per unit. Every byte is a piece, so nothing is UNK.

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cgfuse::tokenizer {

using TokenId = std::size_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kMask = 4;
inline constexpr std::size_t kReserved = 5;
inline constexpr std::size_t kMinVocabSize = 300;
inline constexpr std::size_t kDefaultVocabSize = 4096;

class Vocab {
 public:
  /// Reserved ids plus the 256 single-byte pieces.
  Vocab();

  std::size_t size() const noexcept { return pieces_.size(); }
  std::optional<TokenId> find(std::string_view piece) const;
  const std::string& piece(TokenId id) const;
  std::size_t max_piece_length() const noexcept { return max_len_; }
  bool is_reserved(TokenId id) const noexcept { return id < kReserved; }

  /// Appends a new piece; returns its id (existing id if already present).
  TokenId add(std::string piece);

  /// One escaped piece per line for ids >= kReserved.
  void write(std::ostream& out) const;
  static Vocab read(std::istream& in);
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  bool operator==(const Vocab& o) const { return pieces_ == o.pieces_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> ids_;
  std::size_t max_len_ = 1;
};

/// Pre-split units; concatenating them gives back `text`.
std::vector<std::string> presplit(std::string_view text);

/// Throws EmptyCorpus when the corpus has no characters and UsageError when
/// target_size < kMinVocabSize.
Vocab train_vocab(std::span<const std::string> corpus, std::size_t target_size = kDefaultVocabSize);

struct Encoded {
  std::vector<TokenId> ids;
  /// Per subtoken: index of the frontend code token it came from. Filled only
  /// when encoding with provenance; nullopt for whitespace-only subtokens and
  /// for text past the first byte the code lexer rejects.
  std::vector<std::optional<std::size_t>> provenance;
};

Encoded encode(std::string_view text, const Vocab& vocab, bool with_provenance = false);
/// Provenance of already-encoded ids against the code lexer run on their
/// decoded text; reserved ids get nullopt.
std::vector<std::optional<std::size_t>> provenance(std::span<const TokenId> ids, const Vocab& vocab);
/// Concatenates pieces, skipping reserved ids.
std::string decode(std::span<const TokenId> ids, const Vocab& vocab);

}  // namespace cgfuse::tokenizer
