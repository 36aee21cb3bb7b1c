#include "cgfuse/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <tuple>

#include "cgfuse/errors.hpp"
#include "cgfuse/frontend.hpp"

namespace cgfuse::tokenizer {

namespace {

enum class CharClass { Space, OtherSpace, Upper, Lower, Digit, Symbol };

CharClass classify(unsigned char c) {
  if (c == ' ') return CharClass::Space;
  if (c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v') return CharClass::OtherSpace;
  if (c >= 'A' && c <= 'Z') return CharClass::Upper;
  if ((c >= 'a' && c <= 'z') || c >= 0x80) return CharClass::Lower;
  if (c >= '0' && c <= '9') return CharClass::Digit;
  return CharClass::Symbol;
}

bool is_ws(unsigned char c) {
  auto k = classify(c);
  return k == CharClass::Space || k == CharClass::OtherSpace;
}

// Unit boundaries as [begin, end) offsets.
std::vector<std::pair<std::size_t, std::size_t>> unit_spans(std::string_view s) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const std::size_t n = s.size();
  auto cls = [&](std::size_t i) { return classify(static_cast<unsigned char>(s[i])); };
  auto glue_space = [&](std::size_t i) { return s[i] == ' ' && i + 1 < n && !is_ws(static_cast<unsigned char>(s[i + 1])); };
  std::size_t pos = 0;
  while (pos < n) {
    const std::size_t start = pos;
    if (glue_space(pos)) {
      ++pos;
    } else if (is_ws(static_cast<unsigned char>(s[pos]))) {
      ++pos;
      while (pos < n && is_ws(static_cast<unsigned char>(s[pos])) && !glue_space(pos)) ++pos;
      out.emplace_back(start, pos);
      continue;
    }
    switch (cls(pos)) {
      case CharClass::Digit:
        while (pos < n && cls(pos) == CharClass::Digit) ++pos;
        break;
      case CharClass::Lower:
        while (pos < n && cls(pos) == CharClass::Lower) ++pos;
        break;
      case CharClass::Upper:
        ++pos;
        if (pos < n && cls(pos) == CharClass::Lower) {
          while (pos < n && cls(pos) == CharClass::Lower) ++pos;
        } else {
          // acronym run, leaving an upper that starts a hump
          while (pos < n && cls(pos) == CharClass::Upper && !(pos + 1 < n && cls(pos + 1) == CharClass::Lower)) ++pos;
        }
        break;
      default:
        ++pos;
        break;
    }
    out.emplace_back(start, pos);
  }
  return out;
}

std::string escape(const std::string& p) {
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char c : p) {
    if (c == '\\') out += "\\\\";
    else if (c == '\n') out += "\\n";
    else if (c == '\t') out += "\\t";
    else if (c == '\r') out += "\\r";
    else if (c < 0x20 || c >= 0x7f) {
      out += "\\x";
      out += hex[c >> 4];
      out += hex[c & 15];
    } else out += static_cast<char>(c);
  }
  return out;
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

std::string unescape(const std::string& line, std::size_t line_no) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] != '\\') {
      out += line[i];
      continue;
    }
    if (++i >= line.size()) throw FormatError("vocab line " + std::to_string(line_no) + ": dangling escape");
    switch (line[i]) {
      case '\\': out += '\\'; break;
      case 'n': out += '\n'; break;
      case 't': out += '\t'; break;
      case 'r': out += '\r'; break;
      case 'x': {
        const int hi = i + 1 < line.size() ? hex_value(line[i + 1]) : -1;
        const int lo = i + 2 < line.size() ? hex_value(line[i + 2]) : -1;
        if (hi < 0 || lo < 0) throw FormatError("vocab line " + std::to_string(line_no) + ": bad hex escape");
        out += static_cast<char>(hi * 16 + lo);
        i += 2;
        break;
      }
      default:
        throw FormatError("vocab line " + std::to_string(line_no) + ": unknown escape");
    }
  }
  return out;
}

// Owner code token of each span: the one holding its first non-whitespace byte.
std::vector<std::optional<std::size_t>> provenance_of_spans(std::string_view text,
                                                            const std::vector<std::pair<std::size_t, std::size_t>>& spans) {
  const auto toks = frontend::tokenize_lenient(text);
  std::vector<std::optional<std::size_t>> out;
  out.reserve(spans.size());
  for (auto [b, e] : spans) {
    std::size_t p = b;
    while (p < e && is_ws(static_cast<unsigned char>(text[p]))) ++p;
    std::optional<std::size_t> owner;
    if (p < e) {
      auto it = std::upper_bound(toks.begin(), toks.end(), p,
                                 [](std::size_t off, const frontend::CodeToken& t) { return off < t.begin; });
      if (it != toks.begin() && p < std::prev(it)->end) owner = static_cast<std::size_t>(std::prev(it) - toks.begin());
    }
    out.push_back(owner);
  }
  return out;
}

}  // namespace

Vocab::Vocab() {
  for (const char* r : {"<pad>", "<s>", "</s>", "<unk>", "<mask>"}) pieces_.emplace_back(r);
  for (int b = 0; b < 256; ++b) add(std::string(1, static_cast<char>(b)));
}

std::optional<TokenId> Vocab::find(std::string_view piece) const {
  auto it = ids_.find(std::string(piece));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocab::piece(TokenId id) const {
  if (id >= pieces_.size()) throw InvariantViolation("token id " + std::to_string(id) + " outside vocabulary");
  return pieces_[id];
}

TokenId Vocab::add(std::string piece) {
  if (auto it = ids_.find(piece); it != ids_.end()) return it->second;
  const TokenId id = pieces_.size();
  max_len_ = std::max(max_len_, piece.size());
  ids_.emplace(piece, id);
  pieces_.push_back(std::move(piece));
  return id;
}

void Vocab::write(std::ostream& out) const {
  for (std::size_t i = kReserved; i < pieces_.size(); ++i) out << escape(pieces_[i]) << '\n';
}

Vocab Vocab::read(std::istream& in) {
  Vocab v;
  v.pieces_.resize(kReserved);
  v.ids_.clear();
  v.max_len_ = 1;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto p = unescape(line, line_no);
    if (p.empty()) throw FormatError("vocab line " + std::to_string(line_no) + ": empty piece");
    if (v.ids_.count(p)) throw FormatError("vocab line " + std::to_string(line_no) + ": duplicate piece");
    v.add(std::move(p));
  }
  for (int b = 0; b < 256; ++b)
    if (!v.ids_.count(std::string(1, static_cast<char>(b))))
      throw FormatError("vocab lacks byte fallback piece " + std::to_string(b));
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write(out);
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  return read(in);
}

std::vector<std::string> presplit(std::string_view text) {
  std::vector<std::string> out;
  for (auto [b, e] : unit_spans(text)) out.emplace_back(text.substr(b, e - b));
  return out;
}

Vocab train_vocab(std::span<const std::string> corpus, std::size_t target_size) {
  if (target_size < kMinVocabSize)
    throw UsageError("vocabulary size " + std::to_string(target_size) + " below minimum " +
                     std::to_string(kMinVocabSize));
  std::map<std::string, std::size_t> unit_counts;
  for (const auto& line : corpus)
    for (auto& u : presplit(line)) ++unit_counts[u];
  if (unit_counts.empty()) throw EmptyCorpus("cannot train a vocabulary on an empty corpus");

  Vocab v;
  struct Word {
    std::vector<TokenId> sym;
    std::size_t count;
  };
  std::vector<Word> words;
  for (const auto& [u, c] : unit_counts) {
    Word w{{}, c};
    for (unsigned char ch : u) w.sym.push_back(*v.find(std::string(1, static_cast<char>(ch))));
    words.push_back(std::move(w));
  }

  auto key = [](TokenId a, TokenId b) { return (static_cast<std::uint64_t>(a) << 32) | b; };
  while (v.size() < target_size) {
    std::unordered_map<std::uint64_t, std::size_t> pairs;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.sym.size(); ++i) pairs[key(w.sym[i], w.sym[i + 1])] += w.count;
    std::uint64_t best = 0;
    std::size_t best_count = 0;
    for (const auto& [k, c] : pairs) {
      if (c < best_count) continue;
      if (c == best_count) {
        auto cand = std::tie(v.piece(k >> 32), v.piece(k & 0xffffffffu));
        auto cur = std::tie(v.piece(best >> 32), v.piece(best & 0xffffffffu));
        if (!(cand < cur)) continue;
      }
      best = k;
      best_count = c;
    }
    if (best_count < 2) break;
    const TokenId a = best >> 32, b = best & 0xffffffffu;
    const TokenId merged = v.add(v.piece(a) + v.piece(b));
    for (auto& w : words) {
      std::vector<TokenId> next;
      next.reserve(w.sym.size());
      for (std::size_t i = 0; i < w.sym.size(); ++i) {
        if (i + 1 < w.sym.size() && w.sym[i] == a && w.sym[i + 1] == b) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(w.sym[i]);
        }
      }
      w.sym = std::move(next);
    }
  }
  return v;
}

Encoded encode(std::string_view text, const Vocab& vocab, bool with_provenance) {
  Encoded out;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (auto [b, e] : unit_spans(text)) {
    std::size_t i = b;
    while (i < e) {
      std::size_t len = std::min(vocab.max_piece_length(), e - i);
      for (; len > 1; --len)
        if (vocab.find(text.substr(i, len))) break;
      out.ids.push_back(*vocab.find(text.substr(i, len)));
      spans.emplace_back(i, i + len);
      i += len;
    }
  }
  if (with_provenance) out.provenance = provenance_of_spans(text, spans);
  return out;
}

std::vector<std::optional<std::size_t>> provenance(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string text;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (auto id : ids) {
    const std::size_t b = text.size();
    if (!vocab.is_reserved(id)) text += vocab.piece(id);
    spans.emplace_back(b, text.size());
  }
  return provenance_of_spans(text, spans);
}

std::string decode(std::span<const TokenId> ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids)
    if (!vocab.is_reserved(id)) out += vocab.piece(id);
  return out;
}

}  // namespace cgfuse::tokenizer
