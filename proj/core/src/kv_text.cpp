#include "cgfuse/kv_text.hpp"

#include <algorithm>
#include <sstream>

#include "cgfuse/errors.hpp"

namespace cgfuse::kv {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw FormatError("bad value for '" + key + "': '" + value + "'");
}

}  // namespace

const Section& Document::section(const std::string& name) const {
  static const Section empty;
  auto it = sections.find(name);
  return it == sections.end() ? empty : it->second;
}

Document parse(std::string_view text) {
  Document doc;
  std::istringstream in{std::string(text)};
  std::string line, current;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw FormatError("line " + std::to_string(line_no) + ": unterminated section header");
      current = trim(std::string_view(t).substr(1, t.size() - 2));
      if (!doc.sections.count(current)) {
        doc.sections[current];
        doc.order.push_back(current);
      }
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw FormatError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    if (key.empty()) throw FormatError("line " + std::to_string(line_no) + ": empty key");
    if (!doc.sections.count(current)) doc.order.push_back(current);
    auto& sec = doc.sections[current];
    if (!sec.emplace(key, trim(std::string_view(t).substr(eq + 1))).second)
      throw FormatError("line " + std::to_string(line_no) + ": repeated key '" + key + "'");
  }
  return doc;
}

std::uint64_t get_u64(const Section& s, const std::string& key, std::uint64_t fallback) {
  auto it = s.find(key);
  if (it == s.end()) return fallback;
  const auto& v = it->second;
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; })) bad_value(key, v);
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    bad_value(key, v);
  }
}

std::size_t get_size(const Section& s, const std::string& key, std::size_t fallback) {
  return static_cast<std::size_t>(get_u64(s, key, fallback));
}

double get_double(const Section& s, const std::string& key, double fallback) {
  auto it = s.find(key);
  if (it == s.end()) return fallback;
  try {
    std::size_t used = 0;
    const double d = std::stod(it->second, &used);
    if (used != it->second.size()) bad_value(key, it->second);
    return d;
  } catch (const std::logic_error&) {
    bad_value(key, it->second);
  }
}

bool get_bool(const Section& s, const std::string& key, bool fallback) {
  auto it = s.find(key);
  if (it == s.end()) return fallback;
  if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
  if (it->second == "false" || it->second == "0" || it->second == "no") return false;
  bad_value(key, it->second);
}

std::string get_string(const Section& s, const std::string& key, const std::string& fallback) {
  auto it = s.find(key);
  return it == s.end() ? fallback : it->second;
}

void require_known(const Section& s, std::initializer_list<std::string_view> allowed, std::string_view section_name) {
  for (const auto& [k, v] : s)
    if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
      throw FormatError("unknown key '" + k + "' in section [" + std::string(section_name) + "]");
}

}  // namespace cgfuse::kv
