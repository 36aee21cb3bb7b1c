#pragma once

// Sectioned "key = value" text: "[name]" starts a section, '#' starts a
// comment line, keys before the first header belong to section "".

#include <cstddef>
#include <initializer_list>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace cgfuse::kv {

using Section = std::map<std::string, std::string>;

struct Document {
  std::map<std::string, Section> sections;
  std::vector<std::string> order;  // section names as first seen

  bool has(const std::string& name) const { return sections.count(name) > 0; }
  /// Empty section when absent.
  const Section& section(const std::string& name) const;
};

/// FormatError (with line number) on malformed lines and repeated keys.
Document parse(std::string_view text);

/// FormatError naming the key when present but not parseable.
std::size_t get_size(const Section& s, const std::string& key, std::size_t fallback);
std::uint64_t get_u64(const Section& s, const std::string& key, std::uint64_t fallback);
double get_double(const Section& s, const std::string& key, double fallback);
bool get_bool(const Section& s, const std::string& key, bool fallback);
std::string get_string(const Section& s, const std::string& key, const std::string& fallback);

/// FormatError for the first key not in `allowed`.
void require_known(const Section& s, std::initializer_list<std::string_view> allowed, std::string_view section_name);

}  // namespace cgfuse::kv
