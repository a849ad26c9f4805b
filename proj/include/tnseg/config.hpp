#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace tnseg {

/// Splits `key = value` lines. Blank lines and text after '#' are ignored. A line without '='
/// or with an empty key throws std::invalid_argument quoting the line number.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::string& text);

double parse_real(const std::string& key, const std::string& value);
std::size_t parse_count(const std::string& key, const std::string& value);
std::uint64_t parse_u64(const std::string& key, const std::string& value);

/// Assigns each entry through `setters`; an unknown key throws std::invalid_argument naming it.
void apply_key_values(const std::vector<std::pair<std::string, std::string>>& entries,
                      const std::map<std::string, std::function<void(const std::string&)>>& setters);

/// Shortest round-trip decimal form of a double.
std::string format_real(double v);

std::string read_text_file(const std::string& path);

}  // namespace tnseg
