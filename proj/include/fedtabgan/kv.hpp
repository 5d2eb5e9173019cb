#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace fedtabgan {

// Flat `key = value` text, one pair per line, `#` starts a comment.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::string_view text);
KeyValues load_key_values(const std::filesystem::path& path);

// Typed accessors; a present but malformed value throws ConfigError.
std::uint64_t kv_uint(const KeyValues& kv, const std::string& key, std::uint64_t fallback);
double kv_double(const KeyValues& kv, const std::string& key, double fallback);
bool kv_bool(const KeyValues& kv, const std::string& key, bool fallback);
std::string kv_string(const KeyValues& kv, const std::string& key, const std::string& fallback);
std::vector<std::size_t> kv_size_list(const KeyValues& kv, const std::string& key,
                                      const std::vector<std::size_t>& fallback);

std::uint64_t parse_uint(std::string_view text, std::string_view what);
double parse_double(std::string_view text, std::string_view what);
std::vector<std::size_t> parse_size_list(std::string_view text, std::string_view what);
std::string format_double(double value);
std::string join_sizes(const std::vector<std::size_t>& values);

}  // namespace fedtabgan
