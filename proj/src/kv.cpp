#include "fedtabgan/kv.hpp"

#include "fedtabgan/errors.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace fedtabgan {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
    KeyValues kv;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) {
            if (end == text.size()) break;
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
        const std::string key(trim(line.substr(0, eq)));
        if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
        kv[key] = std::string(trim(line.substr(eq + 1)));
        if (end == text.size()) break;
    }
    return kv;
}

KeyValues load_key_values(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    try {
        return parse_key_values(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::uint64_t parse_uint(std::string_view text, std::string_view what) {
    std::uint64_t value = 0;
    const auto* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, value);
    if (text.empty() || ec != std::errc{} || ptr != end)
        throw ConfigError(std::string(what) + ": '" + std::string(text) + "' is not a non-negative integer");
    return value;
}

double parse_double(std::string_view text, std::string_view what) {
    // from_chars for double is unavailable on older libstdc++; strtod is exact too.
    std::string buf(text);
    char* end = nullptr;
    const double value = std::strtod(buf.c_str(), &end);
    if (buf.empty() || end != buf.c_str() + buf.size())
        throw ConfigError(std::string(what) + ": '" + buf + "' is not a number");
    return value;
}

std::vector<std::size_t> parse_size_list(std::string_view text, std::string_view what) {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t end = text.find(',', pos);
        if (end == std::string_view::npos) end = text.size();
        out.push_back(static_cast<std::size_t>(parse_uint(trim(text.substr(pos, end - pos)), what)));
        pos = end + 1;
    }
    return out;
}

std::string format_double(double value) {
    // Shortest text that parses back to the same double.
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, res.ptr);
}

std::string join_sizes(const std::vector<std::size_t>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(values[i]);
    }
    return out;
}

std::uint64_t kv_uint(const KeyValues& kv, const std::string& key, std::uint64_t fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : parse_uint(it->second, key);
}

double kv_double(const KeyValues& kv, const std::string& key, double fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : parse_double(it->second, key);
}

bool kv_bool(const KeyValues& kv, const std::string& key, bool fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
    if (it->second == "false" || it->second == "0" || it->second == "no") return false;
    throw ConfigError(key + ": '" + it->second + "' is not a boolean");
}

std::string kv_string(const KeyValues& kv, const std::string& key, const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

std::vector<std::size_t> kv_size_list(const KeyValues& kv, const std::string& key,
                                      const std::vector<std::size_t>& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : parse_size_list(it->second, key);
}

}  // namespace fedtabgan
