#pragma once

// Typed parsing of `key = value` settings. Every failure is a ConfigError
// naming the key.

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gacan/error.hpp"
#include "gacan/parameters.hpp"

namespace gacan::kv {

inline std::string_view trim(std::string_view s) {
    const auto ws = " \t\r\n";
    const auto b = s.find_first_not_of(ws);
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(ws);
    return s.substr(b, e - b + 1);
}

[[noreturn]] inline void bad(std::string_view key, std::string_view value, const char* expected) {
    throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key) + " (expected " + expected + ")");
}

inline std::uint64_t to_u64(std::string_view key, std::string_view value) {
    value = trim(value);
    std::uint64_t v = 0;
    auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (value.empty() || res.ec != std::errc{} || res.ptr != value.data() + value.size()) {
        bad(key, value, "a nonnegative integer");
    }
    return v;
}

inline std::size_t to_size(std::string_view key, std::string_view value) {
    return static_cast<std::size_t>(to_u64(key, value));
}

inline double to_real(std::string_view key, std::string_view value) {
    try {
        return parse_double(trim(value));
    } catch (const ValidationError&) {
        bad(key, value, "a number");
    }
}

inline bool to_bool(std::string_view key, std::string_view value) {
    value = trim(value);
    if (value == "true" || value == "1" || value == "yes") return true;
    if (value == "false" || value == "0" || value == "no") return false;
    bad(key, value, "true or false");
}

inline std::vector<std::size_t> to_size_list(std::string_view key, std::string_view value) {
    std::vector<std::size_t> out;
    for (auto part : split_view(trim(value), ',')) out.push_back(to_size(key, part));
    return out;
}

inline std::string join(const std::vector<std::size_t>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
    return s;
}

inline std::string from_bool(bool b) { return b ? "true" : "false"; }

} // namespace gacan::kv
