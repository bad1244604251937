#pragma once

#include <charconv>
#include <cstddef>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gacan/error.hpp"
#include "gacan/tensor.hpp"

namespace gacan {

/// Named trainable tensors with gradient slots of identical shape.
class ParameterStore {
public:
    struct Entry {
        Tensor value;
        Tensor grad;
    };

    void add(const std::string& name, Tensor value) {
        if (name.empty() || name.find_first_of(" \t\n=") != std::string::npos) {
            throw ValidationError("invalid parameter name '" + name + "'");
        }
        Tensor grad(value.shape(), 0.0);
        auto [it, inserted] = entries_.emplace(name, Entry{std::move(value), std::move(grad)});
        if (!inserted) throw ValidationError("duplicate parameter name '" + name + "'");
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor& value(const std::string& name) { return entry(name).value; }
    const Tensor& value(const std::string& name) const { return entry(name).value; }
    Tensor& grad(const std::string& name) { return entry(name).grad; }
    const Tensor& grad(const std::string& name) const { return entry(name).grad; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, _] : entries_) out.push_back(k);
        return out;
    }

    std::size_t size() const noexcept { return entries_.size(); }

    /// Total number of scalars across all parameters.
    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, e] : entries_) n += e.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& [_, e] : entries_) e.grad.fill(0.0);
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
        if (a.entries_.size() != b.entries_.size()) return false;
        for (auto ia = a.entries_.begin(), ib = b.entries_.begin(); ia != a.entries_.end(); ++ia, ++ib) {
            if (ia->first != ib->first || !(ia->second.value == ib->second.value)) return false;
        }
        return true;
    }

private:
    Entry& entry(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ValidationError("unknown parameter '" + name + "'");
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ValidationError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// Text checkpoints
//
//   gacan-checkpoint v1
//   key=value            (zero or more header lines)
//   name shape_csv value_csv
//
// Values are printed with 17 significant digits, which round-trips every
// finite double exactly.
// ---------------------------------------------------------------------------

inline constexpr std::string_view checkpoint_magic = "gacan-checkpoint v1";

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    auto first = s.data();
    auto last = s.data() + s.size();
    if (first != last && *first == '+') ++first;
    auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc{} || res.ptr != last) {
        throw ValidationError("not a number: '" + std::string(s) + "'");
    }
    return v;
}

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

struct Checkpoint {
    std::vector<std::pair<std::string, std::string>> header;
    ParameterStore params;

    const std::string* find(const std::string& key) const {
        for (const auto& [k, v] : header) {
            if (k == key) return &v;
        }
        return nullptr;
    }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
    os << checkpoint_magic << '\n';
    for (const auto& [k, v] : ck.header) os << k << '=' << v << '\n';
    for (const auto& [name, e] : ck.params) {
        os << name << ' ';
        const auto& shape = e.value.shape();
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        if (shape.empty()) os << "scalar";
        os << ' ';
        for (std::size_t i = 0; i < e.value.size(); ++i) os << (i ? "," : "") << format_double(e.value[i]);
        os << '\n';
    }
}

inline Checkpoint read_checkpoint(std::istream& is) {
    Checkpoint ck;
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(is, line) || line != checkpoint_magic) {
        throw ParseError("missing checkpoint header '" + std::string(checkpoint_magic) + "'", 1);
    }
    ++lineno;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto sp = line.find(' ');
        auto eq = line.find('=');
        if (sp == std::string::npos) {
            if (eq == std::string::npos) throw ParseError("unrecognized checkpoint line", lineno);
            ck.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
            continue;
        }
        if (eq != std::string::npos && eq < sp) {
            ck.header.emplace_back(line.substr(0, eq), line.substr(eq + 1));
            continue;
        }
        auto fields = split_view(line, ' ');
        if (fields.size() != 3) throw ParseError("expected 'name shape values'", lineno);
        try {
            Shape shape;
            if (fields[1] != "scalar") {
                for (auto d : split_view(fields[1], ',')) {
                    auto v = parse_double(d);
                    if (v < 1 || v != static_cast<double>(static_cast<std::size_t>(v))) {
                        throw ValidationError("bad dimension");
                    }
                    shape.push_back(static_cast<std::size_t>(v));
                }
            }
            std::vector<double> values;
            for (auto d : split_view(fields[2], ',')) values.push_back(parse_double(d));
            ck.params.add(std::string(fields[0]), Tensor(std::move(shape), std::move(values)));
        } catch (const ParseError&) {
            throw;
        } catch (const Error& e) {
            throw ParseError(std::string("bad parameter line: ") + e.what(), lineno);
        }
    }
    return ck;
}

inline std::string checkpoint_to_string(const Checkpoint& ck) {
    std::ostringstream os;
    write_checkpoint(os, ck);
    return os.str();
}

} // namespace gacan
