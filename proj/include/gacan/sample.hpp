#pragma once

// Granularity bookkeeping shared by the data pipeline and the model.

#include <array>
#include <cstddef>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>

#include "gacan/attention.hpp"
#include "gacan/error.hpp"
#include "gacan/tensor.hpp"

namespace gacan {

struct Strides {
    std::size_t h = 0;
    std::size_t d = 0;
    std::size_t w = 0;

    std::size_t of(Granularity g) const {
        switch (g) {
        case Granularity::minute: return 1;
        case Granularity::hour: return h;
        case Granularity::day: return d;
        case Granularity::week: return w;
        }
        return 1;
    }
};

/// s_h = 60/p, s_d = 24 s_h, s_w = 7 s_d
inline Strides granularity_strides(std::size_t p) {
    if (p == 0 || 60 % p != 0) {
        throw ValidationError("slice length p=" + std::to_string(p) + " minutes does not divide 60");
    }
    Strides s;
    s.h = 60 / p;
    s.d = 24 * s.h;
    s.w = 7 * s.d;
    return s;
}

/// Subset of {m, h, d, w}.
class GranularityMask {
public:
    GranularityMask() = default;
    explicit GranularityMask(std::initializer_list<Granularity> gs) {
        for (auto g : gs) set(g);
    }

    bool has(Granularity g) const { return bits_[static_cast<std::size_t>(g)]; }
    void set(Granularity g, bool on = true) { bits_[static_cast<std::size_t>(g)] = on; }
    bool empty() const { return !(bits_[0] || bits_[1] || bits_[2] || bits_[3]); }
    bool operator==(const GranularityMask&) const = default;

    /// "m,h,d" or "mhd" style; letters in any order.
    static GranularityMask parse(std::string_view text) {
        GranularityMask m;
        for (char ch : text) {
            if (ch == ',' || ch == ' ' || ch == '{' || ch == '}') continue;
            bool found = false;
            for (auto g : all_granularities) {
                if (granularity_tag(g) == ch) {
                    m.set(g);
                    found = true;
                }
            }
            if (!found) throw ConfigError("unknown granularity '" + std::string(1, ch) + "' in mask \"" + std::string(text) + "\"");
        }
        if (m.empty()) throw ConfigError("granularity mask is empty");
        return m;
    }

    std::string str() const {
        std::string s;
        for (auto g : all_granularities) {
            if (!has(g)) continue;
            if (!s.empty()) s += ',';
            s += granularity_tag(g);
        }
        return s;
    }

private:
    std::array<bool, 4> bits_{};
};

/// Model inputs for one forecast origin, indexed by Granularity. Streams are
/// t x N x C, oldest position first.
using StreamSet = std::array<std::optional<Tensor>, 4>;

/// One training example.
struct WindowedSample {
    std::size_t t0 = 0;
    StreamSet streams;
    Tensor target; // H x N, slices t0+1 .. t0+H
};

} // namespace gacan
