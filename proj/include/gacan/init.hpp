#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "gacan/tensor.hpp"

namespace gacan {

/// 64-bit FNV-1a; stable across platforms, used for seeds and config hashes.
inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    return s;
}

/// Per-tensor seed: a tensor's initial values depend only on (seed, name),
/// never on how many other tensors were created before it.
inline std::uint64_t tensor_seed(std::uint64_t seed, std::string_view name) {
    std::uint64_t z = fnv1a64(name) ^ (seed + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::uint64_t seed,
                             std::string_view name) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::mt19937_64 rng(tensor_seed(seed, name));
    std::uniform_real_distribution<double> u(-limit, limit);
    Tensor t(std::move(shape));
    for (auto& v : t.raw()) v = u(rng);
    return t;
}

} // namespace gacan
