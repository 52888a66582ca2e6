#include "debias/rng.hpp"

#include <cmath>
#include <numbers>

namespace debias {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

std::uint64_t hash_name(std::string_view name) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed), key_(splitmix64_mix(seed ^ 0x6A09E667F3BCC909ULL)) {}

SeededRng SeededRng::substream(std::string_view name) const {
    return SeededRng(seed_, splitmix64_mix(key_ ^ splitmix64_mix(hash_name(name))));
}

SeededRng SeededRng::substream(std::uint64_t index) const {
    return SeededRng(seed_, splitmix64_mix(key_ + splitmix64_mix(index + 0x3C6EF372FE94F82BULL)));
}

std::uint64_t SeededRng::next_u64() noexcept {
    ++counter_;
    return splitmix64_mix(key_ + counter_ * kGolden);
}

double SeededRng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t SeededRng::uniform_int(std::uint64_t n) noexcept {
    // Lemire's multiply-shift; bias is < n / 2^64.
    const unsigned __int128 prod = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::uint64_t>(prod >> 64);
}

double SeededRng::normal() noexcept {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::size_t> SeededRng::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = uniform_int(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace debias
