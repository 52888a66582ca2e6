#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace debias {

// Counter-based generator: the i-th output of a stream with key k is
// splitmix64_mix(k + i * 0x9E3779B97F4A7C15) for i = 1, 2, ...
// Named substreams derive a fresh key from the parent key and the name,
// so every substream is reproducible from (seed, path of names).
class SeededRng {
public:
    static constexpr std::string_view algorithm = "splitmix64-ctr";

    explicit SeededRng(std::uint64_t seed);

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    // Independent child stream; does not advance this stream.
    SeededRng substream(std::string_view name) const;
    SeededRng substream(std::uint64_t index) const;

    std::uint64_t next_u64() noexcept;
    // Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept;
    // Uniform integer on [0, n); n > 0.
    std::uint64_t uniform_int(std::uint64_t n) noexcept;
    // Standard normal (Box-Muller; one output per two uniforms, no caching).
    double normal() noexcept;
    // Uniform on [lo, hi).
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    // Fisher-Yates permutation of [0, n).
    std::vector<std::size_t> permutation(std::size_t n);

    // Restores a saved position (used by checkpoints).
    void set_state(std::uint64_t key, std::uint64_t counter) noexcept {
        key_ = key;
        counter_ = counter;
    }

private:
    SeededRng(std::uint64_t seed, std::uint64_t key) : seed_(seed), key_(key) {}

    std::uint64_t seed_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64_mix(std::uint64_t z) noexcept;
// FNV-1a 64-bit hash of a name.
std::uint64_t hash_name(std::string_view name) noexcept;

}  // namespace debias
