#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace fedrlvr {

using Rng = std::mt19937_64;

/// Roles that partition the seed space. Every random draw in a run comes from
/// a stream keyed by (global_seed, role, round, client, step), so results do
/// not depend on the order in which clients are executed.
enum class StreamRole : std::uint64_t {
    model = 1,
    pretrain = 2,
    corpus = 3,
    partition = 4,
    client = 5,
    server = 6,
    eval = 7,
    test = 8,
};

namespace detail {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace detail

struct StreamKey {
    std::uint64_t seed = 0;
    StreamRole role = StreamRole::test;
    std::uint64_t round = 0;
    std::uint64_t client = 0;
    std::uint64_t step = 0;

    [[nodiscard]] std::uint64_t hash() const noexcept {
        std::uint64_t h = detail::splitmix64(seed);
        for (std::uint64_t part : {static_cast<std::uint64_t>(role), round, client, step}) {
            h = detail::splitmix64(h ^ detail::splitmix64(part + 0x632BE59BD9B4E019ULL));
        }
        return h;
    }
};

inline Rng make_stream(const StreamKey& key) {
    const std::uint64_t h = key.hash();
    std::seed_seq seq{static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32),
                      static_cast<std::uint32_t>(key.seed), static_cast<std::uint32_t>(key.seed >> 32)};
    return Rng(seq);
}

inline Rng make_stream(std::uint64_t seed, StreamRole role, std::uint64_t round = 0,
                       std::uint64_t client = 0, std::uint64_t step = 0) {
    return make_stream(StreamKey{seed, role, round, client, step});
}

/// Uniform double in [0, 1) built from the top 53 bits of one draw.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    if (n == 0) {
        throw std::invalid_argument("uniform_index: empty range");
    }
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

/// Draws `count` distinct indices from [0, n) uniformly, in selection order.
inline std::vector<std::size_t> sample_without_replacement(Rng& rng, std::size_t n, std::size_t count) {
    if (count > n) {
        throw std::invalid_argument("sample_without_replacement: count exceeds population");
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + uniform_index(rng, n - i);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    return idx;
}

}  // namespace fedrlvr
