#pragma once

#include <cstdint>
#include <random>

namespace qsine {

/// SplitMix64 finalizer. Used to derive independent seeds from (seed, index) pairs.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Seed of substream `index` of the stream rooted at `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) noexcept {
    return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x632BE59BD9B4E019ULL));
}

/// Named substreams so training, validation and test data never share draws.
enum class Stream : std::uint64_t {
    train = 1,
    validation = 2,
    test = 3,
    init = 4,
    shuffle = 5,
    dropout = 6,
    ood = 7,
};

constexpr std::uint64_t derive_seed(std::uint64_t seed, Stream s) noexcept {
    return derive_seed(seed, static_cast<std::uint64_t>(s) << 48);
}

/// The library-wide generator. A fresh engine is built for every substream.
using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t index) {
    return Rng{derive_seed(seed, index)};
}

/// Uniform double in [lo, hi) from the top 53 bits of one engine draw.
inline double uniform(Rng& rng, double lo, double hi) {
    constexpr double scale = 1.0 / 9007199254740992.0; // 2^-53
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * scale);
}

} // namespace qsine
