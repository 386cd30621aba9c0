#pragma once

#include <cstdint>

namespace emesh {

// Counter-based deterministic RNG. Every draw is a pure integer function of
// (seed, stream, counter, index), so any position in any stream can be
// regenerated from scratch on any platform — the property checkpoint resume
// and cross-node batch determinism rely on.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t rng_word(uint64_t seed, uint64_t stream, uint64_t counter, uint64_t index) {
    uint64_t h = splitmix64(seed ^ 0x8f1bbcdc545a7c15ull);
    h = splitmix64(h ^ stream);
    h = splitmix64(h ^ counter);
    h = splitmix64(h ^ index);
    return h;
}

// Uniform in [-1, 1). Built from the top 24 bits so every step is exact in
// fp32: integer/2^23 and the subtraction introduce no rounding.
inline float rng_uniform(uint64_t seed, uint64_t stream, uint64_t counter, uint64_t index) {
    uint64_t h = rng_word(seed, stream, counter, index);
    uint32_t top = static_cast<uint32_t>(h >> 40);  // 24 bits
    return static_cast<float>(top) * (1.0f / 8388608.0f) - 1.0f;
}

// Stream position for one shard's batch sequence.
struct RngState {
    uint64_t seed = 0;
    uint64_t counter = 0;
};

}  // namespace emesh
