#pragma once

#include <cstdint>

namespace daed {

// Counter-based generator: the stream is a pure function of (seed, counter),
// so a given seed always replays the same sequence and independent streams
// can be derived without sharing state. Normal draws use Box-Muller on the
// counter stream, which is bit-stable across platforms with IEEE doubles.
class Rng {
public:
    explicit Rng(uint64_t seed) : seed_(seed) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + (++counter_) * 0x9E3779B97F4A7C15ULL;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; the paired draw is cached.
    double normal();

    // Independent stream derived from this generator's seed. Does not
    // advance this generator.
    Rng split(uint64_t stream) const;

    uint64_t seed() const { return seed_; }

private:
    uint64_t seed_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Stateless mix of two words, used to derive per-cell seeds.
uint64_t mix_seed(uint64_t a, uint64_t b);

} // namespace daed
