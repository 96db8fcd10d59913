#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

namespace dyncap {

// Counter-based deterministic generator. Each draw hashes (seed, ++counter)
// with the splitmix64 finalizer, so a given (seed, counter) pair produces the
// same value on every platform and the state is two plain integers that can be
// stored, copied, or split into independent streams.
struct RngState {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    explicit RngState(std::uint64_t s = 0, std::uint64_t c = 0) : seed(s), counter(c) {}

    static std::uint64_t mix(std::uint64_t x) {
        x ^= x >> 30;
        x *= 0xBF58476D1CE4E5B9ULL;
        x ^= x >> 27;
        x *= 0x94D049BB133111EBULL;
        x ^= x >> 31;
        return x;
    }

    std::uint64_t next_u64() {
        ++counter;
        return mix(seed + counter * 0x9E3779B97F4A7C15ULL);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_uniform() {
        return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    // Uniform in (0, 1) — safe as a log() argument.
    double next_uniform_open() {
        return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
    }

    // Box-Muller; uses two draws per call and keeps no hidden state.
    double next_gaussian() {
        const double u1 = next_uniform_open();
        const double u2 = next_uniform();
        const double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    // Standard Gumbel(0,1) noise: -log(-log(u)).
    double next_gumbel() {
        return -std::log(-std::log(next_uniform_open()));
    }

    // Integer in [0, n). Modulo bias is below 2^-32 for any n we use.
    std::uint64_t next_below(std::uint64_t n) {
        return next_u64() % n;
    }

    // Independent stream derived from (seed, stream id); used to split one
    // run seed into per-purpose generators (init, data, sampling, ...).
    static RngState derive(std::uint64_t seed, std::uint64_t stream) {
        return RngState(mix(seed ^ mix(stream + 0x9E3779B97F4A7C15ULL)));
    }
};

}  // namespace dyncap
