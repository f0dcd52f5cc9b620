#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace spkvec {

// Seeded generator with hand-rolled transforms. The engine (mt19937_64) is
// fully specified by the standard and the transforms below avoid
// std::*_distribution, whose output is implementation-defined; identical
// seeds therefore reproduce identical streams across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed), token_(mix(seed ^ 0xa0761d6478bd642full)) {}

    std::uint64_t bits() { return engine_(); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(bits() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Modulo bias is negligible: n is tiny
    // relative to 2^64 at every call site.
    std::uint64_t below(std::uint64_t n) { return n ? bits() % n : 0; }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller (no cached spare; keeps state minimal).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Derives an independent stream keyed by a label without consuming any
    // state from this generator, so per-speaker / per-utterance streams are
    // order-independent. Forks chain: fork("a").fork("b") is well defined.
    Rng fork(const std::string& label) const {
        std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
        for (unsigned char c : label) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
        return Rng(mix(token_ ^ h));
    }

private:
    static std::uint64_t mix(std::uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    std::mt19937_64 engine_;
    std::uint64_t token_ = 0;
};

}  // namespace spkvec
