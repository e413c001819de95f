#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace sinkseg {

// Deterministic random source. All draws are derived from raw mt19937_64
// output so that a given seed produces the same stream on every platform;
// std::*_distribution is avoided because its output is implementation-defined.
struct Rng {
    explicit Rng(std::uint64_t seed) : gen(seed) {}

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Standard normal via Box-Muller, one spare cached per pair.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n). Modulo bias is negligible for desk-scale n
    // and keeps the draw deterministic.
    int uniform_int(int n) {
        return static_cast<int>(gen() % static_cast<std::uint64_t>(n));
    }

    std::mt19937_64 gen;

  private:
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace sinkseg
