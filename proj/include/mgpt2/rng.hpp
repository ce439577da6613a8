#pragma once

#include <cstdint>
#include <random>

namespace mgpt2 {

// Deterministic RNG. mt19937_64 is fully specified by the standard; the
// distributions are hand-rolled because std:: distributions are
// implementation-defined and would break bit-reproducible runs.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of entropy.
    double uniform() {
        return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // tiny relative to 2^64 so the bias is far below reproducibility concerns,
    // and determinism is what matters.
    std::uint64_t uniform_int(std::uint64_t n) { return n ? engine_() % n : 0; }

    // Standard normal via Box-Muller (the cached second value keeps cost down).
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

    // Derives an independent stream, e.g. one per trial or per worker.
    Rng split(std::uint64_t stream) {
        // splitmix64 step decorrelates nearby stream ids.
        std::uint64_t z = engine_() + 0x9e3779b97f4a7c15ULL * (stream + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return Rng(z ^ (z >> 31));
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Fixed arithmetic for deriving per-trial seeds from a root seed.
inline std::uint64_t trial_seed(std::uint64_t root, std::uint64_t trial) {
    std::uint64_t z = root + 0x9e3779b97f4a7c15ULL * (trial + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace mgpt2
