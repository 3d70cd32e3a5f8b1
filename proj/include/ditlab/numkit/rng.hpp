#pragma once

#include <cmath>
#include <cstdint>

#include "ditlab/numkit/tensor.hpp"

namespace ditlab {

// xoshiro256++ seeded through splitmix64. Chosen over std::mt19937 so that
// identical seeds give identical streams on every platform and toolchain.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& si : s_) si = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // index in [0, n)
    size_t index(size_t n) { return static_cast<size_t>(uniform() * static_cast<double>(n)) % n; }

    // standard normal via Box-Muller, pair-cached
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * M_PI * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    Tensor normal_tensor(std::vector<size_t> shape, double mean = 0.0, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (size_t i = 0; i < t.numel(); ++i) t.at(i) = mean + stddev * normal();
        return t;
    }

    Tensor uniform_tensor(std::vector<size_t> shape, double lo, double hi) {
        Tensor t(std::move(shape));
        for (size_t i = 0; i < t.numel(); ++i) t.at(i) = uniform(lo, hi);
        return t;
    }

    /// Independent stream derived from this seed; used for per-item determinism.
    static Rng derive(uint64_t seed, uint64_t stream) {
        uint64_t x = seed;
        uint64_t a = splitmix64(x);
        uint64_t y = stream + 0x9e3779b97f4a7c15ULL;
        uint64_t b = splitmix64(y);
        return Rng(a ^ rotl(b, 31));
    }

private:
    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static uint64_t rotl(uint64_t v, int k) { return (v << k) | (v >> (64 - k)); }

    uint64_t s_[4];
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace ditlab
