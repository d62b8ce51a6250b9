#pragma once

#include <cmath>
#include <cstdint>

namespace vg {

// Counter-based generator: the n-th draw of a (seed, stream) pair is a pure
// function of (seed, stream, n). Child streams derived from distinct ids are
// independent of how their siblings are consumed, which is what makes
// data shuffles, weight init, attack noise, and bank sharding independently
// reproducible.
class SeededRng {
public:
    SeededRng() : SeededRng(0, 0) {}
    SeededRng(std::uint64_t seed, std::uint64_t stream_id = 0)
        : seed_(seed), stream_(stream_id), base_(derive_base(seed, stream_id)) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_; }

    SeededRng child(std::uint64_t id) const {
        return SeededRng(seed_, mix(stream_ ^ mix(id + 0x769ad2a385b7e6f1ull)));
    }

    std::uint64_t next_u64() { return mix(base_ + counter_++); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_index(std::uint64_t n) {
        // 64-bit draw modulo n; bias is negligible for the n used here
        return n ? next_u64() % n : 0;
    }

    // standard normal via Box-Muller, spare cached per instance
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    static std::uint64_t mix(std::uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }
    static std::uint64_t derive_base(std::uint64_t seed, std::uint64_t stream) {
        return mix(mix(seed) ^ (stream * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull));
    }

    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t base_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace vg
