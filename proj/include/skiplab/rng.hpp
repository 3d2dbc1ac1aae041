#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

namespace skiplab {

// xoshiro256** seeded through splitmix64. Fully specified bit stream, so the
// same seed yields the same draws on every platform and build. All sampling
// in the library goes through this type; std:: distributions are avoided
// because their streams are implementation-defined.
class SeededRng {
  public:
    static constexpr const char* kAlgorithm = "xoshiro256**";

    explicit SeededRng(std::uint64_t seed) : seed_(seed) {
        std::uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform double in [0, 1) using the top 53 bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform double in (0, 1]; used for diffusion mask ratios where 0 must
    // be excluded.
    double uniform_open0() { return 1.0 - uniform(); }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t uniform_below(std::uint64_t n) {
        // Lemire's multiply-shift with rejection for exact uniformity.
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t threshold = (0 - n) % n;
            while (lo < threshold) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(uniform_below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller on our own uniforms.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform_open0();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = uniform_below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent stream, e.g. one per (regime, seed) branch.
    SeededRng fork(std::uint64_t salt) {
        std::uint64_t x = seed_ ^ (0x9e3779b97f4a7c15ULL + salt);
        std::uint64_t mixed = splitmix64(x);
        return SeededRng(mixed ^ next_u64());
    }

    static std::uint64_t splitmix64(std::uint64_t& x) {
        std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t seed_;
    std::uint64_t state_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace skiplab
