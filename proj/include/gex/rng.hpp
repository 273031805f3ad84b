#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string_view>
#include <vector>

namespace gex {

// Deterministic, serializable PRNG (xoshiro256**). Every source of
// randomness in the library goes through one of these so that a run is a
// pure function of (seed, config). Streams for independent purposes
// (init / shuffle / augment) are derived by hashing a label and, where
// needed, an epoch index into the seed, which keeps resume-from-checkpoint
// exact without replaying history.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0x9e3779b97f4a7c15ull) { reseed(seed); }

    void reseed(std::uint64_t seed) {
        // splitmix64 expansion of the seed into the 256-bit state
        std::uint64_t x = seed;
        for (auto& s : state_) {
            x += 0x9e3779b97f4a7c15ull;
            std::uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
            s = z ^ (z >> 31);
        }
    }

    static std::uint64_t mix(std::uint64_t seed, std::string_view label, std::uint64_t index = 0) {
        // FNV-1a over the label, folded with the seed and index
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        h ^= index * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull;
        return h;
    }

    // Independent stream for a named purpose.
    static Rng stream(std::uint64_t seed, std::string_view label, std::uint64_t index = 0) {
        return Rng(mix(seed, label, index));
    }

    std::uint64_t next_u64() {
        auto rotl = [](std::uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
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

    // Uniform in [0, 1); 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Modulo bias is < 2^-32 for the small n used here.
    std::uint32_t uniform_int(std::uint32_t n) {
        return static_cast<std::uint32_t>(next_u64() % n);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; draws two uniforms per call, no cached spare (keeps the
    // stream position a pure function of the call count).
    double normal() {
        double u1 = uniform(), u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out(sizeof(state_));
        std::memcpy(out.data(), state_.data(), sizeof(state_));
        return out;
    }

    bool deserialize(const std::vector<std::uint8_t>& bytes) {
        if (bytes.size() != sizeof(state_)) return false;
        std::memcpy(state_.data(), bytes.data(), sizeof(state_));
        return true;
    }

private:
    std::array<std::uint64_t, 4> state_{};
};

}  // namespace gex
