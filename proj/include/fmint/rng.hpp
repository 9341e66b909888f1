/*
   Copyright 2026 The fmint-sde Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace fmint {

/// SplitMix64 finalizer. Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

/// FNV-1a over a string, used to turn names into seed material.
constexpr std::uint64_t hash_name(std::string_view s) noexcept {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

/// Folds an ordered list of words into one substream key.
inline std::uint64_t derive_key(std::initializer_list<std::uint64_t> words) noexcept {
    std::uint64_t h = 0x6A09E667F3BCC909ULL;
    for (std::uint64_t w : words) {
        h = mix64(h ^ mix64(w + 0x9E3779B97F4A7C15ULL));
    }
    return h;
}

/// Counter-based SplitMix64 stream: output i is mix64(key + (i+1)*golden).
///
/// Any draw can be reproduced from (key, counter) alone, so a substream
/// handed to a worker yields the same numbers whichever thread consumes it.
/// Normal variates use the polar Box-Muller method and cache the second
/// value of each accepted pair.
class CounterRng {
public:
    static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

    CounterRng() = default;
    explicit CounterRng(std::uint64_t key) noexcept : key_(key) {}

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return mix64(key_ + counter_ * kGolden);
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform on [lo, hi]; returns lo exactly when lo == hi.
    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n) noexcept {
        // Lemire's multiply-shift with rejection.
        std::uint64_t x = next_u64();
        __uint128_t m = static_cast<__uint128_t>(x) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t t = (0 - n) % n;
            while (lo < t) {
                x = next_u64();
                m = static_cast<__uint128_t>(x) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    double normal() noexcept {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

    /// Independent child stream keyed by this stream's key and a label.
    CounterRng split(std::uint64_t label) const noexcept {
        return CounterRng(derive_key({key_, label}));
    }

private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// Seed material identifying one simulated trajectory.
struct SeedMaterial {
    std::uint64_t base_seed = 0;
    std::uint64_t system = 0;  // hash of the system id
    std::uint64_t param_index = 0;
    std::uint64_t ic_index = 0;
    std::uint64_t noise_index = 0;
};

// Stream roles. Distinct tags keep parameter, initial-condition and noise
// draws from overlapping even when the indices coincide.
inline constexpr std::uint64_t kTagParams = 0x5041524DULL;
inline constexpr std::uint64_t kTagInitial = 0x494E4954ULL;
inline constexpr std::uint64_t kTagNoise = 0x4E4F4953ULL;

inline CounterRng param_stream(std::uint64_t base_seed, std::uint64_t system, std::uint64_t param_index) {
    return CounterRng(derive_key({base_seed, system, kTagParams, param_index}));
}

inline CounterRng initial_stream(std::uint64_t base_seed, std::uint64_t system, std::uint64_t param_index,
                                 std::uint64_t ic_index) {
    return CounterRng(derive_key({base_seed, system, kTagInitial, param_index, ic_index}));
}

inline CounterRng noise_stream(const SeedMaterial& s) {
    return CounterRng(derive_key({s.base_seed, s.system, kTagNoise, s.param_index, s.ic_index, s.noise_index}));
}

}  // namespace fmint
