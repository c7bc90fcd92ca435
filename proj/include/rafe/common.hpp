#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace rafe {

enum class ErrorCode {
    invalid_argument,
    invalid_state,
    io_error,
    not_found,
    internal,
};

// Single exception type used across the library. The C API maps the code
// to an integer status at the boundary.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

void log_warn(std::string_view message);

// FNV-1a, used for manifest artifact hashes and determinism checks.
std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t hash_file(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);

// Deterministic 64-bit PRNG used everywhere a seed appears in a contract.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform double in [0, 1) with 53 bits of randomness.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) raise(ErrorCode::invalid_argument, "SplitMix64::below: n must be positive");
        // Rejection sampling keeps the draw unbiased.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v = next();
        while (v >= limit) v = next();
        return v % n;
    }

    double normal() {
        // Box-Muller; the spare draw is discarded to keep state advance simple.
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

private:
    std::uint64_t state_;
};

template <typename Container, typename Rng>
void shuffle_inplace(Container& c, Rng& rng) {
    if (c.empty()) return;
    for (std::size_t i = c.size() - 1; i > 0; --i) {
        std::size_t j = static_cast<std::size_t>(rng.below(i + 1));
        std::swap(c[i], c[j]);
    }
}

}  // namespace rafe
