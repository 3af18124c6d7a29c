#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace obsprobe {

namespace fs = std::filesystem;

/// Raised for malformed configuration / CLI input (exit code 2).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Raised for runtime failures: missing files, bad data, numeric trouble (exit code 3).
struct RuntimeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

uint64_t fnv1a64(std::string_view data);
uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);

/// Lowercase hex of a 64-bit value, zero padded to 16 chars.
std::string hex64(uint64_t v);

/// SHA-256 of the input, as 64 lowercase hex chars.
std::string sha256_hex(std::string_view data);

// ---------------------------------------------------------------------------
// File IO
// ---------------------------------------------------------------------------

std::string read_text_file(const fs::path& path);
void write_text_file(const fs::path& path, std::string_view content);

/// Atomic-ish write: write to <path>.tmp.<pid> then rename. First rename wins.
void write_text_file_atomic(const fs::path& path, std::string_view content);

std::vector<float> read_f32_file(const fs::path& path);
void write_f32_file(const fs::path& path, const float* data, size_t n);

/// Read `count` floats starting at element offset `elem_offset` without
/// loading the whole file.
std::vector<float> read_f32_slice(const fs::path& path, size_t elem_offset, size_t count);

static_assert(std::endian::native == std::endian::little,
              "raw f32 tensor files are little-endian");

// ---------------------------------------------------------------------------
// Deterministic RNG
// ---------------------------------------------------------------------------
// std::mt19937_64 itself is standard-specified, but the <random> distributions
// are not; this wrapper keeps every draw reproducible across platforms.

class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    /// Uniform integer in [0, n). n must be > 0.
    uint64_t below(uint64_t n);

    /// Uniform double in [0, 1).
    double uniform();

    /// Standard normal via Box-Muller.
    double normal();

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// k distinct indices from [0, n), sampled without replacement, order random.
    std::vector<size_t> sample_without_replacement(size_t n, size_t k);

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Misc
// ---------------------------------------------------------------------------

std::string trim(std::string_view s);
std::string lowercase(std::string_view s);
bool starts_with(std::string_view s, std::string_view prefix);

/// Replaces every invalid UTF-8 sequence with U+FFFD so the result is safe
/// for JSON serialization. Byte-level tokenizers can emit fragments that
/// split multibyte characters; valid input passes through unchanged.
std::string sanitize_utf8(std::string_view s);

}  // namespace obsprobe
