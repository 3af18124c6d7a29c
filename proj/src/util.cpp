#include "obsprobe/util.hpp"

#include <openssl/evp.h>
#include <unistd.h>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace obsprobe {

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64(std::string_view data) { return fnv1a64(data.data(), data.size()); }

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

std::string sha256_hex(std::string_view data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw RuntimeError("sha256: EVP_Digest failed");
    }
    static const char* hexd = "0123456789abcdef";
    std::string out(len * 2, '0');
    for (unsigned int i = 0; i < len; ++i) {
        out[2 * i] = hexd[digest[i] >> 4];
        out[2 * i + 1] = hexd[digest[i] & 0xf];
    }
    return out;
}

std::string read_text_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw RuntimeError("cannot open file: " + path.string());
    std::string out;
    f.seekg(0, std::ios::end);
    out.resize(static_cast<size_t>(f.tellg()));
    f.seekg(0);
    f.read(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw RuntimeError("short read: " + path.string());
    return out;
}

void write_text_file(const fs::path& path, std::string_view content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw RuntimeError("cannot open file for write: " + path.string());
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw RuntimeError("short write: " + path.string());
}

void write_text_file_atomic(const fs::path& path, std::string_view content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp." + std::to_string(static_cast<unsigned long>(::getpid()));
    write_text_file(tmp, content);
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        if (!fs::exists(path)) throw RuntimeError("atomic write failed: " + path.string());
    }
}

std::vector<float> read_f32_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw RuntimeError("cannot open tensor file: " + path.string());
    f.seekg(0, std::ios::end);
    auto bytes = static_cast<size_t>(f.tellg());
    if (bytes % sizeof(float) != 0) throw RuntimeError("tensor file size not multiple of 4: " + path.string());
    f.seekg(0);
    std::vector<float> out(bytes / sizeof(float));
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    if (!f) throw RuntimeError("short read: " + path.string());
    return out;
}

void write_f32_file(const fs::path& path, const float* data, size_t n) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw RuntimeError("cannot open tensor file for write: " + path.string());
    f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
    if (!f) throw RuntimeError("short write: " + path.string());
}

std::vector<float> read_f32_slice(const fs::path& path, size_t elem_offset, size_t count) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw RuntimeError("cannot open tensor file: " + path.string());
    f.seekg(static_cast<std::streamoff>(elem_offset * sizeof(float)));
    std::vector<float> out(count);
    f.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!f) throw RuntimeError("slice read out of range: " + path.string());
    return out;
}

uint64_t Rng::below(uint64_t n) {
    if (n == 0) throw RuntimeError("Rng::below(0)");
    // rejection sampling, unbiased
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
        v = eng_();
    } while (v >= limit);
    return v % n;
}

double Rng::uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1, u2;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    spare_ = mag * std::sin(2.0 * M_PI * u2);
    have_spare_ = true;
    return mag * std::cos(2.0 * M_PI * u2);
}

std::vector<size_t> Rng::sample_without_replacement(size_t n, size_t k) {
    if (k > n) throw RuntimeError("sample_without_replacement: k > n");
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    // partial Fisher-Yates
    for (size_t i = 0; i < k; ++i) {
        size_t j = i + static_cast<size_t>(below(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
}

std::string trim(std::string_view s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return std::string(s.substr(b, e - b));
}

std::string lowercase(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

bool starts_with(std::string_view s, std::string_view prefix) {
    return s.size() >= prefix.size() && s.substr(0, prefix.size()) == prefix;
}

}  // namespace obsprobe
