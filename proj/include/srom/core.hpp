#ifndef SROM_CORE_HPP
#define SROM_CORE_HPP

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace srom {

using Complex = std::complex<double>;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using CMatrix = Eigen::MatrixXcd;
using CVector = Eigen::VectorXcd;

/// Failure categories surfaced by every module. Callers branch on `kind()`,
/// the message carries the human-readable detail.
enum class ErrorKind {
    invalid_argument,
    format,
    corrupt_file,
    invalid_data,
    insufficient_data,
    numeric,
    training_diverged,
    rollout_diverged,
    search_failed,
    undefined_metric,
    io,
    internal,
};

inline const char* to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::format: return "format-error";
    case ErrorKind::corrupt_file: return "corrupt-file";
    case ErrorKind::invalid_data: return "invalid-data";
    case ErrorKind::insufficient_data: return "insufficient-data";
    case ErrorKind::numeric: return "numeric-error";
    case ErrorKind::training_diverged: return "training-diverged";
    case ErrorKind::rollout_diverged: return "rollout-diverged";
    case ErrorKind::search_failed: return "search-failed";
    case ErrorKind::undefined_metric: return "undefined-metric";
    case ErrorKind::io: return "io-error";
    case ErrorKind::internal: return "internal-error";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& what) {
    if (!condition) throw Error(kind, what);
}

// ---------------------------------------------------------------------------
// Deterministic random numbers. std distributions are implementation-defined,
// so uniform/normal draws are derived directly from the 64-bit engine.
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        // splitmix64
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(next_u64() % span);
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            const auto j = static_cast<std::size_t>(next_u64() % i);
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Derives an independent stream seed from a run seed and a tag.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = 1469598103934665603ULL ^ seed;
    for (char c : tag) {
        h ^= static_cast<unsigned char>(c);
        h *= 1099511628211ULL;
    }
    Rng mix(h);
    return mix.next_u64();
}

/// FNV-1a over raw bytes; used for dataset checksums and cache keys.
inline std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Little-endian binary streams. All on-disk formats go through these.
// ---------------------------------------------------------------------------

namespace io {

static_assert(sizeof(double) == 8, "f64 layout required");

inline bool host_is_little_endian() {
    const std::uint16_t probe = 1;
    unsigned char first;
    std::memcpy(&first, &probe, 1);
    return first == 1;
}

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
        require(static_cast<bool>(out_), ErrorKind::io, "cannot open '" + path + "' for writing");
        require(host_is_little_endian(), ErrorKind::internal, "big-endian hosts are not supported");
    }

    void magic(std::string_view tag) { bytes(tag.data(), tag.size()); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f64(double v) { bytes(&v, 8); }
    void f64s(const double* v, std::size_t n) { bytes(v, n * 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
        require(static_cast<bool>(out_), ErrorKind::io, "write failed on '" + path_ + "'");
    }
    void close() {
        out_.close();
        require(!out_.fail(), ErrorKind::io, "close failed on '" + path_ + "'");
    }

private:
    std::string path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        require(static_cast<bool>(in_), ErrorKind::io, "cannot open '" + path + "'");
    }

    void expect_magic(std::string_view tag) {
        std::string got(tag.size(), '\0');
        in_.read(got.data(), static_cast<std::streamsize>(tag.size()));
        require(static_cast<bool>(in_) && got == tag, ErrorKind::format,
                "'" + path_ + "' is not a " + std::string(tag) + " file");
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    double f64() { double v; bytes(&v, 8); return v; }
    void f64s(double* v, std::size_t n) { bytes(v, n * 8); }
    std::string str() {
        const auto n = u32();
        require(n < (1u << 20), ErrorKind::corrupt_file, "string length out of range in '" + path_ + "'");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        require(static_cast<std::size_t>(in_.gcount()) == n, ErrorKind::corrupt_file,
                "unexpected end of file in '" + path_ + "'");
    }
    /// Remaining byte count, used to reject truncated or padded files.
    std::uint64_t remaining() {
        const auto here = in_.tellg();
        in_.seekg(0, std::ios::end);
        const auto end = in_.tellg();
        in_.seekg(here);
        return static_cast<std::uint64_t>(end - here);
    }
    void expect_eof() {
        require(remaining() == 0, ErrorKind::corrupt_file, "trailing bytes in '" + path_ + "'");
    }
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
};

inline std::uint64_t file_checksum(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path + "'");
    std::uint64_t h = 1469598103934665603ULL;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h = fnv1a(buf.data(), static_cast<std::size_t>(in.gcount()), h);
    }
    return h;
}

}  // namespace io

inline void warn(const std::string& msg) { std::cerr << "srom: warning: " << msg << '\n'; }

inline bool all_finite(const double* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

}  // namespace srom

#endif  // SROM_CORE_HPP
