#include "gtgm/error.hpp"
#include "gtgm/rng.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <sstream>

namespace gtgm {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::config: return "configuration";
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::degeneracy: return "degeneracy";
    case ErrorKind::vocabulary: return "vocabulary";
    case ErrorKind::linkage: return "linkage";
    case ErrorKind::format: return "format";
    case ErrorKind::io: return "io";
    case ErrorKind::numeric: return "numeric";
    }
    return "unknown";
}

int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
    case ErrorKind::format:
    case ErrorKind::io:
        return 2;
    case ErrorKind::numeric:
        return 3;
    default:
        return 1;
    }
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) noexcept {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::uint64_t Rng::below(std::uint64_t n) {
    require(n > 0, ErrorKind::config, "Rng::below requires a positive bound");
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) {
        x = engine_();
    }
    return x % n;
}

std::int64_t Rng::range(std::int64_t lo, std::int64_t hi) {
    require(lo <= hi, ErrorKind::config, "Rng::range requires lo <= hi");
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(below(span));
}

double Rng::normal() {
    // Box-Muller without caching the second variate, so the state is the engine alone.
    double u1 = uniform();
    while (u1 <= 0.0) {
        u1 = uniform();
    }
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string Rng::state() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
}

void Rng::restore(const std::string& state) {
    std::istringstream in(state);
    in >> engine_;
    require(!in.fail(), ErrorKind::format, "corrupt rng state");
}

} // namespace gtgm
