#pragma once

// Shared small utilities: deterministic RNG, dense matrix container,
// hashing and base64 for checkpoint round-trips.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sdtp {

// All randomness in the project flows through this wrapper. The raw bit
// stream comes from mt19937_64; the float transforms are hand-rolled so
// results do not depend on the standard library's distribution
// implementations.
class Rng {
  public:
    explicit Rng(uint64_t seed) : engine_(seed), seed_tag_(seed) {}

    uint64_t bits() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller, one value per call (the second is discarded to keep the
    // stream position independent of call pairing).
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // standard Gumbel(0, 1)
    double gumbel() {
        double u = 0.0;
        do {
            u = uniform();
        } while (u <= 0.0);
        return -std::log(-std::log(u));
    }

    // integer in [0, n)
    uint64_t below(uint64_t n) {
        // modulo bias is irrelevant at our scales but cheap to avoid
        uint64_t threshold = (~n + 1) % n;
        for (;;) {
            uint64_t r = engine_();
            if (r >= threshold) return r % n;
        }
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; i--) {
            size_t j = below(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derive an independent, reproducible stream for a named purpose.
    Rng derive(std::string_view tag, uint64_t salt = 0) const;

    uint64_t state_seed() const { return seed_tag_; }

  private:
    std::mt19937_64 engine_;
    uint64_t seed_tag_ = 0;
};

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; i++) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline Rng Rng::derive(std::string_view tag, uint64_t salt) const {
    uint64_t h = fnv1a64(tag);
    h = fnv1a64(&salt, sizeof(salt), h);
    uint64_t base = seed_tag_;
    h = fnv1a64(&base, sizeof(base), h);
    Rng out(h);
    out.seed_tag_ = h;
    return out;
}

// Dense row-major matrix. The raw inference path works on these directly;
// the tape stores flat vectors with explicit shapes.
template <typename Real>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<Real> data;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), data(static_cast<size_t>(r) * c, Real(0)) {}

    Real* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
    const Real* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }
    Real& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    Real at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }
    size_t numel() const { return data.size(); }

    uint64_t checksum() const { return fnv1a64(data.data(), data.size() * sizeof(Real)); }
};

std::string base64_encode(const void* data, size_t len);
std::vector<uint8_t> base64_decode(std::string_view s);

// Spearman rank correlation with tie-averaged ranks. Returns NaN for
// fewer than two points or zero variance in either ranking.
inline double spearman(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
    size_t n = a.size();
    if (n < 2) return std::numeric_limits<double>::quiet_NaN();
    auto ranks = [](std::span<const double> x) {
        size_t n = x.size();
        std::vector<size_t> idx(n);
        for (size_t i = 0; i < n; i++) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) { return x[i] < x[j]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) j++;
            double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
            for (size_t k = i; k <= j; k++) r[idx[k]] = avg;
            i = j + 1;
        }
        return r;
    };
    std::vector<double> ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (size_t i = 0; i < n; i++) { ma += ra[i]; mb += rb[i]; }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < n; i++) {
        double da = ra[i] - ma, db = rb[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0 || sbb == 0) return std::numeric_limits<double>::quiet_NaN();
    return sab / std::sqrt(saa * sbb);
}

}  // namespace sdtp
