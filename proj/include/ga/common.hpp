#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

// Shared primitives: error types, flagged values, deterministic RNG and the
// correlation/moment helpers every feature module builds on.

namespace ga {

inline constexpr double kPi = 3.14159265358979323846;

// Contract violations (bad input files, broken preconditions). The CLI maps
// these to exit code 2; anything else lands on exit code 1.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error(msg) {}
};

// A statistic that may be degenerate (zero variance, empty overlap, ...).
// Degenerate values are 0 by convention so aggregation can exclude them
// explicitly instead of propagating NaN.
struct Flagged {
    double value = 0.0;
    bool degenerate = false;
};

// A real signal with an optional per-sample validity mask (empty = all valid).
struct SignalView {
    std::span<const double> values;
    std::span<const std::uint8_t> valid;

    SignalView() = default;
    SignalView(std::span<const double> v) : values(v) {}
    SignalView(std::span<const double> v, std::span<const std::uint8_t> m)
        : values(v), valid(m) {}
    SignalView(const std::vector<double>& v) : values(v) {}
    SignalView(const std::vector<double>& v, const std::vector<std::uint8_t>& m)
        : values(v), valid(m) {}

    std::size_t size() const { return values.size(); }
    bool is_valid(std::size_t i) const { return valid.empty() || valid[i] != 0; }
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// splitmix64 stream. Deliberately self-contained: std:: distributions are not
// bit-stable across standard libraries, and seeded runs must reproduce
// byte-identical outputs everywhere.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix64(seed, 0xA0761D6478BD642FULL)) {}

    std::uint64_t next() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
    }

    double normal(double mu, double sd) { return mu + sd * normal(); }

    std::size_t index(std::size_t n) { return static_cast<std::size_t>(next() % n); }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[index(i)]);
        }
    }

    // Independent substream derived from the current state and a tag; keyed
    // forks keep per-entity streams stable no matter the iteration order.
    Rng fork(std::uint64_t tag) const { return Rng(mix64(state_, tag)); }
    Rng fork(std::string_view tag) const { return Rng(mix64(state_, fnv1a64(tag))); }

private:
    std::uint64_t state_;
};

namespace stats {

inline double mean(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double variance_population(std::span<const double> v) {
    if (v.empty()) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
}

inline double variance_sample(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size() - 1);
}

// Population moments over jointly-valid sample pairs.
struct JointMoments {
    double mean_x = 0.0, mean_y = 0.0;
    double var_x = 0.0, var_y = 0.0, cov = 0.0;
    std::size_t n = 0;
};

inline JointMoments joint_moments(const SignalView& x, const SignalView& y) {
    if (x.size() != y.size()) {
        throw ValidationError("joint_moments: signals differ in length (" +
                              std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
    }
    JointMoments m;
    double sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!x.is_valid(i) || !y.is_valid(i)) continue;
        sx += x.values[i];
        sy += y.values[i];
        ++m.n;
    }
    if (m.n == 0) return m;
    m.mean_x = sx / static_cast<double>(m.n);
    m.mean_y = sy / static_cast<double>(m.n);
    double vxx = 0.0, vyy = 0.0, vxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!x.is_valid(i) || !y.is_valid(i)) continue;
        const double dx = x.values[i] - m.mean_x;
        const double dy = y.values[i] - m.mean_y;
        vxx += dx * dx;
        vyy += dy * dy;
        vxy += dx * dy;
    }
    m.var_x = vxx / static_cast<double>(m.n);
    m.var_y = vyy / static_cast<double>(m.n);
    m.cov = vxy / static_cast<double>(m.n);
    return m;
}

// Pearson correlation over jointly-valid samples. Fewer than two pairs or a
// zero-variance side yields a flagged 0, never NaN.
inline Flagged pearson(const SignalView& x, const SignalView& y) {
    const JointMoments m = joint_moments(x, y);
    if (m.n < 2) return {0.0, true};
    const double denom = std::sqrt(m.var_x * m.var_y);
    if (denom <= 0.0 || !std::isfinite(denom)) return {0.0, true};
    double r = m.cov / denom;
    if (r > 1.0) r = 1.0;
    if (r < -1.0) r = -1.0;
    return {r, false};
}

// Two-sided tail of the standard normal, 2*(1 - Phi(|z|)).
inline double normal_two_tailed_p(double z) {
    return std::erfc(std::fabs(z) / std::sqrt(2.0));
}

}  // namespace stats

// Deterministic parallel map: results land in preassigned slots, so the
// output is independent of scheduling. n_threads <= 1 runs inline.
template <class Fn>
void parallel_for(std::size_t n, unsigned n_threads, Fn&& fn) {
    if (n == 0) return;
    if (n_threads <= 1 || n == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(n_threads, n));
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w]() {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace ga
