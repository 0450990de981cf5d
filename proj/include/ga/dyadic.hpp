#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ga/common.hpp"
#include "ga/corpus.hpp"
#include "ga/csv.hpp"

// Dyad-level interpersonal features over a pair of equal-length signals:
// synchrony (zero-lag correlation, best-lag correlation, best lag) and
// convergence (global half-vs-half distance change, squared-difference trend,
// and the likelihood trend of one side under a mixture model of the other's
// early behaviour).

namespace ga::dyadic {

// Zero-lag Pearson over jointly-valid samples. Degenerate variance yields a
// flagged 0 so group aggregation can exclude it.
inline Flagged pearson(const SignalView& x, const SignalView& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ValidationError("pearson: need equal lengths >= 2");
    }
    return stats::pearson(x, y);
}

struct LagScan {
    double rho_lagged = 0.0;
    int best_lag = 0;  // positive: y trails x by best_lag samples
};

namespace detail {

// Jointly-valid overlap Pearson at a fixed lag: pairs (x[i], y[i + lag]).
inline std::optional<double> lag_pearson(const SignalView& x, const SignalView& y, int lag) {
    const auto n = static_cast<long>(x.size());
    const long i_lo = std::max<long>(0, -lag);
    const long i_hi = std::min<long>(n, n - lag);
    if (i_hi - i_lo < 2) return std::nullopt;
    double sx = 0, sy = 0;
    std::size_t m = 0;
    for (long i = i_lo; i < i_hi; ++i) {
        const auto j = static_cast<std::size_t>(i + lag);
        const auto ii = static_cast<std::size_t>(i);
        if (!x.is_valid(ii) || !y.is_valid(j)) continue;
        sx += x.values[ii];
        sy += y.values[j];
        ++m;
    }
    if (m < 2) return std::nullopt;
    const double mx = sx / static_cast<double>(m);
    const double my = sy / static_cast<double>(m);
    double vx = 0, vy = 0, cov = 0;
    for (long i = i_lo; i < i_hi; ++i) {
        const auto j = static_cast<std::size_t>(i + lag);
        const auto ii = static_cast<std::size_t>(i);
        if (!x.is_valid(ii) || !y.is_valid(j)) continue;
        const double dx = x.values[ii] - mx;
        const double dy = y.values[j] - my;
        vx += dx * dx;
        vy += dy * dy;
        cov += dx * dy;
    }
    const double denom = std::sqrt(vx * vy);
    if (denom <= 0.0 || !std::isfinite(denom)) return std::nullopt;
    return std::clamp(cov / denom, -1.0, 1.0);
}

}  // namespace detail

// Per-lag Pearson over the overlapping region for every lag in
// [-max_lag, +max_lag]; returns the maximum and its lag. The per-overlap
// normalization makes values comparable across lags. Ties break toward the
// smallest |lag|, then toward the negative lag. Lags with fewer than two
// valid pairs or zero variance are skipped; if nothing is scannable the
// window cannot carry a synchrony value and an Error is thrown.
inline LagScan lagged_correlation(const SignalView& x, const SignalView& y, int max_lag) {
    if (x.size() != y.size()) throw ValidationError("lagged_correlation: length mismatch");
    if (max_lag < 0 || static_cast<std::size_t>(max_lag) >= x.size()) {
        throw ValidationError("lagged_correlation: max_lag must be in [0, length)");
    }
    bool found = false;
    LagScan best;
    // Preference order 0, -1, +1, -2, +2, ...; strict improvement keeps the
    // preferred lag on ties.
    for (int a = 0; a <= max_lag; ++a) {
        for (int sign = -1; sign <= 1; sign += 2) {
            if (a == 0 && sign == 1) continue;
            const int lag = sign * a;
            const auto r = detail::lag_pearson(x, y, lag);
            if (!r) continue;
            if (!found || *r > best.rho_lagged) {
                best.rho_lagged = *r;
                best.best_lag = lag;
                found = true;
            }
        }
    }
    if (!found) throw Error("lagged_correlation: no lag with a computable correlation");
    return best;
}

// First-half minus second-half squared distance; positive = converging.
// Halves are [0, n/2) and [n/2, n) with floor division; sums run over
// jointly-valid pairs.
inline double global_convergence(const SignalView& x, const SignalView& y) {
    if (x.size() != y.size() || x.size() < 4) {
        throw ValidationError("global_convergence: need equal lengths >= 4");
    }
    const std::size_t half = x.size() / 2;
    double first = 0.0, second = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!x.is_valid(i) || !y.is_valid(i)) continue;
        const double d = x.values[i] - y.values[i];
        (i < half ? first : second) += d * d;
    }
    return first - second;
}

// Correlation of the squared-difference sequence with its time index;
// positive = growing distance (divergence) in the raw orientation.
inline Flagged symmetric_convergence(const SignalView& x, const SignalView& y) {
    if (x.size() != y.size() || x.size() < 3) {
        throw ValidationError("symmetric_convergence: need equal lengths >= 3");
    }
    std::vector<double> d, idx;
    d.reserve(x.size());
    idx.reserve(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!x.is_valid(i) || !y.is_valid(i)) continue;
        const double diff = x.values[i] - y.values[i];
        d.push_back(diff * diff);
        idx.push_back(static_cast<double>(i));
    }
    return stats::pearson(SignalView(d), SignalView(idx));
}

// ---------------------------------------------------------------------------
// Gaussian mixture (scalar) fitted with EM.

struct GmmParams {
    std::vector<double> weights;    // simplex
    std::vector<double> means;
    std::vector<double> variances;  // floored
    std::vector<double> log_likelihood_history;  // one entry per EM iteration

    int n_components() const { return static_cast<int>(weights.size()); }
};

inline double gmm_log_likelihood(const GmmParams& p, double x) {
    // log-sum-exp over component log densities
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(p.weights.size());
    for (std::size_t j = 0; j < p.weights.size(); ++j) {
        const double var = p.variances[j];
        const double d = x - p.means[j];
        terms[j] = std::log(p.weights[j]) - 0.5 * std::log(2.0 * kPi * var) - d * d / (2.0 * var);
        best = std::max(best, terms[j]);
    }
    double sum = 0.0;
    for (double t : terms) sum += std::exp(t - best);
    return best + std::log(sum);
}

namespace detail {

inline constexpr double kVarianceFloor = 1e-6;
inline constexpr double kEmTolerance = 1e-6;
inline constexpr int kEmMaxIterations = 200;

// k-means++ style seeding: spread initial means by squared distance.
inline std::vector<double> seed_means(std::span<const double> samples, int k, Rng& rng) {
    std::vector<double> centers;
    centers.reserve(static_cast<std::size_t>(k));
    centers.push_back(samples[rng.index(samples.size())]);
    std::vector<double> d2(samples.size());
    while (centers.size() < static_cast<std::size_t>(k)) {
        double total = 0.0;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (double c : centers) best = std::min(best, (samples[i] - c) * (samples[i] - c));
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) {
            centers.push_back(samples[rng.index(samples.size())]);
            continue;
        }
        double target = rng.uniform() * total;
        std::size_t pick = samples.size() - 1;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            target -= d2[i];
            if (target <= 0.0) {
                pick = i;
                break;
            }
        }
        centers.push_back(samples[pick]);
    }
    return centers;
}

}  // namespace detail

// EM to convergence (log-likelihood change < 1e-6 or 200 iterations) with a
// 1e-6 variance floor. The per-iteration log likelihood is recorded; EM
// guarantees it non-decreasing, which the test suite asserts.
inline GmmParams fit_gmm(std::span<const double> samples, int k, std::uint64_t seed) {
    if (k < 1) throw ValidationError("fit_gmm: k must be >= 1");
    if (samples.size() < static_cast<std::size_t>(k)) {
        throw ValidationError("fit_gmm: fewer samples (" + std::to_string(samples.size()) +
                              ") than components (" + std::to_string(k) + ")");
    }
    Rng rng(seed);
    const auto n = samples.size();
    const auto kk = static_cast<std::size_t>(k);

    GmmParams p;
    p.means = detail::seed_means(samples, k, rng);
    p.weights.assign(kk, 1.0 / static_cast<double>(kk));
    const double global_var =
        std::max(stats::variance_population(samples), detail::kVarianceFloor);
    p.variances.assign(kk, global_var);

    std::vector<double> resp(n * kk);
    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < detail::kEmMaxIterations; ++iter) {
        // E-step
        double ll = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < kk; ++j) {
                const double d = samples[i] - p.means[j];
                const double term = std::log(p.weights[j]) -
                                    0.5 * std::log(2.0 * kPi * p.variances[j]) -
                                    d * d / (2.0 * p.variances[j]);
                resp[i * kk + j] = term;
                best = std::max(best, term);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j < kk; ++j) sum += std::exp(resp[i * kk + j] - best);
            const double log_norm = best + std::log(sum);
            ll += log_norm;
            for (std::size_t j = 0; j < kk; ++j) {
                resp[i * kk + j] = std::exp(resp[i * kk + j] - log_norm);
            }
        }
        assert(p.log_likelihood_history.empty() ||
               ll >= p.log_likelihood_history.back() - 1e-9 * std::max(1.0, std::fabs(ll)));
        p.log_likelihood_history.push_back(ll);
        if (std::fabs(ll - prev_ll) < detail::kEmTolerance) break;
        prev_ll = ll;

        // M-step
        for (std::size_t j = 0; j < kk; ++j) {
            double rsum = 0.0, msum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                rsum += resp[i * kk + j];
                msum += resp[i * kk + j] * samples[i];
            }
            if (rsum <= 1e-300) {
                // Dead component: park it on a sample drawn from the stream.
                p.means[j] = samples[rng.index(n)];
                p.variances[j] = global_var;
                p.weights[j] = 1e-12;
                continue;
            }
            const double mu = msum / rsum;
            double vsum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double d = samples[i] - mu;
                vsum += resp[i * kk + j] * d * d;
            }
            p.means[j] = mu;
            p.variances[j] = std::max(vsum / rsum, detail::kVarianceFloor);
            p.weights[j] = rsum / static_cast<double>(n);
        }
        double wsum = 0.0;
        for (double w : p.weights) wsum += w;
        for (double& w : p.weights) w /= wsum;
    }
    return p;
}

// Likelihood-trend convergence: fit a GMM on x over the initial period
// [0, m), m = floor(2n/3), score each later y_b under it, and correlate the
// log-likelihood sequence with time. Positive = y drifting toward x's early
// distribution.
inline Flagged asymmetric_convergence(const SignalView& x, const SignalView& y, int k,
                                      std::uint64_t seed) {
    if (x.size() != y.size() || x.size() < 6) {
        throw ValidationError("asymmetric_convergence: need equal lengths >= 6");
    }
    const std::size_t m = (2 * x.size()) / 3;
    std::vector<double> early;
    early.reserve(m);
    for (std::size_t a = 0; a < m; ++a) {
        if (x.is_valid(a)) early.push_back(x.values[a]);
    }
    if (early.size() < static_cast<std::size_t>(std::max(k, 2))) return {0.0, true};
    const GmmParams params = fit_gmm(early, k, seed);

    std::vector<double> ll, idx;
    for (std::size_t b = m; b < y.size(); ++b) {
        if (!y.is_valid(b)) continue;
        ll.push_back(gmm_log_likelihood(params, y.values[b]));
        idx.push_back(static_cast<double>(b));
    }
    return stats::pearson(SignalView(ll), SignalView(idx));
}

// ---------------------------------------------------------------------------
// Per-window, per-dyad, per-channel feature table.

enum class ConvergenceScope { per_window, per_session };

struct DyadConfig {
    double max_lag_fraction = 1.0 / 3.0;  // of the window sample count
    int gmm_components = 2;
    std::uint64_t seed = 0;
    double min_validity = 0.5;  // joint-valid fraction below this -> window missing
    bool synchrony = true;
    bool convergence = true;
    ConvergenceScope scope = ConvergenceScope::per_window;
};

inline const std::vector<std::string>& dyad_feature_names() {
    static const std::vector<std::string> names = {"rho",         "rho_lagged",     "best_lag",
                                                   "conv_global", "conv_symmetric", "conv_asymmetric"};
    return names;
}

struct DyadRow {
    std::string participant_a;
    std::string participant_b;
    std::string channel;
    long window = 0;  // -1 = whole-session scope
    std::string feature;
    std::optional<double> value;
    std::string flag;  // ok | degenerate | missing
};

struct DyadFeatureTable {
    std::string session_id;
    std::size_t n_windows = 0;
    std::vector<DyadRow> rows;
};

namespace detail {

inline void push(DyadFeatureTable& table, const std::string& a, const std::string& b,
                 const std::string& channel, long window, const std::string& feature,
                 std::optional<double> value, const std::string& flag) {
    table.rows.push_back({a, b, channel, window, feature, value, flag});
}

inline void push_flagged(DyadFeatureTable& table, const std::string& a, const std::string& b,
                         const std::string& channel, long window, const std::string& feature,
                         const Flagged& f) {
    push(table, a, b, channel, window, feature, f.value, f.degenerate ? "degenerate" : "ok");
}

inline void push_missing_set(DyadFeatureTable& table, const std::string& a, const std::string& b,
                             const std::string& channel, long window,
                             const std::vector<std::string>& features) {
    for (const auto& f : features) push(table, a, b, channel, window, f, std::nullopt, "missing");
}

inline double joint_validity(const SignalView& x, const SignalView& y) {
    if (x.size() == 0) return 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x.is_valid(i) && y.is_valid(i)) ++n;
    }
    return static_cast<double>(n) / static_cast<double>(x.size());
}

inline void emit_synchrony(DyadFeatureTable& table, const std::string& a, const std::string& b,
                           const std::string& channel, long window, const SignalView& x,
                           const SignalView& y, int max_lag) {
    push_flagged(table, a, b, channel, window, "rho", pearson(x, y));
    try {
        const LagScan scan = lagged_correlation(x, y, max_lag);
        push(table, a, b, channel, window, "rho_lagged", scan.rho_lagged, "ok");
        push(table, a, b, channel, window, "best_lag", static_cast<double>(scan.best_lag), "ok");
    } catch (const Error&) {
        push_missing_set(table, a, b, channel, window, {"rho_lagged", "best_lag"});
    }
}

inline void emit_convergence(DyadFeatureTable& table, const std::string& a, const std::string& b,
                             const std::string& channel, long window, const SignalView& x,
                             const SignalView& y, const DyadConfig& cfg, std::uint64_t seed) {
    if (x.size() >= 4) {
        push(table, a, b, channel, window, "conv_global", global_convergence(x, y), "ok");
    } else {
        push_missing_set(table, a, b, channel, window, {"conv_global"});
    }
    if (x.size() >= 3) {
        push_flagged(table, a, b, channel, window, "conv_symmetric", symmetric_convergence(x, y));
    } else {
        push_missing_set(table, a, b, channel, window, {"conv_symmetric"});
    }
    if (x.size() >= 6) {
        push_flagged(table, a, b, channel, window, "conv_asymmetric",
                     asymmetric_convergence(x, y, cfg.gmm_components, seed));
    } else {
        push_missing_set(table, a, b, channel, window, {"conv_asymmetric"});
    }
}

}  // namespace detail

// Every unordered participant pair x channel x window. Degeneracies become
// flags, low-validity windows become missing rows; a session never aborts
// because one dyad-window is silent.
inline DyadFeatureTable dyad_features(const corpus::Session& session,
                                      const corpus::WindowGrid& grid, const DyadConfig& cfg) {
    const corpus::SessionWindows windows = corpus::make_windows(session, grid);
    DyadFeatureTable table;
    table.session_id = session.session_id;
    table.n_windows = windows.n_windows;
    const Rng base(cfg.seed);

    const std::vector<std::string> sync_features = {"rho", "rho_lagged", "best_lag"};
    const std::vector<std::string> conv_features = {"conv_global", "conv_symmetric",
                                                    "conv_asymmetric"};

    for (std::size_t ia = 0; ia < session.participants.size(); ++ia) {
        for (std::size_t ib = ia + 1; ib < session.participants.size(); ++ib) {
            const std::string& a = session.participants[ia];
            const std::string& b = session.participants[ib];
            for (const auto& channel : session.channel_names) {
                const auto& slices_a = windows.slices.at({a, channel});
                const auto& slices_b = windows.slices.at({b, channel});
                const Rng dyad_rng = base.fork(session.session_id + "|" + a + "|" + b + "|" + channel);

                for (std::size_t w = 0; w < windows.n_windows; ++w) {
                    const SignalView x = slices_a[w].view();
                    const SignalView y = slices_b[w].view();
                    const bool usable = x.size() >= 2 &&
                                        detail::joint_validity(x, y) >= cfg.min_validity;
                    const auto window = static_cast<long>(w);
                    if (cfg.synchrony) {
                        if (usable) {
                            const int max_lag = std::max(
                                1, static_cast<int>(std::floor(cfg.max_lag_fraction *
                                                               static_cast<double>(x.size()))));
                            detail::emit_synchrony(table, a, b, channel, window, x, y,
                                                   std::min<int>(max_lag,
                                                                 static_cast<int>(x.size()) - 1));
                        } else {
                            detail::push_missing_set(table, a, b, channel, window, sync_features);
                        }
                    }
                    if (cfg.convergence && cfg.scope == ConvergenceScope::per_window) {
                        if (usable) {
                            detail::emit_convergence(table, a, b, channel, window, x, y, cfg,
                                                     dyad_rng.fork(w).next());
                        } else {
                            detail::push_missing_set(table, a, b, channel, window, conv_features);
                        }
                    }
                }
                if (cfg.convergence && cfg.scope == ConvergenceScope::per_session) {
                    const SignalView x = session.channel(a, channel).view();
                    const SignalView y = session.channel(b, channel).view();
                    if (x.size() >= 6 && detail::joint_validity(x, y) >= cfg.min_validity) {
                        detail::emit_convergence(table, a, b, channel, -1, x, y, cfg,
                                                 dyad_rng.fork("session").next());
                    } else {
                        detail::push_missing_set(table, a, b, channel, -1, conv_features);
                    }
                }
            }
        }
    }
    return table;
}

// CSV contract:
// session,window,participant_a,participant_b,channel,feature,value,flag
inline const std::vector<std::string>& dyad_csv_header() {
    static const std::vector<std::string> h = {"session", "window",  "participant_a",
                                               "participant_b", "channel", "feature",
                                               "value",   "flag"};
    return h;
}

inline void write_dyad_csv(const DyadFeatureTable& table, const std::filesystem::path& path) {
    csvio::Writer w(path, dyad_csv_header());
    for (const auto& r : table.rows) {
        w.row({table.session_id, std::to_string(r.window), r.participant_a, r.participant_b,
               r.channel, r.feature, csvio::num(r.value), r.flag});
    }
}

inline void append_dyad_csv(csvio::Writer& w, const DyadFeatureTable& table) {
    for (const auto& r : table.rows) {
        w.row({table.session_id, std::to_string(r.window), r.participant_a, r.participant_b,
               r.channel, r.feature, csvio::num(r.value), r.flag});
    }
}

inline std::vector<DyadFeatureTable> read_dyad_csv(const std::filesystem::path& path) {
    csvio::Reader reader(path, dyad_csv_header());
    std::map<std::string, DyadFeatureTable> by_session;
    std::vector<std::string> order;
    csvio::Row row;
    while (reader.next(row)) {
        const std::string& session = row.fields[0];
        if (!by_session.count(session)) {
            by_session[session].session_id = session;
            order.push_back(session);
        }
        DyadFeatureTable& table = by_session[session];
        DyadRow r;
        r.window = reader.parse_long(row, 1);
        r.participant_a = row.fields[2];
        r.participant_b = row.fields[3];
        r.channel = row.fields[4];
        r.feature = row.fields[5];
        r.value = reader.parse_opt_double(row, 6);
        r.flag = row.fields[7];
        if (r.flag != "ok" && r.flag != "degenerate" && r.flag != "missing") {
            reader.fail(row.line_no, "unknown flag '" + r.flag + "'");
        }
        if (r.window >= 0) {
            table.n_windows = std::max(table.n_windows, static_cast<std::size_t>(r.window) + 1);
        }
        table.rows.push_back(std::move(r));
    }
    std::vector<DyadFeatureTable> out;
    out.reserve(order.size());
    for (const auto& s : order) out.push_back(std::move(by_session[s]));
    return out;
}

}  // namespace ga::dyadic
