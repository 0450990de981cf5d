#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ga/annotation.hpp"
#include "ga/common.hpp"
#include "ga/groupagg.hpp"

// Statistical analysis of the convergence-divergence relationship between
// group features and fused affect labels: degree-2 least squares, Kendall
// tau-b with a two-tailed p-value, and 2-D histogram export.

namespace ga::analysis {

struct QuadraticFit {
    double alpha = 0.0;  // coefficient on x^2
    double beta = 0.0;   // coefficient on x
    double c = 0.0;      // intercept
    double r_squared = 0.0;
    bool r2_degenerate = false;  // zero total variance; R^2 reported as 0
};

namespace detail {

// 3x3 Gaussian elimination with partial pivoting.
inline std::array<double, 3> solve3(std::array<std::array<double, 4>, 3> m) {
    for (int col = 0; col < 3; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 3; ++r) {
            if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
        }
        std::swap(m[col], m[pivot]);
        if (std::fabs(m[col][col]) < 1e-12) {
            throw ValidationError("fit_quadratic: rank-deficient design (need >= 3 distinct x)");
        }
        for (int r = 0; r < 3; ++r) {
            if (r == col) continue;
            const double f = m[r][col] / m[col][col];
            for (int c2 = col; c2 < 4; ++c2) m[r][c2] -= f * m[col][c2];
        }
    }
    return {m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]};
}

}  // namespace detail

// Least squares y ~ alpha x^2 + beta x + c via the normal equations, with x
// centered first for conditioning. R^2 = 1 - SS_res / SS_tot; a constant y is
// reported as R^2 = 0 with a flag instead of 0/0.
inline QuadraticFit fit_quadratic(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ValidationError("fit_quadratic: length mismatch");
    if (x.size() < 3) throw ValidationError("fit_quadratic: need >= 3 points");
    std::set<double> distinct(x.begin(), x.end());
    if (distinct.size() < 3) {
        throw ValidationError("fit_quadratic: rank-deficient design (need >= 3 distinct x)");
    }

    const double mx = stats::mean(x);
    const auto n = static_cast<double>(x.size());
    // Moments of u = x - mx up to order 4 and cross moments with y.
    double s1 = 0, s2 = 0, s3 = 0, s4 = 0, sy = 0, suy = 0, su2y = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double u = x[i] - mx;
        const double u2 = u * u;
        s1 += u;
        s2 += u2;
        s3 += u2 * u;
        s4 += u2 * u2;
        sy += y[i];
        suy += u * y[i];
        su2y += u2 * y[i];
    }
    std::array<std::array<double, 4>, 3> m = {{
        {s4, s3, s2, su2y},
        {s3, s2, s1, suy},
        {s2, s1, n, sy},
    }};
    const auto [a, b, c0] = detail::solve3(m);

    QuadraticFit fit;
    fit.alpha = a;
    fit.beta = b - 2.0 * a * mx;
    fit.c = c0 - b * mx + a * mx * mx;

    const double ybar = sy / n;
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double u = x[i] - mx;
        const double pred = a * u * u + b * u + c0;
        ss_res += (y[i] - pred) * (y[i] - pred);
        ss_tot += (y[i] - ybar) * (y[i] - ybar);
    }
    if (ss_tot <= 0.0) {
        fit.r_squared = 0.0;
        fit.r2_degenerate = true;
    } else {
        fit.r_squared = std::clamp(1.0 - ss_res / ss_tot, 0.0, 1.0);
    }
    return fit;
}

struct TauResult {
    double tau = 0.0;
    double p_value = 1.0;
    bool significant = false;  // p <= 0.10, two-tailed
    bool degenerate = false;   // all x or all y tied
};

// Kendall tau-b with the tie-adjusted normal approximation for the two-tailed
// p-value. Tie correction matters here: ordinal labels and aggregated
// features tie heavily.
inline TauResult kendall_tau(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ValidationError("kendall_tau: length mismatch");
    if (x.size() < 2) throw ValidationError("kendall_tau: need >= 2 pairs");
    const std::size_t n = x.size();

    long long concordant = 0, discordant = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = x[i] - x[j];
            const double dy = y[i] - y[j];
            const double prod = dx * dy;
            if (prod > 0) ++concordant;
            else if (prod < 0) ++discordant;
        }
    }

    // Tie-group sizes per variable.
    auto tie_groups = [](std::span<const double> v) {
        std::vector<double> sorted(v.begin(), v.end());
        std::sort(sorted.begin(), sorted.end());
        std::vector<long long> groups;
        std::size_t i = 0;
        while (i < sorted.size()) {
            std::size_t j = i + 1;
            while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
            if (j - i > 1) groups.push_back(static_cast<long long>(j - i));
            i = j;
        }
        return groups;
    };
    const auto gx = tie_groups(x);
    const auto gy = tie_groups(y);
    auto pairs_of = [](const std::vector<long long>& g) {
        long long s = 0;
        for (long long t : g) s += t * (t - 1) / 2;
        return s;
    };
    const auto nn = static_cast<long long>(n);
    const long long n0 = nn * (nn - 1) / 2;
    const long long n1 = pairs_of(gx);
    const long long n2 = pairs_of(gy);

    TauResult res;
    if (n0 == n1 || n0 == n2) {
        res.degenerate = true;
        return res;
    }
    const auto s = static_cast<double>(concordant - discordant);
    res.tau = s / std::sqrt(static_cast<double>(n0 - n1) * static_cast<double>(n0 - n2));

    // Variance of S under the null with tie adjustment.
    auto sum3 = [](const std::vector<long long>& g, auto f) {
        double s3 = 0;
        for (long long t : g) s3 += f(static_cast<double>(t));
        return s3;
    };
    const double v0 = static_cast<double>(nn) * (nn - 1.0) * (2.0 * nn + 5.0);
    const double vt = sum3(gx, [](double t) { return t * (t - 1.0) * (2.0 * t + 5.0); });
    const double vu = sum3(gy, [](double t) { return t * (t - 1.0) * (2.0 * t + 5.0); });
    double var_s = (v0 - vt - vu) / 18.0;
    if (n >= 3) {
        const double t1 = sum3(gx, [](double t) { return t * (t - 1.0) * (t - 2.0); });
        const double u1 = sum3(gy, [](double t) { return t * (t - 1.0) * (t - 2.0); });
        var_s += t1 * u1 / (9.0 * nn * (nn - 1.0) * (nn - 2.0));
    }
    const double t2 = sum3(gx, [](double t) { return t * (t - 1.0); });
    const double u2 = sum3(gy, [](double t) { return t * (t - 1.0); });
    var_s += t2 * u2 / (2.0 * nn * (nn - 1.0));

    if (var_s <= 0.0) {
        res.degenerate = true;
        return res;
    }
    res.p_value = stats::normal_two_tailed_p(s / std::sqrt(var_s));
    res.significant = res.p_value <= 0.10;
    return res;
}

struct Hist2D {
    std::size_t bins_x = 1, bins_y = 1;
    double x_min = 0, x_max = 0, y_min = 0, y_max = 0;
    std::vector<std::size_t> counts;  // row-major [iy][ix]

    std::size_t at(std::size_t ix, std::size_t iy) const { return counts[iy * bins_x + ix]; }
    std::size_t total() const {
        std::size_t s = 0;
        for (auto c : counts) s += c;
        return s;
    }
};

// Counts over a uniform grid spanning [min, max] per axis, last bin
// right-closed. A zero-width axis collapses to a single bin.
inline Hist2D hist2d(std::span<const double> x, std::span<const double> y, std::size_t bins_x,
                     std::size_t bins_y) {
    if (x.size() != y.size()) throw ValidationError("hist2d: length mismatch");
    if (x.empty()) throw ValidationError("hist2d: need >= 1 pair");
    if (bins_x == 0 || bins_y == 0) throw ValidationError("hist2d: bins must be >= 1");
    Hist2D h;
    h.x_min = *std::min_element(x.begin(), x.end());
    h.x_max = *std::max_element(x.begin(), x.end());
    h.y_min = *std::min_element(y.begin(), y.end());
    h.y_max = *std::max_element(y.begin(), y.end());
    h.bins_x = h.x_max > h.x_min ? bins_x : 1;
    h.bins_y = h.y_max > h.y_min ? bins_y : 1;
    h.counts.assign(h.bins_x * h.bins_y, 0);
    auto bin_of = [](double v, double lo, double hi, std::size_t bins) -> std::size_t {
        if (bins == 1 || hi <= lo) return 0;
        const auto b = static_cast<long>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
        return static_cast<std::size_t>(std::clamp<long>(b, 0, static_cast<long>(bins) - 1));
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t ix = bin_of(x[i], h.x_min, h.x_max, h.bins_x);
        const std::size_t iy = bin_of(y[i], h.y_min, h.y_max, h.bins_y);
        ++h.counts[iy * h.bins_x + ix];
    }
    return h;
}

// ---------------------------------------------------------------------------
// Convergence-divergence report over (feature, affect dimension) cells.

struct ConvDivOptions {
    // Report orientation: flip conv_symmetric so that larger = convergence,
    // matching the deviation-vs-synchrony reading of the other features. Raw
    // values stay available in the dyad table.
    bool negate_symmetric_convergence = true;
    std::size_t bins_x = 12;
    std::size_t bins_y = 12;
    bool per_session = false;  // default pools windows across sessions
};

struct ConvDivCell {
    std::string feature;
    std::string dimension;
    std::string session = "(pooled)";
    std::string orientation;  // convergence-indicator | divergence-indicator | unspecified
    bool sign_flipped = false;
    std::size_t n = 0;
    bool fit_ok = false;
    QuadraticFit fit;
    TauResult tau;
    Hist2D hist;
};

inline std::string feature_orientation(const std::string& name) {
    const bool is_std = name.size() >= 4 && name.compare(name.size() - 4, 4, ".std") == 0;
    if (is_std) return "divergence-indicator";
    if (name.rfind("sync.", 0) == 0) return "convergence-indicator";
    return "unspecified";
}

namespace detail {

inline std::vector<ConvDivCell> convdiv_cells(
    const std::vector<const groupagg::GroupFeatureVector*>& features,
    const std::map<std::string, annotation::FusedPair>& labels,
    const std::vector<std::string>& selection, const ConvDivOptions& options,
    const std::string& session_label) {
    std::vector<ConvDivCell> cells;
    for (const auto dim : {annotation::Dimension::arousal, annotation::Dimension::valence}) {
        for (const auto& name : selection) {
            std::vector<double> xs, ys;
            // A feature name can appear in several feature sets (combined
            // duplicates its sources); each (session, window) contributes one
            // pair, otherwise tie-adjusted p-values see an inflated n.
            std::set<std::pair<std::string, long>> taken;
            for (const auto* vec : features) {
                auto lit = labels.find(vec->session_id);
                if (lit == labels.end()) continue;
                const annotation::FusedLabel& fused =
                    dim == annotation::Dimension::arousal ? lit->second.arousal
                                                          : lit->second.valence;
                const auto w = static_cast<std::size_t>(vec->window);
                if (vec->window < 0 || w >= fused.values.size() || !fused.values[w]) continue;
                const auto* value = vec->find(name);
                if (!value || !*value) continue;
                if (!taken.insert({vec->session_id, vec->window}).second) continue;
                xs.push_back(*fused.values[w]);
                ys.push_back(**value);
            }
            ConvDivCell cell;
            cell.feature = name;
            cell.dimension = annotation::dimension_name(dim);
            cell.session = session_label;
            cell.orientation = feature_orientation(name);
            if (options.negate_symmetric_convergence &&
                name.find(".conv_symmetric.") != std::string::npos) {
                for (double& v : ys) v = -v;
                cell.sign_flipped = true;
            }
            cell.n = xs.size();
            if (cell.n >= 3) {
                try {
                    cell.fit = fit_quadratic(xs, ys);
                    cell.fit_ok = true;
                } catch (const ValidationError&) {
                    cell.fit_ok = false;
                }
                cell.tau = kendall_tau(xs, ys);
                cell.hist = hist2d(xs, ys, options.bins_x, options.bins_y);
            }
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

}  // namespace detail

// Pairs (label, feature) per feature and dimension, pooled across sessions by
// default (per-session cells behind the option). Labels are the independent
// variable of the fit; features come from the group feature vectors.
inline std::vector<ConvDivCell> run_convdiv_report(
    const std::vector<groupagg::GroupFeatureVector>& features,
    const std::map<std::string, annotation::FusedPair>& labels,
    const std::vector<std::string>& selection, const ConvDivOptions& options = {}) {
    if (selection.empty()) throw ValidationError("run_convdiv_report: empty feature selection");

    if (!options.per_session) {
        std::vector<const groupagg::GroupFeatureVector*> all;
        all.reserve(features.size());
        for (const auto& vec : features) all.push_back(&vec);
        return detail::convdiv_cells(all, labels, selection, options, "(pooled)");
    }
    std::map<std::string, std::vector<const groupagg::GroupFeatureVector*>> by_session;
    for (const auto& vec : features) by_session[vec.session_id].push_back(&vec);
    std::vector<ConvDivCell> cells;
    for (const auto& [sid, vecs] : by_session) {
        auto session_cells = detail::convdiv_cells(vecs, labels, selection, options, sid);
        cells.insert(cells.end(), std::make_move_iterator(session_cells.begin()),
                     std::make_move_iterator(session_cells.end()));
    }
    return cells;
}

inline nlohmann::json convdiv_to_json(const std::vector<ConvDivCell>& cells) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : cells) {
        nlohmann::json j;
        j["feature"] = c.feature;
        j["dimension"] = c.dimension;
        j["session"] = c.session;
        j["orientation"] = c.orientation;
        j["sign_flipped"] = c.sign_flipped;
        j["n"] = c.n;
        if (c.fit_ok) {
            j["alpha"] = c.fit.alpha;
            j["beta"] = c.fit.beta;
            j["c"] = c.fit.c;
            j["r2"] = c.fit.r_squared;
        } else {
            j["alpha"] = nullptr;
            j["beta"] = nullptr;
            j["c"] = nullptr;
            j["r2"] = nullptr;
        }
        if (c.n >= 3 && !c.tau.degenerate) {
            j["tau"] = c.tau.tau;
            j["p"] = c.tau.p_value;
            j["significant"] = c.tau.significant;
        } else {
            j["tau"] = nullptr;
            j["p"] = nullptr;
            j["significant"] = false;
        }
        rows.push_back(std::move(j));
    }
    return rows;
}

}  // namespace ga::analysis
