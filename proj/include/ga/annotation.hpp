#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ga/common.hpp"
#include "ga/csv.hpp"

// Annotation tracks (ordinal 1..9 per 15 s window), inter-annotator agreement
// metrics, and correlation-weighted label fusion.

namespace ga::annotation {

enum class Dimension { arousal, valence };

inline const char* dimension_name(Dimension d) {
    return d == Dimension::arousal ? "arousal" : "valence";
}

struct AnnotationTrack {
    std::string session_id;
    std::string annotator_id;
    Dimension dimension = Dimension::arousal;
    std::vector<std::optional<int>> ratings;  // 1..9, missing allowed
};

inline void validate_track(const AnnotationTrack& t, int n_levels = 9) {
    for (std::size_t w = 0; w < t.ratings.size(); ++w) {
        if (t.ratings[w] && (*t.ratings[w] < 1 || *t.ratings[w] > n_levels)) {
            throw ValidationError("annotator " + t.annotator_id + " session " + t.session_id +
                                  ": rating " + std::to_string(*t.ratings[w]) + " at window " +
                                  std::to_string(w) + " outside [1, " + std::to_string(n_levels) +
                                  "]");
        }
    }
}

namespace detail {

// Pearson over jointly-present windows of two tracks.
inline Flagged track_pearson(const AnnotationTrack& a, const AnnotationTrack& b) {
    std::vector<double> xs, ys;
    const std::size_t n = std::min(a.ratings.size(), b.ratings.size());
    for (std::size_t w = 0; w < n; ++w) {
        if (a.ratings[w] && b.ratings[w]) {
            xs.push_back(static_cast<double>(*a.ratings[w]));
            ys.push_back(static_cast<double>(*b.ratings[w]));
        }
    }
    if (xs.size() < 2) return {0.0, true};
    return stats::pearson(SignalView(xs), SignalView(ys));
}

}  // namespace detail

// Mean correlation of annotator k with every other annotator, clamped to
// [0, 1]: unreliable (negatively correlated) annotators get zero influence.
// Degenerate if no other annotator shares two rated windows with k.
inline Flagged annotator_weight(std::size_t k, const std::vector<AnnotationTrack>& tracks) {
    if (tracks.size() < 2) throw ValidationError("annotator_weight: need >= 2 tracks");
    if (k >= tracks.size()) throw ValidationError("annotator_weight: index out of range");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t j = 0; j < tracks.size(); ++j) {
        if (j == k) continue;
        const Flagged r = detail::track_pearson(tracks[k], tracks[j]);
        if (r.degenerate) continue;
        sum += r.value;
        ++n;
    }
    if (n == 0) return {0.0, true};
    return {std::clamp(sum / static_cast<double>(n), 0.0, 1.0), false};
}

inline std::vector<double> annotator_weights(const std::vector<AnnotationTrack>& tracks) {
    std::vector<double> w(tracks.size());
    for (std::size_t k = 0; k < tracks.size(); ++k) w[k] = annotator_weight(k, tracks).value;
    return w;
}

struct FusedLabel {
    std::string session_id;
    Dimension dimension = Dimension::arousal;
    std::vector<std::optional<double>> values;
    std::map<std::string, double> weights;
    bool all_weights_zero = false;  // loud fallback: unweighted mean was used
};

// Weight-normalized mean of present ratings per window. Windows with missing
// ratings renormalize over the present annotators. Zero-weight annotators
// contribute nothing; if every weight clamps to zero the fusion falls back to
// the unweighted mean and says so.
inline FusedLabel ewe_fuse_weighted(const std::vector<AnnotationTrack>& tracks,
                                    std::vector<double> weights) {
    if (tracks.size() < 2) throw ValidationError("ewe_fuse: need >= 2 tracks");
    if (weights.size() != tracks.size()) {
        throw ValidationError("ewe_fuse: weight count does not match track count");
    }
    for (double w : weights) {
        if (w < 0.0 || !std::isfinite(w)) {
            throw ValidationError("ewe_fuse: weights must be finite and >= 0 (clamp first)");
        }
    }
    std::size_t n_windows = 0;
    for (const auto& t : tracks) n_windows = std::max(n_windows, t.ratings.size());

    FusedLabel fused;
    fused.session_id = tracks.front().session_id;
    fused.dimension = tracks.front().dimension;

    double wsum = 0.0;
    for (double w : weights) wsum += w;
    fused.all_weights_zero = wsum <= 0.0;
    if (fused.all_weights_zero) {
        std::fill(weights.begin(), weights.end(), 1.0);
    }
    for (std::size_t k = 0; k < tracks.size(); ++k) {
        fused.weights[tracks[k].annotator_id] = fused.all_weights_zero ? 0.0 : weights[k];
    }

    fused.values.resize(n_windows);
    for (std::size_t w = 0; w < n_windows; ++w) {
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < tracks.size(); ++k) {
            if (w >= tracks[k].ratings.size() || !tracks[k].ratings[w]) continue;
            num += weights[k] * static_cast<double>(*tracks[k].ratings[w]);
            den += weights[k];
        }
        if (den > 0.0) fused.values[w] = num / den;
    }
    return fused;
}

inline FusedLabel ewe_fuse(const std::vector<AnnotationTrack>& tracks) {
    return ewe_fuse_weighted(tracks, annotator_weights(tracks));
}

// Quadratic weighted kappa on jointly-present windows, proportion-matrix
// form: 1 - sum(w.O) / sum(w.E), w_ij = (i-j)^2 / (n_levels-1)^2, E the outer
// product of the marginals.
inline Flagged quadratic_kappa(const AnnotationTrack& a, const AnnotationTrack& b,
                               int n_levels = 9) {
    if (n_levels < 2) throw ValidationError("quadratic_kappa: need >= 2 levels");
    validate_track(a, n_levels);
    validate_track(b, n_levels);
    const auto L = static_cast<std::size_t>(n_levels);
    std::vector<double> joint(L * L, 0.0);
    std::size_t n = 0;
    const std::size_t n_windows = std::min(a.ratings.size(), b.ratings.size());
    for (std::size_t w = 0; w < n_windows; ++w) {
        if (!a.ratings[w] || !b.ratings[w]) continue;
        joint[static_cast<std::size_t>(*a.ratings[w] - 1) * L +
              static_cast<std::size_t>(*b.ratings[w] - 1)] += 1.0;
        ++n;
    }
    if (n < 2) return {0.0, true};
    for (double& c : joint) c /= static_cast<double>(n);

    std::vector<double> marg_a(L, 0.0), marg_b(L, 0.0);
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
            marg_a[i] += joint[i * L + j];
            marg_b[j] += joint[i * L + j];
        }
    }
    const double denom_w = static_cast<double>((n_levels - 1) * (n_levels - 1));
    double wo = 0.0, we = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        for (std::size_t j = 0; j < L; ++j) {
            const double w_ij =
                static_cast<double>((static_cast<long>(i) - static_cast<long>(j)) *
                                    (static_cast<long>(i) - static_cast<long>(j))) /
                denom_w;
            wo += w_ij * joint[i * L + j];
            we += w_ij * marg_a[i] * marg_b[j];
        }
    }
    if (we <= 0.0) {
        // Both raters stuck on one category: perfect agreement if identical.
        return {wo <= 0.0 ? 1.0 : 0.0, true};
    }
    return {1.0 - wo / we, false};
}

// Mean quadratic kappa over all unordered annotator pairs.
inline double pairwise_kappa_mean(const std::vector<AnnotationTrack>& tracks, int n_levels = 9) {
    if (tracks.size() < 2) throw ValidationError("pairwise_kappa_mean: need >= 2 tracks");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < tracks.size(); ++i) {
        for (std::size_t j = i + 1; j < tracks.size(); ++j) {
            sum += quadratic_kappa(tracks[i], tracks[j], n_levels).value;
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

// Cronbach's alpha with annotators as items, over jointly-present windows;
// sample (n-1) variances.
inline Flagged cronbach_alpha(const std::vector<AnnotationTrack>& tracks) {
    const std::size_t k = tracks.size();
    if (k < 2) throw ValidationError("cronbach_alpha: need >= 2 tracks");
    std::size_t n_windows = 0;
    for (const auto& t : tracks) n_windows = std::max(n_windows, t.ratings.size());

    std::vector<std::size_t> complete;
    for (std::size_t w = 0; w < n_windows; ++w) {
        bool all = true;
        for (const auto& t : tracks) {
            if (w >= t.ratings.size() || !t.ratings[w]) {
                all = false;
                break;
            }
        }
        if (all) complete.push_back(w);
    }
    if (complete.size() < 2) return {0.0, true};

    std::vector<double> totals(complete.size(), 0.0);
    double item_var_sum = 0.0;
    for (const auto& t : tracks) {
        std::vector<double> item(complete.size());
        for (std::size_t i = 0; i < complete.size(); ++i) {
            item[i] = static_cast<double>(*t.ratings[complete[i]]);
            totals[i] += item[i];
        }
        item_var_sum += stats::variance_sample(item);
    }
    const double total_var = stats::variance_sample(totals);
    if (total_var <= 0.0) return {0.0, true};
    const double kk = static_cast<double>(k);
    return {(kk / (kk - 1.0)) * (1.0 - item_var_sum / total_var), false};
}

enum class PccMode { pairwise, vs_mean };

// Mean Pearson as an agreement score: over all unordered pairs, or each
// annotator against the mean of the others.
inline double pairwise_pcc_mean(const std::vector<AnnotationTrack>& tracks,
                                PccMode mode = PccMode::pairwise) {
    if (tracks.size() < 2) throw ValidationError("pairwise_pcc_mean: need >= 2 tracks");
    double sum = 0.0;
    std::size_t n = 0;
    if (mode == PccMode::pairwise) {
        for (std::size_t i = 0; i < tracks.size(); ++i) {
            for (std::size_t j = i + 1; j < tracks.size(); ++j) {
                sum += detail::track_pearson(tracks[i], tracks[j]).value;
                ++n;
            }
        }
    } else {
        std::size_t n_windows = 0;
        for (const auto& t : tracks) n_windows = std::max(n_windows, t.ratings.size());
        for (std::size_t k = 0; k < tracks.size(); ++k) {
            std::vector<double> self, others;
            for (std::size_t w = 0; w < n_windows; ++w) {
                if (w >= tracks[k].ratings.size() || !tracks[k].ratings[w]) continue;
                double o_sum = 0.0;
                std::size_t o_n = 0;
                for (std::size_t j = 0; j < tracks.size(); ++j) {
                    if (j == k || w >= tracks[j].ratings.size() || !tracks[j].ratings[w]) continue;
                    o_sum += static_cast<double>(*tracks[j].ratings[w]);
                    ++o_n;
                }
                if (o_n == 0) continue;
                self.push_back(static_cast<double>(*tracks[k].ratings[w]));
                others.push_back(o_sum / static_cast<double>(o_n));
            }
            if (self.size() >= 2) {
                sum += stats::pearson(SignalView(self), SignalView(others)).value;
            }
            ++n;
        }
    }
    return sum / static_cast<double>(n);
}

struct LoaoEntry {
    std::string annotator_id;
    double kappa_excluded = 0.0;
    double delta = 0.0;  // kappa_excluded - kappa_all
};

// Leave-one-annotator-out: how the mean pairwise kappa moves when each
// annotator is dropped.
inline std::vector<LoaoEntry> loao_analysis(const std::vector<AnnotationTrack>& tracks,
                                            int n_levels = 9) {
    if (tracks.size() < 3) throw ValidationError("loao_analysis: need >= 3 tracks");
    const double kappa_all = pairwise_kappa_mean(tracks, n_levels);
    std::vector<LoaoEntry> out;
    out.reserve(tracks.size());
    for (std::size_t k = 0; k < tracks.size(); ++k) {
        std::vector<AnnotationTrack> rest;
        rest.reserve(tracks.size() - 1);
        for (std::size_t j = 0; j < tracks.size(); ++j) {
            if (j != k) rest.push_back(tracks[j]);
        }
        LoaoEntry e;
        e.annotator_id = tracks[k].annotator_id;
        e.kappa_excluded = pairwise_kappa_mean(rest, n_levels);
        e.delta = e.kappa_excluded - kappa_all;
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV contracts.

// One session's tracks for both dimensions.
struct AnnotationSet {
    std::string session_id;
    std::size_t n_windows = 0;
    std::vector<AnnotationTrack> arousal;
    std::vector<AnnotationTrack> valence;

    const std::vector<AnnotationTrack>& tracks(Dimension d) const {
        return d == Dimension::arousal ? arousal : valence;
    }
};

inline const std::vector<std::string>& annotation_csv_header() {
    static const std::vector<std::string> h = {"session", "window", "annotator", "arousal",
                                               "valence"};
    return h;
}

// Annotation CSV: session,window,annotator,arousal,valence; blank = missing.
inline std::map<std::string, AnnotationSet> read_annotation_csv(
    const std::filesystem::path& path) {
    csvio::Reader reader(path, annotation_csv_header());
    struct Cell {
        std::optional<int> arousal, valence;
    };
    std::map<std::string, std::map<std::string, std::map<long, Cell>>> data;
    std::map<std::string, long> max_window;
    csvio::Row row;
    while (reader.next(row)) {
        const std::string& session = row.fields[0];
        const long window = reader.parse_long(row, 1);
        if (window < 0) reader.fail(row.line_no, "window must be >= 0");
        const std::string& annotator = row.fields[2];
        Cell cell;
        const auto a = reader.parse_opt_long(row, 3);
        const auto v = reader.parse_opt_long(row, 4);
        if (a && (*a < 1 || *a > 9)) reader.fail(row.line_no, "arousal outside [1, 9]");
        if (v && (*v < 1 || *v > 9)) reader.fail(row.line_no, "valence outside [1, 9]");
        if (a) cell.arousal = static_cast<int>(*a);
        if (v) cell.valence = static_cast<int>(*v);
        data[session][annotator][window] = cell;
        max_window[session] = std::max(max_window.count(session) ? max_window[session] : -1L,
                                       window);
    }
    std::map<std::string, AnnotationSet> out;
    for (const auto& [session, annotators] : data) {
        AnnotationSet set;
        set.session_id = session;
        set.n_windows = static_cast<std::size_t>(max_window[session] + 1);
        for (const auto& [annotator, cells] : annotators) {
            AnnotationTrack ta{session, annotator, Dimension::arousal, {}};
            AnnotationTrack tv{session, annotator, Dimension::valence, {}};
            ta.ratings.resize(set.n_windows);
            tv.ratings.resize(set.n_windows);
            for (const auto& [w, cell] : cells) {
                ta.ratings[static_cast<std::size_t>(w)] = cell.arousal;
                tv.ratings[static_cast<std::size_t>(w)] = cell.valence;
            }
            set.arousal.push_back(std::move(ta));
            set.valence.push_back(std::move(tv));
        }
        out[session] = std::move(set);
    }
    return out;
}

inline void write_annotation_csv(const std::vector<AnnotationSet>& sets,
                                 const std::filesystem::path& path) {
    csvio::Writer w(path, annotation_csv_header());
    for (const auto& set : sets) {
        for (std::size_t k = 0; k < set.arousal.size(); ++k) {
            for (std::size_t win = 0; win < set.n_windows; ++win) {
                const auto& a = set.arousal[k].ratings[win];
                const auto& v = set.valence[k].ratings[win];
                w.row({set.session_id, std::to_string(win), set.arousal[k].annotator_id,
                       a ? std::to_string(*a) : "", v ? std::to_string(*v) : ""});
            }
        }
    }
}

inline const std::vector<std::string>& fused_csv_header() {
    static const std::vector<std::string> h = {"session", "window", "arousal_ewe", "valence_ewe"};
    return h;
}

struct FusedPair {
    FusedLabel arousal;
    FusedLabel valence;
};

inline void write_fused_csv(const std::map<std::string, FusedPair>& fused,
                            const std::filesystem::path& path) {
    csvio::Writer w(path, fused_csv_header());
    for (const auto& [session, pair] : fused) {
        const std::size_t n =
            std::max(pair.arousal.values.size(), pair.valence.values.size());
        for (std::size_t win = 0; win < n; ++win) {
            const auto a = win < pair.arousal.values.size() ? pair.arousal.values[win]
                                                            : std::nullopt;
            const auto v = win < pair.valence.values.size() ? pair.valence.values[win]
                                                            : std::nullopt;
            w.row({session, std::to_string(win), csvio::num(a), csvio::num(v)});
        }
    }
}

inline std::map<std::string, FusedPair> read_fused_csv(const std::filesystem::path& path) {
    csvio::Reader reader(path, fused_csv_header());
    std::map<std::string, FusedPair> out;
    csvio::Row row;
    while (reader.next(row)) {
        const std::string& session = row.fields[0];
        const long window = reader.parse_long(row, 1);
        if (window < 0) reader.fail(row.line_no, "window must be >= 0");
        FusedPair& pair = out[session];
        pair.arousal.session_id = session;
        pair.arousal.dimension = Dimension::arousal;
        pair.valence.session_id = session;
        pair.valence.dimension = Dimension::valence;
        const auto idx = static_cast<std::size_t>(window);
        if (pair.arousal.values.size() <= idx) {
            pair.arousal.values.resize(idx + 1);
            pair.valence.values.resize(idx + 1);
        }
        pair.arousal.values[idx] = reader.parse_opt_double(row, 2);
        pair.valence.values[idx] = reader.parse_opt_double(row, 3);
    }
    return out;
}

}  // namespace ga::annotation
