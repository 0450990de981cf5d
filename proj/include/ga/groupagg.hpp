#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "ga/common.hpp"
#include "ga/corpus.hpp"
#include "ga/csv.hpp"
#include "ga/dyadic.hpp"

// Group-size-agnostic pooling of individual and dyadic values into per-window
// group feature vectors, plus assembly of the basic / synchrony / combined
// feature sets.

namespace ga::groupagg {

enum class Aggregator { mean, std_dev, median, min, max, gradient };

inline const std::vector<Aggregator>& all_aggregators() {
    static const std::vector<Aggregator> a = {Aggregator::mean, Aggregator::std_dev,
                                              Aggregator::median, Aggregator::min,
                                              Aggregator::max, Aggregator::gradient};
    return a;
}

inline const char* aggregator_name(Aggregator a) {
    switch (a) {
        case Aggregator::mean: return "mean";
        case Aggregator::std_dev: return "std";
        case Aggregator::median: return "median";
        case Aggregator::min: return "min";
        case Aggregator::max: return "max";
        case Aggregator::gradient: return "gradient";
    }
    return "?";
}

// The named statistic over non-missing values. Standard deviation is the
// population form (the group is the whole population of interest); even-count
// median is the mean of the two middle values; gradient = max - min.
inline std::optional<double> aggregate(std::vector<double> values, Aggregator agg) {
    if (values.empty()) return std::nullopt;
    switch (agg) {
        case Aggregator::mean:
            return stats::mean(values);
        case Aggregator::std_dev:
            return std::sqrt(stats::variance_population(values));
        case Aggregator::median: {
            std::sort(values.begin(), values.end());
            const std::size_t n = values.size();
            return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
        }
        case Aggregator::min:
            return *std::min_element(values.begin(), values.end());
        case Aggregator::max:
            return *std::max_element(values.begin(), values.end());
        case Aggregator::gradient:
            return *std::max_element(values.begin(), values.end()) -
                   *std::min_element(values.begin(), values.end());
    }
    return std::nullopt;
}

inline std::optional<double> aggregate(const std::vector<std::optional<double>>& values,
                                       Aggregator agg) {
    std::vector<double> present;
    present.reserve(values.size());
    for (const auto& v : values) {
        if (v) present.push_back(*v);
    }
    return aggregate(std::move(present), agg);
}

struct GroupFeatureVector {
    std::string session_id;
    long window = 0;
    std::string feature_set;  // basic | synchrony | combined
    std::vector<std::pair<std::string, std::optional<double>>> values;  // stable order

    const std::optional<double>* find(const std::string& name) const {
        for (const auto& [n, v] : values) {
            if (n == name) return &v;
        }
        return nullptr;
    }
};

// Basic set: temporal window mean of each channel per participant, then each
// aggregator across participants. Names: basic.<channel>.<agg>.
inline std::vector<GroupFeatureVector> build_basic(const corpus::Session& session,
                                                   const corpus::WindowGrid& grid) {
    const corpus::SessionWindows windows = corpus::make_windows(session, grid);
    std::vector<GroupFeatureVector> out;
    out.reserve(windows.n_windows);
    for (std::size_t w = 0; w < windows.n_windows; ++w) {
        GroupFeatureVector vec;
        vec.session_id = session.session_id;
        vec.window = static_cast<long>(w);
        vec.feature_set = "basic";
        for (const auto& channel : session.channel_names) {
            std::vector<std::optional<double>> per_participant;
            per_participant.reserve(session.participants.size());
            for (const auto& pid : session.participants) {
                per_participant.push_back(corpus::window_mean(windows.slices.at({pid, channel})[w]));
            }
            for (Aggregator agg : all_aggregators()) {
                vec.values.emplace_back("basic." + channel + "." + aggregator_name(agg),
                                        aggregate(per_participant, agg));
            }
        }
        out.push_back(std::move(vec));
    }
    return out;
}

// Synchrony set: each aggregator across dyads for every (channel, dyad
// feature). Flagged-degenerate and missing dyad values are excluded rather
// than pooled as zeros. Names: sync.<channel>.<feature>.<agg>.
inline std::vector<GroupFeatureVector> build_synchrony(const dyadic::DyadFeatureTable& table) {
    std::set<std::string> channels;
    for (const auto& r : table.rows) channels.insert(r.channel);

    // (window, channel, feature) -> usable dyad values
    std::map<std::tuple<long, std::string, std::string>, std::vector<double>> cells;
    for (const auto& r : table.rows) {
        if (r.window < 0) continue;  // whole-session convergence rows are not per-window features
        if (r.flag != "ok" || !r.value) continue;
        cells[{r.window, r.channel, r.feature}].push_back(*r.value);
    }

    std::vector<GroupFeatureVector> out;
    out.reserve(table.n_windows);
    for (std::size_t w = 0; w < table.n_windows; ++w) {
        GroupFeatureVector vec;
        vec.session_id = table.session_id;
        vec.window = static_cast<long>(w);
        vec.feature_set = "synchrony";
        for (const auto& channel : channels) {
            for (const auto& feature : dyadic::dyad_feature_names()) {
                auto it = cells.find({static_cast<long>(w), channel, feature});
                for (Aggregator agg : all_aggregators()) {
                    std::optional<double> value;
                    if (it != cells.end()) value = aggregate(it->second, agg);
                    vec.values.emplace_back(
                        "sync." + channel + "." + feature + "." + aggregator_name(agg), value);
                }
            }
        }
        out.push_back(std::move(vec));
    }
    return out;
}

// Name-spaced concatenation over identical (session, window) coverage. An
// empty synchrony side degrades to the basic set.
inline std::vector<GroupFeatureVector> build_combined(
    const std::vector<GroupFeatureVector>& basic, const std::vector<GroupFeatureVector>& sync) {
    std::vector<GroupFeatureVector> out;
    if (sync.empty()) {
        out = basic;
        for (auto& v : out) v.feature_set = "combined";
        return out;
    }
    if (basic.empty()) {
        out = sync;
        for (auto& v : out) v.feature_set = "combined";
        return out;
    }
    std::map<std::pair<std::string, long>, const GroupFeatureVector*> sync_by_key;
    for (const auto& v : sync) sync_by_key[{v.session_id, v.window}] = &v;
    if (sync.size() != basic.size()) {
        throw ValidationError("build_combined: window coverage mismatch (basic " +
                              std::to_string(basic.size()) + ", synchrony " +
                              std::to_string(sync.size()) + ")");
    }
    out.reserve(basic.size());
    for (const auto& b : basic) {
        auto it = sync_by_key.find({b.session_id, b.window});
        if (it == sync_by_key.end()) {
            throw ValidationError("build_combined: no synchrony vector for session " +
                                  b.session_id + " window " + std::to_string(b.window));
        }
        GroupFeatureVector vec;
        vec.session_id = b.session_id;
        vec.window = b.window;
        vec.feature_set = "combined";
        vec.values = b.values;
        for (const auto& nv : it->second->values) {
            vec.values.push_back(nv);
        }
        out.push_back(std::move(vec));
    }
    return out;
}

// CSV contract: session,window,feature_set,name,value (long format).
inline const std::vector<std::string>& group_csv_header() {
    static const std::vector<std::string> h = {"session", "window", "feature_set", "name", "value"};
    return h;
}

inline void write_group_csv(const std::vector<GroupFeatureVector>& vectors,
                            const std::filesystem::path& path) {
    csvio::Writer w(path, group_csv_header());
    for (const auto& vec : vectors) {
        for (const auto& [name, value] : vec.values) {
            w.row({vec.session_id, std::to_string(vec.window), vec.feature_set, name,
                   csvio::num(value)});
        }
    }
}

inline std::vector<GroupFeatureVector> read_group_csv(const std::filesystem::path& path) {
    csvio::Reader reader(path, group_csv_header());
    std::vector<GroupFeatureVector> out;
    std::map<std::tuple<std::string, long, std::string>, std::size_t> index;
    csvio::Row row;
    while (reader.next(row)) {
        const std::string& session = row.fields[0];
        const long window = reader.parse_long(row, 1);
        const std::string& set = row.fields[2];
        auto key = std::make_tuple(session, window, set);
        auto it = index.find(key);
        if (it == index.end()) {
            it = index.emplace(key, out.size()).first;
            GroupFeatureVector vec;
            vec.session_id = session;
            vec.window = window;
            vec.feature_set = set;
            out.push_back(std::move(vec));
        }
        out[it->second].values.emplace_back(row.fields[3], reader.parse_opt_double(row, 4));
    }
    return out;
}

// Sidecar schema: the feature-name universe per feature set for a run.
inline nlohmann::json group_schema(const std::vector<GroupFeatureVector>& vectors) {
    std::map<std::string, std::vector<std::string>> names;
    std::map<std::string, std::set<std::string>> seen;
    for (const auto& vec : vectors) {
        for (const auto& [name, value] : vec.values) {
            if (seen[vec.feature_set].insert(name).second) {
                names[vec.feature_set].push_back(name);
            }
        }
    }
    nlohmann::json j;
    j["std_dev_convention"] = "population";
    j["median_convention"] = "even count averages the two middle values";
    for (const auto& [set, list] : names) j["feature_sets"][set] = list;
    return j;
}

}  // namespace ga::groupagg
