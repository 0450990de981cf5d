#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ga/common.hpp"
#include "ga/csv.hpp"

// Canonical data model for group-interaction sessions: per-participant named
// channels on a uniform grid, an explicit validity mask for missing/silent
// stretches, and the fixed window grid everything downstream is aligned to.
//
// Channel CSV contract: header `t,participant,channel,value,valid`, `t` in
// seconds and strictly increasing per (participant, channel), valid in {0,1}.
// Session manifest: JSON with `session_id`, `participants`, `target_rates`
// (channel -> Hz) and `window_len_s`.

namespace ga::corpus {

struct Channel {
    std::string name;
    double sample_rate = 1.0;  // Hz
    std::vector<double> values;
    std::vector<std::uint8_t> valid;  // 0 = missing/silent

    std::size_t size() const { return values.size(); }
    SignalView view() const { return SignalView(values, valid); }
};

struct Session {
    std::string session_id;
    std::vector<std::string> participants;       // ordered, size >= 2
    std::vector<std::string> channel_names;      // identical set for every participant
    std::map<std::pair<std::string, std::string>, Channel> channels;  // (participant, channel)
    double duration_s = 0.0;

    const Channel& channel(const std::string& participant, const std::string& name) const {
        auto it = channels.find({participant, name});
        if (it == channels.end()) {
            throw ValidationError("session " + session_id + ": no channel '" + name +
                                  "' for participant '" + participant + "'");
        }
        return it->second;
    }
};

inline void validate(const Session& s) {
    if (s.participants.size() < 2) {
        throw ValidationError("session " + s.session_id + ": participant count < 2");
    }
    for (const auto& p : s.participants) {
        for (const auto& c : s.channel_names) {
            const Channel& ch = s.channel(p, c);
            if (ch.values.size() != ch.valid.size()) {
                throw ValidationError("session " + s.session_id + ": channel '" + c +
                                      "' of '" + p + "': values/mask length mismatch");
            }
            if (!(ch.sample_rate > 0.0)) {
                throw ValidationError("session " + s.session_id + ": channel '" + c +
                                      "' of '" + p + "': sample_rate must be > 0");
            }
            for (std::size_t i = 0; i < ch.values.size(); ++i) {
                if (ch.valid[i] && !std::isfinite(ch.values[i])) {
                    throw ValidationError("session " + s.session_id + ": channel '" + c +
                                          "' of '" + p + "': non-finite valid sample at index " +
                                          std::to_string(i));
                }
            }
        }
    }
}

struct WindowGrid {
    double window_len_s = 15.0;
    double hop_s = 15.0;
};

// Number of complete windows; trailing partial windows are discarded. With
// hop == length this is floor(duration / hop).
inline std::size_t window_count(double duration_s, const WindowGrid& grid) {
    constexpr double eps = 1e-9;
    if (grid.window_len_s <= 0.0 || grid.hop_s <= 0.0) {
        throw ValidationError("window grid: lengths must be > 0");
    }
    if (duration_s + eps < grid.window_len_s) return 0;
    return static_cast<std::size_t>(
               std::floor((duration_s - grid.window_len_s) / grid.hop_s + eps)) +
           1;
}

struct WindowSlice {
    std::span<const double> values;
    std::span<const std::uint8_t> valid;
    double validity_fraction = 0.0;

    SignalView view() const { return SignalView(values, valid); }
};

inline std::vector<WindowSlice> make_channel_windows(const Channel& ch, const WindowGrid& grid,
                                                     double duration_s) {
    constexpr double eps = 1e-9;
    const std::size_t n_windows = window_count(duration_s, grid);
    std::vector<WindowSlice> out;
    out.reserve(n_windows);
    for (std::size_t w = 0; w < n_windows; ++w) {
        const double t0 = static_cast<double>(w) * grid.hop_s;
        const double t1 = t0 + grid.window_len_s;
        auto lo = static_cast<std::size_t>(std::floor(t0 * ch.sample_rate + eps));
        auto hi = static_cast<std::size_t>(std::floor(t1 * ch.sample_rate + eps));
        lo = std::min(lo, ch.size());
        hi = std::min(hi, ch.size());
        WindowSlice slice;
        slice.values = std::span<const double>(ch.values).subspan(lo, hi - lo);
        slice.valid = std::span<const std::uint8_t>(ch.valid).subspan(lo, hi - lo);
        std::size_t n_valid = 0;
        for (std::size_t i = lo; i < hi; ++i) n_valid += ch.valid[i] ? 1 : 0;
        slice.validity_fraction = hi > lo ? static_cast<double>(n_valid) / static_cast<double>(hi - lo) : 0.0;
        out.push_back(slice);
    }
    return out;
}

// Window slices for every (participant, channel). Slices reference the
// session's buffers; the session must outlive the result.
struct SessionWindows {
    std::size_t n_windows = 0;
    std::map<std::pair<std::string, std::string>, std::vector<WindowSlice>> slices;
};

inline SessionWindows make_windows(const Session& session, const WindowGrid& grid) {
    if (grid.window_len_s > session.duration_s + 1e-9) {
        throw ValidationError("session " + session.session_id + ": window length " +
                              std::to_string(grid.window_len_s) + " s exceeds duration " +
                              std::to_string(session.duration_s) + " s");
    }
    SessionWindows out;
    out.n_windows = window_count(session.duration_s, grid);
    for (const auto& [key, ch] : session.channels) {
        out.slices[key] = make_channel_windows(ch, grid, session.duration_s);
    }
    return out;
}

// Mean over valid samples; all-invalid slices propagate as missing.
inline std::optional<double> window_mean(const WindowSlice& slice) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < slice.values.size(); ++i) {
        if (slice.valid.empty() || slice.valid[i]) {
            sum += slice.values[i];
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

struct SessionManifest {
    std::string session_id;
    std::vector<std::string> participants;
    std::map<std::string, double> target_rates;  // channel -> Hz; absent = native rate
    double window_len_s = 15.0;

    static SessionManifest from_json(const nlohmann::json& j) {
        SessionManifest m;
        try {
            m.session_id = j.at("session_id").get<std::string>();
            m.participants = j.at("participants").get<std::vector<std::string>>();
            if (j.contains("target_rates")) {
                for (auto it = j["target_rates"].begin(); it != j["target_rates"].end(); ++it) {
                    m.target_rates[it.key()] = it.value().get<double>();
                }
            }
            if (j.contains("window_len_s")) m.window_len_s = j["window_len_s"].get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("session manifest: ") + e.what());
        }
        return m;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["session_id"] = session_id;
        j["participants"] = participants;
        j["target_rates"] = target_rates;
        j["window_len_s"] = window_len_s;
        return j;
    }

    static SessionManifest load(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open manifest: " + path.string());
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path.string() + ": " + e.what());
        }
        return from_json(j);
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path);
        if (!out) throw Error("cannot write manifest: " + path.string());
        out << to_json().dump(2) << '\n';
    }
};

namespace detail {

struct RawSeries {
    std::vector<double> t;
    std::vector<double> v;
    std::vector<std::uint8_t> valid;
};

inline double median_dt(const std::vector<double>& t) {
    std::vector<double> d;
    d.reserve(t.size() - 1);
    for (std::size_t i = 1; i < t.size(); ++i) d.push_back(t[i] - t[i - 1]);
    std::sort(d.begin(), d.end());
    const std::size_t n = d.size();
    return n % 2 ? d[n / 2] : 0.5 * (d[n / 2 - 1] + d[n / 2]);
}

// Linear resample of an irregular series onto a uniform grid. Grid points with
// no source support within gap_factor native steps keep an interpolated value
// but are marked invalid, so gaps degrade statistics instead of fabricating
// data.
inline Channel resample(const std::string& name, const RawSeries& raw, double native_dt,
                        double rate, std::size_t n_samples) {
    constexpr double kGapFactor = 1.5;
    constexpr double eps = 1e-9;
    Channel ch;
    ch.name = name;
    ch.sample_rate = rate;
    ch.values.resize(n_samples);
    ch.valid.resize(n_samples);
    const double gap_tol = kGapFactor * native_dt + eps;
    std::size_t hint = 0;
    for (std::size_t i = 0; i < n_samples; ++i) {
        const double ti = static_cast<double>(i) / rate;
        while (hint + 1 < raw.t.size() && raw.t[hint + 1] <= ti) ++hint;
        if (ti <= raw.t.front()) {
            ch.values[i] = raw.v.front();
            ch.valid[i] = (raw.t.front() - ti <= eps) ? raw.valid.front() : 0;
        } else if (ti >= raw.t.back()) {
            ch.values[i] = raw.v.back();
            ch.valid[i] = (ti - raw.t.back() <= native_dt + eps) ? raw.valid.back() : 0;
        } else if (raw.t[hint] == ti) {
            ch.values[i] = raw.v[hint];
            ch.valid[i] = raw.valid[hint];
        } else {
            const double ta = raw.t[hint], tb = raw.t[hint + 1];
            const double frac = (ti - ta) / (tb - ta);
            ch.values[i] = raw.v[hint] + frac * (raw.v[hint + 1] - raw.v[hint]);
            ch.valid[i] = (tb - ta <= gap_tol && raw.valid[hint] && raw.valid[hint + 1]) ? 1 : 0;
        }
    }
    return ch;
}

}  // namespace detail

// Loads a session from a directory of per-participant channel files
// (<participant>.csv). Channels are linearly resampled to the manifest's
// target rate; the session duration is the shortest channel span.
inline Session load_session(const std::filesystem::path& dir, const SessionManifest& manifest) {
    if (manifest.participants.size() < 2) {
        throw ValidationError("session " + manifest.session_id + ": participant count < 2");
    }
    const std::vector<std::string> header = {"t", "participant", "channel", "value", "valid"};
    std::map<std::pair<std::string, std::string>, detail::RawSeries> raw;

    for (const auto& pid : manifest.participants) {
        const auto file = dir / (pid + ".csv");
        if (!std::filesystem::exists(file)) {
            throw ValidationError("session " + manifest.session_id + ": missing participant file " +
                                  file.string());
        }
        csvio::Reader reader(file, header);
        csvio::Row row;
        while (reader.next(row)) {
            if (row.fields[1] != pid) {
                reader.fail(row.line_no, "participant '" + row.fields[1] +
                                             "' does not match file owner '" + pid + "'");
            }
            const double t = reader.parse_double(row, 0);
            const double value = reader.parse_double(row, 3);
            const long valid = reader.parse_long(row, 4);
            if (valid != 0 && valid != 1) reader.fail(row.line_no, "valid must be 0 or 1");
            if (valid == 1 && !std::isfinite(value)) {
                reader.fail(row.line_no, "non-finite value marked valid");
            }
            auto& series = raw[{pid, row.fields[2]}];
            if (!series.t.empty() && t <= series.t.back()) {
                reader.fail(row.line_no, "non-monotonic timestamp for channel '" + row.fields[2] +
                                             "' (" + csvio::num(t) + " after " +
                                             csvio::num(series.t.back()) + ")");
            }
            series.t.push_back(t);
            series.v.push_back(value);
            series.valid.push_back(static_cast<std::uint8_t>(valid));
        }
    }

    // Consistent channel sets across participants.
    std::set<std::string> names;
    for (const auto& [key, series] : raw) names.insert(key.second);
    for (const auto& pid : manifest.participants) {
        for (const auto& name : names) {
            if (!raw.count({pid, name})) {
                throw ValidationError("session " + manifest.session_id + ": participant '" + pid +
                                      "' is missing channel '" + name + "'");
            }
        }
    }
    if (names.empty()) {
        throw ValidationError("session " + manifest.session_id + ": no channel data");
    }

    struct Prepared {
        double native_dt;
        double rate;
        double span;
    };
    std::map<std::pair<std::string, std::string>, Prepared> prep;
    double duration = std::numeric_limits<double>::infinity();
    for (const auto& [key, series] : raw) {
        if (series.t.size() < 2) {
            throw ValidationError("session " + manifest.session_id + ": channel '" + key.second +
                                  "' of '" + key.first + "' has fewer than 2 samples");
        }
        const double dt = detail::median_dt(series.t);
        if (!(dt > 0.0)) {
            throw ValidationError("session " + manifest.session_id + ": channel '" + key.second +
                                  "' of '" + key.first + "' has non-positive sample step");
        }
        Prepared p;
        p.native_dt = dt;
        auto it = manifest.target_rates.find(key.second);
        p.rate = it != manifest.target_rates.end() ? it->second : 1.0 / dt;
        if (!(p.rate > 0.0)) {
            throw ValidationError("session " + manifest.session_id + ": target rate for channel '" +
                                  key.second + "' must be > 0");
        }
        p.span = series.t.back() + dt;
        duration = std::min(duration, p.span);
        prep[key] = p;
    }

    Session session;
    session.session_id = manifest.session_id;
    session.participants = manifest.participants;
    session.channel_names.assign(names.begin(), names.end());
    session.duration_s = duration;
    for (const auto& [key, series] : raw) {
        const Prepared& p = prep.at(key);
        const auto n = static_cast<std::size_t>(std::floor(duration * p.rate + 1e-9));
        session.channels[key] = detail::resample(key.second, series, p.native_dt, p.rate, n);
    }
    validate(session);
    return session;
}

// Writes manifest + per-participant channel CSVs. Numbers round-trip exactly,
// so reloading at the same rates reproduces the session bit for bit.
inline void write_session(const Session& session, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    SessionManifest manifest;
    manifest.session_id = session.session_id;
    manifest.participants = session.participants;
    for (const auto& name : session.channel_names) {
        manifest.target_rates[name] = session.channel(session.participants.front(), name).sample_rate;
    }
    manifest.save(dir / "manifest.json");

    const std::vector<std::string> header = {"t", "participant", "channel", "value", "valid"};
    for (const auto& pid : session.participants) {
        csvio::Writer w(dir / (pid + ".csv"), header);
        for (const auto& name : session.channel_names) {
            const Channel& ch = session.channel(pid, name);
            for (std::size_t i = 0; i < ch.size(); ++i) {
                w.row({csvio::num(static_cast<double>(i) / ch.sample_rate), pid, name,
                       csvio::num(ch.values[i]), ch.valid[i] ? "1" : "0"});
            }
        }
    }
}

}  // namespace ga::corpus
