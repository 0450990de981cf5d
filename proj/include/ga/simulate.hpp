#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ga/annotation.hpp"
#include "ga/common.hpp"
#include "ga/corpus.hpp"

// Synthetic multiparty interaction generator. Participant 0 carries a smooth
// latent process; the others follow it with a configurable lag and coupling
// strength, with reactivity events injecting sign-flipped transients. The
// planted affect trajectory, per-dyad lags and per-window regime labels come
// back as ground truth, which is what the estimator tests measure against.

namespace ga::simulate {

struct SimConfig {
    int n_participants = 3;
    int n_channels = 2;           // coupled channels ("sig<k>")
    int n_null_channels = 0;      // independent channels ("noise<k>")
    double duration_s = 300.0;
    double sample_rate = 5.0;     // Hz
    double coupling = 0.7;        // contagion strength in [0, 1]
    double lag_s = 0.6;           // follower delay
    double reactivity_rate = 1.0; // divergence bursts per minute per follower
    double noise_sd = 0.05;
    std::uint64_t seed = 1;

    // Forward-model shape.
    double follower_ar = 0.15;    // follower state smoothing
    double latent_ar = 0.9;       // leader/idiosyncratic AR(1) pole
    double null_channel_ar = 0.2; // near-white: keeps windowed correlations exchangeable
    double affect_gain = 0.9;     // latent -> affect squashing
    bool couple_by_affect = false;  // modulate coupling with |affect - 5|
    double coupling_base = 0.1;
    double coupling_convex = 0.85;
    double coupling_tilt = 0.15;
    bool deterministic_latent = false;  // sinusoidal leader (guarantees scale coverage)

    std::string session_id = "sim";
    double window_len_s = 15.0;
};

struct SimTruth {
    std::vector<double> arousal, valence;       // per window, 1..9
    std::vector<std::string> regime;            // converging | diverging | neutral
    std::map<std::string, int> dyad_lag_samples;  // "a|b" -> planted lag
    std::vector<double> coupling_per_window;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["arousal"] = arousal;
        j["valence"] = valence;
        j["regime"] = regime;
        j["coupling_per_window"] = coupling_per_window;
        j["dyad_lag_samples"] = dyad_lag_samples;
        return j;
    }
};

namespace detail {

inline std::vector<double> ar1(std::size_t n, double pole, double sd, Rng& rng) {
    std::vector<double> x(n);
    const double innovation = sd * std::sqrt(std::max(1e-12, 1.0 - pole * pole));
    double state = rng.normal(0.0, sd);
    for (int burn = 0; burn < 100; ++burn) state = pole * state + innovation * rng.normal();
    for (std::size_t t = 0; t < n; ++t) {
        state = pole * state + innovation * rng.normal();
        x[t] = state;
    }
    return x;
}

inline double affect_of(double latent, double gain) { return 5.0 + 4.0 * std::tanh(gain * latent); }

}  // namespace detail

inline std::pair<corpus::Session, SimTruth> simulate_session(const SimConfig& cfg) {
    if (cfg.n_participants < 2) throw ValidationError("simulate_session: need >= 2 participants");
    if (cfg.n_channels + cfg.n_null_channels < 1) {
        throw ValidationError("simulate_session: need >= 1 channel");
    }
    if (cfg.coupling < 0.0 || cfg.coupling > 1.0) {
        throw ValidationError("simulate_session: coupling must be in [0, 1]");
    }
    if (cfg.lag_s < 0.0) throw ValidationError("simulate_session: lag_s must be >= 0");
    if (!(cfg.sample_rate > 0.0) || !(cfg.duration_s > 0.0)) {
        throw ValidationError("simulate_session: duration and sample rate must be > 0");
    }
    if (cfg.reactivity_rate < 0.0 || cfg.noise_sd < 0.0) {
        throw ValidationError("simulate_session: rates must be >= 0");
    }
    const auto n = static_cast<std::size_t>(std::floor(cfg.duration_s * cfg.sample_rate + 1e-9));
    const int lag = static_cast<int>(std::llround(cfg.lag_s * cfg.sample_rate));
    const Rng root(cfg.seed);

    std::vector<std::string> pids;
    for (int p = 0; p < cfg.n_participants; ++p) {
        pids.push_back(cfg.session_id + "_p" + std::to_string(p));
    }

    // Leader latent for the coupled channels plus a second latent for the
    // valence trajectory.
    Rng leader_rng = root.fork("leader");
    std::vector<double> leader(n);
    if (cfg.deterministic_latent) {
        const double period = cfg.duration_s / 4.0;
        const double phase = leader_rng.uniform(0.0, 2.0 * kPi);
        std::vector<double> wobble = detail::ar1(n, cfg.latent_ar, 0.12, leader_rng);
        for (std::size_t t = 0; t < n; ++t) {
            const double ts = static_cast<double>(t) / cfg.sample_rate;
            leader[t] = 1.3 * std::sin(2.0 * kPi * ts / period + phase) + wobble[t];
        }
    } else {
        leader = detail::ar1(n, cfg.latent_ar, 1.0, leader_rng);
    }
    Rng valence_rng = root.fork("valence");
    std::vector<double> valence_latent = detail::ar1(n, cfg.latent_ar, 1.0, valence_rng);
    if (cfg.deterministic_latent) {
        const double period = cfg.duration_s / 3.0;
        const double phase = valence_rng.uniform(0.0, 2.0 * kPi);
        for (std::size_t t = 0; t < n; ++t) {
            const double ts = static_cast<double>(t) / cfg.sample_rate;
            valence_latent[t] = 1.3 * std::sin(2.0 * kPi * ts / period + phase) +
                                0.1 * valence_latent[t];
        }
    }

    // Instantaneous coupling profile.
    std::vector<double> coupling(n, cfg.coupling);
    if (cfg.couple_by_affect) {
        for (std::size_t t = 0; t < n; ++t) {
            const double a = detail::affect_of(leader[t], cfg.affect_gain);
            const double centered = (a - 5.0) / 4.0;
            coupling[t] = std::clamp(cfg.coupling_base + cfg.coupling_convex * centered * centered +
                                         cfg.coupling_tilt * centered,
                                     0.0, 1.0);
        }
    }

    // Participant base signals: the leader plus lag-coupled followers. Two
    // latent dimensions flow through the same contagion machinery; even
    // channels carry the arousal base, odd channels the valence base.
    auto build_followers = [&](const std::vector<double>& source, const std::string& tag) {
        std::vector<std::vector<double>> base(static_cast<std::size_t>(cfg.n_participants));
        base[0] = source;
        for (int p = 1; p < cfg.n_participants; ++p) {
            Rng frng = root.fork(tag + "follower" + std::to_string(p));
            std::vector<double> idio = detail::ar1(n, cfg.latent_ar, 1.0, frng);
            std::vector<double>& x = base[static_cast<std::size_t>(p)];
            x.assign(n, 0.0);
            double state = 0.0;
            for (std::size_t t = 0; t < n; ++t) {
                const double lagged =
                    source[static_cast<std::size_t>(std::max<long>(0, static_cast<long>(t) - lag))];
                const double mix = coupling[t] * lagged + (1.0 - coupling[t]) * idio[t];
                state = cfg.follower_ar * state + (1.0 - cfg.follower_ar) * mix;
                x[t] = state;
            }
        }
        return base;
    };
    std::vector<std::vector<double>> base = build_followers(leader, "");
    std::vector<std::vector<double>> valence_base =
        cfg.n_channels > 1 ? build_followers(valence_latent, "valence|")
                           : std::vector<std::vector<double>>{};

    // Reactivity: sign-flipped transients at exponential arrival times,
    // injected into the arousal base of each follower.
    std::vector<std::vector<std::size_t>> events(static_cast<std::size_t>(cfg.n_participants));
    for (int p = 1; p < cfg.n_participants; ++p) {
        std::vector<double>& x = base[static_cast<std::size_t>(p)];
        if (cfg.reactivity_rate > 0.0) {
            Rng erng = root.fork("events" + std::to_string(p));
            const double rate_per_s = cfg.reactivity_rate / 60.0;
            double t_event = 0.0;
            const double tau = 0.6;  // transient decay, seconds
            while (true) {
                double u = erng.uniform();
                while (u <= 0.0) u = erng.uniform();
                t_event += -std::log(u) / rate_per_s;
                if (t_event >= cfg.duration_s) break;
                const auto t0 = static_cast<std::size_t>(t_event * cfg.sample_rate);
                if (t0 >= n) break;
                events[static_cast<std::size_t>(p)].push_back(t0);
                const double amplitude = 1.5;
                const double direction = x[t0] >= 0.0 ? -1.0 : 1.0;
                const auto span = static_cast<std::size_t>(5.0 * tau * cfg.sample_rate);
                for (std::size_t t = t0; t < std::min(n, t0 + span); ++t) {
                    const double dt = static_cast<double>(t - t0) / cfg.sample_rate;
                    x[t] += direction * amplitude * std::exp(-dt / tau);
                }
            }
        }
    }

    // Channels: affine copies of the participant base signal with channel
    // noise; null channels are fresh independent processes.
    corpus::Session session;
    session.session_id = cfg.session_id;
    session.participants = pids;
    session.duration_s = static_cast<double>(n) / cfg.sample_rate;
    for (int k = 0; k < cfg.n_channels; ++k) session.channel_names.push_back("sig" + std::to_string(k));
    for (int k = 0; k < cfg.n_null_channels; ++k) {
        session.channel_names.push_back("noise" + std::to_string(k));
    }
    std::sort(session.channel_names.begin(), session.channel_names.end());

    for (int p = 0; p < cfg.n_participants; ++p) {
        for (int k = 0; k < cfg.n_channels; ++k) {
            const std::string name = "sig" + std::to_string(k);
            Rng crng = root.fork("chan|" + pids[static_cast<std::size_t>(p)] + "|" + name);
            corpus::Channel ch;
            ch.name = name;
            ch.sample_rate = cfg.sample_rate;
            ch.values.resize(n);
            ch.valid.assign(n, 1);
            const auto& src = (k % 2 == 0 ? base : valence_base)[static_cast<std::size_t>(p)];
            const double gain = 1.0 - 0.15 * static_cast<double>(k);
            const double offset = 0.3 * static_cast<double>(k);
            for (std::size_t t = 0; t < n; ++t) {
                ch.values[t] = gain * src[t] + offset + cfg.noise_sd * crng.normal();
            }
            session.channels[{pids[static_cast<std::size_t>(p)], name}] = std::move(ch);
        }
        for (int k = 0; k < cfg.n_null_channels; ++k) {
            const std::string name = "noise" + std::to_string(k);
            Rng crng = root.fork("null|" + pids[static_cast<std::size_t>(p)] + "|" + name);
            corpus::Channel ch;
            ch.name = name;
            ch.sample_rate = cfg.sample_rate;
            ch.valid.assign(n, 1);
            ch.values = detail::ar1(n, cfg.null_channel_ar, 1.0, crng);
            session.channels[{pids[static_cast<std::size_t>(p)], name}] = std::move(ch);
        }
    }

    // Ground truth per window.
    const corpus::WindowGrid grid{cfg.window_len_s, cfg.window_len_s};
    const std::size_t n_windows = corpus::window_count(session.duration_s, grid);
    const auto per_window = static_cast<std::size_t>(
        std::floor(cfg.window_len_s * cfg.sample_rate + 1e-9));
    SimTruth truth;
    for (std::size_t w = 0; w < n_windows; ++w) {
        const std::size_t lo = w * per_window;
        const std::size_t hi = std::min(n, lo + per_window);
        double a_sum = 0.0, v_sum = 0.0, c_sum = 0.0;
        for (std::size_t t = lo; t < hi; ++t) {
            a_sum += detail::affect_of(leader[t], cfg.affect_gain);
            v_sum += detail::affect_of(valence_latent[t], cfg.affect_gain);
            c_sum += coupling[t];
        }
        const auto m = static_cast<double>(hi - lo);
        truth.arousal.push_back(a_sum / m);
        truth.valence.push_back(v_sum / m);
        truth.coupling_per_window.push_back(c_sum / m);
        bool has_event = false;
        for (int p = 1; p < cfg.n_participants; ++p) {
            for (std::size_t t0 : events[static_cast<std::size_t>(p)]) {
                if (t0 >= lo && t0 < hi) {
                    has_event = true;
                    break;
                }
            }
        }
        if (has_event) {
            truth.regime.push_back("diverging");
        } else if (c_sum / m >= 0.5) {
            truth.regime.push_back("converging");
        } else {
            truth.regime.push_back("neutral");
        }
    }
    for (int a = 0; a < cfg.n_participants; ++a) {
        for (int b = a + 1; b < cfg.n_participants; ++b) {
            const int planted = a == 0 ? lag : 0;
            truth.dyad_lag_samples[pids[static_cast<std::size_t>(a)] + "|" +
                                   pids[static_cast<std::size_t>(b)]] = planted;
        }
    }
    return {std::move(session), std::move(truth)};
}

struct AnnotatorConfig {
    int n_annotators = 6;
    double noise_sd = 0.7;
    double bias = 0.3;  // per-annotator constant offsets drawn in [-bias, bias]
    std::uint64_t seed = 1;
};

// Each annotator rates round(clamp(truth + bias_k + noise)) into [1, 9], for
// both dimensions. Returns 2 * n_annotators tracks.
inline std::vector<annotation::AnnotationTrack> simulate_annotators(const SimTruth& truth,
                                                                    const std::string& session_id,
                                                                    const AnnotatorConfig& cfg) {
    if (cfg.n_annotators < 2) throw ValidationError("simulate_annotators: need >= 2 annotators");
    const Rng root(cfg.seed);
    std::vector<annotation::AnnotationTrack> tracks;
    for (int k = 0; k < cfg.n_annotators; ++k) {
        const std::string annotator = "a" + std::to_string(k + 1);
        Rng arng = root.fork(session_id + "|" + annotator);
        const double bias_k = arng.uniform(-cfg.bias, cfg.bias);
        annotation::AnnotationTrack ta{session_id, annotator, annotation::Dimension::arousal, {}};
        annotation::AnnotationTrack tv{session_id, annotator, annotation::Dimension::valence, {}};
        auto rate = [&](double t) {
            const double noisy = t + bias_k + cfg.noise_sd * arng.normal();
            return static_cast<int>(std::llround(std::clamp(noisy, 1.0, 9.0)));
        };
        for (double t : truth.arousal) ta.ratings.push_back(rate(t));
        for (double t : truth.valence) tv.ratings.push_back(rate(t));
        tracks.push_back(std::move(ta));
        tracks.push_back(std::move(tv));
    }
    return tracks;
}

// ---------------------------------------------------------------------------
// On-disk corpora in the channel/annotation CSV contracts.

struct CorpusSpec {
    std::vector<SimConfig> sessions;
    AnnotatorConfig annotators;
    std::string preset;
    std::uint64_t seed = 0;
};

inline CorpusSpec corpus_preset(const std::string& preset, std::uint64_t seed) {
    CorpusSpec spec;
    spec.preset = preset;
    spec.seed = seed;
    const Rng root(seed);
    auto session_cfg = [&](int index) {
        SimConfig cfg;
        cfg.seed = root.fork("session" + std::to_string(index)).next();
        char sid[16];
        std::snprintf(sid, sizeof(sid), "s%02d", index);
        cfg.session_id = sid;
        return cfg;
    };
    if (preset == "smoke") {
        for (int i = 0; i < 3; ++i) {
            SimConfig cfg = session_cfg(i);
            cfg.n_participants = 3;
            cfg.n_channels = 2;
            cfg.duration_s = 300.0;
            cfg.sample_rate = 5.0;
            cfg.coupling = 0.7;
            cfg.lag_s = 0.6;
            cfg.reactivity_rate = 1.0;
            cfg.noise_sd = 0.05;
            spec.sessions.push_back(cfg);
        }
        spec.annotators = {6, 0.7, 0.3, root.fork("annotators").next()};
    } else if (preset == "convdiv") {
        for (int i = 0; i < 4; ++i) {
            SimConfig cfg = session_cfg(i);
            cfg.n_participants = 3;
            cfg.n_channels = 1;
            cfg.n_null_channels = 1;
            cfg.duration_s = 600.0;
            cfg.sample_rate = 8.0;
            cfg.latent_ar = 0.8;
            cfg.lag_s = 0.4;
            cfg.reactivity_rate = 0.0;
            cfg.noise_sd = 0.02;
            cfg.couple_by_affect = true;
            cfg.coupling_base = 0.05;
            cfg.coupling_convex = 0.9;
            cfg.coupling_tilt = 0.2;
            cfg.deterministic_latent = true;
            spec.sessions.push_back(cfg);
        }
        spec.annotators = {6, 0.35, 0.15, root.fork("annotators").next()};
    } else if (preset == "training") {
        for (int i = 0; i < 20; ++i) {
            SimConfig cfg = session_cfg(i);
            cfg.n_participants = 3 + (i % 3);
            cfg.n_channels = 2;
            cfg.duration_s = 450.0;
            cfg.sample_rate = 4.0;
            cfg.coupling = 0.3 + 0.05 * static_cast<double>(i % 8);
            cfg.lag_s = 0.5;
            cfg.reactivity_rate = 0.8;
            cfg.noise_sd = 0.08;
            cfg.couple_by_affect = true;
            cfg.deterministic_latent = true;
            spec.sessions.push_back(cfg);
        }
        spec.annotators = {6, 0.5, 0.25, root.fork("annotators").next()};
    } else {
        throw ValidationError("unknown corpus preset '" + preset +
                              "' (known: smoke, convdiv, training)");
    }
    return spec;
}

// Writes sessions, annotations, and truth sidecars under `out`:
//   out/corpus.json, out/<session>/manifest.json, out/<session>/<pid>.csv,
//   out/<session>/truth.json, out/annotations.csv
inline void make_synthetic_corpus(const std::string& preset, std::uint64_t seed,
                                  const std::filesystem::path& out) {
    const CorpusSpec spec = corpus_preset(preset, seed);
    std::filesystem::create_directories(out);

    std::vector<std::string> session_ids;
    std::vector<annotation::AnnotationSet> annotation_sets;
    for (const auto& cfg : spec.sessions) {
        auto [session, truth] = simulate_session(cfg);
        const auto dir = out / session.session_id;
        corpus::write_session(session, dir);
        {
            std::ofstream tf(dir / "truth.json");
            if (!tf) throw Error("cannot write truth sidecar in " + dir.string());
            tf << truth.to_json().dump(2) << '\n';
        }
        AnnotatorConfig acfg = spec.annotators;
        acfg.seed = Rng(spec.annotators.seed).fork(session.session_id).next();
        const auto tracks = simulate_annotators(truth, session.session_id, acfg);
        annotation::AnnotationSet set;
        set.session_id = session.session_id;
        set.n_windows = truth.arousal.size();
        for (const auto& t : tracks) {
            (t.dimension == annotation::Dimension::arousal ? set.arousal : set.valence).push_back(t);
        }
        annotation_sets.push_back(std::move(set));
        session_ids.push_back(session.session_id);
    }
    annotation::write_annotation_csv(annotation_sets, out / "annotations.csv");

    nlohmann::json manifest;
    manifest["preset"] = spec.preset;
    manifest["seed"] = spec.seed;
    manifest["sessions"] = session_ids;
    manifest["annotations"] = "annotations.csv";
    std::ofstream mf(out / "corpus.json");
    if (!mf) throw Error("cannot write corpus manifest in " + out.string());
    mf << manifest.dump(2) << '\n';
}

}  // namespace ga::simulate
