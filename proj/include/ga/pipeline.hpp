#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ga/analysis.hpp"
#include "ga/annotation.hpp"
#include "ga/common.hpp"
#include "ga/corpus.hpp"
#include "ga/dyadic.hpp"
#include "ga/groupagg.hpp"
#include "ga/model.hpp"
#include "ga/simulate.hpp"

// Config-driven orchestration of the full pipeline. Every command is a pure
// function of (inputs, config, seed): outputs embed the config hash and
// re-runs are byte-identical.

namespace ga::pipeline {

struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path corpus;
    std::filesystem::path out;
    double window_len_s = 15.0;
    double hop_s = 15.0;
    std::vector<std::string> channels;              // empty = all
    std::vector<std::string> exclude_participants;  // dropped before feature extraction
    unsigned threads = 1;

    dyadic::DyadConfig dyadic_cfg;
    std::vector<std::string> feature_sets = {"basic", "synchrony", "combined"};

    enum class Weighting { per_session, global };
    Weighting annotation_weighting = Weighting::per_session;

    struct Analysis {
        std::vector<std::string> features;  // empty = the conv/div defaults
        std::size_t bins_x = 12, bins_y = 12;
        bool negate_symmetric_convergence = true;
        bool per_session = false;
        annotation::PccMode pcc_mode = annotation::PccMode::pairwise;
    } analysis;

    struct Model {
        std::array<std::size_t, 2> hidden = {128, 64};
        std::vector<std::array<std::size_t, 2>> hidden_grid;  // optional sweep
        double learning_rate = 1e-4;
        int patience = 10;
        int max_epochs = 1000;
        std::size_t batch_size = 64;
        double test_fraction = 0.2;
        double val_fraction = 0.1;
    } model;

    // Canonical form used for hashing; the output directory is excluded so
    // identical runs into different directories stay byte-identical.
    nlohmann::json canonical_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["corpus"] = corpus.generic_string();
        j["window_len_s"] = window_len_s;
        j["hop_s"] = hop_s;
        j["channels"] = channels;
        j["exclude_participants"] = exclude_participants;
        j["annotation_weighting"] =
            annotation_weighting == Weighting::per_session ? "per_session" : "global";
        j["dyadic"] = {
            {"max_lag_fraction", dyadic_cfg.max_lag_fraction},
            {"gmm_components", dyadic_cfg.gmm_components},
            {"min_validity", dyadic_cfg.min_validity},
            {"synchrony", dyadic_cfg.synchrony},
            {"convergence", dyadic_cfg.convergence},
            {"scope", dyadic_cfg.scope == dyadic::ConvergenceScope::per_window ? "window" : "session"},
        };
        j["feature_sets"] = feature_sets;
        j["analysis"] = {
            {"features", analysis.features},
            {"bins_x", analysis.bins_x},
            {"bins_y", analysis.bins_y},
            {"negate_symmetric_convergence", analysis.negate_symmetric_convergence},
            {"per_session", analysis.per_session},
            {"pcc_mode", analysis.pcc_mode == annotation::PccMode::pairwise ? "pairwise" : "vs_mean"},
        };
        j["model"] = {
            {"hidden", model.hidden},
            {"hidden_grid", model.hidden_grid},
            {"learning_rate", model.learning_rate},
            {"patience", model.patience},
            {"max_epochs", model.max_epochs},
            {"batch_size", model.batch_size},
            {"test_fraction", model.test_fraction},
            {"val_fraction", model.val_fraction},
        };
        return j;
    }

    std::string config_hash() const {
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(fnv1a64(canonical_json().dump())));
        return buf;
    }
};

struct Overrides {
    std::optional<std::filesystem::path> out;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
};

inline RunConfig load_config(const std::filesystem::path& path, const Overrides& overrides = {}) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }

    RunConfig cfg;
    try {
        if (!j.contains("seed") && !overrides.seed) {
            throw ValidationError(path.string() + ": config requires an explicit 'seed'");
        }
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
        if (j.contains("corpus")) cfg.corpus = j["corpus"].get<std::string>();
        if (j.contains("out")) cfg.out = j["out"].get<std::string>();
        if (j.contains("window_len_s")) cfg.window_len_s = j["window_len_s"].get<double>();
        if (j.contains("hop_s")) cfg.hop_s = j["hop_s"].get<double>();
        else cfg.hop_s = cfg.window_len_s;
        if (j.contains("channels")) cfg.channels = j["channels"].get<std::vector<std::string>>();
        if (j.contains("exclude_participants")) {
            cfg.exclude_participants = j["exclude_participants"].get<std::vector<std::string>>();
        }
        if (j.contains("annotation_weighting")) {
            const auto w = j["annotation_weighting"].get<std::string>();
            if (w == "per_session") cfg.annotation_weighting = RunConfig::Weighting::per_session;
            else if (w == "global") cfg.annotation_weighting = RunConfig::Weighting::global;
            else throw ValidationError("annotation_weighting must be 'per_session' or 'global'");
        }
        if (j.contains("threads")) cfg.threads = j["threads"].get<unsigned>();
        if (j.contains("dyadic")) {
            const auto& d = j["dyadic"];
            if (d.contains("max_lag_fraction")) {
                cfg.dyadic_cfg.max_lag_fraction = d["max_lag_fraction"].get<double>();
            }
            if (d.contains("gmm_components")) {
                cfg.dyadic_cfg.gmm_components = d["gmm_components"].get<int>();
            }
            if (d.contains("min_validity")) {
                cfg.dyadic_cfg.min_validity = d["min_validity"].get<double>();
            }
            if (d.contains("synchrony")) cfg.dyadic_cfg.synchrony = d["synchrony"].get<bool>();
            if (d.contains("convergence")) {
                cfg.dyadic_cfg.convergence = d["convergence"].get<bool>();
            }
            if (d.contains("scope")) {
                const auto s = d["scope"].get<std::string>();
                if (s == "window") cfg.dyadic_cfg.scope = dyadic::ConvergenceScope::per_window;
                else if (s == "session") cfg.dyadic_cfg.scope = dyadic::ConvergenceScope::per_session;
                else throw ValidationError("dyadic.scope must be 'window' or 'session'");
            }
        }
        if (j.contains("feature_sets")) {
            cfg.feature_sets = j["feature_sets"].get<std::vector<std::string>>();
        }
        if (j.contains("analysis")) {
            const auto& a = j["analysis"];
            if (a.contains("features")) {
                cfg.analysis.features = a["features"].get<std::vector<std::string>>();
            }
            if (a.contains("bins_x")) cfg.analysis.bins_x = a["bins_x"].get<std::size_t>();
            if (a.contains("bins_y")) cfg.analysis.bins_y = a["bins_y"].get<std::size_t>();
            if (a.contains("negate_symmetric_convergence")) {
                cfg.analysis.negate_symmetric_convergence =
                    a["negate_symmetric_convergence"].get<bool>();
            }
            if (a.contains("per_session")) cfg.analysis.per_session = a["per_session"].get<bool>();
            if (a.contains("pcc_mode")) {
                const auto m = a["pcc_mode"].get<std::string>();
                if (m == "pairwise") cfg.analysis.pcc_mode = annotation::PccMode::pairwise;
                else if (m == "vs_mean") cfg.analysis.pcc_mode = annotation::PccMode::vs_mean;
                else throw ValidationError("analysis.pcc_mode must be 'pairwise' or 'vs_mean'");
            }
        }
        if (j.contains("model")) {
            const auto& m = j["model"];
            if (m.contains("hidden")) {
                const auto hidden = m["hidden"].get<std::vector<std::size_t>>();
                if (hidden.size() != 2) throw ValidationError("model.hidden must have 2 widths");
                cfg.model.hidden = {hidden[0], hidden[1]};
            }
            if (m.contains("hidden_grid")) {
                for (const auto& entry : m["hidden_grid"]) {
                    const auto widths = entry.get<std::vector<std::size_t>>();
                    if (widths.size() != 2) {
                        throw ValidationError("model.hidden_grid entries must have 2 widths");
                    }
                    cfg.model.hidden_grid.push_back({widths[0], widths[1]});
                }
            }
            if (m.contains("learning_rate")) cfg.model.learning_rate = m["learning_rate"].get<double>();
            if (m.contains("patience")) cfg.model.patience = m["patience"].get<int>();
            if (m.contains("max_epochs")) cfg.model.max_epochs = m["max_epochs"].get<int>();
            if (m.contains("batch_size")) cfg.model.batch_size = m["batch_size"].get<std::size_t>();
            if (m.contains("test_fraction")) cfg.model.test_fraction = m["test_fraction"].get<double>();
            if (m.contains("val_fraction")) cfg.model.val_fraction = m["val_fraction"].get<double>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }

    if (overrides.out) cfg.out = *overrides.out;
    if (overrides.seed) cfg.seed = *overrides.seed;
    if (overrides.threads) cfg.threads = *overrides.threads;
    cfg.dyadic_cfg.seed = cfg.seed;

    for (const auto& set : cfg.feature_sets) {
        if (set != "basic" && set != "synchrony" && set != "combined") {
            throw ValidationError("unknown feature set '" + set + "'");
        }
    }
    if (cfg.out.empty()) throw ValidationError("config requires an output directory ('out' or --out)");
    if (!(cfg.window_len_s > 0.0) || !(cfg.hop_s > 0.0)) {
        throw ValidationError("window_len_s and hop_s must be > 0");
    }
    if (!(cfg.dyadic_cfg.max_lag_fraction > 0.0) || cfg.dyadic_cfg.max_lag_fraction > 1.0) {
        throw ValidationError("dyadic.max_lag_fraction must be in (0, 1]");
    }
    if (cfg.dyadic_cfg.min_validity < 0.0 || cfg.dyadic_cfg.min_validity > 1.0) {
        throw ValidationError("dyadic.min_validity must be in [0, 1]");
    }
    if (cfg.dyadic_cfg.gmm_components < 1) {
        throw ValidationError("dyadic.gmm_components must be >= 1");
    }
    if (!(cfg.model.test_fraction > 0.0) || cfg.model.test_fraction >= 1.0 ||
        cfg.model.val_fraction < 0.0 || cfg.model.val_fraction >= 1.0) {
        throw ValidationError("model fractions must satisfy 0 < test < 1 and 0 <= val < 1");
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Helpers.

namespace detail {

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
    return j;
}

inline void write_meta(const RunConfig& cfg, const std::string& command) {
    nlohmann::json j;
    j["command"] = command;
    j["config_hash"] = cfg.config_hash();
    j["seed"] = cfg.seed;
    write_json(j, cfg.out / ("run_meta_" + command + ".json"));
}

inline std::string format_table(const std::vector<std::string>& headers,
                                const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> widths(headers.size());
    for (std::size_t c = 0; c < headers.size(); ++c) widths[c] = headers[c].size();
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            widths[c] = std::max(widths[c], row[c].size());
        }
    }
    auto emit = [&](const std::vector<std::string>& row) {
        std::string line;
        for (std::size_t c = 0; c < row.size(); ++c) {
            line += row[c];
            if (c + 1 < row.size()) line.append(widths[c] - row[c].size() + 2, ' ');
        }
        line += '\n';
        return line;
    };
    std::string out = emit(headers);
    std::size_t total = 0;
    for (std::size_t c = 0; c < widths.size(); ++c) total += widths[c] + (c + 1 < widths.size() ? 2 : 0);
    out.append(total, '-');
    out += '\n';
    for (const auto& row : rows) out += emit(row);
    return out;
}

inline std::string fmt(double v, int digits = 3) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%+.*f", digits, v);
    return buf;
}

inline std::string fmt_unsigned(double v, int digits = 1) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

struct Corpus {
    std::vector<std::string> session_ids;
    std::filesystem::path root;
    std::string annotations_file;
};

inline Corpus open_corpus(const std::filesystem::path& root) {
    const auto manifest = read_json(root / "corpus.json");
    Corpus c;
    c.root = root;
    try {
        c.session_ids = manifest.at("sessions").get<std::vector<std::string>>();
        c.annotations_file = manifest.value("annotations", "annotations.csv");
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError((root / "corpus.json").string() + ": " + e.what());
    }
    if (c.session_ids.empty()) throw ValidationError("corpus has no sessions");
    return c;
}

inline corpus::Session load_session_checked(const Corpus& c, const std::string& sid,
                                            const std::vector<std::string>& channel_filter,
                                            const std::vector<std::string>& exclude = {}) {
    const auto dir = c.root / sid;
    auto manifest = corpus::SessionManifest::load(dir / "manifest.json");
    corpus::Session session = corpus::load_session(dir, manifest);
    if (!exclude.empty()) {
        std::vector<std::string> kept_participants;
        for (const auto& pid : session.participants) {
            if (std::find(exclude.begin(), exclude.end(), pid) == exclude.end()) {
                kept_participants.push_back(pid);
            }
        }
        if (kept_participants.size() < 2) {
            throw ValidationError("session " + sid +
                                  ": exclusions leave fewer than 2 participants");
        }
        if (kept_participants.size() != session.participants.size()) {
            std::map<std::pair<std::string, std::string>, corpus::Channel> kept;
            for (auto& [key, ch] : session.channels) {
                if (std::find(kept_participants.begin(), kept_participants.end(), key.first) !=
                    kept_participants.end()) {
                    kept[key] = std::move(ch);
                }
            }
            session.channels = std::move(kept);
            session.participants = kept_participants;
        }
    }
    if (!channel_filter.empty()) {
        for (const auto& name : channel_filter) {
            if (std::find(session.channel_names.begin(), session.channel_names.end(), name) ==
                session.channel_names.end()) {
                throw ValidationError("session " + sid + ": configured channel '" + name +
                                      "' does not exist");
            }
        }
        std::map<std::pair<std::string, std::string>, corpus::Channel> kept;
        for (auto& [key, ch] : session.channels) {
            if (std::find(channel_filter.begin(), channel_filter.end(), key.second) !=
                channel_filter.end()) {
                kept[key] = std::move(ch);
            }
        }
        session.channels = std::move(kept);
        session.channel_names = channel_filter;
        std::sort(session.channel_names.begin(), session.channel_names.end());
    }
    return session;
}

// Concatenated per-annotator tracks across sessions (sorted by session id),
// used for the corpus-level agreement report.
inline std::vector<annotation::AnnotationTrack> pooled_tracks(
    const std::map<std::string, annotation::AnnotationSet>& sets, annotation::Dimension dim) {
    std::set<std::string> annotators;
    std::size_t total_windows = 0;
    for (const auto& [sid, set] : sets) {
        total_windows += set.n_windows;
        for (const auto& t : set.tracks(dim)) annotators.insert(t.annotator_id);
    }
    std::vector<annotation::AnnotationTrack> pooled;
    for (const auto& a : annotators) {
        annotation::AnnotationTrack t{"(pooled)", a, dim, {}};
        t.ratings.reserve(total_windows);
        for (const auto& [sid, set] : sets) {
            const annotation::AnnotationTrack* found = nullptr;
            for (const auto& cand : set.tracks(dim)) {
                if (cand.annotator_id == a) {
                    found = &cand;
                    break;
                }
            }
            for (std::size_t w = 0; w < set.n_windows; ++w) {
                t.ratings.push_back(found && w < found->ratings.size() ? found->ratings[w]
                                                                       : std::nullopt);
            }
        }
        pooled.push_back(std::move(t));
    }
    return pooled;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Commands.

inline void run_simulate(const std::string& preset, std::uint64_t seed,
                         const std::filesystem::path& out) {
    simulate::make_synthetic_corpus(preset, seed, out);
}

inline void run_features(const RunConfig& cfg) {
    const detail::Corpus corpus_info = detail::open_corpus(cfg.corpus);
    std::filesystem::create_directories(cfg.out);
    const corpus::WindowGrid grid{cfg.window_len_s, cfg.hop_s};

    const std::size_t n = corpus_info.session_ids.size();
    std::vector<dyadic::DyadFeatureTable> tables(n);
    std::vector<std::vector<groupagg::GroupFeatureVector>> basic(n), sync(n), combined(n);
    const bool want_basic =
        std::find(cfg.feature_sets.begin(), cfg.feature_sets.end(), "basic") != cfg.feature_sets.end();
    const bool want_sync = std::find(cfg.feature_sets.begin(), cfg.feature_sets.end(),
                                     "synchrony") != cfg.feature_sets.end();
    const bool want_combined = std::find(cfg.feature_sets.begin(), cfg.feature_sets.end(),
                                         "combined") != cfg.feature_sets.end();

    std::vector<std::exception_ptr> errors(n);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
        try {
            const corpus::Session session = detail::load_session_checked(
                corpus_info, corpus_info.session_ids[i], cfg.channels, cfg.exclude_participants);
            tables[i] = dyadic::dyad_features(session, grid, cfg.dyadic_cfg);
            if (want_basic || want_combined) basic[i] = groupagg::build_basic(session, grid);
            if (want_sync || want_combined) sync[i] = groupagg::build_synchrony(tables[i]);
            if (want_combined) combined[i] = groupagg::build_combined(basic[i], sync[i]);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    });
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    {
        csvio::Writer w(cfg.out / "dyad_features.csv", dyadic::dyad_csv_header());
        for (const auto& t : tables) dyadic::append_dyad_csv(w, t);
    }
    std::vector<groupagg::GroupFeatureVector> all;
    for (std::size_t i = 0; i < n; ++i) {
        if (want_basic) all.insert(all.end(), basic[i].begin(), basic[i].end());
        if (want_sync) all.insert(all.end(), sync[i].begin(), sync[i].end());
        if (want_combined) all.insert(all.end(), combined[i].begin(), combined[i].end());
    }
    groupagg::write_group_csv(all, cfg.out / "group_features.csv");
    nlohmann::json schema = groupagg::group_schema(all);
    schema["config_hash"] = cfg.config_hash();
    schema["window_len_s"] = cfg.window_len_s;
    schema["hop_s"] = cfg.hop_s;
    // Label joins index windows on the annotation grid; exploratory grids
    // produce features that must not be joined against the labels.
    bool label_aligned = cfg.hop_s == cfg.window_len_s;
    for (const auto& sid : corpus_info.session_ids) {
        const auto manifest = corpus::SessionManifest::load(cfg.corpus / sid / "manifest.json");
        if (std::fabs(manifest.window_len_s - cfg.window_len_s) > 1e-9) label_aligned = false;
    }
    schema["label_aligned"] = label_aligned;
    detail::write_json(schema, cfg.out / "group_features.schema.json");
    detail::write_meta(cfg, "features");
}

inline nlohmann::json run_agreement(const RunConfig& cfg) {
    const detail::Corpus corpus_info = detail::open_corpus(cfg.corpus);
    std::filesystem::create_directories(cfg.out);
    const auto sets =
        annotation::read_annotation_csv(cfg.corpus / corpus_info.annotations_file);
    if (sets.empty()) throw ValidationError("no annotations found");

    nlohmann::json report;
    report["config_hash"] = cfg.config_hash();
    std::vector<std::vector<std::string>> metric_rows;
    std::map<std::string, std::vector<annotation::LoaoEntry>> loao_by_dim;

    for (const auto dim : {annotation::Dimension::arousal, annotation::Dimension::valence}) {
        const auto pooled = detail::pooled_tracks(sets, dim);
        const std::string dname = annotation::dimension_name(dim);
        if (pooled.size() < 2) {
            throw ValidationError("agreement: need >= 2 annotators for " + dname);
        }
        nlohmann::json d;
        d["quadratic_kappa"] = annotation::pairwise_kappa_mean(pooled);
        const Flagged alpha = annotation::cronbach_alpha(pooled);
        d["cronbach_alpha"] = alpha.value;
        d["cronbach_alpha_degenerate"] = alpha.degenerate;
        d["pcc"] = annotation::pairwise_pcc_mean(pooled, cfg.analysis.pcc_mode);
        d["n_annotators"] = pooled.size();
        if (pooled.size() >= 3) {
            nlohmann::json lj = nlohmann::json::array();
            const auto loao = annotation::loao_analysis(pooled);
            for (const auto& e : loao) {
                lj.push_back({{"annotator", e.annotator_id},
                              {"kappa_excluded", e.kappa_excluded},
                              {"delta", e.delta}});
            }
            d["loao"] = lj;
            loao_by_dim[dname] = loao;
        }
        report[dname] = d;
    }

    // Per-session breakdown.
    nlohmann::json per_session = nlohmann::json::array();
    for (const auto& [sid, set] : sets) {
        nlohmann::json s;
        s["session"] = sid;
        for (const auto dim : {annotation::Dimension::arousal, annotation::Dimension::valence}) {
            const auto& tracks = set.tracks(dim);
            if (tracks.size() < 2) continue;
            nlohmann::json d;
            d["quadratic_kappa"] = annotation::pairwise_kappa_mean(tracks);
            d["cronbach_alpha"] = annotation::cronbach_alpha(tracks).value;
            d["pcc"] = annotation::pairwise_pcc_mean(tracks, cfg.analysis.pcc_mode);
            s[annotation::dimension_name(dim)] = d;
        }
        per_session.push_back(std::move(s));
    }
    report["per_session"] = per_session;
    detail::write_json(report, cfg.out / "agreement_report.json");

    // Text rendering.
    std::string text;
    metric_rows = {
        {"Quadratic kappa", detail::fmt(report["arousal"]["quadratic_kappa"].get<double>()),
         detail::fmt(report["valence"]["quadratic_kappa"].get<double>())},
        {"Cronbach's alpha", detail::fmt(report["arousal"]["cronbach_alpha"].get<double>()),
         detail::fmt(report["valence"]["cronbach_alpha"].get<double>())},
        {"Pearson (PCC)", detail::fmt(report["arousal"]["pcc"].get<double>()),
         detail::fmt(report["valence"]["pcc"].get<double>())},
    };
    text += detail::format_table({"Metric", "Arousal", "Valence"}, metric_rows);
    if (!loao_by_dim.empty()) {
        text += "\nLeave-one-annotator-out (kappa when excluded, delta vs all)\n";
        std::vector<std::vector<std::string>> rows;
        const auto& arousal = loao_by_dim["arousal"];
        const auto& valence = loao_by_dim["valence"];
        for (std::size_t i = 0; i < arousal.size(); ++i) {
            rows.push_back({arousal[i].annotator_id, detail::fmt(arousal[i].kappa_excluded),
                            detail::fmt(arousal[i].delta),
                            i < valence.size() ? detail::fmt(valence[i].kappa_excluded) : "",
                            i < valence.size() ? detail::fmt(valence[i].delta) : ""});
        }
        text += detail::format_table(
            {"Excluded", "Kappa (A)", "Delta (A)", "Kappa (V)", "Delta (V)"}, rows);
    }
    std::ofstream tf(cfg.out / "agreement_report.txt");
    tf << text;
    detail::write_meta(cfg, "agreement");
    return report;
}

inline void run_fuse(const RunConfig& cfg) {
    const detail::Corpus corpus_info = detail::open_corpus(cfg.corpus);
    std::filesystem::create_directories(cfg.out);
    const auto sets =
        annotation::read_annotation_csv(cfg.corpus / corpus_info.annotations_file);
    if (sets.empty()) throw ValidationError("no annotations found");

    // Corpus-global weighting computes annotator reliabilities once from the
    // pooled tracks; the default recomputes them per session.
    std::map<std::string, double> global_weights[2];
    if (cfg.annotation_weighting == RunConfig::Weighting::global) {
        for (const auto dim : {annotation::Dimension::arousal, annotation::Dimension::valence}) {
            const auto pooled = detail::pooled_tracks(sets, dim);
            const auto weights = annotation::annotator_weights(pooled);
            for (std::size_t k = 0; k < pooled.size(); ++k) {
                global_weights[static_cast<int>(dim)][pooled[k].annotator_id] = weights[k];
            }
        }
    }
    auto fuse_tracks = [&](const std::vector<annotation::AnnotationTrack>& tracks,
                           annotation::Dimension dim) {
        if (cfg.annotation_weighting == RunConfig::Weighting::per_session) {
            return annotation::ewe_fuse(tracks);
        }
        std::vector<double> weights;
        weights.reserve(tracks.size());
        for (const auto& t : tracks) {
            weights.push_back(global_weights[static_cast<int>(dim)].at(t.annotator_id));
        }
        return annotation::ewe_fuse_weighted(tracks, weights);
    };

    std::map<std::string, annotation::FusedPair> fused;
    nlohmann::json weights_meta;
    for (const auto& [sid, set] : sets) {
        if (set.arousal.size() < 2 || set.valence.size() < 2) {
            throw ValidationError("session " + sid + ": need >= 2 annotators to fuse");
        }
        annotation::FusedPair pair;
        pair.arousal = fuse_tracks(set.arousal, annotation::Dimension::arousal);
        pair.valence = fuse_tracks(set.valence, annotation::Dimension::valence);
        weights_meta[sid] = {
            {"arousal", pair.arousal.weights},
            {"valence", pair.valence.weights},
            {"arousal_all_weights_zero", pair.arousal.all_weights_zero},
            {"valence_all_weights_zero", pair.valence.all_weights_zero},
        };
        fused[sid] = std::move(pair);
    }
    annotation::write_fused_csv(fused, cfg.out / "labels.csv");
    nlohmann::json meta;
    meta["command"] = "fuse";
    meta["config_hash"] = cfg.config_hash();
    meta["seed"] = cfg.seed;
    meta["weighting"] =
        cfg.annotation_weighting == RunConfig::Weighting::per_session ? "per_session" : "global";
    meta["annotator_weights"] = weights_meta;
    detail::write_json(meta, cfg.out / "run_meta_fuse.json");
}

// Default selection: mean-aggregated dyadic features plus the deviation of
// the individual features, the combination the conv/div analysis is about.
inline std::vector<std::string> default_analysis_selection(
    const std::vector<groupagg::GroupFeatureVector>& features) {
    std::set<std::string> names;
    for (const auto& vec : features) {
        for (const auto& [name, value] : vec.values) {
            const bool sync_mean =
                name.rfind("sync.", 0) == 0 &&
                name.size() >= 5 && name.compare(name.size() - 5, 5, ".mean") == 0 &&
                name.find(".best_lag.") == std::string::npos;
            const bool basic_std =
                name.rfind("basic.", 0) == 0 &&
                name.size() >= 4 && name.compare(name.size() - 4, 4, ".std") == 0;
            if (sync_mean || basic_std) names.insert(name);
        }
    }
    return {names.begin(), names.end()};
}

namespace detail {

// Refuses label joins against features extracted on a non-annotation grid.
inline void require_label_aligned(const RunConfig& cfg, const char* command) {
    const auto schema_path = cfg.out / "group_features.schema.json";
    if (!std::filesystem::exists(schema_path)) return;  // features absence is reported later
    const auto schema = read_json(schema_path);
    if (schema.contains("label_aligned") && !schema["label_aligned"].get<bool>()) {
        throw ValidationError(std::string(command) +
                              ": features were extracted on a window grid that does not match "
                              "the annotation grid; re-run 'features' with the annotation "
                              "window length and hop = length");
    }
}

}  // namespace detail

inline nlohmann::json run_analyze(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.out);
    detail::require_label_aligned(cfg, "analyze");
    const auto features = groupagg::read_group_csv(cfg.out / "group_features.csv");
    if (features.empty()) {
        throw ValidationError("analyze: no group features found (run 'features' first)");
    }
    const auto labels = annotation::read_fused_csv(cfg.out / "labels.csv");
    if (labels.empty()) throw ValidationError("analyze: no fused labels found (run 'fuse' first)");

    std::vector<std::string> selection = cfg.analysis.features.empty()
                                             ? default_analysis_selection(features)
                                             : cfg.analysis.features;
    analysis::ConvDivOptions options;
    options.negate_symmetric_convergence = cfg.analysis.negate_symmetric_convergence;
    options.bins_x = cfg.analysis.bins_x;
    options.bins_y = cfg.analysis.bins_y;
    options.per_session = cfg.analysis.per_session;
    const auto cells = analysis::run_convdiv_report(features, labels, selection, options);

    nlohmann::json report;
    report["config_hash"] = cfg.config_hash();
    report["sign_convention"] =
        options.negate_symmetric_convergence
            ? "conv_symmetric negated: larger = convergence"
            : "raw: larger conv_symmetric = divergence";
    report["cells"] = analysis::convdiv_to_json(cells);
    detail::write_json(report, cfg.out / "convdiv_report.json");

    // Histogram sidecars for external plotting.
    const auto hist_dir = cfg.out / "hist";
    std::filesystem::create_directories(hist_dir);
    for (const auto& cell : cells) {
        if (cell.n < 3) continue;
        std::string fname = cell.feature + "__" + cell.dimension;
        if (cell.session != "(pooled)") fname += "__" + cell.session;
        fname += ".csv";
        std::ofstream hf(hist_dir / fname);
        hf << "# x: affect [" << csvio::num(cell.hist.x_min) << ", " << csvio::num(cell.hist.x_max)
           << "] in " << cell.hist.bins_x << " bins; y: feature [" << csvio::num(cell.hist.y_min)
           << ", " << csvio::num(cell.hist.y_max) << "] in " << cell.hist.bins_y << " bins\n";
        for (std::size_t iy = 0; iy < cell.hist.bins_y; ++iy) {
            for (std::size_t ix = 0; ix < cell.hist.bins_x; ++ix) {
                if (ix) hf << ',';
                hf << cell.hist.at(ix, iy);
            }
            hf << '\n';
        }
    }

    std::vector<std::vector<std::string>> rows;
    for (const auto& cell : cells) {
        std::string tau = "n/a";
        if (cell.n >= 3 && !cell.tau.degenerate) {
            tau = detail::fmt(cell.tau.tau) + (cell.tau.significant ? "*" : " ");
        }
        std::vector<std::string> row = {
            cell.feature, cell.dimension,
            cell.fit_ok ? detail::fmt(cell.fit.alpha) : "n/a",
            cell.fit_ok ? detail::fmt(cell.fit.beta) : "n/a",
            cell.fit_ok ? detail::fmt(cell.fit.c) : "n/a",
            cell.fit_ok ? detail::fmt_unsigned(100.0 * cell.fit.r_squared) + "%" : "n/a",
            tau, cell.orientation};
        if (options.per_session) row.insert(row.begin(), cell.session);
        rows.push_back(std::move(row));
    }
    std::vector<std::string> headers = {"Feature", "Dim",  "alpha",       "beta",
                                        "c",       "R2",   "tau",         "Orientation"};
    if (options.per_session) headers.insert(headers.begin(), "Session");
    std::ofstream tf(cfg.out / "convdiv_report.txt");
    tf << detail::format_table(headers, rows);
    detail::write_meta(cfg, "analyze");
    return report;
}

namespace detail {

struct LabeledData {
    std::vector<groupagg::GroupFeatureVector> all;
    std::map<std::string, std::vector<std::size_t>> by_set;  // indices into all
    std::map<std::string, annotation::FusedPair> labels;
};

inline LabeledData load_labeled(const RunConfig& cfg) {
    LabeledData data;
    data.all = groupagg::read_group_csv(cfg.out / "group_features.csv");
    if (data.all.empty()) {
        throw ValidationError("model: no group features found (run 'features' first)");
    }
    for (std::size_t i = 0; i < data.all.size(); ++i) {
        data.by_set[data.all[i].feature_set].push_back(i);
    }
    data.labels = annotation::read_fused_csv(cfg.out / "labels.csv");
    if (data.labels.empty()) throw ValidationError("model: no fused labels (run 'fuse' first)");
    return data;
}

inline model::Dataset build_dataset(const LabeledData& data, const std::vector<std::size_t>& vecs,
                                    const std::set<std::string>& sessions,
                                    annotation::Dimension dim) {
    model::Dataset ds;
    bool first = true;
    for (std::size_t idx : vecs) {
        const groupagg::GroupFeatureVector& vec = data.all[idx];
        if (!sessions.count(vec.session_id)) continue;
        auto lit = data.labels.find(vec.session_id);
        if (lit == data.labels.end() || vec.window < 0) continue;
        const auto& fused = dim == annotation::Dimension::arousal ? lit->second.arousal
                                                                  : lit->second.valence;
        const auto w = static_cast<std::size_t>(vec.window);
        if (w >= fused.values.size() || !fused.values[w]) continue;
        if (first) {
            for (const auto& [name, value] : vec.values) ds.feature_names.push_back(name);
            first = false;
        }
        std::vector<std::optional<double>> row;
        row.reserve(ds.feature_names.size());
        for (const auto& [name, value] : vec.values) row.push_back(value);
        if (row.size() != ds.feature_names.size()) {
            throw ValidationError("model: inconsistent feature vector for session " +
                                  vec.session_id);
        }
        ds.rows.push_back(std::move(row));
        ds.labels.push_back(*fused.values[w]);
        ds.session_of.push_back(vec.session_id);
    }
    return ds;
}

}  // namespace detail

inline nlohmann::json run_train(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.out / "models");
    detail::require_label_aligned(cfg, "train");
    const detail::Corpus corpus_info = detail::open_corpus(cfg.corpus);
    const detail::LabeledData data = detail::load_labeled(cfg);

    // Rosters for the speaker-disjoint split come from the session manifests.
    std::vector<model::SessionRoster> rosters;
    for (const auto& sid : corpus_info.session_ids) {
        const auto manifest = corpus::SessionManifest::load(cfg.corpus / sid / "manifest.json");
        rosters.push_back({sid, manifest.participants});
    }
    const model::SplitPlan plan =
        model::make_split(rosters, cfg.model.test_fraction, cfg.model.val_fraction, cfg.seed);
    if (!model::split_rosters_disjoint(plan)) {
        throw Error("train: emitted split violates roster disjointness");
    }

    nlohmann::json split_json;
    split_json["train"] = plan.train;
    split_json["val"] = plan.val;
    split_json["test"] = plan.test;
    split_json["hash"] = plan.hash();
    split_json["val_carved_at_session_level"] = plan.val_carved_at_session_level;
    split_json["config_hash"] = cfg.config_hash();
    detail::write_json(split_json, cfg.out / "split.json");

    const std::set<std::string> train_sessions(plan.train.begin(), plan.train.end());
    const std::set<std::string> val_sessions(plan.val.begin(), plan.val.end());

    nlohmann::json report;
    report["config_hash"] = cfg.config_hash();
    report["split_hash"] = plan.hash();
    nlohmann::json runs = nlohmann::json::array();

    for (const auto& set_name : cfg.feature_sets) {
        auto it = data.by_set.find(set_name);
        if (it == data.by_set.end()) {
            throw ValidationError("train: feature set '" + set_name +
                                  "' not present in group_features.csv");
        }
        for (const auto dim : {annotation::Dimension::arousal, annotation::Dimension::valence}) {
            const model::Dataset train_set =
                detail::build_dataset(data, it->second, train_sessions, dim);
            const model::Dataset val_set =
                detail::build_dataset(data, it->second, val_sessions, dim);
            if (train_set.size() < 2) {
                throw ValidationError("train: not enough labeled training windows for set '" +
                                      set_name + "'");
            }
            // Architecture selection: sweep the configured width grid on the
            // validation loss (a single entry when no grid is given).
            std::vector<std::array<std::size_t, 2>> grid = cfg.model.hidden_grid;
            if (grid.empty()) grid.push_back(cfg.model.hidden);

            std::optional<model::TrainedModel> best_model;
            model::TrainHistory best_history;
            double best_val = std::numeric_limits<double>::infinity();
            nlohmann::json sweep = nlohmann::json::array();
            for (const auto& hidden : grid) {
                model::MlpSpec spec;
                spec.hidden = hidden;
                model::TrainConfig tc;
                tc.learning_rate = cfg.model.learning_rate;
                tc.patience = cfg.model.patience;
                tc.max_epochs = cfg.model.max_epochs;
                tc.batch_size = cfg.model.batch_size;
                tc.seed = Rng(cfg.seed)
                              .fork(set_name + "|" + annotation::dimension_name(dim) + "|" +
                                    std::to_string(hidden[0]) + "x" + std::to_string(hidden[1]))
                              .next();
                auto [trained, history] = model::train(spec, tc, train_set, val_set);
                const double val =
                    history.best_epoch >= 0
                        ? history.val_loss[static_cast<std::size_t>(history.best_epoch)]
                        : 1.0;
                sweep.push_back({{"hidden", hidden}, {"best_val_loss", val}});
                if (val < best_val) {
                    best_val = val;
                    best_model = std::move(trained);
                    best_history = std::move(history);
                }
            }

            model::TrainedModel trained = std::move(*best_model);
            const model::TrainHistory& history = best_history;
            trained.dimension = annotation::dimension_name(dim);
            trained.feature_set = set_name;
            trained.split_hash = plan.hash();
            trained.save(cfg.out / "models" /
                         (set_name + "_" + annotation::dimension_name(dim) + ".json"));

            nlohmann::json r;
            r["feature_set"] = set_name;
            r["dimension"] = annotation::dimension_name(dim);
            r["hidden"] = trained.spec.hidden;
            r["sweep"] = sweep;
            r["parameter_count"] = trained.parameter_count();
            r["epochs_run"] = history.stop_epoch + 1;
            r["best_epoch"] = history.best_epoch;
            r["early_stopped"] = history.early_stopped;
            r["val_degenerate_seen"] = history.val_degenerate_seen;
            r["final_train_loss"] = history.train_loss.empty() ? 1.0 : history.train_loss.back();
            r["best_val_loss"] =
                history.best_epoch >= 0
                    ? history.val_loss[static_cast<std::size_t>(history.best_epoch)]
                    : 1.0;
            r["n_train"] = train_set.size();
            r["n_val"] = val_set.size();
            runs.push_back(std::move(r));
        }
    }
    report["runs"] = runs;
    detail::write_json(report, cfg.out / "training_report.json");
    detail::write_meta(cfg, "train");
    return report;
}

inline nlohmann::json run_eval(const RunConfig& cfg) {
    detail::require_label_aligned(cfg, "eval");
    const detail::LabeledData data = detail::load_labeled(cfg);
    const auto split_json = detail::read_json(cfg.out / "split.json");
    std::set<std::string> test_sessions;
    std::uint64_t split_hash = 0;
    try {
        const auto test = split_json.at("test").get<std::vector<std::string>>();
        test_sessions.insert(test.begin(), test.end());
        split_hash = split_json.at("hash").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("split.json: " + std::string(e.what()));
    }

    nlohmann::json report;
    report["config_hash"] = cfg.config_hash();
    nlohmann::json rows = nlohmann::json::array();
    std::vector<std::vector<std::string>> table;

    for (const auto& set_name : cfg.feature_sets) {
        auto it = data.by_set.find(set_name);
        if (it == data.by_set.end()) {
            throw ValidationError("eval: feature set '" + set_name + "' not present");
        }
        nlohmann::json row;
        row["feature_set"] = set_name;
        double sum = 0.0;
        std::size_t param_count = 0;
        for (const auto dim : {annotation::Dimension::arousal, annotation::Dimension::valence}) {
            const auto path = cfg.out / "models" /
                              (set_name + "_" + annotation::dimension_name(dim) + ".json");
            const model::TrainedModel trained = model::TrainedModel::load(path);
            if (trained.split_hash != split_hash) {
                throw ValidationError("eval: model " + path.string() +
                                      " was trained with a different split");
            }
            const model::Dataset test_set =
                detail::build_dataset(data, it->second, test_sessions, dim);
            if (test_set.size() < 2) {
                throw ValidationError("eval: not enough labeled test windows for set '" +
                                      set_name + "'");
            }
            const model::EvalReport er = model::evaluate(trained, test_set);
            row[std::string(annotation::dimension_name(dim)) + "_ccc"] = er.ccc;
            row[std::string(annotation::dimension_name(dim)) + "_n"] = er.n;
            sum += er.ccc;
            param_count = trained.parameter_count();
        }
        row["parameter_count"] = param_count;
        row["average_ccc"] = sum / 2.0;
        table.push_back({set_name, std::to_string(param_count),
                         detail::fmt(row["arousal_ccc"].get<double>()),
                         detail::fmt(row["valence_ccc"].get<double>()),
                         detail::fmt(row["average_ccc"].get<double>())});
        rows.push_back(std::move(row));
    }
    report["results"] = rows;
    detail::write_json(report, cfg.out / "results_report.json");
    std::ofstream tf(cfg.out / "results_report.txt");
    tf << detail::format_table(
        {"Feature set", "Params", "Arousal CCC", "Valence CCC", "Average CCC"}, table);
    detail::write_meta(cfg, "eval");
    return report;
}

}  // namespace ga::pipeline
