#include <doctest.h>

#include <cmath>

#include "ga/annotation.hpp"
#include "ga/corpus.hpp"
#include "ga/dyadic.hpp"
#include "ga/simulate.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace ga;
using namespace ga::simulate;

TEST_CASE("simulate_session is deterministic per seed") {
    SimConfig cfg;
    cfg.duration_s = 60.0;
    cfg.seed = 123;
    auto [s1, t1] = simulate_session(cfg);
    auto [s2, t2] = simulate_session(cfg);
    for (const auto& [key, ch] : s1.channels) {
        const auto& other = s2.channels.at(key);
        REQUIRE(ch.values.size() == other.values.size());
        for (std::size_t i = 0; i < ch.values.size(); ++i) {
            CHECK(ch.values[i] == other.values[i]);  // bit-identical
        }
    }
    CHECK(t1.arousal == t2.arousal);

    cfg.seed = 124;
    auto [s3, t3] = simulate_session(cfg);
    bool any_diff = false;
    for (const auto& [key, ch] : s1.channels) {
        const auto& other = s3.channels.at(key);
        for (std::size_t i = 0; i < ch.values.size(); ++i) {
            if (ch.values[i] != other.values[i]) any_diff = true;
        }
    }
    CHECK(any_diff);
}

TEST_CASE("coupling ordering: higher coupling raises mean dyad correlation") {
    // Monotone over a 3-level grid, medians over seeds.
    auto mean_abs_rho = [](double coupling, std::uint64_t seed) {
        SimConfig cfg;
        cfg.n_participants = 3;
        cfg.n_channels = 1;
        cfg.duration_s = 120.0;
        cfg.sample_rate = 5.0;
        cfg.coupling = coupling;
        cfg.reactivity_rate = 0.0;
        cfg.noise_sd = 0.05;
        cfg.seed = seed;
        auto [session, truth] = simulate_session(cfg);
        dyadic::DyadConfig dcfg;
        dcfg.convergence = false;
        const auto table = dyadic::dyad_features(session, corpus::WindowGrid{15, 15}, dcfg);
        double sum = 0;
        std::size_t n = 0;
        for (const auto& r : table.rows) {
            if (r.feature == "rho" && r.value) {
                sum += std::fabs(*r.value);
                ++n;
            }
        }
        return sum / static_cast<double>(n);
    };
    std::vector<double> lo, mid, hi;
    for (std::uint64_t seed = 1; seed <= 11; ++seed) {
        lo.push_back(mean_abs_rho(0.0, seed));
        mid.push_back(mean_abs_rho(0.5, seed));
        hi.push_back(mean_abs_rho(0.9, seed));
    }
    auto median = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    CHECK(median(lo) < median(mid));
    CHECK(median(mid) < median(hi));
    CHECK(median(lo) < 0.25);
    CHECK(median(hi) > 0.7);
}

TEST_CASE("simulated annotators") {
    SimConfig cfg;
    cfg.duration_s = 150.0;
    cfg.seed = 5;
    cfg.deterministic_latent = true;  // spread affect across the scale
    auto [session, truth] = simulate_session(cfg);

    SUBCASE("zero noise, zero bias: identical tracks, perfect agreement, EWE = rounded truth") {
        AnnotatorConfig acfg{4, 0.0, 0.0, 9};
        const auto tracks = simulate_annotators(truth, "s", acfg);
        std::vector<annotation::AnnotationTrack> arousal;
        for (const auto& t : tracks) {
            if (t.dimension == annotation::Dimension::arousal) arousal.push_back(t);
        }
        REQUIRE(arousal.size() == 4);
        CHECK(annotation::pairwise_kappa_mean(arousal) == doctest::Approx(1.0));
        CHECK(annotation::cronbach_alpha(arousal).value == doctest::Approx(1.0));
        CHECK(annotation::pairwise_pcc_mean(arousal) == doctest::Approx(1.0));
        const auto fused = annotation::ewe_fuse(arousal);
        for (std::size_t w = 0; w < truth.arousal.size(); ++w) {
            CHECK(*fused.values[w] ==
                  doctest::Approx(std::llround(std::clamp(truth.arousal[w], 1.0, 9.0))));
        }
    }
    SUBCASE("rising noise lowers expected pairwise kappa (3-point grid, 50 seeds)") {
        auto mean_kappa = [&](double noise) {
            double sum = 0;
            for (std::uint64_t seed = 1; seed <= 50; ++seed) {
                AnnotatorConfig acfg{4, noise, 0.2, seed};
                const auto tracks = simulate_annotators(truth, "s", acfg);
                std::vector<annotation::AnnotationTrack> arousal;
                for (const auto& t : tracks) {
                    if (t.dimension == annotation::Dimension::arousal) arousal.push_back(t);
                }
                sum += annotation::pairwise_kappa_mean(arousal);
            }
            return sum / 50.0;
        };
        const double k0 = mean_kappa(0.2);
        const double k1 = mean_kappa(0.8);
        const double k2 = mean_kappa(1.6);
        CHECK(k0 > k1);
        CHECK(k1 > k2);
    }
    SUBCASE("agreement metrics on generated tracks match the formula oracles to 1e-9") {
        AnnotatorConfig acfg{5, 0.6, 0.3, 31};
        const auto tracks = simulate_annotators(truth, "s", acfg);
        std::vector<annotation::AnnotationTrack> arousal;
        for (const auto& t : tracks) {
            if (t.dimension == annotation::Dimension::arousal) arousal.push_back(t);
        }
        // Kappa / PCC: mean over pairs against the independent references.
        double kappa_sum = 0, pcc_sum = 0;
        std::size_t pairs = 0;
        std::vector<std::vector<double>> items;
        for (const auto& t : arousal) {
            std::vector<double> item;
            for (const auto& r : t.ratings) item.push_back(static_cast<double>(*r));
            items.push_back(std::move(item));
        }
        std::vector<std::vector<int>> ratings;
        for (const auto& t : arousal) {
            std::vector<int> r;
            for (const auto& v : t.ratings) r.push_back(*v);
            ratings.push_back(std::move(r));
        }
        for (std::size_t i = 0; i < arousal.size(); ++i) {
            for (std::size_t j = i + 1; j < arousal.size(); ++j) {
                kappa_sum += oracle::quadratic_kappa(ratings[i], ratings[j], 9);
                pcc_sum += oracle::pearson(items[i], items[j]);
                ++pairs;
            }
        }
        CHECK(annotation::pairwise_kappa_mean(arousal) ==
              doctest::Approx(kappa_sum / static_cast<double>(pairs)).epsilon(1e-9));
        CHECK(annotation::pairwise_pcc_mean(arousal) ==
              doctest::Approx(pcc_sum / static_cast<double>(pairs)).epsilon(1e-9));
        CHECK(annotation::cronbach_alpha(arousal).value ==
              doctest::Approx(oracle::cronbach_alpha(items)).epsilon(1e-9));
    }
    SUBCASE("a sign-flipped annotator is exposed by LOAO") {
        AnnotatorConfig acfg{5, 0.3, 0.1, 11};
        auto tracks = simulate_annotators(truth, "s", acfg);
        std::vector<annotation::AnnotationTrack> arousal;
        for (const auto& t : tracks) {
            if (t.dimension == annotation::Dimension::arousal) arousal.push_back(t);
        }
        auto& adversary = arousal.back();
        for (auto& r : adversary.ratings) {
            if (r) r = 10 - *r;
        }
        const auto loao = annotation::loao_analysis(arousal);
        CHECK(loao.back().delta > 0.0);
    }
}

TEST_CASE("make_synthetic_corpus writes the full contract set") {
    testutil::TempDir dir("simulate_corpus");
    make_synthetic_corpus("smoke", 42, dir.path);

    CHECK(std::filesystem::exists(dir.path / "corpus.json"));
    CHECK(std::filesystem::exists(dir.path / "annotations.csv"));
    const auto corpus_json = nlohmann::json::parse(std::ifstream(dir.path / "corpus.json"));
    const auto sessions = corpus_json["sessions"].get<std::vector<std::string>>();
    REQUIRE(sessions.size() == 3);

    for (const auto& sid : sessions) {
        const auto sdir = dir.path / sid;
        CHECK(std::filesystem::exists(sdir / "manifest.json"));
        CHECK(std::filesystem::exists(sdir / "truth.json"));
        const auto manifest = corpus::SessionManifest::load(sdir / "manifest.json");
        const corpus::Session session = corpus::load_session(sdir, manifest);
        CHECK(session.participants.size() == 3);
        CHECK(session.channel_names.size() == 2);
        CHECK(session.duration_s == doctest::Approx(300.0));
    }

    const auto sets = annotation::read_annotation_csv(dir.path / "annotations.csv");
    CHECK(sets.size() == 3);
    for (const auto& [sid, set] : sets) {
        CHECK(set.arousal.size() == 6);
        CHECK(set.n_windows == 20);
    }

    SUBCASE("same seed reproduces byte-identical files") {
        testutil::TempDir dir2("simulate_corpus_again");
        make_synthetic_corpus("smoke", 42, dir2.path);
        for (auto& entry : std::filesystem::recursive_directory_iterator(dir.path)) {
            if (!entry.is_regular_file()) continue;
            const auto rel = std::filesystem::relative(entry.path(), dir.path);
            std::ifstream a(entry.path(), std::ios::binary);
            std::ifstream b(dir2.path / rel, std::ios::binary);
            REQUIRE(b.good());
            const std::string ca((std::istreambuf_iterator<char>(a)), {});
            const std::string cb((std::istreambuf_iterator<char>(b)), {});
            CHECK(ca == cb);
        }
    }
}

TEST_CASE("convdiv preset plants a convex coupling profile") {
    testutil::TempDir dir("simulate_convdiv");
    make_synthetic_corpus("convdiv", 3, dir.path);
    const auto corpus_json = nlohmann::json::parse(std::ifstream(dir.path / "corpus.json"));
    const auto sessions = corpus_json["sessions"].get<std::vector<std::string>>();
    const auto truth =
        nlohmann::json::parse(std::ifstream(dir.path / sessions[0] / "truth.json"));
    const auto arousal = truth["arousal"].get<std::vector<double>>();
    const auto coupling = truth["coupling_per_window"].get<std::vector<double>>();
    REQUIRE(arousal.size() == coupling.size());
    // Extreme-affect windows must couple harder than neutral ones.
    double extreme_sum = 0, neutral_sum = 0;
    std::size_t extreme_n = 0, neutral_n = 0;
    for (std::size_t w = 0; w < arousal.size(); ++w) {
        if (std::fabs(arousal[w] - 5.0) > 2.5) {
            extreme_sum += coupling[w];
            ++extreme_n;
        } else if (std::fabs(arousal[w] - 5.0) < 1.0) {
            neutral_sum += coupling[w];
            ++neutral_n;
        }
    }
    REQUIRE(extreme_n > 0);
    REQUIRE(neutral_n > 0);
    CHECK(extreme_sum / static_cast<double>(extreme_n) >
          neutral_sum / static_cast<double>(neutral_n) + 0.3);
}

TEST_CASE("training preset has disjoint rosters sized for the model pipeline") {
    testutil::TempDir dir("simulate_training");
    make_synthetic_corpus("training", 8, dir.path);
    const auto corpus_json = nlohmann::json::parse(std::ifstream(dir.path / "corpus.json"));
    const auto sessions = corpus_json["sessions"].get<std::vector<std::string>>();
    CHECK(sessions.size() == 20);
    std::set<std::string> seen;
    for (const auto& sid : sessions) {
        const auto manifest = corpus::SessionManifest::load(dir.path / sid / "manifest.json");
        for (const auto& p : manifest.participants) {
            CHECK(seen.insert(p).second);  // no participant reappears
        }
    }
}
