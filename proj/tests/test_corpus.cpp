#include <doctest.h>

#include <cmath>

#include "ga/corpus.hpp"
#include "ga/simulate.hpp"
#include "test_helpers.hpp"

using namespace ga;
using namespace ga::corpus;

namespace {

Channel make_channel(const std::string& name, double rate, std::vector<double> values,
                     std::vector<std::uint8_t> valid = {}) {
    Channel ch;
    ch.name = name;
    ch.sample_rate = rate;
    if (valid.empty()) valid.assign(values.size(), 1);
    ch.values = std::move(values);
    ch.valid = std::move(valid);
    return ch;
}

Session small_session(int n_participants = 3, int n_channels = 2, std::size_t n_samples = 10,
                      double rate = 2.0, std::uint64_t seed = 11) {
    Rng rng(seed);
    Session s;
    s.session_id = "tiny";
    s.duration_s = static_cast<double>(n_samples) / rate;
    for (int p = 0; p < n_participants; ++p) s.participants.push_back("p" + std::to_string(p));
    for (int c = 0; c < n_channels; ++c) s.channel_names.push_back("c" + std::to_string(c));
    for (const auto& pid : s.participants) {
        for (const auto& name : s.channel_names) {
            std::vector<double> v(n_samples);
            for (double& x : v) x = rng.uniform(-3.0, 3.0);
            s.channels[{pid, name}] = make_channel(name, rate, std::move(v));
        }
    }
    return s;
}

}  // namespace

TEST_CASE("identity ingestion: equal-length channels, duration = length / rate") {
    testutil::TempDir dir("corpus_identity");
    const Session original = small_session();
    write_session(original, dir.path);
    const auto manifest = SessionManifest::load(dir.path / "manifest.json");
    const Session loaded = load_session(dir.path, manifest);

    CHECK(loaded.participants.size() == 3);
    CHECK(loaded.channel_names.size() == 2);
    CHECK(loaded.channels.size() == 6);
    CHECK(loaded.duration_s == doctest::Approx(10.0 / 2.0));
}

TEST_CASE("round trip through the CSV contract is bit-exact at equal rates") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL}) {
        testutil::TempDir dir("corpus_roundtrip");
        const Session original = small_session(2, 2, 37, 5.0, seed);
        write_session(original, dir.path);
        const Session loaded =
            load_session(dir.path, SessionManifest::load(dir.path / "manifest.json"));
        for (const auto& [key, ch] : original.channels) {
            const Channel& got = loaded.channel(key.first, key.second);
            REQUIRE(got.values.size() == ch.values.size());
            for (std::size_t i = 0; i < ch.values.size(); ++i) {
                CHECK(got.values[i] == ch.values[i]);  // bit-exact
                CHECK(got.valid[i] == ch.valid[i]);
            }
        }
    }
}

TEST_CASE("timestamp gaps become invalid samples, not errors") {
    testutil::TempDir dir("corpus_gap");
    // p0 has a 10-sample grid at 1 Hz with t = 4, 5, 6 absent.
    std::string p0 = "t,participant,channel,value,valid\n";
    for (int t : {0, 1, 2, 3, 7, 8, 9}) {
        p0 += std::to_string(t) + ",p0,c0," + std::to_string(t * 10) + ",1\n";
    }
    std::string p1 = "t,participant,channel,value,valid\n";
    for (int t = 0; t < 10; ++t) {
        p1 += std::to_string(t) + ",p1,c0," + std::to_string(t) + ",1\n";
    }
    testutil::write_text(dir.path / "p0.csv", p0);
    testutil::write_text(dir.path / "p1.csv", p1);
    SessionManifest m;
    m.session_id = "gap";
    m.participants = {"p0", "p1"};
    m.target_rates["c0"] = 1.0;

    const Session s = load_session(dir.path, m);
    const Channel& ch = s.channel("p0", "c0");
    REQUIRE(ch.size() == 10);
    // Hand-built oracle mask for the gapped file.
    const std::vector<std::uint8_t> expected = {1, 1, 1, 1, 0, 0, 0, 1, 1, 1};
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(ch.valid[i] == expected[i]);
    }
    CHECK(s.channel("p1", "c0").valid == std::vector<std::uint8_t>(10, 1));
}

TEST_CASE("loader contract violations") {
    SUBCASE("one participant only") {
        testutil::TempDir dir("corpus_single");
        testutil::write_text(dir.path / "p0.csv",
                             "t,participant,channel,value,valid\n0,p0,c0,1,1\n1,p0,c0,2,1\n");
        SessionManifest m;
        m.session_id = "x";
        m.participants = {"p0"};
        CHECK_THROWS_WITH_AS(load_session(dir.path, m),
                             doctest::Contains("participant count < 2"), ValidationError);
    }
    SUBCASE("missing participant file") {
        testutil::TempDir dir("corpus_missing");
        testutil::write_text(dir.path / "p0.csv",
                             "t,participant,channel,value,valid\n0,p0,c0,1,1\n1,p0,c0,2,1\n");
        SessionManifest m;
        m.session_id = "x";
        m.participants = {"p0", "p1"};
        CHECK_THROWS_WITH_AS(load_session(dir.path, m), doctest::Contains("missing participant"),
                             ValidationError);
    }
    SUBCASE("non-monotonic timestamps name the row") {
        testutil::TempDir dir("corpus_nonmono");
        testutil::write_text(
            dir.path / "p0.csv",
            "t,participant,channel,value,valid\n0,p0,c0,1,1\n2,p0,c0,2,1\n1,p0,c0,3,1\n");
        testutil::write_text(dir.path / "p1.csv",
                             "t,participant,channel,value,valid\n0,p1,c0,1,1\n1,p1,c0,2,1\n");
        SessionManifest m;
        m.session_id = "x";
        m.participants = {"p0", "p1"};
        try {
            load_session(dir.path, m);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("non-monotonic") != std::string::npos);
            CHECK(msg.find(":4:") != std::string::npos);  // 1-based row of the bad line
        }
    }
    SUBCASE("participant channel-set mismatch") {
        testutil::TempDir dir("corpus_chmismatch");
        testutil::write_text(dir.path / "p0.csv",
                             "t,participant,channel,value,valid\n0,p0,c0,1,1\n1,p0,c0,2,1\n");
        testutil::write_text(dir.path / "p1.csv",
                             "t,participant,channel,value,valid\n0,p1,c1,1,1\n1,p1,c1,2,1\n");
        SessionManifest m;
        m.session_id = "x";
        m.participants = {"p0", "p1"};
        CHECK_THROWS_WITH_AS(load_session(dir.path, m), doctest::Contains("missing channel"),
                             ValidationError);
    }
    SUBCASE("corrupted row names file and line") {
        testutil::TempDir dir("corpus_badrow");
        testutil::write_text(dir.path / "p0.csv",
                             "t,participant,channel,value,valid\n0,p0,c0,1,1\n1,p0,c0,oops,1\n");
        testutil::write_text(dir.path / "p1.csv",
                             "t,participant,channel,value,valid\n0,p1,c0,1,1\n1,p1,c0,2,1\n");
        SessionManifest m;
        m.session_id = "x";
        m.participants = {"p0", "p1"};
        try {
            load_session(dir.path, m);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("p0.csv:3") != std::string::npos);
            CHECK(msg.find("not a number") != std::string::npos);
        }
    }
}

TEST_CASE("window counts follow the floor rule") {
    const WindowGrid grid{15.0, 15.0};
    CHECK(window_count(45.0 * 60.0, grid) == 180);    // 45 min
    CHECK(window_count(2495.0, grid) == 166);         // 41 min 35 s, trailing 5 s discarded
    CHECK(window_count(10.0, grid) == 0);

    Session s = small_session(2, 1, 20, 2.0);  // 10 s
    CHECK_THROWS_AS(make_windows(s, grid), ValidationError);
}

TEST_CASE("overlapping windows when hop < length") {
    // duration 60, window 15, hop 5: starts at 0, 5, ..., 45.
    CHECK(window_count(60.0, WindowGrid{15.0, 5.0}) == 10);
    Channel ch = make_channel("c", 1.0, std::vector<double>(60, 1.0));
    const auto slices = make_channel_windows(ch, WindowGrid{15.0, 5.0}, 60.0);
    REQUIRE(slices.size() == 10);
    for (const auto& s : slices) CHECK(s.values.size() == 15);
}

TEST_CASE("CRLF line endings parse cleanly") {
    testutil::TempDir dir("corpus_crlf");
    testutil::write_text(dir.path / "p0.csv",
                         "t,participant,channel,value,valid\r\n0,p0,c0,1,1\r\n1,p0,c0,2,1\r\n");
    testutil::write_text(dir.path / "p1.csv",
                         "t,participant,channel,value,valid\r\n0,p1,c0,3,1\r\n1,p1,c0,4,1\r\n");
    SessionManifest m;
    m.session_id = "crlf";
    m.participants = {"p0", "p1"};
    const Session s = load_session(dir.path, m);
    CHECK(s.channel("p0", "c0").values == std::vector<double>{1, 2});
}

TEST_CASE("window count equals floor(duration / hop) for hop = length (property)") {
    Rng rng(99);
    for (int trial = 0; trial < 500; ++trial) {
        const double len = 15.0;
        const std::size_t rate = 1 + rng.index(5);  // 1..5 Hz
        const std::size_t n_samples = 15 + rng.index(20000);
        const double duration = static_cast<double>(n_samples) / static_cast<double>(rate);
        // Integer oracle: full windows of len*rate samples.
        const std::size_t oracle = n_samples / (static_cast<std::size_t>(len) * rate);
        CHECK(window_count(duration, WindowGrid{len, len}) == oracle);
    }
}

TEST_CASE("window slices carry validity fractions and window_mean skips invalid samples") {
    Channel ch = make_channel("c", 1.0, {1, 2, 3, 4, 5, 6}, {1, 0, 1, 1, 1, 0});
    const auto slices = make_channel_windows(ch, WindowGrid{3.0, 3.0}, 6.0);
    REQUIRE(slices.size() == 2);
    CHECK(slices[0].validity_fraction == doctest::Approx(2.0 / 3.0));
    CHECK(*window_mean(slices[0]) == doctest::Approx(2.0));  // mean of {1, 3}
    CHECK(*window_mean(slices[1]) == doctest::Approx(4.5));  // mean of {4, 5}

    Channel dead = make_channel("d", 1.0, {1, 2, 3}, {0, 0, 0});
    const auto dead_slices = make_channel_windows(dead, WindowGrid{3.0, 3.0}, 3.0);
    CHECK_FALSE(window_mean(dead_slices[0]).has_value());

    Channel simple = make_channel("s", 1.0, {1, 2, 3});
    const auto ss = make_channel_windows(simple, WindowGrid{3.0, 3.0}, 3.0);
    CHECK(*window_mean(ss[0]) == doctest::Approx(2.0));
}

TEST_CASE("resampling to the native rate is the identity") {
    testutil::TempDir dir("corpus_resample_id");
    const Session original = small_session(2, 1, 50, 4.0, 77);
    write_session(original, dir.path);
    auto manifest = SessionManifest::load(dir.path / "manifest.json");
    manifest.target_rates["c0"] = 4.0;  // explicit, equals native
    const Session loaded = load_session(dir.path, manifest);
    const Channel& a = original.channel("p0", "c0");
    const Channel& b = loaded.channel("p0", "c0");
    REQUIRE(a.values.size() == b.values.size());
    for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i] == b.values[i]);
}

TEST_CASE("resampling interpolates between native rates") {
    testutil::TempDir dir("corpus_resample");
    // 1 Hz ramp resampled to 2 Hz: midpoints are linear interpolants.
    std::string p0 = "t,participant,channel,value,valid\n";
    for (int t = 0; t < 6; ++t) p0 += std::to_string(t) + ",p0,c0," + std::to_string(2 * t) + ",1\n";
    std::string p1 = "t,participant,channel,value,valid\n";
    for (int t = 0; t < 6; ++t) p1 += std::to_string(t) + ",p1,c0," + std::to_string(3 * t) + ",1\n";
    testutil::write_text(dir.path / "p0.csv", p0);
    testutil::write_text(dir.path / "p1.csv", p1);
    SessionManifest m;
    m.session_id = "resample";
    m.participants = {"p0", "p1"};
    m.target_rates["c0"] = 2.0;
    const Session s = load_session(dir.path, m);
    const Channel& ch = s.channel("p0", "c0");
    REQUIRE(ch.size() == 12);
    CHECK(ch.values[0] == doctest::Approx(0.0));
    CHECK(ch.values[1] == doctest::Approx(1.0));  // halfway between 0 and 2
    CHECK(ch.values[2] == doctest::Approx(2.0));
    CHECK(ch.values[7] == doctest::Approx(7.0));
}

TEST_CASE("session validation enforces the core invariants") {
    Session s = small_session();
    s.participants = {"p0"};
    CHECK_THROWS_AS(validate(s), ValidationError);

    Session s2 = small_session();
    s2.channels.at({"p0", "c0"}).valid.pop_back();
    CHECK_THROWS_AS(validate(s2), ValidationError);
}
