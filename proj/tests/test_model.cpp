#include <doctest.h>

#include <cmath>

#include "ga/model.hpp"
#include "oracles.hpp"
#include "test_helpers.hpp"

using namespace ga;
using namespace ga::model;

namespace {

Dataset linear_dataset(std::size_t n, std::size_t dim, std::uint64_t seed,
                       bool shuffle_labels = false) {
    Rng rng(seed);
    std::vector<double> w(dim);
    for (double& x : w) x = rng.uniform(-1, 1);
    Dataset ds;
    for (std::size_t j = 0; j < dim; ++j) ds.feature_names.push_back("f" + std::to_string(j));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::optional<double>> row(dim);
        double y = 0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double v = rng.normal();
            row[j] = v;
            y += w[j] * v;
        }
        ds.rows.push_back(std::move(row));
        ds.labels.push_back(y);
        ds.session_of.push_back("s");
    }
    if (shuffle_labels) {
        Rng srng(seed ^ 0xdeadULL);
        srng.shuffle(ds.labels);
    }
    return ds;
}

}  // namespace

TEST_CASE("ccc anchors and properties") {
    SUBCASE("identity") {
        const std::vector<double> x = {1, 2, 3};
        CHECK(ccc(x, x).value == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("shifted line: 4/7") {
        const std::vector<double> x = {1, 2, 3};
        const std::vector<double> y = {2, 3, 4};
        const Flagged c = ccc(x, y);
        CHECK_FALSE(c.degenerate);
        CHECK(c.value == doctest::Approx(4.0 / 7.0).epsilon(1e-12));
    }
    SUBCASE("centered sign flip: -1") {
        const std::vector<double> x = {-1, 0, 1};
        const std::vector<double> y = {1, 0, -1};
        CHECK(ccc(x, y).value == doctest::Approx(-1.0).epsilon(1e-12));
    }
    SUBCASE("both constant and equal -> degenerate") {
        const std::vector<double> x = {2, 2, 2};
        const Flagged c = ccc(x, x);
        CHECK(c.degenerate);
        CHECK(c.value == 0.0);
    }
    SUBCASE("symmetry and |CCC| <= |PCC| (property)") {
        Rng rng(7);
        for (int trial = 0; trial < 200; ++trial) {
            std::vector<double> x(20), y(20);
            for (std::size_t i = 0; i < 20; ++i) {
                x[i] = rng.normal(1.0, 2.0);
                y[i] = rng.normal(-0.5, 1.0);
            }
            const double c = ccc(x, y).value;
            CHECK(c == doctest::Approx(ccc(y, x).value).epsilon(1e-12));
            CHECK(std::fabs(c) <= std::fabs(oracle::pearson(x, y)) + 1e-12);
            CHECK(c == doctest::Approx(oracle::ccc(x, y)).epsilon(1e-10));
        }
    }
}

TEST_CASE("ccc loss gradient matches central finite differences") {
    Rng rng(13);
    std::vector<double> pred(8), target(8);
    for (std::size_t i = 0; i < 8; ++i) {
        pred[i] = rng.normal();
        target[i] = rng.normal(0.5, 1.2);
    }
    const CccLoss base = ccc_loss(pred, target);
    REQUIRE_FALSE(base.degenerate);
    const double h = 1e-6;
    for (std::size_t i = 0; i < 8; ++i) {
        std::vector<double> up = pred, down = pred;
        up[i] += h;
        down[i] -= h;
        const double numeric = (ccc_loss(up, target).loss - ccc_loss(down, target).loss) / (2 * h);
        CHECK(base.grad[i] == doctest::Approx(numeric).epsilon(1e-6));
    }
}

TEST_CASE("make_split") {
    auto disjoint_rosters = [](int n) {
        std::vector<SessionRoster> rosters;
        for (int i = 0; i < n; ++i) {
            rosters.push_back({"s" + std::to_string(i),
                               {"p" + std::to_string(3 * i), "p" + std::to_string(3 * i + 1),
                                "p" + std::to_string(3 * i + 2)}});
        }
        return rosters;
    };
    SUBCASE("10 disjoint sessions split exactly 8/2 with a validation carve") {
        const auto plan = make_split(disjoint_rosters(10), 0.2, 0.1, 42);
        CHECK(plan.test.size() == 2);
        CHECK(plan.val.size() == 1);
        CHECK(plan.train.size() == 7);
        CHECK(split_rosters_disjoint(plan));
    }
    SUBCASE("sessions sharing a participant land on the same side") {
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            auto rosters = disjoint_rosters(10);
            rosters[3].participants.push_back("shared");
            rosters[7].participants.push_back("shared");
            const auto plan = make_split(rosters, 0.2, 0.1, seed);
            CHECK(split_rosters_disjoint(plan));
            const bool s3_test =
                std::find(plan.test.begin(), plan.test.end(), "s3") != plan.test.end();
            const bool s7_test =
                std::find(plan.test.begin(), plan.test.end(), "s7") != plan.test.end();
            CHECK(s3_test == s7_test);
        }
    }
    SUBCASE("a participant in every session is infeasible") {
        auto rosters = disjoint_rosters(6);
        for (auto& r : rosters) r.participants.push_back("omni");
        CHECK_THROWS_WITH_AS(make_split(rosters, 0.2, 0.1, 1), doctest::Contains("omni"),
                             ValidationError);
    }
    SUBCASE("disjointness predicate holds over random shared-roster corpora") {
        Rng rng(17);
        for (int trial = 0; trial < 50; ++trial) {
            const int n = 6 + static_cast<int>(rng.index(10));
            auto rosters = disjoint_rosters(n);
            // A few random shared participants, never touching everything.
            for (int s = 0; s < 3; ++s) {
                const auto i = rng.index(static_cast<std::size_t>(n));
                const auto j = rng.index(static_cast<std::size_t>(n));
                rosters[i].participants.push_back("x" + std::to_string(s));
                rosters[j].participants.push_back("x" + std::to_string(s));
            }
            try {
                const auto plan = make_split(rosters, 0.2, 0.1, rng.next());
                CHECK(split_rosters_disjoint(plan));
                const double target = 0.2 * static_cast<double>(n);
                CHECK(std::fabs(static_cast<double>(plan.test.size()) - target) <= 1.6);
            } catch (const ValidationError&) {
                // Component granularity can genuinely block the ratio.
            }
        }
    }
}

TEST_CASE("mlp forward basics") {
    MlpSpec spec;
    spec.input_dim = 4;
    spec.hidden = {8, 4};
    SUBCASE("zero weights produce zero output") {
        Mlp net(spec, 3);
        MlpParams params = net.params();
        auto zero = [](std::vector<double>& v) { std::fill(v.begin(), v.end(), 0.0); };
        zero(params.w1);
        zero(params.b1);
        zero(params.w2);
        zero(params.b2);
        zero(params.w3);
        zero(params.b3);
        Mlp zeroed(spec, std::move(params));
        const std::vector<double> batch = {1, 2, 3, 4, -1, -2, -3, -4};
        const auto out = zeroed.forward(batch, 2, false);
        CHECK(out[0] == 0.0);
        CHECK(out[1] == 0.0);
    }
    SUBCASE("identical inputs give identical outputs in eval mode") {
        Mlp net(spec, 4);
        std::vector<double> batch;
        for (int i = 0; i < 3; ++i) {
            batch.insert(batch.end(), {0.5, -1.0, 2.0, 0.25});
        }
        const auto out = net.forward(batch, 3, false);
        CHECK(out[0] == out[1]);
        CHECK(out[1] == out[2]);
    }
    SUBCASE("dimension mismatch throws") {
        Mlp net(spec, 5);
        const std::vector<double> bad = {1, 2, 3};
        CHECK_THROWS_AS(net.forward(bad, 1, false), ValidationError);
    }
}

TEST_CASE("backpropagation matches central differences on every parameter") {
    // Training-mode forward (batch statistics active) through all three
    // layers, CCC loss, 8-sample batch.
    MlpSpec spec;
    spec.input_dim = 5;
    spec.hidden = {16, 8};
    Mlp net(spec, 21);
    Rng rng(22);
    const std::size_t n = 8;
    std::vector<double> batch(n * spec.input_dim), target(n);
    for (double& v : batch) v = rng.normal();
    for (double& v : target) v = rng.normal(0.3, 1.1);

    const auto pred = net.forward(batch, n, true);
    const CccLoss loss = ccc_loss(pred, target);
    REQUIRE_FALSE(loss.degenerate);
    net.backward(loss.grad);

    const auto params = net.parameter_refs();
    const auto grads = net.gradient_refs();
    REQUIRE(params.size() == Mlp::parameter_count(spec));

    const double h = 1e-5;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double saved = *params[i];
        *params[i] = saved + h;
        const double up = ccc_loss(net.forward(batch, n, true), target).loss;
        *params[i] = saved - h;
        const double down = ccc_loss(net.forward(batch, n, true), target).loss;
        *params[i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double analytic = *grads[i];
        const double denom = std::max(std::fabs(numeric), std::fabs(analytic));
        const bool ok = std::fabs(analytic - numeric) <= 1e-9 ||
                        std::fabs(analytic - numeric) / denom < 1e-4;
        if (!ok) {
            CAPTURE(i);
            CAPTURE(analytic);
            CAPTURE(numeric);
        }
        CHECK(ok);
        ++checked;
    }
    CHECK(checked == params.size());
    // Restore running stats perturbed by the probe passes: not needed, the
    // net is discarded.
}

TEST_CASE("training") {
    SUBCASE("overfits a 64-sample linear map to CCC > 0.99 within 500 epochs") {
        const Dataset train_set = linear_dataset(64, 6, 31);
        MlpSpec spec;
        spec.hidden = {32, 16};
        TrainConfig cfg;
        cfg.learning_rate = 1e-2;
        cfg.batch_size = 16;
        cfg.max_epochs = 500;
        cfg.patience = 500;  // no early stop: this is the capacity check
        cfg.seed = 5;
        const auto [model, history] = train(spec, cfg, train_set, Dataset{});
        const auto pred = model.predict(train_set);
        const Flagged c = ccc(pred, train_set.labels);
        CHECK(c.value > 0.99);
        CHECK(history.stop_epoch + 1 <= 500);
    }
    SUBCASE("patience stops exactly N epochs after the last improvement") {
        const Dataset train_set = linear_dataset(48, 4, 33);
        const Dataset val_set = linear_dataset(24, 4, 34);
        MlpSpec spec;
        spec.hidden = {16, 8};
        TrainConfig cfg;
        cfg.learning_rate = 1e-3;
        cfg.batch_size = 16;
        cfg.max_epochs = 400;
        cfg.patience = 10;
        cfg.seed = 6;
        const auto [model, history] = train(spec, cfg, train_set, val_set);
        REQUIRE(history.early_stopped);  // validation tracks a different map: it must stall
        // Find the last improvement of the validation loss.
        double best = std::numeric_limits<double>::infinity();
        int last_improvement = -1;
        for (std::size_t e = 0; e < history.val_loss.size(); ++e) {
            if (history.val_loss[e] < best) {
                best = history.val_loss[e];
                last_improvement = static_cast<int>(e);
            }
        }
        CHECK(history.stop_epoch == last_improvement + 10);
        CHECK(history.best_epoch == last_improvement);
    }
    SUBCASE("identical seeds give bit-identical histories") {
        const Dataset train_set = linear_dataset(40, 5, 35);
        const Dataset val_set = linear_dataset(16, 5, 36);
        MlpSpec spec;
        spec.hidden = {16, 8};
        TrainConfig cfg;
        cfg.learning_rate = 1e-3;
        cfg.batch_size = 8;
        cfg.max_epochs = 60;
        cfg.patience = 60;
        cfg.seed = 77;
        const auto [m1, h1] = train(spec, cfg, train_set, val_set);
        const auto [m2, h2] = train(spec, cfg, train_set, val_set);
        REQUIRE(h1.train_loss.size() == h2.train_loss.size());
        for (std::size_t e = 0; e < h1.train_loss.size(); ++e) {
            CHECK(h1.train_loss[e] == h2.train_loss[e]);
            CHECK(h1.val_loss[e] == h2.val_loss[e]);
        }
        const auto p1 = m1.predict(train_set);
        const auto p2 = m2.predict(train_set);
        for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == p2[i]);
    }
    SUBCASE("constant validation labels: CCC pins the loss at 1, training continues") {
        const Dataset train_set = linear_dataset(32, 4, 37);
        Dataset val_set = linear_dataset(10, 4, 38);
        std::fill(val_set.labels.begin(), val_set.labels.end(), 2.5);
        MlpSpec spec;
        spec.hidden = {8, 4};
        TrainConfig cfg;
        cfg.learning_rate = 1e-3;
        cfg.batch_size = 16;
        cfg.max_epochs = 25;
        cfg.patience = 50;
        cfg.seed = 8;
        const auto [model, history] = train(spec, cfg, train_set, val_set);
        // Constant labels zero the covariance exactly: val loss is 1 - 0.
        for (double v : history.val_loss) CHECK(v == 1.0);
        CHECK(history.stop_epoch == 24);  // patience > max_epochs: ran to the end
    }
    SUBCASE("degenerate validation CCC flags and scores loss 1") {
        // Single-valued predictions against the same single value: the CCC
        // denominator vanishes and the flag records it.
        const std::vector<double> p = {2.5, 2.5, 2.5};
        const Flagged c = ccc(p, p);
        CHECK(c.degenerate);
        CHECK(c.value == 0.0);
    }
}

TEST_CASE("evaluate and model container") {
    SUBCASE("predictions equal to labels give CCC 1") {
        Dataset test = linear_dataset(20, 3, 41);
        // A model is not needed: check the metric contract directly.
        const Flagged c = ccc(test.labels, test.labels);
        CHECK(c.value == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("shuffled-label control stays near zero (3-seed unit slice)") {
        // Permutation null: one dataset, labels shuffled globally before the
        // split, so test labels are independent of everything the model saw
        // or can compute.
        for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
            Dataset all = linear_dataset(1360, 6, 100 + seed, /*shuffle=*/true);
            auto slice = [&](std::size_t lo, std::size_t hi) {
                Dataset ds;
                ds.feature_names = all.feature_names;
                for (std::size_t i = lo; i < hi; ++i) {
                    ds.rows.push_back(all.rows[i]);
                    ds.labels.push_back(all.labels[i]);
                    ds.session_of.push_back(all.session_of[i]);
                }
                return ds;
            };
            const Dataset train_set = slice(0, 300);
            const Dataset val_set = slice(300, 360);
            const Dataset test = slice(360, 1360);
            MlpSpec spec;
            spec.hidden = {32, 16};
            TrainConfig cfg;
            cfg.learning_rate = 1e-3;
            cfg.batch_size = 32;
            cfg.max_epochs = 60;
            cfg.patience = 10;
            cfg.seed = seed;
            const auto [model, history] = train(spec, cfg, train_set, val_set);
            const EvalReport report = evaluate(model, test);
            CHECK(std::fabs(report.ccc) < 0.1);
        }
    }
    SUBCASE("save/load round trip preserves predictions bit-exactly") {
        testutil::TempDir dir("model_io");
        const Dataset train_set = linear_dataset(40, 5, 51);
        const Dataset val_set = linear_dataset(12, 5, 52);
        MlpSpec spec;
        spec.hidden = {16, 8};
        TrainConfig cfg;
        cfg.learning_rate = 1e-3;
        cfg.batch_size = 16;
        cfg.max_epochs = 30;
        cfg.patience = 30;
        cfg.seed = 9;
        auto [model, history] = train(spec, cfg, train_set, val_set);
        model.dimension = "arousal";
        model.feature_set = "combined";
        model.split_hash = 12345;
        const auto path = dir.path / "model.json";
        model.save(path);
        const TrainedModel loaded = TrainedModel::load(path);
        CHECK(loaded.split_hash == 12345);
        CHECK(loaded.parameter_count() == model.parameter_count());
        const auto p1 = model.predict(train_set);
        const auto p2 = loaded.predict(train_set);
        REQUIRE(p1.size() == p2.size());
        for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i] == p2[i]);
    }
    SUBCASE("prediction rejects mismatched feature vectors") {
        const Dataset train_set = linear_dataset(20, 3, 71);
        const Dataset val_set = linear_dataset(8, 3, 72);
        MlpSpec spec;
        spec.hidden = {8, 4};
        TrainConfig cfg;
        cfg.learning_rate = 1e-3;
        cfg.batch_size = 8;
        cfg.max_epochs = 5;
        cfg.patience = 10;
        cfg.seed = 12;
        const auto [model, history] = train(spec, cfg, train_set, val_set);
        Dataset other = linear_dataset(5, 3, 73);
        other.feature_names[1] = "renamed";
        CHECK_THROWS_AS(model.predict(other), ValidationError);
    }
    SUBCASE("training config invariants are enforced") {
        const Dataset train_set = linear_dataset(16, 3, 74);
        MlpSpec spec;
        TrainConfig bad;
        bad.patience = 0;
        CHECK_THROWS_AS(train(spec, bad, train_set, Dataset{}), ValidationError);
        TrainConfig bad2;
        bad2.learning_rate = 0.0;
        CHECK_THROWS_AS(train(spec, bad2, train_set, Dataset{}), ValidationError);
    }
    SUBCASE("imputation uses frozen train means") {
        Dataset train_set = linear_dataset(30, 3, 61);
        const Dataset val_set = linear_dataset(10, 3, 62);
        MlpSpec spec;
        spec.hidden = {8, 4};
        TrainConfig cfg;
        cfg.learning_rate = 1e-3;
        cfg.batch_size = 16;
        cfg.max_epochs = 10;
        cfg.patience = 20;
        cfg.seed = 10;
        const auto [model, history] = train(spec, cfg, train_set, val_set);
        Dataset holey = linear_dataset(5, 3, 63);
        holey.rows[2][1] = std::nullopt;
        // Missing cell standardizes to exactly 0 (the imputation mean).
        const auto dense = model.standardized(holey);
        CHECK(dense[2 * 3 + 1] == 0.0);
    }
}
