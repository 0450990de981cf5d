#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ga/common.hpp"

// Predictive baseline: speaker-disjoint session split, a 3-layer MLP trained
// with a concordance (CCC) loss under ADAM, early stopping on validation
// loss, and CCC evaluation.

namespace ga::model {

// Concordance correlation: 2 cov / (var_x + var_y + (mean_x - mean_y)^2),
// population moments. Combines correlation and bias, ranges [-1, 1].
inline Flagged ccc(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw ValidationError("ccc: need equal lengths >= 2");
    }
    const auto m = stats::joint_moments(SignalView(x), SignalView(y));
    const double bias = m.mean_x - m.mean_y;
    const double denom = m.var_x + m.var_y + bias * bias;
    if (denom <= 0.0) return {0.0, true};
    return {2.0 * m.cov / denom, false};
}

// Loss 1 - CCC over a batch of predictions, with the analytic gradient wrt
// each prediction. A degenerate denominator yields loss 1 and zero gradient.
struct CccLoss {
    double loss = 1.0;
    bool degenerate = false;
    std::vector<double> grad;  // d loss / d prediction_i
};

inline CccLoss ccc_loss(std::span<const double> pred, std::span<const double> target) {
    if (pred.size() != target.size() || pred.empty()) {
        throw ValidationError("ccc_loss: need equal non-empty batches");
    }
    CccLoss out;
    out.grad.assign(pred.size(), 0.0);
    if (pred.size() < 2) {
        out.degenerate = true;
        return out;
    }
    const auto m = stats::joint_moments(SignalView(pred), SignalView(target));
    const double bias = m.mean_x - m.mean_y;
    const double denom = m.var_x + m.var_y + bias * bias;
    if (denom <= 0.0) {
        out.degenerate = true;
        return out;
    }
    const double concordance = 2.0 * m.cov / denom;
    out.loss = 1.0 - concordance;
    const auto n = static_cast<double>(pred.size());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d_cov = (target[i] - m.mean_y) / n;
        const double d_denom = 2.0 * (pred[i] - m.mean_x) / n + 2.0 * bias / n;
        const double d_ccc = (2.0 * d_cov * denom - 2.0 * m.cov * d_denom) / (denom * denom);
        out.grad[i] = -d_ccc;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Speaker-disjoint split.

struct SessionRoster {
    std::string session_id;
    std::vector<std::string> participants;  // includes moderators
};

struct SplitPlan {
    std::vector<std::string> train, val, test;  // session ids
    std::set<std::string> train_roster, val_roster, test_roster;
    bool val_carved_at_session_level = false;  // component carve was infeasible

    std::uint64_t hash() const {
        std::string key = "train:";
        for (const auto& s : train) key += s + ",";
        key += ";val:";
        for (const auto& s : val) key += s + ",";
        key += ";test:";
        for (const auto& s : test) key += s + ",";
        return fnv1a64(key);
    }
};

// Independent check of the hard constraint: no participant in both the train
// and test rosters. Kept separate from the construction on purpose.
inline bool split_rosters_disjoint(const SplitPlan& plan) {
    for (const auto& p : plan.test_roster) {
        if (plan.train_roster.count(p) || plan.val_roster.count(p)) return false;
    }
    return true;
}

namespace detail {

struct Component {
    std::vector<std::size_t> sessions;  // indices
    std::set<std::string> roster;
};

// Connected components of the "shares a participant" relation. Sessions in
// one component must land on the same side of the train/test boundary.
inline std::vector<Component> roster_components(std::span<const SessionRoster> rosters) {
    std::vector<std::size_t> parent(rosters.size());
    for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
    std::function<std::size_t(std::size_t)> find = [&](std::size_t i) {
        while (parent[i] != i) {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        return i;
    };
    std::map<std::string, std::size_t> owner;
    for (std::size_t i = 0; i < rosters.size(); ++i) {
        for (const auto& p : rosters[i].participants) {
            auto it = owner.find(p);
            if (it == owner.end()) {
                owner[p] = i;
            } else {
                parent[find(it->second)] = find(i);
            }
        }
    }
    std::map<std::size_t, Component> comps;
    for (std::size_t i = 0; i < rosters.size(); ++i) {
        Component& c = comps[find(i)];
        c.sessions.push_back(i);
        c.roster.insert(rosters[i].participants.begin(), rosters[i].participants.end());
    }
    std::vector<Component> out;
    for (auto& [root, c] : comps) out.push_back(std::move(c));
    return out;
}

inline std::string shared_participants_message(std::span<const SessionRoster> rosters) {
    std::map<std::string, std::size_t> count;
    for (const auto& r : rosters) {
        for (const auto& p : r.participants) ++count[p];
    }
    std::string blockers;
    for (const auto& [p, n] : count) {
        if (n > 1) {
            if (!blockers.empty()) blockers += ", ";
            blockers += p;
        }
    }
    return blockers.empty() ? "(none)" : blockers;
}

}  // namespace detail

// Greedy seeded assignment of whole roster components: test gets ~test_frac
// of sessions (within one session), the rest is the training pool, and
// ~val_frac of that pool is carved for validation. Train and test rosters
// never overlap; validation prefers component granularity and falls back to
// whole sessions (flagged) when the pool is one component.
inline SplitPlan make_split(std::span<const SessionRoster> rosters, double test_frac,
                            double val_frac, std::uint64_t seed) {
    if (rosters.size() < 2) throw ValidationError("make_split: need >= 2 sessions");
    auto components = detail::roster_components(rosters);
    if (components.size() < 2) {
        throw ValidationError(
            "make_split: every assignment overlaps; sessions are linked by shared participants: " +
            detail::shared_participants_message(rosters));
    }

    Rng rng(seed);
    std::vector<std::size_t> order(components.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    const auto n = rosters.size();
    const auto target_test = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(test_frac * static_cast<double>(n))), 1, n - 1);

    std::vector<bool> in_test(components.size(), false);
    std::size_t test_count = 0;
    for (std::size_t idx : order) {
        const std::size_t size = components[idx].sessions.size();
        if (test_count < target_test && test_count + size <= target_test + 1) {
            in_test[idx] = true;
            test_count += size;
        }
        if (test_count >= target_test) break;
    }
    if (test_count + 1 < target_test || test_count > target_test + 1) {
        throw ValidationError(
            "make_split: cannot reach the requested test share within one session; sessions are "
            "linked by shared participants: " +
            detail::shared_participants_message(rosters));
    }

    SplitPlan plan;
    std::vector<std::size_t> pool_components;
    for (std::size_t idx = 0; idx < components.size(); ++idx) {
        const auto& comp = components[idx];
        if (in_test[idx]) {
            for (std::size_t s : comp.sessions) plan.test.push_back(rosters[s].session_id);
            plan.test_roster.insert(comp.roster.begin(), comp.roster.end());
        } else {
            pool_components.push_back(idx);
        }
    }

    std::size_t pool_size = 0;
    for (std::size_t idx : pool_components) pool_size += components[idx].sessions.size();
    std::size_t target_val = 0;
    if (pool_size >= 2) {
        target_val = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(pool_size))));
        target_val = std::min(target_val, pool_size - 1);
    }

    std::vector<bool> in_val(components.size(), false);
    std::size_t val_count = 0;
    if (target_val > 0 && pool_components.size() >= 2) {
        std::vector<std::size_t> pool_order = pool_components;
        rng.shuffle(pool_order);
        for (std::size_t idx : pool_order) {
            const std::size_t size = components[idx].sessions.size();
            if (val_count < target_val && val_count + size <= target_val + 1 &&
                val_count + size < pool_size) {
                in_val[idx] = true;
                val_count += size;
            }
            if (val_count >= target_val) break;
        }
    }

    if (target_val > 0 && val_count == 0) {
        // The pool is one oversized component: carve sessions directly. The
        // validation roster may then overlap training, which the protocol
        // tolerates (only train/test must stay disjoint).
        plan.val_carved_at_session_level = true;
        std::vector<std::size_t> pool_sessions;
        for (std::size_t idx : pool_components) {
            pool_sessions.insert(pool_sessions.end(), components[idx].sessions.begin(),
                                 components[idx].sessions.end());
        }
        rng.shuffle(pool_sessions);
        for (std::size_t i = 0; i < target_val; ++i) {
            plan.val.push_back(rosters[pool_sessions[i]].session_id);
            plan.val_roster.insert(rosters[pool_sessions[i]].participants.begin(),
                                   rosters[pool_sessions[i]].participants.end());
        }
        for (std::size_t i = target_val; i < pool_sessions.size(); ++i) {
            plan.train.push_back(rosters[pool_sessions[i]].session_id);
            plan.train_roster.insert(rosters[pool_sessions[i]].participants.begin(),
                                     rosters[pool_sessions[i]].participants.end());
        }
    } else {
        for (std::size_t idx : pool_components) {
            const auto& comp = components[idx];
            auto& ids = in_val[idx] ? plan.val : plan.train;
            auto& roster = in_val[idx] ? plan.val_roster : plan.train_roster;
            for (std::size_t s : comp.sessions) ids.push_back(rosters[s].session_id);
            roster.insert(comp.roster.begin(), comp.roster.end());
        }
    }

    std::sort(plan.train.begin(), plan.train.end());
    std::sort(plan.val.begin(), plan.val.end());
    std::sort(plan.test.begin(), plan.test.end());
    return plan;
}

// ---------------------------------------------------------------------------
// 3-layer MLP: linear -> ReLU -> batch norm, twice, then a linear output.
// Batch norm uses batch statistics in training and running estimates in
// evaluation; the output layer is never normalized (it would cancel the bias
// term the concordance loss penalizes).

struct MlpSpec {
    std::size_t input_dim = 0;
    std::array<std::size_t, 2> hidden = {128, 64};
};

struct BatchNorm {
    std::vector<double> gamma, beta;          // learned scale/shift
    std::vector<double> running_mean, running_var;

    void init(std::size_t dim) {
        gamma.assign(dim, 1.0);
        beta.assign(dim, 0.0);
        running_mean.assign(dim, 0.0);
        running_var.assign(dim, 1.0);
    }
};

struct MlpParams {
    std::vector<double> w1, b1, w2, b2, w3, b3;  // row-major weight matrices
    BatchNorm bn1, bn2;
};

inline constexpr double kBnEpsilon = 1e-5;
inline constexpr double kBnMomentum = 0.1;

class Mlp {
public:
    Mlp(const MlpSpec& spec, std::uint64_t seed) : spec_(spec) {
        if (spec.input_dim == 0) throw ValidationError("mlp: input_dim must be > 0");
        Rng rng(seed);
        auto init_linear = [&rng](std::vector<double>& w, std::vector<double>& b,
                                  std::size_t fan_in, std::size_t fan_out, double scale) {
            w.resize(fan_in * fan_out);
            const double sd = std::sqrt(scale / static_cast<double>(fan_in));
            for (double& v : w) v = rng.normal(0.0, sd);
            b.assign(fan_out, 0.0);
        };
        init_linear(params_.w1, params_.b1, spec.input_dim, spec.hidden[0], 2.0);
        init_linear(params_.w2, params_.b2, spec.hidden[0], spec.hidden[1], 2.0);
        init_linear(params_.w3, params_.b3, spec.hidden[1], 1, 1.0);
        params_.bn1.init(spec.hidden[0]);
        params_.bn2.init(spec.hidden[1]);
    }

    Mlp(const MlpSpec& spec, MlpParams params) : spec_(spec), params_(std::move(params)) {}

    const MlpSpec& spec() const { return spec_; }
    const MlpParams& params() const { return params_; }

    static std::size_t parameter_count(const MlpSpec& s) {
        // Trainable parameters: weights, biases, and batch-norm scale/shift.
        return s.input_dim * s.hidden[0] + s.hidden[0] + 2 * s.hidden[0] +
               s.hidden[0] * s.hidden[1] + s.hidden[1] + 2 * s.hidden[1] + s.hidden[1] + 1;
    }

    // Flattened views over trainable parameters (order is fixed; Adam state
    // and the gradient check index into the same layout).
    std::vector<double*> parameter_refs() {
        std::vector<double*> refs;
        auto add = [&refs](std::vector<double>& v) {
            for (double& x : v) refs.push_back(&x);
        };
        add(params_.w1);
        add(params_.b1);
        add(params_.bn1.gamma);
        add(params_.bn1.beta);
        add(params_.w2);
        add(params_.b2);
        add(params_.bn2.gamma);
        add(params_.bn2.beta);
        add(params_.w3);
        add(params_.b3);
        return refs;
    }

    std::vector<double*> gradient_refs() {
        std::vector<double*> refs;
        auto add = [&refs](std::vector<double>& v) {
            for (double& x : v) refs.push_back(&x);
        };
        add(grads_.w1);
        add(grads_.b1);
        add(grads_.bn1.gamma);
        add(grads_.bn1.beta);
        add(grads_.w2);
        add(grads_.b2);
        add(grads_.bn2.gamma);
        add(grads_.bn2.beta);
        add(grads_.w3);
        add(grads_.b3);
        return refs;
    }

    // batch: n x input_dim row-major. Training mode caches activations for
    // backward() and updates the running batch-norm estimates.
    std::vector<double> forward(std::span<const double> batch, std::size_t n, bool training) {
        if (n == 0 || batch.size() != n * spec_.input_dim) {
            throw ValidationError("mlp forward: batch size does not match input_dim");
        }
        cache_n_ = n;
        cache_x_.assign(batch.begin(), batch.end());
        linear(batch, n, spec_.input_dim, spec_.hidden[0], params_.w1, params_.b1, cache_z1_);
        relu(cache_z1_, cache_a1_);
        bn_forward(params_.bn1, cache_a1_, n, spec_.hidden[0], training, cache_bn1_);
        linear(cache_bn1_.out, n, spec_.hidden[0], spec_.hidden[1], params_.w2, params_.b2,
               cache_z2_);
        relu(cache_z2_, cache_a2_);
        bn_forward(params_.bn2, cache_a2_, n, spec_.hidden[1], training, cache_bn2_);
        std::vector<double> out;
        linear(cache_bn2_.out, n, spec_.hidden[1], 1, params_.w3, params_.b3, out);
        return out;
    }

    // dout: d loss / d output, length n. Must follow a training-mode forward.
    void backward(std::span<const double> dout) {
        const std::size_t n = cache_n_;
        zero_like(grads_, params_);

        std::vector<double> d_bn2;
        linear_backward(dout, n, spec_.hidden[1], 1, cache_bn2_.out, params_.w3, grads_.w3,
                        grads_.b3, d_bn2);
        std::vector<double> d_a2;
        bn_backward(params_.bn2, cache_bn2_, d_bn2, n, spec_.hidden[1], grads_.bn2, d_a2);
        relu_backward(cache_z2_, d_a2);
        std::vector<double> d_bn1;
        linear_backward(d_a2, n, spec_.hidden[0], spec_.hidden[1], cache_bn1_.out, params_.w2,
                        grads_.w2, grads_.b2, d_bn1);
        std::vector<double> d_a1;
        bn_backward(params_.bn1, cache_bn1_, d_bn1, n, spec_.hidden[0], grads_.bn1, d_a1);
        relu_backward(cache_z1_, d_a1);
        std::vector<double> d_x;
        linear_backward(d_a1, n, spec_.input_dim, spec_.hidden[0], cache_x_, params_.w1,
                        grads_.w1, grads_.b1, d_x);
    }

    MlpParams& mutable_params() { return params_; }

private:
    struct BnCache {
        std::vector<double> xhat, out;
        std::vector<double> mean, invstd;
    };

    static void zero_like(MlpParams& g, const MlpParams& p) {
        auto z = [](std::vector<double>& v, const std::vector<double>& ref) {
            v.assign(ref.size(), 0.0);
        };
        z(g.w1, p.w1);
        z(g.b1, p.b1);
        z(g.w2, p.w2);
        z(g.b2, p.b2);
        z(g.w3, p.w3);
        z(g.b3, p.b3);
        z(g.bn1.gamma, p.bn1.gamma);
        z(g.bn1.beta, p.bn1.beta);
        z(g.bn2.gamma, p.bn2.gamma);
        z(g.bn2.beta, p.bn2.beta);
    }

    static void linear(std::span<const double> in, std::size_t n, std::size_t d_in,
                       std::size_t d_out, const std::vector<double>& w,
                       const std::vector<double>& b, std::vector<double>& out) {
        out.assign(n * d_out, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t o = 0; o < d_out; ++o) {
                double s = b[o];
                const double* wrow = &w[o * d_in];
                const double* xin = &in[i * d_in];
                for (std::size_t k = 0; k < d_in; ++k) s += wrow[k] * xin[k];
                out[i * d_out + o] = s;
            }
        }
    }

    // dW, db and the input gradient for a linear layer.
    static void linear_backward(std::span<const double> dout, std::size_t n, std::size_t d_in,
                                std::size_t d_out, const std::vector<double>& in,
                                const std::vector<double>& w, std::vector<double>& dw,
                                std::vector<double>& db, std::vector<double>& din) {
        din.assign(n * d_in, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t o = 0; o < d_out; ++o) {
                const double g = dout[i * d_out + o];
                if (g == 0.0) continue;
                db[o] += g;
                double* dwrow = &dw[o * d_in];
                const double* xin = &in[i * d_in];
                const double* wrow = &w[o * d_in];
                double* dxin = &din[i * d_in];
                for (std::size_t k = 0; k < d_in; ++k) {
                    dwrow[k] += g * xin[k];
                    dxin[k] += g * wrow[k];
                }
            }
        }
    }

    static void relu(const std::vector<double>& z, std::vector<double>& a) {
        a.resize(z.size());
        for (std::size_t i = 0; i < z.size(); ++i) a[i] = z[i] > 0.0 ? z[i] : 0.0;
    }

    static void relu_backward(const std::vector<double>& z, std::vector<double>& d) {
        for (std::size_t i = 0; i < z.size(); ++i) {
            if (z[i] <= 0.0) d[i] = 0.0;
        }
    }

    static void bn_forward(BatchNorm& bn, const std::vector<double>& in, std::size_t n,
                           std::size_t dim, bool training, BnCache& cache) {
        cache.xhat.resize(n * dim);
        cache.out.resize(n * dim);
        cache.mean.assign(dim, 0.0);
        cache.invstd.assign(dim, 0.0);
        for (std::size_t j = 0; j < dim; ++j) {
            double mean, var;
            if (training) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += in[i * dim + j];
                mean = s / static_cast<double>(n);
                double v = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = in[i * dim + j] - mean;
                    v += d * d;
                }
                var = v / static_cast<double>(n);
                bn.running_mean[j] = (1.0 - kBnMomentum) * bn.running_mean[j] + kBnMomentum * mean;
                bn.running_var[j] = (1.0 - kBnMomentum) * bn.running_var[j] + kBnMomentum * var;
            } else {
                mean = bn.running_mean[j];
                var = bn.running_var[j];
            }
            const double invstd = 1.0 / std::sqrt(var + kBnEpsilon);
            cache.mean[j] = mean;
            cache.invstd[j] = invstd;
            for (std::size_t i = 0; i < n; ++i) {
                const double xh = (in[i * dim + j] - mean) * invstd;
                cache.xhat[i * dim + j] = xh;
                cache.out[i * dim + j] = bn.gamma[j] * xh + bn.beta[j];
            }
        }
    }

    static void bn_backward(const BatchNorm& bn, const BnCache& cache,
                            const std::vector<double>& dout, std::size_t n, std::size_t dim,
                            BatchNorm& grads, std::vector<double>& din) {
        din.assign(n * dim, 0.0);
        const auto nn = static_cast<double>(n);
        for (std::size_t j = 0; j < dim; ++j) {
            double dgamma = 0.0, dbeta = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                dgamma += dout[i * dim + j] * cache.xhat[i * dim + j];
                dbeta += dout[i * dim + j];
            }
            grads.gamma[j] = dgamma;
            grads.beta[j] = dbeta;
            const double scale = bn.gamma[j] * cache.invstd[j] / nn;
            for (std::size_t i = 0; i < n; ++i) {
                din[i * dim + j] = scale * (nn * dout[i * dim + j] - dbeta -
                                            cache.xhat[i * dim + j] * dgamma);
            }
        }
    }

    MlpSpec spec_;
    MlpParams params_;
    MlpParams grads_;

    std::size_t cache_n_ = 0;
    std::vector<double> cache_x_, cache_z1_, cache_a1_, cache_z2_, cache_a2_;
    BnCache cache_bn1_, cache_bn2_;
};

// ---------------------------------------------------------------------------
// Adam optimizer over the flattened parameter list.

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class Adam {
public:
    Adam(std::size_t n_params, const AdamConfig& cfg)
        : cfg_(cfg), m_(n_params, 0.0), v_(n_params, 0.0) {}

    void step(const std::vector<double*>& params, const std::vector<double*>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = *grads[i];
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m_[i] / bc1;
            const double vhat = v_[i] / bc2;
            *params[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
        }
    }

private:
    AdamConfig cfg_;
    std::vector<double> m_, v_;
    int t_ = 0;
};

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
    double learning_rate = 1e-4;
    int patience = 10;  // epochs without validation improvement
    int max_epochs = 1000;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

// Feature rows with optional missing entries; labels aligned by row.
struct Dataset {
    std::vector<std::string> feature_names;
    std::vector<std::vector<std::optional<double>>> rows;
    std::vector<double> labels;
    std::vector<std::string> session_of;  // provenance, parallel to rows

    std::size_t size() const { return rows.size(); }
};

struct TrainedModel {
    MlpSpec spec;
    MlpParams params;
    std::vector<std::string> feature_names;
    std::vector<double> impute_means;  // per feature, frozen at train time
    std::vector<double> input_mean, input_sd;  // train-split standardization
    std::string dimension, feature_set;
    std::uint64_t split_hash = 0;

    std::size_t parameter_count() const { return Mlp::parameter_count(spec); }

    std::vector<double> standardized(const Dataset& data) const {
        if (data.feature_names != feature_names) {
            throw ValidationError("model: dataset feature names do not match the trained model");
        }
        std::vector<double> out(data.size() * spec.input_dim);
        for (std::size_t i = 0; i < data.size(); ++i) {
            for (std::size_t j = 0; j < spec.input_dim; ++j) {
                const auto& cell = data.rows[i][j];
                const double raw = cell ? *cell : impute_means[j];
                out[i * spec.input_dim + j] = (raw - input_mean[j]) / input_sd[j];
            }
        }
        return out;
    }

    std::vector<double> predict(const Dataset& data) const {
        if (data.size() == 0) return {};
        Mlp net(spec, params);
        return net.forward(standardized(data), data.size(), /*training=*/false);
    }

    nlohmann::json to_json() const;
    static TrainedModel from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static TrainedModel load(const std::filesystem::path& path);
};

struct TrainHistory {
    std::vector<double> train_loss;  // mean batch loss per epoch
    std::vector<double> val_loss;    // full-set loss per epoch (eval mode)
    int best_epoch = -1;
    int stop_epoch = -1;
    bool val_degenerate_seen = false;
    bool early_stopped = false;
};

namespace detail {

inline void compute_imputation(const Dataset& data, std::vector<double>& means,
                               std::vector<double>& sds) {
    const std::size_t d = data.feature_names.size();
    means.assign(d, 0.0);
    sds.assign(d, 1.0);
    for (std::size_t j = 0; j < d; ++j) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& row : data.rows) {
            if (row[j]) {
                sum += *row[j];
                ++n;
            }
        }
        const double mean = n ? sum / static_cast<double>(n) : 0.0;
        means[j] = mean;
        double var = 0.0;
        for (const auto& row : data.rows) {
            if (row[j]) var += (*row[j] - mean) * (*row[j] - mean);
        }
        sds[j] = n ? std::sqrt(var / static_cast<double>(n)) : 1.0;
        if (sds[j] < 1e-9) sds[j] = 1.0;
    }
}

}  // namespace detail

// Seeded deterministic run: returns the parameters of the best-validation
// epoch, the loss history, and the early-stop epoch. A validation set whose
// CCC is undefined scores loss 1 (flagged) and training continues.
inline std::pair<TrainedModel, TrainHistory> train(const MlpSpec& spec_in, const TrainConfig& cfg,
                                                   const Dataset& train_set,
                                                   const Dataset& val_set) {
    if (train_set.size() < 2) throw ValidationError("train: need >= 2 training rows");
    if (cfg.patience < 1) throw ValidationError("train: patience must be >= 1");
    if (!(cfg.learning_rate > 0.0)) throw ValidationError("train: learning_rate must be > 0");
    if (cfg.max_epochs < 1) throw ValidationError("train: max_epochs must be >= 1");
    if (cfg.batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
    MlpSpec spec = spec_in;
    spec.input_dim = train_set.feature_names.size();
    if (spec.input_dim == 0) throw ValidationError("train: empty feature vector");

    TrainedModel model;
    model.spec = spec;
    model.feature_names = train_set.feature_names;
    detail::compute_imputation(train_set, model.impute_means, model.input_sd);
    model.input_mean = model.impute_means;  // standardization centers on the imputation mean

    // Dense standardized matrices, fixed for the whole run.
    auto densify = [&](const Dataset& data) {
        std::vector<double> out(data.size() * spec.input_dim);
        for (std::size_t i = 0; i < data.size(); ++i) {
            for (std::size_t j = 0; j < spec.input_dim; ++j) {
                const auto& cell = data.rows[i][j];
                const double raw = cell ? *cell : model.impute_means[j];
                out[i * spec.input_dim + j] = (raw - model.input_mean[j]) / model.input_sd[j];
            }
        }
        return out;
    };
    const std::vector<double> train_x = densify(train_set);
    const std::vector<double> val_x = val_set.size() ? densify(val_set) : std::vector<double>{};

    Mlp net(spec, mix64(cfg.seed, 0x6d6c70ULL));
    Adam adam(net.parameter_refs().size(), AdamConfig{cfg.learning_rate, 0.9, 0.999, 1e-8});
    Rng shuffle_rng(mix64(cfg.seed, 0x626174ULL));

    TrainHistory history;
    double best_val = std::numeric_limits<double>::infinity();
    MlpParams best_params = net.params();
    int best_epoch = -1;
    int epochs_since_improvement = 0;
    const bool have_val = val_set.size() >= 2;

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> batch_x, batch_y, pred;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        // Batch boundaries; a trailing single row is folded into the previous
        // batch so batch statistics stay defined.
        std::vector<std::size_t> bounds;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            bounds.push_back(start);
        }
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t bi = 0; bi < bounds.size(); ++bi) {
            std::size_t lo = bounds[bi];
            std::size_t hi = bi + 1 < bounds.size() ? bounds[bi + 1] : order.size();
            if (hi - lo == 1 && bi > 0) continue;  // folded into the previous batch
            if (bi + 1 < bounds.size() && order.size() - bounds[bi + 1] == 1) hi = order.size();
            const std::size_t m = hi - lo;
            batch_x.resize(m * spec.input_dim);
            batch_y.resize(m);
            for (std::size_t r = 0; r < m; ++r) {
                const std::size_t src = order[lo + r];
                std::copy_n(&train_x[src * spec.input_dim], spec.input_dim,
                            &batch_x[r * spec.input_dim]);
                batch_y[r] = train_set.labels[src];
            }
            pred = net.forward(batch_x, m, /*training=*/true);
            const CccLoss loss = ccc_loss(pred, batch_y);
            epoch_loss += loss.loss;
            ++n_batches;
            if (!loss.degenerate) {
                net.backward(loss.grad);
                adam.step(net.parameter_refs(), net.gradient_refs());
            }
        }
        history.train_loss.push_back(n_batches ? epoch_loss / static_cast<double>(n_batches)
                                               : 1.0);

        double val_loss = history.train_loss.back();
        if (have_val) {
            const std::vector<double> val_pred =
                net.forward(val_x, val_set.size(), /*training=*/false);
            const Flagged v = ccc(val_pred, val_set.labels);
            if (v.degenerate) {
                val_loss = 1.0;
                history.val_degenerate_seen = true;
            } else {
                val_loss = 1.0 - v.value;
            }
        }
        history.val_loss.push_back(val_loss);

        if (val_loss < best_val) {
            best_val = val_loss;
            best_params = net.params();
            best_epoch = epoch;
            epochs_since_improvement = 0;
        } else {
            ++epochs_since_improvement;
        }
        history.stop_epoch = epoch;
        if (have_val && epochs_since_improvement >= cfg.patience) {
            history.early_stopped = true;
            break;
        }
    }

    history.best_epoch = best_epoch;
    model.params = best_epoch >= 0 ? best_params : net.params();
    return {std::move(model), std::move(history)};
}

struct EvalReport {
    double ccc = 0.0;
    bool degenerate = false;
    std::size_t n = 0;
};

inline EvalReport evaluate(const TrainedModel& model, const Dataset& test) {
    if (test.size() == 0) throw ValidationError("evaluate: empty test set");
    const std::vector<double> pred = model.predict(test);
    EvalReport report;
    report.n = test.size();
    if (test.size() < 2) {
        report.degenerate = true;
        return report;
    }
    const Flagged c = ccc(pred, test.labels);
    report.ccc = c.value;
    report.degenerate = c.degenerate;
    return report;
}

// ---------------------------------------------------------------------------
// Model container (versioned JSON).

inline nlohmann::json TrainedModel::to_json() const {
    nlohmann::json j;
    j["format"] = "ga-mlp";
    j["version"] = 1;
    j["spec"] = {{"input_dim", spec.input_dim}, {"hidden", spec.hidden}};
    j["feature_names"] = feature_names;
    j["impute_means"] = impute_means;
    j["input_mean"] = input_mean;
    j["input_sd"] = input_sd;
    j["dimension"] = dimension;
    j["feature_set"] = feature_set;
    j["split_hash"] = split_hash;
    j["parameter_count"] = parameter_count();
    j["params"] = {
        {"w1", params.w1}, {"b1", params.b1}, {"w2", params.w2}, {"b2", params.b2},
        {"w3", params.w3}, {"b3", params.b3},
        {"bn1",
         {{"gamma", params.bn1.gamma},
          {"beta", params.bn1.beta},
          {"running_mean", params.bn1.running_mean},
          {"running_var", params.bn1.running_var}}},
        {"bn2",
         {{"gamma", params.bn2.gamma},
          {"beta", params.bn2.beta},
          {"running_mean", params.bn2.running_mean},
          {"running_var", params.bn2.running_var}}},
    };
    return j;
}

inline TrainedModel TrainedModel::from_json(const nlohmann::json& j) {
    TrainedModel m;
    try {
        if (j.at("format").get<std::string>() != "ga-mlp") {
            throw ValidationError("model file: unknown format");
        }
        m.spec.input_dim = j.at("spec").at("input_dim").get<std::size_t>();
        const auto hidden = j.at("spec").at("hidden").get<std::vector<std::size_t>>();
        if (hidden.size() != 2) throw ValidationError("model file: expected two hidden widths");
        m.spec.hidden = {hidden[0], hidden[1]};
        m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        m.impute_means = j.at("impute_means").get<std::vector<double>>();
        m.input_mean = j.at("input_mean").get<std::vector<double>>();
        m.input_sd = j.at("input_sd").get<std::vector<double>>();
        m.dimension = j.at("dimension").get<std::string>();
        m.feature_set = j.at("feature_set").get<std::string>();
        m.split_hash = j.at("split_hash").get<std::uint64_t>();
        const auto& p = j.at("params");
        m.params.w1 = p.at("w1").get<std::vector<double>>();
        m.params.b1 = p.at("b1").get<std::vector<double>>();
        m.params.w2 = p.at("w2").get<std::vector<double>>();
        m.params.b2 = p.at("b2").get<std::vector<double>>();
        m.params.w3 = p.at("w3").get<std::vector<double>>();
        m.params.b3 = p.at("b3").get<std::vector<double>>();
        auto load_bn = [](const nlohmann::json& b, BatchNorm& bn) {
            bn.gamma = b.at("gamma").get<std::vector<double>>();
            bn.beta = b.at("beta").get<std::vector<double>>();
            bn.running_mean = b.at("running_mean").get<std::vector<double>>();
            bn.running_var = b.at("running_var").get<std::vector<double>>();
        };
        load_bn(p.at("bn1"), m.params.bn1);
        load_bn(p.at("bn2"), m.params.bn2);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("model file: ") + e.what());
    }
    return m;
}

inline void TrainedModel::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write model file: " + path.string());
    out << to_json().dump(2) << '\n';
}

inline TrainedModel TrainedModel::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open model file: " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(path.string() + ": " + e.what());
    }
    return from_json(j);
}

}  // namespace ga::model
