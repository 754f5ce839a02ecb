#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "unlearnkit/errors.hpp"
#include "unlearnkit/rng.hpp"
#include "unlearnkit/unlearn.hpp"

using namespace unlearnkit;
using namespace testing;

namespace {

struct Split {
    ForgetManifest manifest;
    Dataset forget, remain;
};

Split split_blobs(std::size_t k, ForgetMode mode, std::uint64_t seed) {
    Split s;
    s.manifest = select_forget_set(blob_data(), k, mode, seed);
    std::tie(s.forget, s.remain) = split_remaining(blob_data(), s.manifest);
    return s;
}

// Forget set of the first n rows of one class. Gradient ascent on a mixed-class set can settle
// on a collapsed model that still classifies one class correctly; a single class avoids that.
Split class_split(int label, std::size_t n) {
    Split s;
    for (std::size_t i = 0; i < blob_data().size() && s.manifest.size() < n; ++i)
        if (blob_data().labels[i] == label) s.manifest.ids.push_back(blob_data().ids[i]);
    std::tie(s.forget, s.remain) = split_remaining(blob_data(), s.manifest);
    return s;
}

UnlearnConfig fast_config(Method m) {
    UnlearnConfig cfg;
    cfg.method = m;
    cfg.lr = 0.01;
    cfg.max_epochs = 60;
    cfg.n_adv = 4;
    cfg.attack.iterations = 20;
    cfg.attack.clamp_pixels = false;
    return cfg;
}

Dataset random_rows(const Dataset& ds, std::size_t n, Rng& rng) {
    std::vector<std::size_t> pos(n);
    for (auto& p : pos) p = std::uniform_int_distribution<std::size_t>(0, ds.size() - 1)(rng);
    return subset(ds, pos);
}

ClassifierState nudged(const ClassifierState& s, double scale, std::uint64_t seed) {
    auto out = s;
    Rng rng(seed);
    std::normal_distribution<double> n01;
    out.params.for_each([&](std::size_t, ParamArray<float>& a) {
        for (auto& v : a.values) v += static_cast<float>(scale * n01(rng));
    });
    return out;
}

bool same_trace(const std::vector<EpochRecord>& a, const std::vector<EpochRecord>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i].loss.unlearn != b[i].loss.unlearn || a[i].forget_accuracy != b[i].forget_accuracy) return false;
    return true;
}

}  // namespace

TEST_SUITE("unlearn") {

TEST_CASE("losses: uniform logits give -ln C and ln C") {
    const auto s = zero_state(make_mlp2(8, 5));
    const auto sp = split_blobs(6, ForgetMode::relabel, 0);
    const auto t = forget_targets(sp.forget, sp.manifest);
    CHECK(std::abs(loss_ms(s, sp.forget) + std::log(5.0)) < 1e-12);
    CHECK(std::abs(loss_cor(s, sp.forget, t) - std::log(5.0)) < 1e-12);
}

TEST_CASE("losses: loss_ms is exactly the negated mean CE") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const auto batch = random_rows(blob_data(), 8, rng);
        const double ce = mean_cross_entropy(blob_model(), batch, batch.labels);
        CHECK(loss_ms(blob_model(), batch) + ce == 0.0);
        // The library evaluates logits in float32, the oracle in double.
        CHECK(near_rel(ce, mean_ce_oracle(blob_model(), batch, batch.labels), 1e-4, 1e-6));
    }
}

TEST_CASE("losses: loss_cor matches the CE oracle and rejects y* = y") {
    const auto sp = split_blobs(8, ForgetMode::relabel, 2);
    const auto t = forget_targets(sp.forget, sp.manifest);
    CHECK(near_rel(loss_cor(blob_model(), sp.forget, t), mean_ce_oracle(blob_model(), sp.forget, t), 1e-6));
    CHECK(loss_unlearn(blob_model(), sp.forget, ForgetMode::relabel, t) == loss_cor(blob_model(), sp.forget, t));
    CHECK_THROWS_AS(loss_cor(blob_model(), sp.forget, sp.forget.labels), ManifestError);
}

TEST_CASE("losses: loss_adv reduces to the unlearning loss") {
    Rng rng(3);
    const auto sp = split_blobs(8, ForgetMode::misclassify, 3);
    const auto adv = random_rows(blob_data(), 16, rng);
    const auto t = forget_targets(sp.forget, sp.manifest);
    const double ul = loss_ms(blob_model(), sp.forget);
    CHECK(std::abs(loss_adv(blob_model(), sp.forget, ForgetMode::misclassify, t, adv, 0.0).total() - ul) < 1e-9);
    Dataset empty = subset(adv, std::vector<std::size_t>{});
    CHECK(loss_adv(blob_model(), sp.forget, ForgetMode::misclassify, t, empty, 1.0).total() == ul);
    // lambda = 1: the adversarial term is the plain mean CE toward the attack labels.
    const auto terms = loss_adv(blob_model(), sp.forget, ForgetMode::misclassify, t, adv, 1.0);
    CHECK(near_rel(terms.adversarial, mean_ce_oracle(blob_model(), adv, adv.labels), 1e-6));
    CHECK(terms.importance == 0.0);
}

TEST_CASE("losses: loss_adv_imp reduces to loss_adv") {
    const auto sp = split_blobs(8, ForgetMode::misclassify, 4);
    Rng rng(4);
    const auto adv = random_rows(blob_data(), 16, rng);
    const auto t = forget_targets(sp.forget, sp.manifest);
    const auto omega = invert(normalize_layerwise(mas_importance(blob_model(), sp.forget)));
    const auto base = loss_adv(blob_model(), sp.forget, ForgetMode::misclassify, t, adv, 1.0).total();
    CHECK(std::abs(loss_adv_imp(blob_model(), blob_model(), omega, sp.forget, ForgetMode::misclassify, t, adv, 1.0, 3.0)
                       .total() - base) < 1e-9);

    const auto moved = nudged(blob_model(), 0.05, 9);
    const auto moved_adv = loss_adv(moved, sp.forget, ForgetMode::misclassify, t, adv, 1.0).total();
    auto zero = omega;
    zero.values = omega.values.zeros_like();
    CHECK(std::abs(loss_adv_imp(moved, blob_model(), zero, sp.forget, ForgetMode::misclassify, t, adv, 1.0, 3.0).total() -
                   moved_adv) < 1e-9);
    const auto full = loss_adv_imp(moved, blob_model(), omega, sp.forget, ForgetMode::misclassify, t, adv, 1.0, 3.0);
    CHECK(near_rel(full.total(), moved_adv + 3.0 * importance_penalty(moved, blob_model(), omega), 1e-9));
}

TEST_CASE("run_unlearning: an already forgotten set takes zero epochs") {
    const auto s = zero_state(make_mlp2(8, 5));  // predicts class 0 everywhere
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < blob_data().size() && pos.size() < 6; ++i)
        if (blob_data().labels[i] != 0) pos.push_back(i);
    ForgetManifest m;
    for (auto p : pos) m.ids.push_back(blob_data().ids[p]);
    const auto f = split_remaining(blob_data(), m).first;
    const auto r = run_unlearning(s, f, m, fast_config(Method::neggrad));
    CHECK(r.epochs_run == 0);
    CHECK(r.stop_reason == StopReason::reached_target);
    CHECK(r.trace.empty());
    CHECK(same_params(r.state.params, s.params));
}

TEST_CASE("run_unlearning: lr = 0 runs to max_epochs without moving") {
    const auto sp = split_blobs(8, ForgetMode::misclassify, 5);
    auto cfg = fast_config(Method::adv);
    cfg.lr = 0.0;
    cfg.max_epochs = 1;
    const auto r = run_unlearning(blob_model(), sp.forget, sp.manifest, cfg);
    CHECK(r.stop_reason == StopReason::max_epochs);
    CHECK(r.epochs_run == 1);
    CHECK(same_params(r.state.params, blob_model().params));
}

TEST_CASE("run_unlearning: each method forgets and stops as soon as the target is met") {
    const auto mixed = split_blobs(8, ForgetMode::misclassify, 6);
    const auto single = class_split(3, 8);
    const auto before = blob_model();
    for (Method m : {Method::neggrad, Method::adv, Method::adv_imp}) {
        const auto& sp = m == Method::neggrad ? single : mixed;
        const auto r = run_unlearning(blob_model(), sp.forget, sp.manifest, fast_config(m));
        CHECK(r.stop_reason == StopReason::reached_target);
        CHECK(accuracy(r.state, sp.forget) == 0.0);
        REQUIRE(!r.trace.empty());
        CHECK(static_cast<int>(r.trace.size()) == r.epochs_run);
        for (std::size_t e = 0; e + 1 < r.trace.size(); ++e) CHECK(r.trace[e].forget_accuracy > 0.0);
    }
    CHECK(same_params(blob_model().params, before.params));
}

TEST_CASE("run_unlearning: relabel mode reaches 100% on the new labels") {
    const auto sp = split_blobs(8, ForgetMode::relabel, 7);
    for (Method m : {Method::correct, Method::adv}) {
        const auto r = run_unlearning(blob_model(), sp.forget, sp.manifest, fast_config(m));
        CHECK(r.stop_reason == StopReason::reached_target);
        CHECK(accuracy(r.state, sp.forget, forget_targets(sp.forget, sp.manifest)) == 1.0);
    }
    CHECK_THROWS_AS(run_unlearning(blob_model(), sp.forget, sp.manifest, fast_config(Method::neggrad)),
                    ArgumentError);
}

TEST_CASE("run_unlearning: adv with an empty adversarial set is NegGrad") {
    const auto sp = split_blobs(8, ForgetMode::misclassify, 8);
    AdversarialSet empty;
    empty.shape = sp.forget.shape;
    empty.num_classes = 5;
    const auto adv = run_unlearning(blob_model(), sp.forget, sp.manifest, fast_config(Method::adv), {&empty, nullptr});
    const auto neg = run_unlearning(blob_model(), sp.forget, sp.manifest, fast_config(Method::neggrad));
    CHECK(same_trace(adv.trace, neg.trace));
    CHECK(same_params(adv.state.params, neg.state.params));
}

TEST_CASE("run_unlearning: same config gives identical results") {
    const auto sp = split_blobs(8, ForgetMode::misclassify, 9);
    const auto a = run_unlearning(blob_model(), sp.forget, sp.manifest, fast_config(Method::adv_imp));
    const auto b = run_unlearning(blob_model(), sp.forget, sp.manifest, fast_config(Method::adv_imp));
    CHECK(same_trace(a.trace, b.trace));
    CHECK(same_params(a.state.params, b.state.params));
}

TEST_CASE("run_unlearning: divergence raises NumericError with the epoch") {
    const auto sp = split_blobs(8, ForgetMode::misclassify, 10);
    auto cfg = fast_config(Method::neggrad);
    cfg.lr = 1e30;
    try {
        run_unlearning(blob_model(), sp.forget, sp.manifest, cfg);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(e.epoch().has_value());
    }
}

TEST_CASE("run_oracle: empty D_r follows the NegGrad trajectory") {
    const auto sp = class_split(1, 8);
    Dataset none = subset(sp.remain, std::vector<std::size_t>{});
    const auto orc = run_oracle(blob_model(), sp.forget, none, sp.manifest, fast_config(Method::oracle));
    const auto neg = run_unlearning(blob_model(), sp.forget, sp.manifest, fast_config(Method::neggrad));
    REQUIRE(neg.stop_reason == StopReason::reached_target);
    CHECK(same_trace(orc.trace, neg.trace));
    CHECK(orc.selected_epoch == neg.epochs_run);
    CHECK(same_params(orc.state.params, neg.state.params));
}

TEST_CASE("run_oracle: the selected checkpoint is the best recorded epoch") {
    const auto sp = split_blobs(8, ForgetMode::misclassify, 12);
    auto cfg = fast_config(Method::oracle);
    cfg.max_epochs = 8;
    const auto r = run_oracle(blob_model(), sp.forget, sp.remain, sp.manifest, cfg);
    // Replay the selection rule over the trace plus the initial state.
    double best_f = r.initial_forget_accuracy, best_r = accuracy(blob_model(), sp.remain);
    int best_e = 0;
    for (const auto& rec : r.trace) {
        REQUIRE(rec.remain_accuracy.has_value());
        const double f = rec.forget_accuracy, ra = *rec.remain_accuracy;
        if (f < best_f || (f == best_f && ra > best_r)) {
            best_f = f;
            best_r = ra;
            best_e = rec.epoch;
        }
    }
    CHECK(r.selected_epoch == best_e);
    CHECK(r.final_forget_accuracy == best_f);
    CHECK(accuracy(r.state, sp.forget) == best_f);

    cfg.lr = 0.0;
    const auto still = run_oracle(blob_model(), sp.forget, sp.remain, sp.manifest, cfg);
    CHECK(still.selected_epoch == 0);
    CHECK(same_params(still.state.params, blob_model().params));
}

TEST_CASE("run_rawp: gamma = 0 leaves the model unchanged") {
    const auto sp = split_blobs(8, ForgetMode::misclassify, 13);
    auto cfg = fast_config(Method::rawp);
    cfg.gamma = 0.0;
    cfg.max_epochs = 3;
    const auto r = run_rawp(blob_model(), sp.forget, cfg);
    CHECK(r.epochs_run == 3);
    CHECK(same_params(r.state.params, blob_model().params));
}

TEST_CASE("run_rawp: each layer moves by gamma times its norm") {
    const auto sp = split_blobs(8, ForgetMode::misclassify, 14);
    auto cfg = fast_config(Method::rawp);
    cfg.gamma = 0.01;
    cfg.awp_eps = 1e-12;
    cfg.max_epochs = 1;
    cfg.forget_batch = sp.forget.size();  // one step
    const auto r = run_rawp(blob_model(), sp.forget, cfg);
    REQUIRE(r.epochs_run == 1);
    const auto& before = blob_model().params;
    for (std::size_t l = 0; l < before.layers.size(); ++l) {
        double norm = 0.0, moved = 0.0;
        for (std::size_t j = 0; j < before.layers[l].size(); ++j) {
            const auto& a = before.layers[l][j].values;
            const auto& b = r.state.params.layers[l][j].values;
            for (std::size_t i = 0; i < a.size(); ++i) {
                norm += static_cast<double>(a[i]) * a[i];
                moved += std::pow(static_cast<double>(b[i]) - a[i], 2);
            }
        }
        if (moved == 0.0) continue;  // no gradient reached this layer
        CHECK(near_rel(std::sqrt(moved), 0.01 * std::sqrt(norm), 1e-3));
    }
}

TEST_CASE("run_continual: fragments partition the manifest in order") {
    const auto m = select_forget_set(blob_data(), 32, ForgetMode::relabel, 0);
    const auto frags = fragment_manifest(m, 8);
    REQUIRE(frags.size() == 4);
    std::vector<InstanceId> joined;
    for (const auto& f : frags) {
        CHECK(f.size() == 8);
        joined.insert(joined.end(), f.ids.begin(), f.ids.end());
        for (auto id : f.ids) CHECK(f.relabel_targets.at(id) == m.relabel_targets.at(id));
    }
    CHECK(joined == m.ids);
    CHECK(fragment_manifest(m, 10).back().size() == 2);
    CHECK_THROWS_AS(fragment_manifest(m, 0), ArgumentError);
}

TEST_CASE("run_continual: one fragment equals a single run") {
    const auto sp = split_blobs(8, ForgetMode::misclassify, 15);
    const auto cfg = fast_config(Method::adv);
    const auto cont = run_continual(blob_model(), blob_data(), sp.manifest, 8, cfg);
    REQUIRE(cont.size() == 1);
    const auto single = run_unlearning(blob_model(), sp.forget, sp.manifest, cfg);
    CHECK(same_trace(cont[0].result.trace, single.trace));
    CHECK(same_params(cont[0].result.state.params, single.state.params));
}

TEST_CASE("run_continual: each fragment starts from the previous state") {
    const auto m = select_forget_set(blob_data(), 16, ForgetMode::misclassify, 16);
    auto cfg = fast_config(Method::adv);
    const auto cont = run_continual(blob_model(), blob_data(), m, 8, cfg);
    REQUIRE(cont.size() == 2);
    auto next = cfg;
    next.seed = cfg.seed + 1;
    next.attack.seed = cfg.attack.seed + 1;
    const auto f1 = split_remaining(blob_data(), cont[1].manifest).first;
    const auto again = run_unlearning(cont[0].result.state, f1, cont[1].manifest, next);
    CHECK(same_params(again.state.params, cont[1].result.state.params));
    CHECK(accuracy(cont[1].result.state, f1) == 0.0);
}

TEST_CASE("config: JSON round trip and validation") {
    UnlearnConfig c;
    c.method = Method::rawp;
    c.lambda_adv = 0.5;
    c.gamma = 0.1;
    c.attack.epsilon = 0.3;
    c.seed = 77;
    const auto back = unlearn_config_from_json(unlearn_config_to_json(c));
    CHECK(back.method == Method::rawp);
    CHECK(back.adv_weight() == 0.5);
    CHECK(back.imp_weight() == 1.0);
    CHECK(back.gamma == 0.1);
    CHECK(back.attack.epsilon == 0.3);
    CHECK(back.seed == 77);
    UnlearnConfig bad;
    bad.max_epochs = 0;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = {};
    bad.lr = -1.0;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = {};
    bad.forget_batch = 0;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    CHECK_THROWS_AS(method_from_string("retrain"), ArgumentError);
}

}  // TEST_SUITE
