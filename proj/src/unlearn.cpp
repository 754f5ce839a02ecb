#include "unlearnkit/unlearn.hpp"

#include <algorithm>
#include <cmath>
#include <array>
#include <memory>
#include <numeric>

#include "unlearnkit/errors.hpp"
#include "unlearnkit/rng.hpp"

namespace unlearnkit {

std::string to_string(Method m) {
    switch (m) {
        case Method::neggrad: return "neggrad";
        case Method::correct: return "correct";
        case Method::adv: return "adv";
        case Method::adv_imp: return "adv_imp";
        case Method::oracle: return "oracle";
        case Method::rawp: return "rawp";
    }
    return "adv";
}

Method method_from_string(const std::string& s) {
    for (auto m : {Method::neggrad, Method::correct, Method::adv, Method::adv_imp, Method::oracle, Method::rawp})
        if (to_string(m) == s) return m;
    throw ArgumentError("unknown method '" + s + "'");
}

std::string to_string(StopReason r) { return r == StopReason::reached_target ? "reached_target" : "max_epochs"; }

void UnlearnConfig::validate() const {
    // lr = 0 and gamma = 0 are accepted: they give null updates.
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ArgumentError("lr must be >= 0");
    if (!(momentum >= 0.0) || !(weight_decay >= 0.0)) throw ArgumentError("momentum and weight decay must be >= 0");
    if (max_epochs < 1) throw ArgumentError("max_epochs must be >= 1");
    if (!(lambda >= 0.0) || !(adv_weight() >= 0.0) || !(imp_weight() >= 0.0))
        throw ArgumentError("lambda must be >= 0");
    if (forget_batch < 1 || adv_batch < 1 || remain_batch < 1) throw ArgumentError("batch sizes must be >= 1");
    if (n_adv < 1) throw ArgumentError("n_adv must be >= 1");
    if (!(gamma >= 0.0) || !(awp_eps >= 0.0)) throw ArgumentError("gamma and awp_eps must be >= 0");
    attack.validate();
}

nlohmann::json unlearn_config_to_json(const UnlearnConfig& c) {
    nlohmann::json j{{"method", to_string(c.method)},
                     {"lr", c.lr},
                     {"momentum", c.momentum},
                     {"weight_decay", c.weight_decay},
                     {"lambda", c.lambda},
                     {"lambda_adv", nullptr},
                     {"lambda_imp", nullptr},
                     {"max_epochs", c.max_epochs},
                     {"forget_batch", c.forget_batch},
                     {"adv_batch", c.adv_batch},
                     {"remain_batch", c.remain_batch},
                     {"n_adv", c.n_adv},
                     {"attack", attack_config_to_json(c.attack)},
                     {"target_policy", to_string(c.target_policy)},
                     {"importance_on", to_string(c.importance_on)},
                     {"gamma", c.gamma},
                     {"awp_eps", c.awp_eps},
                     {"seed", c.seed}};
    if (c.lambda_adv) j["lambda_adv"] = *c.lambda_adv;
    if (c.lambda_imp) j["lambda_imp"] = *c.lambda_imp;
    return j;
}

UnlearnConfig unlearn_config_from_json(const nlohmann::json& j) {
    UnlearnConfig c;
    try {
        if (j.contains("method")) c.method = method_from_string(j.at("method").get<std::string>());
        c.lr = j.value("lr", c.lr);
        c.momentum = j.value("momentum", c.momentum);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.lambda = j.value("lambda", c.lambda);
        if (j.contains("lambda_adv") && !j.at("lambda_adv").is_null()) c.lambda_adv = j.at("lambda_adv").get<double>();
        if (j.contains("lambda_imp") && !j.at("lambda_imp").is_null()) c.lambda_imp = j.at("lambda_imp").get<double>();
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.forget_batch = j.value("forget_batch", c.forget_batch);
        c.adv_batch = j.value("adv_batch", c.adv_batch);
        c.remain_batch = j.value("remain_batch", c.remain_batch);
        c.n_adv = j.value("n_adv", c.n_adv);
        if (j.contains("attack")) c.attack = attack_config_from_json(j.at("attack"));
        if (j.contains("target_policy"))
            c.target_policy = target_policy_from_string(j.at("target_policy").get<std::string>());
        if (j.contains("importance_on"))
            c.importance_on = importance_on_from_string(j.at("importance_on").get<std::string>());
        c.gamma = j.value("gamma", c.gamma);
        c.awp_eps = j.value("awp_eps", c.awp_eps);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw ArgumentError(std::string("invalid unlearning config: ") + e.what());
    }
    return c;
}

nlohmann::json epoch_record_to_json(const EpochRecord& r) {
    nlohmann::json j{{"epoch", r.epoch},
                     {"loss", r.loss.total()},
                     {"loss_unlearn", r.loss.unlearn},
                     {"loss_adversarial", r.loss.adversarial},
                     {"loss_importance", r.loss.importance},
                     {"forget_accuracy", r.forget_accuracy}};
    if (r.remain_accuracy) j["remain_accuracy"] = *r.remain_accuracy;
    if (r.test_accuracy) j["test_accuracy"] = *r.test_accuracy;
    return j;
}

nlohmann::json unlearn_result_summary(const UnlearnResult& r) {
    nlohmann::json j{{"epochs_run", r.epochs_run},
                     {"stop_reason", to_string(r.stop_reason)},
                     {"initial_forget_accuracy", r.initial_forget_accuracy},
                     {"final_forget_accuracy", r.final_forget_accuracy}};
    if (r.selected_epoch >= 0) j["selected_epoch"] = r.selected_epoch;
    return j;
}

// ---- Objectives ------------------------------------------------------------------------------

namespace {

// Cross-entropy of one logit row, log-sum-exp stabilised. Writes softmax into `prob` when given.
double row_cross_entropy(const double* z, std::size_t classes, int label, double* prob = nullptr) {
    const double peak = *std::max_element(z, z + classes);
    double sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[c] - peak);
    if (prob)
        for (std::size_t c = 0; c < classes; ++c) prob[c] = std::exp(z[c] - peak) / sum;
    return std::log(sum) + peak - z[label];
}

void check_labels(std::span<const int> labels, std::size_t classes) {
    for (int y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= classes) throw ArgumentError("label outside [0, num_classes)");
}

}  // namespace

double mean_cross_entropy(const ClassifierState& s, const Dataset& batch, std::span<const int> labels) {
    if (batch.empty()) throw ArgumentError("cross-entropy of an empty batch is undefined");
    if (labels.size() != batch.size()) throw ContractError("one label per row expected");
    check_labels(labels, s.num_classes());
    const Eigen::MatrixXd logits = forward(s, batch_matrix(batch)).cast<double>();
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> z = logits;
    double total = 0.0;
    for (Eigen::Index i = 0; i < z.rows(); ++i)
        total += row_cross_entropy(z.data() + i * z.cols(), s.num_classes(), labels[static_cast<std::size_t>(i)]);
    const double value = total / static_cast<double>(batch.size());
    if (!std::isfinite(value)) throw NumericError("cross-entropy is not finite");
    return value;
}

double loss_ms(const ClassifierState& s, const Dataset& forget_batch) {
    return -mean_cross_entropy(s, forget_batch, forget_batch.labels);
}

double loss_cor(const ClassifierState& s, const Dataset& forget_batch, std::span<const int> targets) {
    if (targets.size() != forget_batch.size()) throw ContractError("one relabel target per row expected");
    for (std::size_t i = 0; i < targets.size(); ++i)
        if (targets[i] == forget_batch.labels[i])
            throw ManifestError("relabel target equals the original label of id " +
                                std::to_string(forget_batch.ids[i]));
    return mean_cross_entropy(s, forget_batch, targets);
}

double loss_unlearn(const ClassifierState& s, const Dataset& forget_batch, ForgetMode mode,
                    std::span<const int> targets) {
    return mode == ForgetMode::misclassify ? loss_ms(s, forget_batch) : loss_cor(s, forget_batch, targets);
}

LossTerms loss_adv(const ClassifierState& s, const Dataset& forget_batch, ForgetMode mode,
                   std::span<const int> targets, const Dataset& adv_batch, double lambda) {
    LossTerms t;
    t.unlearn = loss_unlearn(s, forget_batch, mode, targets);
    if (!adv_batch.empty() && lambda != 0.0) t.adversarial = lambda * mean_cross_entropy(s, adv_batch, adv_batch.labels);
    return t;
}

LossTerms loss_adv_imp(const ClassifierState& s, const ClassifierState& ref, const ImportanceMap& omega_bar,
                       const Dataset& forget_batch, ForgetMode mode, std::span<const int> targets,
                       const Dataset& adv_batch, double lambda_adv, double lambda_imp) {
    LossTerms t = loss_adv(s, forget_batch, mode, targets, adv_batch, lambda_adv);
    if (lambda_imp != 0.0) t.importance = lambda_imp * importance_penalty(s, ref, omega_bar);
    return t;
}

// ---- Training machinery ----------------------------------------------------------------------

namespace {

enum Term : int { kUnlearn = 0, kAdversarial = 1, kRemain = 2 };

// Rows of one optimisation step with their CE target, weight and objective term.
struct StepRows {
    std::vector<const float*> rows;
    std::vector<int> labels;
    std::vector<double> weights;
    std::vector<int> terms;

    void add(std::span<const float> x, int label, double weight, Term term) {
        rows.push_back(x.data());
        labels.push_back(label);
        weights.push_back(weight);
        terms.push_back(term);
    }
    std::size_t size() const { return rows.size(); }
};

// Weighted CE head that also reports the per-term sums.
LossHead term_head(const StepRows& step, std::shared_ptr<std::array<double, 3>> sums) {
    return [&step, sums](const Eigen::MatrixXd& logits, Eigen::MatrixXd& dlogits) {
        const auto classes = static_cast<std::size_t>(logits.cols());
        std::vector<double> z(classes), p(classes);
        dlogits.setZero(logits.rows(), logits.cols());
        sums->fill(0.0);
        double total = 0.0;
        for (Eigen::Index i = 0; i < logits.rows(); ++i) {
            const auto r = static_cast<std::size_t>(i);
            for (std::size_t c = 0; c < classes; ++c) z[c] = logits(i, static_cast<Eigen::Index>(c));
            const double ce = row_cross_entropy(z.data(), classes, step.labels[r], p.data());
            const double w = step.weights[r];
            total += w * ce;
            (*sums)[static_cast<std::size_t>(step.terms[r])] += w * ce;
            for (std::size_t c = 0; c < classes; ++c)
                dlogits(i, static_cast<Eigen::Index>(c)) =
                    w * (p[c] - (static_cast<int>(c) == step.labels[r] ? 1.0 : 0.0));
        }
        return total;
    };
}

struct StepOutcome {
    LossTerms loss;
    GradientMap grad;
};

// Value and parameter gradient of the stacked step objective plus the optional importance penalty.
StepOutcome step_gradient(const ClassifierState& s, const StepRows& step, const ClassifierState* ref,
                          const ImportanceMap* omega_bar, double lambda_imp) {
    const auto d = static_cast<Eigen::Index>(s.arch.input_dim());
    Matrix<float> x(static_cast<Eigen::Index>(step.size()), d);
    for (std::size_t r = 0; r < step.size(); ++r) std::copy(step.rows[r], step.rows[r] + d, x.data() + r * d);
    auto sums = std::make_shared<std::array<double, 3>>();
    auto vg = value_and_grad_params<float>(s.arch, s.params, x, term_head(step, sums));
    StepOutcome out;
    out.loss.unlearn = (*sums)[kUnlearn] + (*sums)[kRemain];
    out.loss.adversarial = (*sums)[kAdversarial];
    if (omega_bar && lambda_imp != 0.0) {
        out.loss.importance = lambda_imp * importance_penalty(s, *ref, *omega_bar);
        const auto pg = importance_penalty_grad(s, *ref, *omega_bar);
        for (std::size_t l = 0; l < vg.grad.layers.size(); ++l)
            for (std::size_t j = 0; j < vg.grad.layers[l].size(); ++j) {
                auto& g = vg.grad.layers[l][j].values;
                const auto& h = pg.layers[l][j].values;
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] = static_cast<float>(static_cast<double>(g[i]) + lambda_imp * h[i]);
            }
    }
    if (!vg.grad.all_finite()) throw NumericError("unlearning gradient is not finite");
    out.grad = std::move(vg.grad);
    return out;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

// Endless walk over a fixed permutation.
class Cycle {
public:
    Cycle(std::size_t n, std::uint64_t seed) : order_(shuffled(n, seed)) {}
    std::size_t next() {
        const auto v = order_[pos_];
        pos_ = (pos_ + 1) % order_.size();
        return v;
    }
    bool empty() const { return order_.empty(); }
    std::size_t size() const { return order_.size(); }

private:
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

bool at_target(double forget_accuracy, ForgetMode mode) {
    return mode == ForgetMode::misclassify ? forget_accuracy == 0.0 : forget_accuracy == 1.0;
}

double target_distance(double forget_accuracy, ForgetMode mode) {
    return mode == ForgetMode::misclassify ? forget_accuracy : 1.0 - forget_accuracy;
}

void check_forget_matches(const Dataset& forget, const ForgetManifest& manifest) {
    if (forget.ids != manifest.ids) throw ManifestError("forget split does not hold the manifest ids in order");
}

void fill_monitor(EpochRecord& rec, const ClassifierState& s, const Monitor& m) {
    if (m.remain && !m.remain->empty()) rec.remain_accuracy = accuracy(s, *m.remain);
    if (m.test && !m.test->empty()) rec.test_accuracy = accuracy(s, *m.test);
}

void require_finite(const ClassifierState& s, int epoch) {
    if (!s.params.all_finite()) throw NumericError("parameters became non-finite", epoch);
}

void check_state(const ClassifierState& s0, const Dataset& forget) {
    s0.validate();
    if (forget.empty()) throw ArgumentError("the forget set is empty");
    if (forget.dim() != s0.arch.input_dim()) throw ContractError("forget set does not match the model input shape");
}

}  // namespace

// ---- Loops -----------------------------------------------------------------------------------

UnlearnResult run_unlearning(const ClassifierState& s0, const Dataset& forget, const ForgetManifest& manifest,
                             const UnlearnConfig& cfg, Precomputed pre, Monitor monitor) {
    cfg.validate();
    check_state(s0, forget);
    check_forget_matches(forget, manifest);
    switch (cfg.method) {
        case Method::neggrad:
            if (manifest.mode != ForgetMode::misclassify) throw ArgumentError("neggrad needs a misclassify manifest");
            break;
        case Method::correct:
            if (manifest.mode != ForgetMode::relabel) throw ArgumentError("correct needs a relabel manifest");
            break;
        case Method::adv:
        case Method::adv_imp: break;
        default: throw ArgumentError("run_unlearning handles neggrad, correct, adv and adv_imp");
    }
    const ForgetMode mode = manifest.mode;
    const auto targets = forget_targets(forget, manifest);

    UnlearnResult result{s0, 0, StopReason::max_epochs, 0.0, 0.0, -1, {}};
    result.initial_forget_accuracy = accuracy(s0, forget, targets);
    result.final_forget_accuracy = result.initial_forget_accuracy;
    if (at_target(result.initial_forget_accuracy, mode)) {
        result.stop_reason = StopReason::reached_target;
        return result;
    }

    const bool use_adv = cfg.method == Method::adv || cfg.method == Method::adv_imp;
    Dataset adv_data;
    if (use_adv) {
        if (pre.adversarial)
            adv_data = adversarial_dataset(*pre.adversarial);
        else
            adv_data = adversarial_dataset(generate_adversarial_set(s0, forget, cfg.n_adv, cfg.attack, cfg.target_policy));
        if (!adv_data.empty() && adv_data.dim() != forget.dim())
            throw ContractError("adversarial set does not match the forget set shape");
    }
    std::optional<ImportanceMap> omega_bar;
    if (cfg.method == Method::adv_imp) {
        omega_bar = pre.omega_bar ? *pre.omega_bar
                                  : invert(normalize_layerwise(mas_importance(s0, forget, cfg.importance_on)));
        if (!s0.params.congruent(omega_bar->values)) throw ContractError("importance map does not match the model");
    }

    const ClassifierState& ref = s0;
    auto& s = result.state;
    SgdMomentum opt(cfg.lr, cfg.momentum, cfg.weight_decay);
    Cycle adv_cycle(adv_data.size(), derive_seed(cfg.seed, {stream::adversarial_order}));
    const double unlearn_sign = mode == ForgetMode::misclassify ? -1.0 : 1.0;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        try {
            const auto order = shuffled(forget.size(), derive_seed(cfg.seed, {stream::shuffle, static_cast<std::uint64_t>(epoch)}));
            std::size_t steps = 0;
            for (std::size_t start = 0; start < order.size(); start += cfg.forget_batch) {
                const auto end = std::min(order.size(), start + cfg.forget_batch);
                StepRows step;
                const double wf = unlearn_sign / static_cast<double>(end - start);
                for (std::size_t i = start; i < end; ++i) step.add(forget.row(order[i]), targets[order[i]], wf, kUnlearn);
                if (!adv_cycle.empty() && cfg.adv_weight() != 0.0) {
                    const auto n = std::min(cfg.adv_batch, adv_cycle.size());
                    const double wa = cfg.adv_weight() / static_cast<double>(n);
                    for (std::size_t r = 0; r < n; ++r) {
                        const auto p = adv_cycle.next();
                        step.add(adv_data.row(p), adv_data.labels[p], wa, kAdversarial);
                    }
                }
                auto out = step_gradient(s, step, &ref, omega_bar ? &*omega_bar : nullptr, cfg.imp_weight());
                opt.step(s.params, out.grad);
                rec.loss.unlearn += out.loss.unlearn;
                rec.loss.adversarial += out.loss.adversarial;
                rec.loss.importance += out.loss.importance;
                ++steps;
            }
            rec.loss.unlearn /= static_cast<double>(steps);
            rec.loss.adversarial /= static_cast<double>(steps);
            rec.loss.importance /= static_cast<double>(steps);
            require_finite(s, epoch);
        } catch (const NumericError& e) {
            if (e.epoch()) throw;
            throw NumericError(e.what(), epoch);
        }
        rec.forget_accuracy = accuracy(s, forget, targets);
        fill_monitor(rec, s, monitor);
        result.trace.push_back(rec);
        result.epochs_run = epoch;
        result.final_forget_accuracy = rec.forget_accuracy;
        if (at_target(rec.forget_accuracy, mode)) {
            result.stop_reason = StopReason::reached_target;
            break;
        }
    }
    return result;
}

UnlearnResult run_oracle(const ClassifierState& s0, const Dataset& forget, const Dataset& remain,
                         const ForgetManifest& manifest, const UnlearnConfig& cfg, Monitor monitor) {
    cfg.validate();
    check_state(s0, forget);
    check_forget_matches(forget, manifest);
    if (!remain.empty() && remain.dim() != forget.dim()) throw ContractError("remain set does not match the forget set");
    const ForgetMode mode = manifest.mode;
    const auto targets = forget_targets(forget, manifest);

    UnlearnResult result{s0, 0, StopReason::max_epochs, 0.0, 0.0, 0, {}};
    result.initial_forget_accuracy = accuracy(s0, forget, targets);

    struct Candidate {
        double distance, remain_acc;
        int epoch;
    };
    auto better = [](const Candidate& a, const Candidate& b) {
        if (a.distance != b.distance) return a.distance < b.distance;
        if (a.remain_acc != b.remain_acc) return a.remain_acc > b.remain_acc;
        return a.epoch < b.epoch;
    };
    const double remain0 = remain.empty() ? 0.0 : accuracy(s0, remain);
    Candidate best{target_distance(result.initial_forget_accuracy, mode), remain0, 0};
    ClassifierState best_state = s0;
    auto done = [&](const Candidate& c) { return c.distance == 0.0 && (remain.empty() || c.remain_acc == 1.0); };

    if (!done(best)) {
        ClassifierState s = s0;
        SgdMomentum opt(cfg.lr, cfg.momentum, cfg.weight_decay);
        const double unlearn_sign = mode == ForgetMode::misclassify ? -1.0 : 1.0;
        Cycle forget_cycle(forget.size(), derive_seed(cfg.seed, {stream::shuffle}));
        for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
            EpochRecord rec;
            rec.epoch = epoch;
            try {
                std::size_t steps = 0;
                auto run_step = [&](StepRows& step) {
                    auto out = step_gradient(s, step, nullptr, nullptr, 0.0);
                    opt.step(s.params, out.grad);
                    rec.loss.unlearn += out.loss.unlearn;
                    ++steps;
                };
                if (remain.empty()) {
                    // One pass over D_f in the same batches as NegGrad.
                    const auto order = shuffled(forget.size(), derive_seed(cfg.seed, {stream::shuffle,
                                                                                      static_cast<std::uint64_t>(epoch)}));
                    for (std::size_t start = 0; start < order.size(); start += cfg.forget_batch) {
                        const auto end = std::min(order.size(), start + cfg.forget_batch);
                        StepRows step;
                        const double wf = unlearn_sign / static_cast<double>(end - start);
                        for (std::size_t i = start; i < end; ++i)
                            step.add(forget.row(order[i]), targets[order[i]], wf, kUnlearn);
                        run_step(step);
                    }
                } else {
                    // One pass over D_r, each step paired with the next D_f batch of a fixed cycle.
                    const auto order = shuffled(remain.size(), derive_seed(cfg.seed, {stream::remain_order,
                                                                                      static_cast<std::uint64_t>(epoch)}));
                    const auto nf = std::min(cfg.forget_batch, forget.size());
                    const double wf = unlearn_sign / static_cast<double>(nf);
                    for (std::size_t start = 0; start < order.size(); start += cfg.remain_batch) {
                        StepRows step;
                        for (std::size_t i = 0; i < nf; ++i) {
                            const auto p = forget_cycle.next();
                            step.add(forget.row(p), targets[p], wf, kUnlearn);
                        }
                        const auto end = std::min(order.size(), start + cfg.remain_batch);
                        const double wr = 1.0 / static_cast<double>(end - start);
                        for (std::size_t i = start; i < end; ++i)
                            step.add(remain.row(order[i]), remain.labels[order[i]], wr, kRemain);
                        run_step(step);
                    }
                }
                rec.loss.unlearn /= static_cast<double>(steps);
                require_finite(s, epoch);
            } catch (const NumericError& e) {
                if (e.epoch()) throw;
                throw NumericError(e.what(), epoch);
            }
            rec.forget_accuracy = accuracy(s, forget, targets);
            if (!remain.empty()) rec.remain_accuracy = accuracy(s, remain);
            if (monitor.test && !monitor.test->empty()) rec.test_accuracy = accuracy(s, *monitor.test);
            result.trace.push_back(rec);
            result.epochs_run = epoch;
            const Candidate c{target_distance(rec.forget_accuracy, mode), rec.remain_accuracy.value_or(0.0), epoch};
            if (better(c, best)) {
                best = c;
                best_state = s;
            }
            if (done(c)) break;
        }
    }
    result.state = std::move(best_state);
    result.selected_epoch = best.epoch;
    result.final_forget_accuracy = mode == ForgetMode::misclassify ? best.distance : 1.0 - best.distance;
    result.stop_reason = best.distance == 0.0 ? StopReason::reached_target : StopReason::max_epochs;
    return result;
}

// Perturbs toward the proxy (AWP convention); stepping away from it would undo the misclassification
// step. The proxy starts from the current perturbed weights every iteration.
UnlearnResult run_rawp(const ClassifierState& s0, const Dataset& forget, const UnlearnConfig& cfg, Monitor monitor) {
    cfg.validate();
    check_state(s0, forget);
    UnlearnResult result{s0, 0, StopReason::max_epochs, 0.0, 0.0, -1, {}};
    result.initial_forget_accuracy = accuracy(s0, forget);
    result.final_forget_accuracy = result.initial_forget_accuracy;
    if (result.initial_forget_accuracy == 0.0) {
        result.stop_reason = StopReason::reached_target;
        return result;
    }
    auto& s = result.state;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        try {
            const auto order = shuffled(forget.size(), derive_seed(cfg.seed, {stream::shuffle, static_cast<std::uint64_t>(epoch)}));
            std::size_t steps = 0;
            for (std::size_t start = 0; start < order.size(); start += cfg.forget_batch) {
                const auto end = std::min(order.size(), start + cfg.forget_batch);
                std::span<const std::size_t> pos(order.data() + start, end - start);
                std::vector<int> labels;
                for (auto p : pos) labels.push_back(forget.labels[p]);
                // Proxy: one plain descent step on the misclassification loss from the current weights.
                const auto vg = value_and_grad_params<float>(s.arch, s.params, batch_matrix(forget, pos),
                                                             mean_ce_head(labels, -1.0));
                if (!vg.grad.all_finite()) throw NumericError("RAWP proxy gradient is not finite");
                rec.loss.unlearn += vg.value;
                ++steps;
                // Norms per layer, weights and biases together; proxy - theta = -lr * g.
                for (std::size_t l = 0; l < s.params.layers.size(); ++l) {
                    auto& layer = s.params.layers[l];
                    const auto& grad = vg.grad.layers[l];
                    double theta_norm = 0.0, diff_norm = 0.0;
                    for (std::size_t j = 0; j < layer.size(); ++j)
                        for (std::size_t i = 0; i < layer[j].values.size(); ++i) {
                            const double diff = -cfg.lr * static_cast<double>(grad[j].values[i]);
                            theta_norm += static_cast<double>(layer[j].values[i]) * layer[j].values[i];
                            diff_norm += diff * diff;
                        }
                    const double scale = cfg.gamma * std::sqrt(theta_norm) / (std::sqrt(diff_norm) + cfg.awp_eps);
                    if (scale == 0.0 || !std::isfinite(scale)) continue;
                    for (std::size_t j = 0; j < layer.size(); ++j)
                        for (std::size_t i = 0; i < layer[j].values.size(); ++i)
                            layer[j].values[i] = static_cast<float>(static_cast<double>(layer[j].values[i]) -
                                                                    scale * cfg.lr * static_cast<double>(grad[j].values[i]));
                }
            }
            rec.loss.unlearn /= static_cast<double>(steps);
            require_finite(s, epoch);
        } catch (const NumericError& e) {
            if (e.epoch()) throw;
            throw NumericError(e.what(), epoch);
        }
        rec.forget_accuracy = accuracy(s, forget);
        fill_monitor(rec, s, monitor);
        result.trace.push_back(rec);
        result.epochs_run = epoch;
        result.final_forget_accuracy = rec.forget_accuracy;
        if (rec.forget_accuracy == 0.0) {
            result.stop_reason = StopReason::reached_target;
            break;
        }
    }
    return result;
}

std::vector<ForgetManifest> fragment_manifest(const ForgetManifest& manifest, std::size_t k_cl) {
    if (k_cl < 1) throw ArgumentError("fragment size must be >= 1");
    std::vector<ForgetManifest> out;
    for (std::size_t start = 0; start < manifest.ids.size(); start += k_cl) {
        ForgetManifest f;
        f.mode = manifest.mode;
        f.seed = manifest.seed;
        const auto end = std::min(manifest.ids.size(), start + k_cl);
        f.ids.assign(manifest.ids.begin() + static_cast<std::ptrdiff_t>(start),
                     manifest.ids.begin() + static_cast<std::ptrdiff_t>(end));
        for (auto id : f.ids)
            if (auto it = manifest.relabel_targets.find(id); it != manifest.relabel_targets.end())
                f.relabel_targets.emplace(id, it->second);
        out.push_back(std::move(f));
    }
    return out;
}

std::vector<FragmentResult> run_continual(const ClassifierState& s0, const Dataset& train,
                                          const ForgetManifest& manifest, std::size_t k_cl,
                                          const UnlearnConfig& cfg, Monitor monitor) {
    cfg.validate();
    manifest.validate_against(train);
    std::vector<FragmentResult> out;
    ClassifierState state = s0;
    ForgetManifest requested;  // every id requested so far, for the oracle's D_r
    requested.mode = manifest.mode;
    const auto fragments = fragment_manifest(manifest, k_cl);
    for (std::size_t f = 0; f < fragments.size(); ++f) {
        const auto& frag = fragments[f];
        UnlearnConfig fcfg = cfg;
        fcfg.seed = cfg.seed + f;
        fcfg.attack.seed = cfg.attack.seed + f;
        auto [forget, rest] = split_remaining(train, frag);
        UnlearnResult r;
        switch (cfg.method) {
            case Method::rawp: r = run_rawp(state, forget, fcfg, monitor); break;
            case Method::oracle: {
                requested.ids.insert(requested.ids.end(), frag.ids.begin(), frag.ids.end());
                requested.relabel_targets.insert(frag.relabel_targets.begin(), frag.relabel_targets.end());
                auto remain = split_remaining(train, requested).second;
                r = run_oracle(state, forget, remain, frag, fcfg, monitor);
                break;
            }
            default: r = run_unlearning(state, forget, frag, fcfg, {}, monitor);
        }
        state = r.state;
        out.push_back({frag, std::move(r)});
    }
    return out;
}

}  // namespace unlearnkit
