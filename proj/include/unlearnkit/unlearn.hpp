#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "unlearnkit/attack.hpp"
#include "unlearnkit/dataset.hpp"
#include "unlearnkit/importance.hpp"
#include "unlearnkit/model.hpp"

namespace unlearnkit {

enum class Method { neggrad, correct, adv, adv_imp, oracle, rawp };

std::string to_string(Method m);
Method method_from_string(const std::string& s);

struct UnlearnConfig {
    Method method = Method::adv;
    double lr = 1e-3;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    double lambda = 1.0;
    std::optional<double> lambda_adv;  // falls back to lambda
    std::optional<double> lambda_imp;  // falls back to lambda
    int max_epochs = 100;
    std::size_t forget_batch = 8;
    std::size_t adv_batch = 64;
    std::size_t remain_batch = 64;  // oracle only
    std::size_t n_adv = 20;
    AttackConfig attack;
    TargetPolicy target_policy = TargetPolicy::per_image;
    ImportanceOn importance_on = ImportanceOn::logits;
    double gamma = 0.01;
    double awp_eps = 1e-8;
    std::uint64_t seed = 0;

    double adv_weight() const { return lambda_adv.value_or(lambda); }
    double imp_weight() const { return lambda_imp.value_or(lambda); }
    /// Throws ArgumentError on out-of-range values.
    void validate() const;
};

nlohmann::json unlearn_config_to_json(const UnlearnConfig& c);
UnlearnConfig unlearn_config_from_json(const nlohmann::json& j);

// ---- Objectives ------------------------------------------------------------------------------

/// Components of an unlearning objective; total() is their sum with the weights already applied.
struct LossTerms {
    double unlearn = 0.0;
    double adversarial = 0.0;
    double importance = 0.0;

    double total() const noexcept { return unlearn + adversarial + importance; }
};

/// Mean cross-entropy of the batch toward `labels`.
double mean_cross_entropy(const ClassifierState& s, const Dataset& batch, std::span<const int> labels);

/// Negated mean CE toward the true labels.
double loss_ms(const ClassifierState& s, const Dataset& forget_batch);
/// Mean CE toward the relabel targets; each target must differ from the true label.
double loss_cor(const ClassifierState& s, const Dataset& forget_batch, std::span<const int> targets);
/// loss_ms or loss_cor by mode (targets are ignored in misclassify mode).
double loss_unlearn(const ClassifierState& s, const Dataset& forget_batch, ForgetMode mode,
                    std::span<const int> targets);

/// Unlearning term plus lambda times the mean CE of the adversarial batch toward its attack targets.
LossTerms loss_adv(const ClassifierState& s, const Dataset& forget_batch, ForgetMode mode,
                   std::span<const int> targets, const Dataset& adv_batch, double lambda);

/// loss_adv plus lambda_imp * importance_penalty(s, ref, omega_bar).
LossTerms loss_adv_imp(const ClassifierState& s, const ClassifierState& ref, const ImportanceMap& omega_bar,
                       const Dataset& forget_batch, ForgetMode mode, std::span<const int> targets,
                       const Dataset& adv_batch, double lambda_adv, double lambda_imp);

// ---- Loops -----------------------------------------------------------------------------------

enum class StopReason { reached_target, max_epochs };

std::string to_string(StopReason r);

struct EpochRecord {
    int epoch = 0;
    LossTerms loss;  // mean over the epoch's steps
    double forget_accuracy = 0.0;
    std::optional<double> remain_accuracy;
    std::optional<double> test_accuracy;
};

nlohmann::json epoch_record_to_json(const EpochRecord& r);

struct UnlearnResult {
    ClassifierState state;
    int epochs_run = 0;
    StopReason stop_reason = StopReason::max_epochs;
    double initial_forget_accuracy = 0.0;
    double final_forget_accuracy = 0.0;
    int selected_epoch = -1;  // oracle checkpoint choice; -1 elsewhere
    std::vector<EpochRecord> trace;
};

nlohmann::json unlearn_result_summary(const UnlearnResult& r);

/// Optional splits evaluated after every epoch for the trace only.
struct Monitor {
    const Dataset* remain = nullptr;
    const Dataset* test = nullptr;
};

/// Precomputed regularizer inputs. Missing pieces are generated from s0 and D_f before the loop.
struct Precomputed {
    const AdversarialSet* adversarial = nullptr;
    const ImportanceMap* omega_bar = nullptr;
};

/// neggrad, correct, adv or adv_imp with SGD and early stopping at epoch end.
UnlearnResult run_unlearning(const ClassifierState& s0, const Dataset& forget, const ForgetManifest& manifest,
                             const UnlearnConfig& cfg, Precomputed pre = {}, Monitor monitor = {});

/// Joint descent on CE(D_r) and the unlearning loss; returns the epoch checkpoint closest to the
/// D_f target, ties broken by D_r accuracy and then by the earlier epoch.
UnlearnResult run_oracle(const ClassifierState& s0, const Dataset& forget, const Dataset& remain,
                         const ForgetManifest& manifest, const UnlearnConfig& cfg, Monitor monitor = {});

/// Repeated adversarial weight perturbation, each layer moved by gamma times its norm.
UnlearnResult run_rawp(const ClassifierState& s0, const Dataset& forget, const UnlearnConfig& cfg,
                       Monitor monitor = {});

/// One fragment of a continual run.
struct FragmentResult {
    ForgetManifest manifest;
    UnlearnResult result;
};

/// Splits the manifest into consecutive fragments of k_cl ids and unlearns them in sequence,
/// each fragment starting from the previous state with fresh adversarial examples and importances.
std::vector<FragmentResult> run_continual(const ClassifierState& s0, const Dataset& train,
                                          const ForgetManifest& manifest, std::size_t k_cl,
                                          const UnlearnConfig& cfg, Monitor monitor = {});

/// Fragment manifests in order: ids [f*k_cl, (f+1)*k_cl) with their relabel targets.
std::vector<ForgetManifest> fragment_manifest(const ForgetManifest& manifest, std::size_t k_cl);

}  // namespace unlearnkit
