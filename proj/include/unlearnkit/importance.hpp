#pragma once

#include <filesystem>
#include <string>

#include "unlearnkit/dataset.hpp"
#include "unlearnkit/model.hpp"

namespace unlearnkit {

enum class ImportanceKind { raw, normalized, inverted };

std::string to_string(ImportanceKind k);
ImportanceKind importance_kind_from_string(const std::string& s);

/// Whether importance is measured on the logits or on the softmax output.
enum class ImportanceOn { logits, probabilities };

std::string to_string(ImportanceOn o);
ImportanceOn importance_on_from_string(const std::string& s);

/// Per-parameter importance, congruent with the parameters of the model it was measured on.
struct ImportanceMap {
    ParamSet<double> values;
    ImportanceKind kind = ImportanceKind::raw;

    bool normalized() const noexcept { return kind != ImportanceKind::raw; }
    bool inverted() const noexcept { return kind == ImportanceKind::inverted; }
};

/// Mean over examples of |d ||g(x)||^2 / d theta|, the absolute value taken per example.
/// Evaluated in double precision with compensated summation.
ImportanceMap mas_importance(const ClassifierState& s, const Dataset& ds,
                             ImportanceOn on = ImportanceOn::logits);

/// Min-max rescale of every layer (weights and biases together) to [0,1]; a constant layer maps to all zeros.
ImportanceMap normalize_layerwise(const ImportanceMap& omega);

/// 1 - v entrywise. Applying it to an inverted map gives back the normalized map.
ImportanceMap invert(const ImportanceMap& omega);

/// sum_i omega_bar_i * (theta_i - theta_ref_i)^2.
double importance_penalty(const ClassifierState& s, const ClassifierState& ref, const ImportanceMap& omega_bar);

/// 2 * omega_bar_i * (theta_i - theta_ref_i).
ParamSet<double> importance_penalty_grad(const ClassifierState& s, const ClassifierState& ref,
                                         const ImportanceMap& omega_bar);

/// Stored as float32 arrays in the checkpoint blob layout, header kind "importance".
void save_importance(const std::filesystem::path& path, const ImportanceMap& omega);
ImportanceMap load_importance(const std::filesystem::path& path);

}  // namespace unlearnkit
