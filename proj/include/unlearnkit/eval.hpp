#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "unlearnkit/dataset.hpp"
#include "unlearnkit/model.hpp"

namespace unlearnkit {

using ConfusionMatrix = std::vector<std::vector<std::int64_t>>;

/// Entry (a, b) counts rows predicted a by `before` and b by `after`.
ConfusionMatrix confusion_prepost(const ClassifierState& before, const ClassifierState& after, const Dataset& ds);

/// Linear CKA of two activation matrices with one row per example. Columns are centred.
/// DegenerateInputError when fewer than two rows or a centred matrix is zero.
double cka_linear(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y);

/// Activations of every capture point (ReLU outputs and the logits), one row per example.
std::vector<Eigen::MatrixXd> capture_activations(const ClassifierState& s, const Dataset& ds,
                                                 std::size_t max_examples = 512);

/// (i, j) = CKA between capture point i of `before` and capture point j of `after` over the first
/// min(|ds|, max_examples) rows.
Eigen::MatrixXd layerwise_cka(const ClassifierState& before, const ClassifierState& after, const Dataset& ds,
                              std::size_t max_examples = 512);

struct SplitAccuracy {
    double before = 0.0;  // percent
    double after = 0.0;
};

struct EvalReport {
    std::map<std::string, SplitAccuracy> accuracies;  // "forget", "remain", "test"
    ConfusionMatrix confusion;                         // over the forget split
    std::map<std::string, Eigen::MatrixXd> cka;       // per split
    nlohmann::json metadata = nlohmann::json::object();
};

struct EvalOptions {
    std::size_t max_examples = 512;
    bool cka_forget = true;
    bool cka_remain = true;
};

/// Accuracies of both states on every non-empty split, the forget split scored against y* in
/// relabel mode, plus the pre/post confusion matrix and layerwise CKA. A split whose CKA is
/// undefined is left out and named in metadata["cka_skipped"].
EvalReport evaluate(const ClassifierState& before, const ClassifierState& after, const Dataset& forget,
                    const Dataset& remain, const Dataset& test, const ForgetManifest& manifest,
                    const EvalOptions& options = {});

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

/// Shortest decimal that parses back to the same double.
std::string format_number(double v);

/// Header run_id,method,k,split,state,accuracy and one row per split and state.
std::string accuracies_csv(const EvalReport& r, const std::string& run_id, const std::string& method, std::size_t k);
std::string matrix_csv(const ConfusionMatrix& m);
std::string matrix_csv(const Eigen::MatrixXd& m);

/// report.json, accuracies.csv, confusion.csv and cka_<split>.csv in `dir`.
void write_report_files(const std::filesystem::path& dir, const EvalReport& r, const std::string& run_id,
                        const std::string& method, std::size_t k);

}  // namespace unlearnkit
