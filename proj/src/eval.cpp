#include "unlearnkit/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "binary_io.hpp"
#include "unlearnkit/errors.hpp"

namespace unlearnkit {

ConfusionMatrix confusion_prepost(const ClassifierState& before, const ClassifierState& after, const Dataset& ds) {
    if (before.num_classes() != after.num_classes()) throw ContractError("states disagree on the class count");
    const auto c = before.num_classes();
    ConfusionMatrix m(c, std::vector<std::int64_t>(c, 0));
    if (ds.empty()) return m;
    const auto pre = predict(before, ds);
    const auto post = predict(after, ds);
    for (std::size_t i = 0; i < pre.size(); ++i) ++m[static_cast<std::size_t>(pre[i])][static_cast<std::size_t>(post[i])];
    return m;
}

namespace {

Eigen::MatrixXd centered(const Eigen::MatrixXd& x) {
    return x.rowwise() - x.colwise().mean();
}

// Gram matrix of column-centred rows, which equals H K H for the linear kernel K.
Eigen::MatrixXd centered_gram(const Eigen::MatrixXd& x) {
    const Eigen::MatrixXd c = centered(x);
    Eigen::MatrixXd k(c.rows(), c.rows());
    k.setZero();
    k.selfadjointView<Eigen::Lower>().rankUpdate(c);
    return k.selfadjointView<Eigen::Lower>();
}

double clamp_unit(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

double cka_linear(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) {
    if (x.rows() != y.rows()) throw ContractError("CKA inputs need the same number of rows");
    if (x.rows() < 2) throw DegenerateInputError("CKA needs at least two examples");
    if (x.cols() == 0 || y.cols() == 0) throw DegenerateInputError("CKA input has no features");
    const double n = static_cast<double>(x.rows());
    const double p = static_cast<double>(x.cols()), q = static_cast<double>(y.cols());
    double cross, xx, yy;
    if (n * (p + q) < p * q + p * p + q * q) {
        const Eigen::MatrixXd k = centered_gram(x), l = centered_gram(y);
        cross = (k.array() * l.array()).sum();
        xx = k.norm();
        yy = l.norm();
    } else {
        const Eigen::MatrixXd cx = centered(x), cy = centered(y);
        cross = (cy.transpose() * cx).squaredNorm();
        xx = (cx.transpose() * cx).norm();
        yy = (cy.transpose() * cy).norm();
    }
    if (!(xx > 0.0) || !(yy > 0.0)) throw DegenerateInputError("CKA input has zero variance");
    return clamp_unit(cross / (xx * yy));
}

std::vector<Eigen::MatrixXd> capture_activations(const ClassifierState& s, const Dataset& ds,
                                                 std::size_t max_examples) {
    if (ds.dim() != s.arch.input_dim()) throw ContractError("dataset does not match the model input shape");
    const auto n = std::min(ds.size(), max_examples);
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = i;
    Tape<float> tape;
    forward<float>(s.arch, s.params, batch_matrix(ds, pos), &tape);
    std::vector<Eigen::MatrixXd> out;
    for (auto l : s.arch.capture_points()) out.push_back(tape.outputs[l].cast<double>());
    return out;
}

Eigen::MatrixXd layerwise_cka(const ClassifierState& before, const ClassifierState& after, const Dataset& ds,
                              std::size_t max_examples) {
    if (std::min(ds.size(), max_examples) < 2) throw DegenerateInputError("CKA needs at least two examples");
    const auto a = capture_activations(before, ds, max_examples);
    const auto b = capture_activations(after, ds, max_examples);
    auto grams = [](const std::vector<Eigen::MatrixXd>& acts) {
        std::vector<Eigen::MatrixXd> g;
        std::vector<double> norms;
        for (const auto& x : acts) {
            g.push_back(centered_gram(x));
            norms.push_back(g.back().norm());
            if (!(norms.back() > 0.0)) throw DegenerateInputError("a captured layer has zero variance");
        }
        return std::make_pair(std::move(g), std::move(norms));
    };
    const auto [ka, na] = grams(a);
    const auto [kb, nb] = grams(b);
    Eigen::MatrixXd out(static_cast<Eigen::Index>(ka.size()), static_cast<Eigen::Index>(kb.size()));
    for (std::size_t i = 0; i < ka.size(); ++i)
        for (std::size_t j = 0; j < kb.size(); ++j)
            out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                clamp_unit((ka[i].array() * kb[j].array()).sum() / (na[i] * nb[j]));
    return out;
}

EvalReport evaluate(const ClassifierState& before, const ClassifierState& after, const Dataset& forget,
                    const Dataset& remain, const Dataset& test, const ForgetManifest& manifest,
                    const EvalOptions& options) {
    if (!(before.arch == after.arch)) throw ContractError("before and after states have different architectures");
    EvalReport r;
    if (!forget.empty()) {
        const auto targets = forget_targets(forget, manifest);
        r.accuracies["forget"] = {100.0 * accuracy(before, forget, targets), 100.0 * accuracy(after, forget, targets)};
    }
    if (!remain.empty()) r.accuracies["remain"] = {100.0 * accuracy(before, remain), 100.0 * accuracy(after, remain)};
    if (!test.empty()) r.accuracies["test"] = {100.0 * accuracy(before, test), 100.0 * accuracy(after, test)};
    r.confusion = confusion_prepost(before, after, forget);

    nlohmann::json skipped = nlohmann::json::object();
    auto add_cka = [&](const char* name, const Dataset& ds) {
        try {
            r.cka[name] = layerwise_cka(before, after, ds, options.max_examples);
        } catch (const DegenerateInputError& e) {
            skipped[name] = e.what();
        }
    };
    if (options.cka_forget) add_cka("forget", forget);
    if (options.cka_remain) add_cka("remain", remain);
    r.metadata["mode"] = to_string(manifest.mode);
    r.metadata["k"] = manifest.size();
    r.metadata["cka_examples"] = options.max_examples;
    if (!skipped.empty()) r.metadata["cka_skipped"] = skipped;
    return r;
}

nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json acc = nlohmann::json::object();
    for (const auto& [split, a] : r.accuracies) acc[split] = {{"before", a.before}, {"after", a.after}};
    nlohmann::json cka = nlohmann::json::object();
    for (const auto& [split, m] : r.cka) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
            rows.push_back(std::move(row));
        }
        cka[split] = std::move(rows);
    }
    return {{"accuracies", acc}, {"confusion", r.confusion}, {"cka", cka}, {"metadata", r.metadata}};
}

EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
        for (const auto& [split, a] : j.at("accuracies").items())
            r.accuracies[split] = {a.at("before").get<double>(), a.at("after").get<double>()};
        r.confusion = j.at("confusion").get<ConfusionMatrix>();
        for (const auto& [split, rows] : j.at("cka").items()) {
            const auto v = rows.get<std::vector<std::vector<double>>>();
            Eigen::MatrixXd m(static_cast<Eigen::Index>(v.size()), v.empty() ? 0 : static_cast<Eigen::Index>(v[0].size()));
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (v[i].size() != static_cast<std::size_t>(m.cols())) throw IoError("ragged CKA matrix");
                for (std::size_t c = 0; c < v[i].size(); ++c)
                    m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = v[i][c];
            }
            r.cka[split] = std::move(m);
        }
        if (j.contains("metadata")) r.metadata = j.at("metadata");
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("malformed evaluation report: ") + e.what());
    }
    return r;
}

std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, res.ptr};
}

std::string accuracies_csv(const EvalReport& r, const std::string& run_id, const std::string& method, std::size_t k) {
    std::ostringstream out;
    out << "run_id,method,k,split,state,accuracy\n";
    for (const auto& [split, a] : r.accuracies) {
        out << run_id << ',' << method << ',' << k << ',' << split << ",before," << format_number(a.before) << '\n';
        out << run_id << ',' << method << ',' << k << ',' << split << ",after," << format_number(a.after) << '\n';
    }
    return out.str();
}

std::string matrix_csv(const ConfusionMatrix& m) {
    std::ostringstream out;
    for (const auto& row : m) {
        for (std::size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << row[j];
        out << '\n';
    }
    return out.str();
}

std::string matrix_csv(const Eigen::MatrixXd& m) {
    std::ostringstream out;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_number(m(i, j));
        out << '\n';
    }
    return out.str();
}

void write_report_files(const std::filesystem::path& dir, const EvalReport& r, const std::string& run_id,
                        const std::string& method, std::size_t k) {
    std::filesystem::create_directories(dir);
    detail::write_json_file(dir / "report.json", report_to_json(r));
    detail::write_text_file(dir / "accuracies.csv", accuracies_csv(r, run_id, method, k));
    detail::write_text_file(dir / "confusion.csv", matrix_csv(r.confusion));
    for (const auto& [split, m] : r.cka) detail::write_text_file(dir / ("cka_" + split + ".csv"), matrix_csv(m));
}

}  // namespace unlearnkit
