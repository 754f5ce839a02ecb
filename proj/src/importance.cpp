#include "unlearnkit/importance.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "unlearnkit/blob.hpp"
#include "unlearnkit/errors.hpp"

namespace unlearnkit {

std::string to_string(ImportanceKind k) {
    switch (k) {
        case ImportanceKind::raw: return "raw";
        case ImportanceKind::normalized: return "normalized";
        case ImportanceKind::inverted: return "inverted";
    }
    return "raw";
}

ImportanceKind importance_kind_from_string(const std::string& s) {
    if (s == "raw") return ImportanceKind::raw;
    if (s == "normalized") return ImportanceKind::normalized;
    if (s == "inverted") return ImportanceKind::inverted;
    throw ArgumentError("unknown importance kind '" + s + "'");
}

std::string to_string(ImportanceOn o) { return o == ImportanceOn::logits ? "logits" : "probabilities"; }

ImportanceOn importance_on_from_string(const std::string& s) {
    if (s == "logits") return ImportanceOn::logits;
    if (s == "probabilities") return ImportanceOn::probabilities;
    throw ArgumentError("unknown importance_on '" + s + "'");
}

namespace {

// Neumaier summation, one accumulator per parameter.
struct CompensatedSum {
    std::vector<double> sum, carry;

    explicit CompensatedSum(std::size_t n) : sum(n, 0.0), carry(n, 0.0) {}

    void add(std::size_t i, double v) {
        const double t = sum[i] + v;
        if (std::abs(sum[i]) >= std::abs(v))
            carry[i] += (sum[i] - t) + v;
        else
            carry[i] += (v - t) + sum[i];
        sum[i] = t;
    }
    double total(std::size_t i) const { return sum[i] + carry[i]; }
};

void require_congruent(const ClassifierState& s, const ImportanceMap& omega) {
    if (!s.params.congruent(omega.values)) throw ContractError("importance map does not match the model parameters");
}

}  // namespace

ImportanceMap mas_importance(const ClassifierState& s, const Dataset& ds, ImportanceOn on) {
    if (ds.empty()) throw ArgumentError("importance needs at least one example");
    if (ds.dim() != s.arch.input_dim()) throw ContractError("dataset does not match the model input shape");

    const auto params = s.params.cast<double>();
    const auto head = squared_norm_head(on == ImportanceOn::probabilities);
    ImportanceMap omega{params.zeros_like(), ImportanceKind::raw};
    std::vector<CompensatedSum> acc;
    params.for_each([&](std::size_t, const ParamArray<double>& a) { acc.emplace_back(a.values.size()); });

    Matrix<double> x(1, static_cast<Eigen::Index>(ds.dim()));
    for (std::size_t n = 0; n < ds.size(); ++n) {
        auto row = ds.row(n);
        std::copy(row.begin(), row.end(), x.data());
        const auto vg = value_and_grad_params<double>(s.arch, params, x, head);
        if (!vg.grad.all_finite()) throw NumericError("importance gradient is not finite");
        std::size_t k = 0;
        vg.grad.for_each([&](std::size_t, const ParamArray<double>& g) {
            for (std::size_t i = 0; i < g.values.size(); ++i) acc[k].add(i, std::abs(g.values[i]));
            ++k;
        });
    }
    const double inv_n = 1.0 / static_cast<double>(ds.size());
    std::size_t k = 0;
    omega.values.for_each([&](std::size_t, ParamArray<double>& a) {
        for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] = acc[k].total(i) * inv_n;
        ++k;
    });
    return omega;
}

ImportanceMap normalize_layerwise(const ImportanceMap& omega) {
    ImportanceMap out = omega;
    out.kind = ImportanceKind::normalized;
    // Weights and biases of one layer share the same extrema. Exact division keeps them at 0 and 1.
    for (auto& layer : out.values.layers) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& a : layer)
            for (double v : a.values) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
        const double range = hi - lo;
        for (auto& a : layer)
            for (auto& v : a.values) v = range > 0.0 ? (v - lo) / range : 0.0;
    }
    return out;
}

ImportanceMap invert(const ImportanceMap& omega) {
    if (omega.kind == ImportanceKind::raw) throw ArgumentError("only a normalized importance map can be inverted");
    ImportanceMap out = omega;
    out.kind = omega.kind == ImportanceKind::inverted ? ImportanceKind::normalized : ImportanceKind::inverted;
    out.values.for_each([](std::size_t, ParamArray<double>& a) {
        for (auto& v : a.values) v = 1.0 - v;
    });
    return out;
}

double importance_penalty(const ClassifierState& s, const ClassifierState& ref, const ImportanceMap& omega_bar) {
    require_congruent(s, omega_bar);
    if (!s.params.congruent(ref.params)) throw ContractError("reference state does not match the model");
    double total = 0.0;
    for (std::size_t l = 0; l < s.params.layers.size(); ++l)
        for (std::size_t j = 0; j < s.params.layers[l].size(); ++j) {
            const auto& p = s.params.layers[l][j].values;
            const auto& r = ref.params.layers[l][j].values;
            const auto& w = omega_bar.values.layers[l][j].values;
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double d = static_cast<double>(p[i]) - static_cast<double>(r[i]);
                total += w[i] * d * d;
            }
        }
    return total;
}

ParamSet<double> importance_penalty_grad(const ClassifierState& s, const ClassifierState& ref,
                                         const ImportanceMap& omega_bar) {
    require_congruent(s, omega_bar);
    if (!s.params.congruent(ref.params)) throw ContractError("reference state does not match the model");
    ParamSet<double> g = omega_bar.values;
    for (std::size_t l = 0; l < g.layers.size(); ++l)
        for (std::size_t j = 0; j < g.layers[l].size(); ++j) {
            const auto& p = s.params.layers[l][j].values;
            const auto& r = ref.params.layers[l][j].values;
            auto& out = g.layers[l][j].values;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = 2.0 * out[i] * (static_cast<double>(p[i]) - static_cast<double>(r[i]));
        }
    return g;
}

void save_importance(const std::filesystem::path& path, const ImportanceMap& omega) {
    nlohmann::json layers = nlohmann::json::array();
    std::vector<std::vector<float>> storage;
    std::vector<BlobArrayView> arrays;
    for (std::size_t l = 0; l < omega.values.layers.size(); ++l) {
        layers.push_back(omega.values.layers[l].size());
        for (const auto& a : omega.values.layers[l])
            storage.emplace_back(a.values.begin(), a.values.end());
    }
    std::size_t k = 0;
    omega.values.for_each([&](std::size_t l, const ParamArray<double>& a) {
        arrays.push_back({std::to_string(l) + "/" + a.name, a.shape, storage[k++]});
    });
    nlohmann::json header{{"kind", "importance"},
                          {"format_version", 1},
                          {"importance_kind", to_string(omega.kind)},
                          {"arrays_per_layer", layers}};
    write_blob(path, std::move(header), arrays);
}

ImportanceMap load_importance(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("importance map not found: " + path.string());
    Blob blob = read_blob(path);
    if (blob.header.value("kind", std::string{}) != "importance") throw IoError("not an importance map: " + path.string());
    ImportanceMap omega;
    try {
        omega.kind = importance_kind_from_string(blob.header.at("importance_kind").get<std::string>());
        const auto counts = blob.header.at("arrays_per_layer").get<std::vector<std::size_t>>();
        std::size_t k = 0;
        omega.values.layers.resize(counts.size());
        for (std::size_t l = 0; l < counts.size(); ++l)
            for (std::size_t j = 0; j < counts[l]; ++j, ++k) {
                if (k >= blob.arrays.size()) throw IoError("importance map is missing arrays: " + path.string());
                const auto& name = blob.names[k];
                const auto slash = name.find('/');
                omega.values.layers[l].push_back({slash == std::string::npos ? name : name.substr(slash + 1),
                                                  blob.shapes[k],
                                                  AlignedVector<double>(blob.arrays[k].begin(), blob.arrays[k].end())});
            }
        if (k != blob.arrays.size()) throw IoError("extra arrays in importance map " + path.string());
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed importance header in " + path.string() + ": " + e.what());
    }
    return omega;
}

}  // namespace unlearnkit
