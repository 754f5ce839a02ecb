#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <doctest.h>

#include "unlearnkit/dataset.hpp"
#include "unlearnkit/model.hpp"

namespace testing {

using namespace unlearnkit;

inline bool near_rel(double a, double b, double rtol, double atol = 0.0) {
    return std::abs(a - b) <= atol + rtol * std::max(std::abs(a), std::abs(b));
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "unlearnkit_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Cross-entropy of one logit row computed with a shifted log-sum-exp.
inline double ce_row(const std::vector<double>& z, int y) {
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s) - z[static_cast<std::size_t>(y)];
}

inline std::vector<double> logits_row(const ClassifierState& s, std::span<const float> x) {
    Matrix<float> b(1, static_cast<Eigen::Index>(x.size()));
    std::copy(x.begin(), x.end(), b.data());
    const Matrix<float> z = forward(s, b);
    return {z.data(), z.data() + z.size()};
}

// Mean CE computed row by row from a double forward pass.
inline double mean_ce_oracle(const ClassifierState& s, const Dataset& ds, std::span<const int> labels) {
    const auto p = s.params.cast<double>();
    double sum = 0.0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        Matrix<double> x(1, static_cast<Eigen::Index>(ds.dim()));
        for (std::size_t j = 0; j < ds.dim(); ++j) x(0, static_cast<Eigen::Index>(j)) = ds.row(i)[j];
        const Matrix<double> z = forward<double>(s.arch, p, x);
        sum += ce_row({z.data(), z.data() + z.size()}, labels[i]);
    }
    return sum / static_cast<double>(ds.size());
}

// Objective value in double for finite differences.
inline double objective(const Architecture& arch, const ParamSet<double>& p, const Matrix<double>& x,
                        const LossHead& head) {
    const Eigen::MatrixXd z = forward<double>(arch, p, x);
    Eigen::MatrixXd dz;
    return head(z, dz);
}

// Flat (array, index) addresses of every parameter, in storage order.
struct Coord {
    std::size_t layer, array, index;
};

inline std::vector<Coord> coords(const ParamSet<double>& p) {
    std::vector<Coord> out;
    for (std::size_t l = 0; l < p.layers.size(); ++l)
        for (std::size_t a = 0; a < p.layers[l].size(); ++a)
            for (std::size_t i = 0; i < p.layers[l][a].values.size(); ++i) out.push_back({l, a, i});
    return out;
}

inline double& at(ParamSet<double>& p, const Coord& c) { return p.layers[c.layer][c.array].values[c.index]; }
inline double at(const ParamSet<double>& p, const Coord& c) { return p.layers[c.layer][c.array].values[c.index]; }
inline float at(const ParamSet<float>& p, const Coord& c) { return p.layers[c.layer][c.array].values[c.index]; }

// Evenly spaced sample of n coordinates.
inline std::vector<Coord> sample_coords(const ParamSet<double>& p, std::size_t n) {
    const auto all = coords(p);
    std::vector<Coord> out;
    for (std::size_t i = 0; i < n && i < all.size(); ++i) out.push_back(all[i * all.size() / std::min(n, all.size())]);
    return out;
}

// Central difference of the objective along one coordinate.
inline double central_difference(const Architecture& arch, ParamSet<double> p, const Coord& c,
                                 const Matrix<double>& x, const LossHead& head, double h = 1e-6) {
    const double v = at(p, c);
    at(p, c) = v + h;
    const double up = objective(arch, p, x, head);
    at(p, c) = v - h;
    const double down = objective(arch, p, x, head);
    return (up - down) / (2.0 * h);
}

inline bool same_params(const ParamSet<float>& a, const ParamSet<float>& b) {
    if (!a.congruent(b)) return false;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
        for (std::size_t i = 0; i < a.layers[l].size(); ++i)
            if (!std::equal(a.layers[l][i].values.begin(), a.layers[l][i].values.end(),
                            b.layers[l][i].values.begin()))
                return false;
    return true;
}

// Small image rig: 10x10x3 synthetic images and a CNN-S sized for them.
inline Dataset tiny_images(std::size_t per_class, std::uint64_t seed, std::size_t classes = 4) {
    SyntheticImageConfig cfg;
    cfg.num_classes = classes;
    cfg.per_class = per_class;
    cfg.height = 10;
    cfg.width = 10;
    cfg.features = 6;
    cfg.contrast = 0.3;
    return make_synthetic_images(cfg, seed);
}

// Small trained blob classifier: MLP-2 on five Gaussian classes in eight dimensions.
inline const Dataset& blob_data() {
    static const Dataset ds = make_synthetic(5, 40, 8, 0.3, 0);
    return ds;
}

inline const ClassifierState& blob_model() {
    static const ClassifierState s = [] {
        OptimConfig cfg;
        cfg.epochs = 30;
        cfg.batch_size = 16;
        cfg.lr = 0.05;
        return pretrain(init_state(make_mlp2(8, 5, 32), 0), blob_data(), cfg).state;
    }();
    return s;
}

}  // namespace testing
