#include <algorithm>
#include <cmath>
#include <numeric>

#include "unlearnkit/blob.hpp"
#include "unlearnkit/model.hpp"
#include "unlearnkit/rng.hpp"

namespace unlearnkit {

void ClassifierState::validate() const {
    const auto expected = zero_params<float>(arch);
    if (!params.congruent(expected)) throw ContractError("parameter shapes do not match the architecture");
    if (!params.all_finite()) throw ContractError("non-finite parameter");
}

ClassifierState zero_state(const Architecture& arch) {
    ClassifierState s;
    s.arch = arch;
    s.arch.resolve();
    s.params = zero_params<float>(s.arch);
    return s;
}

ClassifierState init_state(const Architecture& arch, std::uint64_t seed) {
    ClassifierState s = zero_state(arch);
    Rng rng(derive_seed(seed, {stream::init}));
    for (std::size_t i = 0; i < s.arch.layers.size(); ++i) {
        if (!s.arch.layers[i].has_params()) continue;
        auto& w = s.params.layers[i][0];
        const std::size_t fan_in = w.values.size() / w.shape[0];
        std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        for (auto& v : w.values) v = static_cast<float>(normal(rng));
    }
    s.metadata["init_seed"] = seed;
    return s;
}

Matrix<float> batch_matrix(const Dataset& ds, std::span<const std::size_t> positions) {
    const auto d = ds.dim();
    if (positions.empty()) {
        Matrix<float> m(static_cast<Eigen::Index>(ds.size()), static_cast<Eigen::Index>(d));
        std::copy(ds.inputs.begin(), ds.inputs.end(), m.data());
        return m;
    }
    Matrix<float> m(static_cast<Eigen::Index>(positions.size()), static_cast<Eigen::Index>(d));
    for (std::size_t r = 0; r < positions.size(); ++r) {
        auto row = ds.row(positions[r]);
        std::copy(row.begin(), row.end(), m.data() + r * d);
    }
    return m;
}

Matrix<float> forward(const ClassifierState& s, const Matrix<float>& batch) {
    return forward<float>(s.arch, s.params, batch, nullptr);
}

std::vector<int> argmax_rows(const Matrix<float>& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        Eigen::Index best = 0;
        for (Eigen::Index c = 1; c < logits.cols(); ++c)
            if (logits(i, c) > logits(i, best)) best = c;
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

std::vector<int> predict(const ClassifierState& s, const Dataset& ds) {
    constexpr std::size_t chunk = 256;
    std::vector<int> out;
    out.reserve(ds.size());
    std::vector<std::size_t> pos;
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
        const auto end = std::min(ds.size(), start + chunk);
        pos.resize(end - start);
        std::iota(pos.begin(), pos.end(), start);
        const auto p = argmax_rows(forward(s, batch_matrix(ds, pos)));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

double accuracy(const ClassifierState& s, const Dataset& ds) { return accuracy(s, ds, ds.labels); }

double accuracy(const ClassifierState& s, const Dataset& ds, std::span<const int> targets) {
    if (ds.empty()) throw ArgumentError("accuracy of an empty dataset is undefined");
    if (targets.size() != ds.size()) throw ContractError("targets and dataset differ in length");
    const auto pred = predict(s, ds);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == targets[i];
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

GradientMap grad_params(const ClassifierState& s, const Matrix<float>& batch, const LossHead& head) {
    auto vg = value_and_grad_params<float>(s.arch, s.params, batch, head);
    if (!vg.grad.all_finite()) throw NumericError("parameter gradient is not finite");
    return std::move(vg.grad);
}

Matrix<float> grad_input(const ClassifierState& s, const Matrix<float>& x, std::span<const int> labels,
                         Direction direction) {
    if (labels.size() != static_cast<std::size_t>(x.rows())) throw ContractError("one label per row expected");
    const double sign = direction == Direction::minimize ? 1.0 : -1.0;
    auto head = weighted_ce_head({labels.begin(), labels.end()}, std::vector<double>(labels.size(), sign));
    auto vg = value_and_grad_input<float>(s.arch, s.params, x, head);
    if (!vg.grad.allFinite()) throw NumericError("input gradient is not finite");
    return std::move(vg.grad);
}

void SgdMomentum::step(ParamSet<float>& params, const ParamSet<float>& grad) {
    if (!params.congruent(grad)) throw ContractError("gradient does not match parameters");
    if (!started_) buffer_ = params.zeros_like();
    for (std::size_t i = 0; i < params.layers.size(); ++i)
        for (std::size_t j = 0; j < params.layers[i].size(); ++j) {
            auto& p = params.layers[i][j].values;
            const auto& g = grad.layers[i][j].values;
            auto& b = buffer_.layers[i][j].values;
            for (std::size_t k = 0; k < p.size(); ++k) {
                const double d = static_cast<double>(g[k]) + weight_decay_ * static_cast<double>(p[k]);
                const double buf = started_ ? momentum_ * static_cast<double>(b[k]) + d : d;
                b[k] = static_cast<float>(buf);
                p[k] = static_cast<float>(static_cast<double>(p[k]) - lr_ * buf);
            }
        }
    started_ = true;
}

nlohmann::json optim_config_to_json(const OptimConfig& c) {
    return {{"lr", c.lr},         {"momentum", c.momentum},     {"weight_decay", c.weight_decay},
            {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"seed", c.seed}};
}

OptimConfig optim_config_from_json(const nlohmann::json& j) {
    OptimConfig c;
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    return c;
}

PretrainResult pretrain(const ClassifierState& s0, const Dataset& ds, const OptimConfig& cfg) {
    if (cfg.epochs < 0 || cfg.batch_size == 0 || !(cfg.lr >= 0.0)) throw ArgumentError("invalid optimizer config");
    if (ds.empty()) throw ArgumentError("cannot pretrain on an empty dataset");
    if (ds.dim() != s0.arch.input_dim() || ds.num_classes != s0.num_classes())
        throw ContractError("dataset does not match the architecture");
    PretrainResult result{s0, 0.0, {}};
    if (cfg.epochs == 0) {
        result.train_accuracy = accuracy(s0, ds);
        return result;
    }
    auto& s = result.state;
    SgdMomentum opt(cfg.lr, cfg.momentum, cfg.weight_decay);
    std::vector<std::size_t> order(ds.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, {stream::shuffle, static_cast<std::uint64_t>(epoch)}));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const auto end = std::min(order.size(), start + cfg.batch_size);
            std::span<const std::size_t> pos(order.data() + start, end - start);
            std::vector<int> labels;
            for (auto p : pos) labels.push_back(ds.labels[p]);
            auto vg = value_and_grad_params<float>(s.arch, s.params, batch_matrix(ds, pos), mean_ce_head(labels));
            if (!vg.grad.all_finite()) throw NumericError("pretraining gradient is not finite", epoch + 1);
            loss_sum += vg.value * static_cast<double>(pos.size());
            opt.step(s.params, vg.grad);
        }
        result.epoch_loss.push_back(loss_sum / static_cast<double>(ds.size()));
    }
    result.train_accuracy = accuracy(s, ds);
    s.metadata["pretrain"] = optim_config_to_json(cfg);
    s.metadata["train_accuracy"] = result.train_accuracy;
    return result;
}

void save_checkpoint(const std::filesystem::path& path, const ClassifierState& s) {
    s.validate();
    nlohmann::json header{{"kind", "checkpoint"},
                          {"format_version", 1},
                          {"arch", architecture_to_json(s.arch)},
                          {"num_classes", s.num_classes()},
                          {"metadata", s.metadata}};
    std::vector<BlobArrayView> arrays;
    for (std::size_t i = 0; i < s.params.layers.size(); ++i)
        for (const auto& a : s.params.layers[i])
            arrays.push_back({s.arch.layers[i].name + "/" + a.name, a.shape, a.values});
    write_blob(path, std::move(header), arrays);
}

ClassifierState load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
    Blob blob = read_blob(path);
    if (blob.header.value("kind", std::string{}) != "checkpoint") throw IoError("not a checkpoint: " + path.string());
    ClassifierState s;
    s.arch = architecture_from_json(blob.header.at("arch"));
    s.params = zero_params<float>(s.arch);
    s.metadata = blob.header.value("metadata", nlohmann::json::object());
    std::size_t k = 0;
    for (std::size_t i = 0; i < s.params.layers.size(); ++i)
        for (auto& a : s.params.layers[i]) {
            if (k >= blob.arrays.size() || blob.shapes[k] != a.shape)
                throw IoError("checkpoint arrays do not match the architecture in " + path.string());
            a.values.assign(blob.arrays[k].begin(), blob.arrays[k].end());
            ++k;
        }
    if (k != blob.arrays.size()) throw IoError("extra arrays in checkpoint " + path.string());
    s.validate();
    return s;
}

}  // namespace unlearnkit
