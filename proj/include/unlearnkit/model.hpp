#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "unlearnkit/dataset.hpp"
#include "unlearnkit/errors.hpp"

namespace unlearnkit {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class LayerKind { dense, conv2d, maxpool };
enum class Activation { none, relu };

std::string to_string(LayerKind kind);
std::string to_string(Activation act);

struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::dense;
    Activation activation = Activation::none;
    std::size_t units = 0;    // dense outputs or conv output channels
    std::size_t kernel = 3;   // conv2d only
    std::size_t padding = 0;  // conv2d only
    std::size_t window = 2;   // maxpool window and stride

    // Filled by Architecture::resolve().
    Shape in_shape;
    Shape out_shape;

    bool has_params() const noexcept { return kind != LayerKind::maxpool; }
};

/// Ordered layer list of a feed-forward classifier. Layer outputs are row-major; image
/// activations are height x width x channels.
struct Architecture {
    std::string name;
    Shape input_shape;
    std::size_t num_classes = 0;
    std::vector<LayerSpec> layers;

    /// Computes per-layer shapes and checks the layer chain; throws ContractError.
    void resolve();
    std::size_t input_dim() const { return numel(input_shape); }

    /// Names and shapes of the parameter arrays of layer `i` ({} for parameter-free layers).
    std::vector<std::pair<std::string, Shape>> param_layout(std::size_t i) const;

    /// Layers whose outputs are representation capture points (ReLU outputs and the logits).
    std::vector<std::size_t> capture_points() const;

    bool operator==(const Architecture& other) const;
};

/// Single dense layer, logits = W x + b.
Architecture make_linear(std::size_t input_dim, std::size_t num_classes);
/// dense(hidden) ReLU, dense(hidden) ReLU, dense(C).
Architecture make_mlp2(std::size_t input_dim, std::size_t num_classes, std::size_t hidden = 64);
/// conv3x3(32) ReLU, maxpool2, conv3x3(64) ReLU, maxpool2, dense(128) ReLU, dense(C); valid padding.
Architecture make_cnn_s(std::size_t num_classes, std::size_t height = 32, std::size_t width = 32,
                        std::size_t channels = 3);
/// Reference architecture by name: "linear", "mlp2" or "cnn_s".
Architecture make_architecture(const std::string& name, const Shape& input_shape, std::size_t num_classes);

nlohmann::json architecture_to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);

// Parameter storage is aligned so vectorized kernels split work the same way on every run.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <class T>
struct ParamArray {
    std::string name;
    Shape shape;
    AlignedVector<T> values;
};

/// Layer-grouped parameter arrays. One entry per architecture layer (empty for pooling).
template <class T>
struct ParamSet {
    std::vector<std::vector<ParamArray<T>>> layers;

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& l : layers)
            for (const auto& a : l) n += a.values.size();
        return n;
    }

    template <class U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        out.layers.resize(layers.size());
        for (std::size_t i = 0; i < layers.size(); ++i)
            for (const auto& a : layers[i])
                out.layers[i].push_back({a.name, a.shape, AlignedVector<U>(a.values.begin(), a.values.end())});
        return out;
    }

    ParamSet zeros_like() const {
        ParamSet out = *this;
        for (auto& l : out.layers)
            for (auto& a : l) std::fill(a.values.begin(), a.values.end(), T{0});
        return out;
    }

    template <class U>
    bool congruent(const ParamSet<U>& other) const {
        if (layers.size() != other.layers.size()) return false;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (layers[i].size() != other.layers[i].size()) return false;
            for (std::size_t j = 0; j < layers[i].size(); ++j)
                if (layers[i][j].name != other.layers[i][j].name || layers[i][j].shape != other.layers[i][j].shape ||
                    layers[i][j].values.size() != other.layers[i][j].values.size())
                    return false;
        }
        return true;
    }

    /// Calls f(layer_index, array) for every parameter array in order.
    template <class F>
    void for_each(F&& f) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            for (auto& a : layers[i]) f(i, a);
    }
    template <class F>
    void for_each(F&& f) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            for (const auto& a : layers[i]) f(i, a);
    }

    bool all_finite() const {
        for (const auto& l : layers)
            for (const auto& a : l)
                for (auto v : a.values)
                    if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <class T>
ParamSet<T> zero_params(const Architecture& arch) {
    ParamSet<T> p;
    p.layers.resize(arch.layers.size());
    for (std::size_t i = 0; i < arch.layers.size(); ++i)
        for (auto& [name, shape] : arch.param_layout(i))
            p.layers[i].push_back({name, shape, AlignedVector<T>(numel(shape), T{0})});
    return p;
}

/// Partial derivatives of a scalar objective, congruent with the parameters they came from.
using GradientMap = ParamSet<float>;

/// Model value: architecture, float32 parameters and training provenance.
struct ClassifierState {
    Architecture arch;
    ParamSet<float> params;
    nlohmann::json metadata = nlohmann::json::object();

    std::size_t num_classes() const noexcept { return arch.num_classes; }
    /// Throws ContractError when the parameters do not match the architecture or are non-finite.
    void validate() const;
};

/// All-zero parameters.
ClassifierState zero_state(const Architecture& arch);
/// He-normal weights, zero biases; deterministic in seed.
ClassifierState init_state(const Architecture& arch, std::uint64_t seed);

// ---- Engine ---------------------------------------------------------------------------------

/// Intermediate values kept by forward() for backward().
template <class T>
struct Tape {
    Matrix<T> input;
    std::vector<Matrix<T>> outputs;             // post-activation output of every layer
    std::vector<Matrix<T>> columns;             // im2col buffers for conv layers
    std::vector<std::vector<std::int32_t>> argmax;  // maxpool routing
};

template <class T>
Matrix<T> forward(const Architecture& arch, const ParamSet<T>& params, const Matrix<T>& x, Tape<T>* tape = nullptr);

/// Back-propagates dlogits through a recorded tape. Either output may be null.
template <class T>
void backward(const Architecture& arch, const ParamSet<T>& params, const Tape<T>& tape, const Matrix<T>& dlogits,
              ParamSet<T>* dparams, Matrix<T>* dinput);

/// Scalar objective on a block of logits: returns the value and writes d value / d logits.
using LossHead = std::function<double(const Eigen::MatrixXd& logits, Eigen::MatrixXd& dlogits)>;

/// sum_i weights[i] * CE(logits_i, labels[i]).
LossHead weighted_ce_head(std::vector<int> labels, std::vector<double> weights);
/// sign * mean_i CE(logits_i, labels[i]).
LossHead mean_ce_head(std::vector<int> labels, double sign = 1.0);
/// sum_i ||g(x_i)||^2 on logits, or on softmax probabilities when `on_probabilities`.
LossHead squared_norm_head(bool on_probabilities = false);
LossHead constant_head(double value);

template <class T>
struct ValueAndGrad {
    double value = 0.0;
    ParamSet<T> grad;
};

template <class T>
ValueAndGrad<T> value_and_grad_params(const Architecture& arch, const ParamSet<T>& params, const Matrix<T>& x,
                                      const LossHead& head);

template <class T>
struct ValueAndInputGrad {
    double value = 0.0;
    Matrix<T> grad;
};

template <class T>
ValueAndInputGrad<T> value_and_grad_input(const Architecture& arch, const ParamSet<T>& params, const Matrix<T>& x,
                                          const LossHead& head);

// ---- State-level operations ------------------------------------------------------------------

/// Batch matrix of dataset rows (all rows when positions is empty).
Matrix<float> batch_matrix(const Dataset& ds, std::span<const std::size_t> positions = {});

/// Logits |batch| x C.
Matrix<float> forward(const ClassifierState& s, const Matrix<float>& batch);

/// Row-wise argmax, ties to the lowest class index.
std::vector<int> argmax_rows(const Matrix<float>& logits);
std::vector<int> predict(const ClassifierState& s, const Dataset& ds);

/// Fraction of rows predicted as `targets` (the dataset labels when omitted).
double accuracy(const ClassifierState& s, const Dataset& ds);
double accuracy(const ClassifierState& s, const Dataset& ds, std::span<const int> targets);

/// Gradient of head(g(batch)) w.r.t. the parameters; NumericError on a non-finite objective.
GradientMap grad_params(const ClassifierState& s, const Matrix<float>& batch, const LossHead& head);

enum class Direction { minimize, maximize };

/// Gradient of the summed CE toward `labels` w.r.t. the inputs, negated for Direction::maximize.
Matrix<float> grad_input(const ClassifierState& s, const Matrix<float>& x, std::span<const int> labels,
                         Direction direction = Direction::minimize);

/// PyTorch-style SGD: d = g + weight_decay * p; buf = momentum * buf + d; p -= lr * buf.
class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum, double weight_decay)
        : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}
    void step(ParamSet<float>& params, const ParamSet<float>& grad);

private:
    double lr_, momentum_, weight_decay_;
    ParamSet<float> buffer_;
    bool started_ = false;
};

struct OptimConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int epochs = 12;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

nlohmann::json optim_config_to_json(const OptimConfig& c);
OptimConfig optim_config_from_json(const nlohmann::json& j);

struct PretrainResult {
    ClassifierState state;
    double train_accuracy = 0.0;
    std::vector<double> epoch_loss;
};

/// Mini-batch SGD on mean CE with seeded per-epoch shuffling.
PretrainResult pretrain(const ClassifierState& s0, const Dataset& ds, const OptimConfig& cfg);

// ---- Persistence -----------------------------------------------------------------------------

/// Header JSON (kind, arch, num_classes, metadata, array table) followed by raw float32 blocks.
void save_checkpoint(const std::filesystem::path& path, const ClassifierState& s);
ClassifierState load_checkpoint(const std::filesystem::path& path);

}  // namespace unlearnkit
