// Architecture description and the templated forward/backward kernels.

#include <algorithm>
#include <cmath>
#include <limits>

#include "unlearnkit/model.hpp"

namespace unlearnkit {

std::string to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::maxpool: return "maxpool";
    }
    return "?";
}

std::string to_string(Activation act) { return act == Activation::relu ? "relu" : "none"; }

namespace {

LayerKind layer_kind_from_string(const std::string& s) {
    if (s == "dense") return LayerKind::dense;
    if (s == "conv2d") return LayerKind::conv2d;
    if (s == "maxpool") return LayerKind::maxpool;
    throw ContractError("unknown layer kind '" + s + "'");
}

Activation activation_from_string(const std::string& s) {
    if (s == "relu") return Activation::relu;
    if (s == "none") return Activation::none;
    throw ContractError("unknown activation '" + s + "'");
}

}  // namespace

void Architecture::resolve() {
    if (input_shape.empty() || numel(input_shape) == 0) throw ContractError("architecture has no input shape");
    if (layers.empty()) throw ContractError("architecture has no layers");
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        if (l.name.empty()) l.name = "layer" + std::to_string(i);
        l.in_shape = cur;
        switch (l.kind) {
            case LayerKind::dense:
                if (l.units == 0) throw ContractError("dense layer with zero units");
                cur = {l.units};
                break;
            case LayerKind::conv2d: {
                if (cur.size() != 3) throw ContractError("conv2d needs a height x width x channels input");
                if (l.units == 0 || l.kernel == 0) throw ContractError("conv2d with zero channels or kernel");
                const auto h = cur[0] + 2 * l.padding, w = cur[1] + 2 * l.padding;
                if (h < l.kernel || w < l.kernel) throw ContractError("conv2d kernel larger than its input");
                cur = {h - l.kernel + 1, w - l.kernel + 1, l.units};
                break;
            }
            case LayerKind::maxpool:
                if (cur.size() != 3) throw ContractError("maxpool needs a height x width x channels input");
                if (l.window == 0 || cur[0] < l.window || cur[1] < l.window)
                    throw ContractError("maxpool window larger than its input");
                if (l.activation != Activation::none) throw ContractError("maxpool takes no activation");
                cur = {cur[0] / l.window, cur[1] / l.window, cur[2]};
                break;
        }
        l.out_shape = cur;
    }
    if (num_classes < 1 || numel(cur) != num_classes)
        throw ContractError("final layer width " + std::to_string(numel(cur)) + " != num_classes " +
                            std::to_string(num_classes));
}

std::vector<std::pair<std::string, Shape>> Architecture::param_layout(std::size_t i) const {
    const auto& l = layers.at(i);
    switch (l.kind) {
        case LayerKind::dense: return {{"weight", {l.units, numel(l.in_shape)}}, {"bias", {l.units}}};
        case LayerKind::conv2d:
            return {{"weight", {l.units, l.kernel, l.kernel, l.in_shape[2]}}, {"bias", {l.units}}};
        case LayerKind::maxpool: return {};
    }
    return {};
}

std::vector<std::size_t> Architecture::capture_points() const {
    std::vector<std::size_t> pts;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
        if (layers[i].activation == Activation::relu) pts.push_back(i);
    pts.push_back(layers.size() - 1);
    return pts;
}

bool Architecture::operator==(const Architecture& o) const {
    if (input_shape != o.input_shape || num_classes != o.num_classes || layers.size() != o.layers.size())
        return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto &a = layers[i], &b = o.layers[i];
        if (a.kind != b.kind || a.activation != b.activation || a.units != b.units || a.kernel != b.kernel ||
            a.padding != b.padding || a.window != b.window)
            return false;
    }
    return true;
}

Architecture make_linear(std::size_t input_dim, std::size_t num_classes) {
    Architecture a;
    a.name = "linear";
    a.input_shape = {input_dim};
    a.num_classes = num_classes;
    a.layers = {{.name = "fc", .kind = LayerKind::dense, .units = num_classes}};
    a.resolve();
    return a;
}

Architecture make_mlp2(std::size_t input_dim, std::size_t num_classes, std::size_t hidden) {
    Architecture a;
    a.name = "mlp2";
    a.input_shape = {input_dim};
    a.num_classes = num_classes;
    a.layers = {
        {.name = "fc1", .kind = LayerKind::dense, .activation = Activation::relu, .units = hidden},
        {.name = "fc2", .kind = LayerKind::dense, .activation = Activation::relu, .units = hidden},
        {.name = "fc3", .kind = LayerKind::dense, .units = num_classes},
    };
    a.resolve();
    return a;
}

Architecture make_cnn_s(std::size_t num_classes, std::size_t height, std::size_t width, std::size_t channels) {
    Architecture a;
    a.name = "cnn_s";
    a.input_shape = {height, width, channels};
    a.num_classes = num_classes;
    a.layers = {
        {.name = "conv1", .kind = LayerKind::conv2d, .activation = Activation::relu, .units = 32},
        {.name = "pool1", .kind = LayerKind::maxpool},
        {.name = "conv2", .kind = LayerKind::conv2d, .activation = Activation::relu, .units = 64},
        {.name = "pool2", .kind = LayerKind::maxpool},
        {.name = "fc1", .kind = LayerKind::dense, .activation = Activation::relu, .units = 128},
        {.name = "fc2", .kind = LayerKind::dense, .units = num_classes},
    };
    a.resolve();
    return a;
}

Architecture make_architecture(const std::string& name, const Shape& input_shape, std::size_t num_classes) {
    if (name == "linear") return make_linear(numel(input_shape), num_classes);
    if (name == "mlp2") return make_mlp2(numel(input_shape), num_classes);
    if (name == "cnn_s") {
        if (input_shape.size() != 3) throw ArgumentError("cnn_s needs image-shaped inputs");
        return make_cnn_s(num_classes, input_shape[0], input_shape[1], input_shape[2]);
    }
    throw ArgumentError("unknown architecture '" + name + "'");
}

nlohmann::json architecture_to_json(const Architecture& arch) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : arch.layers) {
        nlohmann::json j{{"name", l.name},
                         {"kind", to_string(l.kind)},
                         {"activation", to_string(l.activation)},
                         {"in_shape", l.in_shape},
                         {"out_shape", l.out_shape}};
        if (l.kind == LayerKind::dense) j["units"] = l.units;
        if (l.kind == LayerKind::conv2d) {
            j["units"] = l.units;
            j["kernel"] = l.kernel;
            j["padding"] = l.padding;
        }
        if (l.kind == LayerKind::maxpool) j["window"] = l.window;
        layers.push_back(j);
    }
    return {{"name", arch.name}, {"input_shape", arch.input_shape}, {"num_classes", arch.num_classes},
            {"layers", layers}};
}

Architecture architecture_from_json(const nlohmann::json& j) {
    try {
        Architecture a;
        a.name = j.value("name", std::string{});
        a.input_shape = j.at("input_shape").get<Shape>();
        a.num_classes = j.at("num_classes").get<std::size_t>();
        for (const auto& lj : j.at("layers")) {
            LayerSpec l;
            l.name = lj.value("name", std::string{});
            l.kind = layer_kind_from_string(lj.at("kind").get<std::string>());
            l.activation = activation_from_string(lj.value("activation", std::string{"none"}));
            l.units = lj.value("units", std::size_t{0});
            l.kernel = lj.value("kernel", std::size_t{3});
            l.padding = lj.value("padding", std::size_t{0});
            l.window = lj.value("window", std::size_t{2});
            a.layers.push_back(l);
        }
        a.resolve();
        if (j.contains("layers"))
            for (std::size_t i = 0; i < a.layers.size(); ++i) {
                const auto& lj = j["layers"][i];
                if (lj.contains("out_shape") && lj["out_shape"].get<Shape>() != a.layers[i].out_shape)
                    throw ContractError("architecture descriptor shape mismatch at layer " + a.layers[i].name);
            }
        return a;
    } catch (const nlohmann::json::exception& e) {
        throw ContractError(std::string("malformed architecture descriptor: ") + e.what());
    }
}

// ---- Kernels --------------------------------------------------------------------------------

namespace {

template <class T>
using CMap = Eigen::Map<const Matrix<T>>;
template <class T>
using MMap = Eigen::Map<Matrix<T>>;
template <class T>
using CRowMap = Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>;

template <class T>
CMap<T> weight_matrix(const ParamArray<T>& w) {
    const auto rows = w.shape[0];
    return CMap<T>(w.values.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(w.values.size() / rows));
}

template <class T>
void im2col(const Matrix<T>& x, const LayerSpec& l, Matrix<T>& col) {
    const auto n = static_cast<std::size_t>(x.rows());
    const auto h = l.in_shape[0], w = l.in_shape[1], c = l.in_shape[2];
    const auto oh = l.out_shape[0], ow = l.out_shape[1], k = l.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(l.padding);
    col.resize(static_cast<Eigen::Index>(n * oh * ow), static_cast<Eigen::Index>(k * k * c));
    for (std::size_t b = 0; b < n; ++b) {
        const T* src = x.data() + b * h * w * c;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T* dst = col.data() + ((b * oh + oy) * ow + ox) * k * k * c;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
                    for (std::size_t kx = 0; kx < k; ++kx, dst += c) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
                        if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                            ix >= static_cast<std::ptrdiff_t>(w)) {
                            std::fill(dst, dst + c, T{0});
                        } else {
                            const T* p = src + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
                            std::copy(p, p + c, dst);
                        }
                    }
                }
            }
        }
    }
}

template <class T>
void col2im(const Matrix<T>& dcol, const LayerSpec& l, std::size_t n, Matrix<T>& dx) {
    const auto h = l.in_shape[0], w = l.in_shape[1], c = l.in_shape[2];
    const auto oh = l.out_shape[0], ow = l.out_shape[1], k = l.kernel;
    const auto pad = static_cast<std::ptrdiff_t>(l.padding);
    dx.setZero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(h * w * c));
    for (std::size_t b = 0; b < n; ++b) {
        T* dst_img = dx.data() + b * h * w * c;
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const T* src = dcol.data() + ((b * oh + oy) * ow + ox) * k * k * c;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy + ky) - pad;
                    for (std::size_t kx = 0; kx < k; ++kx, src += c) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox + kx) - pad;
                        if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                            ix >= static_cast<std::ptrdiff_t>(w))
                            continue;
                        T* p = dst_img + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
                        for (std::size_t ch = 0; ch < c; ++ch) p[ch] += src[ch];
                    }
                }
            }
        }
    }
}

template <class T>
void maxpool_forward(const Matrix<T>& x, const LayerSpec& l, Matrix<T>& y, std::vector<std::int32_t>* argmax) {
    const auto n = static_cast<std::size_t>(x.rows());
    const auto h = l.in_shape[0], w = l.in_shape[1], c = l.in_shape[2];
    const auto oh = l.out_shape[0], ow = l.out_shape[1], s = l.window;
    y.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(oh * ow * c));
    if (argmax) argmax->resize(n * oh * ow * c);
    for (std::size_t b = 0; b < n; ++b) {
        const T* src = x.data() + b * h * w * c;
        T* dst = y.data() + b * oh * ow * c;
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    std::size_t best = ((oy * s) * w + ox * s) * c + ch;
                    for (std::size_t dy = 0; dy < s; ++dy)
                        for (std::size_t dx = 0; dx < s; ++dx) {
                            const std::size_t idx = ((oy * s + dy) * w + (ox * s + dx)) * c + ch;
                            if (src[idx] > src[best]) best = idx;
                        }
                    const std::size_t o = (oy * ow + ox) * c + ch;
                    dst[o] = src[best];
                    if (argmax) (*argmax)[b * oh * ow * c + o] = static_cast<std::int32_t>(best);
                }
    }
}

template <class T>
void layer_forward(const LayerSpec& l, const std::vector<ParamArray<T>>& p, const Matrix<T>& x, Matrix<T>& y,
                   Matrix<T>* col_out, std::vector<std::int32_t>* argmax) {
    const auto n = x.rows();
    switch (l.kind) {
        case LayerKind::dense: {
            const auto w = weight_matrix(p[0]);
            y.resize(n, static_cast<Eigen::Index>(l.units));
            y.noalias() = x * w.transpose();
            y.rowwise() += CRowMap<T>(p[1].values.data(), static_cast<Eigen::Index>(l.units));
            break;
        }
        case LayerKind::conv2d: {
            Matrix<T> local;
            Matrix<T>& col = col_out ? *col_out : local;
            im2col(x, l, col);
            const auto w = weight_matrix(p[0]);
            y.resize(n, static_cast<Eigen::Index>(numel(l.out_shape)));
            MMap<T> ym(y.data(), col.rows(), static_cast<Eigen::Index>(l.units));
            ym.noalias() = col * w.transpose();
            ym.rowwise() += CRowMap<T>(p[1].values.data(), static_cast<Eigen::Index>(l.units));
            break;
        }
        case LayerKind::maxpool: maxpool_forward(x, l, y, argmax); break;
    }
    if (l.activation == Activation::relu) y = y.cwiseMax(T{0});
}

}  // namespace

template <class T>
Matrix<T> forward(const Architecture& arch, const ParamSet<T>& params, const Matrix<T>& x, Tape<T>* tape) {
    if (static_cast<std::size_t>(x.cols()) != arch.input_dim())
        throw ContractError("batch width " + std::to_string(x.cols()) + " does not match input shape " +
                            shape_str(arch.input_shape));
    if (params.layers.size() != arch.layers.size()) throw ContractError("parameters do not match architecture");
    const std::size_t nl = arch.layers.size();
    if (tape) {
        tape->input = x;
        tape->outputs.assign(nl, {});
        tape->columns.assign(nl, {});
        tape->argmax.assign(nl, {});
        for (std::size_t i = 0; i < nl; ++i) {
            const Matrix<T>& in = i == 0 ? tape->input : tape->outputs[i - 1];
            layer_forward(arch.layers[i], params.layers[i], in, tape->outputs[i], &tape->columns[i],
                          &tape->argmax[i]);
        }
        return tape->outputs.back();
    }
    Matrix<T> cur = x, next;
    for (std::size_t i = 0; i < nl; ++i) {
        layer_forward<T>(arch.layers[i], params.layers[i], cur, next, nullptr, nullptr);
        cur.swap(next);
    }
    return cur;
}

template <class T>
void backward(const Architecture& arch, const ParamSet<T>& params, const Tape<T>& tape, const Matrix<T>& dlogits,
              ParamSet<T>* dparams, Matrix<T>* dinput) {
    const std::size_t nl = arch.layers.size();
    if (tape.outputs.size() != nl) throw ContractError("tape does not match architecture");
    if (dparams && !dparams->congruent(params)) *dparams = params.zeros_like();
    const auto n = tape.input.rows();
    Matrix<T> grad = dlogits, dx;
    for (std::size_t ii = nl; ii-- > 0;) {
        const auto& l = arch.layers[ii];
        const Matrix<T>& in = ii == 0 ? tape.input : tape.outputs[ii - 1];
        const Matrix<T>& out = tape.outputs[ii];
        if (l.activation == Activation::relu) grad.array() *= (out.array() > T{0}).template cast<T>();
        const bool need_dx = ii > 0 || dinput != nullptr;
        switch (l.kind) {
            case LayerKind::dense: {
                const auto w = weight_matrix(params.layers[ii][0]);
                if (dparams) {
                    auto& gw = (*dparams).layers[ii][0].values;
                    auto& gb = (*dparams).layers[ii][1].values;
                    MMap<T>(gw.data(), w.rows(), w.cols()).noalias() = grad.transpose() * in;
                    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), w.rows()) = grad.colwise().sum();
                }
                if (need_dx) dx.noalias() = grad * w;
                break;
            }
            case LayerKind::conv2d: {
                const auto w = weight_matrix(params.layers[ii][0]);
                const Matrix<T>& col = tape.columns[ii];
                CMap<T> gm(grad.data(), col.rows(), static_cast<Eigen::Index>(l.units));
                if (dparams) {
                    auto& gw = (*dparams).layers[ii][0].values;
                    auto& gb = (*dparams).layers[ii][1].values;
                    MMap<T>(gw.data(), w.rows(), w.cols()).noalias() = gm.transpose() * col;
                    Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb.data(), w.rows()) = gm.colwise().sum();
                }
                if (need_dx) {
                    Matrix<T> dcol = gm * w;
                    col2im(dcol, l, static_cast<std::size_t>(n), dx);
                }
                break;
            }
            case LayerKind::maxpool: {
                if (!need_dx) break;
                const auto& route = tape.argmax[ii];
                const auto out_w = static_cast<std::size_t>(grad.cols());
                dx.setZero(n, static_cast<Eigen::Index>(numel(l.in_shape)));
                for (Eigen::Index b = 0; b < n; ++b) {
                    const T* g = grad.data() + b * grad.cols();
                    T* d = dx.data() + b * dx.cols();
                    const std::int32_t* r = route.data() + static_cast<std::size_t>(b) * out_w;
                    for (std::size_t o = 0; o < out_w; ++o) d[r[o]] += g[o];
                }
                break;
            }
        }
        if (!need_dx) break;
        grad.swap(dx);
    }
    if (dinput) *dinput = std::move(grad);
}

// ---- Loss heads -----------------------------------------------------------------------------

namespace {

// Row-wise log-softmax and softmax in double.
void softmax_row(const Eigen::MatrixXd& z, Eigen::Index i, Eigen::VectorXd& p, double& lse) {
    const double m = z.row(i).maxCoeff();
    p = (z.row(i).array() - m).exp().transpose();
    const double s = p.sum();
    lse = m + std::log(s);
    p /= s;
}

}  // namespace

LossHead weighted_ce_head(std::vector<int> labels, std::vector<double> weights) {
    if (labels.size() != weights.size()) throw ContractError("labels and weights differ in length");
    return [labels = std::move(labels), weights = std::move(weights)](const Eigen::MatrixXd& z,
                                                                      Eigen::MatrixXd& dz) {
        if (static_cast<std::size_t>(z.rows()) != labels.size())
            throw ContractError("loss head sized for a different batch");
        dz.setZero(z.rows(), z.cols());
        double total = 0.0;
        Eigen::VectorXd p;
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            const int y = labels[static_cast<std::size_t>(i)];
            if (y < 0 || y >= z.cols()) throw ArgumentError("label outside [0, num_classes)");
            double lse = 0.0;
            softmax_row(z, i, p, lse);
            const double w = weights[static_cast<std::size_t>(i)];
            total += w * (lse - z(i, y));
            p(y) -= 1.0;
            dz.row(i) = w * p.transpose();
        }
        return total;
    };
}

LossHead mean_ce_head(std::vector<int> labels, double sign) {
    const auto n = labels.size();
    std::vector<double> w(n, n ? sign / static_cast<double>(n) : 0.0);
    return weighted_ce_head(std::move(labels), std::move(w));
}

LossHead squared_norm_head(bool on_probabilities) {
    return [on_probabilities](const Eigen::MatrixXd& z, Eigen::MatrixXd& dz) {
        dz.resize(z.rows(), z.cols());
        if (!on_probabilities) {
            dz = 2.0 * z;
            return z.squaredNorm();
        }
        double total = 0.0;
        Eigen::VectorXd p;
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            double lse = 0.0;
            softmax_row(z, i, p, lse);
            const double sq = p.squaredNorm();
            total += sq;
            dz.row(i) = (2.0 * p.array() * (p.array() - sq)).matrix().transpose();
        }
        return total;
    };
}

LossHead constant_head(double value) {
    return [value](const Eigen::MatrixXd& z, Eigen::MatrixXd& dz) {
        dz.setZero(z.rows(), z.cols());
        return value;
    };
}

namespace {

template <class T>
Matrix<T> apply_head(const Matrix<T>& logits, const LossHead& head, double& value) {
    const Eigen::MatrixXd z = logits.template cast<double>();
    Eigen::MatrixXd dz;
    value = head(z, dz);
    if (!std::isfinite(value)) throw NumericError("objective is not finite");
    if (!dz.allFinite()) throw NumericError("objective gradient is not finite");
    return dz.cast<T>();
}

}  // namespace

template <class T>
ValueAndGrad<T> value_and_grad_params(const Architecture& arch, const ParamSet<T>& params, const Matrix<T>& x,
                                      const LossHead& head) {
    Tape<T> tape;
    const Matrix<T> logits = forward(arch, params, x, &tape);
    ValueAndGrad<T> out;
    const Matrix<T> dz = apply_head(logits, head, out.value);
    out.grad = params.zeros_like();
    backward<T>(arch, params, tape, dz, &out.grad, nullptr);
    return out;
}

template <class T>
ValueAndInputGrad<T> value_and_grad_input(const Architecture& arch, const ParamSet<T>& params, const Matrix<T>& x,
                                          const LossHead& head) {
    Tape<T> tape;
    const Matrix<T> logits = forward(arch, params, x, &tape);
    ValueAndInputGrad<T> out;
    const Matrix<T> dz = apply_head(logits, head, out.value);
    backward<T>(arch, params, tape, dz, nullptr, &out.grad);
    return out;
}

#define UNLEARNKIT_INSTANTIATE(T)                                                                              \
    template Matrix<T> forward<T>(const Architecture&, const ParamSet<T>&, const Matrix<T>&, Tape<T>*);        \
    template void backward<T>(const Architecture&, const ParamSet<T>&, const Tape<T>&, const Matrix<T>&,       \
                              ParamSet<T>*, Matrix<T>*);                                                       \
    template ValueAndGrad<T> value_and_grad_params<T>(const Architecture&, const ParamSet<T>&, const Matrix<T>&, \
                                                      const LossHead&);                                        \
    template ValueAndInputGrad<T> value_and_grad_input<T>(const Architecture&, const ParamSet<T>&,             \
                                                          const Matrix<T>&, const LossHead&);

UNLEARNKIT_INSTANTIATE(float)
UNLEARNKIT_INSTANTIATE(double)

#undef UNLEARNKIT_INSTANTIATE

}  // namespace unlearnkit
