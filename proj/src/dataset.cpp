#include "unlearnkit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "binary_io.hpp"
#include "unlearnkit/errors.hpp"
#include "unlearnkit/rng.hpp"

namespace unlearnkit {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t Dataset::index_of(InstanceId id) const {
    auto it = std::find(ids.begin(), ids.end(), id);
    return it == ids.end() ? npos : static_cast<std::size_t>(it - ids.begin());
}

void Dataset::validate() const {
    if (num_classes == 0) throw ArgumentError("dataset has zero classes");
    if (shape.empty() || dim() == 0) throw ArgumentError("dataset has an empty example shape");
    if (ids.size() != labels.size() || inputs.size() != labels.size() * dim())
        throw ArgumentError("dataset arrays disagree in length");
    std::unordered_set<InstanceId> seen;
    seen.reserve(ids.size());
    for (auto id : ids)
        if (!seen.insert(id).second) throw ArgumentError("duplicate instance id " + std::to_string(id));
    for (auto y : labels)
        if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
            throw ArgumentError("label " + std::to_string(y) + " outside [0, num_classes)");
    for (auto v : inputs) {
        if (!std::isfinite(v)) throw ArgumentError("non-finite input value");
        if (image && (v < 0.0f || v > 1.0f)) throw ArgumentError("image value outside [0,1]");
    }
}

Dataset subset(const Dataset& ds, std::span<const std::size_t> positions) {
    Dataset out;
    out.shape = ds.shape;
    out.num_classes = ds.num_classes;
    out.image = ds.image;
    const auto d = ds.dim();
    out.inputs.reserve(positions.size() * d);
    out.labels.reserve(positions.size());
    out.ids.reserve(positions.size());
    for (auto p : positions) {
        if (p >= ds.size()) throw ArgumentError("subset position out of range");
        auto r = ds.row(p);
        out.inputs.insert(out.inputs.end(), r.begin(), r.end());
        out.labels.push_back(ds.labels[p]);
        out.ids.push_back(ds.ids[p]);
    }
    return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
    if (a.shape != b.shape || a.num_classes != b.num_classes)
        throw ArgumentError("cannot concatenate datasets of different shape or class count");
    Dataset out = a;
    out.inputs.insert(out.inputs.end(), b.inputs.begin(), b.inputs.end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    out.ids.insert(out.ids.end(), b.ids.begin(), b.ids.end());
    return out;
}

std::string to_string(ForgetMode mode) {
    return mode == ForgetMode::misclassify ? "misclassify" : "relabel";
}

ForgetMode forget_mode_from_string(const std::string& s) {
    if (s == "misclassify") return ForgetMode::misclassify;
    if (s == "relabel") return ForgetMode::relabel;
    throw ArgumentError("unknown forget mode '" + s + "'");
}

void ForgetManifest::validate_against(const Dataset& ds) const {
    std::unordered_map<InstanceId, std::size_t> pos;
    pos.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) pos.emplace(ds.ids[i], i);
    std::unordered_set<InstanceId> seen;
    for (auto id : ids) {
        if (!pos.count(id)) throw ManifestError("manifest id " + std::to_string(id) + " not in dataset");
        if (!seen.insert(id).second) throw ManifestError("duplicate manifest id " + std::to_string(id));
    }
    if (mode == ForgetMode::misclassify) {
        if (!relabel_targets.empty()) throw ManifestError("misclassify manifest carries relabel targets");
        return;
    }
    for (auto id : ids) {
        auto it = relabel_targets.find(id);
        if (it == relabel_targets.end())
            throw ManifestError("relabel manifest lacks a target for id " + std::to_string(id));
        const int target = it->second;
        if (target < 0 || static_cast<std::size_t>(target) >= ds.num_classes)
            throw ManifestError("relabel target out of range for id " + std::to_string(id));
        if (target == ds.labels[pos.at(id)])
            throw ManifestError("relabel target equals the original label for id " + std::to_string(id));
    }
    if (relabel_targets.size() != ids.size()) throw ManifestError("relabel targets for ids outside the manifest");
}

std::vector<double> synthetic_class_mean(std::size_t cls, std::size_t num_classes, std::size_t dim) {
    std::vector<double> mean(dim, 0.0);
    if (dim >= num_classes) {
        mean[cls] = 1.0;
    } else {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(num_classes);
        mean[0] = std::cos(angle);
        mean[1] = std::sin(angle);
    }
    return mean;
}

Dataset make_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t dim, double spread,
                       std::uint64_t seed) {
    if (num_classes < 2) throw ArgumentError("make_synthetic needs at least 2 classes");
    if (per_class < 1) throw ArgumentError("make_synthetic needs per_class >= 1");
    if (dim < 2) throw ArgumentError("make_synthetic needs dim >= 2");
    if (!(spread > 0.0)) throw ArgumentError("make_synthetic needs spread > 0");

    Dataset ds;
    ds.shape = {dim};
    ds.num_classes = num_classes;
    Rng rng(derive_seed(seed, {stream::synth}));
    std::normal_distribution<double> normal(0.0, 1.0);
    ds.inputs.reserve(num_classes * per_class * dim);
    for (std::size_t c = 0; c < num_classes; ++c) {
        const auto mean = synthetic_class_mean(c, num_classes, dim);
        for (std::size_t i = 0; i < per_class; ++i) {
            for (std::size_t j = 0; j < dim; ++j)
                ds.inputs.push_back(static_cast<float>(mean[j] + spread * normal(rng)));
            ds.labels.push_back(static_cast<int>(c));
            ds.ids.push_back(static_cast<InstanceId>(ds.ids.size()));
        }
    }
    return ds;
}

namespace {

struct Bump {
    double cy, cx, inv_two_var;
    std::vector<double> colour;
};

std::vector<Bump> random_bumps(Rng& rng, std::size_t count, const SyntheticImageConfig& cfg, double min_width,
                               double max_width) {
    std::uniform_real_distribution<double> uy(0.0, static_cast<double>(cfg.height));
    std::uniform_real_distribution<double> ux(0.0, static_cast<double>(cfg.width));
    std::uniform_real_distribution<double> uw(min_width, max_width);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<Bump> bumps(count);
    for (auto& b : bumps) {
        b.cy = uy(rng);
        b.cx = ux(rng);
        const double w = uw(rng);
        b.inv_two_var = 1.0 / (2.0 * w * w);
        b.colour.resize(cfg.channels);
        for (auto& c : b.colour) c = normal(rng);
    }
    return bumps;
}

// Renders bumps into an HWC field.
std::vector<double> render(const std::vector<Bump>& bumps, const SyntheticImageConfig& cfg) {
    std::vector<double> field(cfg.height * cfg.width * cfg.channels, 0.0);
    for (const auto& b : bumps) {
        for (std::size_t y = 0; y < cfg.height; ++y) {
            for (std::size_t x = 0; x < cfg.width; ++x) {
                const double dy = static_cast<double>(y) - b.cy, dx = static_cast<double>(x) - b.cx;
                const double g = std::exp(-(dy * dy + dx * dx) * b.inv_two_var);
                double* px = field.data() + (y * cfg.width + x) * cfg.channels;
                for (std::size_t c = 0; c < cfg.channels; ++c) px[c] += g * b.colour[c];
            }
        }
    }
    return field;
}

// Zero mean, unit max-abs.
void standardize(std::vector<double>& field) {
    double mean = 0.0;
    for (auto v : field) mean += v;
    mean /= static_cast<double>(field.size());
    double peak = 0.0;
    for (auto& v : field) {
        v -= mean;
        peak = std::max(peak, std::abs(v));
    }
    if (peak > 0.0)
        for (auto& v : field) v /= peak;
}

}  // namespace

Dataset make_synthetic_images(const SyntheticImageConfig& cfg, std::uint64_t seed) {
    if (cfg.num_classes < 2) throw ArgumentError("synthetic images need at least 2 classes");
    if (cfg.per_class < 1 || cfg.height < 4 || cfg.width < 4 || cfg.channels < 1)
        throw ArgumentError("invalid synthetic image size");
    if (cfg.contrast < 0.0 || cfg.variation < 0.0 || cfg.noise < 0.0)
        throw ArgumentError("synthetic image amplitudes must be non-negative");
    if (cfg.prototypes < 1 || cfg.prototype_contrast < 0.0) throw ArgumentError("invalid synthetic prototypes");
    if (cfg.features < 1 || !(cfg.feature_width_min > 0.0) || cfg.feature_width_max < cfg.feature_width_min)
        throw ArgumentError("invalid synthetic template features");

    auto make_field = [&](std::initializer_list<std::uint64_t> parts) {
        Rng trng(derive_seed(cfg.template_seed, parts));
        auto field = render(random_bumps(trng, cfg.features, cfg, cfg.feature_width_min, cfg.feature_width_max), cfg);
        standardize(field);
        return field;
    };
    std::vector<std::vector<double>> templates;
    std::vector<std::vector<std::vector<double>>> modes(cfg.num_classes);
    for (std::size_t c = 0; c < cfg.num_classes; ++c) {
        templates.push_back(make_field({stream::template_field, c}));
        if (cfg.prototype_contrast > 0.0)
            for (std::size_t p = 0; p < cfg.prototypes; ++p)
                modes[c].push_back(make_field({stream::template_field, c, p + 1}));
    }

    Dataset ds;
    ds.shape = {cfg.height, cfg.width, cfg.channels};
    ds.num_classes = cfg.num_classes;
    ds.image = true;
    const std::size_t d = ds.dim();
    ds.inputs.reserve(cfg.num_classes * cfg.per_class * d);
    Rng rng(derive_seed(seed, {stream::synth}));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < cfg.per_class; ++i) {
        for (std::size_t c = 0; c < cfg.num_classes; ++c) {
            auto deform = render(random_bumps(rng, 3, cfg, 3.0, 8.0), cfg);
            standardize(deform);
            const double* mode = modes[c].empty() ? nullptr : modes[c][i % modes[c].size()].data();
            for (std::size_t j = 0; j < d; ++j) {
                double v = 0.5 + cfg.contrast * templates[c][j] + cfg.variation * deform[j] + cfg.noise * normal(rng);
                if (mode) v += cfg.prototype_contrast * mode[j];
                ds.inputs.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
            }
            ds.labels.push_back(static_cast<int>(c));
            ds.ids.push_back(cfg.first_id + static_cast<InstanceId>(ds.ids.size()));
        }
    }
    return ds;
}

ForgetManifest select_forget_set(const Dataset& ds, std::size_t k, ForgetMode mode, std::uint64_t seed) {
    if (k < 1 || k > ds.size())
        throw ArgumentError("forget set size " + std::to_string(k) + " outside [1, " + std::to_string(ds.size()) +
                            "]");
    if (mode == ForgetMode::relabel && ds.num_classes < 2)
        throw ArgumentError("relabel mode needs at least 2 classes");

    // Reservoir sampling (Algorithm R) over positions.
    std::vector<std::size_t> pos(k);
    for (std::size_t i = 0; i < k; ++i) pos[i] = i;
    Rng rng(derive_seed(seed, {stream::selection}));
    for (std::size_t i = k; i < ds.size(); ++i) {
        std::uniform_int_distribution<std::size_t> pick(0, i);
        const auto j = pick(rng);
        if (j < k) pos[j] = i;
    }

    ForgetManifest m;
    m.mode = mode;
    m.seed = seed;
    for (std::size_t i = 0; i < k; ++i) m.ids.push_back(ds.ids[pos[i]]);
    if (mode == ForgetMode::relabel) {
        Rng trng(derive_seed(seed, {stream::relabel}));
        std::uniform_int_distribution<int> other(0, static_cast<int>(ds.num_classes) - 2);
        for (std::size_t i = 0; i < k; ++i) {
            const int y = ds.labels[pos[i]];
            int t = other(trng);
            if (t >= y) ++t;
            m.relabel_targets[m.ids[i]] = t;
        }
    }
    return m;
}

std::pair<Dataset, Dataset> split_remaining(const Dataset& ds, const ForgetManifest& m) {
    std::unordered_map<InstanceId, std::size_t> pos;
    pos.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) pos.emplace(ds.ids[i], i);
    std::vector<std::size_t> forget;
    std::vector<char> taken(ds.size(), 0);
    for (auto id : m.ids) {
        auto it = pos.find(id);
        if (it == pos.end()) throw ManifestError("manifest id " + std::to_string(id) + " not in dataset");
        if (taken[it->second]) throw ManifestError("duplicate manifest id " + std::to_string(id));
        taken[it->second] = 1;
        forget.push_back(it->second);
    }
    std::vector<std::size_t> remain;
    remain.reserve(ds.size() - forget.size());
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (!taken[i]) remain.push_back(i);
    return {subset(ds, forget), subset(ds, remain)};
}

std::vector<int> forget_targets(const Dataset& forget, const ForgetManifest& m) {
    if (m.mode == ForgetMode::misclassify) return forget.labels;
    std::vector<int> t;
    t.reserve(forget.size());
    for (auto id : forget.ids) {
        auto it = m.relabel_targets.find(id);
        if (it == m.relabel_targets.end())
            throw ManifestError("relabel manifest lacks a target for id " + std::to_string(id));
        t.push_back(it->second);
    }
    return t;
}

nlohmann::json manifest_to_json(const ForgetManifest& m) {
    nlohmann::json j;
    j["mode"] = to_string(m.mode);
    j["seed"] = m.seed;
    j["ids"] = m.ids;
    if (m.mode == ForgetMode::relabel) {
        nlohmann::json targets = nlohmann::json::object();
        for (const auto& [id, t] : m.relabel_targets) targets[std::to_string(id)] = t;
        j["relabel_targets"] = targets;
    }
    return j;
}

ForgetManifest manifest_from_json(const nlohmann::json& j) {
    try {
        ForgetManifest m;
        m.mode = forget_mode_from_string(j.at("mode").get<std::string>());
        m.seed = j.value("seed", std::uint64_t{0});
        m.ids = j.at("ids").get<std::vector<InstanceId>>();
        if (j.contains("relabel_targets"))
            for (const auto& [key, value] : j.at("relabel_targets").items())
                m.relabel_targets[std::stoll(key)] = value.get<int>();
        if (m.mode == ForgetMode::relabel && m.relabel_targets.empty())
            throw ManifestError("relabel manifest without relabel_targets");
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError(std::string("malformed manifest: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw ManifestError("malformed manifest: non-integer relabel target key");
    }
}

void save_manifest(const std::filesystem::path& path, const ForgetManifest& m) {
    detail::write_json_file(path, manifest_to_json(m));
}

ForgetManifest load_manifest(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("manifest not found: " + path.string());
    return manifest_from_json(detail::read_json_file(path));
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
    std::filesystem::create_directories(dir);
    nlohmann::json index;
    index["num_classes"] = ds.num_classes;
    index["shape"] = ds.shape;
    index["count"] = ds.size();
    index["image"] = ds.image;
    detail::write_json_file(dir / "index.json", index);
    detail::write_raw_file(dir / "inputs.f32", std::span<const float>(ds.inputs));
    detail::write_raw_file(dir / "labels.i32", std::span<const int>(ds.labels));
    detail::write_raw_file(dir / "ids.i64", std::span<const InstanceId>(ds.ids));
}

Dataset load_dataset(const std::filesystem::path& dir) {
    if (!std::filesystem::exists(dir / "index.json")) throw IoError("no dataset index in " + dir.string());
    const auto index = detail::read_json_file(dir / "index.json");
    Dataset ds;
    try {
        ds.num_classes = index.at("num_classes").get<std::size_t>();
        ds.shape = index.at("shape").get<Shape>();
        ds.image = index.value("image", false);
        const auto count = index.at("count").get<std::size_t>();
        ds.inputs = detail::read_raw_file<float>(dir / "inputs.f32", count * numel(ds.shape));
        ds.labels = detail::read_raw_file<int>(dir / "labels.i32", count);
        if (std::filesystem::exists(dir / "ids.i64")) {
            ds.ids = detail::read_raw_file<InstanceId>(dir / "ids.i64", count);
        } else {
            ds.ids.resize(count);
            for (std::size_t i = 0; i < count; ++i) ds.ids[i] = static_cast<InstanceId>(i);
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed dataset index in " + dir.string() + ": " + e.what());
    }
    ds.validate();
    return ds;
}

Dataset load_cifar10_binary(const std::vector<std::filesystem::path>& files, InstanceId first_id) {
    constexpr std::size_t side = 32, planes = 3, plane = side * side, record = 1 + planes * plane;
    Dataset ds;
    ds.shape = {side, side, planes};
    ds.num_classes = 10;
    ds.image = true;
    std::vector<unsigned char> buf(record);
    for (const auto& path : files) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open " + path.string());
        while (in.read(reinterpret_cast<char*>(buf.data()), record)) {
            if (buf[0] >= 10) throw IoError("label byte out of range in " + path.string());
            ds.labels.push_back(buf[0]);
            ds.ids.push_back(first_id + static_cast<InstanceId>(ds.ids.size()));
            for (std::size_t p = 0; p < plane; ++p)
                for (std::size_t c = 0; c < planes; ++c)
                    ds.inputs.push_back(static_cast<float>(buf[1 + c * plane + p]) / 255.0f);
        }
        if (in.gcount() != 0) throw IoError("truncated CIFAR record in " + path.string());
    }
    return ds;
}

}  // namespace unlearnkit
