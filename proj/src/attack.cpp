#include "unlearnkit/attack.hpp"

#include <algorithm>
#include <cmath>

#include "unlearnkit/blob.hpp"
#include "unlearnkit/errors.hpp"
#include "unlearnkit/rng.hpp"

namespace unlearnkit {

void AttackConfig::validate() const {
    if (!(epsilon > 0.0)) throw ArgumentError("attack epsilon must be > 0");
    if (iterations < 1) throw ArgumentError("attack iterations must be >= 1");
    if (!(step_size >= 0.0)) throw ArgumentError("attack step size must be >= 0");
}

nlohmann::json attack_config_to_json(const AttackConfig& c) {
    return {{"epsilon", c.epsilon},           {"step_size", c.step_size},       {"iterations", c.iterations},
            {"random_start", c.random_start}, {"clamp_pixels", c.clamp_pixels}, {"seed", c.seed}};
}

AttackConfig attack_config_from_json(const nlohmann::json& j) {
    AttackConfig c;
    c.epsilon = j.value("epsilon", c.epsilon);
    c.step_size = j.value("step_size", c.step_size);
    c.iterations = j.value("iterations", c.iterations);
    c.random_start = j.value("random_start", c.random_start);
    c.clamp_pixels = j.value("clamp_pixels", c.clamp_pixels);
    c.seed = j.value("seed", c.seed);
    return c;
}

std::string to_string(TargetPolicy p) { return p == TargetPolicy::per_image ? "per_image" : "per_example"; }

TargetPolicy target_policy_from_string(const std::string& s) {
    if (s == "per_image") return TargetPolicy::per_image;
    if (s == "per_example") return TargetPolicy::per_example;
    throw ArgumentError("unknown target policy '" + s + "'");
}

namespace {

constexpr Eigen::Index kChunk = 128;

// Uniform point in the L2 ball: Gaussian direction, radius eps * u^(1/d).
void random_ball_offset(std::uint64_t seed, double eps, float* out, std::size_t d) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> g(d);
    double norm = 0.0;
    for (auto& v : g) {
        v = normal(rng);
        norm += v * v;
    }
    norm = std::sqrt(norm);
    const double radius = eps * std::pow(unif(rng), 1.0 / static_cast<double>(d));
    for (std::size_t j = 0; j < d; ++j) out[j] = static_cast<float>(norm > 0.0 ? g[j] / norm * radius : 0.0);
}

// Projects row z onto the eps-ball around x, then optionally into [0,1].
void project_row(const float* x, float* z, std::size_t d, double eps, bool clamp) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(z[j]) - x[j];
        sq += diff * diff;
    }
    const double norm = std::sqrt(sq);
    if (norm > eps) {
        const double scale = eps / norm;
        for (std::size_t j = 0; j < d; ++j)
            z[j] = static_cast<float>(x[j] + (static_cast<double>(z[j]) - x[j]) * scale);
    }
    if (clamp)
        for (std::size_t j = 0; j < d; ++j) z[j] = std::clamp(z[j], 0.0f, 1.0f);
}

Matrix<float> attack_chunk(const ClassifierState& s, const Matrix<float>& x, std::span<const int> targets,
                           const AttackConfig& cfg, std::span<const std::uint64_t> seeds) {
    const auto n = x.rows();
    const auto d = static_cast<std::size_t>(x.cols());
    Matrix<float> z = x;
    if (cfg.random_start) {
        std::vector<float> offset(d);
        for (Eigen::Index r = 0; r < n; ++r) {
            random_ball_offset(seeds[static_cast<std::size_t>(r)], cfg.epsilon, offset.data(), d);
            float* zr = z.data() + r * x.cols();
            for (std::size_t j = 0; j < d; ++j) zr[j] += offset[j];
            project_row(x.data() + r * x.cols(), zr, d, cfg.epsilon, cfg.clamp_pixels);
        }
    }
    const auto head = weighted_ce_head({targets.begin(), targets.end()}, std::vector<double>(targets.size(), 1.0));
    for (int it = 0; it < cfg.iterations; ++it) {
        const auto vg = value_and_grad_input<float>(s.arch, s.params, z, head);
        if (!vg.grad.allFinite()) throw NumericError("attack gradient is not finite");
        for (Eigen::Index r = 0; r < n; ++r) {
            const double gnorm = vg.grad.row(r).template cast<double>().norm();
            const double scale = cfg.step_size / std::max(gnorm, 1e-12);
            float* zr = z.data() + r * x.cols();
            const float* gr = vg.grad.data() + r * x.cols();
            for (std::size_t j = 0; j < d; ++j) zr[j] = static_cast<float>(zr[j] - scale * gr[j]);
            project_row(x.data() + r * x.cols(), zr, d, cfg.epsilon, cfg.clamp_pixels);
        }
    }
    return z;
}

int sample_other_class(Rng& rng, int y, std::size_t num_classes) {
    std::uniform_int_distribution<int> other(0, static_cast<int>(num_classes) - 2);
    int t = other(rng);
    return t >= y ? t + 1 : t;
}

}  // namespace

Matrix<float> pgd_l2_targeted_batch(const ClassifierState& s, const Matrix<float>& x, std::span<const int> targets,
                                    const AttackConfig& cfg, std::span<const std::uint64_t> start_seeds) {
    cfg.validate();
    if (static_cast<std::size_t>(x.cols()) != s.arch.input_dim())
        throw ContractError("attack input does not match the model input shape");
    if (targets.size() != static_cast<std::size_t>(x.rows()) || start_seeds.size() != targets.size())
        throw ContractError("one target and one seed per row expected");
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= s.num_classes())
            throw ArgumentError("attack target " + std::to_string(t) + " outside [0, num_classes)");
    if (cfg.clamp_pixels)
        for (Eigen::Index i = 0; i < x.size(); ++i)
            if (x.data()[i] < 0.0f || x.data()[i] > 1.0f)
                throw ArgumentError("attack input outside [0,1] with pixel clamping enabled");

    Matrix<float> out(x.rows(), x.cols());
    for (Eigen::Index start = 0; start < x.rows(); start += kChunk) {
        const auto len = std::min(kChunk, x.rows() - start);
        const Matrix<float> xs = x.middleRows(start, len);
        const auto sz = static_cast<std::size_t>(start);
        out.middleRows(start, len) = attack_chunk(s, xs, targets.subspan(sz, static_cast<std::size_t>(len)), cfg,
                                                  start_seeds.subspan(sz, static_cast<std::size_t>(len)));
    }
    return out;
}

std::vector<float> pgd_l2_targeted(const ClassifierState& s, std::span<const float> x, int y_bar,
                                   const AttackConfig& cfg) {
    Matrix<float> row(1, static_cast<Eigen::Index>(x.size()));
    std::copy(x.begin(), x.end(), row.data());
    const int target[1] = {y_bar};
    const std::uint64_t seed[1] = {derive_seed(cfg.seed, {stream::attack_start})};
    const auto z = pgd_l2_targeted_batch(s, row, target, cfg, seed);
    return {z.data(), z.data() + z.size()};
}

AdversarialSet generate_adversarial_set(const ClassifierState& s, const Dataset& forget, std::size_t n_adv,
                                        const AttackConfig& cfg, TargetPolicy policy) {
    cfg.validate();
    if (n_adv < 1) throw ArgumentError("n_adv must be >= 1");
    if (s.num_classes() < 2) throw ArgumentError("no attack target exists for a single-class model");
    if (forget.dim() != s.arch.input_dim()) throw ContractError("forget set does not match the model input shape");

    AdversarialSet set;
    set.shape = forget.shape;
    set.num_classes = s.num_classes();
    set.config = cfg;
    // Pixel clamping only makes sense for image data.
    set.config.clamp_pixels = cfg.clamp_pixels && forget.image;
    set.policy = policy;
    const std::size_t total = forget.size() * n_adv;
    const auto d = forget.dim();

    Matrix<float> x(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(d));
    std::vector<int> targets(total);
    std::vector<std::uint64_t> seeds(total);
    for (std::size_t i = 0; i < forget.size(); ++i) {
        const auto id = static_cast<std::uint64_t>(forget.ids[i]);
        const int y = forget.labels[i];
        Rng image_rng(derive_seed(cfg.seed, {stream::attack_target, id}));
        const int shared = sample_other_class(image_rng, y, s.num_classes());
        for (std::size_t j = 0; j < n_adv; ++j) {
            const std::size_t r = i * n_adv + j;
            auto src = forget.row(i);
            std::copy(src.begin(), src.end(), x.data() + r * d);
            if (policy == TargetPolicy::per_image) {
                targets[r] = shared;
            } else {
                Rng rec_rng(derive_seed(cfg.seed, {stream::attack_target, id, j}));
                targets[r] = sample_other_class(rec_rng, y, s.num_classes());
            }
            seeds[r] = derive_seed(cfg.seed, {stream::attack_start, id, j});
        }
    }
    const auto z = pgd_l2_targeted_batch(s, x, targets, set.config, seeds);
    set.records.reserve(total);
    for (std::size_t r = 0; r < total; ++r) {
        const std::size_t i = r / n_adv;
        set.records.push_back({std::vector<float>(z.data() + r * d, z.data() + (r + 1) * d), targets[r],
                               forget.ids[i], forget.labels[i], r % n_adv});
    }
    return set;
}

Dataset adversarial_dataset(const AdversarialSet& set) {
    Dataset ds;
    ds.shape = set.shape;
    ds.num_classes = set.num_classes;
    ds.image = set.config.clamp_pixels;
    for (std::size_t r = 0; r < set.records.size(); ++r) {
        const auto& rec = set.records[r];
        ds.inputs.insert(ds.inputs.end(), rec.input.begin(), rec.input.end());
        ds.labels.push_back(rec.target);
        ds.ids.push_back(static_cast<InstanceId>(r));
    }
    return ds;
}

void save_adversarial_set(const std::filesystem::path& path, const AdversarialSet& set) {
    nlohmann::json index = nlohmann::json::array();
    std::vector<float> flat;
    flat.reserve(set.records.size() * numel(set.shape));
    for (const auto& rec : set.records) {
        index.push_back({{"source_id", rec.source_id},
                         {"source_label", rec.source_label},
                         {"target", rec.target},
                         {"record_index", rec.record_index}});
        flat.insert(flat.end(), rec.input.begin(), rec.input.end());
    }
    nlohmann::json header{{"kind", "adversarial_set"}, {"format_version", 1},
                          {"shape", set.shape},       {"num_classes", set.num_classes},
                          {"config", attack_config_to_json(set.config)},
                          {"target_policy", to_string(set.policy)},
                          {"records", index}};
    Shape shape{set.records.size()};
    shape.insert(shape.end(), set.shape.begin(), set.shape.end());
    write_blob(path, std::move(header), {{"inputs", shape, flat}});
}

AdversarialSet load_adversarial_set(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("adversarial set not found: " + path.string());
    Blob blob = read_blob(path);
    if (blob.header.value("kind", std::string{}) != "adversarial_set")
        throw IoError("not an adversarial set: " + path.string());
    try {
        AdversarialSet set;
        set.shape = blob.header.at("shape").get<Shape>();
        set.num_classes = blob.header.at("num_classes").get<std::size_t>();
        set.config = attack_config_from_json(blob.header.at("config"));
        set.policy = target_policy_from_string(blob.header.at("target_policy").get<std::string>());
        const auto& index = blob.header.at("records");
        const auto d = numel(set.shape);
        if (blob.arrays.size() != 1 || blob.arrays[0].size() != index.size() * d)
            throw IoError("adversarial set arrays do not match the record index in " + path.string());
        for (std::size_t r = 0; r < index.size(); ++r) {
            AdversarialRecord rec;
            rec.source_id = index[r].at("source_id").get<InstanceId>();
            rec.source_label = index[r].at("source_label").get<int>();
            rec.target = index[r].at("target").get<int>();
            rec.record_index = index[r].at("record_index").get<std::size_t>();
            rec.input.assign(blob.arrays[0].begin() + static_cast<std::ptrdiff_t>(r * d),
                             blob.arrays[0].begin() + static_cast<std::ptrdiff_t>((r + 1) * d));
            set.records.push_back(std::move(rec));
        }
        return set;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed adversarial set header in " + path.string() + ": " + e.what());
    }
}

}  // namespace unlearnkit
