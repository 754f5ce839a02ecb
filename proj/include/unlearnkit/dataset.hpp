#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace unlearnkit {

using Shape = std::vector<std::size_t>;
using InstanceId = std::int64_t;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// In-memory labelled examples. Inputs are row-major, one row per example.
/// Image examples use height x width x channels (channels last) with values in [0,1].
struct Dataset {
    Shape shape;
    std::size_t num_classes = 0;
    bool image = false;
    std::vector<float> inputs;
    std::vector<int> labels;
    std::vector<InstanceId> ids;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
    std::size_t dim() const { return numel(shape); }
    std::span<const float> row(std::size_t i) const {
        return {inputs.data() + i * dim(), dim()};
    }

    /// Position of an id, or npos.
    std::size_t index_of(InstanceId id) const;
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);

    /// Throws ArgumentError when an invariant does not hold.
    void validate() const;
};

/// Rows of `ds` at the given positions, in that order.
Dataset subset(const Dataset& ds, std::span<const std::size_t> positions);

/// Concatenation of datasets with identical shape and class count.
Dataset concat(const Dataset& a, const Dataset& b);

enum class ForgetMode { misclassify, relabel };

std::string to_string(ForgetMode mode);
ForgetMode forget_mode_from_string(const std::string& s);

/// A deletion request.
struct ForgetManifest {
    std::vector<InstanceId> ids;
    ForgetMode mode = ForgetMode::misclassify;
    std::map<InstanceId, int> relabel_targets;
    std::uint64_t seed = 0;

    std::size_t size() const noexcept { return ids.size(); }

    /// Checks the manifest against a dataset; throws ManifestError.
    void validate_against(const Dataset& ds) const;
};

// Isotropic Gaussian blobs. Class means are the scaled standard simplex vertices e_c when
// dim >= num_classes, otherwise points on a unit circle in the first two coordinates.
Dataset make_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t dim, double spread,
                       std::uint64_t seed);

/// Class mean used by make_synthetic.
std::vector<double> synthetic_class_mean(std::size_t cls, std::size_t num_classes, std::size_t dim);

/// Procedural image classes: each class owns a smooth colour template, instances add a random
/// smooth deformation and pixel noise. Two calls with the same template_seed share templates.
struct SyntheticImageConfig {
    std::size_t num_classes = 10;
    std::size_t per_class = 500;
    std::size_t height = 32;
    std::size_t width = 32;
    std::size_t channels = 3;
    double contrast = 0.08;      // template amplitude around mid-grey
    double variation = 0.15;     // amplitude of per-instance smooth deformation
    double noise = 0.08;         // i.i.d. pixel noise std
    std::size_t features = 60;   // Gaussian blobs per class template
    std::size_t prototypes = 1;  // sub-class modes per class, instances cycle through them
    double prototype_contrast = 0.0;
    double feature_width_min = 1.0;
    double feature_width_max = 2.0;
    std::uint64_t template_seed = 0;
    InstanceId first_id = 0;
};

Dataset make_synthetic_images(const SyntheticImageConfig& cfg, std::uint64_t seed);

/// Uniform selection of k distinct ids without replacement.
/// In relabel mode each target is uniform over the classes different from the true label.
ForgetManifest select_forget_set(const Dataset& ds, std::size_t k, ForgetMode mode, std::uint64_t seed);

/// (D_f, D_r): D_f in manifest order, D_r in original order.
std::pair<Dataset, Dataset> split_remaining(const Dataset& ds, const ForgetManifest& m);

/// Labels the forget split is scored against: y* in relabel mode, y otherwise.
std::vector<int> forget_targets(const Dataset& forget, const ForgetManifest& m);

nlohmann::json manifest_to_json(const ForgetManifest& m);
ForgetManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const std::filesystem::path& path, const ForgetManifest& m);
ForgetManifest load_manifest(const std::filesystem::path& path);

// Directory layout: index.json {"num_classes", "shape", "count", "image"} plus inputs.f32,
// labels.i32 and ids.i64 as raw little-endian arrays.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

/// Reads CIFAR-10 binary batch files (1 label byte + 3072 planar RGB bytes per record).
Dataset load_cifar10_binary(const std::vector<std::filesystem::path>& files, InstanceId first_id = 0);

}  // namespace unlearnkit
