#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "unlearnkit/dataset.hpp"
#include "unlearnkit/model.hpp"

namespace unlearnkit {

/// Targeted L2 projected gradient descent settings.
struct AttackConfig {
    double epsilon = 0.4;
    double step_size = 0.1;
    int iterations = 100;
    bool random_start = true;
    bool clamp_pixels = true;  // ignored by generate_adversarial_set for non-image data
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json attack_config_to_json(const AttackConfig& c);
AttackConfig attack_config_from_json(const nlohmann::json& j);

/// How attack targets are drawn for the records of one source image.
enum class TargetPolicy {
    per_image,    // one target per source, shared by all of its records
    per_example,  // a fresh target for every record
};

std::string to_string(TargetPolicy p);
TargetPolicy target_policy_from_string(const std::string& s);

struct AdversarialRecord {
    std::vector<float> input;
    int target = 0;
    InstanceId source_id = 0;
    int source_label = 0;
    std::size_t record_index = 0;
};

struct AdversarialSet {
    Shape shape;
    std::size_t num_classes = 0;
    AttackConfig config;
    TargetPolicy policy = TargetPolicy::per_image;
    std::vector<AdversarialRecord> records;

    std::size_t size() const noexcept { return records.size(); }
    bool empty() const noexcept { return records.empty(); }
};

/// One attack run from x toward y_bar; returns the final iterate.
/// The random start (when enabled) is seeded by cfg.seed.
std::vector<float> pgd_l2_targeted(const ClassifierState& s, std::span<const float> x, int y_bar,
                                   const AttackConfig& cfg);

/// Batched attack: row r of `x` toward targets[r], random start seeded by start_seeds[r].
Matrix<float> pgd_l2_targeted_batch(const ClassifierState& s, const Matrix<float>& x, std::span<const int> targets,
                                    const AttackConfig& cfg, std::span<const std::uint64_t> start_seeds);

/// n_adv targeted examples per forget instance, |D_f| * n_adv records grouped by source.
AdversarialSet generate_adversarial_set(const ClassifierState& s, const Dataset& forget, std::size_t n_adv,
                                        const AttackConfig& cfg, TargetPolicy policy = TargetPolicy::per_image);

/// The records as a dataset labelled with their attack targets (ids are record positions).
Dataset adversarial_dataset(const AdversarialSet& set);

void save_adversarial_set(const std::filesystem::path& path, const AdversarialSet& set);
AdversarialSet load_adversarial_set(const std::filesystem::path& path);

}  // namespace unlearnkit
