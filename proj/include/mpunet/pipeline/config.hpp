#ifndef MPUNET_PIPELINE_CONFIG_HPP
#define MPUNET_PIPELINE_CONFIG_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpunet/augment.hpp"
#include "mpunet/core/error.hpp"
#include "mpunet/fusion.hpp"
#include "mpunet/nn/adam.hpp"
#include "mpunet/unetzoo.hpp"

namespace mpunet {

struct ExperimentConfig {
    ArchSpec arch{};             // num_classes 0 = take it from the dataset
    int planes = 3;
    int folds = 5;
    std::array<double, 3> split{0.6, 0.2, 0.2}; // train, validation, test
    std::vector<int> run_folds;  // empty = every fold
    int max_epochs = 500;
    int patience = 15;
    int train_images_per_epoch = 2500;
    int val_images_per_epoch = 3500;
    int batch_size = 16;
    int min_batch_size = 4;
    std::uint64_t memory_budget_bytes = 8ull << 30;
    nn::AdamConfig adam{};
    ElasticParams augmentation{};
    AffineParams affine{};
    std::array<int, 2> slice_size{0, 0}; // rows, cols; 0 = bounding extent rounded up
    double grid_spacing = 0.0;           // mm; 0 = finest voxel spacing
    double plane_min_angle = 60.0;
    FusionFitConfig fusion{};
    std::uint64_t seed = 0;
    std::string dataset;
    std::string output = "runs";

    ExperimentConfig()
    {
        arch.num_classes = 0;
        adam.weight_decay = 1e-5;
    }

    void validate() const
    {
        if (arch.num_classes != 0) arch.validate();
        else {
            ArchSpec probe = arch;
            probe.num_classes = 2;
            probe.validate();
        }
        if (planes != 1 && planes != 3 && planes != 6) throw UsageError("planes must be 1, 3 or 6");
        if (folds < 2) throw UsageError("at least two folds are required");
        if (std::abs(split[0] + split[1] + split[2] - 1.0) > 1e-9) throw UsageError("split fractions must sum to 1");
        const double unit = 1.0 / folds;
        if (std::abs(split[1] - unit) > 1e-9 || std::abs(split[2] - unit) > 1e-9)
            throw UsageError("validation and test fractions must each equal 1/folds for the rotation split");
        for (int f : run_folds)
            if (f < 0 || f >= folds) throw UsageError("run_folds entry " + std::to_string(f) + " out of range");
        if (max_epochs < 1) throw UsageError("max_epochs must be positive");
        if (patience < 1 || patience >= max_epochs) throw UsageError("patience must lie in [1, max_epochs)");
        if (train_images_per_epoch < 1 || val_images_per_epoch < 1) throw UsageError("images per epoch must be positive");
        if (min_batch_size < 1 || batch_size < min_batch_size) throw UsageError("batch size must be >= min_batch_size >= 1");
        adam.validate();
        augmentation.validate();
        affine.validate();
        for (int s : slice_size)
            if (s < 0) throw UsageError("slice_size entries must be non-negative");
        if (grid_spacing < 0.0) throw UsageError("grid_spacing must be non-negative");
        if (fusion.steps < 0 || !(fusion.step_size > 0.0)) throw UsageError("invalid fusion fitting settings");
    }

    std::vector<int> folds_to_run() const
    {
        if (!run_folds.empty()) return run_folds;
        std::vector<int> all(folds);
        for (int f = 0; f < folds; ++f) all[f] = f;
        return all;
    }
};

inline nlohmann::json config_to_json(const ExperimentConfig& c)
{
    nlohmann::json arch = c.arch;
    return {
        {"arch", arch},
        {"planes", c.planes},
        {"folds", c.folds},
        {"split", c.split},
        {"run_folds", c.run_folds},
        {"max_epochs", c.max_epochs},
        {"patience", c.patience},
        {"train_images_per_epoch", c.train_images_per_epoch},
        {"val_images_per_epoch", c.val_images_per_epoch},
        {"batch_size", c.batch_size},
        {"min_batch_size", c.min_batch_size},
        {"memory_budget_bytes", c.memory_budget_bytes},
        {"adam",
         {{"lr", c.adam.lr}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps},
          {"weight_decay", c.adam.weight_decay}}},
        {"augmentation",
         {{"smoothing_range", c.augmentation.smoothing_range},
          {"magnitude_range", c.augmentation.magnitude_range},
          {"probability", c.augmentation.probability}}},
        {"affine",
         {{"enabled", c.affine.enabled},
          {"max_rotation_deg", c.affine.max_rotation_deg},
          {"scale_range", c.affine.scale_range},
          {"probability", c.affine.probability}}},
        {"slice_size", c.slice_size},
        {"grid_spacing", c.grid_spacing},
        {"plane_min_angle", c.plane_min_angle},
        {"fusion",
         {{"steps", c.fusion.steps}, {"step_size", c.fusion.step_size}, {"max_voxels", c.fusion.max_voxels}}},
        {"seed", c.seed},
        {"dataset", c.dataset},
        {"output", c.output},
    };
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where)
{
    if (!j.is_object()) throw UsageError(where + " must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (std::find(known.begin(), known.end(), k) == known.end())
            throw UsageError("unknown field '" + k + "' in " + where);
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out)
{
    if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

/// Overlays the fields present in `j` onto `c`; unknown keys are rejected.
inline void apply_json(ExperimentConfig& c, const nlohmann::json& j)
{
    try {
        detail::reject_unknown(j,
                               {"arch", "planes", "folds", "split", "run_folds", "max_epochs", "patience",
                                "train_images_per_epoch", "val_images_per_epoch", "batch_size", "min_batch_size",
                                "memory_budget_bytes", "adam", "augmentation", "affine", "slice_size", "grid_spacing",
                                "plane_min_angle", "fusion", "seed", "dataset", "output"},
                               "config");
        if (j.contains("arch")) from_json(j.at("arch"), c.arch);
        detail::read_field(j, "planes", c.planes);
        detail::read_field(j, "folds", c.folds);
        detail::read_field(j, "split", c.split);
        detail::read_field(j, "run_folds", c.run_folds);
        detail::read_field(j, "max_epochs", c.max_epochs);
        detail::read_field(j, "patience", c.patience);
        detail::read_field(j, "train_images_per_epoch", c.train_images_per_epoch);
        detail::read_field(j, "val_images_per_epoch", c.val_images_per_epoch);
        detail::read_field(j, "batch_size", c.batch_size);
        detail::read_field(j, "min_batch_size", c.min_batch_size);
        detail::read_field(j, "memory_budget_bytes", c.memory_budget_bytes);
        if (j.contains("adam")) {
            const auto& a = j.at("adam");
            detail::reject_unknown(a, {"lr", "beta1", "beta2", "eps", "weight_decay"}, "adam");
            detail::read_field(a, "lr", c.adam.lr);
            detail::read_field(a, "beta1", c.adam.beta1);
            detail::read_field(a, "beta2", c.adam.beta2);
            detail::read_field(a, "eps", c.adam.eps);
            detail::read_field(a, "weight_decay", c.adam.weight_decay);
        }
        if (j.contains("augmentation")) {
            const auto& a = j.at("augmentation");
            detail::reject_unknown(a, {"smoothing_range", "magnitude_range", "probability"}, "augmentation");
            detail::read_field(a, "smoothing_range", c.augmentation.smoothing_range);
            detail::read_field(a, "magnitude_range", c.augmentation.magnitude_range);
            detail::read_field(a, "probability", c.augmentation.probability);
        }
        if (j.contains("affine")) {
            const auto& a = j.at("affine");
            detail::reject_unknown(a, {"enabled", "max_rotation_deg", "scale_range", "probability"}, "affine");
            detail::read_field(a, "enabled", c.affine.enabled);
            detail::read_field(a, "max_rotation_deg", c.affine.max_rotation_deg);
            detail::read_field(a, "scale_range", c.affine.scale_range);
            detail::read_field(a, "probability", c.affine.probability);
        }
        detail::read_field(j, "slice_size", c.slice_size);
        detail::read_field(j, "grid_spacing", c.grid_spacing);
        detail::read_field(j, "plane_min_angle", c.plane_min_angle);
        if (j.contains("fusion")) {
            const auto& f = j.at("fusion");
            detail::reject_unknown(f, {"steps", "step_size", "max_voxels"}, "fusion");
            detail::read_field(f, "steps", c.fusion.steps);
            detail::read_field(f, "step_size", c.fusion.step_size);
            detail::read_field(f, "max_voxels", c.fusion.max_voxels);
        }
        detail::read_field(j, "seed", c.seed);
        detail::read_field(j, "dataset", c.dataset);
        detail::read_field(j, "output", c.output);
    }
    catch (const nlohmann::json::exception& e) {
        throw UsageError(std::string("invalid config value: ") + e.what());
    }
}

inline ExperimentConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    }
    catch (const nlohmann::json::parse_error& e) {
        throw UsageError("config file '" + path.string() + "' is not valid JSON: " + e.what());
    }
    ExperimentConfig c;
    apply_json(c, j);
    return c;
}

} // namespace mpunet

#endif // MPUNET_PIPELINE_CONFIG_HPP
