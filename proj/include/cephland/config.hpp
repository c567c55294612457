#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cephland/augment.hpp"
#include "cephland/decode_metrics.hpp"
#include "cephland/detector.hpp"
#include "cephland/landmark_net.hpp"
#include "cephland/region.hpp"

namespace cephland {

struct OptimizerConfig {
    std::string name{"adamw"};
    double lr{2e-4};
    double weight_decay{0.05};
};

/// From `epoch` on, gradients are accumulated over `interval` forward passes.
struct AccumulationStep {
    int epoch{0};
    int interval{1};
};

struct LrDecay {
    double factor{0.25};
    std::vector<int> epochs{35, 45};
};

/// How training and validation crops are produced.
enum class CropSource { gt_box, detector, pad_crop, pad_resize };

std::string to_string(CropSource source);
CropSource parse_crop_source(const std::string& name);

/// Every tunable of a run. Serialised in full into checkpoints and reports.
struct RunConfig {
    ModelSpec model;
    DetectorConfig detector;
    DetectorTrainConfig detector_training;
    AugmentationConfig augmentation;
    OptimizerConfig optimizer;
    std::vector<AccumulationStep> accumulation_schedule{{0, 32}, {4, 16}, {8, 8}};
    LrDecay lr_decay;
    int max_epochs{75};
    int early_stop_patience{10};
    int n_folds{4};
    int top_k{20};
    TopKWeighting top_k_weighting{TopKWeighting::uniform};
    double rcnn_pad{32.0};
    std::uint64_t seed{0};

    int crop_height{800};
    double blur_sigma{1.0};
    CropSource crop_source{CropSource::gt_box};
    RegionOptions region;

    std::string image_extension{".bmp"};
    std::optional<double> ruler_length_mm;

    void validate() const;
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& file);
void save_run_config(const std::filesystem::path& file, const RunConfig& config);

/// Stable 64-bit FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const RunConfig& config);

DatasetOptions dataset_options(const RunConfig& config);

}  // namespace cephland
