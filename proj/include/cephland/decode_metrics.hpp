#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cephland/landmarks.hpp"

namespace cephland {

enum class TopKWeighting {
    uniform,  ///< plain mean of the K hottest pixel coordinates
    softmax,  ///< mean weighted by exp(value - max)
};

/// Mean coordinate (x = column, y = row) of the K largest values of a
/// row-major height x width plane. Equal values are ranked in row-major
/// order, so the selection is deterministic.
Point2 decode_topk(std::span<const float> plane, int height, int width, int k = 20,
                   TopKWeighting weighting = TopKWeighting::uniform);

/// Per-landmark arithmetic mean over models.
std::vector<Point2> ensemble_coords(std::span<const std::vector<Point2>> coords_per_model);

struct PredictionBundle {
    std::string image_id;
    std::vector<std::vector<Point2>> per_model_coords;
    std::vector<Point2> ensembled_coords;
};

/// Predictions, ground truth and spacing for one image.
struct EvalSample {
    std::string image_id;
    std::vector<Point2> predicted;
    std::vector<Point2> truth;
    double spacing{0.0};
};

/// Mean radial error in mm over every (image, landmark) pair.
double mre(std::span<const EvalSample> samples);

/// Percentage of radial errors <= threshold_mm.
double sdr(std::span<const EvalSample> samples, double threshold_mm = 2.0);

struct EvalReport {
    double mre_mm{0.0};
    double sdr_2mm_pct{0.0};
    std::vector<double> per_landmark_mre;
    std::vector<std::string> image_ids;
    std::vector<double> per_image_mre;
    std::size_t n_images{0};
};

EvalReport evaluate(std::span<const EvalSample> samples, double threshold_mm = 2.0);

nlohmann::json to_json(const EvalReport& report);
void write_report_json(const std::filesystem::path& file, const EvalReport& report);

/// Appends `run,n_images,mre_mm,sdr_2mm_pct`, writing a header for new files.
void append_summary_csv(const std::filesystem::path& file, const std::string& run, const EvalReport& report);

}  // namespace cephland
