#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>
#include <torch/torch.h>

#include "cephland/config.hpp"
#include "cephland/dataset_io.hpp"
#include "cephland/decode_metrics.hpp"
#include "cephland/landmark_net.hpp"
#include "cephland/region.hpp"
#include "cephland/schedule.hpp"

namespace cephland {

using LogFn = std::function<void(const std::string&)>;

/// Writes to stderr.
void log_stderr(const std::string& message);

/// A resized crop ready for the network plus what is needed to score it.
struct PreparedSample {
    std::string image_id;
    cv::Mat crop;  ///< CV_8UC1
    RegionTransform transform;
    std::vector<Point2> original;     ///< ground truth in original pixels, empty if unannotated
    std::vector<Point2> crop_coords;  ///< ground truth in crop pixels
    double spacing{0.0};
};

/// Crop used for training and validation according to config.crop_source.
PreparedSample prepare_sample(const ImageRecord& record, const RunConfig& config, BoxDetector* detector);

/// Crop used at inference: the detector when given, otherwise the configured
/// pad fallback (or the ground-truth box when crop_source is gt_box and the
/// record is annotated).
PreparedSample prepare_inference(const ImageRecord& record, const RunConfig& config, BoxDetector* detector);

/// L x H x W logits of a single crop, in eval mode without gradients.
torch::Tensor infer_logits(HeatmapNet& model, const cv::Mat& crop);

/// Decodes every plane of L x H x W logits into crop coordinates.
std::vector<Point2> decode_planes(const torch::Tensor& logits, int k, TopKWeighting weighting);

/// Crop-space prediction of one model.
std::vector<Point2> predict_crop(HeatmapNet& model, const cv::Mat& crop, int k, TopKWeighting weighting);

struct LandmarkCheckpoint {
    HeatmapNet model{nullptr};
    nlohmann::json config;
    std::string config_hash;
    double best_val_mre_mm{0.0};
    int best_epoch{-1};
    int fold{-1};
};

void save_landmark_checkpoint(const std::filesystem::path& file, HeatmapNet& model, const RunConfig& config,
                              const TrainState& state);
LandmarkCheckpoint load_landmark_checkpoint(const std::filesystem::path& file);

struct TrainOptions {
    std::filesystem::path out_dir;
    std::filesystem::path registry;
    BoxDetector* detector{nullptr};
    /// Stop once the validation MRE falls below this value.
    std::optional<double> stop_below_mre_mm;
    LogFn log{log_stderr};
};

struct FitResult {
    std::filesystem::path checkpoint;
    TrainState state;
    EvalReport best_report;
};

/// Validation report of a model on prepared samples (top-K decoding).
EvalReport validate_samples(HeatmapNet& model, std::span<const PreparedSample> samples, int k,
                            TopKWeighting weighting);

/// Trains one heatmap model on `train`, selecting the epoch with the lowest
/// validation MRE on `val`. The best weights go to `checkpoint_name` inside
/// options.out_dir.
FitResult fit_landmarks(const RunConfig& config, std::span<const ImageRecord> train, std::span<const ImageRecord> val,
                        const TrainOptions& options, const std::string& checkpoint_name = "model.pt",
                        int fold = -1);

FitResult train_fold(const RunConfig& config, int fold, std::span<const ImageRecord> dataset,
                     const FoldAssignment& folds, const TrainOptions& options);

void save_folds(const std::filesystem::path& file, const FoldAssignment& folds);
FoldAssignment load_folds(const std::filesystem::path& file);

/// Records of `dataset` whose ids are in `ids`, in the order of `ids`.
std::vector<ImageRecord> select_records(std::span<const ImageRecord> dataset, std::span<const std::string> ids);

struct FoldTable {
    std::vector<EvalReport> folds;
    std::optional<EvalReport> ensemble;
    std::string ensemble_eval_set;
};

void write_fold_table_csv(const std::filesystem::path& file, const FoldTable& table);

struct TrainAllResult {
    FoldAssignment folds;
    std::vector<FitResult> fold_results;
    std::optional<std::filesystem::path> detector_checkpoint;
    FoldTable table;
};

/// Detector (when its epoch count is positive and none is supplied), then
/// one heatmap model per fold. The ensemble column is scored on `holdout`
/// when given, otherwise on the whole training set.
TrainAllResult train_all(const RunConfig& config, std::span<const ImageRecord> dataset, const TrainOptions& options,
                         std::span<const ImageRecord> holdout = {});

struct PredictOutput {
    std::vector<PredictionBundle> bundles;
    std::vector<std::string> failed;
};

PredictOutput predict(const RunConfig& config, std::span<HeatmapNet> models, std::span<const ImageRecord> images,
                      BoxDetector* detector, const LogFn& log = log_stderr);

std::vector<LandmarkRow> submission_rows(std::span<const PredictionBundle> bundles);

/// Scores predictions against annotated records by image id.
EvalReport evaluate_predictions(std::span<const LandmarkRow> predictions, std::span<const ImageRecord> truth,
                                const LogFn& log = log_stderr);

struct SweepPoint {
    std::string x;
    std::optional<double> mre_mm;
    std::optional<double> sdr_pct;
};

struct SweepResult {
    std::string parameter;
    std::vector<SweepPoint> points;
};

void write_sweep_csv(const std::filesystem::path& file, const SweepResult& sweep);
SweepResult read_sweep_csv(const std::filesystem::path& file);

std::vector<std::string> padding_sweep_values();
std::vector<double> artefact_rate_sweep_values();
std::vector<int> top_k_sweep_values();

/// Retrains landmarks (and the detector when crop_source is detector) per
/// padding value; pad_crop and pad_resize replace the crop source.
SweepResult sweep_padding(const RunConfig& config, std::span<const ImageRecord> train,
                          std::span<const ImageRecord> val, const TrainOptions& options,
                          std::span<const std::string> values);

SweepResult sweep_artefact_rate(const RunConfig& config, std::span<const ImageRecord> train,
                                std::span<const ImageRecord> val, const TrainOptions& options,
                                std::span<const double> rates);

/// Re-decodes the same logits for every K; models are ensembled.
SweepResult sweep_top_k(const RunConfig& config, std::span<HeatmapNet> models, std::span<const ImageRecord> val,
                        BoxDetector* detector, std::span<const int> ks);

}  // namespace cephland
