#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "cephland/dataset_io.hpp"
#include "cephland/region.hpp"

namespace cephland {

/// Single-class Faster R-CNN settings. Defaults follow the torchvision
/// detector with the larger face-region anchors.
struct DetectorConfig {
    std::vector<double> anchor_sizes{128, 256, 320, 512};
    std::vector<double> aspect_ratios{0.5, 0.75, 1.0, 1.25, 1.5, 1.75};  ///< height / width
    std::string backbone_id{"mobilenet_v3_small"};
    std::string pretrained_weights_ref;
    double score_threshold{0.05};

    int min_size{800};
    int max_size{1333};

    int rpn_pre_nms_top_n_train{2000};
    int rpn_post_nms_top_n_train{2000};
    int rpn_pre_nms_top_n_test{1000};
    int rpn_post_nms_top_n_test{1000};
    double rpn_nms_thresh{0.7};
    double rpn_fg_iou_thresh{0.7};
    double rpn_bg_iou_thresh{0.3};
    int rpn_batch_size{256};
    double rpn_positive_fraction{0.5};

    double box_fg_iou_thresh{0.5};
    double box_bg_iou_thresh{0.5};
    int box_batch_size{512};
    double box_positive_fraction{0.25};
    double box_nms_thresh{0.5};
    int detections_per_image{100};
    int representation_size{1024};

    void validate() const;
};

nlohmann::json to_json(const DetectorConfig& config);
DetectorConfig detector_config_from_json(const nlohmann::json& j);

struct DetectorTrainConfig {
    int epochs{20};
    double lr{1e-4};
    double weight_decay{1e-4};
    double pad{32.0};  ///< ground-truth box padding around the landmark extent
    std::uint64_t seed{0};
};

/// Torchvision-style box coding with per-coordinate weights.
struct BoxCoder {
    std::array<double, 4> weights{1.0, 1.0, 1.0, 1.0};

    torch::Tensor encode(const torch::Tensor& reference, const torch::Tensor& proposals) const;
    torch::Tensor decode(const torch::Tensor& deltas, const torch::Tensor& boxes) const;
};

/// Pairwise IoU of N x 4 and M x 4 xyxy boxes.
torch::Tensor box_iou(const torch::Tensor& a, const torch::Tensor& b);

/// Greedy non-maximum suppression; returns kept indices by descending score.
torch::Tensor nms(const torch::Tensor& boxes, const torch::Tensor& scores, double iou_threshold);

/// Anchors (H*W*A) x 4 in image pixels for a feature map of `feature_size`
/// at `stride`, ordered location-major.
torch::Tensor generate_anchors(const std::vector<double>& sizes, const std::vector<double>& ratios,
                               std::array<int64_t, 2> feature_size, std::array<int64_t, 2> stride);

/// Average-pooled bilinear RoI features: R x C x output x output.
torch::Tensor roi_align(const torch::Tensor& features, const torch::Tensor& rois, double spatial_scale,
                        int64_t output_size, int64_t sampling_ratio);

struct DetectorLosses {
    torch::Tensor objectness;
    torch::Tensor rpn_box;
    torch::Tensor classifier;
    torch::Tensor box;

    torch::Tensor total() const { return objectness + rpn_box + classifier + box; }
};

class FasterRcnnImpl : public torch::nn::Module {
public:
    explicit FasterRcnnImpl(const DetectorConfig& config);

    /// Training step on one preprocessed image (1 x 1 x H x W, zero-padded
    /// beyond `image_size`) with one ground-truth box (1 x 4) in the same
    /// pixel frame.
    DetectorLosses losses(const torch::Tensor& image, std::array<int64_t, 2> image_size, const torch::Tensor& gt_box,
                          Rng& rng);

    /// Boxes (N x 4) and scores (N) in the preprocessed frame.
    std::pair<torch::Tensor, torch::Tensor> detect(const torch::Tensor& image, std::array<int64_t, 2> image_size);

    const DetectorConfig& config() const noexcept { return config_; }

private:
    struct Features {
        torch::Tensor map;
        torch::Tensor anchors;
        torch::Tensor objectness;
        torch::Tensor deltas;
        double stride;
    };

    Features run_backbone(const torch::Tensor& image);
    torch::Tensor propose(const Features& f, std::array<int64_t, 2> image_size, bool training);
    std::pair<torch::Tensor, torch::Tensor> box_head(const torch::Tensor& feature_map, const torch::Tensor& rois,
                                                     double stride);

    DetectorConfig config_;
    torch::nn::Sequential backbone_{nullptr};
    torch::nn::Conv2d rpn_conv_{nullptr};
    torch::nn::Conv2d rpn_cls_{nullptr};
    torch::nn::Conv2d rpn_bbox_{nullptr};
    torch::nn::Linear fc6_{nullptr};
    torch::nn::Linear fc7_{nullptr};
    torch::nn::Linear cls_score_{nullptr};
    torch::nn::Linear bbox_pred_{nullptr};
    int64_t feature_channels_{0};
};
TORCH_MODULE(FasterRcnn);

/// Backbone layers for a known id ("mobilenet_v3_small", "small_cnn") and
/// their output channel count.
std::pair<torch::nn::Sequential, int64_t> make_backbone(const std::string& backbone_id);

/// Trained (or freshly initialised) face-region detector operating on
/// original-resolution grayscale images.
class DetectorModel : public BoxDetector {
public:
    explicit DetectorModel(const DetectorConfig& config, const std::filesystem::path& registry = {});

    std::vector<Detection> detect(const cv::Mat& image) override;

    void save(const std::filesystem::path& file) const;
    static DetectorModel load(const std::filesystem::path& file);

    const DetectorConfig& config() const noexcept { return net_->config(); }
    FasterRcnn& net() noexcept { return net_; }

    struct Input {
        double scale;                      ///< network pixels per original pixel
        std::array<int64_t, 2> image_size;  ///< resized height, width before padding
        torch::Tensor tensor;              ///< normalised, padded to the backbone stride
    };

    Input preprocess(const cv::Mat& image) const;

private:
    FasterRcnn net_;
};

/// Fits the detector on ground-truth boxes derived from each record's
/// landmarks. Zero epochs returns the initialised detector.
DetectorModel train_detector(std::span<const ImageRecord> records, const DetectorConfig& config,
                             const DetectorTrainConfig& train_config, const std::filesystem::path& registry = {});

}  // namespace cephland
