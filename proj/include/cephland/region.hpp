#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "cephland/dataset_io.hpp"
#include "cephland/landmarks.hpp"

namespace cephland {

/// Axis-aligned box in original-image pixels, x0 < x1 and y0 < y1.
struct BoundingBox {
    double x0{0.0};
    double y0{0.0};
    double x1{0.0};
    double y1{0.0};

    double width() const noexcept { return x1 - x0; }
    double height() const noexcept { return y1 - y0; }
    double area() const noexcept { return width() > 0.0 && height() > 0.0 ? width() * height() : 0.0; }
    bool contains(Point2 p) const noexcept { return p.x > x0 && p.x < x1 && p.y > y0 && p.y < y1; }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

double iou(const BoundingBox& a, const BoundingBox& b) noexcept;

struct ImageSize {
    int height{0};
    int width{0};
};

/// Landmark extent grown by `pad` on every side and clamped to the image.
BoundingBox make_gt_box(const LandmarkSet& landmarks, double pad, ImageSize image_size);

/// Maps crop-space coordinates back to the original image:
/// original = crop_origin + coords / scale.
struct RegionTransform {
    Point2 crop_origin;
    double scale{1.0};
    int resized_height{0};
    int resized_width{0};
};

Point2 forward_map(Point2 original, const RegionTransform& transform) noexcept;
Point2 remap_coords(Point2 crop, const RegionTransform& transform) noexcept;
std::vector<Point2> forward_map(std::span<const Point2> original, const RegionTransform& transform);
std::vector<Point2> remap_coords(std::span<const Point2> crop, const RegionTransform& transform);

struct Region {
    cv::Mat pixels;
    RegionTransform transform;
};

enum class FallbackMode { none, pad_crop, pad_resize };

std::string to_string(FallbackMode mode);
FallbackMode parse_fallback(const std::string& name);

struct Detection {
    BoundingBox box;
    double score{0.0};
};

/// Anything that proposes face-region boxes for a grayscale image.
class BoxDetector {
public:
    virtual ~BoxDetector() = default;
    virtual std::vector<Detection> detect(const cv::Mat& image) = 0;
};

/// Highest score at or above the threshold; ties go to the larger box.
std::optional<Detection> select_detection(std::span<const Detection> detections, double score_threshold);

/// Sub-rectangle of `image` covered by `box` after snapping outwards to whole
/// pixels and clamping to the image.
Region crop_box(const cv::Mat& image, const BoundingBox& box);

/// `pad_crop`: centre crop to `aspect` (width / height), zero-padding
/// bottom/right where the image is too small.
/// `pad_resize`: zero-pad the whole image bottom/right to `aspect`.
Region fallback_region(const cv::Mat& image, FallbackMode mode, double aspect);

struct RegionOptions {
    FallbackMode fallback{FallbackMode::pad_resize};
    double score_threshold{0.05};
    double fallback_aspect{0.8};
};

/// Crop the face region of a loaded record. `detector` may be null, in which
/// case the fallback is used directly.
Region extract_region(const ImageRecord& image, BoxDetector* detector, const RegionOptions& options);

/// Region around the landmark extent, used when training without a detector.
Region gt_region(const ImageRecord& image, double pad);

/// Resizes to `target_height`, width round(w * target / h) with halves away
/// from zero; scale = target / h.
Region resize_to_height(const Region& crop, int target_height = 800);

/// std::round semantics, spelled out where the convention matters.
inline long round_half_away(double v) noexcept
{
    return v < 0.0 ? -static_cast<long>(-v + 0.5) : static_cast<long>(v + 0.5);
}

}  // namespace cephland
