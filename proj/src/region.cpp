#include "cephland/region.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <opencv2/imgproc.hpp>

namespace cephland {

double iou(const BoundingBox& a, const BoundingBox& b) noexcept
{
    const BoundingBox inter{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
    const double overlap = inter.area();
    const double uni = a.area() + b.area() - overlap;
    return uni > 0.0 ? overlap / uni : 0.0;
}

BoundingBox make_gt_box(const LandmarkSet& landmarks, double pad, ImageSize image_size)
{
    if (pad < 0.0)
        throw Error("box padding must be non-negative");
    if (landmarks.size() == 0)
        throw Error("cannot build a box from an empty landmark set");
    double min_x = std::numeric_limits<double>::infinity();
    double min_y = min_x;
    double max_x = -min_x;
    double max_y = -min_x;
    for (const auto& p : landmarks.points()) {
        min_x = std::min(min_x, p.x);
        min_y = std::min(min_y, p.y);
        max_x = std::max(max_x, p.x);
        max_y = std::max(max_y, p.y);
    }
    BoundingBox box{min_x - pad, min_y - pad, max_x + pad, max_y + pad};
    if (image_size.width > 0 && image_size.height > 0) {
        box.x0 = std::clamp(box.x0, 0.0, static_cast<double>(image_size.width));
        box.x1 = std::clamp(box.x1, 0.0, static_cast<double>(image_size.width));
        box.y0 = std::clamp(box.y0, 0.0, static_cast<double>(image_size.height));
        box.y1 = std::clamp(box.y1, 0.0, static_cast<double>(image_size.height));
    }
    if (!(box.x0 < box.x1 && box.y0 < box.y1))
        throw Error("degenerate landmark extent produces an empty box");
    return box;
}

Point2 forward_map(Point2 original, const RegionTransform& transform) noexcept
{
    return {(original.x - transform.crop_origin.x) * transform.scale,
            (original.y - transform.crop_origin.y) * transform.scale};
}

Point2 remap_coords(Point2 crop, const RegionTransform& transform) noexcept
{
    return {transform.crop_origin.x + crop.x / transform.scale, transform.crop_origin.y + crop.y / transform.scale};
}

std::vector<Point2> forward_map(std::span<const Point2> original, const RegionTransform& transform)
{
    std::vector<Point2> out;
    out.reserve(original.size());
    for (const auto& p : original)
        out.push_back(forward_map(p, transform));
    return out;
}

std::vector<Point2> remap_coords(std::span<const Point2> crop, const RegionTransform& transform)
{
    std::vector<Point2> out;
    out.reserve(crop.size());
    for (const auto& p : crop)
        out.push_back(remap_coords(p, transform));
    return out;
}

std::string to_string(FallbackMode mode)
{
    switch (mode) {
    case FallbackMode::none: return "none";
    case FallbackMode::pad_crop: return "pad_crop";
    case FallbackMode::pad_resize: return "pad_resize";
    }
    return "none";
}

FallbackMode parse_fallback(const std::string& name)
{
    if (name == "none")
        return FallbackMode::none;
    if (name == "pad_crop")
        return FallbackMode::pad_crop;
    if (name == "pad_resize")
        return FallbackMode::pad_resize;
    throw Error("unknown fallback mode: " + name);
}

std::optional<Detection> select_detection(std::span<const Detection> detections, double score_threshold)
{
    std::optional<Detection> best;
    for (const auto& d : detections) {
        if (d.score < score_threshold || d.box.area() <= 0.0)
            continue;
        if (!best || d.score > best->score || (d.score == best->score && d.box.area() > best->box.area()))
            best = d;
    }
    return best;
}

namespace {

/// Copies the (possibly out-of-bounds) rectangle into a zero canvas.
cv::Mat padded_crop(const cv::Mat& image, const cv::Rect& rect)
{
    cv::Mat canvas = cv::Mat::zeros(rect.height, rect.width, image.type());
    const cv::Rect inside = rect & cv::Rect(0, 0, image.cols, image.rows);
    if (inside.area() > 0)
        image(inside).copyTo(canvas(cv::Rect(inside.x - rect.x, inside.y - rect.y, inside.width, inside.height)));
    return canvas;
}

Region make_region(cv::Mat pixels, Point2 origin)
{
    Region region;
    region.transform.crop_origin = origin;
    region.transform.scale = 1.0;
    region.transform.resized_height = pixels.rows;
    region.transform.resized_width = pixels.cols;
    region.pixels = std::move(pixels);
    return region;
}

}  // namespace

Region crop_box(const cv::Mat& image, const BoundingBox& box)
{
    if (image.empty())
        throw Error("cannot crop an empty image");
    const int x0 = std::clamp(static_cast<int>(std::floor(box.x0)), 0, image.cols - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(box.y0)), 0, image.rows - 1);
    const int x1 = std::clamp(static_cast<int>(std::ceil(box.x1)), x0 + 1, image.cols);
    const int y1 = std::clamp(static_cast<int>(std::ceil(box.y1)), y0 + 1, image.rows);
    const cv::Rect rect(x0, y0, x1 - x0, y1 - y0);
    return make_region(image(rect).clone(), {static_cast<double>(x0), static_cast<double>(y0)});
}

Region fallback_region(const cv::Mat& image, FallbackMode mode, double aspect)
{
    if (image.empty())
        throw Error("cannot crop an empty image");
    if (!(aspect > 0.0))
        throw Error("fallback aspect must be positive");
    const int rows = image.rows;
    const int cols = image.cols;
    switch (mode) {
    case FallbackMode::pad_resize: {
        const double current = static_cast<double>(cols) / rows;
        int width = cols;
        int height = rows;
        if (current < aspect)
            width = static_cast<int>(round_half_away(rows * aspect));
        else
            height = static_cast<int>(round_half_away(cols / aspect));
        return make_region(padded_crop(image, cv::Rect(0, 0, width, height)), {0.0, 0.0});
    }
    case FallbackMode::pad_crop: {
        const int width = std::max(1, static_cast<int>(round_half_away(rows * aspect)));
        const int x0 = width < cols ? (cols - width) / 2 : 0;
        return make_region(padded_crop(image, cv::Rect(x0, 0, width, rows)), {static_cast<double>(x0), 0.0});
    }
    case FallbackMode::none: break;
    }
    throw Error("no fallback configured");
}

Region extract_region(const ImageRecord& image, BoxDetector* detector, const RegionOptions& options)
{
    if (!image.loaded())
        throw Error("image " + image.image_id + " is not loaded");
    if (detector) {
        const auto detections = detector->detect(image.pixels);
        if (auto best = select_detection(detections, options.score_threshold))
            return crop_box(image.pixels, best->box);
    }
    if (options.fallback == FallbackMode::none)
        throw Error("no face region detected for image " + image.image_id);
    return fallback_region(image.pixels, options.fallback, options.fallback_aspect);
}

Region gt_region(const ImageRecord& image, double pad)
{
    if (!image.loaded() || !image.landmarks)
        throw Error("ground-truth region needs a loaded, annotated image: " + image.image_id);
    return crop_box(image.pixels, make_gt_box(*image.landmarks, pad, {image.height, image.width}));
}

Region resize_to_height(const Region& crop, int target_height)
{
    if (crop.pixels.empty())
        throw Error("cannot resize an empty crop");
    if (target_height < 1)
        throw Error("target height must be positive");
    const double factor = static_cast<double>(target_height) / crop.pixels.rows;
    const int width = std::max(1, static_cast<int>(round_half_away(crop.pixels.cols * factor)));

    Region out;
    if (target_height == crop.pixels.rows && width == crop.pixels.cols) {
        out.pixels = crop.pixels.clone();
    } else {
        const int interpolation = factor < 1.0 ? cv::INTER_AREA : cv::INTER_LINEAR;
        cv::resize(crop.pixels, out.pixels, cv::Size(width, target_height), 0.0, 0.0, interpolation);
    }
    out.transform.crop_origin = crop.transform.crop_origin;
    out.transform.scale = crop.transform.scale * factor;
    out.transform.resized_height = target_height;
    out.transform.resized_width = width;
    return out;
}

}  // namespace cephland
