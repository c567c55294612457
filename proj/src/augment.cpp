#include "cephland/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <opencv2/imgproc.hpp>

namespace cephland {

namespace {

bool chance(double p, Rng& rng)
{
    if (p <= 0.0)
        return false;
    if (p >= 1.0)
        return true;
    return std::bernoulli_distribution(p)(rng);
}

double uniform(double lo, double hi, Rng& rng)
{
    if (lo >= hi)
        return lo;
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(int lo, int hi, Rng& rng)
{
    if (lo >= hi)
        return lo;
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

cv::Mat as_float(const cv::Mat& image)
{
    if (image.channels() != 1)
        throw Error("augmentation expects a single-channel image");
    cv::Mat out;
    image.convertTo(out, CV_32F);
    return out;
}

cv::Mat clip(const cv::Mat& image)
{
    cv::Mat out = cv::max(image, 0.0);
    return cv::min(out, 255.0);
}

std::vector<bool> inside(std::span<const Point2> coords, cv::Size size)
{
    std::vector<bool> out;
    out.reserve(coords.size());
    for (const auto& p : coords)
        out.push_back(p.x >= 0.0 && p.x < size.width && p.y >= 0.0 && p.y < size.height);
    return out;
}

float bilinear(const cv::Mat& field, double x, double y)
{
    x = std::clamp(x, 0.0, static_cast<double>(field.cols - 1));
    y = std::clamp(y, 0.0, static_cast<double>(field.rows - 1));
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, field.cols - 1);
    const int y1 = std::min(y0 + 1, field.rows - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    const double top = (1 - fx) * field.at<float>(y0, x0) + fx * field.at<float>(y0, x1);
    const double bottom = (1 - fx) * field.at<float>(y1, x0) + fx * field.at<float>(y1, x1);
    return static_cast<float>((1 - fy) * top + fy * bottom);
}

}  // namespace

void AugmentationConfig::validate() const
{
    for (double rate : {apply_prob, skewed_scale_rate, invert_rate, blur_rate, artefact_rate}) {
        if (!(rate >= 0.0 && rate <= 1.0))
            throw Error("augmentation rates must lie in [0, 1]");
    }
    if (gamma_min > gamma_max || blur_sigma_min > blur_sigma_max || cutout_min_frac > cutout_max_frac ||
        artefact_mult_min > artefact_mult_max)
        throw Error("augmentation ranges must be ordered");
    if (gamma_min <= 0.0)
        throw Error("gamma must be positive");
    if (cutout_min_frac < 0.0 || cutout_max_frac > 1.0)
        throw Error("cutout fraction must lie in [0, 1]");
    if (scale_delta < 0.0 || scale_delta >= 1.0 || multiply_delta < 0.0)
        throw Error("scale and multiply deltas must be non-negative (scale < 1)");
    if (artefact_band_sizes.empty())
        throw Error("artefact band sizes must not be empty");
    for (int s : artefact_band_sizes) {
        if (s < 1)
            throw Error("artefact band sizes must be positive");
    }
}

cv::Matx23d affine_matrix(const AffineParams& params, cv::Size size)
{
    const double cx = (size.width - 1) / 2.0;
    const double cy = (size.height - 1) / 2.0;
    const double theta = params.angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    // R * S, applied about the centre.
    const double a = c * params.scale_x;
    const double b = -s * params.scale_y;
    const double d = s * params.scale_x;
    const double e = c * params.scale_y;
    return {a, b, cx + params.translate_x - a * cx - b * cy, d, e, cy + params.translate_y - d * cx - e * cy};
}

Augmented apply_affine(const cv::Mat& image, std::span<const Point2> coords, const cv::Matx23d& matrix)
{
    Augmented out;
    const cv::Mat src = as_float(image);
    if (matrix == cv::Matx23d(1, 0, 0, 0, 1, 0))
        out.image = src;
    else
        cv::warpAffine(src, out.image, matrix, src.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, 0.0);
    out.coords.reserve(coords.size());
    for (const auto& p : coords) {
        out.coords.push_back({matrix(0, 0) * p.x + matrix(0, 1) * p.y + matrix(0, 2),
                              matrix(1, 0) * p.x + matrix(1, 1) * p.y + matrix(1, 2)});
    }
    out.valid = inside(out.coords, src.size());
    return out;
}

Augmented apply_elastic(const cv::Mat& image, std::span<const Point2> coords, double alpha, double sigma, Rng& rng)
{
    const cv::Mat src = as_float(image);
    if (alpha == 0.0 || sigma <= 0.0) {
        Augmented out{src, {coords.begin(), coords.end()}, {}};
        out.valid = inside(out.coords, src.size());
        return out;
    }

    std::uniform_real_distribution<float> noise(-1.0f, 1.0f);
    auto random_field = [&] {
        cv::Mat field(src.size(), CV_32F);
        for (int y = 0; y < field.rows; ++y) {
            auto* row = field.ptr<float>(y);
            for (int x = 0; x < field.cols; ++x)
                row[x] = noise(rng);
        }
        cv::GaussianBlur(field, field, cv::Size(0, 0), sigma, sigma, cv::BORDER_CONSTANT);
        return cv::Mat(field * alpha);
    };
    const cv::Mat dx = random_field();
    const cv::Mat dy = random_field();

    cv::Mat map_x(src.size(), CV_32F);
    cv::Mat map_y(src.size(), CV_32F);
    for (int y = 0; y < src.rows; ++y) {
        for (int x = 0; x < src.cols; ++x) {
            map_x.at<float>(y, x) = static_cast<float>(x) + dx.at<float>(y, x);
            map_y.at<float>(y, x) = static_cast<float>(y) + dy.at<float>(y, x);
        }
    }

    Augmented out;
    cv::remap(src, out.image, map_x, map_y, cv::INTER_LINEAR, cv::BORDER_CONSTANT, 0.0);

    // Output pixel q samples input q + d(q); solve q + d(q) = p by fixed point.
    out.coords.reserve(coords.size());
    for (const auto& p : coords) {
        double qx = p.x;
        double qy = p.y;
        for (int it = 0; it < 10; ++it) {
            qx = p.x - bilinear(dx, qx, qy);
            qy = p.y - bilinear(dy, qx, qy);
        }
        out.coords.push_back({qx, qy});
    }
    out.valid = inside(out.coords, src.size());
    return out;
}

Augmented apply_geometric(const cv::Mat& image, std::span<const Point2> coords, const AugmentationConfig& config,
                          Rng& rng)
{
    AffineParams params;
    if (chance(config.apply_prob, rng))
        params.angle_deg = uniform(-config.rotation_deg, config.rotation_deg, rng);
    if (chance(config.apply_prob, rng)) {
        params.translate_x = uniform(-config.translate_x_px, config.translate_x_px, rng);
        params.translate_y = uniform(-config.translate_y_px, config.translate_y_px, rng);
    }
    if (chance(config.skewed_scale_rate, rng)) {
        params.scale_x = uniform(1.0 - config.scale_delta, 1.0 + config.scale_delta, rng);
        params.scale_y = uniform(1.0 - config.scale_delta, 1.0 + config.scale_delta, rng);
    } else if (chance(config.apply_prob, rng)) {
        params.scale_x = params.scale_y = uniform(1.0 - config.scale_delta, 1.0 + config.scale_delta, rng);
    }

    auto out = apply_affine(image, coords, affine_matrix(params, image.size()));
    if (chance(config.apply_prob, rng)) {
        auto warped = apply_elastic(out.image, out.coords, config.elastic_alpha, config.elastic_sigma, rng);
        for (std::size_t i = 0; i < warped.valid.size(); ++i)
            warped.valid[i] = warped.valid[i] && out.valid[i];
        out = std::move(warped);
    }
    return out;
}

cv::Mat apply_cutout(const cv::Mat& image, double frac_w, double frac_h, Rng& rng, cv::Rect* region)
{
    cv::Mat out = image.clone();
    const int w = std::clamp(static_cast<int>(std::lround(frac_w * image.cols)), 0, image.cols);
    const int h = std::clamp(static_cast<int>(std::lround(frac_h * image.rows)), 0, image.rows);
    const int x = uniform_int(0, image.cols - w, rng);
    const int y = uniform_int(0, image.rows - h, rng);
    const cv::Rect rect(x, y, w, h);
    if (rect.area() > 0)
        out(rect).setTo(0.0);
    if (region)
        *region = rect;
    return out;
}

cv::Mat apply_photometric(const cv::Mat& image, const AugmentationConfig& config, Rng& rng)
{
    cv::Mat out = as_float(image);
    if (chance(config.apply_prob, rng)) {
        const double factor = uniform(1.0 - config.multiply_delta, 1.0 + config.multiply_delta, rng);
        if (factor != 1.0)
            out *= factor;
    }
    if (chance(config.apply_prob, rng)) {
        const double gamma = uniform(config.gamma_min, config.gamma_max, rng);
        if (gamma != 1.0) {
            cv::Mat base = cv::max(out, 0.0) / 255.0;
            cv::pow(base, gamma, base);
            out = base * 255.0;
        }
    }
    if (chance(config.invert_rate, rng))
        out = 255.0 - out;
    if (chance(config.blur_rate, rng)) {
        const double sigma = uniform(config.blur_sigma_min, config.blur_sigma_max, rng);
        cv::GaussianBlur(out, out, cv::Size(0, 0), sigma, sigma, cv::BORDER_REFLECT);
    }
    for (int i = 0; i < config.cutout_count; ++i) {
        if (chance(config.apply_prob, rng)) {
            const double fw = uniform(config.cutout_min_frac, config.cutout_max_frac, rng);
            const double fh = uniform(config.cutout_min_frac, config.cutout_max_frac, rng);
            out = apply_cutout(out, fw, fh, rng);
        }
    }
    return clip(out);
}

cv::Rect ArtefactBand::rect(cv::Size image_size) const
{
    if (orientation == BandOrientation::vertical)
        return {offset, 0, size, image_size.height};
    return {0, offset, image_size.width, size};
}

cv::Mat apply_artefact_band(const cv::Mat& image, const ArtefactBand& band, double noise_sigma, Rng& rng)
{
    cv::Mat out = as_float(image);
    const cv::Rect rect = band.rect(out.size()) & cv::Rect(0, 0, out.cols, out.rows);
    if (rect.area() == 0)
        return out;
    cv::Mat roi = out(rect);
    if (band.mode == ArtefactMode::multiplicative) {
        if (band.factor != 1.0)
            roi *= band.factor;
    } else {
        std::normal_distribution<float> noise(0.0f, static_cast<float>(noise_sigma));
        for (int y = 0; y < roi.rows; ++y) {
            auto* row = roi.ptr<float>(y);
            for (int x = 0; x < roi.cols; ++x)
                row[x] += noise(rng);
        }
    }
    cv::Mat clipped = clip(roi);
    clipped.copyTo(roi);
    return out;
}

ArtefactResult simulate_xray_artefact(const cv::Mat& image, const AugmentationConfig& config, Rng& rng)
{
    if (image.dims != 2 || image.empty())
        throw Error("artefact simulation expects a non-empty 2D image");
    if (!chance(config.artefact_rate, rng))
        return {as_float(image), std::nullopt};

    ArtefactBand band;
    band.orientation = chance(0.5, rng) ? BandOrientation::vertical : BandOrientation::horizontal;
    const int extent = band.orientation == BandOrientation::vertical ? image.cols : image.rows;
    const int pick = uniform_int(0, static_cast<int>(config.artefact_band_sizes.size()) - 1, rng);
    band.size = std::min(config.artefact_band_sizes[static_cast<std::size_t>(pick)], extent);
    band.offset = uniform_int(0, extent - band.size, rng);
    band.mode = chance(0.5, rng) ? ArtefactMode::additive_noise : ArtefactMode::multiplicative;
    if (band.mode == ArtefactMode::multiplicative)
        band.factor = uniform(config.artefact_mult_min, config.artefact_mult_max, rng);

    return {apply_artefact_band(image, band, config.artefact_noise_sigma, rng), band};
}

Augmented augment(const cv::Mat& image, std::span<const Point2> coords, const AugmentationConfig& config, Rng& rng)
{
    if (!config.enabled) {
        Augmented out{as_float(image), {coords.begin(), coords.end()}, {}};
        out.valid = inside(out.coords, image.size());
        return out;
    }
    auto out = apply_geometric(image, coords, config, rng);
    out.image = apply_photometric(out.image, config, rng);
    out.image = simulate_xray_artefact(out.image, config, rng).image;
    return out;
}

}  // namespace cephland
