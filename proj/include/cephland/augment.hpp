#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <opencv2/core.hpp>

#include "cephland/landmarks.hpp"

namespace cephland {

/// Magnitudes and rates of the training augmentation chain. Conventional
/// ops without a dedicated rate fire independently with `apply_prob`.
struct AugmentationConfig {
    bool enabled{true};
    double apply_prob{0.5};

    double rotation_deg{5.0};
    double translate_x_px{30.0};
    double translate_y_px{20.0};
    double scale_delta{0.125};
    double skewed_scale_rate{0.3};
    double elastic_alpha{400.0};
    double elastic_sigma{30.0};

    double multiply_delta{0.6};
    double gamma_min{0.3};
    double gamma_max{2.0};
    double invert_rate{0.1};
    double blur_rate{0.1};
    double blur_sigma_min{0.5};
    double blur_sigma_max{1.5};
    int cutout_count{1};
    double cutout_min_frac{0.04};
    double cutout_max_frac{0.3};

    double artefact_rate{0.9};
    double artefact_noise_sigma{15.0};
    double artefact_mult_min{0.5};
    double artefact_mult_max{1.5};
    std::vector<int> artefact_band_sizes{25, 50, 75, 100, 125};

    void validate() const;
};

/// Image (CV_32FC1, intensities on [0, 255]) with coordinates that follow it.
struct Augmented {
    cv::Mat image;
    std::vector<Point2> coords;
    std::vector<bool> valid;  ///< false once a landmark leaves the frame
};

struct AffineParams {
    double angle_deg{0.0};
    double scale_x{1.0};
    double scale_y{1.0};
    double translate_x{0.0};
    double translate_y{0.0};
};

/// Rotation and scaling about the image centre followed by translation.
cv::Matx23d affine_matrix(const AffineParams& params, cv::Size size);

Augmented apply_affine(const cv::Mat& image, std::span<const Point2> coords, const cv::Matx23d& matrix);

/// Smoothed random displacement field (alpha, sigma); each landmark moves to
/// the output position whose displacement lands on it.
Augmented apply_elastic(const cv::Mat& image, std::span<const Point2> coords, double alpha, double sigma, Rng& rng);

Augmented apply_geometric(const cv::Mat& image, std::span<const Point2> coords, const AugmentationConfig& config,
                          Rng& rng);

cv::Mat apply_photometric(const cv::Mat& image, const AugmentationConfig& config, Rng& rng);

/// Zeroes one rectangle whose sides are `frac_w` and `frac_h` of the image.
cv::Mat apply_cutout(const cv::Mat& image, double frac_w, double frac_h, Rng& rng, cv::Rect* region = nullptr);

enum class BandOrientation { vertical, horizontal };
enum class ArtefactMode { additive_noise, multiplicative };

/// A vertical band spans every row of columns [offset, offset + size); a
/// horizontal band spans every column of those rows.
struct ArtefactBand {
    BandOrientation orientation{BandOrientation::vertical};
    int offset{0};
    int size{0};
    ArtefactMode mode{ArtefactMode::additive_noise};
    double factor{1.0};

    cv::Rect rect(cv::Size image_size) const;
};

struct ArtefactResult {
    cv::Mat image;
    std::optional<ArtefactBand> band;
};

/// Applies `band` (noise drawn from N(0, noise_sigma) per pixel when
/// additive) and clips to [0, 255].
cv::Mat apply_artefact_band(const cv::Mat& image, const ArtefactBand& band, double noise_sigma, Rng& rng);

ArtefactResult simulate_xray_artefact(const cv::Mat& image, const AugmentationConfig& config, Rng& rng);

/// Geometric, then photometric, then artefact.
Augmented augment(const cv::Mat& image, std::span<const Point2> coords, const AugmentationConfig& config, Rng& rng);

}  // namespace cephland
