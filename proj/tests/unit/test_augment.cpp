#include <random>
#include <set>

#include <gtest/gtest.h>
#include <opencv2/imgproc.hpp>

#include "cephland/augment.hpp"

using namespace cephland;

namespace {

cv::Mat random_image(int h, int w, std::uint64_t seed)
{
    cv::Mat img(h, w, CV_8UC1);
    cv::RNG cv_rng(seed);
    cv_rng.fill(img, cv::RNG::UNIFORM, 0, 256);
    return img;
}

std::vector<Point2> random_coords(int n, int h, int w, Rng& rng)
{
    std::uniform_real_distribution<double> ux(0, w - 1), uy(0, h - 1);
    std::vector<Point2> pts;
    for (int i = 0; i < n; ++i)
        pts.push_back({ux(rng), uy(rng)});
    return pts;
}

AugmentationConfig quiet()
{
    AugmentationConfig c;
    c.rotation_deg = 0;
    c.translate_x_px = 0;
    c.translate_y_px = 0;
    c.scale_delta = 0;
    c.skewed_scale_rate = 0;
    c.elastic_alpha = 0;
    c.multiply_delta = 0;
    c.gamma_min = c.gamma_max = 1.0;
    c.invert_rate = 0;
    c.blur_rate = 0;
    c.cutout_count = 0;
    c.artefact_rate = 0;
    return c;
}

bool equal(const cv::Mat& a, const cv::Mat& b)
{
    return a.size() == b.size() && cv::norm(a, b, cv::NORM_INF) == 0.0;
}

}  // namespace

TEST(AugmentConfig, DefaultsValidate)
{
    AugmentationConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.artefact_band_sizes, (std::vector<int>{25, 50, 75, 100, 125}));
    EXPECT_EQ(c.rotation_deg, 5.0);
    EXPECT_EQ(c.translate_x_px, 30.0);
    EXPECT_EQ(c.translate_y_px, 20.0);
    EXPECT_EQ(c.scale_delta, 0.125);
    EXPECT_EQ(c.multiply_delta, 0.6);
    EXPECT_EQ(c.elastic_alpha, 400.0);
    EXPECT_EQ(c.elastic_sigma, 30.0);
    EXPECT_EQ(c.cutout_count, 1);
    EXPECT_EQ(c.cutout_min_frac, 0.04);
    EXPECT_EQ(c.cutout_max_frac, 0.3);
    EXPECT_EQ(c.gamma_min, 0.3);
    EXPECT_EQ(c.gamma_max, 2.0);
    EXPECT_EQ(c.invert_rate, 0.1);
    EXPECT_EQ(c.blur_rate, 0.1);
    EXPECT_EQ(c.skewed_scale_rate, 0.3);
    EXPECT_EQ(c.artefact_rate, 0.9);
    EXPECT_EQ(c.artefact_noise_sigma, 15.0);
    EXPECT_EQ(c.artefact_mult_min, 0.5);
    EXPECT_EQ(c.artefact_mult_max, 1.5);
    c.invert_rate = 1.5;
    EXPECT_THROW(c.validate(), Error);
    c = {};
    c.gamma_min = 3.0;
    EXPECT_THROW(c.validate(), Error);
}

TEST(Geometric, ZeroMagnitudesAreIdentity)
{
    Rng rng(1);
    const auto img = random_image(60, 50, 1);
    const auto pts = random_coords(53, 60, 50, rng);
    auto c = quiet();
    c.apply_prob = 1.0;
    const auto out = apply_geometric(img, pts, c, rng);
    cv::Mat f;
    img.convertTo(f, CV_32F);
    EXPECT_TRUE(equal(out.image, f));
    EXPECT_EQ(out.coords, pts);
    EXPECT_TRUE(std::all_of(out.valid.begin(), out.valid.end(), [](bool v) { return v; }));
}

TEST(Geometric, PureTranslation)
{
    Rng rng(2);
    const auto img = random_image(40, 40, 2);
    const std::vector<Point2> pts{{3, 4}, {35, 20}};
    AffineParams p;
    p.translate_x = 10;
    const auto out = apply_affine(img, pts, affine_matrix(p, img.size()));
    EXPECT_NEAR(out.coords[0].x, 13, 1e-12);
    EXPECT_NEAR(out.coords[0].y, 4, 1e-12);
    EXPECT_TRUE(out.valid[0]);
    EXPECT_FALSE(out.valid[1]);
    EXPECT_EQ(out.image.at<float>(10, 20), static_cast<float>(img.at<unsigned char>(10, 10)));
}

TEST(Geometric, AffineCoordsFollowMatrixAndImage)
{
    Rng rng(3);
    std::uniform_real_distribution<double> u(-1, 1);
    for (int trial = 0; trial < 40; ++trial) {
        AffineParams p{5 * u(rng), 1 + 0.125 * u(rng), 1 + 0.125 * u(rng), 30 * u(rng), 20 * u(rng)};
        cv::Mat img = cv::Mat::zeros(120, 100, CV_8UC1);
        const Point2 src{30 + 40 * (u(rng) + 1) / 2, 40 + 40 * (u(rng) + 1) / 2};
        cv::circle(img, cv::Point(static_cast<int>(src.x), static_cast<int>(src.y)), 0, cv::Scalar(255), cv::FILLED);
        const Point2 centre{std::floor(src.x), std::floor(src.y)};
        const auto m = affine_matrix(p, img.size());
        const std::vector<Point2> pts{centre};
        const auto out = apply_affine(img, pts, m);
        const double ex = m(0, 0) * centre.x + m(0, 1) * centre.y + m(0, 2);
        const double ey = m(1, 0) * centre.x + m(1, 1) * centre.y + m(1, 2);
        EXPECT_NEAR(out.coords[0].x, ex, 1e-9);
        EXPECT_NEAR(out.coords[0].y, ey, 1e-9);
        // Brightness centroid of the warped dot sits on the mapped coordinate.
        const auto mom = cv::moments(out.image);
        ASSERT_GT(mom.m00, 0);
        EXPECT_LT(std::hypot(mom.m10 / mom.m00 - ex, mom.m01 / mom.m00 - ey), 0.5);
    }
}

TEST(Geometric, ElasticCoordinatesTrackImageContent)
{
    Rng rng(4);
    cv::Mat img = cv::Mat::zeros(200, 200, CV_8UC1);
    const std::vector<Point2> pts{{100, 100}};
    cv::circle(img, cv::Point(100, 100), 3, cv::Scalar(255), cv::FILLED);
    const auto out = apply_elastic(img, pts, 400, 30, rng);
    const auto mom = cv::moments(out.image);
    ASSERT_GT(mom.m00, 0);
    EXPECT_LT(std::hypot(mom.m10 / mom.m00 - out.coords[0].x, mom.m01 / mom.m00 - out.coords[0].y), 1.0);
}

TEST(Geometric, Deterministic)
{
    const auto img = random_image(80, 70, 5);
    Rng a(9), b(9), c(9);
    const auto pts = random_coords(10, 80, 70, c);
    AugmentationConfig cfg;
    const auto x = augment(img, pts, cfg, a);
    const auto y = augment(img, pts, cfg, b);
    EXPECT_TRUE(equal(x.image, y.image));
    EXPECT_EQ(x.coords, y.coords);
}

TEST(Photometric, NeutralSettingsAreIdentity)
{
    Rng rng(6);
    auto c = quiet();
    c.apply_prob = 1.0;
    const auto img = random_image(30, 30, 6);
    cv::Mat f;
    img.convertTo(f, CV_32F);
    EXPECT_TRUE(equal(apply_photometric(img, c, rng), f));
}

TEST(Photometric, Invert)
{
    Rng rng(7);
    auto c = quiet();
    c.invert_rate = 1.0;
    const auto img = random_image(30, 30, 7);
    const auto out = apply_photometric(img, c, rng);
    for (int y = 0; y < 30; ++y)
        for (int x = 0; x < 30; ++x)
            EXPECT_EQ(out.at<float>(y, x), 255.0f - img.at<unsigned char>(y, x));
}

TEST(Photometric, OutputClipped)
{
    Rng rng(8);
    AugmentationConfig c;
    c.apply_prob = 1.0;
    const auto img = random_image(40, 40, 8);
    for (int i = 0; i < 20; ++i) {
        double lo, hi;
        cv::minMaxLoc(apply_photometric(img, c, rng), &lo, &hi);
        EXPECT_GE(lo, 0.0);
        EXPECT_LE(hi, 255.0);
    }
}

TEST(Photometric, CutoutZeroesOneRectangle)
{
    Rng rng(9);
    cv::Mat img(100, 100, CV_32F, cv::Scalar(200));
    for (int i = 0; i < 100; ++i) {
        std::uniform_real_distribution<double> frac(0.04, 0.3);
        const double fw = frac(rng), fh = frac(rng);
        cv::Rect rect;
        const auto out = apply_cutout(img, fw, fh, rng, &rect);
        const int zeroed = 100 * 100 - cv::countNonZero(out);
        EXPECT_EQ(zeroed, rect.area());
        EXPECT_EQ(cv::countNonZero(out(rect)), 0);
        EXPECT_GE(rect.width, 4);
        EXPECT_LE(rect.width, 30);
        EXPECT_GE(rect.height, 4);
        EXPECT_LE(rect.height, 30);
    }
}

TEST(Artefact, RateZeroIsIdentity)
{
    Rng rng(10);
    auto c = AugmentationConfig{};
    c.artefact_rate = 0;
    const auto img = random_image(150, 150, 10);
    cv::Mat f;
    img.convertTo(f, CV_32F);
    for (int i = 0; i < 50; ++i) {
        const auto r = simulate_xray_artefact(img, c, rng);
        EXPECT_FALSE(r.band);
        EXPECT_TRUE(equal(r.image, f));
    }
}

TEST(Artefact, NeutralFactorIsIdentity)
{
    Rng rng(11);
    const auto img = random_image(150, 150, 11);
    cv::Mat f;
    img.convertTo(f, CV_32F);
    ArtefactBand band{BandOrientation::vertical, 30, 50, ArtefactMode::multiplicative, 1.0};
    EXPECT_TRUE(equal(apply_artefact_band(img, band, 15, rng), f));
}

TEST(Artefact, AdditiveBandOnlyTouchesItsColumns)
{
    Rng rng(12);
    const auto img = random_image(150, 150, 12);
    cv::Mat f;
    img.convertTo(f, CV_32F);
    ArtefactBand band{BandOrientation::vertical, 30, 50, ArtefactMode::additive_noise, 1.0};
    const auto out = apply_artefact_band(img, band, 15, rng);
    cv::Mat diff = out != f;
    EXPECT_EQ(cv::countNonZero(diff(cv::Rect(0, 0, 30, 150))), 0);
    EXPECT_EQ(cv::countNonZero(diff(cv::Rect(80, 0, 70, 150))), 0);
    EXPECT_GT(cv::countNonZero(diff(cv::Rect(30, 0, 50, 150))), 0);
}

TEST(Artefact, NoiseStandardDeviationIs15)
{
    Rng rng(13);
    cv::Mat img(400, 400, CV_8UC1, cv::Scalar(128));
    ArtefactBand band{BandOrientation::horizontal, 0, 400, ArtefactMode::additive_noise, 1.0};
    const auto out = apply_artefact_band(img, band, 15, rng);
    cv::Scalar mean, stddev;
    cv::meanStdDev(out, mean, stddev);
    EXPECT_NEAR(stddev[0], 15.0, 0.3);
    EXPECT_NEAR(mean[0], 128.0, 0.3);
}

TEST(Artefact, BandClampedToSmallImages)
{
    Rng rng(14);
    AugmentationConfig c;
    c.artefact_rate = 1.0;
    const auto img = random_image(20, 30, 14);
    for (int i = 0; i < 50; ++i) {
        const auto r = simulate_xray_artefact(img, c, rng);
        ASSERT_TRUE(r.band);
        const int extent = r.band->orientation == BandOrientation::vertical ? 30 : 20;
        EXPECT_LE(r.band->offset + r.band->size, extent);
        EXPECT_GE(r.band->offset, 0);
    }
}

TEST(Artefact, SampledParametersCoverTheirSupports)
{
    Rng rng(15);
    AugmentationConfig c;
    c.artefact_rate = 1.0;
    const auto img = random_image(200, 200, 15);
    std::set<int> sizes;
    std::set<BandOrientation> orientations;
    std::set<ArtefactMode> modes;
    for (int i = 0; i < 300; ++i) {
        const auto r = simulate_xray_artefact(img, c, rng);
        ASSERT_TRUE(r.band);
        sizes.insert(r.band->size);
        orientations.insert(r.band->orientation);
        modes.insert(r.band->mode);
        if (r.band->mode == ArtefactMode::multiplicative) {
            EXPECT_GE(r.band->factor, 0.5);
            EXPECT_LE(r.band->factor, 1.5);
        }
    }
    EXPECT_EQ(sizes, (std::set<int>{25, 50, 75, 100, 125}));
    EXPECT_EQ(orientations.size(), 2u);
    EXPECT_EQ(modes.size(), 2u);
}

TEST(Augment, PhotometricAndArtefactNeverMoveCoordinates)
{
    Rng rng(16);
    auto c = AugmentationConfig{};
    c.rotation_deg = 0;
    c.translate_x_px = c.translate_y_px = 0;
    c.scale_delta = 0;
    c.skewed_scale_rate = 0;
    c.elastic_alpha = 0;
    c.artefact_rate = 1.0;
    const auto img = random_image(100, 90, 16);
    const auto pts = random_coords(53, 100, 90, rng);
    for (int i = 0; i < 20; ++i)
        EXPECT_EQ(augment(img, pts, c, rng).coords, pts);
}

TEST(Augment, DisabledIsIdentity)
{
    Rng rng(17);
    AugmentationConfig c;
    c.enabled = false;
    const auto img = random_image(50, 40, 17);
    const std::vector<Point2> pts{{1, 2}, {45, 3}};
    const auto out = augment(img, pts, c, rng);
    cv::Mat f;
    img.convertTo(f, CV_32F);
    EXPECT_TRUE(equal(out.image, f));
    EXPECT_EQ(out.coords, pts);
    EXPECT_TRUE(out.valid[0]);
    EXPECT_FALSE(out.valid[1]);
}
