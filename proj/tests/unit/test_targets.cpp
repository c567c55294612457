#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cephland/targets.hpp"

using namespace cephland;

namespace {

double gaussian_oracle(int dx, int dy, double sigma)
{
    const int r = static_cast<int>(std::ceil(4 * sigma));
    double z = 0.0;
    for (int y = -r; y <= r; ++y)
        for (int x = -r; x <= r; ++x)
            z += std::exp(-(x * x + y * y) / (2 * sigma * sigma));
    if (std::abs(dx) > r || std::abs(dy) > r)
        return 0.0;
    return std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) / z;
}

double dense_loss(const torch::Tensor& logits, const torch::Tensor& target)
{
    // logits, target: H x W (double)
    const auto l = logits.accessor<double, 2>();
    const auto t = target.accessor<double, 2>();
    double m = -INFINITY;
    for (int i = 0; i < logits.size(0); ++i)
        for (int j = 0; j < logits.size(1); ++j)
            m = std::max(m, l[i][j]);
    double z = 0.0;
    for (int i = 0; i < logits.size(0); ++i)
        for (int j = 0; j < logits.size(1); ++j)
            z += std::exp(l[i][j] - m);
    const double lse = m + std::log(z);
    double loss = 0.0;
    for (int i = 0; i < logits.size(0); ++i)
        for (int j = 0; j < logits.size(1); ++j)
            loss -= t[i][j] * (l[i][j] - lse);
    return loss;
}

}  // namespace

TEST(Targets, InteriorSumsToOneWithPeakAtCentre)
{
    const std::vector<Point2> pts{{32, 32}};
    const auto t = encode_target(pts, 64, 64, 1.0);
    EXPECT_NEAR(t.heatmaps.sum().item<double>(), 1.0, 1e-4);
    EXPECT_EQ(t.heatmaps.flatten().argmax().item<int64_t>(), 32 * 64 + 32);
    EXPECT_TRUE(t.valid[0].item<bool>());
    for (double sigma : {0.5, 1.0, 1.7, 3.0}) {
        const auto ts = encode_target(pts, 64, 64, sigma);
        EXPECT_NEAR(ts.heatmaps.sum().item<double>(), 1.0, 1e-4) << sigma;
    }
}

TEST(Targets, SigmaZeroIsOneHot)
{
    const std::vector<Point2> pts{{3.4, 5.6}, {2.5, 0.5}};
    const auto t = encode_target(pts, 8, 8, 0.0);
    auto expected = torch::zeros({2, 8, 8});
    expected[0][6][3] = 1.0;
    expected[1][1][3] = 1.0;
    EXPECT_TRUE(torch::equal(t.heatmaps, expected));
}

TEST(Targets, BorderTruncationMatchesExplicitGaussian)
{
    const std::vector<Point2> pts{{0, 0}, {9, 3}};
    const auto t = encode_target(pts, 10, 10, 1.0);
    const auto a = t.heatmaps.accessor<float, 3>();
    const int c[2][2] = {{0, 0}, {9, 3}};
    for (int l = 0; l < 2; ++l)
        for (int y = 0; y < 10; ++y)
            for (int x = 0; x < 10; ++x)
                EXPECT_NEAR(a[l][y][x], gaussian_oracle(x - c[l][0], y - c[l][1], 1.0), 1e-6);
    EXPECT_LT(t.heatmaps[0].sum().item<double>(), 1.0);
    EXPECT_TRUE(t.valid[0].item<bool>());
}

TEST(Targets, OutOfBoundsMarkedInvalid)
{
    const std::vector<Point2> pts{{-1, 3}, {3, 8}, {8, 3}, {3, 3}, {7.9, 7.9}};
    const auto t = encode_target(pts, 8, 8, 1.0);
    EXPECT_FALSE(t.valid[0].item<bool>());
    EXPECT_FALSE(t.valid[1].item<bool>());
    EXPECT_FALSE(t.valid[2].item<bool>());
    EXPECT_TRUE(t.valid[3].item<bool>());
    EXPECT_TRUE(t.valid[4].item<bool>());
    EXPECT_EQ(t.heatmaps[0].abs().sum().item<double>(), 0.0);
    EXPECT_EQ(t.heatmaps[4][7][7].item<float>(), t.heatmaps.max().item<float>());
}

TEST(Targets, RoundsHalfAwayFromZero)
{
    const std::vector<Point2> pts{{2.5, 1.5}};
    const auto t = encode_target(pts, 6, 6, 0.0);
    EXPECT_EQ(t.heatmaps[0][2][3].item<float>(), 1.0f);
}

TEST(Loss, UniformLogitsGiveLogArea)
{
    const std::vector<Point2> pts{{1, 2}};
    const auto t = encode_target(pts, 4, 4, 0.0);
    const auto logits = torch::zeros({1, 1, 4, 4});
    const auto loss = heatmap_loss(logits, t.heatmaps.unsqueeze(0), t.valid.unsqueeze(0));
    EXPECT_NEAR(loss.item<double>(), std::log(16.0), 1e-6);
}

TEST(Loss, SaturatedSpikeIsNearZero)
{
    const std::vector<Point2> pts{{1, 2}};
    const auto t = encode_target(pts, 4, 4, 0.0);
    auto logits = torch::zeros({1, 1, 4, 4});
    logits[0][0][2][1] = 100.0;
    const auto loss = heatmap_loss(logits, t.heatmaps.unsqueeze(0), t.valid.unsqueeze(0));
    EXPECT_LT(loss.item<double>(), 1e-6);
}

TEST(Loss, MatchesDenseOracle)
{
    torch::manual_seed(5);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 7.99);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Point2> pts{{u(rng), u(rng)}, {u(rng), u(rng)}, {u(rng), u(rng)}};
        const auto t = encode_target(pts, 8, 8, 1.0);
        const auto logits = torch::randn({1, 3, 8, 8}, torch::kFloat64) * 3.0;
        const auto targets = t.heatmaps.to(torch::kFloat64);
        const auto loss = heatmap_loss(logits, targets.unsqueeze(0), t.valid.unsqueeze(0)).item<double>();
        double oracle = 0.0;
        for (int l = 0; l < 3; ++l)
            oracle += dense_loss(logits[0][l], targets[l]);
        EXPECT_NEAR(loss, oracle / 3.0, 1e-6);
    }
}

TEST(Loss, CrossEntropyBoundsAndMask)
{
    torch::manual_seed(6);
    const std::vector<Point2> pts{{3, 3}, {4, 2}};
    const auto t = encode_target(pts, 8, 8, 1.0);
    const auto targets = t.heatmaps.to(torch::kFloat64);
    const auto logits = torch::randn({1, 2, 8, 8}, torch::kFloat64);
    const double loss = heatmap_loss(logits, targets.unsqueeze(0), t.valid.unsqueeze(0)).item<double>();
    double entropy = 0.0;
    for (int l = 0; l < 2; ++l) {
        const auto p = targets[l].flatten();
        const auto nz = p.masked_select(p > 0);
        entropy += -(nz * nz.log()).sum().item<double>();
    }
    EXPECT_GE(loss + 1e-12, entropy / 2.0);

    // An invalid extra plane never changes the loss.
    const auto extra_logits = torch::cat({logits, torch::randn({1, 1, 8, 8}, torch::kFloat64) * 10}, 1);
    const auto extra_targets = torch::cat({targets.unsqueeze(0), torch::rand({1, 1, 8, 8}, torch::kFloat64)}, 1);
    const auto extra_valid = torch::cat({t.valid.unsqueeze(0), torch::zeros({1, 1}, torch::kBool)}, 1);
    EXPECT_NEAR(heatmap_loss(extra_logits, extra_targets, extra_valid).item<double>(), loss, 1e-12);
}

TEST(Loss, OneHotLossIsNonNegative)
{
    torch::manual_seed(8);
    for (int i = 0; i < 10; ++i) {
        const std::vector<Point2> pts{{static_cast<double>(i % 5), 2}};
        const auto t = encode_target(pts, 5, 5, 0.0);
        const auto logits = torch::randn({1, 1, 5, 5}) * 5;
        EXPECT_GE(heatmap_loss(logits, t.heatmaps.unsqueeze(0), t.valid.unsqueeze(0)).item<double>(), 0.0);
    }
}

TEST(Loss, TranslationEquivariance)
{
    torch::manual_seed(10);
    const std::vector<Point2> pts{{8, 8}};
    const auto t = encode_target(pts, 24, 24, 1.0);
    auto logits = torch::full({1, 1, 24, 24}, -50.0, torch::kFloat64);
    logits.index_put_({0, 0, torch::indexing::Slice(4, 13), torch::indexing::Slice(4, 13)},
                      torch::randn({9, 9}, torch::kFloat64));
    const auto targets = t.heatmaps.to(torch::kFloat64).unsqueeze(0);
    const double base = heatmap_loss(logits, targets, t.valid.unsqueeze(0)).item<double>();
    const auto shifted_logits = torch::roll(logits, {5, 3}, {2, 3});
    const auto shifted_targets = torch::roll(targets, {5, 3}, {2, 3});
    EXPECT_NEAR(heatmap_loss(shifted_logits, shifted_targets, t.valid.unsqueeze(0)).item<double>(), base, 1e-6);
}

TEST(Loss, GradientMatchesFiniteDifferences)
{
    torch::manual_seed(12);
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.0, 5.99);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<Point2> pts{{u(rng), u(rng)}, {u(rng), u(rng)}};
        const auto t = encode_target(pts, 6, 6, 1.0);
        const auto targets = t.heatmaps.to(torch::kFloat64).unsqueeze(0);
        const auto valid = t.valid.unsqueeze(0);
        auto logits = torch::randn({1, 2, 6, 6}, torch::kFloat64).requires_grad_(true);
        heatmap_loss(logits, targets, valid).backward();
        const auto grad = logits.grad().clone();
        const double h = 1e-6;
        auto base = logits.detach().clone();
        for (int64_t i = 0; i < base.numel(); ++i) {
            auto plus = base.clone();
            auto minus = base.clone();
            plus.view(-1)[i] += h;
            minus.view(-1)[i] -= h;
            const double fd = (heatmap_loss(plus, targets, valid).item<double>() -
                               heatmap_loss(minus, targets, valid).item<double>()) /
                              (2 * h);
            const double an = grad.view(-1)[i].item<double>();
            EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(1e-3, std::abs(an))) << i;
        }
    }
}

TEST(Loss, AllInvalidIsAnError)
{
    const std::vector<Point2> pts{{-5, -5}};
    const auto t = encode_target(pts, 4, 4, 1.0);
    EXPECT_THROW(heatmap_loss(torch::zeros({1, 1, 4, 4}), t.heatmaps.unsqueeze(0), t.valid.unsqueeze(0)), Error);
    EXPECT_THROW(heatmap_loss(torch::zeros({1, 1, 4, 4}), torch::zeros({1, 1, 4, 5}), t.valid.unsqueeze(0)), Error);
}

TEST(Loss, BatchMeanOverImagesWithValidLandmarks)
{
    const std::vector<Point2> a{{1, 1}};
    const std::vector<Point2> b{{-1, -1}};
    const std::vector<TargetHeatmap> ts{encode_target(a, 4, 4, 0.0), encode_target(b, 4, 4, 0.0)};
    const auto s = stack_targets(ts);
    const auto logits = torch::zeros({2, 1, 4, 4});
    EXPECT_NEAR(heatmap_loss(logits, s).item<double>(), std::log(16.0), 1e-6);
}
