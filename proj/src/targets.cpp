#include "cephland/targets.hpp"

#include <cmath>

#include "cephland/region.hpp"

namespace cephland {

int kernel_radius(double sigma)
{
    if (sigma < 0.0)
        throw Error("blur sigma must be non-negative");
    return static_cast<int>(std::ceil(4.0 * sigma));
}

TargetHeatmap encode_target(std::span<const Point2> coords, int height, int width, double sigma)
{
    if (height < 1 || width < 1)
        throw Error("target heatmap needs a positive size");
    const auto n = static_cast<int64_t>(coords.size());
    const int radius = kernel_radius(sigma);

    // Normalised kernel over its full (2r+1)^2 support.
    std::vector<double> kernel(static_cast<std::size_t>((2 * radius + 1) * (2 * radius + 1)), 1.0);
    if (radius > 0) {
        double total = 0.0;
        for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
                const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                kernel[static_cast<std::size_t>((dy + radius) * (2 * radius + 1) + dx + radius)] = v;
                total += v;
            }
        }
        for (auto& v : kernel)
            v /= total;
    }

    TargetHeatmap target;
    target.heatmaps = torch::zeros({n, height, width}, torch::kFloat32);
    target.valid = torch::zeros({n}, torch::kBool);
    auto planes = target.heatmaps.accessor<float, 3>();
    auto valid = target.valid.accessor<bool, 1>();

    for (int64_t l = 0; l < n; ++l) {
        const auto& p = coords[static_cast<std::size_t>(l)];
        if (!(p.x >= 0.0 && p.x < width && p.y >= 0.0 && p.y < height))
            continue;
        valid[l] = true;
        const int cx = std::min(static_cast<int>(round_half_away(p.x)), width - 1);
        const int cy = std::min(static_cast<int>(round_half_away(p.y)), height - 1);
        for (int dy = -radius; dy <= radius; ++dy) {
            const int y = cy + dy;
            if (y < 0 || y >= height)
                continue;
            for (int dx = -radius; dx <= radius; ++dx) {
                const int x = cx + dx;
                if (x < 0 || x >= width)
                    continue;
                planes[l][y][x] =
                    static_cast<float>(kernel[static_cast<std::size_t>((dy + radius) * (2 * radius + 1) + dx + radius)]);
            }
        }
    }
    return target;
}

TargetHeatmap stack_targets(std::span<const TargetHeatmap> targets)
{
    if (targets.empty())
        throw Error("no targets to stack");
    std::vector<torch::Tensor> maps;
    std::vector<torch::Tensor> masks;
    for (const auto& t : targets) {
        maps.push_back(t.heatmaps);
        masks.push_back(t.valid);
    }
    return {torch::stack(maps), torch::stack(masks)};
}

torch::Tensor heatmap_loss(const torch::Tensor& logits, const torch::Tensor& targets, const torch::Tensor& valid)
{
    if (logits.dim() != 4 || logits.sizes() != targets.sizes())
        throw Error("logits and targets must both be B x L x H x W with equal shapes");
    if (valid.dim() != 2 || valid.size(0) != logits.size(0) || valid.size(1) != logits.size(1))
        throw Error("validity mask must be B x L");

    const auto mask = valid.to(logits.scalar_type());
    const auto per_image_valid = mask.sum(1);
    if (per_image_valid.sum().item<double>() == 0.0)
        throw Error("all landmarks invalid: no training signal");

    const auto flat = logits.flatten(2);
    const auto log_prob = torch::log_softmax(flat, 2);
    const auto ce = -(targets.flatten(2).to(logits.scalar_type()) * log_prob).sum(2);  // B x L

    const auto has_valid = per_image_valid > 0;
    const auto per_image = (ce * mask).sum(1) / per_image_valid.clamp_min(1.0);
    return per_image.masked_select(has_valid).mean();
}

}  // namespace cephland
