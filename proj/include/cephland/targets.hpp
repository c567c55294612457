#pragma once

#include <span>
#include <vector>

#include <torch/torch.h>

#include "cephland/landmarks.hpp"

namespace cephland {

/// L x H x W Gaussian-blurred one-hot planes plus a per-landmark validity
/// mask. Invalid landmarks (outside the crop) have all-zero planes.
struct TargetHeatmap {
    torch::Tensor heatmaps;  ///< float32, L x H x W
    torch::Tensor valid;     ///< bool, L
};

/// Gaussian kernel support radius: ceil(4 sigma).
int kernel_radius(double sigma);

/// One-hot at the rounded coordinate convolved with a Gaussian normalised
/// over its full support, truncated at 4 sigma. Border kernels are clipped
/// without renormalisation. sigma == 0 gives an exact one-hot.
TargetHeatmap encode_target(std::span<const Point2> coords, int height, int width, double sigma = 1.0);

/// Stacks per-image targets into B x L x H x W and B x L.
TargetHeatmap stack_targets(std::span<const TargetHeatmap> targets);

/// Spatial softmax cross-entropy, -sum(y * log softmax(logits)) per plane,
/// averaged over valid landmarks and then over images that have at least one
/// valid landmark.
torch::Tensor heatmap_loss(const torch::Tensor& logits, const torch::Tensor& targets, const torch::Tensor& valid);

inline torch::Tensor heatmap_loss(const torch::Tensor& logits, const TargetHeatmap& target)
{
    return heatmap_loss(logits, target.heatmaps, target.valid);
}

}  // namespace cephland
