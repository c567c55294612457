#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cephland/landmarks.hpp"

namespace cephland {

enum class Variant { nano, tiny };

std::string to_string(Variant variant);
Variant parse_variant(const std::string& name);

struct ModelSpec {
    Variant variant{Variant::nano};
    int n_landmarks{kNumLandmarks};
    double encoder_drop_path{0.375};
    double decoder_drop_path{0.275};
    double residual_dropout2d{0.2};
    /// Local checkpoint path or registry name of the 3-channel encoder
    /// weights. Empty means random initialisation.
    std::string pretrained_weights_ref;

    void validate() const;
};

struct EncoderShape {
    std::array<int, 4> depths;
    std::array<int, 4> dims;
    int pyramid_width;
};

EncoderShape encoder_shape(Variant variant);

/// Total input stride of the encoder; inputs are padded to a multiple of it.
inline constexpr int kEncoderStride = 32;

/// LayerNorm over the channel axis of an NCHW tensor.
class LayerNorm2dImpl : public torch::nn::Module {
public:
    explicit LayerNorm2dImpl(int64_t channels, double eps = 1e-6);
    torch::Tensor forward(const torch::Tensor& x);

    torch::Tensor weight;
    torch::Tensor bias;

private:
    double eps_;
};
TORCH_MODULE(LayerNorm2d);

/// Global response normalisation on channels-last activations.
class GlobalResponseNormImpl : public torch::nn::Module {
public:
    explicit GlobalResponseNormImpl(int64_t channels);
    torch::Tensor forward(const torch::Tensor& x);

    torch::Tensor gamma;
    torch::Tensor beta;
};
TORCH_MODULE(GlobalResponseNorm);

torch::Tensor drop_path(const torch::Tensor& x, double rate, bool training);

class ConvNeXtBlockImpl : public torch::nn::Module {
public:
    ConvNeXtBlockImpl(int64_t dim, double drop_path_rate);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d dwconv_{nullptr};
    torch::nn::LayerNorm norm_{nullptr};
    torch::nn::Linear pwconv1_{nullptr};
    GlobalResponseNorm grn_{nullptr};
    torch::nn::Linear pwconv2_{nullptr};
    double drop_path_rate_;
};
TORCH_MODULE(ConvNeXtBlock);

/// Four-stage ConvNeXt V2 feature hierarchy at strides 4, 8, 16, 32.
class ConvNeXtEncoderImpl : public torch::nn::Module {
public:
    ConvNeXtEncoderImpl(int64_t in_channels, const EncoderShape& shape, double drop_path_rate);
    std::vector<torch::Tensor> forward(const torch::Tensor& x);

    torch::nn::Conv2d stem_conv{nullptr};

private:
    LayerNorm2d stem_norm_{nullptr};
    std::vector<torch::nn::Sequential> downsample_;
    std::vector<torch::nn::Sequential> stages_;
};
TORCH_MODULE(ConvNeXtEncoder);

/// conv-GN-GELU-dropout2d-conv-GN with a projected shortcut.
class ResidualConvBlockImpl : public torch::nn::Module {
public:
    ResidualConvBlockImpl(int64_t in_channels, int64_t out_channels, double dropout);
    torch::Tensor forward(const torch::Tensor& x);

private:
    torch::nn::Conv2d conv1_{nullptr};
    torch::nn::GroupNorm norm1_{nullptr};
    torch::nn::Dropout2d dropout_{nullptr};
    torch::nn::Conv2d conv2_{nullptr};
    torch::nn::GroupNorm norm2_{nullptr};
    torch::nn::Conv2d shortcut_{nullptr};
};
TORCH_MODULE(ResidualConvBlock);

class UpBlockImpl : public torch::nn::Module {
public:
    UpBlockImpl(int64_t in_channels, int64_t out_channels, double dropout, std::array<double, 2> drop_path_rates);
    torch::Tensor forward(const torch::Tensor& x);

private:
    ResidualConvBlock residual_{nullptr};
    ConvNeXtBlock block1_{nullptr};
    ConvNeXtBlock block2_{nullptr};
    torch::nn::ConvTranspose2d upsample_{nullptr};
};
TORCH_MODULE(UpBlock);

/// Encoder -> MLP feature pyramid fused at stride 4 -> two x2 up blocks ->
/// GroupNorm/GELU/1x1 head with one channel per landmark.
class HeatmapNetImpl : public torch::nn::Module {
public:
    explicit HeatmapNetImpl(const ModelSpec& spec);

    /// Expects B x 1 x H x W with H and W multiples of kEncoderStride.
    torch::Tensor forward(const torch::Tensor& x);

    const ModelSpec& spec() const noexcept { return spec_; }

    ConvNeXtEncoder encoder{nullptr};

private:
    ModelSpec spec_;
    std::vector<torch::nn::Conv2d> pyramid_;
    UpBlock up1_{nullptr};
    UpBlock up2_{nullptr};
    torch::nn::GroupNorm head_norm_{nullptr};
    torch::nn::Conv2d head_conv_{nullptr};
};
TORCH_MODULE(HeatmapNet);

/// Largest divisor of `channels` not exceeding 32.
int64_t group_count(int64_t channels);

/// Sums an (out, 3, kh, kw) stem kernel over its input-channel axis.
torch::Tensor adapt_input_to_single_channel(const torch::Tensor& rgb_stem_weight);

/// Builds the network, loading and adapting pretrained encoder weights when
/// spec.pretrained_weights_ref resolves. `registry` is searched for
/// `<ref>.pt` when the ref is not itself a file.
HeatmapNet build_model(const ModelSpec& spec, const std::filesystem::path& registry = {});

/// Pads B x 1 x H x W bottom/right to the encoder stride, runs the network
/// and crops the logits back to H x W. Throws on non-finite output.
torch::Tensor forward(HeatmapNet& model, const torch::Tensor& images);

/// Maps 8-bit intensities in [0, 255] to the network's input range.
torch::Tensor normalize_intensity(const torch::Tensor& pixels);

int64_t parameter_count(const torch::nn::Module& module);

}  // namespace cephland
