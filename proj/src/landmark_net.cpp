#include "cephland/landmark_net.hpp"

#include <cmath>
#include <numeric>

namespace cephland {

namespace F = torch::nn::functional;

std::string to_string(Variant variant)
{
    return variant == Variant::nano ? "nano" : "tiny";
}

Variant parse_variant(const std::string& name)
{
    if (name == "nano")
        return Variant::nano;
    if (name == "tiny")
        return Variant::tiny;
    throw Error("unknown model variant: " + name);
}

void ModelSpec::validate() const
{
    if (n_landmarks < 1)
        throw Error("n_landmarks must be >= 1");
    for (double rate : {encoder_drop_path, decoder_drop_path, residual_dropout2d}) {
        if (!(rate >= 0.0 && rate < 1.0))
            throw Error("drop rates must lie in [0, 1)");
    }
}

EncoderShape encoder_shape(Variant variant)
{
    switch (variant) {
    case Variant::nano: return {{2, 2, 8, 2}, {80, 160, 320, 640}, 128};
    case Variant::tiny: return {{3, 3, 9, 3}, {96, 192, 384, 768}, 192};
    }
    throw Error("unknown model variant");
}

int64_t group_count(int64_t channels)
{
    for (int64_t g = std::min<int64_t>(32, channels); g > 1; --g) {
        if (channels % g == 0)
            return g;
    }
    return 1;
}

namespace {

void init_dense(torch::nn::Module& module)
{
    torch::NoGradGuard no_grad;
    for (auto& item : module.named_parameters(false)) {
        if (item.key() == "weight")
            item.value().normal_(0.0, 0.02);
        else if (item.key() == "bias")
            item.value().zero_();
    }
}

std::vector<double> linspace(double end, int count)
{
    std::vector<double> out(static_cast<std::size_t>(count), 0.0);
    for (int i = 0; i < count; ++i)
        out[static_cast<std::size_t>(i)] = count > 1 ? end * i / (count - 1) : 0.0;
    return out;
}

}  // namespace

LayerNorm2dImpl::LayerNorm2dImpl(int64_t channels, double eps) : eps_(eps)
{
    weight = register_parameter("weight", torch::ones({channels}));
    bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor LayerNorm2dImpl::forward(const torch::Tensor& x)
{
    auto mean = x.mean(1, true);
    auto var = (x - mean).pow(2).mean(1, true);
    auto normed = (x - mean) / torch::sqrt(var + eps_);
    return weight.view({1, -1, 1, 1}) * normed + bias.view({1, -1, 1, 1});
}

GlobalResponseNormImpl::GlobalResponseNormImpl(int64_t channels)
{
    gamma = register_parameter("gamma", torch::zeros({1, 1, 1, channels}));
    beta = register_parameter("beta", torch::zeros({1, 1, 1, channels}));
}

torch::Tensor GlobalResponseNormImpl::forward(const torch::Tensor& x)
{
    auto gx = torch::sqrt(x.pow(2).sum({1, 2}, true));
    auto nx = gx / (gx.mean(-1, true) + 1e-6);
    return gamma * (x * nx) + beta + x;
}

torch::Tensor drop_path(const torch::Tensor& x, double rate, bool training)
{
    if (!training || rate <= 0.0)
        return x;
    const double keep = 1.0 - rate;
    std::vector<int64_t> shape(static_cast<std::size_t>(x.dim()), 1);
    shape[0] = x.size(0);
    auto mask = torch::empty(shape, x.options()).bernoulli_(keep);
    return x * mask / keep;
}

ConvNeXtBlockImpl::ConvNeXtBlockImpl(int64_t dim, double drop_path_rate) : drop_path_rate_(drop_path_rate)
{
    dwconv_ = register_module("dwconv", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 7).padding(3).groups(dim)));
    norm_ = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
    pwconv1_ = register_module("pwconv1", torch::nn::Linear(dim, 4 * dim));
    grn_ = register_module("grn", GlobalResponseNorm(4 * dim));
    pwconv2_ = register_module("pwconv2", torch::nn::Linear(4 * dim, dim));
    init_dense(*dwconv_);
    init_dense(*pwconv1_);
    init_dense(*pwconv2_);
}

torch::Tensor ConvNeXtBlockImpl::forward(const torch::Tensor& x)
{
    auto y = dwconv_(x).permute({0, 2, 3, 1});
    y = pwconv2_(grn_(F::gelu(pwconv1_(norm_(y)))));
    y = y.permute({0, 3, 1, 2});
    return x + drop_path(y, drop_path_rate_, is_training());
}

ConvNeXtEncoderImpl::ConvNeXtEncoderImpl(int64_t in_channels, const EncoderShape& shape, double drop_path_rate)
{
    stem_conv = register_module("stem_conv",
                                torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, shape.dims[0], 4).stride(4)));
    stem_norm_ = register_module("stem_norm", LayerNorm2d(shape.dims[0]));
    init_dense(*stem_conv);

    const int total = std::accumulate(shape.depths.begin(), shape.depths.end(), 0);
    const auto rates = linspace(drop_path_rate, total);
    std::size_t block = 0;
    for (std::size_t s = 0; s < 4; ++s) {
        if (s > 0) {
            torch::nn::Sequential down(LayerNorm2d(shape.dims[s - 1]),
                                       torch::nn::Conv2d(torch::nn::Conv2dOptions(shape.dims[s - 1], shape.dims[s], 2).stride(2)));
            init_dense(*down[1]);
            downsample_.push_back(register_module("downsample" + std::to_string(s), down));
        }
        torch::nn::Sequential stage;
        for (int d = 0; d < shape.depths[s]; ++d)
            stage->push_back(ConvNeXtBlock(shape.dims[s], rates[block++]));
        stages_.push_back(register_module("stage" + std::to_string(s), stage));
    }
}

std::vector<torch::Tensor> ConvNeXtEncoderImpl::forward(const torch::Tensor& x)
{
    std::vector<torch::Tensor> features;
    auto y = stem_norm_(stem_conv(x));
    for (std::size_t s = 0; s < 4; ++s) {
        if (s > 0)
            y = downsample_[s - 1]->forward(y);
        y = stages_[s]->forward(y);
        features.push_back(y);
    }
    return features;
}

ResidualConvBlockImpl::ResidualConvBlockImpl(int64_t in_channels, int64_t out_channels, double dropout)
{
    conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
    norm1_ = register_module("norm1", torch::nn::GroupNorm(group_count(out_channels), out_channels));
    dropout_ = register_module("dropout", torch::nn::Dropout2d(dropout));
    conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
    norm2_ = register_module("norm2", torch::nn::GroupNorm(group_count(out_channels), out_channels));
    if (in_channels != out_channels)
        shortcut_ = register_module("shortcut", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 1)));
}

torch::Tensor ResidualConvBlockImpl::forward(const torch::Tensor& x)
{
    auto y = dropout_(F::gelu(norm1_(conv1_(x))));
    y = norm2_(conv2_(y));
    auto skip = shortcut_ ? shortcut_(x) : x;
    return F::gelu(y + skip);
}

UpBlockImpl::UpBlockImpl(int64_t in_channels, int64_t out_channels, double dropout,
                         std::array<double, 2> drop_path_rates)
{
    residual_ = register_module("residual", ResidualConvBlock(in_channels, out_channels, dropout));
    block1_ = register_module("block1", ConvNeXtBlock(out_channels, drop_path_rates[0]));
    block2_ = register_module("block2", ConvNeXtBlock(out_channels, drop_path_rates[1]));
    upsample_ = register_module(
        "upsample", torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(out_channels, out_channels, 2).stride(2)));
}

torch::Tensor UpBlockImpl::forward(const torch::Tensor& x)
{
    return upsample_(block2_(block1_(residual_(x))));
}

HeatmapNetImpl::HeatmapNetImpl(const ModelSpec& spec) : spec_(spec)
{
    spec_.validate();
    const auto shape = encoder_shape(spec.variant);
    encoder = register_module("encoder", ConvNeXtEncoder(1, shape, spec.encoder_drop_path));

    const int64_t width = shape.pyramid_width;
    for (std::size_t s = 0; s < 4; ++s) {
        pyramid_.push_back(register_module("pyramid" + std::to_string(s),
                                           torch::nn::Conv2d(torch::nn::Conv2dOptions(shape.dims[s], width, 1))));
        init_dense(*pyramid_.back());
    }

    const auto rates = linspace(spec.decoder_drop_path, 4);
    up1_ = register_module("up1", UpBlock(width, width / 2, spec.residual_dropout2d,
                                              std::array<double, 2>{rates[0], rates[1]}));
    up2_ = register_module("up2", UpBlock(width / 2, width / 4, spec.residual_dropout2d,
                                              std::array<double, 2>{rates[2], rates[3]}));
    head_norm_ = register_module("head_norm", torch::nn::GroupNorm(group_count(width / 4), width / 4));
    head_conv_ = register_module("head_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(width / 4, spec.n_landmarks, 1)));
}

torch::Tensor HeatmapNetImpl::forward(const torch::Tensor& x)
{
    const auto features = encoder->forward(x);
    const auto base = features[0].sizes();
    torch::Tensor fused;
    for (std::size_t s = 0; s < features.size(); ++s) {
        auto projected = pyramid_[s](features[s]);
        if (s > 0) {
            projected = F::interpolate(projected, F::InterpolateFuncOptions()
                                                      .size(std::vector<int64_t>{base[2], base[3]})
                                                      .mode(torch::kBilinear)
                                                      .align_corners(false));
        }
        fused = s == 0 ? projected : fused + projected;
    }
    auto y = up2_(up1_(F::gelu(fused)));
    return head_conv_(F::gelu(head_norm_(y)));
}

torch::Tensor adapt_input_to_single_channel(const torch::Tensor& rgb_stem_weight)
{
    if (rgb_stem_weight.dim() != 4 || rgb_stem_weight.size(1) != 3)
        throw Error("stem adaptation expects a 3-channel (out, 3, kh, kw) kernel");
    return rgb_stem_weight.sum(1, true);
}

namespace {

std::filesystem::path resolve_weights(const std::string& ref, const std::filesystem::path& registry)
{
    if (std::filesystem::is_regular_file(ref))
        return ref;
    if (!registry.empty()) {
        auto candidate = registry / (ref + ".pt");
        if (std::filesystem::is_regular_file(candidate))
            return candidate;
    }
    throw Error("pretrained weights not resolvable: " + ref);
}

void load_encoder_weights(ConvNeXtEncoder& encoder, const std::filesystem::path& file)
{
    torch::serialize::InputArchive archive;
    archive.load_from(file.string());
    torch::NoGradGuard no_grad;
    for (auto& item : encoder->named_parameters()) {
        torch::Tensor stored;
        if (!archive.try_read(item.key(), stored))
            throw Error("pretrained weights missing layer " + item.key());
        if (item.key() == "stem_conv.weight")
            stored = adapt_input_to_single_channel(stored);
        if (stored.sizes() != item.value().sizes())
            throw Error("pretrained weight shape mismatch at layer " + item.key());
        item.value().copy_(stored);
    }
}

}  // namespace

HeatmapNet build_model(const ModelSpec& spec, const std::filesystem::path& registry)
{
    HeatmapNet model(spec);
    if (spec.pretrained_weights_ref.empty()) {
        // Random RGB stem, folded the same way a pretrained one would be.
        torch::NoGradGuard no_grad;
        auto& weight = model->encoder->stem_conv->weight;
        auto rgb = torch::empty({weight.size(0), 3, weight.size(2), weight.size(3)}).normal_(0.0, 0.02);
        weight.copy_(adapt_input_to_single_channel(rgb));
    } else {
        load_encoder_weights(model->encoder, resolve_weights(spec.pretrained_weights_ref, registry));
    }
    return model;
}

torch::Tensor forward(HeatmapNet& model, const torch::Tensor& images)
{
    if (images.dim() != 4 || images.size(1) != 1)
        throw Error("forward expects a B x 1 x H x W batch");
    const int64_t height = images.size(2);
    const int64_t width = images.size(3);
    const int64_t pad_h = (kEncoderStride - height % kEncoderStride) % kEncoderStride;
    const int64_t pad_w = (kEncoderStride - width % kEncoderStride) % kEncoderStride;
    auto input = images;
    if (pad_h != 0 || pad_w != 0)
        input = F::pad(images, F::PadFuncOptions({0, pad_w, 0, pad_h}));
    auto logits = model->forward(input);
    if (pad_h != 0 || pad_w != 0)
        logits = logits.slice(2, 0, height).slice(3, 0, width);
    if (!torch::isfinite(logits).all().item<bool>())
        throw Error("non-finite activations in heatmap logits");
    return logits;
}

torch::Tensor normalize_intensity(const torch::Tensor& pixels)
{
    return (pixels / 255.0 - 0.449) / 0.226;
}

int64_t parameter_count(const torch::nn::Module& module)
{
    int64_t total = 0;
    for (const auto& p : module.parameters())
        total += p.numel();
    return total;
}

}  // namespace cephland
