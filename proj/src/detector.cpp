#include "cephland/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <opencv2/imgproc.hpp>

namespace cephland {

namespace F = torch::nn::functional;

void DetectorConfig::validate() const
{
    if (anchor_sizes.empty() || aspect_ratios.empty())
        throw Error("detector needs at least one anchor size and aspect ratio");
    for (double v : anchor_sizes) {
        if (!(v > 0.0))
            throw Error("anchor sizes must be positive");
    }
    for (double v : aspect_ratios) {
        if (!(v > 0.0))
            throw Error("aspect ratios must be positive");
    }
    if (!(score_threshold > 0.0 && score_threshold < 1.0))
        throw Error("score_threshold must lie in (0, 1)");
    if (min_size < 32 || max_size < min_size)
        throw Error("detector resize bounds must satisfy 32 <= min_size <= max_size");
    if (rpn_batch_size < 1 || box_batch_size < 1 || representation_size < 1)
        throw Error("detector batch and representation sizes must be positive");
}

nlohmann::json to_json(const DetectorConfig& c)
{
    return {{"anchor_sizes", c.anchor_sizes},
            {"aspect_ratios", c.aspect_ratios},
            {"backbone_id", c.backbone_id},
            {"pretrained_weights_ref", c.pretrained_weights_ref},
            {"score_threshold", c.score_threshold},
            {"min_size", c.min_size},
            {"max_size", c.max_size},
            {"rpn_pre_nms_top_n_train", c.rpn_pre_nms_top_n_train},
            {"rpn_post_nms_top_n_train", c.rpn_post_nms_top_n_train},
            {"rpn_pre_nms_top_n_test", c.rpn_pre_nms_top_n_test},
            {"rpn_post_nms_top_n_test", c.rpn_post_nms_top_n_test},
            {"rpn_nms_thresh", c.rpn_nms_thresh},
            {"rpn_fg_iou_thresh", c.rpn_fg_iou_thresh},
            {"rpn_bg_iou_thresh", c.rpn_bg_iou_thresh},
            {"rpn_batch_size", c.rpn_batch_size},
            {"rpn_positive_fraction", c.rpn_positive_fraction},
            {"box_fg_iou_thresh", c.box_fg_iou_thresh},
            {"box_bg_iou_thresh", c.box_bg_iou_thresh},
            {"box_batch_size", c.box_batch_size},
            {"box_positive_fraction", c.box_positive_fraction},
            {"box_nms_thresh", c.box_nms_thresh},
            {"detections_per_image", c.detections_per_image},
            {"representation_size", c.representation_size}};
}

DetectorConfig detector_config_from_json(const nlohmann::json& j)
{
    DetectorConfig c;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key))
            j.at(key).get_to(field);
    };
    get("anchor_sizes", c.anchor_sizes);
    get("aspect_ratios", c.aspect_ratios);
    get("backbone_id", c.backbone_id);
    get("pretrained_weights_ref", c.pretrained_weights_ref);
    get("score_threshold", c.score_threshold);
    get("min_size", c.min_size);
    get("max_size", c.max_size);
    get("rpn_pre_nms_top_n_train", c.rpn_pre_nms_top_n_train);
    get("rpn_post_nms_top_n_train", c.rpn_post_nms_top_n_train);
    get("rpn_pre_nms_top_n_test", c.rpn_pre_nms_top_n_test);
    get("rpn_post_nms_top_n_test", c.rpn_post_nms_top_n_test);
    get("rpn_nms_thresh", c.rpn_nms_thresh);
    get("rpn_fg_iou_thresh", c.rpn_fg_iou_thresh);
    get("rpn_bg_iou_thresh", c.rpn_bg_iou_thresh);
    get("rpn_batch_size", c.rpn_batch_size);
    get("rpn_positive_fraction", c.rpn_positive_fraction);
    get("box_fg_iou_thresh", c.box_fg_iou_thresh);
    get("box_bg_iou_thresh", c.box_bg_iou_thresh);
    get("box_batch_size", c.box_batch_size);
    get("box_positive_fraction", c.box_positive_fraction);
    get("box_nms_thresh", c.box_nms_thresh);
    get("detections_per_image", c.detections_per_image);
    get("representation_size", c.representation_size);
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Box utilities

namespace {

const double kBoxClamp = std::log(1000.0 / 16.0);

torch::Tensor widths(const torch::Tensor& b) { return b.select(1, 2) - b.select(1, 0); }
torch::Tensor heights(const torch::Tensor& b) { return b.select(1, 3) - b.select(1, 1); }

}  // namespace

torch::Tensor BoxCoder::encode(const torch::Tensor& reference, const torch::Tensor& proposals) const
{
    const auto pw = widths(proposals);
    const auto ph = heights(proposals);
    const auto px = proposals.select(1, 0) + 0.5 * pw;
    const auto py = proposals.select(1, 1) + 0.5 * ph;
    const auto gw = widths(reference);
    const auto gh = heights(reference);
    const auto gx = reference.select(1, 0) + 0.5 * gw;
    const auto gy = reference.select(1, 1) + 0.5 * gh;
    return torch::stack({weights[0] * (gx - px) / pw, weights[1] * (gy - py) / ph, weights[2] * torch::log(gw / pw),
                         weights[3] * torch::log(gh / ph)},
                        1);
}

torch::Tensor BoxCoder::decode(const torch::Tensor& deltas, const torch::Tensor& boxes) const
{
    const auto w = widths(boxes);
    const auto h = heights(boxes);
    const auto cx = boxes.select(1, 0) + 0.5 * w;
    const auto cy = boxes.select(1, 1) + 0.5 * h;
    const auto dx = deltas.select(1, 0) / weights[0];
    const auto dy = deltas.select(1, 1) / weights[1];
    const auto dw = (deltas.select(1, 2) / weights[2]).clamp_max(kBoxClamp);
    const auto dh = (deltas.select(1, 3) / weights[3]).clamp_max(kBoxClamp);
    const auto pcx = dx * w + cx;
    const auto pcy = dy * h + cy;
    const auto pw = torch::exp(dw) * w;
    const auto ph = torch::exp(dh) * h;
    return torch::stack({pcx - 0.5 * pw, pcy - 0.5 * ph, pcx + 0.5 * pw, pcy + 0.5 * ph}, 1);
}

torch::Tensor box_iou(const torch::Tensor& a, const torch::Tensor& b)
{
    const auto area_a = widths(a).clamp_min(0) * heights(a).clamp_min(0);
    const auto area_b = widths(b).clamp_min(0) * heights(b).clamp_min(0);
    const auto lt = torch::max(a.unsqueeze(1).slice(2, 0, 2), b.unsqueeze(0).slice(2, 0, 2));
    const auto rb = torch::min(a.unsqueeze(1).slice(2, 2, 4), b.unsqueeze(0).slice(2, 2, 4));
    const auto wh = (rb - lt).clamp_min(0);
    const auto inter = wh.select(2, 0) * wh.select(2, 1);
    return inter / (area_a.unsqueeze(1) + area_b.unsqueeze(0) - inter).clamp_min(1e-12);
}

torch::Tensor nms(const torch::Tensor& boxes, const torch::Tensor& scores, double iou_threshold)
{
    const auto n = boxes.size(0);
    if (n == 0)
        return torch::empty({0}, torch::kLong);
    const auto b = boxes.to(torch::kFloat64).contiguous();
    const auto order = std::get<1>(scores.sort(0, true)).contiguous();
    const auto bx = b.accessor<double, 2>();
    const auto ord = order.accessor<int64_t, 1>();

    std::vector<char> suppressed(static_cast<std::size_t>(n), 0);
    std::vector<int64_t> keep;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t a = ord[i];
        if (suppressed[static_cast<std::size_t>(a)])
            continue;
        keep.push_back(a);
        const double area_a = std::max(0.0, bx[a][2] - bx[a][0]) * std::max(0.0, bx[a][3] - bx[a][1]);
        for (int64_t j = i + 1; j < n; ++j) {
            const int64_t c = ord[j];
            if (suppressed[static_cast<std::size_t>(c)])
                continue;
            const double w = std::min(bx[a][2], bx[c][2]) - std::max(bx[a][0], bx[c][0]);
            const double h = std::min(bx[a][3], bx[c][3]) - std::max(bx[a][1], bx[c][1]);
            if (w <= 0.0 || h <= 0.0)
                continue;
            const double inter = w * h;
            const double area_c = std::max(0.0, bx[c][2] - bx[c][0]) * std::max(0.0, bx[c][3] - bx[c][1]);
            if (inter / (area_a + area_c - inter) > iou_threshold)
                suppressed[static_cast<std::size_t>(c)] = 1;
        }
    }
    return torch::tensor(keep, torch::kLong);
}

torch::Tensor generate_anchors(const std::vector<double>& sizes, const std::vector<double>& ratios,
                               std::array<int64_t, 2> feature_size, std::array<int64_t, 2> stride)
{
    std::vector<float> base;
    for (double r : ratios) {
        const double h_ratio = std::sqrt(r);
        const double w_ratio = 1.0 / h_ratio;
        for (double s : sizes) {
            const double ws = w_ratio * s;
            const double hs = h_ratio * s;
            base.insert(base.end(), {static_cast<float>(std::round(-ws / 2)), static_cast<float>(std::round(-hs / 2)),
                                     static_cast<float>(std::round(ws / 2)), static_cast<float>(std::round(hs / 2))});
        }
    }
    const auto cell = torch::tensor(base).view({-1, 4});
    const auto sy = torch::arange(feature_size[0], torch::kFloat32) * static_cast<float>(stride[0]);
    const auto sx = torch::arange(feature_size[1], torch::kFloat32) * static_cast<float>(stride[1]);
    const auto grid = torch::meshgrid({sy, sx}, "ij");
    const auto yy = grid[0].reshape(-1);
    const auto xx = grid[1].reshape(-1);
    const auto shifts = torch::stack({xx, yy, xx, yy}, 1);
    return (shifts.view({-1, 1, 4}) + cell.view({1, -1, 4})).reshape({-1, 4});
}

torch::Tensor roi_align(const torch::Tensor& features, const torch::Tensor& rois, double spatial_scale,
                        int64_t output_size, int64_t sampling_ratio)
{
    const int64_t channels = features.size(1);
    const int64_t r = rois.size(0);
    if (r == 0)
        return torch::zeros({0, channels, output_size, output_size}, features.options());
    const int64_t height = features.size(2);
    const int64_t width = features.size(3);
    const int64_t n = output_size * sampling_ratio;

    const auto boxes = rois.detach().to(torch::kFloat32) * spatial_scale;
    const auto x0 = boxes.select(1, 0);
    const auto y0 = boxes.select(1, 1);
    const auto w = (boxes.select(1, 2) - x0).clamp_min(1.0);
    const auto h = (boxes.select(1, 3) - y0).clamp_min(1.0);
    const auto t = (torch::arange(n, torch::kFloat32) + 0.5) / static_cast<double>(n);
    const auto xs = x0.unsqueeze(1) + t.unsqueeze(0) * w.unsqueeze(1);  // R x n
    const auto ys = y0.unsqueeze(1) + t.unsqueeze(0) * h.unsqueeze(1);

    auto normalise = [](const torch::Tensor& v, int64_t extent) {
        return extent > 1 ? v / static_cast<double>(extent - 1) * 2.0 - 1.0 : torch::zeros_like(v);
    };
    const auto gx = normalise(xs, width).unsqueeze(1).expand({r, n, n});
    const auto gy = normalise(ys, height).unsqueeze(2).expand({r, n, n});
    const auto grid = torch::stack({gx, gy}, 3).reshape({1, r * n, n, 2});

    auto sampled = F::grid_sample(features, grid,
                                  F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kBorder).align_corners(true));
    sampled = sampled.view({channels, r, n, n}).permute({1, 0, 2, 3});
    return F::avg_pool2d(sampled, F::AvgPool2dFuncOptions(sampling_ratio));
}

// ---------------------------------------------------------------------------
// Backbones

namespace {

/// Batch norm with fixed statistics and a trainable affine part, as used for
/// detector backbones trained at batch size 1.
class FrozenBatchNorm2dImpl : public torch::nn::Module {
public:
    explicit FrozenBatchNorm2dImpl(int64_t channels)
    {
        weight = register_parameter("weight", torch::ones({channels}));
        bias = register_parameter("bias", torch::zeros({channels}));
        running_mean = register_buffer("running_mean", torch::zeros({channels}));
        running_var = register_buffer("running_var", torch::ones({channels}));
    }

    torch::Tensor forward(const torch::Tensor& x)
    {
        const auto scale = weight * torch::rsqrt(running_var + 1e-5);
        const auto shift = bias - running_mean * scale;
        return x * scale.view({1, -1, 1, 1}) + shift.view({1, -1, 1, 1});
    }

    torch::Tensor weight, bias, running_mean, running_var;
};
TORCH_MODULE(FrozenBatchNorm2d);

enum class Act { none, relu, hardswish };

class ConvNormActImpl : public torch::nn::Module {
public:
    ConvNormActImpl(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t groups, Act act) : act_(act)
    {
        conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, kernel)
                                                               .stride(stride)
                                                               .padding((kernel - 1) / 2)
                                                               .groups(groups)
                                                               .bias(false)));
        torch::nn::init::kaiming_normal_(conv_->weight, 0.0, torch::kFanOut);
        norm_ = register_module("norm", FrozenBatchNorm2d(out));
    }

    torch::Tensor forward(const torch::Tensor& x)
    {
        auto y = norm_(conv_(x));
        if (act_ == Act::relu)
            return torch::relu(y);
        if (act_ == Act::hardswish)
            return torch::hardswish(y);
        return y;
    }

private:
    Act act_;
    torch::nn::Conv2d conv_{nullptr};
    FrozenBatchNorm2d norm_{nullptr};
};
TORCH_MODULE(ConvNormAct);

ConvNormAct conv_norm_act(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t groups, Act act)
{
    return ConvNormAct(in, out, kernel, stride, groups, act);
}

int64_t make_divisible(double v, int64_t divisor = 8)
{
    auto out = std::max<int64_t>(divisor, static_cast<int64_t>(v + divisor / 2.0) / divisor * divisor);
    if (out < 0.9 * v)
        out += divisor;
    return out;
}

class SqueezeExcitationImpl : public torch::nn::Module {
public:
    SqueezeExcitationImpl(int64_t channels, int64_t squeeze)
    {
        fc1_ = register_module("fc1", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, squeeze, 1)));
        fc2_ = register_module("fc2", torch::nn::Conv2d(torch::nn::Conv2dOptions(squeeze, channels, 1)));
    }

    torch::Tensor forward(const torch::Tensor& x)
    {
        auto s = F::adaptive_avg_pool2d(x, F::AdaptiveAvgPool2dFuncOptions(1));
        s = torch::hardsigmoid(fc2_(torch::relu(fc1_(s))));
        return x * s;
    }

private:
    torch::nn::Conv2d fc1_{nullptr};
    torch::nn::Conv2d fc2_{nullptr};
};
TORCH_MODULE(SqueezeExcitation);

class InvertedResidualImpl : public torch::nn::Module {
public:
    InvertedResidualImpl(int64_t in, int64_t kernel, int64_t expanded, int64_t out, bool se, Act act, int64_t stride)
        : residual_(stride == 1 && in == out)
    {
        torch::nn::Sequential block;
        if (expanded != in)
            block->push_back(conv_norm_act(in, expanded, 1, 1, 1, act));
        block->push_back(conv_norm_act(expanded, expanded, kernel, stride, expanded, act));
        if (se)
            block->push_back(SqueezeExcitation(expanded, make_divisible(expanded / 4.0)));
        block->push_back(conv_norm_act(expanded, out, 1, 1, 1, Act::none));
        block_ = register_module("block", block);
    }

    torch::Tensor forward(const torch::Tensor& x)
    {
        auto y = block_->forward(x);
        return residual_ ? y + x : y;
    }

private:
    torch::nn::Sequential block_{nullptr};
    bool residual_;
};
TORCH_MODULE(InvertedResidual);

}  // namespace

std::pair<torch::nn::Sequential, int64_t> make_backbone(const std::string& backbone_id)
{
    torch::nn::Sequential seq;
    if (backbone_id == "mobilenet_v3_small") {
        struct Bneck {
            int64_t in, kernel, expanded, out;
            bool se;
            Act act;
            int64_t stride;
        };
        const std::vector<Bneck> table{
            {16, 3, 16, 16, true, Act::relu, 2},       {16, 3, 72, 24, false, Act::relu, 2},
            {24, 3, 88, 24, false, Act::relu, 1},      {24, 5, 96, 40, true, Act::hardswish, 2},
            {40, 5, 240, 40, true, Act::hardswish, 1}, {40, 5, 240, 40, true, Act::hardswish, 1},
            {40, 5, 120, 48, true, Act::hardswish, 1}, {48, 5, 144, 48, true, Act::hardswish, 1},
            {48, 5, 288, 96, true, Act::hardswish, 2}, {96, 5, 576, 96, true, Act::hardswish, 1},
            {96, 5, 576, 96, true, Act::hardswish, 1},
        };
        seq->push_back(conv_norm_act(1, 16, 3, 2, 1, Act::hardswish));
        for (const auto& b : table)
            seq->push_back(InvertedResidual(b.in, b.kernel, b.expanded, b.out, b.se, b.act, b.stride));
        seq->push_back(conv_norm_act(96, 576, 1, 1, 1, Act::hardswish));
        return {seq, 576};
    }
    if (backbone_id == "small_cnn") {
        seq->push_back(conv_norm_act(1, 16, 3, 2, 1, Act::relu));
        seq->push_back(conv_norm_act(16, 32, 3, 2, 1, Act::relu));
        seq->push_back(conv_norm_act(32, 64, 3, 2, 1, Act::relu));
        seq->push_back(conv_norm_act(64, 64, 3, 2, 1, Act::relu));
        return {seq, 64};
    }
    throw Error("unknown detector backbone: " + backbone_id);
}

// ---------------------------------------------------------------------------
// Faster R-CNN

namespace {

const BoxCoder kRpnCoder{{1.0, 1.0, 1.0, 1.0}};
const BoxCoder kRoiCoder{{10.0, 10.0, 5.0, 5.0}};
constexpr int64_t kRoiOutput = 7;
constexpr int64_t kRoiSampling = 2;
constexpr double kSmoothL1Beta = 1.0 / 9.0;

torch::Tensor clip_boxes(const torch::Tensor& boxes, std::array<int64_t, 2> size)
{
    const auto h = static_cast<double>(size[0]);
    const auto w = static_cast<double>(size[1]);
    return torch::stack({boxes.select(1, 0).clamp(0.0, w), boxes.select(1, 1).clamp(0.0, h),
                         boxes.select(1, 2).clamp(0.0, w), boxes.select(1, 3).clamp(0.0, h)},
                        1);
}

torch::Tensor non_small(const torch::Tensor& boxes, double min_size = 1e-3)
{
    return ((widths(boxes) >= min_size) & (heights(boxes) >= min_size)).nonzero().squeeze(1);
}

std::vector<int64_t> to_vector(const torch::Tensor& index)
{
    const auto c = index.to(torch::kLong).contiguous();
    return {c.data_ptr<int64_t>(), c.data_ptr<int64_t>() + c.numel()};
}

/// Random subset of positives (label 1) and negatives (label 0).
std::pair<std::vector<int64_t>, std::vector<int64_t>> sample_labels(const torch::Tensor& labels, int batch,
                                                                    double positive_fraction, Rng& rng)
{
    auto pos = to_vector((labels == 1).nonzero().squeeze(1));
    auto neg = to_vector((labels == 0).nonzero().squeeze(1));
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    const auto n_pos = std::min<std::size_t>(pos.size(), static_cast<std::size_t>(batch * positive_fraction));
    const auto n_neg = std::min<std::size_t>(neg.size(), static_cast<std::size_t>(batch) - n_pos);
    pos.resize(n_pos);
    neg.resize(n_neg);
    return {pos, neg};
}

torch::Tensor index_tensor(const std::vector<int64_t>& idx)
{
    return torch::tensor(idx, torch::kLong);
}

}  // namespace

FasterRcnnImpl::FasterRcnnImpl(const DetectorConfig& config) : config_(config)
{
    config_.validate();
    auto [backbone, channels] = make_backbone(config_.backbone_id);
    backbone_ = register_module("backbone", backbone);
    feature_channels_ = channels;

    const auto anchors_per_location = static_cast<int64_t>(config_.anchor_sizes.size() * config_.aspect_ratios.size());
    rpn_conv_ = register_module("rpn_conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, channels, 3).padding(1)));
    rpn_cls_ = register_module("rpn_cls", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, anchors_per_location, 1)));
    rpn_bbox_ =
        register_module("rpn_bbox", torch::nn::Conv2d(torch::nn::Conv2dOptions(channels, 4 * anchors_per_location, 1)));
    {
        torch::NoGradGuard no_grad;
        for (auto* conv : {&rpn_conv_, &rpn_cls_, &rpn_bbox_}) {
            (*conv)->weight.normal_(0.0, 0.01);
            (*conv)->bias.zero_();
        }
    }

    const int64_t pooled = channels * kRoiOutput * kRoiOutput;
    fc6_ = register_module("fc6", torch::nn::Linear(pooled, config_.representation_size));
    fc7_ = register_module("fc7", torch::nn::Linear(config_.representation_size, config_.representation_size));
    cls_score_ = register_module("cls_score", torch::nn::Linear(config_.representation_size, 2));
    bbox_pred_ = register_module("bbox_pred", torch::nn::Linear(config_.representation_size, 8));
}

FasterRcnnImpl::Features FasterRcnnImpl::run_backbone(const torch::Tensor& image)
{
    Features f;
    f.map = backbone_->forward(image);
    const int64_t fh = f.map.size(2);
    const int64_t fw = f.map.size(3);
    const int64_t stride_y = image.size(2) / fh;
    const int64_t stride_x = image.size(3) / fw;
    f.stride = static_cast<double>(stride_x);
    f.anchors = generate_anchors(config_.anchor_sizes, config_.aspect_ratios, {fh, fw}, {stride_y, stride_x});

    const auto hidden = torch::relu(rpn_conv_(f.map));
    // N x A x H x W -> (H*W*A), matching the anchor ordering.
    f.objectness = rpn_cls_(hidden).permute({0, 2, 3, 1}).reshape({-1});
    f.deltas = rpn_bbox_(hidden).view({1, -1, 4, fh, fw}).permute({0, 3, 4, 1, 2}).reshape({-1, 4});
    return f;
}

torch::Tensor FasterRcnnImpl::propose(const Features& f, std::array<int64_t, 2> image_size, bool training)
{
    torch::NoGradGuard no_grad;
    const int pre = training ? config_.rpn_pre_nms_top_n_train : config_.rpn_pre_nms_top_n_test;
    const int post = training ? config_.rpn_post_nms_top_n_train : config_.rpn_post_nms_top_n_test;

    auto scores = f.objectness.detach();
    auto boxes = clip_boxes(kRpnCoder.decode(f.deltas.detach(), f.anchors), image_size);
    const auto k = std::min<int64_t>(pre, scores.size(0));
    const auto top = std::get<1>(scores.topk(k));
    scores = scores.index_select(0, top);
    boxes = boxes.index_select(0, top);

    const auto keep_size = non_small(boxes);
    scores = scores.index_select(0, keep_size);
    boxes = boxes.index_select(0, keep_size);

    auto keep = nms(boxes, scores, config_.rpn_nms_thresh);
    if (keep.size(0) > post)
        keep = keep.slice(0, 0, post);
    return boxes.index_select(0, keep);
}

std::pair<torch::Tensor, torch::Tensor> FasterRcnnImpl::box_head(const torch::Tensor& feature_map,
                                                                 const torch::Tensor& rois, double stride)
{
    auto x = roi_align(feature_map, rois, 1.0 / stride, kRoiOutput, kRoiSampling).flatten(1);
    x = torch::relu(fc7_(torch::relu(fc6_(x))));
    return {cls_score_(x), bbox_pred_(x)};
}

DetectorLosses FasterRcnnImpl::losses(const torch::Tensor& image, std::array<int64_t, 2> image_size,
                                      const torch::Tensor& gt_box, Rng& rng)
{
    const auto f = run_backbone(image);
    const auto gt = gt_box.to(torch::kFloat32).view({1, 4});

    // RPN: anchor labels with low-quality matches promoted to foreground.
    torch::Tensor rpn_labels;
    {
        torch::NoGradGuard no_grad;
        const auto iou = box_iou(f.anchors, gt).select(1, 0);
        rpn_labels = torch::full_like(iou, -1.0);
        rpn_labels.masked_fill_(iou < config_.rpn_bg_iou_thresh, 0.0);
        rpn_labels.masked_fill_(iou >= config_.rpn_fg_iou_thresh, 1.0);
        const auto best = iou.max();
        if (best.item<double>() > 0.0)
            rpn_labels.masked_fill_(iou == best, 1.0);
    }
    auto [rpn_pos, rpn_neg] = sample_labels(rpn_labels, config_.rpn_batch_size, config_.rpn_positive_fraction, rng);
    std::vector<int64_t> rpn_sampled = rpn_pos;
    rpn_sampled.insert(rpn_sampled.end(), rpn_neg.begin(), rpn_neg.end());
    const auto sampled_idx = index_tensor(rpn_sampled);
    const auto pos_idx = index_tensor(rpn_pos);
    const auto n_sampled = static_cast<double>(std::max<std::size_t>(1, rpn_sampled.size()));

    DetectorLosses out;
    out.objectness = F::binary_cross_entropy_with_logits(f.objectness.index_select(0, sampled_idx),
                                                         rpn_labels.index_select(0, sampled_idx));
    if (rpn_pos.empty()) {
        out.rpn_box = f.deltas.sum() * 0.0;
    } else {
        const auto anchors = f.anchors.index_select(0, pos_idx);
        const auto targets = kRpnCoder.encode(gt.expand({anchors.size(0), 4}), anchors);
        out.rpn_box = F::smooth_l1_loss(f.deltas.index_select(0, pos_idx), targets,
                                        F::SmoothL1LossFuncOptions().reduction(torch::kSum).beta(kSmoothL1Beta)) /
                      n_sampled;
    }

    // RoI head on proposals plus the ground truth box.
    auto rois = torch::cat({propose(f, image_size, true), gt});
    torch::Tensor roi_labels;
    {
        torch::NoGradGuard no_grad;
        const auto iou = box_iou(rois, gt).select(1, 0);
        roi_labels = torch::full_like(iou, -1.0);
        roi_labels.masked_fill_(iou < config_.box_bg_iou_thresh, 0.0);
        roi_labels.masked_fill_(iou >= config_.box_fg_iou_thresh, 1.0);
    }
    auto [roi_pos, roi_neg] = sample_labels(roi_labels, config_.box_batch_size, config_.box_positive_fraction, rng);
    std::vector<int64_t> roi_sampled = roi_pos;
    roi_sampled.insert(roi_sampled.end(), roi_neg.begin(), roi_neg.end());
    const auto roi_idx = index_tensor(roi_sampled);
    rois = rois.index_select(0, roi_idx);
    const auto labels = roi_labels.index_select(0, roi_idx).to(torch::kLong);

    auto [logits, deltas] = box_head(f.map, rois, f.stride);
    out.classifier = F::cross_entropy(logits, labels);
    const auto n_pos = static_cast<int64_t>(roi_pos.size());
    if (n_pos == 0) {
        out.box = deltas.sum() * 0.0;
    } else {
        const auto pos_rois = rois.slice(0, 0, n_pos);
        const auto targets = kRoiCoder.encode(gt.expand({n_pos, 4}), pos_rois);
        const auto pred = deltas.slice(0, 0, n_pos).slice(1, 4, 8);
        out.box = F::smooth_l1_loss(pred, targets, F::SmoothL1LossFuncOptions().reduction(torch::kSum).beta(kSmoothL1Beta)) /
                  static_cast<double>(labels.size(0));
    }
    return out;
}

std::pair<torch::Tensor, torch::Tensor> FasterRcnnImpl::detect(const torch::Tensor& image,
                                                               std::array<int64_t, 2> image_size)
{
    torch::NoGradGuard no_grad;
    const auto f = run_backbone(image);
    const auto proposals = propose(f, image_size, false);
    if (proposals.size(0) == 0)
        return {torch::zeros({0, 4}), torch::zeros({0})};

    auto [logits, deltas] = box_head(f.map, proposals, f.stride);
    auto scores = torch::softmax(logits, 1).select(1, 1);
    auto boxes = clip_boxes(kRoiCoder.decode(deltas.slice(1, 4, 8), proposals), image_size);

    const auto keep_score = (scores > config_.score_threshold).nonzero().squeeze(1);
    scores = scores.index_select(0, keep_score);
    boxes = boxes.index_select(0, keep_score);
    const auto keep_size = non_small(boxes, 1e-2);
    scores = scores.index_select(0, keep_size);
    boxes = boxes.index_select(0, keep_size);

    auto keep = nms(boxes, scores, config_.box_nms_thresh);
    if (keep.size(0) > config_.detections_per_image)
        keep = keep.slice(0, 0, config_.detections_per_image);
    return {boxes.index_select(0, keep), scores.index_select(0, keep)};
}

// ---------------------------------------------------------------------------
// DetectorModel

namespace {

void load_backbone_weights(FasterRcnn& net, const std::string& ref, const std::filesystem::path& registry)
{
    std::filesystem::path file = ref;
    if (!std::filesystem::is_regular_file(file) && !registry.empty())
        file = registry / (ref + ".pt");
    if (!std::filesystem::is_regular_file(file))
        throw Error("detector backbone weights not resolvable: " + ref);

    torch::serialize::InputArchive archive;
    archive.load_from(file.string());
    torch::NoGradGuard no_grad;
    auto load = [&](const std::string& key, torch::Tensor& target) {
        torch::Tensor stored;
        if (!archive.try_read(key, stored))
            throw Error("detector backbone weights missing layer " + key);
        if (stored.dim() == 4 && target.dim() == 4 && stored.size(1) == 3 && target.size(1) == 1)
            stored = stored.sum(1, true);
        if (stored.sizes() != target.sizes())
            throw Error("detector backbone weight shape mismatch at layer " + key);
        target.copy_(stored);
    };
    for (auto& item : net->named_parameters()) {
        if (item.key().rfind("backbone.", 0) == 0)
            load(item.key(), item.value());
    }
    for (auto& item : net->named_buffers()) {
        if (item.key().rfind("backbone.", 0) == 0)
            load(item.key(), item.value());
    }
}

}  // namespace

DetectorModel::DetectorModel(const DetectorConfig& config, const std::filesystem::path& registry) : net_(config)
{
    if (!config.pretrained_weights_ref.empty())
        load_backbone_weights(net_, config.pretrained_weights_ref, registry);
    net_->eval();
}

DetectorModel::Input DetectorModel::preprocess(const cv::Mat& image) const
{
    if (image.empty() || image.channels() != 1)
        throw Error("detector expects a non-empty grayscale image");
    const auto& c = net_->config();
    const double short_side = std::min(image.rows, image.cols);
    const double long_side = std::max(image.rows, image.cols);
    const double scale = std::min(c.min_size / short_side, c.max_size / long_side);
    const int h = std::max(1, static_cast<int>(std::floor(image.rows * scale)));
    const int w = std::max(1, static_cast<int>(std::floor(image.cols * scale)));

    cv::Mat resized;
    cv::resize(image, resized, cv::Size(w, h), 0.0, 0.0, scale < 1.0 ? cv::INTER_AREA : cv::INTER_LINEAR);
    cv::Mat as_float;
    resized.convertTo(as_float, CV_32F);

    const int ph = (h + 31) / 32 * 32;
    const int pw = (w + 31) / 32 * 32;
    auto tensor = torch::zeros({1, 1, ph, pw});
    auto src = torch::from_blob(as_float.data, {h, w}, torch::kFloat32).clone();
    tensor.index_put_({0, 0, torch::indexing::Slice(0, h), torch::indexing::Slice(0, w)},
                      (src / 255.0 - 0.449) / 0.226);
    return {scale, {h, w}, tensor};
}

std::vector<Detection> DetectorModel::detect(const cv::Mat& image)
{
    net_->eval();
    const auto input = preprocess(image);
    auto [boxes, scores] = net_->detect(input.tensor, input.image_size);
    std::vector<Detection> out;
    const auto b = boxes.to(torch::kFloat64).contiguous();
    const auto s = scores.to(torch::kFloat64).contiguous();
    for (int64_t i = 0; i < b.size(0); ++i) {
        BoundingBox box{b[i][0].item<double>() / input.scale, b[i][1].item<double>() / input.scale,
                        b[i][2].item<double>() / input.scale, b[i][3].item<double>() / input.scale};
        box.x0 = std::clamp(box.x0, 0.0, static_cast<double>(image.cols));
        box.x1 = std::clamp(box.x1, 0.0, static_cast<double>(image.cols));
        box.y0 = std::clamp(box.y0, 0.0, static_cast<double>(image.rows));
        box.y1 = std::clamp(box.y1, 0.0, static_cast<double>(image.rows));
        out.push_back({box, s[i].item<double>()});
    }
    return out;
}

void DetectorModel::save(const std::filesystem::path& file) const
{
    torch::serialize::OutputArchive archive;
    archive.write("kind", c10::IValue(std::string("cephland-detector")));
    archive.write("config_json", c10::IValue(to_json(net_->config()).dump()));
    torch::serialize::OutputArchive weights;
    net_->save(weights);
    archive.write("weights", weights);
    archive.save_to(file.string());
}

DetectorModel DetectorModel::load(const std::filesystem::path& file)
{
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(file.string());
    } catch (const c10::Error& e) {
        throw Error("cannot read detector checkpoint " + file.string());
    }
    c10::IValue kind;
    c10::IValue config_json;
    if (!archive.try_read("kind", kind) || kind.toStringRef() != "cephland-detector")
        throw Error("not a detector checkpoint: " + file.string());
    archive.read("config_json", config_json);
    auto config = detector_config_from_json(nlohmann::json::parse(config_json.toStringRef()));
    config.pretrained_weights_ref.clear();
    DetectorModel model(config);
    torch::serialize::InputArchive weights;
    archive.read("weights", weights);
    model.net_->load(weights);
    model.net_->eval();
    return model;
}

DetectorModel train_detector(std::span<const ImageRecord> records, const DetectorConfig& config,
                             const DetectorTrainConfig& train_config, const std::filesystem::path& registry)
{
    if (records.empty())
        throw Error("cannot train a detector on an empty set");

    torch::manual_seed(train_config.seed);
    DetectorModel model(config, registry);
    if (train_config.epochs <= 0)
        return model;

    struct Sample {
        DetectorModel::Input input;
        torch::Tensor box;
    };
    std::vector<Sample> samples;
    samples.reserve(records.size());
    for (const auto& record : records) {
        if (!record.landmarks)
            throw Error("detector training needs landmarks for " + record.image_id);
        const auto loaded = load_pixels(record);
        const auto box = make_gt_box(*loaded.landmarks, train_config.pad, {loaded.height, loaded.width});
        auto input = model.preprocess(loaded.pixels);
        const auto s = static_cast<float>(input.scale);
        samples.push_back({input, torch::tensor({static_cast<float>(box.x0) * s, static_cast<float>(box.y0) * s,
                                                 static_cast<float>(box.x1) * s, static_cast<float>(box.y1) * s})});
    }

    auto& net = model.net();
    torch::optim::AdamW optimizer(net->parameters(),
                                  torch::optim::AdamWOptions(train_config.lr).weight_decay(train_config.weight_decay));
    Rng rng(train_config.seed);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    net->train();
    for (int epoch = 0; epoch < train_config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (auto i : order) {
            optimizer.zero_grad();
            const auto losses = net->losses(samples[i].input.tensor, samples[i].input.image_size, samples[i].box, rng);
            auto total = losses.total();
            if (!std::isfinite(total.item<double>()))
                throw Error("non-finite detector loss at epoch " + std::to_string(epoch));
            total.backward();
            optimizer.step();
        }
    }
    net->eval();
    return model;
}

}  // namespace cephland
