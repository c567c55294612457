#include "cephland/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>

namespace cephland {

using nlohmann::json;

std::string to_string(CropSource source)
{
    switch (source) {
    case CropSource::gt_box: return "gt_box";
    case CropSource::detector: return "detector";
    case CropSource::pad_crop: return "pad_crop";
    case CropSource::pad_resize: return "pad_resize";
    }
    return "gt_box";
}

CropSource parse_crop_source(const std::string& name)
{
    if (name == "gt_box")
        return CropSource::gt_box;
    if (name == "detector")
        return CropSource::detector;
    if (name == "pad_crop")
        return CropSource::pad_crop;
    if (name == "pad_resize")
        return CropSource::pad_resize;
    throw Error("unknown crop source: " + name);
}

void RunConfig::validate() const
{
    model.validate();
    detector.validate();
    augmentation.validate();
    if (!(optimizer.lr > 0.0) || optimizer.weight_decay < 0.0)
        throw Error("optimizer lr must be positive and weight decay non-negative");
    if (accumulation_schedule.empty() || accumulation_schedule.front().epoch != 0)
        throw Error("accumulation schedule must start at epoch 0");
    for (std::size_t i = 0; i < accumulation_schedule.size(); ++i) {
        if (accumulation_schedule[i].interval < 1)
            throw Error("accumulation intervals must be >= 1");
        if (i > 0 && accumulation_schedule[i].epoch <= accumulation_schedule[i - 1].epoch)
            throw Error("accumulation schedule epochs must be ascending");
    }
    if (!std::is_sorted(lr_decay.epochs.begin(), lr_decay.epochs.end()))
        throw Error("lr decay epochs must be ascending");
    if (!(lr_decay.factor > 0.0))
        throw Error("lr decay factor must be positive");
    if (max_epochs < 0 || early_stop_patience < 1)
        throw Error("max_epochs must be >= 0 and patience >= 1");
    if (n_folds < 2)
        throw Error("n_folds must be >= 2");
    if (top_k < 1)
        throw Error("top_k must be >= 1");
    if (rcnn_pad < 0.0)
        throw Error("rcnn_pad must be non-negative");
    if (crop_height < kEncoderStride)
        throw Error("crop_height must be at least the encoder stride");
    if (blur_sigma < 0.0)
        throw Error("blur_sigma must be non-negative");
    if (ruler_length_mm && !(*ruler_length_mm > 0.0))
        throw Error("ruler length must be positive");
}

namespace {

json to_json(const ModelSpec& m)
{
    return {{"variant", to_string(m.variant)},
            {"n_landmarks", m.n_landmarks},
            {"encoder_drop_path", m.encoder_drop_path},
            {"decoder_drop_path", m.decoder_drop_path},
            {"residual_dropout2d", m.residual_dropout2d},
            {"pretrained_weights_ref", m.pretrained_weights_ref}};
}

json to_json(const AugmentationConfig& a)
{
    return {{"enabled", a.enabled},
            {"apply_prob", a.apply_prob},
            {"rotation_deg", a.rotation_deg},
            {"translate_x_px", a.translate_x_px},
            {"translate_y_px", a.translate_y_px},
            {"scale_delta", a.scale_delta},
            {"skewed_scale_rate", a.skewed_scale_rate},
            {"elastic_alpha", a.elastic_alpha},
            {"elastic_sigma", a.elastic_sigma},
            {"multiply_delta", a.multiply_delta},
            {"gamma_min", a.gamma_min},
            {"gamma_max", a.gamma_max},
            {"invert_rate", a.invert_rate},
            {"blur_rate", a.blur_rate},
            {"blur_sigma_min", a.blur_sigma_min},
            {"blur_sigma_max", a.blur_sigma_max},
            {"cutout_count", a.cutout_count},
            {"cutout_min_frac", a.cutout_min_frac},
            {"cutout_max_frac", a.cutout_max_frac},
            {"artefact_rate", a.artefact_rate},
            {"artefact_noise_sigma", a.artefact_noise_sigma},
            {"artefact_mult_min", a.artefact_mult_min},
            {"artefact_mult_max", a.artefact_mult_max},
            {"artefact_band_sizes", a.artefact_band_sizes}};
}

template <typename T>
void get_if(const json& j, const char* key, T& field)
{
    if (j.contains(key))
        j.at(key).get_to(field);
}

ModelSpec model_from_json(const json& j)
{
    ModelSpec m;
    if (j.contains("variant"))
        m.variant = parse_variant(j.at("variant").get<std::string>());
    get_if(j, "n_landmarks", m.n_landmarks);
    get_if(j, "encoder_drop_path", m.encoder_drop_path);
    get_if(j, "decoder_drop_path", m.decoder_drop_path);
    get_if(j, "residual_dropout2d", m.residual_dropout2d);
    get_if(j, "pretrained_weights_ref", m.pretrained_weights_ref);
    return m;
}

AugmentationConfig augmentation_from_json(const json& j)
{
    AugmentationConfig a;
    get_if(j, "enabled", a.enabled);
    get_if(j, "apply_prob", a.apply_prob);
    get_if(j, "rotation_deg", a.rotation_deg);
    get_if(j, "translate_x_px", a.translate_x_px);
    get_if(j, "translate_y_px", a.translate_y_px);
    get_if(j, "scale_delta", a.scale_delta);
    get_if(j, "skewed_scale_rate", a.skewed_scale_rate);
    get_if(j, "elastic_alpha", a.elastic_alpha);
    get_if(j, "elastic_sigma", a.elastic_sigma);
    get_if(j, "multiply_delta", a.multiply_delta);
    get_if(j, "gamma_min", a.gamma_min);
    get_if(j, "gamma_max", a.gamma_max);
    get_if(j, "invert_rate", a.invert_rate);
    get_if(j, "blur_rate", a.blur_rate);
    get_if(j, "blur_sigma_min", a.blur_sigma_min);
    get_if(j, "blur_sigma_max", a.blur_sigma_max);
    get_if(j, "cutout_count", a.cutout_count);
    get_if(j, "cutout_min_frac", a.cutout_min_frac);
    get_if(j, "cutout_max_frac", a.cutout_max_frac);
    get_if(j, "artefact_rate", a.artefact_rate);
    get_if(j, "artefact_noise_sigma", a.artefact_noise_sigma);
    get_if(j, "artefact_mult_min", a.artefact_mult_min);
    get_if(j, "artefact_mult_max", a.artefact_mult_max);
    get_if(j, "artefact_band_sizes", a.artefact_band_sizes);
    return a;
}

}  // namespace

json to_json(const RunConfig& c)
{
    json schedule = json::array();
    for (const auto& s : c.accumulation_schedule)
        schedule.push_back({{"epoch", s.epoch}, {"interval", s.interval}});
    return {
        {"model", to_json(c.model)},
        {"detector", to_json(c.detector)},
        {"detector_training",
         {{"epochs", c.detector_training.epochs},
          {"lr", c.detector_training.lr},
          {"weight_decay", c.detector_training.weight_decay},
          {"seed", c.detector_training.seed}}},
        {"augmentation", to_json(c.augmentation)},
        {"optimizer", {{"name", c.optimizer.name}, {"lr", c.optimizer.lr}, {"weight_decay", c.optimizer.weight_decay}}},
        {"accumulation_schedule", schedule},
        {"lr_decay", {{"factor", c.lr_decay.factor}, {"epochs", c.lr_decay.epochs}}},
        {"max_epochs", c.max_epochs},
        {"early_stop_patience", c.early_stop_patience},
        {"n_folds", c.n_folds},
        {"top_k", c.top_k},
        {"top_k_weighting", c.top_k_weighting == TopKWeighting::uniform ? "uniform" : "softmax"},
        {"rcnn_pad", c.rcnn_pad},
        {"seed", c.seed},
        {"crop_height", c.crop_height},
        {"blur_sigma", c.blur_sigma},
        {"crop_source", to_string(c.crop_source)},
        {"region",
         {{"fallback", to_string(c.region.fallback)},
          {"score_threshold", c.region.score_threshold},
          {"fallback_aspect", c.region.fallback_aspect}}},
        {"image_extension", c.image_extension},
        {"ruler_length_mm", c.ruler_length_mm ? json(*c.ruler_length_mm) : json(nullptr)},
    };
}

RunConfig run_config_from_json(const json& j)
{
    RunConfig c;
    if (j.contains("model"))
        c.model = model_from_json(j.at("model"));
    if (j.contains("detector"))
        c.detector = detector_config_from_json(j.at("detector"));
    if (j.contains("detector_training")) {
        const auto& d = j.at("detector_training");
        get_if(d, "epochs", c.detector_training.epochs);
        get_if(d, "lr", c.detector_training.lr);
        get_if(d, "weight_decay", c.detector_training.weight_decay);
        get_if(d, "seed", c.detector_training.seed);
    }
    if (j.contains("augmentation"))
        c.augmentation = augmentation_from_json(j.at("augmentation"));
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        get_if(o, "name", c.optimizer.name);
        get_if(o, "lr", c.optimizer.lr);
        get_if(o, "weight_decay", c.optimizer.weight_decay);
    }
    if (j.contains("accumulation_schedule")) {
        c.accumulation_schedule.clear();
        for (const auto& s : j.at("accumulation_schedule"))
            c.accumulation_schedule.push_back({s.at("epoch").get<int>(), s.at("interval").get<int>()});
    }
    if (j.contains("lr_decay")) {
        get_if(j.at("lr_decay"), "factor", c.lr_decay.factor);
        get_if(j.at("lr_decay"), "epochs", c.lr_decay.epochs);
    }
    get_if(j, "max_epochs", c.max_epochs);
    get_if(j, "early_stop_patience", c.early_stop_patience);
    get_if(j, "n_folds", c.n_folds);
    get_if(j, "top_k", c.top_k);
    if (j.contains("top_k_weighting")) {
        const auto w = j.at("top_k_weighting").get<std::string>();
        if (w != "uniform" && w != "softmax")
            throw Error("unknown top_k_weighting: " + w);
        c.top_k_weighting = w == "uniform" ? TopKWeighting::uniform : TopKWeighting::softmax;
    }
    get_if(j, "rcnn_pad", c.rcnn_pad);
    get_if(j, "seed", c.seed);
    get_if(j, "crop_height", c.crop_height);
    get_if(j, "blur_sigma", c.blur_sigma);
    if (j.contains("crop_source"))
        c.crop_source = parse_crop_source(j.at("crop_source").get<std::string>());
    if (j.contains("region")) {
        const auto& r = j.at("region");
        if (r.contains("fallback"))
            c.region.fallback = parse_fallback(r.at("fallback").get<std::string>());
        get_if(r, "score_threshold", c.region.score_threshold);
        get_if(r, "fallback_aspect", c.region.fallback_aspect);
    }
    get_if(j, "image_extension", c.image_extension);
    if (j.contains("ruler_length_mm") && !j.at("ruler_length_mm").is_null())
        c.ruler_length_mm = j.at("ruler_length_mm").get<double>();
    c.detector_training.pad = c.rcnn_pad;
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw Error("cannot open config " + file.string());
    try {
        return run_config_from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw Error("malformed config " + file.string() + ": " + e.what());
    }
}

void save_run_config(const std::filesystem::path& file, const RunConfig& config)
{
    std::ofstream out(file);
    if (!out)
        throw Error("cannot write config " + file.string());
    out << to_json(config).dump(2) << '\n';
}

std::string config_hash(const RunConfig& config)
{
    const auto text = to_json(config).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

DatasetOptions dataset_options(const RunConfig& config)
{
    return {config.image_extension, config.ruler_length_mm};
}

}  // namespace cephland
