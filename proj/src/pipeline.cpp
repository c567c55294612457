#include "cephland/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include <opencv2/core.hpp>

#include "cephland/augment.hpp"
#include "cephland/detector.hpp"
#include "cephland/targets.hpp"

namespace cephland {

namespace fs = std::filesystem;
using nlohmann::json;

void log_stderr(const std::string& message)
{
    std::cerr << message << '\n';
}

namespace {

ImageRecord ensure_loaded(const ImageRecord& record)
{
    return record.loaded() ? record : load_pixels(record);
}

PreparedSample finish(const ImageRecord& record, const Region& region, int crop_height)
{
    const auto resized = resize_to_height(region, crop_height);
    PreparedSample s;
    s.image_id = record.image_id;
    s.crop = resized.pixels;
    s.transform = resized.transform;
    s.spacing = record.spacing;
    if (record.landmarks) {
        s.original = record.landmarks->points();
        s.crop_coords = forward_map(s.original, s.transform);
    }
    return s;
}

}  // namespace

PreparedSample prepare_sample(const ImageRecord& record, const RunConfig& config, BoxDetector* detector)
{
    const auto loaded = ensure_loaded(record);
    switch (config.crop_source) {
    case CropSource::gt_box:
        return finish(loaded, gt_region(loaded, config.rcnn_pad), config.crop_height);
    case CropSource::detector:
        if (!detector)
            throw Error("crop source 'detector' needs a detector");
        return finish(loaded, extract_region(loaded, detector, config.region), config.crop_height);
    case CropSource::pad_crop:
        return finish(loaded, fallback_region(loaded.pixels, FallbackMode::pad_crop, config.region.fallback_aspect),
                      config.crop_height);
    case CropSource::pad_resize:
        return finish(loaded,
                      fallback_region(loaded.pixels, FallbackMode::pad_resize, config.region.fallback_aspect),
                      config.crop_height);
    }
    throw Error("unhandled crop source");
}

PreparedSample prepare_inference(const ImageRecord& record, const RunConfig& config, BoxDetector* detector)
{
    const auto loaded = ensure_loaded(record);
    if (detector)
        return finish(loaded, extract_region(loaded, detector, config.region), config.crop_height);
    if (config.crop_source == CropSource::gt_box && loaded.landmarks)
        return finish(loaded, gt_region(loaded, config.rcnn_pad), config.crop_height);
    if (config.crop_source == CropSource::pad_crop || config.crop_source == CropSource::pad_resize)
        return prepare_sample(loaded, config, nullptr);
    return finish(loaded, extract_region(loaded, nullptr, config.region), config.crop_height);
}

namespace {

torch::Tensor image_tensor(const cv::Mat& image)
{
    cv::Mat f;
    image.convertTo(f, CV_32F);
    if (!f.isContinuous())
        f = f.clone();
    return torch::from_blob(f.data, {1, 1, f.rows, f.cols}, torch::kFloat32).clone();
}

}  // namespace

torch::Tensor infer_logits(HeatmapNet& model, const cv::Mat& crop)
{
    torch::NoGradGuard guard;
    model->eval();
    auto logits = forward(model, normalize_intensity(image_tensor(crop)));
    return logits.squeeze(0).contiguous();
}

std::vector<Point2> decode_planes(const torch::Tensor& logits, int k, TopKWeighting weighting)
{
    if (logits.dim() != 3)
        throw Error("decode_planes expects L x H x W logits");
    const auto planes = logits.to(torch::kFloat32).contiguous();
    const int n = static_cast<int>(planes.size(0));
    const int h = static_cast<int>(planes.size(1));
    const int w = static_cast<int>(planes.size(2));
    const float* data = planes.data_ptr<float>();
    std::vector<Point2> out;
    out.reserve(n);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int l = 0; l < n; ++l)
        out.push_back(decode_topk({data + l * plane, plane}, h, w, k, weighting));
    return out;
}

std::vector<Point2> predict_crop(HeatmapNet& model, const cv::Mat& crop, int k, TopKWeighting weighting)
{
    return decode_planes(infer_logits(model, crop), k, weighting);
}

void save_landmark_checkpoint(const fs::path& file, HeatmapNet& model, const RunConfig& config,
                              const TrainState& state)
{
    torch::serialize::OutputArchive archive;
    archive.write("kind", c10::IValue(std::string("cephland-landmarks")));
    archive.write("config_json", c10::IValue(to_json(config).dump()));
    archive.write("config_hash", c10::IValue(config_hash(config)));
    archive.write("best_val_mre_mm", c10::IValue(state.best_val_mre_mm));
    archive.write("best_epoch", c10::IValue(static_cast<int64_t>(state.best_epoch)));
    archive.write("fold", c10::IValue(static_cast<int64_t>(state.fold)));
    torch::serialize::OutputArchive weights;
    model->save(weights);
    archive.write("weights", weights);
    const auto tmp = fs::path(file.string() + ".tmp");
    archive.save_to(tmp.string());
    fs::rename(tmp, file);
}

LandmarkCheckpoint load_landmark_checkpoint(const fs::path& file)
{
    torch::serialize::InputArchive archive;
    try {
        archive.load_from(file.string());
    } catch (const c10::Error&) {
        throw Error("cannot read landmark checkpoint " + file.string());
    }
    c10::IValue kind;
    if (!archive.try_read("kind", kind) || kind.toStringRef() != "cephland-landmarks")
        throw Error("not a landmark checkpoint: " + file.string());
    c10::IValue config_json, hash, best, epoch, fold;
    archive.read("config_json", config_json);
    archive.read("config_hash", hash);
    archive.read("best_val_mre_mm", best);
    archive.read("best_epoch", epoch);
    archive.read("fold", fold);

    LandmarkCheckpoint ckpt;
    ckpt.config = json::parse(config_json.toStringRef());
    ckpt.config_hash = hash.toStringRef();
    ckpt.best_val_mre_mm = best.toDouble();
    ckpt.best_epoch = static_cast<int>(epoch.toInt());
    ckpt.fold = static_cast<int>(fold.toInt());
    auto spec = run_config_from_json(ckpt.config).model;
    spec.pretrained_weights_ref.clear();
    ckpt.model = build_model(spec);
    torch::serialize::InputArchive weights;
    archive.read("weights", weights);
    ckpt.model->load(weights);
    ckpt.model->eval();
    return ckpt;
}

EvalReport validate_samples(HeatmapNet& model, std::span<const PreparedSample> samples, int k,
                            TopKWeighting weighting)
{
    std::vector<EvalSample> eval;
    eval.reserve(samples.size());
    for (const auto& s : samples) {
        if (s.original.empty())
            throw Error("validation image " + s.image_id + " has no landmarks");
        const auto crop = predict_crop(model, s.crop, k, weighting);
        eval.push_back({s.image_id, remap_coords(crop, s.transform), s.original, s.spacing});
    }
    return evaluate(eval);
}

namespace {

void set_lr(torch::optim::AdamW& optimizer, double lr)
{
    for (auto& group : optimizer.param_groups())
        static_cast<torch::optim::AdamWOptions&>(group.options()).lr(lr);
}

std::vector<PreparedSample> prepare_all(std::span<const ImageRecord> records, const RunConfig& config,
                                        BoxDetector* detector)
{
    std::vector<PreparedSample> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        if (!r.landmarks)
            throw Error("training image " + r.image_id + " has no landmarks");
        out.push_back(prepare_sample(r, config, detector));
    }
    return out;
}

void dump_state(const fs::path& dir, const TrainState& state, const RunConfig& config, const std::string& image_id)
{
    std::ofstream out(dir / "state_dump.json");
    out << json{{"state", to_json(state)}, {"image_id", image_id}, {"config", to_json(config)}}.dump(2) << '\n';
}

}  // namespace

FitResult fit_landmarks(const RunConfig& config, std::span<const ImageRecord> train, std::span<const ImageRecord> val,
                        const TrainOptions& options, const std::string& checkpoint_name, int fold)
{
    config.validate();
    if (train.empty() || val.empty())
        throw Error("training and validation sets must be non-empty");
    const auto& log = options.log ? options.log : LogFn(log_stderr);
    fs::create_directories(options.out_dir);

    const auto train_samples = prepare_all(train, config, options.detector);
    const auto val_samples = prepare_all(val, config, options.detector);

    torch::manual_seed(config.seed + static_cast<std::uint64_t>(fold + 1));
    auto model = build_model(config.model, options.registry);
    torch::optim::AdamW optimizer(
        model->parameters(), torch::optim::AdamWOptions(config.optimizer.lr).weight_decay(config.optimizer.weight_decay));
    Rng rng(config.seed * 1000003ULL + static_cast<std::uint64_t>(fold + 1));
    const TrainingSchedule schedule(config);

    FitResult result;
    result.checkpoint = options.out_dir / checkpoint_name;
    TrainState state;
    state.fold = fold;
    state.config_hash = config_hash(config);

    std::vector<std::size_t> order(train_samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    EpochHooks hooks;
    hooks.train_epoch = [&](int epoch, double lr, int interval) {
        state.epoch = epoch;
        set_lr(optimizer, lr);
        model->train();
        std::shuffle(order.begin(), order.end(), rng);
        optimizer.zero_grad();
        double total = 0.0;
        int counted = 0;
        const int n = static_cast<int>(order.size());
        for (int b = 0; b < n; ++b) {
            const auto& s = train_samples[order[b]];
            auto aug = augment(s.crop, s.crop_coords, config.augmentation, rng);
            auto coords = aug.coords;
            for (std::size_t l = 0; l < coords.size(); ++l)
                if (!aug.valid[l])
                    coords[l] = {-1.0, -1.0};
            const auto target = encode_target(coords, aug.image.rows, aug.image.cols, config.blur_sigma);
            if (target.valid.any().item<bool>()) {
                torch::Tensor loss;
                double value = std::numeric_limits<double>::quiet_NaN();
                try {
                    const auto logits = forward(model, normalize_intensity(image_tensor(aug.image)));
                    loss = heatmap_loss(logits, target.heatmaps.unsqueeze(0), target.valid.unsqueeze(0));
                    value = loss.item<double>();
                } catch (const Error&) {
                }
                if (!std::isfinite(value)) {
                    dump_state(options.out_dir, state, config, s.image_id);
                    throw Error("non-finite loss at epoch " + std::to_string(epoch) + " on image " + s.image_id +
                                "; state written to " + (options.out_dir / "state_dump.json").string());
                }
                (loss / static_cast<double>(interval)).backward();
                total += value;
                ++counted;
            }
            if (TrainingSchedule::should_step(b, n, interval)) {
                optimizer.step();
                optimizer.zero_grad();
            }
        }
        return counted > 0 ? total / counted : 0.0;
    };
    hooks.validate = [&](int) {
        const auto report = validate_samples(model, val_samples, config.top_k, config.top_k_weighting);
        if (report.mre_mm < state.best_val_mre_mm)
            result.best_report = report;
        return report.mre_mm;
    };
    hooks.on_improvement = [&](const TrainState& s) { save_landmark_checkpoint(result.checkpoint, model, config, s); };
    hooks.on_epoch_end = [&](const TrainState& s) {
        state = s;
        std::ostringstream msg;
        msg << "fold " << fold << " epoch " << s.epoch << " lr " << s.lr << " accum " << s.accumulation_interval
            << " loss " << s.last_train_loss << " val_mre_mm " << s.last_val_mre_mm << " best " << s.best_val_mre_mm;
        log(msg.str());
    };
    if (options.stop_below_mre_mm) {
        const double threshold = *options.stop_below_mre_mm;
        hooks.stop_requested = [threshold](const TrainState& s) { return s.best_val_mre_mm < threshold; };
    }

    state = run_schedule(schedule, config.max_epochs, config.early_stop_patience, hooks, state);
    result.state = state;
    if (state.best_epoch < 0)
        throw Error("training produced no checkpoint (max_epochs = 0?)");
    std::ofstream(options.out_dir / (fs::path(checkpoint_name).stem().string() + "_state.json"))
        << json{{"state", to_json(state)}, {"best_report", to_json(result.best_report)}}.dump(2) << '\n';
    return result;
}

std::vector<ImageRecord> select_records(std::span<const ImageRecord> dataset, std::span<const std::string> ids)
{
    std::map<std::string, const ImageRecord*> index;
    for (const auto& r : dataset)
        index[r.image_id] = &r;
    std::vector<ImageRecord> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = index.find(id);
        if (it == index.end())
            throw Error("unknown image id " + id);
        out.push_back(*it->second);
    }
    return out;
}

FitResult train_fold(const RunConfig& config, int fold, std::span<const ImageRecord> dataset,
                     const FoldAssignment& folds, const TrainOptions& options)
{
    if (fold < 0 || fold >= folds.n_folds)
        throw Error("fold index " + std::to_string(fold) + " out of range");
    const auto val_ids = folds.members(fold);
    const auto train_ids = folds.complement(fold);
    const auto train = select_records(dataset, train_ids);
    const auto val = select_records(dataset, val_ids);
    return fit_landmarks(config, train, val, options, "fold_" + std::to_string(fold) + ".pt", fold);
}

void save_folds(const fs::path& file, const FoldAssignment& folds)
{
    std::ofstream out(file);
    if (!out)
        throw Error("cannot write " + file.string());
    out << json{{"n_folds", folds.n_folds}, {"seed", folds.seed}, {"assignment", folds.assignment}}.dump(2) << '\n';
}

FoldAssignment load_folds(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw Error("cannot open fold file " + file.string());
    const auto j = json::parse(in);
    FoldAssignment f;
    f.n_folds = j.at("n_folds").get<int>();
    f.seed = j.at("seed").get<std::uint64_t>();
    f.assignment = j.at("assignment").get<std::map<std::string, int>>();
    return f;
}

void write_fold_table_csv(const fs::path& file, const FoldTable& table)
{
    std::ofstream out(file);
    if (!out)
        throw Error("cannot write " + file.string());
    out << "metric";
    for (std::size_t i = 0; i < table.folds.size(); ++i)
        out << ",fold_" << (i + 1);
    out << ",ensemble\n";
    auto row = [&](const char* name, auto get) {
        out << name;
        for (const auto& r : table.folds)
            out << ',' << format_decimal(get(r));
        out << ',';
        if (table.ensemble)
            out << format_decimal(get(*table.ensemble));
        out << '\n';
    };
    row("mre_mm", [](const EvalReport& r) { return r.mre_mm; });
    row("sdr_2mm_pct", [](const EvalReport& r) { return r.sdr_2mm_pct; });
    out << "ensemble_eval_set";
    for (std::size_t i = 0; i < table.folds.size(); ++i)
        out << ",validation";
    out << ',' << table.ensemble_eval_set << '\n';
}

TrainAllResult train_all(const RunConfig& config, std::span<const ImageRecord> dataset, const TrainOptions& options,
                         std::span<const ImageRecord> holdout)
{
    config.validate();
    if (dataset.empty())
        throw Error("empty dataset");
    const auto& log = options.log ? options.log : LogFn(log_stderr);
    fs::create_directories(options.out_dir);
    save_run_config(options.out_dir / "config.json", config);

    TrainAllResult result;
    std::optional<DetectorModel> trained_detector;
    BoxDetector* detector = options.detector;
    if (!detector && config.detector_training.epochs > 0) {
        log("training detector");
        auto train_cfg = config.detector_training;
        train_cfg.pad = config.rcnn_pad;
        trained_detector.emplace(train_detector(dataset, config.detector, train_cfg, options.registry));
        result.detector_checkpoint = options.out_dir / "detector.pt";
        trained_detector->save(*result.detector_checkpoint);
        detector = &*trained_detector;
    }
    if (config.crop_source == CropSource::detector && !detector)
        throw Error("crop source 'detector' needs a detector (set detector_training.epochs or pass one)");

    std::vector<std::string> ids;
    for (const auto& r : dataset)
        ids.push_back(r.image_id);
    result.folds = split_folds(ids, config.n_folds, config.seed);
    save_folds(options.out_dir / "folds.json", result.folds);

    auto fold_options = options;
    fold_options.detector = detector;
    std::vector<HeatmapNet> models;
    for (int fold = 0; fold < config.n_folds; ++fold) {
        auto r = train_fold(config, fold, dataset, result.folds, fold_options);
        result.table.folds.push_back(r.best_report);
        models.push_back(load_landmark_checkpoint(r.checkpoint).model);
        result.fold_results.push_back(std::move(r));
    }

    const bool use_holdout = !holdout.empty();
    const auto eval_set = use_holdout ? holdout : dataset;
    result.table.ensemble_eval_set = use_holdout ? "holdout" : "train";
    const auto out = predict(config, models, eval_set, detector, log);
    result.table.ensemble = evaluate_predictions(submission_rows(out.bundles), eval_set, log);
    write_fold_table_csv(options.out_dir / "fold_table.csv", result.table);
    return result;
}

PredictOutput predict(const RunConfig& config, std::span<HeatmapNet> models, std::span<const ImageRecord> images,
                      BoxDetector* detector, const LogFn& log)
{
    if (models.empty())
        throw Error("predict needs at least one checkpoint");
    PredictOutput out;
    for (const auto& record : images) {
        PreparedSample sample;
        try {
            sample = prepare_inference(record, config, detector);
        } catch (const std::exception& e) {
            log("error: skipping " + record.image_id + ": " + e.what());
            out.failed.push_back(record.image_id);
            continue;
        }
        PredictionBundle bundle;
        bundle.image_id = record.image_id;
        for (auto& model : models) {
            const auto crop = predict_crop(model, sample.crop, config.top_k, config.top_k_weighting);
            bundle.per_model_coords.push_back(remap_coords(crop, sample.transform));
        }
        bundle.ensembled_coords = ensemble_coords(bundle.per_model_coords);
        out.bundles.push_back(std::move(bundle));
    }
    return out;
}

std::vector<LandmarkRow> submission_rows(std::span<const PredictionBundle> bundles)
{
    std::vector<LandmarkRow> rows;
    rows.reserve(bundles.size());
    for (const auto& b : bundles)
        rows.push_back({b.image_id, std::nullopt, b.ensembled_coords});
    return rows;
}

EvalReport evaluate_predictions(std::span<const LandmarkRow> predictions, std::span<const ImageRecord> truth,
                                const LogFn& log)
{
    std::map<std::string, const LandmarkRow*> by_id;
    for (const auto& row : predictions)
        by_id[row.image_id] = &row;
    std::vector<EvalSample> samples;
    for (const auto& record : truth) {
        if (!record.landmarks)
            throw Error("evaluation image " + record.image_id + " has no landmarks");
        auto it = by_id.find(record.image_id);
        if (it == by_id.end()) {
            log("warning: no prediction for " + record.image_id);
            continue;
        }
        samples.push_back({record.image_id, it->second->points, record.landmarks->points(), record.spacing});
    }
    if (samples.empty())
        throw Error("no predictions match the annotated images");
    return evaluate(samples);
}

void write_sweep_csv(const fs::path& file, const SweepResult& sweep)
{
    std::ofstream out(file);
    if (!out)
        throw Error("cannot write " + file.string());
    out << sweep.parameter << ",mre_mm,sdr_2mm_pct\n";
    for (const auto& p : sweep.points) {
        out << p.x << ',';
        if (p.mre_mm)
            out << format_decimal(*p.mre_mm);
        out << ',';
        if (p.sdr_pct)
            out << format_decimal(*p.sdr_pct);
        out << '\n';
    }
}

namespace {

std::optional<double> parse_optional(const std::string& field, const std::string& context)
{
    if (field.empty())
        return std::nullopt;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc{} || ptr != field.data() + field.size())
        throw Error("bad number '" + field + "' in " + context);
    return v;
}

std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ','))
        out.push_back(field);
    if (!line.empty() && line.back() == ',')
        out.emplace_back();
    return out;
}

}  // namespace

SweepResult read_sweep_csv(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw Error("cannot open sweep file " + file.string());
    std::string line;
    if (!std::getline(in, line))
        throw Error("empty sweep file " + file.string());
    if (!line.empty() && line.back() == '\r')
        line.pop_back();
    const auto header = split_csv(line);
    if (header.size() != 3)
        throw Error("sweep header must have 3 columns: " + file.string());
    SweepResult sweep;
    sweep.parameter = header[0];
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (line.empty())
            continue;
        auto fields = split_csv(line);
        fields.resize(3);
        sweep.points.push_back(
            {fields[0], parse_optional(fields[1], file.string()), parse_optional(fields[2], file.string())});
    }
    return sweep;
}

std::vector<std::string> padding_sweep_values()
{
    return {"16", "32", "64", "96", "128", "pad_crop", "pad_resize"};
}

std::vector<double> artefact_rate_sweep_values()
{
    std::vector<double> out;
    for (int i = 0; i <= 10; ++i)
        out.push_back(i / 10.0);
    return out;
}

std::vector<int> top_k_sweep_values()
{
    std::vector<int> out(25);
    std::iota(out.begin(), out.end(), 1);
    return out;
}

namespace {

SweepPoint run_point(const std::string& x, const RunConfig& config, std::span<const ImageRecord> train,
                     std::span<const ImageRecord> val, TrainOptions options, const std::string& subdir)
{
    const auto& log = options.log ? options.log : LogFn(log_stderr);
    options.out_dir /= subdir;
    try {
        fs::create_directories(options.out_dir);
        std::optional<DetectorModel> detector;
        if (config.crop_source == CropSource::detector && !options.detector) {
            auto train_cfg = config.detector_training;
            train_cfg.pad = config.rcnn_pad;
            detector.emplace(train_detector(train, config.detector, train_cfg, options.registry));
            detector->save(options.out_dir / "detector.pt");
            options.detector = &*detector;
        }
        const auto r = fit_landmarks(config, train, val, options, "model.pt");
        return {x, r.best_report.mre_mm, r.best_report.sdr_2mm_pct};
    } catch (const std::exception& e) {
        log("warning: sweep point " + x + " failed: " + e.what());
        return {x, std::nullopt, std::nullopt};
    }
}

}  // namespace

SweepResult sweep_padding(const RunConfig& config, std::span<const ImageRecord> train,
                          std::span<const ImageRecord> val, const TrainOptions& options,
                          std::span<const std::string> values)
{
    if (values.empty())
        throw Error("empty padding sweep");
    SweepResult sweep{"padding", {}};
    for (const auto& v : values) {
        auto c = config;
        if (v == "pad_crop" || v == "pad_resize") {
            c.crop_source = parse_crop_source(v);
        } else {
            const auto pad = parse_optional(v, "padding sweep");
            if (!pad || *pad < 0.0)
                throw Error("bad padding value " + v);
            c.rcnn_pad = *pad;
            c.detector_training.pad = *pad;
        }
        auto o = options;
        if (c.crop_source != CropSource::detector)
            o.detector = nullptr;
        sweep.points.push_back(run_point(v, c, train, val, o, "padding_" + v));
    }
    return sweep;
}

SweepResult sweep_artefact_rate(const RunConfig& config, std::span<const ImageRecord> train,
                                std::span<const ImageRecord> val, const TrainOptions& options,
                                std::span<const double> rates)
{
    if (rates.empty())
        throw Error("empty artefact-rate sweep");
    SweepResult sweep{"artefact_rate", {}};
    for (double rate : rates) {
        auto c = config;
        c.augmentation.artefact_rate = rate;
        const auto x = format_decimal(rate);
        sweep.points.push_back(run_point(x, c, train, val, options, "artefact_rate_" + x));
    }
    return sweep;
}

SweepResult sweep_top_k(const RunConfig& config, std::span<HeatmapNet> models, std::span<const ImageRecord> val,
                        BoxDetector* detector, std::span<const int> ks)
{
    if (ks.empty())
        throw Error("empty top-k sweep");
    if (models.empty())
        throw Error("top-k sweep needs at least one checkpoint");
    struct Cached {
        PreparedSample sample;
        std::vector<torch::Tensor> logits;
    };
    std::vector<Cached> cache;
    for (const auto& record : val) {
        Cached c{prepare_inference(record, config, detector), {}};
        if (c.sample.original.empty())
            throw Error("top-k sweep image " + record.image_id + " has no landmarks");
        for (auto& m : models)
            c.logits.push_back(infer_logits(m, c.sample.crop));
        cache.push_back(std::move(c));
    }
    SweepResult sweep{"top_k", {}};
    for (int k : ks) {
        std::vector<EvalSample> samples;
        for (const auto& c : cache) {
            std::vector<std::vector<Point2>> per_model;
            for (const auto& l : c.logits)
                per_model.push_back(remap_coords(decode_planes(l, k, config.top_k_weighting), c.sample.transform));
            samples.push_back({c.sample.image_id, ensemble_coords(per_model), c.sample.original, c.sample.spacing});
        }
        const auto report = evaluate(samples);
        sweep.points.push_back({std::to_string(k), report.mre_mm, report.sdr_2mm_pct});
    }
    return sweep;
}

}  // namespace cephland
