#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cephland/config.hpp"
#include "cephland/dataset_io.hpp"
#include "cephland/detector.hpp"
#include "cephland/pipeline.hpp"
#include "cephland/report.hpp"

namespace fs = std::filesystem;
using namespace cephland;

namespace {

struct Common {
    std::string config_file;
    std::string out_dir{"out"};
    std::string data_root;
    std::string annotations;
    std::string registry;

    std::optional<double> rcnn_pad;
    std::optional<std::string> fallback;
    std::optional<double> score_threshold;
    std::optional<double> artefact_rate;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> variant;
    std::optional<std::string> crop_source;
    std::optional<int> top_k;
    std::optional<int> max_epochs;
};

void add_common(CLI::App& app, Common& c)
{
    app.add_option("--config", c.config_file, "JSON run configuration")->envname("CEPHLAND_CONFIG");
    app.add_option("--out-dir", c.out_dir, "output directory")->envname("CEPHLAND_OUT_DIR");
    app.add_option("--data-root", c.data_root, "directory holding the images")->envname("CEPHLAND_DATA_ROOT");
    app.add_option("--annotations", c.annotations, "annotation CSV (default <data-root>/annotations.csv)")
        ->envname("CEPHLAND_ANNOTATIONS");
    app.add_option("--weights-registry", c.registry, "directory of pretrained weights")
        ->envname("CEPHLAND_WEIGHTS_REGISTRY");
    app.add_option("--rcnn-pad", c.rcnn_pad, "ground-truth box padding in pixels");
    app.add_option("--fallback", c.fallback, "region fallback when nothing is detected")
        ->check(CLI::IsMember({"none", "pad_crop", "pad_resize"}));
    app.add_option("--score-threshold", c.score_threshold, "minimum detection score");
    app.add_option("--artefact-rate", c.artefact_rate, "X-ray artefact augmentation rate")
        ->check(CLI::Range(0.0, 1.0));
    app.add_option("--seed", c.seed, "run seed");
    app.add_option("--variant", c.variant, "encoder variant")->check(CLI::IsMember({"nano", "tiny"}));
    app.add_option("--crop-source", c.crop_source, "training crop source")
        ->check(CLI::IsMember({"gt_box", "detector", "pad_crop", "pad_resize"}));
    app.add_option("--top-k", c.top_k, "hottest pixels averaged per landmark")->check(CLI::PositiveNumber);
    app.add_option("--max-epochs", c.max_epochs, "epoch limit")->check(CLI::NonNegativeNumber);
}

RunConfig resolve_config(const Common& c)
{
    RunConfig config = c.config_file.empty() ? RunConfig{} : load_run_config(c.config_file);
    if (c.rcnn_pad) {
        config.rcnn_pad = *c.rcnn_pad;
        config.detector_training.pad = *c.rcnn_pad;
    }
    if (c.fallback)
        config.region.fallback = parse_fallback(*c.fallback);
    if (c.score_threshold) {
        config.region.score_threshold = *c.score_threshold;
        config.detector.score_threshold = *c.score_threshold;
    }
    if (c.artefact_rate)
        config.augmentation.artefact_rate = *c.artefact_rate;
    if (c.seed) {
        config.seed = *c.seed;
        config.detector_training.seed = *c.seed;
    }
    if (c.variant)
        config.model.variant = parse_variant(*c.variant);
    if (c.crop_source)
        config.crop_source = parse_crop_source(*c.crop_source);
    if (c.top_k)
        config.top_k = *c.top_k;
    if (c.max_epochs)
        config.max_epochs = *c.max_epochs;
    config.validate();
    return config;
}

fs::path require_root(const Common& c)
{
    if (c.data_root.empty())
        throw Error("dataset root not set (--data-root or CEPHLAND_DATA_ROOT)");
    return c.data_root;
}

fs::path annotation_path(const Common& c)
{
    if (!c.annotations.empty())
        return c.annotations;
    return require_root(c) / "annotations.csv";
}

std::vector<ImageRecord> load_annotated(const Common& c, const RunConfig& config)
{
    return load_dataset(require_root(c), annotation_path(c), dataset_options(config));
}

TrainOptions train_options(const Common& c)
{
    TrainOptions o;
    o.out_dir = c.out_dir;
    o.registry = c.registry;
    return o;
}

std::optional<DetectorModel> maybe_detector(const std::string& path)
{
    if (path.empty())
        return std::nullopt;
    return DetectorModel::load(path);
}

std::vector<std::string> read_id_list(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw Error("cannot open id list " + file.string());
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        if (!line.empty())
            ids.push_back(line);
    }
    if (ids.empty())
        throw Error("empty id list " + file.string());
    return ids;
}

std::vector<std::string> split_list(const std::string& text)
{
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty())
            out.push_back(item);
    return out;
}

std::vector<HeatmapNet> load_models(const std::vector<std::string>& files)
{
    if (files.empty())
        throw Error("at least one --checkpoint is required");
    std::vector<HeatmapNet> models;
    for (const auto& f : files)
        models.push_back(load_landmark_checkpoint(f).model);
    return models;
}

FoldAssignment folds_for(const Common& c, const RunConfig& config, std::span<const ImageRecord> dataset,
                         const std::string& folds_file)
{
    if (!folds_file.empty())
        return load_folds(folds_file);
    std::vector<std::string> ids;
    for (const auto& r : dataset)
        ids.push_back(r.image_id);
    auto folds = split_folds(ids, config.n_folds, config.seed);
    fs::create_directories(c.out_dir);
    save_folds(fs::path(c.out_dir) / "folds.json", folds);
    return folds;
}

void print_report(const std::string& label, const EvalReport& r)
{
    std::cout << label << " n_images=" << r.n_images << " mre_mm=" << r.mre_mm << " sdr_2mm_pct=" << r.sdr_2mm_pct
              << '\n';
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Cephalometric landmark detection: training, inference, evaluation and ablations"};
    app.require_subcommand(1);
    app.fallthrough();
    Common common;
    add_common(app, common);
    int exit_code = 0;

    auto* train_det = app.add_subcommand("train-detector", "train the face-region detector");
    train_det->callback([&] {
        const auto config = resolve_config(common);
        const auto dataset = load_annotated(common, config);
        auto train_cfg = config.detector_training;
        train_cfg.pad = config.rcnn_pad;
        const auto model = train_detector(dataset, config.detector, train_cfg, common.registry);
        fs::create_directories(common.out_dir);
        const auto out = fs::path(common.out_dir) / "detector.pt";
        model.save(out);
        std::cout << out.string() << '\n';
    });

    int fold = 0;
    std::string detector_file;
    std::string folds_file;
    auto* train_lm = app.add_subcommand("train-landmarks", "train the heatmap model of one fold");
    train_lm->add_option("--fold", fold, "fold index")->required()->check(CLI::NonNegativeNumber);
    train_lm->add_option("--detector", detector_file, "detector checkpoint for crops");
    train_lm->add_option("--folds", folds_file, "fold assignment JSON (default: split with the run seed)");
    train_lm->callback([&] {
        const auto config = resolve_config(common);
        const auto dataset = load_annotated(common, config);
        const auto folds = folds_for(common, config, dataset, folds_file);
        auto detector = maybe_detector(detector_file);
        auto options = train_options(common);
        options.detector = detector ? &*detector : nullptr;
        save_run_config(fs::path(common.out_dir) / "config.json", config);
        const auto result = train_fold(config, fold, dataset, folds, options);
        print_report("fold " + std::to_string(fold), result.best_report);
        std::cout << result.checkpoint.string() << '\n';
    });

    std::string holdout_annotations;
    std::string holdout_root;
    auto* train_all_cmd = app.add_subcommand("train-all", "detector plus one heatmap model per fold");
    train_all_cmd->add_option("--detector", detector_file, "use this detector instead of training one");
    train_all_cmd->add_option("--holdout-annotations", holdout_annotations, "annotations scored by the ensemble");
    train_all_cmd->add_option("--holdout-root", holdout_root, "image directory of the holdout set");
    train_all_cmd->callback([&] {
        const auto config = resolve_config(common);
        const auto dataset = load_annotated(common, config);
        std::vector<ImageRecord> holdout;
        if (!holdout_annotations.empty())
            holdout = load_dataset(holdout_root.empty() ? require_root(common) : fs::path(holdout_root),
                                   holdout_annotations, dataset_options(config));
        auto detector = maybe_detector(detector_file);
        auto options = train_options(common);
        options.detector = detector ? &*detector : nullptr;
        const auto result = train_all(config, dataset, options, holdout);
        for (std::size_t i = 0; i < result.table.folds.size(); ++i)
            print_report("fold " + std::to_string(i), result.table.folds[i]);
        if (result.table.ensemble)
            print_report("ensemble (" + result.table.ensemble_eval_set + ")", *result.table.ensemble);
    });

    std::vector<std::string> checkpoints;
    std::string images_dir;
    std::string output_csv;
    auto* predict_cmd = app.add_subcommand("predict", "write a submission CSV");
    predict_cmd->add_option("--checkpoint", checkpoints, "heatmap checkpoint (repeat to ensemble)")->required();
    predict_cmd->add_option("--detector", detector_file, "detector checkpoint");
    predict_cmd->add_option("--images", images_dir, "image directory (default: dataset root)");
    predict_cmd->add_option("--output", output_csv, "submission CSV (default <out-dir>/submission.csv)");
    predict_cmd->callback([&] {
        const auto config = resolve_config(common);
        const fs::path dir = images_dir.empty() ? require_root(common) : fs::path(images_dir);
        const auto images = list_images(dir, dataset_options(config));
        auto models = load_models(checkpoints);
        auto detector = maybe_detector(detector_file);
        const auto out = predict(config, models, images, detector ? &*detector : nullptr);
        const fs::path csv = output_csv.empty() ? fs::path(common.out_dir) / "submission.csv" : fs::path(output_csv);
        if (csv.has_parent_path())
            fs::create_directories(csv.parent_path());
        write_submission_csv(csv, submission_rows(out.bundles));
        std::cout << out.bundles.size() << " predictions written to " << csv.string() << '\n';
        if (!out.failed.empty()) {
            std::cerr << out.failed.size() << " image(s) failed\n";
            exit_code = 1;
        }
    });

    std::string predictions_csv;
    std::string run_name{"run"};
    auto* evaluate_cmd = app.add_subcommand("evaluate", "score a submission against annotations");
    evaluate_cmd->add_option("--predictions", predictions_csv, "submission CSV")->required();
    evaluate_cmd->add_option("--run-name", run_name, "label in the summary CSV");
    evaluate_cmd->callback([&] {
        const auto config = resolve_config(common);
        const auto truth = load_dataset(common.data_root.empty() ? fs::path(".") : fs::path(common.data_root),
                                        annotation_path(common), dataset_options(config));
        const auto table = read_landmark_csv(predictions_csv);
        const auto report = evaluate_predictions(table.rows, truth);
        fs::create_directories(common.out_dir);
        write_report_json(fs::path(common.out_dir) / (run_name + "_report.json"), report);
        append_summary_csv(fs::path(common.out_dir) / "summary.csv", run_name, report);
        print_report(run_name, report);
    });

    std::string report_input;
    auto* report_cmd = app.add_subcommand("report", "plots and tables from sweep and fold CSVs");
    report_cmd->add_option("--input", report_input, "directory with sweep_*.csv / fold_table.csv")->required();
    report_cmd->callback([&] {
        for (const auto& f : write_report(report_input, fs::path(common.out_dir)))
            std::cout << f.string() << '\n';
    });

    std::string sweep_kind;
    std::string train_ids_file;
    std::string val_ids_file;
    std::string values_text;
    int sweep_fold = 0;
    auto* sweep_cmd = app.add_subcommand("sweep", "ablation sweeps");
    sweep_cmd->add_option("kind", sweep_kind, "padding | artefact-rate | top-k")
        ->required()
        ->check(CLI::IsMember({"padding", "artefact-rate", "top-k"}));
    sweep_cmd->add_option("--fold", sweep_fold, "validation fold when no id lists are given");
    sweep_cmd->add_option("--folds", folds_file, "fold assignment JSON");
    sweep_cmd->add_option("--train-ids", train_ids_file, "file of training image ids");
    sweep_cmd->add_option("--val-ids", val_ids_file, "file of evaluation image ids");
    sweep_cmd->add_option("--values", values_text, "comma-separated sweep values (default: the standard grid)");
    sweep_cmd->add_option("--checkpoint", checkpoints, "heatmap checkpoints (top-k)");
    sweep_cmd->add_option("--detector", detector_file, "detector checkpoint");
    sweep_cmd->callback([&] {
        const auto config = resolve_config(common);
        const auto dataset = load_annotated(common, config);
        std::vector<ImageRecord> train, val;
        if (!val_ids_file.empty()) {
            val = select_records(dataset, read_id_list(val_ids_file));
            if (!train_ids_file.empty())
                train = select_records(dataset, read_id_list(train_ids_file));
        } else {
            const auto folds = folds_for(common, config, dataset, folds_file);
            train = select_records(dataset, folds.complement(sweep_fold));
            val = select_records(dataset, folds.members(sweep_fold));
        }
        auto detector = maybe_detector(detector_file);
        auto options = train_options(common);
        options.detector = detector ? &*detector : nullptr;
        const auto values = split_list(values_text);

        SweepResult sweep;
        if (sweep_kind == "padding") {
            if (train.empty())
                throw Error("padding sweep needs training ids");
            sweep = sweep_padding(config, train, val, options, values.empty() ? padding_sweep_values() : values);
        } else if (sweep_kind == "artefact-rate") {
            if (train.empty())
                throw Error("artefact-rate sweep needs training ids");
            std::vector<double> rates;
            for (const auto& v : values)
                rates.push_back(std::stod(v));
            if (values.empty())
                rates = artefact_rate_sweep_values();
            sweep = sweep_artefact_rate(config, train, val, options, rates);
        } else {
            std::vector<int> ks;
            for (const auto& v : values)
                ks.push_back(std::stoi(v));
            if (values.empty())
                ks = top_k_sweep_values();
            auto models = load_models(checkpoints);
            sweep = sweep_top_k(config, models, val, options.detector, ks);
        }
        fs::create_directories(common.out_dir);
        const auto stem = "sweep_" + sweep.parameter;
        const auto csv = fs::path(common.out_dir) / (stem + ".csv");
        write_sweep_csv(csv, sweep);
        plot_sweep(sweep, fs::path(common.out_dir) / (stem + ".png"));
        std::cout << csv.string() << '\n';
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return exit_code;
}
