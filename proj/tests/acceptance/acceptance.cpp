// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments
// select criteria by substring.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "cephland/augment.hpp"
#include "cephland/decode_metrics.hpp"
#include "cephland/landmark_net.hpp"
#include "cephland/pipeline.hpp"
#include "cephland/region.hpp"
#include "cephland/schedule.hpp"
#include "cephland/targets.hpp"
#include "support/synthetic.hpp"

using namespace cephland;
namespace F = torch::nn::functional;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
    bool pass{true};
    std::string detail;
};

void require(Outcome& o, bool ok, const std::string& what)
{
    if (!ok && o.pass) {
        o.pass = false;
        o.detail = what;
    }
}

Outcome metric_oracle()
{
    const auto start = Clock::now();
    Outcome o;
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> coord(0.0, 400.0), jitter(-40.0, 40.0), spacing(0.05, 0.2);
    double worst = 0.0;
    for (int instance = 0; instance < 100; ++instance) {
        const int n_images = 1 + instance % 7;
        std::vector<EvalSample> samples;
        long double sum = 0.0L;
        long long hits = 0, total = 0;
        for (int i = 0; i < n_images; ++i) {
            // Dyadic spacings keep the exact-boundary cases exact in floating point.
            const double sp = i % 2 ? spacing(rng) : std::ldexp(1.0, -2 - i % 3);
            EvalSample s{"i" + std::to_string(i), {}, {}, sp};
            for (int l = 0; l < kNumLandmarks; ++l) {
                Point2 t{coord(rng), coord(rng)};
                Point2 p{t.x + jitter(rng), t.y + jitter(rng)};
                if (i % 2 == 0 && l % 11 == 0) {
                    // Exactly on the 2 mm circle.
                    t = {std::floor(t.x), std::floor(t.y)};
                    p = {t.x + 2.0 / s.spacing, t.y};
                }
                s.truth.push_back(t);
                s.predicted.push_back(p);
                const long double dx = (static_cast<long double>(p.x) - t.x) * s.spacing;
                const long double dy = (static_cast<long double>(p.y) - t.y) * s.spacing;
                const long double r = std::sqrt(dx * dx + dy * dy);
                sum += r;
                hits += r <= 2.0L ? 1 : 0;
                ++total;
            }
            samples.push_back(s);
        }
        const double oracle_mre = static_cast<double>(sum / total);
        worst = std::max(worst, std::abs(mre(samples) - oracle_mre));
        const double pct = sdr(samples, 2.0);
        const auto count = std::llround(pct * total / 100.0);
        require(o, count == hits, "SDR count mismatch at instance " + std::to_string(instance));
    }
    require(o, worst <= 1e-9, "MRE deviation " + std::to_string(worst));
    const double secs = seconds_since(start);
    require(o, secs < 5.0, "runtime " + std::to_string(secs) + " s");
    std::ostringstream d;
    d << "max |mre - oracle| " << worst << " mm, " << secs << " s";
    if (o.pass)
        o.detail = d.str();
    return o;
}

Outcome decode_oracle()
{
    Outcome o;
    std::mt19937_64 rng(202);
    std::uniform_int_distribution<int> level(0, 5);
    std::normal_distribution<float> noise;
    int ties = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<float> plane(16 * 16);
        for (auto& v : plane)
            v = trial % 2 ? static_cast<float>(level(rng)) : noise(rng);
        if (trial % 2)
            ++ties;
        std::vector<int> idx(plane.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return plane[a] > plane[b]; });
        for (int k : {1, 5, 20}) {
            double sx = 0, sy = 0;
            for (int i = 0; i < k; ++i) {
                sx += idx[i] % 16;
                sy += idx[i] / 16;
            }
            const Point2 expected{sx / k, sy / k};
            require(o, decode_topk(plane, 16, 16, k) == expected,
                    "plane " + std::to_string(trial) + " K=" + std::to_string(k));
        }
    }
    if (o.pass)
        o.detail = "200 planes (" + std::to_string(ties) + " with ties), K in {1,5,20}, exact";
    return o;
}

Outcome loss_correctness()
{
    Outcome o;
    const std::vector<Point2> pts{{1, 2}};
    const auto t = encode_target(pts, 4, 4, 0.0);
    const double uniform =
        heatmap_loss(torch::zeros({1, 1, 4, 4}), t.heatmaps.unsqueeze(0), t.valid.unsqueeze(0)).item<double>();
    const double dev = std::abs(uniform - std::log(16.0));
    require(o, dev <= 1e-6, "uniform loss deviates by " + std::to_string(dev));

    torch::manual_seed(303);
    std::mt19937_64 rng(303);
    std::uniform_real_distribution<double> u(0.0, 5.99);
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
        const std::vector<Point2> p{{u(rng), u(rng)}, {u(rng), u(rng)}, {u(rng), u(rng)}};
        const auto tt = encode_target(p, 6, 6, 1.0);
        const auto targets = tt.heatmaps.to(torch::kFloat64).unsqueeze(0);
        const auto valid = tt.valid.unsqueeze(0);
        auto logits = torch::randn({1, 3, 6, 6}, torch::kFloat64).requires_grad_(true);
        heatmap_loss(logits, targets, valid).backward();
        const auto grad = logits.grad();
        const auto base = logits.detach();
        const double h = 1e-6;
        for (int64_t i = 0; i < base.numel(); ++i) {
            auto plus = base.clone(), minus = base.clone();
            plus.view(-1)[i] += h;
            minus.view(-1)[i] -= h;
            const double fd =
                (heatmap_loss(plus, targets, valid).item<double>() - heatmap_loss(minus, targets, valid).item<double>()) /
                (2 * h);
            const double an = grad.view(-1)[i].item<double>();
            worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(an), 1e-3));
        }
    }
    require(o, worst <= 1e-4, "finite-difference relative error " + std::to_string(worst));
    if (o.pass) {
        std::ostringstream d;
        d << "|loss - ln16| " << dev << ", max FD rel err " << worst;
        o.detail = d.str();
    }
    return o;
}

Outcome target_encoding()
{
    Outcome o;
    std::mt19937_64 rng(404);
    std::uniform_real_distribution<double> u(10.0, 53.0);
    double worst_sum = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::vector<Point2> pts{{u(rng), u(rng)}};
        for (double sigma : {0.5, 1.0, 2.0}) {
            const auto t = encode_target(pts, 64, 64, sigma);
            worst_sum = std::max(worst_sum, std::abs(t.heatmaps.sum().item<double>() - 1.0));
        }
    }
    require(o, worst_sum <= 1e-4, "interior sum deviates by " + std::to_string(worst_sum));

    std::uniform_real_distribution<double> v(0.0, 7.49);
    for (int trial = 0; trial < 50; ++trial) {
        const std::vector<Point2> pts{{v(rng), v(rng)}};
        const auto t = encode_target(pts, 8, 8, 0.0);
        const auto flat = t.heatmaps.flatten();
        const int64_t expected = round_half_away(pts[0].y) * 8 + round_half_away(pts[0].x);
        require(o, flat.sum().item<float>() == 1.0f && flat[expected].item<float>() == 1.0f,
                "sigma 0 not one-hot");
    }

    double worst_border = 0.0;
    const double sigma = 1.0;
    const int r = static_cast<int>(std::ceil(4 * sigma));
    double z = 0.0;
    for (int y = -r; y <= r; ++y)
        for (int x = -r; x <= r; ++x)
            z += std::exp(-(x * x + y * y) / (2 * sigma * sigma));
    for (const auto& c : std::vector<std::array<int, 2>>{{0, 0}, {9, 3}, {2, 9}, {9, 9}}) {
        const std::vector<Point2> pts{{static_cast<double>(c[0]), static_cast<double>(c[1])}};
        const auto t = encode_target(pts, 10, 10, sigma);
        const auto a = t.heatmaps.accessor<float, 3>();
        for (int y = 0; y < 10; ++y)
            for (int x = 0; x < 10; ++x) {
                const int dx = x - c[0], dy = y - c[1];
                const double e = (std::abs(dx) > r || std::abs(dy) > r)
                                     ? 0.0
                                     : std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) / z;
                worst_border = std::max(worst_border, std::abs(a[0][y][x] - e));
            }
    }
    require(o, worst_border <= 1e-6, "border deviates by " + std::to_string(worst_border));
    if (o.pass) {
        std::ostringstream d;
        d << "max |sum - 1| " << worst_sum << ", one-hot exact, max border err " << worst_border;
        o.detail = d.str();
    }
    return o;
}

Outcome geometry_round_trip()
{
    Outcome o;
    std::mt19937_64 rng(505);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const cv::Mat image(1200, 1000, CV_8UC1, cv::Scalar(0));
    double worst = 0.0, min_scale = 1e9;
    for (int trial = 0; trial < 500; ++trial) {
        const double x0 = u(rng) * 700, y0 = u(rng) * 900;
        const double x1 = x0 + 20 + u(rng) * (1000 - x0 - 20), y1 = y0 + 20 + u(rng) * (1200 - y0 - 20);
        const auto crop = crop_box(image, {x0, y0, x1, y1});
        const double scale = 0.1 + u(rng) * 2.9;
        const int target = std::max(1, static_cast<int>(std::lround(crop.pixels.rows * scale)));
        const auto region = resize_to_height(crop, target);
        min_scale = std::min(min_scale, region.transform.scale);
        for (int k = 0; k < 10; ++k) {
            const Point2 p{x0 + u(rng) * (x1 - x0), y0 + u(rng) * (y1 - y0)};
            worst = std::max(worst, distance(remap_coords(forward_map(p, region.transform), region.transform), p));
        }
    }
    require(o, worst < 0.5, "round-trip error " + std::to_string(worst) + " px");
    if (o.pass) {
        std::ostringstream d;
        d << "500 boxes, min scale " << min_scale << ", max error " << worst << " px";
        o.detail = d.str();
    }
    return o;
}

Outcome stem_equivalence()
{
    Outcome o;
    torch::manual_seed(606);
    const auto dir = synth::scratch_dir("acceptance_stem");
    ConvNeXtEncoder rgb(3, encoder_shape(Variant::nano), 0.0);
    {
        torch::serialize::OutputArchive archive;
        for (const auto& p : rgb->named_parameters())
            archive.write(p.key(), p.value());
        archive.save_to((dir / "nano.pt").string());
    }
    ModelSpec spec;
    spec.pretrained_weights_ref = (dir / "nano.pt").string();
    auto model = build_model(spec);
    torch::NoGradGuard g;
    const auto gray = torch::rand({2, 1, 96, 64}) * 4 - 2;
    const auto a = rgb->stem_conv(gray.expand({2, 3, 96, 64}));
    const auto b = model->encoder->stem_conv(gray);
    const double dev = (a - b).abs().max().item<double>();
    require(o, dev <= 1e-5, "max deviation " + std::to_string(dev));
    if (o.pass)
        o.detail = "max deviation " + std::to_string(dev);
    return o;
}

Outcome shape_contract()
{
    Outcome o;
    const auto start = Clock::now();
    torch::manual_seed(707);
    std::vector<std::array<int64_t, 2>> shapes{{256, 256}, {256, 800}, {800, 256}, {800, 800}, {800, 613}};
    for (auto v : {Variant::nano, Variant::tiny}) {
        ModelSpec spec;
        spec.variant = v;
        auto model = build_model(spec);
        model->eval();
        torch::NoGradGuard g;
        for (const auto& s : shapes) {
            const auto out = forward(model, torch::randn({1, 1, s[0], s[1]}));
            const std::vector<int64_t> expected{1, kNumLandmarks, s[0], s[1]};
            require(o, out.sizes() == expected,
                    to_string(v) + " " + std::to_string(s[0]) + "x" + std::to_string(s[1]) + " wrong shape");
        }
    }
    const double secs = seconds_since(start);
    require(o, secs < 60.0, "runtime " + std::to_string(secs) + " s");
    if (o.pass)
        o.detail = "nano+tiny at 256/800 (and 800x613), " + std::to_string(secs) + " s";
    return o;
}

Outcome overfit()
{
    Outcome o;
    const auto start = Clock::now();
    const auto dir = synth::scratch_dir("acceptance_overfit");
    const auto records = synth::make_synthetic_dataset(dir / "data", 4, 320, 288, 7, 1.0);
    RunConfig config;
    config.model.encoder_drop_path = 0;
    config.model.decoder_drop_path = 0;
    config.model.residual_dropout2d = 0;
    config.augmentation.enabled = false;
    config.accumulation_schedule = {{0, 1}};
    config.optimizer.lr = 1e-3;
    config.optimizer.weight_decay = 0.0;
    config.lr_decay.epochs = {};
    config.max_epochs = 200;
    config.early_stop_patience = 200;
    config.crop_height = 256;
    TrainOptions options;
    options.out_dir = dir / "run";
    options.stop_below_mre_mm = 2.0;
    options.log = [](const std::string& m) { std::cerr << "  " << m << '\n'; };
    const auto result = fit_landmarks(config, records, records, options);
    const double secs = seconds_since(start);
    // Spacing 1.0 makes millimetres equal pixels.
    const double best = result.state.best_val_mre_mm;
    require(o, best < 2.0, "best training-set MRE " + std::to_string(best) + " px");
    require(o, result.state.epochs_completed <= 200, "more than 200 epochs");
    require(o, secs <= 20 * 60, "runtime " + std::to_string(secs) + " s");
    std::ostringstream d;
    d << "MRE " << best << " px after " << result.state.epochs_completed << " epochs, " << secs << " s";
    if (o.pass)
        o.detail = d.str();
    else
        o.detail += " (" + d.str() + ")";
    return o;
}

Outcome artefact_locality()
{
    Outcome o;
    Rng rng(808);
    AugmentationConfig config;
    const auto image = [] {
        cv::Mat m(240, 200, CV_8UC1);
        cv::randu(m, 0, 256);
        return m;
    }();
    cv::Mat reference;
    image.convertTo(reference, CV_32F);
    const std::set<int> allowed{25, 50, 75, 100, 125};
    int fired = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto r = simulate_xray_artefact(image, config, rng);
        cv::Mat changed = r.image != reference;
        if (!r.band) {
            require(o, cv::countNonZero(changed) == 0, "image changed without a band");
            continue;
        }
        ++fired;
        require(o, allowed.count(r.band->size) == 1, "band size " + std::to_string(r.band->size));
        changed(r.band->rect(image.size())).setTo(0);
        require(o, cv::countNonZero(changed) == 0, "pixels changed outside the band at trial " + std::to_string(trial));
    }
    config.artefact_rate = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto r = simulate_xray_artefact(image, config, rng);
        require(o, !r.band && cv::norm(r.image, reference, cv::NORM_INF) == 0.0, "rate 0 changed the image");
    }
    if (o.pass)
        o.detail = "1000 trials (" + std::to_string(fired) + " bands), rate 0 x1000 unchanged";
    return o;
}

Outcome schedule_semantics()
{
    Outcome o;
    RunConfig config;
    const TrainingSchedule schedule(config);
    std::map<int, double> lrs;
    EpochHooks hooks;
    hooks.train_epoch = [&](int epoch, double lr, int) {
        lrs[epoch] = lr;
        return 1.0;
    };
    hooks.validate = [](int) { return 5.0; };
    hooks.on_improvement = [](const TrainState&) {};
    hooks.on_epoch_end = [](const TrainState&) {};
    const auto full = run_schedule(schedule, 75, 100, hooks);
    const std::vector<std::pair<int, double>> expected{{34, 2e-4}, {35, 5e-5}, {45, 1.25e-5}};
    for (const auto& [epoch, lr] : expected)
        require(o, lrs.count(epoch) && std::abs(lrs[epoch] - lr) <= 1e-15,
                "lr at epoch " + std::to_string(epoch) + " is " + std::to_string(lrs[epoch]));
    require(o, full.epochs_completed == 75, "did not run all epochs");

    // Improvements at epochs 0 and 1 only: stop fires at epoch 1 + 10.
    hooks.validate = [](int epoch) { return epoch == 0 ? 5.0 : epoch == 1 ? 4.0 : 4.5; };
    const auto stopped = run_schedule(schedule, 75, 10, hooks);
    require(o, stopped.early_stopped && stopped.epoch == 11 && stopped.best_epoch == 1,
            "early stop at epoch " + std::to_string(stopped.epoch));
    if (o.pass)
        o.detail = "lr(34,35,45) = 2e-4, 5e-5, 1.25e-5; stop at epoch 11 (best 1, patience 10)";
    return o;
}

Outcome ensemble_compositionality()
{
    Outcome o;
    const auto dir = synth::scratch_dir("acceptance_ensemble");
    const auto records = synth::make_synthetic_dataset(dir, 3, 200, 180, 9);
    RunConfig config;
    config.crop_height = 128;
    std::vector<HeatmapNet> models;
    for (int i = 0; i < 4; ++i) {
        torch::manual_seed(900 + i);
        models.push_back(build_model(config.model));
    }
    const auto joint = predict(config, models, records, nullptr);
    double worst = 0.0;
    std::vector<std::vector<std::vector<Point2>>> singles(records.size());
    for (auto& m : models) {
        std::vector<HeatmapNet> one{m};
        const auto out = predict(config, one, records, nullptr);
        for (std::size_t i = 0; i < out.bundles.size(); ++i)
            singles[i].push_back(out.bundles[i].ensembled_coords);
    }
    require(o, joint.bundles.size() == records.size(), "missing predictions");
    for (std::size_t i = 0; i < joint.bundles.size(); ++i)
        for (std::size_t l = 0; l < kNumLandmarks; ++l) {
            double sx = 0, sy = 0;
            for (const auto& s : singles[i]) {
                sx += s[l].x;
                sy += s[l].y;
            }
            const Point2 mean{sx / 4, sy / 4};
            worst = std::max(worst, distance(mean, joint.bundles[i].ensembled_coords[l]));
        }
    require(o, worst <= 1e-9, "deviation " + std::to_string(worst) + " px");
    if (o.pass) {
        std::ostringstream d;
        d << "max deviation " << worst << " px over " << records.size() << " images";
        o.detail = d.str();
    }
    return o;
}

}  // namespace

int main(int argc, char** argv)
{
    torch::set_num_threads(1);
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"metric-oracle", metric_oracle},
        {"decode-oracle", decode_oracle},
        {"loss-correctness", loss_correctness},
        {"target-encoding", target_encoding},
        {"geometry-round-trip", geometry_round_trip},
        {"stem-equivalence", stem_equivalence},
        {"shape-contract", shape_contract},
        {"overfit-smoke", overfit},
        {"artefact-locality", artefact_locality},
        {"schedule-semantics", schedule_semantics},
        {"ensemble-compositionality", ensemble_compositionality},
    };
    int failures = 0;
    for (const auto& [name, run] : criteria) {
        if (argc > 1 && std::none_of(argv + 1, argv + argc, [&](const char* a) { return name.find(a) != std::string::npos; }))
            continue;
        Outcome outcome;
        try {
            outcome = run();
        } catch (const std::exception& e) {
            outcome = {false, std::string("exception: ") + e.what()};
        }
        std::cout << (outcome.pass ? "PASS " : "FAIL ") << name << ": " << outcome.detail << std::endl;
        failures += outcome.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
