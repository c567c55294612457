#include "cephland/decode_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "cephland/dataset_io.hpp"

namespace cephland {

Point2 decode_topk(std::span<const float> plane, int height, int width, int k, TopKWeighting weighting)
{
    const auto n = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    if (height < 1 || width < 1 || plane.size() != n)
        throw Error("heatmap plane size does not match height x width");
    if (k < 1 || static_cast<std::size_t>(k) > n)
        throw Error("top-k requires 1 <= K <= H*W");
    for (float v : plane) {
        if (!std::isfinite(v))
            throw Error("non-finite heatmap value");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto hotter = [&](std::size_t a, std::size_t b) {
        return plane[a] != plane[b] ? plane[a] > plane[b] : a < b;
    };
    const auto kth = order.begin() + k;
    std::nth_element(order.begin(), kth - 1, order.end(), hotter);

    double sx = 0.0;
    double sy = 0.0;
    double weight_sum = 0.0;
    if (weighting == TopKWeighting::uniform) {
        for (auto it = order.begin(); it != kth; ++it) {
            sx += static_cast<double>(*it % static_cast<std::size_t>(width));
            sy += static_cast<double>(*it / static_cast<std::size_t>(width));
        }
        weight_sum = k;
    } else {
        const float top = *std::max_element(plane.begin(), plane.end());
        for (auto it = order.begin(); it != kth; ++it) {
            const double w = std::exp(static_cast<double>(plane[*it]) - top);
            sx += w * static_cast<double>(*it % static_cast<std::size_t>(width));
            sy += w * static_cast<double>(*it / static_cast<std::size_t>(width));
            weight_sum += w;
        }
    }
    return {sx / weight_sum, sy / weight_sum};
}

std::vector<Point2> ensemble_coords(std::span<const std::vector<Point2>> coords_per_model)
{
    if (coords_per_model.empty())
        throw Error("ensemble needs at least one model");
    const std::size_t n = coords_per_model.front().size();
    for (const auto& model : coords_per_model) {
        if (model.size() != n)
            throw Error("ensemble members disagree on landmark count");
    }
    std::vector<Point2> out(n);
    const auto m = static_cast<double>(coords_per_model.size());
    for (std::size_t l = 0; l < n; ++l) {
        double sx = 0.0;
        double sy = 0.0;
        for (const auto& model : coords_per_model) {
            sx += model[l].x;
            sy += model[l].y;
        }
        out[l] = {sx / m, sy / m};
    }
    return out;
}

namespace {

void check_samples(std::span<const EvalSample> samples)
{
    if (samples.empty())
        throw Error("no samples to evaluate");
    for (const auto& s : samples) {
        if (s.predicted.size() != s.truth.size() || s.truth.empty())
            throw Error("prediction/ground-truth count mismatch for " + s.image_id);
        if (!(s.spacing > 0.0))
            throw Error("non-positive spacing for " + s.image_id);
    }
}

}  // namespace

double mre(std::span<const EvalSample> samples)
{
    return evaluate(samples).mre_mm;
}

double sdr(std::span<const EvalSample> samples, double threshold_mm)
{
    return evaluate(samples, threshold_mm).sdr_2mm_pct;
}

EvalReport evaluate(std::span<const EvalSample> samples, double threshold_mm)
{
    check_samples(samples);
    const std::size_t n_landmarks = samples.front().truth.size();

    EvalReport report;
    report.n_images = samples.size();
    report.per_landmark_mre.assign(n_landmarks, 0.0);
    std::vector<std::size_t> per_landmark_count(n_landmarks, 0);

    double total = 0.0;
    std::size_t count = 0;
    std::size_t hits = 0;
    for (const auto& s : samples) {
        double image_total = 0.0;
        for (std::size_t l = 0; l < s.truth.size(); ++l) {
            const double err = to_mm(distance(s.predicted[l], s.truth[l]), s.spacing);
            image_total += err;
            if (err <= threshold_mm)
                ++hits;
            if (l < n_landmarks) {
                report.per_landmark_mre[l] += err;
                ++per_landmark_count[l];
            }
        }
        total += image_total;
        count += s.truth.size();
        report.image_ids.push_back(s.image_id);
        report.per_image_mre.push_back(image_total / static_cast<double>(s.truth.size()));
    }
    for (std::size_t l = 0; l < n_landmarks; ++l)
        report.per_landmark_mre[l] /= static_cast<double>(std::max<std::size_t>(1, per_landmark_count[l]));
    report.mre_mm = total / static_cast<double>(count);
    report.sdr_2mm_pct = 100.0 * static_cast<double>(hits) / static_cast<double>(count);
    return report;
}

nlohmann::json to_json(const EvalReport& report)
{
    nlohmann::json per_image = nlohmann::json::object();
    for (std::size_t i = 0; i < report.image_ids.size(); ++i)
        per_image[report.image_ids[i]] = report.per_image_mre[i];
    return {{"mre_mm", report.mre_mm},
            {"sdr_2mm_pct", report.sdr_2mm_pct},
            {"n_images", report.n_images},
            {"per_landmark_mre", report.per_landmark_mre},
            {"per_image_mre", per_image}};
}

void write_report_json(const std::filesystem::path& file, const EvalReport& report)
{
    std::ofstream out(file);
    if (!out)
        throw Error("cannot write " + file.string());
    out << to_json(report).dump(2) << '\n';
}

void append_summary_csv(const std::filesystem::path& file, const std::string& run, const EvalReport& report)
{
    const bool fresh = !std::filesystem::exists(file) || std::filesystem::file_size(file) == 0;
    std::ofstream out(file, std::ios::app);
    if (!out)
        throw Error("cannot write " + file.string());
    if (fresh)
        out << "run,n_images,mre_mm,sdr_2mm_pct\n";
    out << run << ',' << report.n_images << ',' << format_decimal(report.mre_mm) << ','
        << format_decimal(report.sdr_2mm_pct) << '\n';
}

}  // namespace cephland
