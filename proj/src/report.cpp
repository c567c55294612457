#include "cephland/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace cephland {

namespace fs = std::filesystem;

namespace {

const cv::Scalar kBlack(0, 0, 0);
const cv::Scalar kGrey(200, 200, 200);
const cv::Scalar kBlue(180, 90, 20);
constexpr int kFont = cv::FONT_HERSHEY_SIMPLEX;

std::optional<double> as_number(const std::string& s)
{
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v))
        return std::nullopt;
    return v;
}

std::string tick_label(double v)
{
    std::ostringstream ss;
    ss.precision(3);
    ss << v;
    return ss.str();
}

void put_text(cv::Mat& img, const std::string& text, cv::Point origin, double scale = 0.45, int align = 0)
{
    int baseline = 0;
    const auto size = cv::getTextSize(text, kFont, scale, 1, &baseline);
    if (align == 1)
        origin.x -= size.width / 2;
    else if (align == 2)
        origin.x -= size.width;
    cv::putText(img, text, origin, kFont, scale, kBlack, 1, cv::LINE_AA);
}

void write_png(const fs::path& png, const cv::Mat& img)
{
    if (png.has_parent_path())
        fs::create_directories(png.parent_path());
    if (!cv::imwrite(png.string(), img))
        throw Error("cannot write image " + png.string());
}

}  // namespace

void plot_sweep(const SweepResult& sweep, const fs::path& png, const LogFn& log)
{
    if (sweep.points.empty())
        throw Error("sweep '" + sweep.parameter + "' has no points");

    std::vector<std::optional<double>> numeric;
    bool all_numeric = true;
    for (const auto& p : sweep.points) {
        numeric.push_back(as_number(p.x));
        all_numeric = all_numeric && numeric.back().has_value();
    }
    std::vector<double> xs;
    for (std::size_t i = 0; i < sweep.points.size(); ++i)
        xs.push_back(all_numeric ? *numeric[i] : static_cast<double>(i));

    std::vector<std::string> missing;
    double y_min = std::numeric_limits<double>::infinity();
    double y_max = -std::numeric_limits<double>::infinity();
    for (const auto& p : sweep.points) {
        if (!p.mre_mm || !std::isfinite(*p.mre_mm)) {
            missing.push_back(p.x);
            continue;
        }
        y_min = std::min(y_min, *p.mre_mm);
        y_max = std::max(y_max, *p.mre_mm);
    }
    if (!missing.empty()) {
        std::string list;
        for (const auto& m : missing)
            list += (list.empty() ? "" : ", ") + m;
        log("warning: sweep '" + sweep.parameter + "' is missing points: " + list);
    }
    if (!std::isfinite(y_min)) {
        y_min = 0.0;
        y_max = 1.0;
    }
    if (y_max - y_min < 1e-9) {
        y_min -= 0.5;
        y_max += 0.5;
    }
    const double margin = 0.08 * (y_max - y_min);
    y_min -= margin;
    y_max += margin;

    double x_min = *std::min_element(xs.begin(), xs.end());
    double x_max = *std::max_element(xs.begin(), xs.end());
    if (x_max - x_min < 1e-12) {
        x_min -= 0.5;
        x_max += 0.5;
    }

    const int width = 720, height = 480;
    const int left = 80, right = 30, top = 40, bottom = 70;
    cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
    const int pw = width - left - right;
    const int ph = height - top - bottom;
    auto to_px = [&](double x, double y) {
        return cv::Point(left + static_cast<int>(std::lround((x - x_min) / (x_max - x_min) * pw)),
                         top + static_cast<int>(std::lround((y_max - y) / (y_max - y_min) * ph)));
    };

    for (int i = 0; i <= 5; ++i) {
        const double y = y_min + (y_max - y_min) * i / 5.0;
        const auto p = to_px(x_min, y);
        cv::line(img, {left, p.y}, {left + pw, p.y}, kGrey, 1);
        put_text(img, tick_label(y), {left - 8, p.y + 5}, 0.4, 2);
    }
    const std::size_t stride = std::max<std::size_t>(1, sweep.points.size() / 12);
    for (std::size_t i = 0; i < sweep.points.size(); i += stride) {
        const auto p = to_px(xs[i], y_min);
        cv::line(img, {p.x, top + ph}, {p.x, top + ph + 5}, kBlack, 1);
        put_text(img, sweep.points[i].x, {p.x, top + ph + 20}, 0.4, 1);
    }
    cv::rectangle(img, {left, top}, {left + pw, top + ph}, kBlack, 1);

    std::optional<cv::Point> prev;
    for (std::size_t i = 0; i < sweep.points.size(); ++i) {
        const auto& p = sweep.points[i];
        if (!p.mre_mm || !std::isfinite(*p.mre_mm)) {
            prev.reset();
            continue;
        }
        const auto pt = to_px(xs[i], *p.mre_mm);
        if (prev)
            cv::line(img, *prev, pt, kBlue, 2, cv::LINE_AA);
        cv::circle(img, pt, 4, kBlue, cv::FILLED, cv::LINE_AA);
        prev = pt;
    }

    put_text(img, sweep.parameter, {left + pw / 2, height - 20}, 0.55, 1);
    put_text(img, "MRE (mm)", {10, top - 15}, 0.5);
    write_png(png, img);
}

CsvTable read_csv_table(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw Error("cannot open " + file.string());
    auto split = [](std::string line) {
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        std::vector<std::string> out;
        std::string field;
        std::istringstream ss(line);
        while (std::getline(ss, field, ','))
            out.push_back(field);
        if (!line.empty() && line.back() == ',')
            out.emplace_back();
        return out;
    };
    CsvTable table;
    std::string line;
    if (!std::getline(in, line))
        throw Error("empty table " + file.string());
    table.header = split(line);
    while (std::getline(in, line))
        if (!line.empty())
            table.rows.push_back(split(line));
    return table;
}

void render_table(const CsvTable& table, const fs::path& png)
{
    if (table.header.empty())
        throw Error("table has no columns");
    auto cell_text = [](const std::string& s) {
        if (auto v = as_number(s)) {
            std::ostringstream ss;
            ss.setf(std::ios::fixed);
            ss.precision(3);
            ss << *v;
            return ss.str();
        }
        return s;
    };
    const std::size_t cols = table.header.size();
    std::vector<int> widths(cols, 60);
    auto measure = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < std::min(cols, row.size()); ++c) {
            int baseline = 0;
            widths[c] = std::max(widths[c], cv::getTextSize(cell_text(row[c]), kFont, 0.5, 1, &baseline).width + 20);
        }
    };
    measure(table.header);
    for (const auto& r : table.rows)
        measure(r);
    const int row_h = 32;
    const int total_w = std::accumulate(widths.begin(), widths.end(), 0) + 1;
    const int total_h = row_h * static_cast<int>(table.rows.size() + 1) + 1;
    cv::Mat img(total_h, total_w, CV_8UC3, cv::Scalar(255, 255, 255));
    cv::rectangle(img, {0, 0}, {total_w - 1, row_h}, cv::Scalar(235, 235, 235), cv::FILLED);
    auto draw_row = [&](const std::vector<std::string>& row, int r) {
        int x = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            cv::rectangle(img, {x, r * row_h}, {x + widths[c], (r + 1) * row_h}, kBlack, 1);
            if (c < row.size())
                put_text(img, cell_text(row[c]), {x + 10, r * row_h + 21}, 0.5);
            x += widths[c];
        }
    };
    draw_row(table.header, 0);
    for (std::size_t r = 0; r < table.rows.size(); ++r)
        draw_row(table.rows[r], static_cast<int>(r + 1));
    write_png(png, img);
}

std::vector<fs::path> write_report(const fs::path& input_dir, const fs::path& out_dir, const LogFn& log)
{
    if (!fs::is_directory(input_dir))
        throw Error("report input is not a directory: " + input_dir.string());
    fs::create_directories(out_dir);
    std::vector<fs::path> inputs;
    for (const auto& entry : fs::directory_iterator(input_dir))
        if (entry.is_regular_file() && entry.path().extension() == ".csv")
            inputs.push_back(entry.path());
    std::sort(inputs.begin(), inputs.end());

    std::vector<fs::path> written;
    for (const auto& file : inputs) {
        const auto stem = file.stem().string();
        const bool is_sweep = stem.rfind("sweep_", 0) == 0;
        const bool is_table = stem == "fold_table";
        if (!is_sweep && !is_table)
            continue;
        const auto png = out_dir / (stem + ".png");
        if (is_sweep)
            plot_sweep(read_sweep_csv(file), png, log);
        else
            render_table(read_csv_table(file), png);
        written.push_back(png);
        const auto csv = out_dir / file.filename();
        if (fs::absolute(csv) != fs::absolute(file))
            fs::copy_file(file, csv, fs::copy_options::overwrite_existing);
        written.push_back(csv);
    }
    if (written.empty())
        throw Error("no sweep_*.csv or fold_table.csv found in " + input_dir.string());
    return written;
}

}  // namespace cephland
