#include "cephland/dataset_io.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

namespace cephland {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s)
{
    const auto begin = s.find_first_not_of(" \t\r\n");
    if (begin == std::string_view::npos)
        return {};
    const auto end = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(begin, end - begin + 1));
}

std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> fields;
    std::string field;
    std::istringstream stream(line);
    while (std::getline(stream, field, ','))
        fields.push_back(trim(field));
    if (!line.empty() && line.back() == ',')
        fields.emplace_back();
    return fields;
}

double parse_double(const std::string& text, const std::string& context)
{
    double value = 0.0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    if (!text.empty() && *first == '+')
        ++first;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc{} || ptr != last)
        throw Error("invalid number '" + text + "' in " + context);
    return value;
}

}  // namespace

std::string format_decimal(double value)
{
    char buffer[64];
    auto [ptr, ec] = std::to_chars(buffer, buffer + sizeof(buffer), value);
    if (ec != std::errc{})
        throw Error("cannot format number");
    return std::string(buffer, ptr);
}

LandmarkTable read_landmark_csv(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw Error("cannot open landmark file " + file.string());

    std::string line;
    if (!std::getline(in, line))
        throw Error("landmark file has no header: " + file.string());
    const auto header = split_csv_line(line);
    if (header.empty() || header[0] != "image_id")
        throw Error("landmark file header must start with image_id: " + file.string());

    LandmarkTable table;
    table.has_spacing = header.size() > 1 && header[1] == "spacing";
    const std::size_t first_coord = table.has_spacing ? 2 : 1;

    std::set<std::string> seen;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty())
            continue;
        const auto fields = split_csv_line(line);
        const std::string context = file.filename().string() + ":" + std::to_string(line_no);
        if (fields.size() < first_coord)
            throw Error("truncated row in " + context);

        LandmarkRow row;
        row.image_id = fields[0];
        if (row.image_id.empty())
            throw Error("empty image_id in " + context);
        if (!seen.insert(row.image_id).second)
            throw Error("duplicate image_id " + row.image_id + " in " + context);
        if (table.has_spacing && !fields[1].empty())
            row.spacing = parse_double(fields[1], context);

        const std::size_t n_values = fields.size() - first_coord;
        if (n_values % 2 != 0 || n_values / 2 != static_cast<std::size_t>(kNumLandmarks))
            throw Error("landmark count mismatch for " + row.image_id + ": expected " + std::to_string(kNumLandmarks) +
                        " pairs, got " + std::to_string(n_values / 2) + (n_values % 2 ? ".5" : ""));
        row.points.reserve(static_cast<std::size_t>(kNumLandmarks));
        for (std::size_t i = first_coord; i + 1 < fields.size(); i += 2)
            row.points.push_back({parse_double(fields[i], context), parse_double(fields[i + 1], context)});
        table.rows.push_back(std::move(row));
    }
    return table;
}

namespace {

void write_header(std::ostream& out, bool with_spacing)
{
    out << "image_id";
    if (with_spacing)
        out << ",spacing";
    for (int i = 1; i <= kNumLandmarks; ++i)
        out << ",x" << i << ",y" << i;
    out << '\n';
}

void write_points(std::ostream& out, std::span<const Point2> points)
{
    for (const auto& p : points)
        out << ',' << format_decimal(p.x) << ',' << format_decimal(p.y);
    out << '\n';
}

}  // namespace

void write_annotation_csv(const fs::path& file, std::span<const ImageRecord> records)
{
    std::ofstream out(file);
    if (!out)
        throw Error("cannot write " + file.string());
    write_header(out, true);
    for (const auto& record : records) {
        if (!record.landmarks)
            throw Error("record " + record.image_id + " has no landmarks to write");
        out << record.image_id << ',' << format_decimal(record.spacing);
        write_points(out, record.landmarks->points());
    }
}

void write_submission_csv(const fs::path& file, std::span<const LandmarkRow> rows)
{
    std::ofstream out(file);
    if (!out)
        throw Error("cannot write " + file.string());
    write_header(out, false);
    for (const auto& row : rows) {
        if (row.points.size() != static_cast<std::size_t>(kNumLandmarks))
            throw Error("landmark count mismatch for " + row.image_id);
        out << row.image_id;
        write_points(out, row.points);
    }
}

double spacing_from_ruler(const LandmarkSet& landmarks, double ruler_length_mm)
{
    const auto [a, b] = ruler_landmarks();
    const double length_px = distance(landmarks[static_cast<std::size_t>(a)], landmarks[static_cast<std::size_t>(b)]);
    if (!(length_px > 0.0) || !(ruler_length_mm > 0.0))
        throw Error("cannot derive spacing from a degenerate ruler");
    return ruler_length_mm / length_px;
}

std::vector<ImageRecord> load_dataset(const fs::path& root, const fs::path& annotation_file,
                                      const DatasetOptions& options)
{
    const auto table = read_landmark_csv(annotation_file);
    if (!table.has_spacing && !options.ruler_length_mm)
        throw Error("annotation file lacks a spacing column and no ruler length is configured: " +
                    annotation_file.string());

    std::vector<ImageRecord> records;
    records.reserve(table.rows.size());
    for (const auto& row : table.rows) {
        ImageRecord record;
        record.image_id = row.image_id;
        record.image_path = root / (row.image_id + options.image_extension);
        if (!fs::is_regular_file(record.image_path))
            throw Error("missing image file for id " + row.image_id + ": " + record.image_path.string());
        record.landmarks = LandmarkSet(row.points);
        if (row.spacing) {
            record.spacing = *row.spacing;
        } else if (options.ruler_length_mm) {
            record.spacing = spacing_from_ruler(*record.landmarks, *options.ruler_length_mm);
        } else {
            throw Error("missing spacing for " + row.image_id + " and no ruler length configured");
        }
        if (!(record.spacing > 0.0))
            throw Error("non-positive spacing for " + row.image_id);
        records.push_back(std::move(record));
    }
    return records;
}

std::vector<ImageRecord> list_images(const fs::path& root, const DatasetOptions& options, double default_spacing)
{
    if (!(default_spacing > 0.0))
        throw Error("non-positive default spacing");
    std::vector<ImageRecord> records;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (!entry.is_regular_file() || entry.path().extension() != options.image_extension)
            continue;
        ImageRecord record;
        record.image_id = entry.path().stem().string();
        record.image_path = entry.path();
        record.spacing = default_spacing;
        records.push_back(std::move(record));
    }
    std::sort(records.begin(), records.end(),
              [](const ImageRecord& a, const ImageRecord& b) { return a.image_id < b.image_id; });
    return records;
}

cv::Mat read_grayscale(const fs::path& file)
{
    cv::Mat raw = cv::imread(file.string(), cv::IMREAD_UNCHANGED);
    if (raw.empty())
        throw Error("unreadable image " + file.string());
    if (raw.depth() != CV_8U) {
        double max_value = 0.0;
        cv::minMaxLoc(raw.reshape(1), nullptr, &max_value);
        raw.convertTo(raw, CV_8U, max_value > 0.0 ? 255.0 / max_value : 1.0);
    }
    if (raw.channels() == 1)
        return raw;

    std::vector<cv::Mat> planes;
    cv::split(raw, planes);
    const int colour = std::min(3, raw.channels());  // alpha is ignored
    cv::Mat sum = cv::Mat::zeros(raw.size(), CV_32F);
    for (int c = 0; c < colour; ++c)
        cv::add(sum, planes[static_cast<std::size_t>(c)], sum, cv::noArray(), CV_32F);
    cv::Mat gray;
    sum.convertTo(gray, CV_8U, 1.0 / colour);
    return gray;
}

ImageRecord load_pixels(const ImageRecord& record)
{
    ImageRecord out = record;
    if (!out.loaded())
        out.pixels = read_grayscale(record.image_path);
    out.height = out.pixels.rows;
    out.width = out.pixels.cols;
    if (out.height < 1 || out.width < 1)
        throw Error("empty image for id " + record.image_id);
    if (out.landmarks) {
        for (const auto& p : out.landmarks->points()) {
            if (p.x >= out.width || p.y >= out.height)
                throw Error("landmark outside image bounds for id " + record.image_id);
        }
    }
    return out;
}

std::vector<std::string> FoldAssignment::members(int fold) const
{
    std::vector<std::string> out;
    for (const auto& [id, f] : assignment) {
        if (f == fold)
            out.push_back(id);
    }
    return out;
}

std::vector<std::string> FoldAssignment::complement(int fold) const
{
    std::vector<std::string> out;
    for (const auto& [id, f] : assignment) {
        if (f != fold)
            out.push_back(id);
    }
    return out;
}

std::vector<std::size_t> FoldAssignment::fold_sizes() const
{
    std::vector<std::size_t> sizes(static_cast<std::size_t>(n_folds), 0);
    for (const auto& [id, f] : assignment)
        ++sizes[static_cast<std::size_t>(f)];
    return sizes;
}

FoldAssignment split_folds(std::span<const std::string> image_ids, int n_folds, std::uint64_t seed)
{
    if (n_folds < 2)
        throw Error("n_folds must be >= 2");
    if (image_ids.empty())
        throw Error("cannot split an empty id list");

    const std::set<std::string> unique(image_ids.begin(), image_ids.end());
    if (unique.size() != image_ids.size())
        throw Error("duplicate image ids in fold split");
    std::vector<std::string> order(unique.begin(), unique.end());

    // Explicit Fisher-Yates: std::shuffle's draw sequence is library-specific.
    std::mt19937_64 rng(seed);
    for (std::size_t i = order.size() - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(rng() % (i + 1));
        std::swap(order[i], order[j]);
    }

    FoldAssignment folds;
    folds.n_folds = n_folds;
    folds.seed = seed;
    for (std::size_t i = 0; i < order.size(); ++i)
        folds.assignment[order[i]] = static_cast<int>(i % static_cast<std::size_t>(n_folds));
    return folds;
}

}  // namespace cephland
