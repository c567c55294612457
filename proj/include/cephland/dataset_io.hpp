#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <opencv2/core.hpp>

#include "cephland/landmarks.hpp"

namespace cephland {

/// One annotated (or unannotated) radiograph. Pixels are loaded on demand
/// through load_pixels(); everything else is known after load_dataset().
struct ImageRecord {
    std::string image_id;
    std::filesystem::path image_path;
    double spacing{0.0};  ///< mm per pixel
    std::optional<LandmarkSet> landmarks;
    cv::Mat pixels;  ///< CV_8UC1, empty until loaded
    int height{0};
    int width{0};

    bool loaded() const noexcept { return !pixels.empty(); }
};

struct DatasetOptions {
    std::string image_extension{".bmp"};
    /// Physical ruler length; enables spacing derivation from the two ruler
    /// landmarks for rows whose spacing field is empty.
    std::optional<double> ruler_length_mm;
};

/// Row of a landmark table. Annotation files carry a spacing column,
/// submission files do not.
struct LandmarkRow {
    std::string image_id;
    std::optional<double> spacing;
    std::vector<Point2> points;
};

struct LandmarkTable {
    bool has_spacing{false};
    std::vector<LandmarkRow> rows;
};

/// Parses `image_id[,spacing],x1,y1,...,x53,y53` with a mandatory header.
LandmarkTable read_landmark_csv(const std::filesystem::path& file);

/// Writes the annotation schema (with spacing).
void write_annotation_csv(const std::filesystem::path& file, std::span<const ImageRecord> records);

/// Writes the submission schema (no spacing).
void write_submission_csv(const std::filesystem::path& file, std::span<const LandmarkRow> rows);

/// Shortest decimal representation that parses back to the same double.
std::string format_decimal(double value);

std::vector<ImageRecord> load_dataset(const std::filesystem::path& root, const std::filesystem::path& annotation_file,
                                      const DatasetOptions& options = {});

/// Records for every image in `root` with the configured extension, without
/// landmarks (inference input). Spacing defaults to `default_spacing`.
std::vector<ImageRecord> list_images(const std::filesystem::path& root, const DatasetOptions& options = {},
                                     double default_spacing = 0.1);

/// Reads an 8-bit raster as one channel; colour sources are channel-averaged.
cv::Mat read_grayscale(const std::filesystem::path& file);

/// Returns a copy of `record` with pixels, height and width filled in.
/// Landmarks must lie inside the image.
ImageRecord load_pixels(const ImageRecord& record);

/// Spacing implied by the ruler landmarks and a known ruler length.
double spacing_from_ruler(const LandmarkSet& landmarks, double ruler_length_mm);

struct FoldAssignment {
    int n_folds{4};
    std::uint64_t seed{0};
    std::map<std::string, int> assignment;

    std::vector<std::string> members(int fold) const;
    std::vector<std::string> complement(int fold) const;
    std::vector<std::size_t> fold_sizes() const;
};

FoldAssignment split_folds(std::span<const std::string> image_ids, int n_folds, std::uint64_t seed = 0);

inline double to_mm(double distance_px, double spacing)
{
    if (!(spacing > 0.0))
        throw Error("spacing must be positive");
    return distance_px * spacing;
}

}  // namespace cephland
