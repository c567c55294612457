#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cephland {

/// Every hard failure in the library surfaces as this exception type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr int kNumLandmarks = 53;

/// Explicitly seeded engine threaded through every stochastic operation.
using Rng = std::mt19937_64;

struct Point2 {
    double x{0.0};
    double y{0.0};

    friend bool operator==(const Point2&, const Point2&) = default;
};

inline double distance(Point2 a, Point2 b) noexcept
{
    const double dx = a.x - b.x;
    const double dy = a.y - b.y;
    return std::sqrt(dx * dx + dy * dy);
}

enum class LandmarkGroup { soft_tissue, tooth, skull, cervical_spine, ruler };

std::string_view to_string(LandmarkGroup group) noexcept;

/// Landmark indices are laid out as contiguous group blocks in the order of
/// LandmarkGroup: 13 soft tissue, 6 tooth, 19 skull, 13 cervical spine,
/// 2 ruler.
LandmarkGroup landmark_group(int index);
int group_cardinality(LandmarkGroup group) noexcept;
const std::array<std::string, kNumLandmarks>& landmark_names();

/// Index pair of the calibration ruler endpoints.
std::array<int, 2> ruler_landmarks() noexcept;

/// Exactly kNumLandmarks finite, non-negative points in original-image pixels.
class LandmarkSet {
public:
    LandmarkSet() = default;
    explicit LandmarkSet(std::vector<Point2> points);

    const std::vector<Point2>& points() const noexcept { return points_; }
    std::size_t size() const noexcept { return points_.size(); }
    const Point2& operator[](std::size_t i) const { return points_.at(i); }

private:
    std::vector<Point2> points_;
};

}  // namespace cephland
