#include "cephland/landmarks.hpp"

#include <cmath>
#include <string>

namespace cephland {

namespace {

constexpr std::array<int, 5> kGroupSizes{13, 6, 19, 13, 2};

}  // namespace

std::string_view to_string(LandmarkGroup group) noexcept
{
    switch (group) {
    case LandmarkGroup::soft_tissue: return "soft-tissue";
    case LandmarkGroup::tooth: return "tooth";
    case LandmarkGroup::skull: return "skull";
    case LandmarkGroup::cervical_spine: return "cervical-spine";
    case LandmarkGroup::ruler: return "ruler";
    }
    return "unknown";
}

LandmarkGroup landmark_group(int index)
{
    if (index < 0 || index >= kNumLandmarks)
        throw Error("landmark index out of range: " + std::to_string(index));
    int start = 0;
    for (std::size_t g = 0; g < kGroupSizes.size(); ++g) {
        start += kGroupSizes[g];
        if (index < start)
            return static_cast<LandmarkGroup>(g);
    }
    return LandmarkGroup::ruler;
}

int group_cardinality(LandmarkGroup group) noexcept
{
    return kGroupSizes[static_cast<std::size_t>(group)];
}

const std::array<std::string, kNumLandmarks>& landmark_names()
{
    static const auto names = [] {
        std::array<std::string, kNumLandmarks> out;
        for (int i = 0; i < kNumLandmarks; ++i)
            out[static_cast<std::size_t>(i)] = "L" + std::to_string(i + 1);
        return out;
    }();
    return names;
}

std::array<int, 2> ruler_landmarks() noexcept
{
    return {kNumLandmarks - 2, kNumLandmarks - 1};
}

LandmarkSet::LandmarkSet(std::vector<Point2> points) : points_(std::move(points))
{
    if (points_.size() != static_cast<std::size_t>(kNumLandmarks))
        throw Error("landmark count mismatch: expected " + std::to_string(kNumLandmarks) + ", got " +
                    std::to_string(points_.size()));
    for (const auto& p : points_) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y))
            throw Error("landmark coordinate is not finite");
        if (p.x < 0.0 || p.y < 0.0)
            throw Error("landmark coordinate is negative");
    }
}

}  // namespace cephland
