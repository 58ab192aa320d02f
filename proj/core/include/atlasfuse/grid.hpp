#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "atlasfuse/geometry.hpp"
#include "atlasfuse/transform.hpp"

namespace atlasfuse {

enum class Hemisphere { Right, Left, None };

struct LabelEntry {
    std::int32_t code = 0;
    std::string abbrev;
    std::string name;
    Hemisphere hemisphere = Hemisphere::None;
};

/// Code -> structure table. Code 0 is reserved for background.
class LabelScheme {
public:
    LabelScheme() = default;
    explicit LabelScheme(std::vector<LabelEntry> entries);

    /// The twelve thalamic structures per side, coded 1..12 (right) and
    /// 101..112 (left) in order of decreasing bilateral volume.
    static LabelScheme thalamic_default();

    const std::vector<LabelEntry>& entries() const noexcept { return entries_; }
    bool contains(std::int32_t code) const;
    const LabelEntry* find(std::int32_t code) const;
    std::string name_of(std::int32_t code) const;
    std::vector<std::int32_t> codes() const;
    bool empty() const noexcept { return entries_.empty(); }

    /// JSON array of {code, abbrev, name, hemisphere}.
    std::string to_json() const;
    static LabelScheme from_json(const std::string& text);
    static LabelScheme load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

private:
    std::vector<LabelEntry> entries_;
};

/// Throws InvalidArgument when a nonzero code is absent from `scheme`.
void validate_labels(const LabelVolume& labels, const LabelScheme& scheme);
std::set<std::int32_t> label_set(const LabelVolume& labels);

/// Inclusive voxel-index bounds.
struct CropBox {
    Index3 min{0, 0, 0};
    Index3 max{0, 0, 0};

    Index3 extent() const { return {max[0] - min[0] + 1, max[1] - min[1] + 1, max[2] - min[2] + 1}; }
    bool empty() const { return max[0] < min[0] || max[1] < min[1] || max[2] < min[2]; }
    CropBox clipped(const Index3& dims) const;
    bool contains(int i, int j, int k) const {
        return i >= min[0] && i <= max[0] && j >= min[1] && j <= max[1] && k >= min[2] && k <= max[2];
    }
    bool operator==(const CropBox&) const = default;

    std::string to_json() const;
    static CropBox from_json(const std::string& text);
};

enum class Interp { Trilinear, Nearest };

/// Pull-back resampling: each target voxel x reads the source at T(x).
/// Out-of-bounds samples are 0 (scalars) or background (labels).
VolumeGrid resample(const VolumeGrid& source, const Geometry& target, const AffineTransform& transform,
                    Interp interp = Interp::Trilinear);
VolumeGrid resample(const VolumeGrid& source, const Geometry& target, const DeformationField& transform,
                    Interp interp = Interp::Trilinear);
LabelVolume resample(const LabelVolume& source, const Geometry& target, const AffineTransform& transform,
                     Interp interp = Interp::Nearest);
LabelVolume resample(const LabelVolume& source, const Geometry& target, const DeformationField& transform,
                     Interp interp = Interp::Nearest);

/// Trilinear value at a continuous voxel index; `fill` outside the lattice.
double sample_linear(const VolumeGrid& v, const Vec3& index, double fill = 0.0);
/// Trilinear value at a world point.
double sample_world(const VolumeGrid& v, const Vec3& world, double fill = 0.0);

/// Sub-volume with the affine shifted so retained voxels keep their world positions.
VolumeGrid crop(const VolumeGrid& volume, const CropBox& box);
LabelVolume crop(const LabelVolume& volume, const CropBox& box);
Geometry crop_geometry(const Geometry& g, const CropBox& box);

/// Writes `part` (whose lattice is `box` of `full`) back into a copy of `full`.
LabelVolume paste(const LabelVolume& full, const LabelVolume& part, const CropBox& box);

/// Tightest box around nonzero voxels, dilated by `margin` and clipped.
CropBox label_bounding_box(const LabelVolume& labels, int margin);

/// Separable Gaussian with normalized truncation at the borders; sigma in voxels.
VolumeGrid gaussian_smooth(const VolumeGrid& v, double sigma_voxels);
void gaussian_smooth_inplace(std::vector<double>& data, const Index3& dims, double sigma_voxels);

/// Every `factor`-th voxel of a pre-smoothed copy; voxel 0 keeps its world position.
VolumeGrid downsample(const VolumeGrid& v, int factor);
Geometry downsample_geometry(const Geometry& g, int factor);

} // namespace atlasfuse
