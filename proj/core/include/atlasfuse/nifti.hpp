#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <variant>

#include "atlasfuse/geometry.hpp"
#include "atlasfuse/transform.hpp"

namespace atlasfuse::nifti {

enum class Datatype : std::int16_t {
    UInt8 = 2,
    Int16 = 4,
    Int32 = 8,
    Float32 = 16,
    Float64 = 64,
};

inline constexpr std::int16_t kIntentVector = 1007;

/// Decoded NIfTI-1 header fields that the toolkit relies on.
struct Header {
    std::array<std::int16_t, 8> dim{};
    Index3 dims{1, 1, 1};
    Vec3 spacing = Vec3::Ones();
    std::int16_t datatype = 0;
    std::int16_t intent_code = 0;
    Mat4 affine = Mat4::Identity();
    double scl_slope = 0.0;
    double scl_inter = 0.0;
    double vox_offset = 352.0;
    std::int16_t qform_code = 0;
    std::int16_t sform_code = 0;
    bool big_endian = false;
};

/// Parses the 348-byte header of a single-file NIfTI-1 image (plain or gzip).
Header read_header(const std::filesystem::path& path);

/// Scalar image; voxel values are scaled by scl_slope/scl_inter when slope != 0.
VolumeGrid read_volume(const std::filesystem::path& path);
/// Integer-typed image read verbatim as labels (no scaling).
LabelVolume read_labels(const std::filesystem::path& path);
std::variant<VolumeGrid, LabelVolume> read_image(const std::filesystem::path& path, bool as_labels);

/// float32 output; gzip when the path ends in ".gz".
void write_volume(const VolumeGrid& volume, const std::filesystem::path& path);
/// int16 output; LabelOverflow for codes outside the int16 range.
void write_volume(const LabelVolume& labels, const std::filesystem::path& path);

/// 3-component vector image (dim = [5, nx, ny, nz, 1, 3], intent 1007), float32.
void write_field(const DeformationField& field, const std::filesystem::path& path);
DeformationField read_field(const std::filesystem::path& path);

} // namespace atlasfuse::nifti
