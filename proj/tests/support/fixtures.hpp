#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "atlasfuse/geometry.hpp"
#include "atlasfuse/transform.hpp"

namespace atlasfuse::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

Geometry cube_geometry(int n, double spacing = 1.0);

/// Values uniform in [lo, hi).
VolumeGrid random_volume(const Geometry& g, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0);
/// Codes drawn from {0, 1, ..., max_code}, background with probability `p_background`.
LabelVolume random_labels(const Geometry& g, std::mt19937_64& rng, int max_code, double p_background = 0.5);

/// Smooth synthetic anatomy: a few anisotropic Gaussian blobs of different amplitudes.
VolumeGrid blob_image(const Geometry& g);

/// Ball of `code` with the given world center and radius (mm).
LabelVolume ball(const Geometry& g, const Vec3& center, double radius, std::int32_t code = 1);

/// Reads a whole file as bytes.
std::string file_bytes(const std::filesystem::path& path);

} // namespace atlasfuse::testing
