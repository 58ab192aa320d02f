#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "atlasfuse/error.hpp"

namespace atlasfuse {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Index3 = std::array<int, 3>;

/// Lattice geometry: voxel counts plus the voxel-index to world-mm affine.
///
/// Voxel (i,j,k) is stored at linear offset i + nx*(j + ny*k). Spacing is
/// derived from the column norms of the affine's 3x3 block.
class Geometry {
public:
    Geometry();
    Geometry(Index3 dims, const Mat4& affine);

    /// Axis-aligned geometry with the given spacing; voxel 0 sits at `origin`.
    static Geometry axis_aligned(Index3 dims, const Vec3& spacing, const Vec3& origin = Vec3::Zero());

    const Index3& dims() const noexcept { return dims_; }
    int nx() const noexcept { return dims_[0]; }
    int ny() const noexcept { return dims_[1]; }
    int nz() const noexcept { return dims_[2]; }
    std::size_t voxel_count() const noexcept;

    const Mat4& affine() const noexcept { return affine_; }
    const Mat4& inverse_affine() const noexcept { return inverse_; }
    Vec3 spacing() const;
    /// Product of the per-axis spacings, in mm^3.
    double voxel_volume() const;

    Vec3 index_to_world(const Vec3& index) const;
    Vec3 index_to_world(int i, int j, int k) const { return index_to_world(Vec3(i, j, k)); }
    Vec3 world_to_index(const Vec3& world) const;

    std::size_t offset(int i, int j, int k) const noexcept {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(dims_[0]) *
                   (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_[1]) * static_cast<std::size_t>(k));
    }
    Index3 index_of(std::size_t offset) const noexcept;
    bool contains(int i, int j, int k) const noexcept {
        return i >= 0 && j >= 0 && k >= 0 && i < dims_[0] && j < dims_[1] && k < dims_[2];
    }

    /// Same dims and affine entries within `tol`.
    bool matches(const Geometry& other, double tol = 1e-6) const;

private:
    Index3 dims_;
    Mat4 affine_;
    Mat4 inverse_;
};

void require_same_geometry(const Geometry& a, const Geometry& b, const char* what);

/// Dense scalar lattice sharing one Geometry.
template <class T>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    explicit Grid(Geometry geometry, T fill = T{})
        : geometry_(std::move(geometry)), data_(geometry_.voxel_count(), fill) {}
    Grid(Geometry geometry, std::vector<T> data) : geometry_(std::move(geometry)), data_(std::move(data)) {
        if (data_.size() != geometry_.voxel_count())
            throw Error(ErrorCode::DimMismatch, "voxel buffer length does not match dims");
    }

    const Geometry& geometry() const noexcept { return geometry_; }
    const Index3& dims() const noexcept { return geometry_.dims(); }
    std::size_t size() const noexcept { return data_.size(); }

    std::span<const T> data() const noexcept { return data_; }
    std::span<T> data() noexcept { return data_; }
    const std::vector<T>& values() const noexcept { return data_; }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }
    T& operator()(int i, int j, int k) noexcept { return data_[geometry_.offset(i, j, k)]; }
    const T& operator()(int i, int j, int k) const noexcept { return data_[geometry_.offset(i, j, k)]; }

    bool operator==(const Grid& other) const {
        return geometry_.matches(other.geometry_, 0.0) && data_ == other.data_;
    }

private:
    Geometry geometry_;
    std::vector<T> data_;
};

/// Real-valued image (T1 maps, intensities, synthesized contrast).
using VolumeGrid = Grid<double>;
/// Integer labelmap; code 0 is background.
using LabelVolume = Grid<std::int32_t>;

} // namespace atlasfuse
