#include "atlasfuse/geometry.hpp"

#include <cmath>
#include <string>

#include <Eigen/LU>

namespace atlasfuse {

Geometry::Geometry() : dims_{1, 1, 1}, affine_(Mat4::Identity()), inverse_(Mat4::Identity()) {}

Geometry::Geometry(Index3 dims, const Mat4& affine) : dims_(dims), affine_(affine) {
    for (int d : dims_)
        if (d < 1) throw Error(ErrorCode::DimMismatch, "voxel counts must be >= 1");
    if (std::abs(affine_.topLeftCorner<3, 3>().determinant()) <= 1e-12)
        throw Error(ErrorCode::NonInvertibleTransform, "voxel-to-world affine is singular");
    affine_.row(3) << 0.0, 0.0, 0.0, 1.0;
    inverse_ = affine_.inverse();
}

Geometry Geometry::axis_aligned(Index3 dims, const Vec3& spacing, const Vec3& origin) {
    Mat4 a = Mat4::Identity();
    for (int d = 0; d < 3; ++d) {
        if (!(spacing[d] > 0.0)) throw Error(ErrorCode::InvalidArgument, "spacing must be positive");
        a(d, d) = spacing[d];
        a(d, 3) = origin[d];
    }
    return Geometry(dims, a);
}

std::size_t Geometry::voxel_count() const noexcept {
    return static_cast<std::size_t>(dims_[0]) * static_cast<std::size_t>(dims_[1]) *
           static_cast<std::size_t>(dims_[2]);
}

Vec3 Geometry::spacing() const {
    return affine_.topLeftCorner<3, 3>().colwise().norm().transpose();
}

double Geometry::voxel_volume() const {
    const Vec3 s = spacing();
    return s[0] * s[1] * s[2];
}

Vec3 Geometry::index_to_world(const Vec3& index) const {
    return affine_.topLeftCorner<3, 3>() * index + affine_.topRightCorner<3, 1>();
}

Vec3 Geometry::world_to_index(const Vec3& world) const {
    return inverse_.topLeftCorner<3, 3>() * world + inverse_.topRightCorner<3, 1>();
}

Index3 Geometry::index_of(std::size_t offset) const noexcept {
    const auto nx = static_cast<std::size_t>(dims_[0]);
    const auto ny = static_cast<std::size_t>(dims_[1]);
    return {static_cast<int>(offset % nx), static_cast<int>((offset / nx) % ny), static_cast<int>(offset / (nx * ny))};
}

bool Geometry::matches(const Geometry& other, double tol) const {
    if (dims_ != other.dims_) return false;
    return (affine_ - other.affine_).cwiseAbs().maxCoeff() <= tol;
}

void require_same_geometry(const Geometry& a, const Geometry& b, const char* what) {
    if (!a.matches(b)) throw Error(ErrorCode::GeometryMismatch, std::string(what) + ": grids differ");
}

} // namespace atlasfuse
