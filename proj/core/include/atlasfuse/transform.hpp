#pragma once

#include <string>
#include <vector>

#include "atlasfuse/geometry.hpp"

namespace atlasfuse {

enum class TransformKind { Rigid, Affine };

/// Homogeneous world-mm to world-mm map. Under the pull-back convention it
/// carries fixed/target points into moving/source space.
class AffineTransform {
public:
    AffineTransform() : matrix_(Mat4::Identity()), kind_(TransformKind::Rigid) {}
    AffineTransform(const Mat4& matrix, TransformKind kind);

    static AffineTransform identity() { return {}; }
    static AffineTransform translation(const Vec3& t);
    /// Rotation by `radians` about `axis` through `center`, then translation by `t`.
    static AffineTransform rotation(const Vec3& axis, double radians, const Vec3& center = Vec3::Zero(),
                                    const Vec3& t = Vec3::Zero());
    static AffineTransform scaling(double factor, const Vec3& center = Vec3::Zero());

    const Mat4& matrix() const noexcept { return matrix_; }
    Mat3 linear() const { return matrix_.topLeftCorner<3, 3>(); }
    Vec3 offset() const { return matrix_.topRightCorner<3, 1>(); }
    TransformKind kind() const noexcept { return kind_; }

    Vec3 apply(const Vec3& p) const { return linear() * p + offset(); }
    AffineTransform inverse() const;
    /// (*this)(other(p)).
    AffineTransform after(const AffineTransform& other) const;

    /// Rotation angle of the (orthonormalized) linear block, in degrees.
    double rotation_degrees() const;

    /// Row-major 4x4 JSON: {"kind": "rigid"|"affine", "matrix": [[...],...]}.
    std::string to_json() const;
    static AffineTransform from_json(const std::string& text);

private:
    Mat4 matrix_;
    TransformKind kind_;
};

enum class FieldBoundary {
    Zero,   ///< out-of-lattice samples read as zero displacement
    Clamp,  ///< out-of-lattice samples read the nearest lattice value
};

/// Per-voxel displacement in world mm on a fixed-image lattice.
/// The point x maps to x + u(x) (pull-back toward moving space).
class DeformationField {
public:
    DeformationField() = default;
    explicit DeformationField(Geometry geometry);
    DeformationField(Geometry geometry, std::vector<Vec3> displacements);

    static DeformationField zero(const Geometry& g) { return DeformationField(g); }
    static DeformationField constant(const Geometry& g, const Vec3& t);
    /// u(x) = A x - x on the lattice.
    static DeformationField from_affine(const Geometry& g, const AffineTransform& a);

    const Geometry& geometry() const noexcept { return geometry_; }
    std::size_t size() const noexcept { return u_.size(); }
    const std::vector<Vec3>& displacements() const noexcept { return u_; }
    std::vector<Vec3>& displacements() noexcept { return u_; }
    Vec3& operator[](std::size_t i) noexcept { return u_[i]; }
    const Vec3& operator[](std::size_t i) const noexcept { return u_[i]; }

    /// Trilinear sample of the displacement at a world point.
    Vec3 sample(const Vec3& world, FieldBoundary boundary) const;
    /// Mapped point x + u(x) for lattice voxel `offset`.
    Vec3 map_voxel(std::size_t offset) const;

    double max_norm() const;
    bool all_finite() const;

private:
    Geometry geometry_;
    std::vector<Vec3> u_;
};

} // namespace atlasfuse
