#include "atlasfuse/transform.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include "sampling.hpp"

namespace atlasfuse {

AffineTransform::AffineTransform(const Mat4& matrix, TransformKind kind) : matrix_(matrix), kind_(kind) {
    if (!matrix_.allFinite()) throw Error(ErrorCode::NonInvertibleTransform, "affine has non-finite entries");
    if ((matrix_.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12)
        throw Error(ErrorCode::InvalidArgument, "affine last row must be (0,0,0,1)");
    matrix_.row(3) << 0.0, 0.0, 0.0, 1.0;
    const Mat3 a = linear();
    if (std::abs(a.determinant()) <= 1e-12)
        throw Error(ErrorCode::NonInvertibleTransform, "affine linear block is singular");
    if (kind_ == TransformKind::Rigid &&
        (a.transpose() * a - Mat3::Identity()).cwiseAbs().maxCoeff() >= 1e-6)
        throw Error(ErrorCode::InvalidArgument, "rigid transform must have an orthonormal linear block");
}

AffineTransform AffineTransform::translation(const Vec3& t) {
    Mat4 m = Mat4::Identity();
    m.topRightCorner<3, 1>() = t;
    return {m, TransformKind::Rigid};
}

AffineTransform AffineTransform::rotation(const Vec3& axis, double radians, const Vec3& center, const Vec3& t) {
    const Mat3 r = Eigen::AngleAxisd(radians, axis.normalized()).toRotationMatrix();
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = r;
    m.topRightCorner<3, 1>() = center - r * center + t;
    return {m, TransformKind::Rigid};
}

AffineTransform AffineTransform::scaling(double factor, const Vec3& center) {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() *= factor;
    m.topRightCorner<3, 1>() = center - factor * center;
    return {m, TransformKind::Affine};
}

AffineTransform AffineTransform::inverse() const {
    return {matrix_.inverse(), kind_};
}

AffineTransform AffineTransform::after(const AffineTransform& other) const {
    const TransformKind k =
        (kind_ == TransformKind::Rigid && other.kind_ == TransformKind::Rigid) ? TransformKind::Rigid : TransformKind::Affine;
    return {matrix_ * other.matrix_, k};
}

double AffineTransform::rotation_degrees() const {
    Eigen::JacobiSVD<Mat3> svd(linear(), Eigen::ComputeFullU | Eigen::ComputeFullV);
    Mat3 r = svd.matrixU() * svd.matrixV().transpose();
    const double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c) * 180.0 / std::numbers::pi;
}

std::string AffineTransform::to_json() const {
    nlohmann::json j;
    j["kind"] = kind_ == TransformKind::Rigid ? "rigid" : "affine";
    auto rows = nlohmann::json::array();
    for (int r = 0; r < 4; ++r) rows.push_back({matrix_(r, 0), matrix_(r, 1), matrix_(r, 2), matrix_(r, 3)});
    j["matrix"] = rows;
    return j.dump(2);
}

AffineTransform AffineTransform::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("affine JSON: ") + e.what());
    }
    const auto& rows = j.at("matrix");
    if (rows.size() != 4) throw Error(ErrorCode::InvalidArgument, "affine JSON needs 4 rows");
    Mat4 m;
    for (int r = 0; r < 4; ++r) {
        if (rows[r].size() != 4) throw Error(ErrorCode::InvalidArgument, "affine JSON rows need 4 entries");
        for (int c = 0; c < 4; ++c) m(r, c) = rows[r][c].get<double>();
    }
    const std::string kind = j.value("kind", std::string("affine"));
    return {m, kind == "rigid" ? TransformKind::Rigid : TransformKind::Affine};
}

DeformationField::DeformationField(Geometry geometry)
    : geometry_(std::move(geometry)), u_(geometry_.voxel_count(), Vec3::Zero()) {}

DeformationField::DeformationField(Geometry geometry, std::vector<Vec3> displacements)
    : geometry_(std::move(geometry)), u_(std::move(displacements)) {
    if (u_.size() != geometry_.voxel_count())
        throw Error(ErrorCode::DimMismatch, "displacement buffer length does not match dims");
}

DeformationField DeformationField::constant(const Geometry& g, const Vec3& t) {
    return DeformationField(g, std::vector<Vec3>(g.voxel_count(), t));
}

DeformationField DeformationField::from_affine(const Geometry& g, const AffineTransform& a) {
    DeformationField f(g);
    for (std::size_t i = 0; i < f.size(); ++i) {
        const Index3 idx = g.index_of(i);
        const Vec3 x = g.index_to_world(idx[0], idx[1], idx[2]);
        f.u_[i] = a.apply(x) - x;
    }
    return f;
}

Vec3 DeformationField::sample(const Vec3& world, FieldBoundary boundary) const {
    detail::LinearStencil s;
    if (!detail::linear_stencil(geometry_, geometry_.world_to_index(world), boundary == FieldBoundary::Clamp, s))
        return Vec3::Zero();
    Vec3 v = Vec3::Zero();
    for (int c = 0; c < 8; ++c) v += s.weight[c] * u_[s.offset[c]];
    return v;
}

Vec3 DeformationField::map_voxel(std::size_t offset) const {
    const Index3 idx = geometry_.index_of(offset);
    return geometry_.index_to_world(idx[0], idx[1], idx[2]) + u_[offset];
}

double DeformationField::max_norm() const {
    double m = 0.0;
    for (const auto& v : u_) m = std::max(m, v.norm());
    return m;
}

bool DeformationField::all_finite() const {
    return std::all_of(u_.begin(), u_.end(), [](const Vec3& v) { return v.allFinite(); });
}

} // namespace atlasfuse
