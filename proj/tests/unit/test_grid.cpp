#include <doctest.h>

#include <Eigen/Geometry>

#include <cmath>
#include <random>

#include "atlasfuse/grid.hpp"
#include "fixtures.hpp"

using namespace atlasfuse;
using namespace atlasfuse::testing;

namespace {

Geometry oblique_geometry() {
    Mat4 a = Mat4::Identity();
    a.topLeftCorner<3, 3>() = Eigen::AngleAxisd(0.4, Vec3(0.2, 1.0, 0.5).normalized()).toRotationMatrix() *
                              Vec3(0.9, 1.1, 1.3).asDiagonal();
    a.topRightCorner<3, 1>() = Vec3(-12.0, 4.5, 30.25);
    return Geometry({12, 10, 9}, a);
}

template <class T>
void require_error(ErrorCode code, T&& fn) {
    try {
        fn();
        FAIL("expected " << error_name(code));
    } catch (const Error& e) {
        CHECK(e.code() == code);
    }
}

} // namespace

TEST_CASE("identity resample reproduces the source") {
    std::mt19937_64 rng(1);
    const Geometry g = oblique_geometry();
    const VolumeGrid v = random_volume(g, rng);
    const VolumeGrid out = resample(v, g, AffineTransform::identity(), Interp::Trilinear);
    double worst = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, std::abs(out[i] - v[i]));
    CHECK(worst < 1e-6);
    CHECK(resample(v, g, DeformationField::zero(g)) .values() == out.values());
}

TEST_CASE("trilinear sampling at voxel centers reproduces stored values") {
    std::mt19937_64 rng(2);
    const Geometry g = oblique_geometry();
    const VolumeGrid v = random_volume(g, rng, -5.0, 5.0);
    for (std::size_t o = 0; o < v.size(); o += 7) {
        const Index3 ix = g.index_of(o);
        CHECK(std::abs(sample_world(v, g.index_to_world(ix[0], ix[1], ix[2])) - v[o]) < 1e-6);
    }
}

TEST_CASE("linear ramp sampled between voxels") {
    VolumeGrid ramp(Geometry::axis_aligned({4, 1, 1}, Vec3::Ones()));
    for (int i = 0; i < 4; ++i) ramp(i, 0, 0) = i;
    CHECK(sample_linear(ramp, Vec3(1.5, 0, 0)) == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(sample_linear(ramp, Vec3(0.25, 0, 0)) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(sample_linear(ramp, Vec3(-2.0, 0, 0), -1.0) == -1.0);

    VolumeGrid ramp3(cube_geometry(4));
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < 4; ++j)
            for (int i = 0; i < 4; ++i) ramp3(i, j, k) = i;
    CHECK(sample_world(ramp3, Vec3(1.5, 2.3, 0.7)) == doctest::Approx(1.5));
}

TEST_CASE("out-of-bounds samples fill with zero") {
    VolumeGrid v(cube_geometry(4), 3.0);
    const VolumeGrid out = resample(v, v.geometry(), AffineTransform::translation(Vec3(100, 0, 0)));
    for (double x : out.data()) CHECK(x == 0.0);
    LabelVolume l(cube_geometry(4), 7);
    const LabelVolume lo = resample(l, l.geometry(), AffineTransform::translation(Vec3(0, -50, 0)));
    for (auto x : lo.data()) CHECK(x == 0);
}

TEST_CASE("labels require nearest interpolation") {
    LabelVolume l(cube_geometry(3), 1);
    require_error(ErrorCode::InterpMismatch,
                  [&] { resample(l, l.geometry(), AffineTransform::identity(), Interp::Trilinear); });
    require_error(ErrorCode::InterpMismatch,
                  [&] { resample(l, l.geometry(), DeformationField::zero(l.geometry()), Interp::Trilinear); });
}

TEST_CASE("singular transforms are rejected") {
    Mat4 m = Mat4::Identity();
    m(2, 2) = 0.0;
    require_error(ErrorCode::NonInvertibleTransform, [&] { AffineTransform(m, TransformKind::Affine); });
    require_error(ErrorCode::NonInvertibleTransform, [&] { Geometry({2, 2, 2}, m); });
}

TEST_CASE("nearest resampling never invents codes") {
    std::mt19937_64 rng(3);
    const Geometry g = cube_geometry(12);
    const LabelVolume l = random_labels(g, rng, 6, 0.4);
    std::set<std::int32_t> allowed = label_set(l);
    allowed.insert(0);
    for (int trial = 0; trial < 5; ++trial) {
        std::uniform_real_distribution<double> u(-3.0, 3.0);
        const AffineTransform t = AffineTransform::rotation(Vec3(u(rng), u(rng), u(rng)).normalized(), 0.1 * u(rng),
                                                            Vec3(6, 6, 6), Vec3(u(rng), u(rng), u(rng)));
        for (auto c : label_set(resample(l, g, t))) CHECK(allowed.count(c) == 1);
    }
}

TEST_CASE("nearest round trip through an affine and its inverse") {
    // Blocky ellipsoids, diameters between 6 and 16 voxels.
    const Geometry g = cube_geometry(40);
    LabelVolume l(g);
    struct E {
        Vec3 c, r;
        int code;
    };
    const E es[] = {{{12, 14, 20}, {7, 5, 6}, 1}, {{27, 25, 18}, {6, 8, 5}, 2}, {{20, 20, 31}, {4, 3, 3}, 3},
                    {{28, 11, 12}, {3, 4, 5}, 4}};
    for (std::size_t o = 0; o < l.size(); ++o) {
        const Index3 ix = g.index_of(o);
        for (const auto& e : es)
            if ((Vec3(ix[0], ix[1], ix[2]) - e.c).cwiseQuotient(e.r).squaredNorm() <= 1.0) l[o] = e.code;
    }
    const AffineTransform a =
        AffineTransform::rotation(Vec3(1, 1, 0).normalized(), 8.0 * M_PI / 180.0, Vec3(20, 20, 20), Vec3(0.7, -1.2, 0.4));
    const LabelVolume there = resample(l, g, a);
    const LabelVolume back = resample(there, g, a.inverse());
    std::size_t same = 0;
    for (std::size_t i = 0; i < l.size(); ++i) same += back[i] == l[i];
    CHECK(static_cast<double>(same) / static_cast<double>(l.size()) >= 0.99);
}

TEST_CASE("full-volume crop is the identity") {
    std::mt19937_64 rng(4);
    const Geometry g = oblique_geometry();
    const VolumeGrid v = random_volume(g, rng);
    const VolumeGrid c = crop(v, CropBox{{0, 0, 0}, {11, 9, 8}});
    CHECK(c.values() == v.values());
    CHECK((c.geometry().affine() - g.affine()).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("single-voxel crop keeps its world position") {
    VolumeGrid v(cube_geometry(8));
    v(2, 3, 4) = 42.0;
    const VolumeGrid c = crop(v, CropBox{{2, 3, 4}, {2, 3, 4}});
    CHECK(c.dims() == Index3{1, 1, 1});
    CHECK(c[0] == 42.0);
    CHECK((c.geometry().index_to_world(0, 0, 0) - Vec3(2, 3, 4)).norm() <= 1e-9);
}

TEST_CASE("crop preserves world positions and sampled values") {
    std::mt19937_64 rng(5);
    const Geometry g = oblique_geometry();
    const VolumeGrid v = random_volume(g, rng);
    const CropBox box{{2, 1, 3}, {9, 7, 6}};
    const VolumeGrid c = crop(v, box);
    CHECK(c.dims() == box.extent());
    for (int k = 0; k < c.dims()[2]; ++k)
        for (int j = 0; j < c.dims()[1]; ++j)
            for (int i = 0; i < c.dims()[0]; ++i) {
                const Vec3 w = c.geometry().index_to_world(i, j, k);
                CHECK((w - g.index_to_world(i + 2, j + 1, k + 3)).norm() <= 1e-9);
                CHECK(c(i, j, k) == v(i + 2, j + 1, k + 3));
            }
    for (int n = 0; n < 500; ++n) {
        std::uniform_real_distribution<double> ux(box.min[0], box.max[0]), uy(box.min[1], box.max[1]),
            uz(box.min[2], box.max[2]);
        const Vec3 w = g.index_to_world(Vec3(ux(rng), uy(rng), uz(rng)));
        CHECK(sample_world(c, w) == doctest::Approx(sample_world(v, w)).epsilon(1e-12));
    }
}

TEST_CASE("crop boxes are clipped and empty boxes rejected") {
    LabelVolume l(cube_geometry(6), 1);
    CHECK(crop(l, CropBox{{-3, -3, -3}, {1, 1, 1}}).dims() == Index3{2, 2, 2});
    require_error(ErrorCode::EmptyBox, [&] { crop(l, CropBox{{10, 0, 0}, {12, 2, 2}}); });
    require_error(ErrorCode::EmptyBox, [&] { crop(l, CropBox{{3, 3, 3}, {2, 3, 3}}); });
}

TEST_CASE("paste inverts crop") {
    std::mt19937_64 rng(6);
    const LabelVolume l = random_labels(cube_geometry(10), rng, 3);
    const CropBox box{{1, 2, 3}, {7, 8, 6}};
    LabelVolume part = crop(l, box);
    CHECK(paste(LabelVolume(l.geometry()), part, box) == [&] {
        LabelVolume expect(l.geometry());
        for (int k = 3; k <= 6; ++k)
            for (int j = 2; j <= 8; ++j)
                for (int i = 1; i <= 7; ++i) expect(i, j, k) = l(i, j, k);
        return expect;
    }());
    require_error(ErrorCode::GeometryMismatch, [&] { paste(l, LabelVolume(cube_geometry(2)), box); });
}

TEST_CASE("bounding box examples") {
    LabelVolume l(cube_geometry(64));
    l(10, 10, 10) = 3;
    CHECK(label_bounding_box(l, 2) == CropBox{{8, 8, 8}, {12, 12, 12}});
    LabelVolume c(cube_geometry(64));
    c(0, 0, 0) = 1;
    CHECK(label_bounding_box(c, 2) == CropBox{{0, 0, 0}, {2, 2, 2}});
    require_error(ErrorCode::AllBackground, [] { label_bounding_box(LabelVolume(cube_geometry(4)), 1); });
}

TEST_CASE("bounding box contains every nonzero voxel") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Geometry g = Geometry::axis_aligned({20, 17, 13}, Vec3::Ones());
        const LabelVolume l = random_labels(g, rng, 4, 0.995);
        if (label_set(l).empty()) continue;
        const int margin = trial % 4;
        const CropBox box = label_bounding_box(l, margin);
        Index3 lo{1 << 20, 1 << 20, 1 << 20}, hi{-1, -1, -1};
        for (std::size_t o = 0; o < l.size(); ++o) {
            if (l[o] == 0) continue;
            const Index3 ix = g.index_of(o);
            CHECK(box.contains(ix[0], ix[1], ix[2]));
            for (int d = 0; d < 3; ++d) {
                lo[d] = std::min(lo[d], ix[d]);
                hi[d] = std::max(hi[d], ix[d]);
            }
        }
        for (int d = 0; d < 3; ++d) {
            CHECK(box.min[d] == std::max(0, lo[d] - margin));
            CHECK(box.max[d] == std::min(g.dims()[d] - 1, hi[d] + margin));
        }
    }
}

TEST_CASE("default label scheme") {
    const LabelScheme s = LabelScheme::thalamic_default();
    CHECK(s.entries().size() == 24);
    CHECK(s.find(1)->abbrev == "Pul");
    CHECK(s.find(101)->abbrev == "Pul");
    CHECK(s.find(101)->hemisphere == Hemisphere::Left);
    CHECK(s.find(11)->abbrev == "MTT");
    CHECK_FALSE(s.contains(0));
    CHECK_FALSE(s.contains(13));
    std::set<std::string> abbrevs;
    for (const auto& e : s.entries()) abbrevs.insert(e.abbrev);
    CHECK(abbrevs == std::set<std::string>{"MD", "CM", "Hb", "Pul", "MGN", "LGN", "VPL", "VLa", "VLP", "VA", "AV", "MTT"});

    const LabelScheme back = LabelScheme::from_json(s.to_json());
    REQUIRE(back.entries().size() == s.entries().size());
    for (std::size_t i = 0; i < s.entries().size(); ++i) {
        CHECK(back.entries()[i].code == s.entries()[i].code);
        CHECK(back.entries()[i].name == s.entries()[i].name);
        CHECK(back.entries()[i].hemisphere == s.entries()[i].hemisphere);
    }
}

TEST_CASE("scheme validation") {
    require_error(ErrorCode::InvalidArgument, [] { LabelScheme({{0, "BG", "background", Hemisphere::None}}); });
    require_error(ErrorCode::InvalidArgument, [] {
        LabelScheme({{5, "A", "a", Hemisphere::None}, {5, "B", "b", Hemisphere::None}});
    });
    require_error(ErrorCode::InvalidArgument, [] { LabelScheme::from_json("{\"not\": \"an array\"}"); });

    LabelVolume l(cube_geometry(3));
    l[4] = 55;
    validate_labels(l, LabelScheme({{55, "X", "x", Hemisphere::None}}));
    require_error(ErrorCode::InvalidArgument, [&] { validate_labels(l, LabelScheme::thalamic_default()); });
}

TEST_CASE("crop box JSON round trip") {
    const CropBox b{{1, 2, 3}, {4, 5, 6}};
    CHECK(CropBox::from_json(b.to_json()) == b);
}
