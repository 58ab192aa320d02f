#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "atlasfuse/phantom.hpp"
#include "atlasfuse/register.hpp"
#include "atlasfuse/synth.hpp"
#include "fixtures.hpp"

using namespace atlasfuse;
using namespace atlasfuse::testing;

namespace {

constexpr double kDeg = M_PI / 180.0;

Geometry centered_cube(int n) {
    const double h = 0.5 * (n - 1);
    return Geometry::axis_aligned({n, n, n}, Vec3::Ones(), Vec3(-h, -h, -h));
}

template <class F>
void require_error(ErrorCode code, F&& fn) {
    try {
        fn();
        FAIL("expected " << error_name(code));
    } catch (const Error& e) {
        CHECK(e.code() == code);
    }
}

double max_norm_where(const DeformationField& f, const std::vector<bool>& mask) {
    double m = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i)
        if (mask[i]) m = std::max(m, f[i].norm());
    return m;
}

DeformationField smooth_field(std::uint64_t seed, const Geometry& g, double max_mm) {
    WarpSpec w;
    w.seed = seed;
    w.max_displacement_mm = max_mm;
    w.smoothness_sigma_mm = 6.0;
    w.taper_mm = 6.0;
    return random_diffeo(w, g);
}

/// 64^3 white-matter-nulled phantom and its nucleus labels, built once.
const Phantom& phantom() {
    static const Phantom p = [] {
        Phantom ph = generate_phantom(PhantomSpec::thalamic_default(7));
        ph.t1_map = synthesize_wmn(ph.t1_map, SynthesisParams{});
        return ph;
    }();
    return p;
}

double label_dice(const LabelVolume& a, const LabelVolume& b, int label) {
    std::size_t inter = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        na += a[i] == label;
        nb += b[i] == label;
        inter += a[i] == label && b[i] == label;
    }
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

} // namespace

TEST_CASE("constant fields compose additively") {
    const Geometry g = cube_geometry(10);
    const Vec3 t1(1.0, -2.0, 0.5), t2(-0.25, 1.0, 2.0);
    const DeformationField c = compose_fields(DeformationField::constant(g, t1), DeformationField::constant(g, t2));
    std::size_t checked = 0;
    for (std::size_t i = 0; i < c.size(); ++i) {
        const Index3 ix = g.index_of(i);
        const Vec3 y = Vec3(ix[0], ix[1], ix[2]) + t1;
        if ((y.array() < 0.0).any() || (y.array() > 9.0).any()) continue;
        CHECK((c[i] - (t1 + t2)).cwiseAbs().maxCoeff() <= 1e-12);
        ++checked;
    }
    CHECK(checked > 300);
}

TEST_CASE("zero field is the identity for composition") {
    const Geometry g = centered_cube(16);
    const DeformationField f = smooth_field(3, g, 2.0);
    const DeformationField z = DeformationField::zero(g);
    CHECK(compose_fields(f, z).displacements() == f.displacements());
    CHECK(compose_fields(z, f).displacements() == f.displacements());
}

TEST_CASE("composed warp equals two sequential warps") {
    const Geometry g = centered_cube(32);
    // Smooth enough that the extra interpolation of the sequential path stays below the
    // tolerance; the reversed order shows the comparison still has teeth.
    const VolumeGrid img = gaussian_smooth(blob_image(g), 2.5);
    const DeformationField outer = smooth_field(11, g, 2.5);
    const DeformationField inner = smooth_field(12, g, 2.5);
    const VolumeGrid twice = resample(resample(img, g, inner), g, outer);
    const auto [lo, hi] = std::minmax_element(img.values().begin(), img.values().end());
    auto rms_to_twice = [&](const VolumeGrid& v) {
        double ss = 0.0;
        for (std::size_t i = 0; i < img.size(); ++i) ss += (v[i] - twice[i]) * (v[i] - twice[i]);
        return std::sqrt(ss / static_cast<double>(img.size()));
    };
    const double rms = rms_to_twice(resample(img, g, compose_fields(outer, inner)));
    CHECK(rms < 1e-3 * (*hi - *lo));
    CHECK(rms_to_twice(resample(img, g, compose_fields(inner, outer))) > 5e-3 * (*hi - *lo));
}

TEST_CASE("inverse of a constant translation") {
    const Geometry g = cube_geometry(8);
    const Vec3 t(1.5, -0.75, 3.0);
    const InversionResult r = invert_field(DeformationField::constant(g, t));
    CHECK(r.iterations == 1);
    CHECK(r.residual_mm == 0.0);
    for (const auto& d : r.field.displacements()) CHECK(d == -t);
}

TEST_CASE("inverse of the zero field") {
    const Geometry g = cube_geometry(6);
    const InversionResult r = invert_field(DeformationField::zero(g));
    CHECK(r.iterations == 0);
    CHECK(r.field.max_norm() == 0.0);
}

TEST_CASE("smooth fields compose with their inverse to near zero") {
    // x -> x + g(x) followed by x -> x + f(x): the quantity the fixed point drives to zero.
    const Geometry g = centered_cube(48);
    for (std::uint64_t seed : {21u, 22u, 23u}) {
        WarpSpec w;
        w.seed = seed;
        const DeformationField f = random_diffeo(w, g);
        const InversionResult inv = invert_field(f);
        CHECK(inv.residual_mm < 0.01);
        CHECK(compose_fields(inv.field, f).max_norm() < 0.05);
    }
}

TEST_CASE("the reverse composition is limited by interpolating the inverse") {
    // inverse(x + f(x)) + f(x) reads the inverse between lattice nodes, so its error follows
    // the inverse's curvature: small for gentle fields and growing with the amplitude.
    const Geometry g = centered_cube(48);
    double previous = 0.0;
    for (double amplitude : {1.0, 2.0, 4.0}) {
        double worst = 0.0;
        for (std::uint64_t seed : {21u, 22u, 23u}) {
            WarpSpec w;
            w.seed = seed;
            w.max_displacement_mm = amplitude;
            const DeformationField f = random_diffeo(w, g);
            worst = std::max(worst, compose_fields(f, invert_field(f).field).max_norm());
        }
        if (amplitude == 1.0) CHECK(worst < 0.05);
        CHECK(worst > previous);
        previous = worst;
    }
}

TEST_CASE("inversion argument checks") {
    const Geometry g = cube_geometry(4);
    require_error(ErrorCode::InvalidArgument, [&] { invert_field(DeformationField::zero(g), 0.0); });
    require_error(ErrorCode::InvalidArgument, [&] { invert_field(DeformationField::zero(g), 0.01, -1); });
}

TEST_CASE("jacobian of affine fields") {
    const Geometry g = centered_cube(10);
    const DeformationField s = DeformationField::from_affine(g, AffineTransform::scaling(1.2));
    const VolumeGrid j = jacobian_determinant(s);
    for (double v : j.data()) CHECK(v == doctest::Approx(1.2 * 1.2 * 1.2).epsilon(1e-9));
    CHECK(positive_jacobian_fraction(s) == 1.0);

    // A reflection through the x axis folds everything.
    Mat4 m = Mat4::Identity();
    m(0, 0) = -1.0;
    const DeformationField r = DeformationField::from_affine(g, AffineTransform(m, TransformKind::Affine));
    CHECK(positive_jacobian_fraction(r) == 0.0);
}

TEST_CASE("warp_labels with identity and whole-voxel shifts") {
    std::mt19937_64 rng(8);
    const Geometry g = cube_geometry(12);
    const LabelVolume l = random_labels(g, rng, 5);
    CHECK(warp_labels(l, AffineTransform::identity(), g) == l);
    CHECK(warp_labels(l, DeformationField::zero(g), g) == l);

    const LabelVolume shifted = warp_labels(l, AffineTransform::translation(Vec3(2, -1, 3)), g);
    LabelVolume oracle(g);
    for (int k = 0; k < 12; ++k)
        for (int j = 0; j < 12; ++j)
            for (int i = 0; i < 12; ++i)
                if (g.contains(i + 2, j - 1, k + 3)) oracle(i, j, k) = l(i + 2, j - 1, k + 3);
    CHECK(shifted == oracle);

    std::set<std::int32_t> allowed = label_set(l);
    allowed.insert(0);
    for (auto c : label_set(warp_labels(l, smooth_field(4, g, 2.0), g))) CHECK(allowed.count(c) == 1);
}

TEST_CASE("similarity metrics") {
    const Geometry g = centered_cube(24);
    const VolumeGrid a = blob_image(g);
    const VolumeGrid b = resample(a, g, AffineTransform::translation(Vec3(3, 0, 0)));
    CHECK(mutual_information(a, a) > mutual_information(a, b));
    CHECK(mean_local_cc(a, a) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(mean_local_cc(a, b) < mean_local_cc(a, a));
}

TEST_CASE("rigid registration") {
    const VolumeGrid& fixed = phantom().t1_map;
    const Geometry& g = fixed.geometry();
    const RegConfig cfg;

    SUBCASE("identity") {
        const AffineTransform t = register_rigid(fixed, fixed, cfg);
        CHECK(t.kind() == TransformKind::Rigid);
        CHECK(t.offset().norm() < 0.1);
        CHECK(t.rotation_degrees() < 0.1);
    }
    SUBCASE("translation") {
        const VolumeGrid moving = resample(fixed, g, AffineTransform::translation(Vec3(-3, 0, 0)));
        const AffineTransform t = register_rigid(fixed, moving, cfg);
        CHECK((t.offset() - Vec3(3, 0, 0)).norm() < 0.2);
    }
    SUBCASE("rotation") {
        const AffineTransform r = AffineTransform::rotation(Vec3::UnitZ(), 5.0 * kDeg);
        const VolumeGrid moving = resample(fixed, g, r);
        const AffineTransform t = register_rigid(fixed, moving, cfg);
        CHECK(std::abs(t.rotation_degrees() - 5.0) < 0.5);
        CHECK((t.linear() * r.linear() - Mat3::Identity()).cwiseAbs().maxCoeff() < 0.01);
    }
    SUBCASE("determinism") {
        const VolumeGrid moving = resample(fixed, g, AffineTransform::translation(Vec3(1, 2, -1)));
        CHECK(register_rigid(fixed, moving, cfg).matrix() == register_rigid(fixed, moving, cfg).matrix());
    }
}

TEST_CASE("affine registration") {
    const VolumeGrid& fixed = phantom().t1_map;
    const Geometry& g = fixed.geometry();
    const RegConfig cfg;

    SUBCASE("identity") {
        const AffineTransform t = register_affine(fixed, fixed, cfg);
        CHECK(t.kind() == TransformKind::Affine);
        CHECK((t.linear() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-3);
        CHECK(t.offset().norm() < 0.1);
    }
    SUBCASE("isotropic scale") {
        const VolumeGrid moving = resample(fixed, g, AffineTransform::scaling(1.0 / 1.1));
        const AffineTransform t = register_affine(fixed, moving, cfg);
        const double s = std::cbrt(t.linear().determinant());
        CHECK(std::abs(s / 1.1 - 1.0) < 0.01);
    }
}

TEST_CASE("registration input errors") {
    const Geometry g = centered_cube(16);
    const VolumeGrid img = blob_image(g);
    const RegConfig cfg;
    require_error(ErrorCode::DegenerateInput, [&] { register_rigid(img, VolumeGrid(g, 1.0), cfg); });
    require_error(ErrorCode::DegenerateInput, [&] { register_affine(VolumeGrid(g, 0.0), img, cfg); });
    const Geometry far = Geometry::axis_aligned({16, 16, 16}, Vec3::Ones(), Vec3(500, 500, 500));
    VolumeGrid moved(far, img.values());
    require_error(ErrorCode::NoOverlap, [&] { register_rigid(img, moved, cfg); });
    require_error(ErrorCode::NoOverlap, [&] { register_affine(img, moved, cfg); });

    RegConfig bad;
    bad.linear_iterations = {10};
    require_error(ErrorCode::InvalidArgument, [&] { register_rigid(img, img, bad); });
    bad = RegConfig{};
    bad.sigma_update = -1.0;
    require_error(ErrorCode::InvalidArgument, [&] { bad.validate(); });
}

TEST_CASE("registration config JSON round trip") {
    RegConfig c;
    c.shrink_factors = {2, 1};
    c.linear_iterations = {5, 6};
    c.deformable_iterations = {7, 8};
    c.sigma_update = 1.5;
    const RegConfig back = RegConfig::from_json(c.to_json());
    CHECK(back.shrink_factors == c.shrink_factors);
    CHECK(back.linear_iterations == c.linear_iterations);
    CHECK(back.deformable_iterations == c.deformable_iterations);
    CHECK(back.sigma_update == 1.5);
    CHECK(back.histogram_bins == 32);
}

TEST_CASE("affine JSON round trip") {
    const AffineTransform a = AffineTransform::rotation(Vec3(1, 2, 3).normalized(), 0.3, Vec3(1, 1, 1), Vec3(4, 5, 6));
    const AffineTransform b = AffineTransform::from_json(a.to_json());
    CHECK(b.kind() == TransformKind::Rigid);
    CHECK((a.matrix() - b.matrix()).cwiseAbs().maxCoeff() < 1e-15);
    CHECK((a.after(a.inverse()).matrix() - Mat4::Identity()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("deformable registration basics") {
    const Geometry g = centered_cube(32);
    const VolumeGrid fixed = blob_image(g);
    RegConfig cfg;

    SUBCASE("fixed equals moving") {
        const DeformableResult r = register_deformable(fixed, fixed, AffineTransform::identity(), cfg);
        CHECK(r.field.max_norm() < 0.2);
        CHECK(r.positive_jacobian_fraction >= 0.999);
    }
    SUBCASE("zero iterations return the affine init") {
        cfg.deformable_iterations = {0, 0, 0};
        const AffineTransform init = AffineTransform::rotation(Vec3::UnitX(), 2.0 * kDeg, Vec3::Zero(), Vec3(1, 0, -1));
        const DeformableResult r = register_deformable(fixed, fixed, init, cfg);
        CHECK(r.field.displacements() == DeformationField::from_affine(g, init).displacements());
        CHECK(r.iterations == 0);
    }
    SUBCASE("recovers a smooth warp") {
        const VolumeGrid& pf = phantom().t1_map;
        const LabelVolume& truth_labels = phantom().truth;
        const Geometry& pg = pf.geometry();
        WarpSpec w;
        w.seed = 31;
        w.max_displacement_mm = 3.0;
        const DeformationField truth = random_diffeo(w, pg);
        const DeformationField truth_inv = invert_field(truth).field;
        const VolumeGrid moving = resample(pf, pg, truth_inv);  // fixed = moving o truth
        const DeformableResult r = register_deformable(pf, moving, AffineTransform::identity(), cfg);
        const LabelVolume back = warp_labels(warp_labels(truth_labels, truth_inv, pg), r.field, pg);
        const LabelVolume unregistered = warp_labels(truth_labels, truth_inv, pg);
        // Right pulvinar, the largest nucleus.
        CHECK(label_dice(back, truth_labels, 1) >= 0.9);
        CHECK(label_dice(back, truth_labels, 1) > label_dice(unregistered, truth_labels, 1));
        CHECK(!r.metric_history.empty());
        CHECK(r.positive_jacobian_fraction >= 0.999);
    }
    SUBCASE("folding guard") {
        cfg.min_positive_jacobian_fraction = 1.5;
        require_error(ErrorCode::FoldingDetected,
                      [&] { register_deformable(fixed, fixed, AffineTransform::identity(), cfg); });
    }
}
