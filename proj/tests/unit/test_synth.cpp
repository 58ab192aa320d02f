#include <doctest.h>

#include <cmath>
#include <random>

#include "atlasfuse/synth.hpp"
#include "fixtures.hpp"

using namespace atlasfuse;
using namespace atlasfuse::testing;

namespace {

SynthesisParams signed_params(double ti = 750.0) {
    SynthesisParams p;
    p.ti_ms = ti;
    p.output = SynthOutput::Signed;
    return p;
}

} // namespace

TEST_CASE("null point at TI / ln 2") {
    const double t1 = 750.0 / std::log(2.0);
    CHECK(t1 == doctest::Approx(1082.0212806667).epsilon(1e-12));
    CHECK(std::abs(synthesize_voxel(t1, 1.0, signed_params())) < 1e-9);
    CHECK(std::abs(synthesize_voxel(t1, 1.0, SynthesisParams{})) < 1e-9);
}

TEST_CASE("signed value at T1 = 1500 ms") {
    const long double oracle = 1.0L - 2.0L * std::exp(-0.5L);
    const double s = synthesize_voxel(1500.0, 1.0, signed_params());
    CHECK(std::abs(s - static_cast<double>(oracle)) < 1e-15);
    CHECK(s == doctest::Approx(-0.2130613).epsilon(1e-6));
    CHECK(synthesize_voxel(1500.0, 1.0, SynthesisParams{}) == doctest::Approx(0.2130613).epsilon(1e-6));
    CHECK(synthesize_voxel(1500.0, 2.5, signed_params()) == doctest::Approx(2.5 * s));
}

TEST_CASE("T1 at or below the floor outputs zero") {
    for (double t1 : {0.0, -20.0, 0.5, 1.0}) {
        CHECK(synthesize_voxel(t1, 1.0, signed_params()) == 0.0);
        CHECK(synthesize_voxel(t1, 1.0, SynthesisParams{}) == 0.0);
    }
    CHECK(synthesize_voxel(1.0001, 1.0, signed_params()) != 0.0);
}

TEST_CASE("signed output is strictly decreasing in T1") {
    std::mt19937_64 rng(42);
    std::uniform_real_distribution<double> u(1.5, 6000.0);
    const SynthesisParams p = signed_params();
    for (int n = 0; n < 10000; ++n) {
        double a = u(rng), b = u(rng);
        if (a == b) continue;
        if (a > b) std::swap(a, b);
        REQUIRE(synthesize_voxel(a, 1.0, p) > synthesize_voxel(b, 1.0, p));
    }
}

TEST_CASE("zero crossing found by bisection") {
    const SynthesisParams p = signed_params();
    double lo = 10.0, hi = 5000.0;  // s(lo) > 0 > s(hi)
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (synthesize_voxel(mid, 1.0, p) > 0.0 ? lo : hi) = mid;
    }
    CHECK(std::abs(0.5 * (lo + hi) - 750.0 / std::log(2.0)) < 1e-6);
}

TEST_CASE("output ranges") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-100.0, 20000.0);
    for (int n = 0; n < 2000; ++n) {
        const double t1 = u(rng);
        const double m = synthesize_voxel(t1, 1.0, SynthesisParams{});
        const double s = synthesize_voxel(t1, 1.0, signed_params());
        CHECK(m >= 0.0);
        CHECK(s > -1.0);
        CHECK(s <= 1.0);
        CHECK(m == std::abs(s));
    }
}

TEST_CASE("volume synthesis with T1 maps in seconds and an M0 map") {
    VolumeGrid t1(cube_geometry(3));
    for (std::size_t i = 0; i < t1.size(); ++i) t1[i] = 0.1 * static_cast<double>(i);  // seconds
    VolumeGrid m0(t1.geometry());
    for (std::size_t i = 0; i < m0.size(); ++i) m0[i] = 1.0 + 0.01 * static_cast<double>(i);
    SynthesisParams p = signed_params();
    p.t1_unit_scale = 1000.0;
    const VolumeGrid out = synthesize_wmn(t1, p, m0);
    CHECK(out.geometry().matches(t1.geometry(), 0.0));
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == synthesize_voxel(t1[i] * 1000.0, m0[i], signed_params()));
    CHECK(out[0] == 0.0);
}

TEST_CASE("synthesis errors") {
    VolumeGrid t1(cube_geometry(3), 1000.0);
    SynthesisParams p;
    p.ti_ms = 0.0;
    try {
        synthesize_wmn(t1, p);
        FAIL("expected NonPositiveTI");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::NonPositiveTI);
    }
    p.ti_ms = -750.0;
    CHECK_THROWS_AS(synthesize_voxel(1000.0, 1.0, p), Error);
    try {
        synthesize_wmn(t1, SynthesisParams{}, VolumeGrid(cube_geometry(4), 1.0));
        FAIL("expected GeometryMismatch");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::GeometryMismatch);
    }
}
