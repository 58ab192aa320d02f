#include <doctest.h>

#include <algorithm>
#include <random>

#include "atlasfuse/fusion.hpp"
#include "atlasfuse/grid.hpp"
#include "fixtures.hpp"

using namespace atlasfuse;
using namespace atlasfuse::testing;

namespace {

template <class F>
void require_error(ErrorCode code, F&& fn) {
    try {
        fn();
        FAIL("expected " << error_name(code));
    } catch (const Error& e) {
        CHECK(e.code() == code);
    }
}

LabelVolume single_voxel(std::int32_t code) { return LabelVolume(cube_geometry(1), code); }

/// Closed-form 3x3 solve by cofactors, then the clamp-and-renormalize rule.
std::vector<double> cramer_weights(const std::vector<std::vector<double>>& d, double beta, double eps) {
    double m[3][3];
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < d[i].size(); ++p) s += d[i][p] * d[j][p];
            m[i][j] = std::pow(s, beta) + (i == j ? eps : 0.0);
        }
    const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                       m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                       m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    std::vector<double> w(3);
    for (int c = 0; c < 3; ++c) {
        double a[3][3];
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) a[i][j] = j == c ? 1.0 : m[i][j];
        w[c] = (a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
                a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])) /
               det;
    }
    double s = w[0] + w[1] + w[2];
    for (auto& x : w) x = std::max(0.0, x / s);
    s = w[0] + w[1] + w[2];
    for (auto& x : w) x /= s;
    return w;
}

} // namespace

TEST_CASE("majority vote examples") {
    const LabelVolume a1 = single_voxel(1), a2 = single_voxel(2), a0 = single_voxel(0);
    CHECK(majority_vote(std::vector{a1, a1, a2})[0] == 1);
    CHECK(majority_vote(std::vector{a1, a2})[0] == 1);
    CHECK(majority_vote(std::vector{a2, a1})[0] == 1);
    CHECK(majority_vote(std::vector{a2, a0})[0] == 0);
    CHECK(majority_vote(std::vector{a2, a2, a0, a1})[0] == 2);
}

TEST_CASE("majority vote of identical maps is that map") {
    std::mt19937_64 rng(1);
    const LabelVolume l = random_labels(cube_geometry(9), rng, 7);
    for (int n : {1, 2, 5}) CHECK(majority_vote(std::vector<LabelVolume>(n, l)) == l);
}

TEST_CASE("majority vote errors") {
    require_error(ErrorCode::EmptyAtlasList, [] { majority_vote(std::vector<LabelVolume>{}); });
    require_error(ErrorCode::GeometryMismatch,
                  [] { majority_vote(std::vector{LabelVolume(cube_geometry(2)), LabelVolume(cube_geometry(3))}); });
}

TEST_CASE("orthogonal errors give equal weights") {
    const auto w = jlf_weights({{1.0, 0.0}, {0.0, 1.0}}, 2.0, 1e-12);
    REQUIRE(w.size() == 2);
    CHECK(std::abs(w[0] - 0.5) < 1e-6);
    CHECK(std::abs(w[1] - 0.5) < 1e-6);
}

TEST_CASE("a perfect atlas dominates") {
    const double eps = 1e-6;
    const auto w = jlf_weights({{1.0, 1.0}, {0.0, 0.0}}, 2.0, eps);
    // (M + eps I) = diag(4 + eps, eps), so w is proportional to (1/(4+eps), 1/eps).
    const double expect2 = (1.0 / eps) / (1.0 / eps + 1.0 / (4.0 + eps));
    CHECK(w[1] > 0.99);
    CHECK(std::abs(w[1] - expect2) < 1e-6);
    CHECK(std::abs(w[0] + w[1] - 1.0) < 1e-15);
}

TEST_CASE("weights match a cofactor solve on random systems") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 2.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<std::vector<double>> d(3, std::vector<double>(5));
        for (auto& row : d)
            for (auto& x : row) x = u(rng);
        const double beta = trial % 2 ? 2.0 : 1.0;
        const double eps = 0.1 + u(rng);
        const auto w = jlf_weights(d, beta, eps);
        const auto oracle = cramer_weights(d, beta, eps);
        double sum = 0.0;
        for (int i = 0; i < 3; ++i) {
            CHECK(w[i] >= 0.0);
            CHECK(std::abs(w[i] - oracle[i]) < 1e-9);
            sum += w[i];
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("weight solve errors") {
    require_error(ErrorCode::SingularDependency, [] { jlf_weights({{1.0}, {1.0}}, 2.0, 0.0); });
    require_error(ErrorCode::EmptyAtlasList, [] { jlf_weights({}, 2.0, 1.0); });
}

TEST_CASE("identical atlases make JLF equal majority voting") {
    std::mt19937_64 rng(2);
    const Geometry g = cube_geometry(10);
    const VolumeGrid target = random_volume(g, rng);
    std::vector<LabelVolume> labels;
    for (int i = 0; i < 4; ++i) labels.push_back(random_labels(g, rng, 3, 0.4));
    const std::vector<VolumeGrid> intens(4, target);
    const LabelVolume jlf = joint_label_fusion(target, intens, labels, JlfParams{});
    CHECK(jlf == majority_vote(labels));

    const std::vector<LabelVolume> same(5, labels[0]);
    const std::vector<VolumeGrid> same_i(5, target);
    CHECK(joint_label_fusion(target, same_i, same, JlfParams{}) == labels[0]);
    CHECK(majority_vote(same) == labels[0]);
}

TEST_CASE("single atlas is returned unchanged") {
    std::mt19937_64 rng(3);
    const Geometry g = cube_geometry(8);
    const VolumeGrid target = random_volume(g, rng);
    const std::vector<VolumeGrid> ai{random_volume(g, rng)};
    const std::vector<LabelVolume> al{random_labels(g, rng, 4)};
    CHECK(joint_label_fusion(target, ai, al, JlfParams{}) == al[0]);
    CHECK(majority_vote(al) == al[0]);
}

TEST_CASE("atlas order does not change the fused labels") {
    std::mt19937_64 rng(4);
    const Geometry g = cube_geometry(16);
    const VolumeGrid target = gaussian_smooth(random_volume(g, rng), 1.0);
    std::vector<VolumeGrid> ai;
    std::vector<LabelVolume> al;
    std::normal_distribution<double> n(0.0, 0.02);
    for (int i = 0; i < 5; ++i) {
        VolumeGrid v = target;
        for (auto& x : v.data()) x += n(rng);
        ai.push_back(v);
        al.push_back(random_labels(g, rng, 3, 0.5));
    }
    JlfParams p;
    p.patch_radius = 1;
    p.search_radius = 1;
    const LabelVolume ref = joint_label_fusion(target, ai, al, p);
    const LabelVolume mv = majority_vote(al);
    std::vector<int> order{0, 1, 2, 3, 4};
    for (int trial = 0; trial < 4; ++trial) {
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<VolumeGrid> pi;
        std::vector<LabelVolume> pl;
        for (int k : order) {
            pi.push_back(ai[k]);
            pl.push_back(al[k]);
        }
        CHECK(joint_label_fusion(target, pi, pl, p) == ref);
        CHECK(majority_vote(pl) == mv);
    }
}

TEST_CASE("thread count does not change the fused labels") {
    std::mt19937_64 rng(6);
    const Geometry g = cube_geometry(14);
    const VolumeGrid target = random_volume(g, rng);
    std::vector<VolumeGrid> ai;
    std::vector<LabelVolume> al;
    for (int i = 0; i < 3; ++i) {
        ai.push_back(random_volume(g, rng));
        al.push_back(random_labels(g, rng, 2));
    }
    JlfParams p;
    p.search_radius = 1;
    p.threads = 1;
    const LabelVolume one = joint_label_fusion(target, ai, al, p);
    p.threads = 4;
    CHECK(joint_label_fusion(target, ai, al, p) == one);
}

TEST_CASE("local search compensates a one-voxel misalignment") {
    const Geometry g = cube_geometry(24);
    const VolumeGrid target = blob_image(g);
    const LabelVolume truth = ball(g, Vec3(11.5, 11.5, 11.5), 5.0);
    const AffineTransform shift = AffineTransform::translation(Vec3(1, 0, 0));
    const VolumeGrid moved = resample(target, g, shift);
    const LabelVolume moved_l = resample(truth, g, shift);
    const std::vector<VolumeGrid> ai{moved, moved};
    const std::vector<LabelVolume> al{moved_l, moved_l};
    auto mismatches = [&](int search) {
        JlfParams p;
        p.search_radius = search;
        const LabelVolume out = joint_label_fusion(target, ai, al, p);
        std::size_t m = 0;
        for (std::size_t i = 0; i < out.size(); ++i) m += out[i] != truth[i];
        return m;
    };
    const std::size_t none = mismatches(0);
    CHECK(none > 50);
    CHECK(mismatches(1) * 10 < none);
}

TEST_CASE("fusion input checks") {
    const Geometry g = cube_geometry(4);
    const VolumeGrid t(g, 1.0);
    const std::vector<VolumeGrid> ai{t, t};
    const std::vector<LabelVolume> one{LabelVolume(g)};
    CHECK_THROWS_AS(joint_label_fusion(t, ai, one, JlfParams{}), Error);
    require_error(ErrorCode::EmptyAtlasList,
                  [&] { joint_label_fusion(t, std::vector<VolumeGrid>{}, std::vector<LabelVolume>{}, JlfParams{}); });
    const std::vector<VolumeGrid> bad{VolumeGrid(cube_geometry(5)), t};
    const std::vector<LabelVolume> two{LabelVolume(g), LabelVolume(g)};
    require_error(ErrorCode::GeometryMismatch, [&] { joint_label_fusion(t, bad, two, JlfParams{}); });

    JlfParams p;
    p.beta = 0.0;
    require_error(ErrorCode::InvalidArgument, [&] { p.validate(); });
    p = JlfParams{};
    p.patch_radius = -1;
    require_error(ErrorCode::InvalidArgument, [&] { p.validate(); });
}

TEST_CASE("JLF parameters JSON round trip") {
    JlfParams p;
    p.patch_radius = 1;
    p.search_radius = 2;
    p.beta = 1.5;
    p.epsilon_relative = 0.2;
    const JlfParams b = JlfParams::from_json(p.to_json());
    CHECK(b.patch_radius == 1);
    CHECK(b.search_radius == 2);
    CHECK(b.beta == 1.5);
    CHECK(b.epsilon_relative == 0.2);
}
