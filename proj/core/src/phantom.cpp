#include "atlasfuse/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <random>

#include "atlasfuse/register.hpp"

namespace atlasfuse {

namespace {

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

// Stream tags keep independent draws from one seed apart.
constexpr std::uint64_t kStreamPhantomNoise = 1;
constexpr std::uint64_t kStreamWarp = 2;
constexpr std::uint64_t kStreamPriorNoise = 3;
constexpr std::uint64_t kStreamSubjectNoise = 4;

bool inside_ellipsoid(const Vec3& p, const Vec3& c, const Vec3& a) {
    const Vec3 q = (p - c).cwiseQuotient(a);
    return q.squaredNorm() <= 1.0;
}

/// Volume-preserving rasterization. Each voxel near the ellipsoid gets its covered
/// fraction from 4^3 subsamples; the best-covered voxels (ties to the smaller
/// normalized radius, then the lower offset) are labeled until their count equals
/// the summed coverage. Plain center sampling is off by several percent for small
/// nuclei whenever the lattice is not aligned with the center.
void rasterize_nucleus(const NucleusSpec& n, Phantom& out) {
    constexpr int kSub = 4;
    const Geometry& g = out.truth.geometry();
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    for (int c = 0; c < 8; ++c) {
        const Vec3 corner = n.center_mm + Vec3(c & 1 ? 1 : -1, c & 2 ? 1 : -1, c & 4 ? 1 : -1).cwiseProduct(n.semi_axes_mm);
        const Vec3 idx = g.world_to_index(corner);
        lo = lo.cwiseMin(idx);
        hi = hi.cwiseMax(idx);
    }
    struct Candidate {
        double coverage;
        double radius;
        std::size_t offset;
    };
    std::vector<Candidate> candidates;
    double total = 0.0;
    const Index3& d = g.dims();
    for (int k = std::max(0, int(std::floor(lo.z())) - 1); k <= std::min(d[2] - 1, int(std::ceil(hi.z())) + 1); ++k)
        for (int j = std::max(0, int(std::floor(lo.y())) - 1); j <= std::min(d[1] - 1, int(std::ceil(hi.y())) + 1); ++j)
            for (int i = std::max(0, int(std::floor(lo.x())) - 1); i <= std::min(d[0] - 1, int(std::ceil(hi.x())) + 1); ++i) {
                int inside = 0;
                for (int c = 0; c < kSub; ++c)
                    for (int b = 0; b < kSub; ++b)
                        for (int a = 0; a < kSub; ++a) {
                            const Vec3 sub(i + (a + 0.5) / kSub - 0.5, j + (b + 0.5) / kSub - 0.5, k + (c + 0.5) / kSub - 0.5);
                            inside += inside_ellipsoid(g.index_to_world(sub), n.center_mm, n.semi_axes_mm);
                        }
                if (inside == 0) continue;
                const double coverage = double(inside) / (kSub * kSub * kSub);
                total += coverage;
                const Vec3 q = (g.index_to_world(i, j, k) - n.center_mm).cwiseQuotient(n.semi_axes_mm);
                candidates.push_back({coverage, q.norm(), g.offset(i, j, k)});
            }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.coverage != b.coverage) return a.coverage > b.coverage;
        if (a.radius != b.radius) return a.radius < b.radius;
        return a.offset < b.offset;
    });
    // Voxels already taken by a touching neighbour are skipped, not shared.
    std::size_t want = static_cast<std::size_t>(std::llround(total));
    for (const auto& c : candidates) {
        if (want == 0) break;
        if (out.truth[c.offset] != 0) continue;
        out.truth[c.offset] = n.code;
        out.t1_map[c.offset] = n.t1_ms;
        --want;
    }
}

/// `inside_only` leaves exact-zero (air) voxels untouched, as for T1 maps.
void add_noise(VolumeGrid& v, double sigma, std::mt19937_64& rng, bool inside_only = false) {
    if (!(sigma > 0.0)) return;
    std::normal_distribution<double> nd(0.0, sigma);
    for (auto& x : v.data()) {
        const double e = nd(rng);
        if (!inside_only || x != 0.0) x += e;
    }
}

double value_range(const VolumeGrid& v) {
    const auto [lo, hi] = std::minmax_element(v.values().begin(), v.values().end());
    return *hi - *lo;
}

std::uint64_t child_seed(std::uint64_t seed, std::uint64_t index) {
    // splitmix64 step, so neighbouring indices give unrelated seeds.
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Label transfer that votes over a 3x3x3 sub-voxel lattice, so deformed structures are
/// voxelized by area rather than by a single center sample. Ties keep the center label
/// when it is among the leaders, else the lowest code.
LabelVolume transfer_labels(const LabelVolume& source, const DeformationField& field) {
    const Geometry& g = field.geometry();
    const Geometry& sg = source.geometry();
    LabelVolume out(g);
    std::vector<std::pair<std::int32_t, int>> votes;
    for (int k = 0; k < g.nz(); ++k)
        for (int j = 0; j < g.ny(); ++j)
            for (int i = 0; i < g.nx(); ++i) {
                votes.clear();
                std::int32_t center = 0;
                for (int c = 0; c < 27; ++c) {
                    const Vec3 idx(i + (c % 3 - 1) / 3.0, j + (c / 3 % 3 - 1) / 3.0, k + (c / 9 - 1) / 3.0);
                    const Vec3 p = g.index_to_world(idx);
                    const Vec3 q = sg.world_to_index(p + field.sample(p, FieldBoundary::Clamp));
                    const int a = static_cast<int>(std::floor(q.x() + 0.5));
                    const int b = static_cast<int>(std::floor(q.y() + 0.5));
                    const int d = static_cast<int>(std::floor(q.z() + 0.5));
                    const std::int32_t code = sg.contains(a, b, d) ? source(a, b, d) : 0;
                    if (c == 13) center = code;
                    auto it = std::find_if(votes.begin(), votes.end(), [code](const auto& v) { return v.first == code; });
                    if (it == votes.end())
                        votes.emplace_back(code, 1);
                    else
                        ++it->second;
                }
                int best = 0;
                for (const auto& v : votes) best = std::max(best, v.second);
                std::int32_t winner = std::numeric_limits<std::int32_t>::max();
                for (const auto& v : votes)
                    if (v.second == best) winner = std::min(winner, v.first);
                for (const auto& v : votes)
                    if (v.second == best && v.first == center) winner = center;
                out(i, j, k) = winner;
            }
    return out;
}

} // namespace

PhantomSpec PhantomSpec::thalamic_default(std::uint64_t seed) {
    struct Layout {
        std::int32_t code;
        Vec3 offset;  // x is lateral (away from the midline)
        Vec3 axes;
        double t1;
    };
    static const Layout kLayout[] = {
        {1, {0.0, -12.0, 0.0}, {5.0, 5.5, 5.0}, 1500.0},   // Pul
        {2, {0.0, -1.0, -6.0}, {5.5, 5.0, 5.0}, 1650.0},   // VLP
        {3, {0.0, -1.0, 6.0}, {5.5, 5.0, 5.0}, 1800.0},    // MD
        {4, {0.0, 10.5, 6.0}, {5.5, 5.0, 5.0}, 1950.0},    // VA
        {5, {0.0, 10.5, -6.0}, {5.5, 5.0, 5.0}, 1400.0},   // VPL
        {6, {0.0, 10.5, 15.0}, {3.0, 3.5, 3.0}, 2100.0},   // AV
        {7, {-9.0, -1.0, 0.0}, {2.5, 3.5, 3.5}, 1300.0},   // CM
        {8, {0.0, -12.0, -14.5}, {3.0, 3.5, 3.0}, 1750.0}, // LGN
        {9, {9.5, 3.0, 0.0}, {3.0, 4.0, 3.0}, 2000.0},     // VLa
        {10, {0.0, 0.0, -15.0}, {3.0, 3.0, 3.0}, 1550.0},  // MGN
        {11, {0.0, 0.0, 15.0}, {2.5, 3.5, 3.0}, 1350.0},   // MTT
        {12, {0.0, -12.0, 14.5}, {3.0, 3.0, 3.0}, 1900.0}, // Hb
    };
    constexpr double kHemisphereX = 12.5;
    constexpr double kLeftT1Offset = 20.0;

    PhantomSpec spec;
    spec.seed = seed;
    for (int side = 0; side < 2; ++side) {
        const double sign = side == 0 ? 1.0 : -1.0;
        for (const auto& l : kLayout) {
            NucleusSpec n;
            n.code = l.code + 100 * side;
            n.center_mm = Vec3(sign * (kHemisphereX + l.offset.x()), l.offset.y(), l.offset.z());
            n.semi_axes_mm = l.axes;
            n.t1_ms = l.t1 + side * kLeftT1Offset;
            spec.nuclei.push_back(n);
        }
    }
    return spec;
}

Geometry PhantomSpec::geometry() const {
    const Vec3 spacing = Vec3::Constant(spacing_mm);
    const Vec3 half(0.5 * (dims[0] - 1), 0.5 * (dims[1] - 1), 0.5 * (dims[2] - 1));
    return Geometry::axis_aligned(dims, spacing, -half * spacing_mm);
}

void PhantomSpec::validate() const {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1 || !(spacing_mm > 0.0))
        throw Error(ErrorCode::InvalidArgument, "phantom lattice must have positive dims and spacing");
    if (!(surround_t1_ms > 0.0) || noise_fraction < 0.0)
        throw Error(ErrorCode::InvalidArgument, "surround T1 must be > 0 and noise >= 0");
    const Geometry g = geometry();
    const Vec3 lo = g.index_to_world(Vec3::Zero());
    const Vec3 hi = g.index_to_world(Vec3(dims[0] - 1, dims[1] - 1, dims[2] - 1));
    for (std::size_t a = 0; a < nuclei.size(); ++a) {
        const auto& n = nuclei[a];
        if (n.code <= 0) throw Error(ErrorCode::InvalidArgument, "nucleus codes must be positive");
        if (!(n.t1_ms > 0.0)) throw Error(ErrorCode::InvalidArgument, "nucleus T1 must be > 0");
        if ((n.semi_axes_mm.array() <= 0.0).any()) throw Error(ErrorCode::InvalidArgument, "semi-axes must be > 0");
        if (((n.center_mm - n.semi_axes_mm).array() < lo.array()).any() ||
            ((n.center_mm + n.semi_axes_mm).array() > hi.array()).any())
            throw Error(ErrorCode::InvalidArgument, "nucleus " + std::to_string(n.code) + " leaves the lattice");
        for (std::size_t b = 0; b < a; ++b)
            if (nuclei[b].code == n.code)
                throw Error(ErrorCode::InvalidArgument, "duplicate nucleus code " + std::to_string(n.code));
    }
    // Intersections are searched on a quarter-voxel lattice over each pair's box overlap.
    const double step = 0.25 * spacing_mm;
    for (std::size_t a = 0; a < nuclei.size(); ++a)
        for (std::size_t b = 0; b < a; ++b) {
            const auto& p = nuclei[a];
            const auto& q = nuclei[b];
            const Vec3 blo = (p.center_mm - p.semi_axes_mm).cwiseMax(q.center_mm - q.semi_axes_mm);
            const Vec3 bhi = (p.center_mm + p.semi_axes_mm).cwiseMin(q.center_mm + q.semi_axes_mm);
            if ((blo.array() > bhi.array()).any()) continue;
            for (double z = blo.z(); z <= bhi.z(); z += step)
                for (double y = blo.y(); y <= bhi.y(); y += step)
                    for (double x = blo.x(); x <= bhi.x(); x += step) {
                        const Vec3 pt(x, y, z);
                        if (inside_ellipsoid(pt, p.center_mm, p.semi_axes_mm) &&
                            inside_ellipsoid(pt, q.center_mm, q.semi_axes_mm))
                            throw Error(ErrorCode::OverlappingNuclei, "nuclei " + std::to_string(q.code) + " and " +
                                                                         std::to_string(p.code) + " intersect");
                    }
        }
}

Phantom generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    const Geometry g = spec.geometry();
    Phantom out{VolumeGrid(g), LabelVolume(g)};
    double t1_max = spec.surround_t1_ms;
    for (const auto& n : spec.nuclei) t1_max = std::max(t1_max, n.t1_ms);

    for (int k = 0; k < g.nz(); ++k)
        for (int j = 0; j < g.ny(); ++j)
            for (int i = 0; i < g.nx(); ++i)
                if (inside_ellipsoid(g.index_to_world(Vec3(i, j, k)), Vec3::Zero(), spec.head_semi_axes_mm))
                    out.t1_map[g.offset(i, j, k)] = spec.surround_t1_ms;
    for (const auto& n : spec.nuclei) rasterize_nucleus(n, out);

    auto rng = make_rng(spec.seed, kStreamPhantomNoise);
    add_noise(out.t1_map, spec.noise_fraction * t1_max, rng, true);
    return out;
}

DeformationField random_diffeo(const WarpSpec& spec, const Geometry& geometry) {
    if (spec.max_displacement_mm < 0.0 || !(spec.smoothness_sigma_mm > 0.0) || spec.taper_mm < 0.0)
        throw Error(ErrorCode::InvalidArgument, "warp spec needs max displacement >= 0 and sigma > 0");
    DeformationField field(geometry);
    if (spec.max_displacement_mm == 0.0) return field;

    const Index3& n = geometry.dims();
    const Vec3 spacing = geometry.spacing();
    const double sigma_vox = spec.smoothness_sigma_mm / spacing.mean();
    auto rng = make_rng(spec.seed, kStreamWarp);
    std::normal_distribution<double> nd(0.0, 1.0);
    // Noise is drawn on a lattice padded by 3 sigma and cropped after smoothing, so the
    // field is statistically uniform. Smoothing the unpadded lattice would average fewer
    // samples near the faces and inflate the amplitude exactly where the taper is steepest.
    const int pad = static_cast<int>(std::ceil(3.0 * sigma_vox));
    const Index3 pn{n[0] + 2 * pad, n[1] + 2 * pad, n[2] + 2 * pad};
    std::array<std::vector<double>, 3> comp;
    for (auto& c : comp) {
        std::vector<double> padded(static_cast<std::size_t>(pn[0]) * pn[1] * pn[2]);
        for (auto& x : padded) x = nd(rng);
        gaussian_smooth_inplace(padded, pn, sigma_vox);
        c.resize(geometry.voxel_count());
        for (int k = 0; k < n[2]; ++k)
            for (int j = 0; j < n[1]; ++j)
                for (int i = 0; i < n[0]; ++i)
                    c[geometry.offset(i, j, k)] =
                        padded[(i + pad) + static_cast<std::size_t>(pn[0]) * ((j + pad) + static_cast<std::size_t>(pn[1]) * (k + pad))];
    }

    auto taper = [&](int idx, int axis) {
        if (spec.taper_mm == 0.0) return 1.0;
        const double d = std::min(idx, n[axis] - 1 - idx) * spacing[axis];
        if (d >= spec.taper_mm) return 1.0;
        const double s = std::sin(0.5 * std::numbers::pi * d / spec.taper_mm);
        return s * s;
    };
    for (int k = 0; k < n[2]; ++k)
        for (int j = 0; j < n[1]; ++j)
            for (int i = 0; i < n[0]; ++i) {
                const std::size_t v = geometry.offset(i, j, k);
                const double t = taper(i, 0) * taper(j, 1) * taper(k, 2);
                field[v] = t * Vec3(comp[0][v], comp[1][v], comp[2][v]);
            }
    const double peak = field.max_norm();
    if (!(peak > 0.0)) return field;
    const double scale = spec.max_displacement_mm / peak;
    for (auto& u : field.displacements()) u *= scale;

    const VolumeGrid jac = jacobian_determinant(field);
    const double min_det = *std::min_element(jac.values().begin(), jac.values().end());
    if (!(min_det > spec.min_jacobian))
        throw Error(ErrorCode::JacobianViolation,
                    "random warp has min Jacobian " + std::to_string(min_det) + " <= " + std::to_string(spec.min_jacobian));
    return field;
}

AtlasLibrary derive_atlases(const VolumeGrid& base_intensity, const LabelVolume& base_labels, const LabelScheme& scheme,
                            const AtlasDeriveSpec& spec) {
    if (spec.count < 1) throw Error(ErrorCode::EmptyAtlasList, "need at least one prior");
    if (spec.noise_fraction < 0.0) throw Error(ErrorCode::InvalidArgument, "noise fraction must be >= 0");
    const Geometry& g = base_intensity.geometry();
    require_same_geometry(g, base_labels.geometry(), "derive_atlases");
    validate_labels(base_labels, scheme);

    AtlasLibrary lib;
    lib.scheme = scheme;
    lib.crop_box = label_bounding_box(base_labels, spec.crop_margin);
    const double sigma = spec.noise_fraction * value_range(base_intensity);
    VolumeGrid sum(g);
    for (int i = 0; i < spec.count; ++i) {
        WarpSpec ws;
        ws.seed = child_seed(spec.seed, static_cast<std::uint64_t>(i));
        ws.max_displacement_mm = spec.max_displacement_mm;
        ws.smoothness_sigma_mm = spec.smoothness_sigma_mm;
        // The prior is the base pulled through an exact random field h; its template warp is
        // the numerical inverse of h. Pulling the prior back then composes h after its inverse,
        // the order in which the sampled inverse stays accurate.
        const DeformationField h = random_diffeo(ws, g);

        AtlasPrior prior;
        char id[32];
        std::snprintf(id, sizeof id, "prior_%02d", i);
        prior.id = id;
        DeformationField warp(g);
        if (h.max_norm() == 0.0) {
            prior.intensity = base_intensity;
            prior.labels = base_labels;
        } else {
            warp = invert_field(h, 1e-3, 200).field;
            prior.intensity = resample(base_intensity, g, h, Interp::Trilinear);
            prior.labels = transfer_labels(base_labels, h);
        }
        auto rng = make_rng(ws.seed, kStreamPriorNoise);
        add_noise(prior.intensity, sigma, rng);

        const VolumeGrid back = h.max_norm() == 0.0 ? prior.intensity : resample(prior.intensity, g, warp);
        for (std::size_t v = 0; v < sum.size(); ++v) sum[v] += back[v];
        prior.warp_to_template = std::move(warp);
        lib.priors.push_back(std::move(prior));
    }
    for (auto& x : sum.data()) x /= spec.count;
    lib.template_image = std::move(sum);
    return lib;
}

Subject make_subject(const VolumeGrid& base_t1, const LabelVolume& base_labels, const SubjectSpec& spec) {
    const Geometry& g = base_t1.geometry();
    require_same_geometry(g, base_labels.geometry(), "make_subject");
    const Index3& n = g.dims();
    const Vec3 center = g.index_to_world(Vec3(0.5 * (n[0] - 1), 0.5 * (n[1] - 1), 0.5 * (n[2] - 1)));
    const AffineTransform rigid = AffineTransform::rotation(spec.rotation_axis.normalized(),
                                                            spec.rotation_deg * std::numbers::pi / 180.0, center,
                                                            spec.translation_mm);
    WarpSpec ws;
    ws.seed = spec.seed;
    ws.max_displacement_mm = spec.max_displacement_mm;
    ws.smoothness_sigma_mm = spec.smoothness_sigma_mm;
    const DeformationField r = random_diffeo(ws, g);

    DeformationField s(g);
    for (std::size_t v = 0; v < s.size(); ++v) {
        const Index3 ix = g.index_of(v);
        const Vec3 y = g.index_to_world(Vec3(ix[0], ix[1], ix[2]));
        s[v] = rigid.apply(y + r[v]) - y;
    }
    Subject out{resample(base_t1, g, s), transfer_labels(base_labels, s), std::move(s)};
    auto rng = make_rng(spec.seed, kStreamSubjectNoise);
    add_noise(out.t1_map, spec.noise_fraction * value_range(base_t1), rng, true);
    return out;
}

} // namespace atlasfuse
