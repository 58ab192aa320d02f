#include "atlasfuse/register.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <nlohmann/json.hpp>

#include "sampling.hpp"

namespace atlasfuse {

namespace {

constexpr double kBadMetric = -1e30;

// ---------------------------------------------------------------------------
// Shared helpers

std::pair<double, double> value_range(std::span<const double> v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return {*lo, *hi};
}

void require_nondegenerate(const VolumeGrid& v, const char* what) {
    if (v.size() == 0) throw Error(ErrorCode::DegenerateInput, std::string(what) + " image is empty");
    const auto [lo, hi] = value_range(v.data());
    if (!(hi > lo)) throw Error(ErrorCode::DegenerateInput, std::string(what) + " image has constant intensity");
}

/// World-space axis-aligned bounding box of a lattice, optionally mapped by `t`.
std::pair<Vec3, Vec3> world_box(const Geometry& g, const Mat4& t = Mat4::Identity()) {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = -lo;
    for (int c = 0; c < 8; ++c) {
        const Vec3 idx((c & 1) ? g.nx() - 1 : 0, (c & 2) ? g.ny() - 1 : 0, (c & 4) ? g.nz() - 1 : 0);
        const Vec3 w = g.index_to_world(idx);
        const Vec3 p = t.topLeftCorner<3, 3>() * w + t.topRightCorner<3, 1>();
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    return {lo, hi};
}

void require_overlap(const Geometry& fixed, const Geometry& moving, const Mat4& fixed_to_moving) {
    const auto [flo, fhi] = world_box(fixed, fixed_to_moving);
    const auto [mlo, mhi] = world_box(moving);
    for (int d = 0; d < 3; ++d)
        if (fhi[d] < mlo[d] || mhi[d] < flo[d])
            throw Error(ErrorCode::NoOverlap, "fixed and moving fields of view do not overlap");
}

Vec3 world_center(const Geometry& g) {
    return g.index_to_world(Vec3((g.nx() - 1) / 2.0, (g.ny() - 1) / 2.0, (g.nz() - 1) / 2.0));
}

double world_radius(const Geometry& g) {
    const auto [lo, hi] = world_box(g);
    return std::max(1.0, 0.5 * (hi - lo).norm());
}

std::vector<double> normalized_copy(const VolumeGrid& v) {
    const auto [lo, hi] = value_range(v.data());
    const double scale = hi > lo ? 1.0 / (hi - lo) : 1.0;
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) * scale;
    return out;
}

void check_levels(const RegConfig& c, const std::vector<int>& iterations) {
    c.validate();
    if (iterations.size() != c.shrink_factors.size())
        throw Error(ErrorCode::InvalidArgument, "iterations per level must match the number of pyramid levels");
}

// ---------------------------------------------------------------------------
// Mutual information cost for the linear stages

class MutualInformationCost {
public:
    /// With `jitter`, samples sit at fixed pseudo-random sub-voxel offsets so both images are
    /// interpolated; grid-aligned poses then no longer score an interpolation-free bonus.
    MutualInformationCost(const VolumeGrid& fixed, const VolumeGrid& moving, int bins, std::size_t max_samples,
                          bool jitter = true)
        : moving_(moving), bins_(bins) {
        const std::size_t n = fixed.size();
        const std::size_t stride = std::max<std::size_t>(1, (n + max_samples - 1) / max_samples);
        const auto [flo, fhi] = value_range(fixed.data());
        const double fscale = fhi > flo ? (bins_ - 1) / (fhi - flo) : 0.0;
        const Geometry& g = fixed.geometry();
        std::mt19937_64 rng(0x6d69);
        std::uniform_real_distribution<double> offset(-0.5, 0.5);
        for (std::size_t i = 0; i < n; i += stride) {
            const Index3 idx = g.index_of(i);
            Vec3 c(idx[0], idx[1], idx[2]);
            double value = fixed[i];
            if (jitter) {
                c += Vec3(offset(rng), offset(rng), offset(rng));
                detail::LinearStencil st;
                if (!detail::linear_stencil(g, c, false, st)) continue;
                value = detail::apply_stencil(st, fixed.data());
            }
            points_.push_back(g.index_to_world(c));
            fixed_bins_.push_back((value - flo) * fscale);
        }
        const auto [mlo, mhi] = value_range(moving.data());
        moving_min_ = mlo;
        moving_scale_ = mhi > mlo ? (bins_ - 1) / (mhi - mlo) : 0.0;
        joint_.resize(static_cast<std::size_t>(bins_) * bins_);
    }

    /// MI of fixed vs. moving pulled back through `fixed_to_moving`.
    double operator()(const Mat4& fixed_to_moving) const {
        std::fill(joint_.begin(), joint_.end(), 0.0);
        const Mat4 m = moving_.geometry().inverse_affine() * fixed_to_moving;
        const Mat3 lin = m.topLeftCorner<3, 3>();
        const Vec3 off = m.topRightCorner<3, 1>();
        const auto data = moving_.data();
        double count = 0.0, inside = 0.0;
        for (std::size_t s = 0; s < points_.size(); ++s) {
            detail::LinearStencil st;
            // Outside the moving image reads as 0, as in resampling; dropping those samples instead
            // would let the optimizer raise MI by pushing background out of the overlap.
            double value = 0.0;
            if (detail::linear_stencil(moving_.geometry(), lin * points_[s] + off, false, st)) {
                value = detail::apply_stencil(st, data);
                inside += 1.0;
            }
            const double b = (value - moving_min_) * moving_scale_;
            const auto [b0, frac] = split_bin(b);
            const auto [a0, afrac] = split_bin(fixed_bins_[s]);
            double* row = joint_.data() + static_cast<std::size_t>(a0) * bins_;
            row[b0] += (1.0 - afrac) * (1.0 - frac);
            row[b0 + 1] += (1.0 - afrac) * frac;
            row[bins_ + b0] += afrac * (1.0 - frac);
            row[bins_ + b0 + 1] += afrac * frac;
            count += 1.0;
        }
        if (inside < 0.1 * count) return kBadMetric;
        std::vector<double> pf(bins_, 0.0), pm(bins_, 0.0);
        for (int i = 0; i < bins_; ++i)
            for (int j = 0; j < bins_; ++j) {
                const double p = joint_[static_cast<std::size_t>(i) * bins_ + j] / count;
                pf[i] += p;
                pm[j] += p;
            }
        double mi = 0.0;
        for (int i = 0; i < bins_; ++i)
            for (int j = 0; j < bins_; ++j) {
                const double p = joint_[static_cast<std::size_t>(i) * bins_ + j] / count;
                if (p > 0.0) mi += p * std::log(p / (pf[i] * pm[j]));
            }
        return mi;
    }

private:
    std::pair<int, double> split_bin(double b) const {
        const int b0 = std::clamp(static_cast<int>(std::floor(b)), 0, bins_ - 2);
        return {b0, std::clamp(b - b0, 0.0, 1.0)};
    }

    const VolumeGrid& moving_;
    int bins_;
    std::vector<Vec3> points_;
    std::vector<double> fixed_bins_;
    double moving_min_ = 0.0;
    double moving_scale_ = 0.0;
    mutable std::vector<double> joint_;
};

// ---------------------------------------------------------------------------
// Parameterizations: y = L (x - c) + c + t

struct RigidParams {
    Vec3 center;
    Mat4 operator()(const std::vector<double>& p) const {
        const Mat3 r = (Eigen::AngleAxisd(p[2], Vec3::UnitZ()) * Eigen::AngleAxisd(p[1], Vec3::UnitY()) *
                        Eigen::AngleAxisd(p[0], Vec3::UnitX()))
                           .toRotationMatrix();
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = r;
        m.topRightCorner<3, 1>() = center - r * center + Vec3(p[3], p[4], p[5]);
        return m;
    }
};

struct AffineParams {
    Vec3 center;
    Mat4 operator()(const std::vector<double>& p) const {
        Mat3 l;
        l << p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8];
        Mat4 m = Mat4::Identity();
        m.topLeftCorner<3, 3>() = l;
        m.topRightCorner<3, 1>() = center - l * center + Vec3(p[9], p[10], p[11]);
        return m;
    }
};

/// Coordinate-wise pattern search with per-parameter adaptive steps.
template <class Build>
std::vector<double> coordinate_search(std::vector<double> p, std::vector<double> step, const std::vector<double>& min_step,
                                      int max_iter, const Build& build, const MutualInformationCost& cost,
                                      const RegConfig& config) {
    const std::vector<double> max_step = step;
    double best = cost(build(p));
    std::vector<double> history{best};
    for (int it = 0; it < max_iter; ++it) {
        for (std::size_t k = 0; k < p.size(); ++k) {
            bool improved = false;
            for (double sign : {1.0, -1.0}) {
                std::vector<double> q = p;
                q[k] += sign * step[k];
                const double v = cost(build(q));
                if (v > best + 1e-12) {
                    best = v;
                    p = std::move(q);
                    improved = true;
                    break;
                }
            }
            step[k] = improved ? std::min(step[k] * 1.25, max_step[k]) : step[k] * 0.5;
        }
        history.push_back(best);
        bool small = true;
        for (std::size_t k = 0; k < p.size(); ++k) small = small && step[k] < min_step[k];
        if (small) break;
        const int w = config.convergence_window;
        if (static_cast<int>(history.size()) > w) {
            const double prev = history[history.size() - 1 - w];
            if (std::abs(best - prev) <= config.convergence_tol * std::max(std::abs(best), 1e-12)) break;
        }
    }
    return p;
}

struct Pyramid {
    std::vector<VolumeGrid> levels;
    Pyramid(const VolumeGrid& v, const std::vector<int>& factors) {
        for (int f : factors) levels.push_back(downsample(v, f));
    }
};

template <class Params>
std::vector<double> run_linear(const VolumeGrid& fixed, const VolumeGrid& moving, const RegConfig& config,
                               std::vector<double> p, const Params& build, std::size_t n_rotational) {
    const Pyramid fp(fixed, config.shrink_factors), mp(moving, config.shrink_factors);
    const double radius = world_radius(fixed.geometry());
    for (int level = 0; level < config.levels(); ++level) {
        const int f = config.shrink_factors[level];
        const double step_mm = config.linear_step_mm * f;
        const double min_mm = config.linear_min_step_mm * f;
        std::vector<double> step(p.size()), min_step(p.size());
        for (std::size_t k = 0; k < p.size(); ++k) {
            const bool rot = k < n_rotational;
            step[k] = rot ? step_mm / radius : step_mm;
            min_step[k] = rot ? min_mm / radius : min_mm;
        }
        const MutualInformationCost cost(fp.levels[level], mp.levels[level], config.histogram_bins,
                                         config.max_linear_samples);
        p = coordinate_search(std::move(p), step, min_step, config.linear_iterations[level], build, cost, config);
    }
    return p;
}

// ---------------------------------------------------------------------------
// Deformable stage

/// Clipped box sums of radius r along every axis.
std::vector<double> box_sum(const std::vector<double>& in, const Index3& n, int r) {
    std::vector<double> data = in;
    const std::size_t stride[3] = {1, static_cast<std::size_t>(n[0]), static_cast<std::size_t>(n[0]) * n[1]};
    std::vector<double> prefix;
    for (int axis = 0; axis < 3; ++axis) {
        const int len = n[axis];
        prefix.assign(len + 1, 0.0);
        const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        for (int q = 0; q < n[a2]; ++q)
            for (int p = 0; p < n[a1]; ++p) {
                const std::size_t base = p * stride[a1] + q * stride[a2];
                for (int t = 0; t < len; ++t) prefix[t + 1] = prefix[t] + data[base + t * stride[axis]];
                for (int t = 0; t < len; ++t) {
                    const int lo = std::max(0, t - r), hi = std::min(len - 1, t + r);
                    data[base + t * stride[axis]] = prefix[hi + 1] - prefix[lo];
                }
            }
    }
    return data;
}

std::vector<double> window_counts(const Index3& n, int r) {
    std::vector<double> c(static_cast<std::size_t>(n[0]) * n[1] * n[2]);
    std::size_t i = 0;
    auto len = [r](int t, int size) { return std::min(size - 1, t + r) - std::max(0, t - r) + 1; };
    for (int k = 0; k < n[2]; ++k)
        for (int j = 0; j < n[1]; ++j)
            for (int x = 0; x < n[0]; ++x) c[i++] = static_cast<double>(len(x, n[0]) * len(j, n[1]) * len(k, n[2]));
    return c;
}

struct LnccFixedStats {
    std::vector<double> count, sum, sum_sq;
};

struct LnccEval {
    double mean_cc = 0.0;
    std::vector<double> dcc;  // d(local CC)/d(moving intensity) per voxel
};

LnccEval evaluate_lncc(const std::vector<double>& f, const std::vector<double>& w, const LnccFixedStats& fs,
                       const Index3& n, int r, bool want_derivative) {
    std::vector<double> fw(f.size()), ww(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) {
        fw[i] = f[i] * w[i];
        ww[i] = w[i] * w[i];
    }
    const std::vector<double> sw = box_sum(w, n, r);
    const std::vector<double> sww = box_sum(ww, n, r);
    const std::vector<double> sfw = box_sum(fw, n, r);

    LnccEval out;
    if (want_derivative) out.dcc.assign(f.size(), 0.0);
    double total = 0.0;
    std::size_t valid = 0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        const double cnt = fs.count[i];
        const double fbar = fs.sum[i] / cnt, wbar = sw[i] / cnt;
        const double a = sfw[i] - fs.sum[i] * wbar;
        const double b = fs.sum_sq[i] - fs.sum[i] * fbar;
        const double c = sww[i] - sw[i] * wbar;
        const double eps = 1e-8 * cnt;
        if (!(b > eps && c > eps)) continue;
        total += a * a / (b * c);
        ++valid;
        if (want_derivative) out.dcc[i] = 2.0 * a / (b * c) * ((f[i] - fbar) - (a / c) * (w[i] - wbar));
    }
    out.mean_cc = valid ? total / static_cast<double>(valid) : 0.0;
    return out;
}

/// Samples the moving image at A(x + u(x)) for every fixed-lattice voxel.
std::vector<double> warp_moving(const Geometry& fg, const std::vector<Vec3>& world, const std::vector<Vec3>& u,
                                const Mat4& affine, const Geometry& mg, const std::vector<double>& moving) {
    const Mat4 m = mg.inverse_affine() * affine;
    const Mat3 lin = m.topLeftCorner<3, 3>();
    const Vec3 off = m.topRightCorner<3, 1>();
    std::vector<double> out(fg.voxel_count(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
        detail::LinearStencil s;
        if (detail::linear_stencil(mg, lin * (world[i] + u[i]) + off, false, s)) out[i] = detail::apply_stencil(s, moving);
    }
    return out;
}

std::vector<Vec3> lattice_points(const Geometry& g) {
    std::vector<Vec3> pts(g.voxel_count());
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const Index3 idx = g.index_of(i);
        pts[i] = g.index_to_world(idx[0], idx[1], idx[2]);
    }
    return pts;
}

/// World-space gradient of a lattice image by central differences.
std::vector<Vec3> world_gradient(const std::vector<double>& v, const Geometry& g) {
    const Index3& n = g.dims();
    const Mat3 jinv_t = g.inverse_affine().topLeftCorner<3, 3>().transpose();
    std::vector<Vec3> grad(v.size());
    for (int k = 0; k < n[2]; ++k)
        for (int j = 0; j < n[1]; ++j)
            for (int i = 0; i < n[0]; ++i) {
                const int idx[3] = {i, j, k};
                Vec3 gi;
                for (int d = 0; d < 3; ++d) {
                    int lo[3] = {i, j, k}, hi[3] = {i, j, k};
                    lo[d] = std::max(0, idx[d] - 1);
                    hi[d] = std::min(n[d] - 1, idx[d] + 1);
                    const int span = hi[d] - lo[d];
                    gi[d] = span ? (v[g.offset(hi[0], hi[1], hi[2])] - v[g.offset(lo[0], lo[1], lo[2])]) / span : 0.0;
                }
                grad[g.offset(i, j, k)] = jinv_t * gi;
            }
    return grad;
}

void smooth_field(std::vector<Vec3>& u, const Index3& n, double sigma) {
    if (sigma <= 0.0) return;
    std::vector<double> comp(u.size());
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < u.size(); ++i) comp[i] = u[i][c];
        gaussian_smooth_inplace(comp, n, sigma);
        for (std::size_t i = 0; i < u.size(); ++i) u[i][c] = comp[i];
    }
}

/// u(x + delta(x)) + delta(x) on one lattice, clamped at the borders.
std::vector<Vec3> compose_on_lattice(const std::vector<Vec3>& delta, const std::vector<Vec3>& u, const Geometry& g) {
    const Mat3 jinv = g.inverse_affine().topLeftCorner<3, 3>();
    std::vector<Vec3> out(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        const Index3 idx = g.index_of(i);
        detail::LinearStencil s;
        detail::linear_stencil(g, Vec3(idx[0], idx[1], idx[2]) + jinv * delta[i], true, s);
        Vec3 v = Vec3::Zero();
        for (int c = 0; c < 8; ++c) v += s.weight[c] * u[s.offset[c]];
        out[i] = v + delta[i];
    }
    return out;
}

std::vector<Vec3> upsample_field(const std::vector<Vec3>& u, const Geometry& from, const Geometry& to) {
    const DeformationField coarse(from, u);
    std::vector<Vec3> out(to.voxel_count());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Index3 idx = to.index_of(i);
        out[i] = coarse.sample(to.index_to_world(idx[0], idx[1], idx[2]), FieldBoundary::Clamp);
    }
    return out;
}

} // namespace

// ---------------------------------------------------------------------------

void RegConfig::validate() const {
    if (shrink_factors.empty()) throw Error(ErrorCode::InvalidArgument, "at least one pyramid level is required");
    for (int f : shrink_factors)
        if (f < 1) throw Error(ErrorCode::InvalidArgument, "shrink factors must be >= 1");
    if (linear_iterations.size() != shrink_factors.size() || deformable_iterations.size() != shrink_factors.size())
        throw Error(ErrorCode::InvalidArgument, "iterations per level must match the number of pyramid levels");
    if (sigma_update < 0.0 || sigma_total < 0.0) throw Error(ErrorCode::InvalidArgument, "smoothing sigmas must be >= 0");
    if (histogram_bins < 2) throw Error(ErrorCode::InvalidArgument, "need at least 2 histogram bins");
    if (cc_radius < 1) throw Error(ErrorCode::InvalidArgument, "local CC radius must be >= 1");
}

std::string RegConfig::to_json() const {
    nlohmann::json j;
    j["shrink_factors"] = shrink_factors;
    j["linear_iterations"] = linear_iterations;
    j["deformable_iterations"] = deformable_iterations;
    j["linear_metric"] = "mutual_information";
    j["histogram_bins"] = histogram_bins;
    j["deformable_metric"] = "local_cc";
    j["cc_radius"] = cc_radius;
    j["sigma_update"] = sigma_update;
    j["sigma_total"] = sigma_total;
    j["linear_step_mm"] = linear_step_mm;
    j["linear_min_step_mm"] = linear_min_step_mm;
    j["max_linear_samples"] = max_linear_samples;
    j["deformable_step"] = deformable_step;
    j["deformable_min_step"] = deformable_min_step;
    j["convergence_tol"] = convergence_tol;
    j["convergence_window"] = convergence_window;
    j["metric_tolerance"] = metric_tolerance;
    j["min_positive_jacobian_fraction"] = min_positive_jacobian_fraction;
    return j.dump(2);
}

RegConfig RegConfig::from_json(const std::string& text) {
    RegConfig c;
    try {
        const auto j = nlohmann::json::parse(text);
        c.shrink_factors = j.value("shrink_factors", c.shrink_factors);
        c.linear_iterations = j.value("linear_iterations", c.linear_iterations);
        c.deformable_iterations = j.value("deformable_iterations", c.deformable_iterations);
        c.histogram_bins = j.value("histogram_bins", c.histogram_bins);
        c.cc_radius = j.value("cc_radius", c.cc_radius);
        c.sigma_update = j.value("sigma_update", c.sigma_update);
        c.sigma_total = j.value("sigma_total", c.sigma_total);
        c.linear_step_mm = j.value("linear_step_mm", c.linear_step_mm);
        c.linear_min_step_mm = j.value("linear_min_step_mm", c.linear_min_step_mm);
        c.max_linear_samples = j.value("max_linear_samples", c.max_linear_samples);
        c.deformable_step = j.value("deformable_step", c.deformable_step);
        c.deformable_min_step = j.value("deformable_min_step", c.deformable_min_step);
        c.convergence_tol = j.value("convergence_tol", c.convergence_tol);
        c.convergence_window = j.value("convergence_window", c.convergence_window);
        c.metric_tolerance = j.value("metric_tolerance", c.metric_tolerance);
        c.min_positive_jacobian_fraction = j.value("min_positive_jacobian_fraction", c.min_positive_jacobian_fraction);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("registration config JSON: ") + e.what());
    }
    c.validate();
    return c;
}

AffineTransform register_rigid(const VolumeGrid& fixed, const VolumeGrid& moving, const RegConfig& config) {
    check_levels(config, config.linear_iterations);
    require_nondegenerate(fixed, "fixed");
    require_nondegenerate(moving, "moving");
    require_overlap(fixed.geometry(), moving.geometry(), Mat4::Identity());
    const RigidParams build{world_center(fixed.geometry())};
    const auto p = run_linear(fixed, moving, config, std::vector<double>(6, 0.0), build, 3);
    return AffineTransform(build(p), TransformKind::Rigid);
}

AffineTransform register_affine(const VolumeGrid& fixed, const VolumeGrid& moving, const RegConfig& config,
                                const std::optional<AffineTransform>& init) {
    check_levels(config, config.linear_iterations);
    require_nondegenerate(fixed, "fixed");
    require_nondegenerate(moving, "moving");
    require_overlap(fixed.geometry(), moving.geometry(), Mat4::Identity());
    const AffineTransform start = init ? *init : register_rigid(fixed, moving, config);
    const AffineParams build{world_center(fixed.geometry())};
    // Re-express the start transform about the fixed-image center.
    const Mat3 l = start.linear();
    const Vec3 t = start.apply(build.center) - build.center;
    std::vector<double> p{l(0, 0), l(0, 1), l(0, 2), l(1, 0), l(1, 1), l(1, 2), l(2, 0), l(2, 1), l(2, 2), t[0], t[1], t[2]};
    p = run_linear(fixed, moving, config, std::move(p), build, 9);
    return AffineTransform(build(p), TransformKind::Affine);
}

DeformableResult register_deformable(const VolumeGrid& fixed, const VolumeGrid& moving, const AffineTransform& init,
                                     const RegConfig& config) {
    check_levels(config, config.deformable_iterations);
    require_nondegenerate(fixed, "fixed");
    require_nondegenerate(moving, "moving");
    require_overlap(fixed.geometry(), moving.geometry(), init.matrix());

    DeformableResult result;
    const Mat4 affine = init.matrix();
    std::vector<Vec3> u;
    Geometry prev_geometry;
    bool have_prev = false;
    bool level_converged = false;

    for (int level = 0; level < config.levels(); ++level) {
        const int f = config.shrink_factors[level];
        const VolumeGrid fl = downsample(fixed, f);
        const VolumeGrid ml = downsample(moving, f);
        const Geometry& g = fl.geometry();
        const Index3& n = g.dims();

        u = have_prev ? upsample_field(u, prev_geometry, g) : std::vector<Vec3>(g.voxel_count(), Vec3::Zero());
        prev_geometry = g;
        have_prev = true;

        const std::vector<double> fnorm = normalized_copy(fl);
        const std::vector<double> mnorm = normalized_copy(ml);
        const std::vector<Vec3> world = lattice_points(g);
        LnccFixedStats fs;
        fs.count = window_counts(n, config.cc_radius);
        fs.sum = box_sum(fnorm, n, config.cc_radius);
        {
            std::vector<double> sq(fnorm.size());
            for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = fnorm[i] * fnorm[i];
            fs.sum_sq = box_sum(sq, n, config.cc_radius);
        }
        const double min_spacing = g.spacing().minCoeff();

        double step = config.deformable_step;
        double best_metric = -std::numeric_limits<double>::infinity();
        std::vector<Vec3> u_best = u;
        std::vector<Vec3> direction;
        std::vector<double> level_history;
        level_converged = false;

        for (int it = 0; it < config.deformable_iterations[level]; ++it) {
            ++result.iterations;
            const std::vector<double> w = warp_moving(g, world, u, affine, ml.geometry(), mnorm);
            LnccEval eval = evaluate_lncc(fnorm, w, fs, n, config.cc_radius, true);

            if (eval.mean_cc < best_metric - config.metric_tolerance) {
                u = u_best;
                step *= 0.5;
                if (step < config.deformable_min_step) {
                    level_converged = true;
                    break;
                }
            } else {
                best_metric = eval.mean_cc;
                u_best = u;
                result.metric_history.push_back(eval.mean_cc);
                level_history.push_back(eval.mean_cc);
                const std::vector<Vec3> grad = world_gradient(w, g);
                direction.resize(grad.size());
                for (std::size_t i = 0; i < grad.size(); ++i) direction[i] = eval.dcc[i] * grad[i];

                const int win = config.convergence_window;
                if (static_cast<int>(level_history.size()) > win) {
                    const double prev = level_history[level_history.size() - 1 - win];
                    if (std::abs(eval.mean_cc - prev) <= config.convergence_tol * std::max(std::abs(eval.mean_cc), 1e-12)) {
                        level_converged = true;
                        break;
                    }
                }
            }

            double max_norm = 0.0;
            for (const auto& d : direction) max_norm = std::max(max_norm, d.norm());
            if (!(max_norm > 0.0)) {
                level_converged = true;
                break;
            }
            const double scale = step * min_spacing / max_norm;
            std::vector<Vec3> delta(direction.size());
            for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = scale * direction[i];
            smooth_field(delta, n, config.sigma_update);
            u = compose_on_lattice(delta, u_best, g);
            smooth_field(u, n, config.sigma_total);
        }
        // The last proposal was never scored; keep the best accepted iterate.
        if (!result.metric_history.empty() && config.deformable_iterations[level] > 0) u = u_best;
    }

    const Geometry& fg = fixed.geometry();
    std::vector<Vec3> full = u;
    if (!have_prev || !prev_geometry.matches(fg, 0.0)) {
        full = have_prev ? upsample_field(u, prev_geometry, fg) : std::vector<Vec3>(fg.voxel_count(), Vec3::Zero());
    }
    const std::vector<Vec3> world = lattice_points(fg);
    std::vector<Vec3> total(world.size());
    for (std::size_t i = 0; i < world.size(); ++i) total[i] = init.apply(world[i] + full[i]) - world[i];
    result.field = DeformationField(fg, std::move(total));
    result.converged = level_converged;
    result.positive_jacobian_fraction = positive_jacobian_fraction(result.field);
    if (result.positive_jacobian_fraction < config.min_positive_jacobian_fraction)
        throw Error(ErrorCode::FoldingDetected, "positive-Jacobian fraction " +
                                                    std::to_string(result.positive_jacobian_fraction) +
                                                    " below threshold");
    return result;
}

DeformationField compose_fields(const DeformationField& outer, const DeformationField& inner) {
    DeformationField out(outer.geometry());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Vec3 y = outer.map_voxel(i);
        out[i] = inner.sample(y, FieldBoundary::Zero) + outer[i];
    }
    return out;
}

InversionResult invert_field(const DeformationField& field, double tol_mm, int max_iter,
                             const std::optional<Geometry>& target) {
    if (!(tol_mm > 0.0) || max_iter < 0) throw Error(ErrorCode::InvalidArgument, "invalid inversion tolerance/iterations");
    const Geometry g = target ? *target : field.geometry();
    const std::vector<Vec3> world = lattice_points(g);
    const double h = 0.5 * field.geometry().spacing().minCoeff();
    std::vector<Vec3> inv(world.size(), Vec3::Zero());
    std::vector<double> res(world.size());
    InversionResult result;
    double previous = std::numeric_limits<double>::infinity();
    int growth = 0;
    for (int it = 0;; ++it) {
        double residual = 0.0;
        for (std::size_t i = 0; i < world.size(); ++i) {
            res[i] = (field.sample(world[i] + inv[i], FieldBoundary::Clamp) + inv[i]).norm();
            residual = std::max(residual, res[i]);
        }
        result.residual_mm = residual;
        result.iterations = it;
        if (residual < tol_mm || it >= max_iter) break;
        if (residual > previous) {
            if (++growth >= 5) throw Error(ErrorCode::InversionDiverged, "fixed-point residual grew for 5 iterations");
        } else {
            growth = 0;
        }
        previous = residual;
        // The plain update g <- -f(x + g) contracts only where |grad f| < 1; preconditioning
        // the same residual with (I + grad f)^-1 keeps it convergent on strong warps. For a
        // locally constant f the two coincide.
        for (std::size_t i = 0; i < world.size(); ++i) {
            if (res[i] == 0.0) continue;
            const Vec3 y = world[i] + inv[i];
            const Vec3 f = field.sample(y, FieldBoundary::Clamp);
            const Vec3 r = f + inv[i];
            Mat3 a = Mat3::Identity();
            for (int d = 0; d < 3; ++d) {
                Vec3 e = Vec3::Zero();
                e[d] = h;
                a.col(d) += (field.sample(y + e, FieldBoundary::Clamp) - field.sample(y - e, FieldBoundary::Clamp)) / (2 * h);
            }
            Vec3 step = -r;
            if (std::abs(a.determinant()) > 1e-3) step = -a.inverse() * r;
            // Backtrack towards the plain update if the preconditioned one overshoots.
            Vec3 cand = inv[i] + step;
            if ((field.sample(world[i] + cand, FieldBoundary::Clamp) + cand).norm() > res[i]) {
                cand = -f;
                if ((field.sample(world[i] + cand, FieldBoundary::Clamp) + cand).norm() > res[i]) cand = inv[i] + 0.5 * step;
            }
            inv[i] = cand;
        }
    }
    result.field = DeformationField(g, std::move(inv));
    return result;
}

LabelVolume warp_labels(const LabelVolume& labels, const AffineTransform& transform, const Geometry& target) {
    return resample(labels, target, transform, Interp::Nearest);
}

LabelVolume warp_labels(const LabelVolume& labels, const DeformationField& transform, const Geometry& target) {
    return resample(labels, target, transform, Interp::Nearest);
}

VolumeGrid jacobian_determinant(const DeformationField& field) {
    const Geometry& g = field.geometry();
    const Index3& n = g.dims();
    const Mat3 jinv = g.inverse_affine().topLeftCorner<3, 3>();
    VolumeGrid out(g);
    for (int k = 0; k < n[2]; ++k)
        for (int j = 0; j < n[1]; ++j)
            for (int i = 0; i < n[0]; ++i) {
                const int idx[3] = {i, j, k};
                Mat3 du_di;  // column d = du / d(index_d)
                for (int d = 0; d < 3; ++d) {
                    int lo[3] = {i, j, k}, hi[3] = {i, j, k};
                    lo[d] = std::max(0, idx[d] - 1);
                    hi[d] = std::min(n[d] - 1, idx[d] + 1);
                    const int span = hi[d] - lo[d];
                    du_di.col(d) = span ? Vec3((field[g.offset(hi[0], hi[1], hi[2])] - field[g.offset(lo[0], lo[1], lo[2])]) / span)
                                        : Vec3::Zero();
                }
                out(i, j, k) = (Mat3::Identity() + du_di * jinv).determinant();
            }
    return out;
}

double positive_jacobian_fraction(const DeformationField& field) {
    const VolumeGrid det = jacobian_determinant(field);
    std::size_t positive = 0;
    for (double v : det.data()) positive += v > 0.0;
    return det.size() ? static_cast<double>(positive) / static_cast<double>(det.size()) : 1.0;
}

double mutual_information(const VolumeGrid& a, const VolumeGrid& b, int bins) {
    require_same_geometry(a.geometry(), b.geometry(), "mutual information");
    const MutualInformationCost cost(a, b, bins, a.size(), false);
    return cost(Mat4::Identity());
}

double mean_local_cc(const VolumeGrid& a, const VolumeGrid& b, int radius) {
    require_same_geometry(a.geometry(), b.geometry(), "local CC");
    const Index3& n = a.dims();
    const std::vector<double> fa = normalized_copy(a);
    const std::vector<double> fb = normalized_copy(b);
    LnccFixedStats fs;
    fs.count = window_counts(n, radius);
    fs.sum = box_sum(fa, n, radius);
    std::vector<double> sq(fa.size());
    for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = fa[i] * fa[i];
    fs.sum_sq = box_sum(sq, n, radius);
    return evaluate_lncc(fa, fb, fs, n, radius, false).mean_cc;
}

} // namespace atlasfuse
