#include "atlasfuse/fusion.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "parallel.hpp"

namespace atlasfuse {

namespace {

void check_common_geometry(std::span<const LabelVolume> labels) {
    if (labels.empty()) throw Error(ErrorCode::EmptyAtlasList, "no atlases to fuse");
    for (const auto& l : labels) require_same_geometry(labels.front().geometry(), l.geometry(), "label fusion");
}

/// Lowest code among those with the largest accumulated weight.
template <class Votes>
std::int32_t winning_code(const Votes& votes) {
    std::int32_t best_code = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& [code, weight] : votes) {
        if (weight > best || (weight == best && code < best_code)) {
            best = weight;
            best_code = code;
        }
    }
    return best_code;
}

using Offset3 = std::array<int, 3>;

std::vector<Offset3> cube_offsets(int radius, bool center_first) {
    std::vector<Offset3> out;
    for (int k = -radius; k <= radius; ++k)
        for (int j = -radius; j <= radius; ++j)
            for (int i = -radius; i <= radius; ++i) out.push_back({i, j, k});
    if (center_first) {
        std::stable_sort(out.begin(), out.end(), [](const Offset3& a, const Offset3& b) {
            return a[0] * a[0] + a[1] * a[1] + a[2] * a[2] < b[0] * b[0] + b[1] * b[1] + b[2] * b[2];
        });
    }
    return out;
}

/// Patch sampler with replicate padding at the lattice borders.
class PatchSampler {
public:
    PatchSampler(const Geometry& g, int radius) : g_(g), radius_(radius), offsets_(cube_offsets(radius, false)) {
        for (const auto& o : offsets_)
            linear_.push_back(static_cast<std::ptrdiff_t>(o[0]) +
                              static_cast<std::ptrdiff_t>(g.nx()) * (o[1] + static_cast<std::ptrdiff_t>(g.ny()) * o[2]));
    }

    std::size_t size() const { return offsets_.size(); }
    const std::vector<std::ptrdiff_t>& linear() const { return linear_; }

    /// True when the whole patch at (i,j,k) lies inside the lattice.
    bool interior(int i, int j, int k) const {
        const Index3& n = g_.dims();
        return i >= radius_ && j >= radius_ && k >= radius_ && i < n[0] - radius_ && j < n[1] - radius_ &&
               k < n[2] - radius_;
    }

    void gather(const std::vector<double>& img, int i, int j, int k, double* out) const {
        const Index3& n = g_.dims();
        if (interior(i, j, k)) {
            const auto base = static_cast<std::ptrdiff_t>(g_.offset(i, j, k));
            for (std::size_t p = 0; p < linear_.size(); ++p) out[p] = img[static_cast<std::size_t>(base + linear_[p])];
            return;
        }
        for (std::size_t p = 0; p < offsets_.size(); ++p) {
            const int x = std::clamp(i + offsets_[p][0], 0, n[0] - 1);
            const int y = std::clamp(j + offsets_[p][1], 0, n[1] - 1);
            const int z = std::clamp(k + offsets_[p][2], 0, n[2] - 1);
            out[p] = img[g_.offset(x, y, z)];
        }
    }

private:
    const Geometry& g_;
    int radius_;
    std::vector<Offset3> offsets_;
    std::vector<std::ptrdiff_t> linear_;
};

struct PatchStats {
    std::vector<double> mean;
    std::vector<double> inv_sd;  // 0 for flat patches
};

void zscore_params(const double* v, std::size_t m, double& mean, double& inv_sd) {
    double s = 0.0;
    for (std::size_t p = 0; p < m; ++p) s += v[p];
    mean = s / static_cast<double>(m);
    double ss = 0.0;
    for (std::size_t p = 0; p < m; ++p) ss += (v[p] - mean) * (v[p] - mean);
    const double var = m > 1 ? ss / static_cast<double>(m - 1) : 0.0;
    inv_sd = var > 1e-12 ? 1.0 / std::sqrt(var) : 0.0;
}

PatchStats patch_stats(const std::vector<double>& img, const Geometry& g, const PatchSampler& sampler) {
    PatchStats st;
    st.mean.resize(img.size());
    st.inv_sd.resize(img.size());
    std::vector<double> buf(sampler.size());
    const Index3& n = g.dims();
    for (int k = 0; k < n[2]; ++k)
        for (int j = 0; j < n[1]; ++j)
            for (int i = 0; i < n[0]; ++i) {
                sampler.gather(img, i, j, k, buf.data());
                const std::size_t o = g.offset(i, j, k);
                zscore_params(buf.data(), buf.size(), st.mean[o], st.inv_sd[o]);
            }
    return st;
}

/// Separable min or max over a cube of the given radius (clipped at borders).
template <class Op>
std::vector<std::int32_t> cube_filter(std::vector<std::int32_t> data, const Index3& n, int r, Op op) {
    const std::size_t stride[3] = {1, static_cast<std::size_t>(n[0]), static_cast<std::size_t>(n[0]) * n[1]};
    std::vector<std::int32_t> line;
    for (int axis = 0; axis < 3; ++axis) {
        const int len = n[axis];
        line.resize(len);
        const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        for (int q = 0; q < n[a2]; ++q)
            for (int p = 0; p < n[a1]; ++p) {
                const std::size_t base = p * stride[a1] + q * stride[a2];
                for (int t = 0; t < len; ++t) line[t] = data[base + t * stride[axis]];
                for (int t = 0; t < len; ++t) {
                    std::int32_t v = line[std::max(0, t - r)];
                    for (int s = std::max(0, t - r) + 1; s <= std::min(len - 1, t + r); ++s) v = op(v, line[s]);
                    data[base + t * stride[axis]] = v;
                }
            }
    }
    return data;
}

struct AtlasMatch {
    std::int32_t label = 0;
    std::vector<double> abs_diff;
};

} // namespace

void JlfParams::validate() const {
    if (patch_radius < 0 || search_radius < 0) throw Error(ErrorCode::InvalidArgument, "JLF radii must be >= 0");
    if (!(beta > 0.0)) throw Error(ErrorCode::InvalidArgument, "JLF beta must be > 0");
    if (!(epsilon_min > 0.0) || epsilon_relative < 0.0)
        throw Error(ErrorCode::InvalidArgument, "JLF regularization must be > 0");
}

std::string JlfParams::to_json() const {
    nlohmann::json j;
    j["patch_radius"] = patch_radius;
    j["search_radius"] = search_radius;
    j["beta"] = beta;
    j["epsilon_relative"] = epsilon_relative;
    j["epsilon_min"] = epsilon_min;
    j["normalization"] = "zscore_per_patch";
    return j.dump(2);
}

JlfParams JlfParams::from_json(const std::string& text) {
    JlfParams p;
    try {
        const auto j = nlohmann::json::parse(text);
        p.patch_radius = j.value("patch_radius", p.patch_radius);
        p.search_radius = j.value("search_radius", p.search_radius);
        p.beta = j.value("beta", p.beta);
        p.epsilon_relative = j.value("epsilon_relative", p.epsilon_relative);
        p.epsilon_min = j.value("epsilon_min", p.epsilon_min);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("JLF params JSON: ") + e.what());
    }
    p.validate();
    return p;
}

LabelVolume majority_vote(std::span<const LabelVolume> warped_labels) {
    check_common_geometry(warped_labels);
    LabelVolume out(warped_labels.front().geometry());
    std::map<std::int32_t, double> votes;
    for (std::size_t v = 0; v < out.size(); ++v) {
        votes.clear();
        for (const auto& l : warped_labels) votes[l[v]] += 1.0;
        out[v] = winning_code(votes);
    }
    return out;
}

std::vector<double> jlf_weights(const std::vector<std::vector<double>>& abs_differences, double beta, double epsilon) {
    const std::size_t n = abs_differences.size();
    if (n == 0) throw Error(ErrorCode::EmptyAtlasList, "no atlases to weight");
    if (!(epsilon > 0.0)) throw Error(ErrorCode::SingularDependency, "regularization must be positive");
    Eigen::MatrixXd m(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            const auto& a = abs_differences[i];
            const auto& b = abs_differences[j];
            double s = 0.0;
            for (std::size_t p = 0; p < a.size(); ++p) s += a[p] * b[p];
            const double v = beta == 2.0 ? s * s : std::pow(s, beta);
            m(i, j) = m(j, i) = v;
        }
    m.diagonal().array() += epsilon;
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
    if (ldlt.info() != Eigen::Success) throw Error(ErrorCode::SingularDependency, "dependency matrix solve failed");
    Eigen::VectorXd w = ldlt.solve(Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n)));
    const double total = w.sum();
    if (!w.allFinite() || !(std::abs(total) > 0.0))
        throw Error(ErrorCode::SingularDependency, "dependency matrix is numerically singular");
    w /= total;
    w = w.cwiseMax(0.0);
    const double clamped = w.sum();
    if (!(clamped > 0.0)) throw Error(ErrorCode::SingularDependency, "all atlas weights clamped to zero");
    w /= clamped;
    return {w.data(), w.data() + n};
}

LabelVolume joint_label_fusion(const VolumeGrid& target, std::span<const VolumeGrid> atlas_intensities,
                               std::span<const LabelVolume> atlas_labels, const JlfParams& params) {
    params.validate();
    check_common_geometry(atlas_labels);
    if (atlas_intensities.size() != atlas_labels.size())
        throw Error(ErrorCode::InvalidArgument, "atlas intensity and label counts differ");
    const Geometry& g = target.geometry();
    for (const auto& a : atlas_intensities) require_same_geometry(g, a.geometry(), "JLF atlas intensity");
    require_same_geometry(g, atlas_labels.front().geometry(), "JLF atlas labels");

    const std::size_t n_atlas = atlas_labels.size();
    // A single atlas carries weight 1 everywhere; there is nothing to arbitrate.
    if (n_atlas == 1) return atlas_labels.front();

    const Index3& dims = g.dims();
    const int sr = params.search_radius;

    // Voxels whose search windows see a single code in every atlas are decided outright.
    std::vector<std::int32_t> lo(g.voxel_count()), hi(g.voxel_count());
    for (std::size_t v = 0; v < lo.size(); ++v) {
        std::int32_t a = atlas_labels[0][v], b = a;
        for (std::size_t i = 1; i < n_atlas; ++i) {
            a = std::min(a, atlas_labels[i][v]);
            b = std::max(b, atlas_labels[i][v]);
        }
        lo[v] = a;
        hi[v] = b;
    }
    lo = cube_filter(std::move(lo), dims, sr, [](std::int32_t x, std::int32_t y) { return std::min(x, y); });
    hi = cube_filter(std::move(hi), dims, sr, [](std::int32_t x, std::int32_t y) { return std::max(x, y); });

    const PatchSampler sampler(g, params.patch_radius);
    const std::size_t m = sampler.size();
    const std::vector<Offset3> search = cube_offsets(sr, true);

    const std::vector<double> target_img(target.data().begin(), target.data().end());
    std::vector<std::vector<double>> atlas_img(n_atlas);
    std::vector<PatchStats> atlas_stats(n_atlas);
    for (std::size_t i = 0; i < n_atlas; ++i) {
        atlas_img[i].assign(atlas_intensities[i].data().begin(), atlas_intensities[i].data().end());
        atlas_stats[i] = patch_stats(atlas_img[i], g, sampler);
    }

    LabelVolume out(g);
    auto process_slice = [&](std::size_t kz) {
        const int k = static_cast<int>(kz);
        std::vector<double> tpatch(m), apatch(m), best_patch(m);
        std::vector<AtlasMatch> matches(n_atlas);
        std::vector<std::size_t> order(n_atlas);
        std::vector<std::vector<double>> ordered_diffs(n_atlas);
        std::vector<std::pair<std::int32_t, double>> votes;
        for (int j = 0; j < dims[1]; ++j)
            for (int i = 0; i < dims[0]; ++i) {
                const std::size_t v = g.offset(i, j, k);
                if (lo[v] == hi[v]) {
                    out[v] = lo[v];
                    continue;
                }
                sampler.gather(target_img, i, j, k, tpatch.data());
                double tmean, tinv;
                zscore_params(tpatch.data(), m, tmean, tinv);
                for (auto& x : tpatch) x = (x - tmean) * tinv;

                for (std::size_t a = 0; a < n_atlas; ++a) {
                    double best = std::numeric_limits<double>::infinity();
                    std::size_t best_off = v;
                    for (const auto& s : search) {
                        const int ci = i + s[0], cj = j + s[1], ck = k + s[2];
                        if (!g.contains(ci, cj, ck)) continue;
                        const std::size_t c = g.offset(ci, cj, ck);
                        const double mu = atlas_stats[a].mean[c], isd = atlas_stats[a].inv_sd[c];
                        double sad = 0.0;
                        if (sampler.interior(ci, cj, ck)) {
                            const double* base = atlas_img[a].data() + c;
                            const auto& lin = sampler.linear();
                            for (std::size_t p = 0; p < m && sad < best; ++p)
                                sad += std::abs(tpatch[p] - (base[lin[p]] - mu) * isd);
                        } else {
                            sampler.gather(atlas_img[a], ci, cj, ck, apatch.data());
                            for (std::size_t p = 0; p < m && sad < best; ++p)
                                sad += std::abs(tpatch[p] - (apatch[p] - mu) * isd);
                        }
                        if (sad < best) {
                            best = sad;
                            best_off = c;
                        }
                    }
                    const Index3 bi = g.index_of(best_off);
                    sampler.gather(atlas_img[a], bi[0], bi[1], bi[2], apatch.data());
                    const double mu = atlas_stats[a].mean[best_off], isd = atlas_stats[a].inv_sd[best_off];
                    auto& match = matches[a];
                    match.label = atlas_labels[a][best_off];
                    match.abs_diff.resize(m);
                    for (std::size_t p = 0; p < m; ++p) match.abs_diff[p] = std::abs(tpatch[p] - (apatch[p] - mu) * isd);
                }

                // Canonical atlas order so the result is independent of input order.
                std::iota(order.begin(), order.end(), 0);
                std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
                    if (matches[x].label != matches[y].label) return matches[x].label < matches[y].label;
                    return matches[x].abs_diff < matches[y].abs_diff;
                });
                double diag_sum = 0.0;
                for (std::size_t a = 0; a < n_atlas; ++a) {
                    ordered_diffs[a] = matches[order[a]].abs_diff;
                    double s = 0.0;
                    for (double d : ordered_diffs[a]) s += d * d;
                    diag_sum += params.beta == 2.0 ? s * s : std::pow(s, params.beta);
                }
                const double eps = std::max(params.epsilon_relative * diag_sum / static_cast<double>(n_atlas), params.epsilon_min);
                const std::vector<double> w = jlf_weights(ordered_diffs, params.beta, eps);

                votes.clear();
                for (std::size_t a = 0; a < n_atlas; ++a) {
                    const std::int32_t code = matches[order[a]].label;
                    auto it = std::find_if(votes.begin(), votes.end(), [code](const auto& p) { return p.first == code; });
                    if (it == votes.end())
                        votes.emplace_back(code, w[a]);
                    else
                        it->second += w[a];
                }
                out[v] = winning_code(votes);
            }
    };
    detail::parallel_for(0, static_cast<std::size_t>(dims[2]), process_slice, params.threads);
    return out;
}

} // namespace atlasfuse
