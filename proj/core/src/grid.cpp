#include "atlasfuse/grid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sampling.hpp"

namespace atlasfuse {

namespace {

const char* hemisphere_tag(Hemisphere h) {
    switch (h) {
    case Hemisphere::Right: return "R";
    case Hemisphere::Left: return "L";
    case Hemisphere::None: return "";
    }
    return "";
}

Hemisphere parse_hemisphere(const std::string& s) {
    if (s == "R" || s == "right" || s == "Right") return Hemisphere::Right;
    if (s == "L" || s == "left" || s == "Left") return Hemisphere::Left;
    return Hemisphere::None;
}

template <class T, class Transform>
Grid<T> resample_impl(const Grid<T>& source, const Geometry& target, const Transform& map, Interp interp) {
    Grid<T> out(target);
    const Geometry& sg = source.geometry();
    const auto src = source.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Vec3 c = sg.world_to_index(map(i));
        if (interp == Interp::Nearest) {
            std::size_t off;
            if (detail::nearest_offset(sg, c, off)) out[i] = src[off];
        } else {
            detail::LinearStencil s;
            if (detail::linear_stencil(sg, c, false, s)) out[i] = static_cast<T>(detail::apply_stencil(s, src));
        }
    }
    return out;
}

auto affine_map(const Geometry& target, const AffineTransform& t) {
    const Mat4 m = t.matrix() * target.affine();
    return [m, &target](std::size_t i) {
        const Index3 idx = target.index_of(i);
        return Vec3(m.topLeftCorner<3, 3>() * Vec3(idx[0], idx[1], idx[2]) + m.topRightCorner<3, 1>());
    };
}

auto field_map(const Geometry& target, const DeformationField& f) {
    const bool same = f.geometry().matches(target, 1e-9);
    return [same, &target, &f](std::size_t i) {
        if (same) return f.map_voxel(i);
        const Index3 idx = target.index_of(i);
        const Vec3 x = target.index_to_world(idx[0], idx[1], idx[2]);
        return Vec3(x + f.sample(x, FieldBoundary::Zero));
    };
}

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    return k;
}

} // namespace

LabelScheme::LabelScheme(std::vector<LabelEntry> entries) : entries_(std::move(entries)) {
    std::set<std::int32_t> seen;
    for (const auto& e : entries_) {
        if (e.code <= 0) throw Error(ErrorCode::InvalidArgument, "label codes must be positive (0 is background)");
        if (!seen.insert(e.code).second)
            throw Error(ErrorCode::InvalidArgument, "duplicate label code " + std::to_string(e.code));
    }
}

LabelScheme LabelScheme::thalamic_default() {
    static const std::pair<const char*, const char*> kStructures[] = {
        {"Pul", "pulvinar"},
        {"VLP", "ventral lateral posterior nucleus"},
        {"MD", "mediodorsal nucleus"},
        {"VA", "ventral anterior nucleus"},
        {"VPL", "ventral posterolateral nucleus"},
        {"AV", "anteroventral nucleus"},
        {"CM", "center median nucleus"},
        {"LGN", "lateral geniculate nucleus"},
        {"VLa", "ventral lateral anterior nucleus"},
        {"MGN", "medial geniculate nucleus"},
        {"MTT", "mammillothalamic tract"},
        {"Hb", "habenula"},
    };
    std::vector<LabelEntry> entries;
    for (int side = 0; side < 2; ++side) {
        for (int i = 0; i < 12; ++i) {
            LabelEntry e;
            e.code = i + 1 + 100 * side;
            e.abbrev = kStructures[i].first;
            e.name = std::string(side == 0 ? "right " : "left ") + kStructures[i].second;
            e.hemisphere = side == 0 ? Hemisphere::Right : Hemisphere::Left;
            entries.push_back(std::move(e));
        }
    }
    return LabelScheme(std::move(entries));
}

bool LabelScheme::contains(std::int32_t code) const { return find(code) != nullptr; }

const LabelEntry* LabelScheme::find(std::int32_t code) const {
    for (const auto& e : entries_)
        if (e.code == code) return &e;
    return nullptr;
}

std::string LabelScheme::name_of(std::int32_t code) const {
    if (const auto* e = find(code)) return e->abbrev;
    return "label_" + std::to_string(code);
}

std::vector<std::int32_t> LabelScheme::codes() const {
    std::vector<std::int32_t> out;
    for (const auto& e : entries_) out.push_back(e.code);
    return out;
}

std::string LabelScheme::to_json() const {
    auto arr = nlohmann::json::array();
    for (const auto& e : entries_)
        arr.push_back({{"code", e.code}, {"abbrev", e.abbrev}, {"name", e.name}, {"hemisphere", hemisphere_tag(e.hemisphere)}});
    return arr.dump(2);
}

LabelScheme LabelScheme::from_json(const std::string& text) {
    std::vector<LabelEntry> entries;
    try {
        const auto arr = nlohmann::json::parse(text);
        if (!arr.is_array()) throw Error(ErrorCode::InvalidArgument, "label scheme must be a JSON array");
        for (const auto& item : arr) {
            LabelEntry e;
            e.code = item.at("code").get<std::int32_t>();
            e.abbrev = item.value("abbrev", std::string());
            e.name = item.value("name", e.abbrev);
            e.hemisphere = parse_hemisphere(item.value("hemisphere", std::string()));
            entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::InvalidArgument, std::string("label scheme JSON: ") + ex.what());
    }
    return LabelScheme(std::move(entries));
}

LabelScheme LabelScheme::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

void LabelScheme::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    out << to_json() << '\n';
}

void validate_labels(const LabelVolume& labels, const LabelScheme& scheme) {
    for (std::int32_t c : label_set(labels)) {
        if (c < 0) throw Error(ErrorCode::InvalidArgument, "negative label code " + std::to_string(c));
        if (c != 0 && !scheme.contains(c))
            throw Error(ErrorCode::InvalidArgument, "label code " + std::to_string(c) + " is not in the scheme");
    }
}

std::set<std::int32_t> label_set(const LabelVolume& labels) {
    std::set<std::int32_t> s;
    for (std::int32_t v : labels.data()) s.insert(v);
    return s;
}

CropBox CropBox::clipped(const Index3& dims) const {
    CropBox b = *this;
    for (int d = 0; d < 3; ++d) {
        b.min[d] = std::max(b.min[d], 0);
        b.max[d] = std::min(b.max[d], dims[d] - 1);
    }
    return b;
}

std::string CropBox::to_json() const {
    nlohmann::json j;
    j["min"] = {min[0], min[1], min[2]};
    j["max"] = {max[0], max[1], max[2]};
    return j.dump(2);
}

CropBox CropBox::from_json(const std::string& text) {
    CropBox b;
    try {
        const auto j = nlohmann::json::parse(text);
        for (int d = 0; d < 3; ++d) {
            b.min[d] = j.at("min").at(d).get<int>();
            b.max[d] = j.at("max").at(d).get<int>();
        }
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::InvalidArgument, std::string("crop box JSON: ") + ex.what());
    }
    return b;
}

VolumeGrid resample(const VolumeGrid& source, const Geometry& target, const AffineTransform& transform, Interp interp) {
    return resample_impl(source, target, affine_map(target, transform), interp);
}

VolumeGrid resample(const VolumeGrid& source, const Geometry& target, const DeformationField& transform, Interp interp) {
    return resample_impl(source, target, field_map(target, transform), interp);
}

LabelVolume resample(const LabelVolume& source, const Geometry& target, const AffineTransform& transform, Interp interp) {
    if (interp != Interp::Nearest)
        throw Error(ErrorCode::InterpMismatch, "labelmaps require nearest-neighbor interpolation");
    return resample_impl(source, target, affine_map(target, transform), interp);
}

LabelVolume resample(const LabelVolume& source, const Geometry& target, const DeformationField& transform, Interp interp) {
    if (interp != Interp::Nearest)
        throw Error(ErrorCode::InterpMismatch, "labelmaps require nearest-neighbor interpolation");
    return resample_impl(source, target, field_map(target, transform), interp);
}

double sample_linear(const VolumeGrid& v, const Vec3& index, double fill) {
    detail::LinearStencil s;
    if (!detail::linear_stencil(v.geometry(), index, false, s)) return fill;
    return detail::apply_stencil(s, v.data());
}

double sample_world(const VolumeGrid& v, const Vec3& world, double fill) {
    return sample_linear(v, v.geometry().world_to_index(world), fill);
}

Geometry crop_geometry(const Geometry& g, const CropBox& box) {
    const CropBox b = box.clipped(g.dims());
    if (b.empty()) throw Error(ErrorCode::EmptyBox, "crop box is empty after clipping");
    Mat4 shift = Mat4::Identity();
    for (int d = 0; d < 3; ++d) shift(d, 3) = b.min[d];
    return Geometry(b.extent(), g.affine() * shift);
}

namespace {
template <class T>
Grid<T> crop_impl(const Grid<T>& v, const CropBox& box) {
    const CropBox b = box.clipped(v.dims());
    Grid<T> out(crop_geometry(v.geometry(), box));
    const Index3 e = b.extent();
    for (int k = 0; k < e[2]; ++k)
        for (int j = 0; j < e[1]; ++j)
            for (int i = 0; i < e[0]; ++i) out(i, j, k) = v(i + b.min[0], j + b.min[1], k + b.min[2]);
    return out;
}
} // namespace

VolumeGrid crop(const VolumeGrid& volume, const CropBox& box) { return crop_impl(volume, box); }
LabelVolume crop(const LabelVolume& volume, const CropBox& box) { return crop_impl(volume, box); }

LabelVolume paste(const LabelVolume& full, const LabelVolume& part, const CropBox& box) {
    const CropBox b = box.clipped(full.dims());
    if (part.dims() != b.extent()) throw Error(ErrorCode::GeometryMismatch, "pasted part does not match box extent");
    LabelVolume out = full;
    const Index3 e = b.extent();
    for (int k = 0; k < e[2]; ++k)
        for (int j = 0; j < e[1]; ++j)
            for (int i = 0; i < e[0]; ++i) out(i + b.min[0], j + b.min[1], k + b.min[2]) = part(i, j, k);
    return out;
}

CropBox label_bounding_box(const LabelVolume& labels, int margin) {
    const Index3& n = labels.dims();
    CropBox box{{n[0], n[1], n[2]}, {-1, -1, -1}};
    bool any = false;
    for (int k = 0; k < n[2]; ++k)
        for (int j = 0; j < n[1]; ++j)
            for (int i = 0; i < n[0]; ++i) {
                if (labels(i, j, k) == 0) continue;
                any = true;
                const int idx[3] = {i, j, k};
                for (int d = 0; d < 3; ++d) {
                    box.min[d] = std::min(box.min[d], idx[d]);
                    box.max[d] = std::max(box.max[d], idx[d]);
                }
            }
    if (!any) throw Error(ErrorCode::AllBackground, "labelmap has no foreground voxels");
    for (int d = 0; d < 3; ++d) {
        box.min[d] -= margin;
        box.max[d] += margin;
    }
    return box.clipped(n);
}

void gaussian_smooth_inplace(std::vector<double>& data, const Index3& n, double sigma) {
    if (sigma <= 0.0) return;
    const std::vector<double> kernel = gaussian_kernel(sigma);
    const int radius = static_cast<int>(kernel.size() / 2);
    const std::size_t stride[3] = {1, static_cast<std::size_t>(n[0]), static_cast<std::size_t>(n[0]) * n[1]};
    std::vector<double> line, out;
    for (int axis = 0; axis < 3; ++axis) {
        const int len = n[axis];
        if (len == 1) continue;
        line.resize(len);
        out.resize(len);
        const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
        for (int q = 0; q < n[a2]; ++q) {
            for (int p = 0; p < n[a1]; ++p) {
                const std::size_t base = p * stride[a1] + q * stride[a2];
                for (int t = 0; t < len; ++t) line[t] = data[base + t * stride[axis]];
                for (int t = 0; t < len; ++t) {
                    double acc = 0.0, wsum = 0.0;
                    const int lo = std::max(0, t - radius), hi = std::min(len - 1, t + radius);
                    for (int s = lo; s <= hi; ++s) {
                        const double w = kernel[s - t + radius];
                        acc += w * line[s];
                        wsum += w;
                    }
                    out[t] = acc / wsum;
                }
                for (int t = 0; t < len; ++t) data[base + t * stride[axis]] = out[t];
            }
        }
    }
}

VolumeGrid gaussian_smooth(const VolumeGrid& v, double sigma_voxels) {
    std::vector<double> data(v.data().begin(), v.data().end());
    gaussian_smooth_inplace(data, v.dims(), sigma_voxels);
    return VolumeGrid(v.geometry(), std::move(data));
}

Geometry downsample_geometry(const Geometry& g, int factor) {
    if (factor < 1) throw Error(ErrorCode::InvalidArgument, "downsample factor must be >= 1");
    Index3 dims;
    for (int d = 0; d < 3; ++d) dims[d] = (g.dims()[d] + factor - 1) / factor;
    Mat4 scale = Mat4::Identity();
    for (int d = 0; d < 3; ++d) scale(d, d) = factor;
    return Geometry(dims, g.affine() * scale);
}

VolumeGrid downsample(const VolumeGrid& v, int factor) {
    if (factor == 1) return v;
    const VolumeGrid smooth = gaussian_smooth(v, 0.5 * factor);
    VolumeGrid out(downsample_geometry(v.geometry(), factor));
    const Index3& n = out.dims();
    for (int k = 0; k < n[2]; ++k)
        for (int j = 0; j < n[1]; ++j)
            for (int i = 0; i < n[0]; ++i) out(i, j, k) = smooth(i * factor, j * factor, k * factor);
    return out;
}

} // namespace atlasfuse
