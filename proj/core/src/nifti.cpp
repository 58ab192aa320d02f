#include "atlasfuse/nifti.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <zlib.h>

namespace atlasfuse::nifti {

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDataOffset = 352;

bool has_gz_suffix(const std::filesystem::path& p) {
    const std::string s = p.string();
    return s.size() >= 3 && s.compare(s.size() - 3, 3, ".gz") == 0;
}

std::vector<unsigned char> read_all(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
    // gzread passes uncompressed files through unchanged.
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
    std::vector<unsigned char> buf;
    unsigned char chunk[1 << 16];
    for (;;) {
        const int n = gzread(f, chunk, sizeof chunk);
        if (n < 0) {
            gzclose(f);
            throw Error(ErrorCode::IoFailure, "read error in " + path.string());
        }
        if (n == 0) break;
        buf.insert(buf.end(), chunk, chunk + n);
    }
    gzclose(f);
    return buf;
}

void write_all(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
    if (has_gz_suffix(path)) {
        gzFile f = gzopen(path.string().c_str(), "wb6");
        if (!f) throw Error(ErrorCode::IoFailure, "cannot create " + path.string());
        std::size_t written = 0;
        while (written < bytes.size()) {
            const unsigned n = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - written, 1u << 24));
            if (gzwrite(f, bytes.data() + written, n) != static_cast<int>(n)) {
                gzclose(f);
                throw Error(ErrorCode::IoFailure, "write error in " + path.string());
            }
            written += n;
        }
        if (gzclose(f) != Z_OK) throw Error(ErrorCode::IoFailure, "close error in " + path.string());
        return;
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot create " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::IoFailure, "write error in " + path.string());
}

class Reader {
public:
    Reader(const std::vector<unsigned char>& buf, bool swap) : buf_(buf), swap_(swap) {}

    template <class T>
    T get(std::size_t at) const {
        if (at + sizeof(T) > buf_.size()) throw Error(ErrorCode::IoFailure, "truncated NIfTI file");
        unsigned char raw[sizeof(T)];
        std::memcpy(raw, buf_.data() + at, sizeof(T));
        if (swap_) std::reverse(raw, raw + sizeof(T));
        T v;
        std::memcpy(&v, raw, sizeof(T));
        return v;
    }

private:
    const std::vector<unsigned char>& buf_;
    bool swap_;
};

class Writer {
public:
    explicit Writer(std::vector<unsigned char>& buf) : buf_(buf) {}
    template <class T>
    void put(std::size_t at, T v) {
        static_assert(std::endian::native == std::endian::little, "writer assumes a little-endian host");
        std::memcpy(buf_.data() + at, &v, sizeof(T));
    }

private:
    std::vector<unsigned char>& buf_;
};

Mat4 quaternion_affine(double b, double c, double d, double qx, double qy, double qz, const Vec3& spacing, double qfac) {
    double a = 1.0 - (b * b + c * c + d * d);
    if (a < 1e-7) {
        const double s = 1.0 / std::sqrt(b * b + c * c + d * d);
        b *= s;
        c *= s;
        d *= s;
        a = 0.0;
    } else {
        a = std::sqrt(a);
    }
    Mat3 r;
    r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),
        2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),
        2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
    Vec3 s = spacing;
    s[2] *= qfac;
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = r * s.asDiagonal();
    m.topRightCorner<3, 1>() = Vec3(qx, qy, qz);
    return m;
}

struct Parsed {
    Header header;
    std::vector<unsigned char> bytes;
};

Parsed parse(const std::filesystem::path& path) {
    Parsed p;
    p.bytes = read_all(path);
    if (p.bytes.size() < kHeaderSize) throw Error(ErrorCode::IoFailure, "file shorter than a NIfTI-1 header");

    // Byte order: dim[0] must lie in 1..7.
    std::int16_t dim0;
    std::memcpy(&dim0, p.bytes.data() + 40, 2);
    bool swap = dim0 < 1 || dim0 > 7;
    Reader r(p.bytes, swap);
    if (swap) {
        const auto sw = r.get<std::int16_t>(40);
        if (sw < 1 || sw > 7) throw Error(ErrorCode::DimMismatch, "dim[0] outside 1..7 in either byte order");
    }
    Header& h = p.header;
    h.big_endian = swap == (std::endian::native == std::endian::little);

    const char* magic = reinterpret_cast<const char*>(p.bytes.data() + 344);
    if (std::memcmp(magic, "n+1\0", 4) != 0) throw Error(ErrorCode::BadMagic, "expected single-file magic \"n+1\"");

    for (int i = 0; i < 8; ++i) h.dim[i] = r.get<std::int16_t>(40 + 2 * i);
    h.intent_code = r.get<std::int16_t>(68);
    h.datatype = r.get<std::int16_t>(70);
    float pixdim[8];
    for (int i = 0; i < 8; ++i) pixdim[i] = r.get<float>(76 + 4 * i);
    h.vox_offset = r.get<float>(108);
    h.scl_slope = r.get<float>(112);
    h.scl_inter = r.get<float>(116);
    h.qform_code = r.get<std::int16_t>(252);
    h.sform_code = r.get<std::int16_t>(254);

    for (int d = 0; d < 3; ++d) {
        const int n = d < h.dim[0] ? h.dim[d + 1] : 1;
        if (n < 1) throw Error(ErrorCode::DimMismatch, "non-positive voxel count");
        h.dims[d] = n;
        const double s = std::abs(pixdim[d + 1]);
        h.spacing[d] = s > 0.0 ? s : 1.0;
    }

    if (h.sform_code > 0) {
        Mat4 m = Mat4::Identity();
        for (int row = 0; row < 3; ++row)
            for (int c = 0; c < 4; ++c) m(row, c) = r.get<float>(280 + 16 * row + 4 * c);
        h.affine = m;
    } else if (h.qform_code > 0) {
        const double qfac = pixdim[0] < 0 ? -1.0 : 1.0;
        h.affine = quaternion_affine(r.get<float>(256), r.get<float>(260), r.get<float>(264), r.get<float>(268),
                                     r.get<float>(272), r.get<float>(276), h.spacing, qfac);
    } else {
        h.affine = Mat4::Identity();
        for (int d = 0; d < 3; ++d) h.affine(d, d) = h.spacing[d];
    }
    if (!(h.vox_offset >= static_cast<double>(kDataOffset)))
        throw Error(ErrorCode::IoFailure, "vox_offset must be >= 352 for single-file NIfTI");
    return p;
}

std::size_t datatype_size(std::int16_t code) {
    switch (static_cast<Datatype>(code)) {
    case Datatype::UInt8: return 1;
    case Datatype::Int16: return 2;
    case Datatype::Int32: return 4;
    case Datatype::Float32: return 4;
    case Datatype::Float64: return 8;
    }
    throw Error(ErrorCode::UnsupportedDatatype, "datatype code " + std::to_string(code));
}

bool is_integer_type(std::int16_t code) {
    const auto t = static_cast<Datatype>(code);
    return t == Datatype::UInt8 || t == Datatype::Int16 || t == Datatype::Int32;
}

/// Decodes `count` voxels starting at element `first` into doubles.
std::vector<double> decode(const Parsed& p, std::size_t first, std::size_t count) {
    const Header& h = p.header;
    const std::size_t width = datatype_size(h.datatype);
    const std::size_t start = static_cast<std::size_t>(h.vox_offset) + first * width;
    if (start + count * width > p.bytes.size()) throw Error(ErrorCode::IoFailure, "voxel data truncated");
    const bool swap = h.big_endian == (std::endian::native == std::endian::little);
    Reader r(p.bytes, swap);
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t at = start + i * width;
        switch (static_cast<Datatype>(h.datatype)) {
        case Datatype::UInt8: out[i] = p.bytes[at]; break;
        case Datatype::Int16: out[i] = r.get<std::int16_t>(at); break;
        case Datatype::Int32: out[i] = r.get<std::int32_t>(at); break;
        case Datatype::Float32: out[i] = r.get<float>(at); break;
        case Datatype::Float64: out[i] = r.get<double>(at); break;
        }
    }
    return out;
}

void require_3d(const Header& h) {
    const int nd = h.dim[0];
    if (nd == 3) return;
    if (nd == 4 && h.dim[4] == 1) return;
    throw Error(ErrorCode::DimMismatch, "expected a 3D image (or 4D with a single volume), got dim[0]=" + std::to_string(nd));
}

std::vector<unsigned char> encode_header(const Geometry& g, std::array<std::int16_t, 8> dim, Datatype type,
                                         std::int16_t intent, std::size_t payload) {
    std::vector<unsigned char> buf(kDataOffset + payload, 0);
    Writer w(buf);
    w.put<std::int32_t>(0, static_cast<std::int32_t>(kHeaderSize));
    buf[38] = 'r';
    for (int i = 0; i < 8; ++i) w.put<std::int16_t>(40 + 2 * i, dim[i]);
    w.put<std::int16_t>(68, intent);
    w.put<std::int16_t>(70, static_cast<std::int16_t>(type));
    w.put<std::int16_t>(72, static_cast<std::int16_t>(8 * datatype_size(static_cast<std::int16_t>(type))));
    const Vec3 s = g.spacing();
    w.put<float>(76, 1.0f);
    for (int d = 0; d < 3; ++d) w.put<float>(80 + 4 * d, static_cast<float>(s[d]));
    for (int d = 3; d < 7; ++d) w.put<float>(76 + 4 * (d + 1), 1.0f);
    w.put<float>(108, static_cast<float>(kDataOffset));
    w.put<float>(112, 0.0f);
    w.put<float>(116, 0.0f);
    buf[123] = 2 | 8;  // mm, seconds
    const char* descrip = "atlasfuse";
    std::memcpy(buf.data() + 148, descrip, std::strlen(descrip));
    w.put<std::int16_t>(252, 0);
    w.put<std::int16_t>(254, 1);
    const Mat4& a = g.affine();
    for (int row = 0; row < 3; ++row)
        for (int c = 0; c < 4; ++c) w.put<float>(280 + 16 * row + 4 * c, static_cast<float>(a(row, c)));
    std::memcpy(buf.data() + 344, "n+1\0", 4);
    return buf;
}

} // namespace

Header read_header(const std::filesystem::path& path) { return parse(path).header; }

VolumeGrid read_volume(const std::filesystem::path& path) {
    const Parsed p = parse(path);
    const Header& h = p.header;
    datatype_size(h.datatype);
    require_3d(h);
    Geometry g(h.dims, h.affine);
    std::vector<double> data = decode(p, 0, g.voxel_count());
    if (h.scl_slope != 0.0 && std::isfinite(h.scl_slope)) {
        const double inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
        for (double& v : data) v = h.scl_slope * v + inter;
    }
    return VolumeGrid(std::move(g), std::move(data));
}

LabelVolume read_labels(const std::filesystem::path& path) {
    const Parsed p = parse(path);
    const Header& h = p.header;
    datatype_size(h.datatype);
    if (!is_integer_type(h.datatype))
        throw Error(ErrorCode::UnsupportedDatatype, "labelmaps must use an integer datatype");
    require_3d(h);
    Geometry g(h.dims, h.affine);
    const std::vector<double> raw = decode(p, 0, g.voxel_count());
    std::vector<std::int32_t> data(raw.size());
    std::transform(raw.begin(), raw.end(), data.begin(), [](double v) { return static_cast<std::int32_t>(v); });
    return LabelVolume(std::move(g), std::move(data));
}

std::variant<VolumeGrid, LabelVolume> read_image(const std::filesystem::path& path, bool as_labels) {
    if (as_labels) return read_labels(path);
    return read_volume(path);
}

void write_volume(const VolumeGrid& volume, const std::filesystem::path& path) {
    const Geometry& g = volume.geometry();
    const std::size_t n = g.voxel_count();
    auto buf = encode_header(g, {3, static_cast<std::int16_t>(g.nx()), static_cast<std::int16_t>(g.ny()),
                                 static_cast<std::int16_t>(g.nz()), 1, 1, 1, 1},
                             Datatype::Float32, 0, n * 4);
    Writer w(buf);
    for (std::size_t i = 0; i < n; ++i) w.put<float>(kDataOffset + 4 * i, static_cast<float>(volume[i]));
    write_all(path, buf);
}

void write_volume(const LabelVolume& labels, const std::filesystem::path& path) {
    const Geometry& g = labels.geometry();
    const std::size_t n = g.voxel_count();
    for (std::int32_t v : labels.data())
        if (v > std::numeric_limits<std::int16_t>::max() || v < std::numeric_limits<std::int16_t>::min())
            throw Error(ErrorCode::LabelOverflow, "label code " + std::to_string(v) + " does not fit int16");
    auto buf = encode_header(g, {3, static_cast<std::int16_t>(g.nx()), static_cast<std::int16_t>(g.ny()),
                                 static_cast<std::int16_t>(g.nz()), 1, 1, 1, 1},
                             Datatype::Int16, 0, n * 2);
    Writer w(buf);
    for (std::size_t i = 0; i < n; ++i) w.put<std::int16_t>(kDataOffset + 2 * i, static_cast<std::int16_t>(labels[i]));
    write_all(path, buf);
}

void write_field(const DeformationField& field, const std::filesystem::path& path) {
    const Geometry& g = field.geometry();
    const std::size_t n = g.voxel_count();
    auto buf = encode_header(g, {5, static_cast<std::int16_t>(g.nx()), static_cast<std::int16_t>(g.ny()),
                                 static_cast<std::int16_t>(g.nz()), 1, 3, 1, 1},
                             Datatype::Float32, kIntentVector, 3 * n * 4);
    Writer w(buf);
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < n; ++i)
            w.put<float>(kDataOffset + 4 * (c * n + i), static_cast<float>(field[i][c]));
    write_all(path, buf);
}

DeformationField read_field(const std::filesystem::path& path) {
    const Parsed p = parse(path);
    const Header& h = p.header;
    if (h.dim[0] != 5 || h.dim[4] != 1 || h.dim[5] != 3)
        throw Error(ErrorCode::DimMismatch, "displacement fields need dim = [5, nx, ny, nz, 1, 3]");
    if (is_integer_type(h.datatype)) throw Error(ErrorCode::UnsupportedDatatype, "displacement fields must be real-valued");
    Geometry g(h.dims, h.affine);
    const std::size_t n = g.voxel_count();
    const std::vector<double> raw = decode(p, 0, 3 * n);
    std::vector<Vec3> u(n);
    for (std::size_t i = 0; i < n; ++i) u[i] = Vec3(raw[i], raw[n + i], raw[2 * n + i]);
    return DeformationField(std::move(g), std::move(u));
}

} // namespace atlasfuse::nifti
