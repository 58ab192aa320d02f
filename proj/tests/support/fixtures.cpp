#include "fixtures.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>

#include <unistd.h>

namespace atlasfuse::testing {

namespace fs = std::filesystem;

TempDir::TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("atlasfuse_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

Geometry cube_geometry(int n, double spacing) {
    return Geometry::axis_aligned({n, n, n}, Vec3::Constant(spacing));
}

VolumeGrid random_volume(const Geometry& g, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    VolumeGrid v(g);
    for (auto& x : v.data()) x = u(rng);
    return v;
}

LabelVolume random_labels(const Geometry& g, std::mt19937_64& rng, int max_code, double p_background) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> code(1, max_code);
    LabelVolume l(g);
    for (auto& x : l.data()) x = u(rng) < p_background ? 0 : code(rng);
    return l;
}

VolumeGrid blob_image(const Geometry& g) {
    const Index3& n = g.dims();
    const Vec3 c = g.index_to_world(Vec3(0.5 * (n[0] - 1), 0.5 * (n[1] - 1), 0.5 * (n[2] - 1)));
    const double ext = 0.5 * (n[0] - 1) * g.spacing().x();
    struct Blob {
        Vec3 offset;
        Vec3 sigma;
        double amplitude;
    };
    const Blob blobs[] = {
        {{0.0, 0.0, 0.0}, {0.55, 0.45, 0.40}, 1.0},
        {{0.30, 0.10, -0.10}, {0.12, 0.18, 0.10}, 0.8},
        {{-0.25, 0.20, 0.15}, {0.10, 0.10, 0.16}, -0.6},
        {{0.05, -0.30, 0.20}, {0.15, 0.08, 0.10}, 0.7},
        {{-0.10, -0.05, -0.30}, {0.08, 0.14, 0.08}, 0.9},
    };
    VolumeGrid v(g);
    for (std::size_t o = 0; o < v.size(); ++o) {
        const Index3 ix = g.index_of(o);
        const Vec3 p = g.index_to_world(Vec3(ix[0], ix[1], ix[2])) - c;
        double s = 0.0;
        for (const auto& b : blobs) {
            const Vec3 q = (p - b.offset * ext).cwiseQuotient(b.sigma * ext);
            s += b.amplitude * std::exp(-0.5 * q.squaredNorm());
        }
        v[o] = s;
    }
    return v;
}

LabelVolume ball(const Geometry& g, const Vec3& center, double radius, std::int32_t code) {
    LabelVolume l(g);
    for (std::size_t o = 0; o < l.size(); ++o) {
        const Index3 ix = g.index_of(o);
        if ((g.index_to_world(Vec3(ix[0], ix[1], ix[2])) - center).norm() <= radius) l[o] = code;
    }
    return l;
}

std::string file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace atlasfuse::testing
