#pragma once

#include <cmath>
#include <cstddef>

#include "atlasfuse/geometry.hpp"

namespace atlasfuse::detail {

// Continuous-index tolerance for treating a trilinear sample as in-bounds.
inline constexpr double kEdgeTolerance = 1e-6;

struct LinearStencil {
    std::size_t offset[8];
    double weight[8];
};

/// Eight-corner trilinear stencil at continuous index `c`. Returns false when
/// the point lies outside [0, n-1] on any axis and `clamp` is not set.
inline bool linear_stencil(const Geometry& g, const Vec3& c, bool clamp, LinearStencil& s) {
    int lo[3], hi[3];
    double frac[3];
    const Index3& n = g.dims();
    for (int d = 0; d < 3; ++d) {
        double x = c[d];
        const double top = static_cast<double>(n[d] - 1);
        if (clamp) {
            x = x < 0.0 ? 0.0 : (x > top ? top : x);
        } else if (!(x >= -kEdgeTolerance && x <= top + kEdgeTolerance)) {
            return false;
        }
        if (n[d] == 1) {
            lo[d] = hi[d] = 0;
            frac[d] = 0.0;
            continue;
        }
        int i0 = static_cast<int>(std::floor(x));
        if (i0 < 0) i0 = 0;
        if (i0 > n[d] - 2) i0 = n[d] - 2;
        double f = x - i0;
        frac[d] = f < 0.0 ? 0.0 : (f > 1.0 ? 1.0 : f);
        lo[d] = i0;
        hi[d] = i0 + 1;
    }
    int corner = 0;
    for (int k = 0; k < 2; ++k) {
        const double wz = k ? frac[2] : 1.0 - frac[2];
        const int z = k ? hi[2] : lo[2];
        for (int j = 0; j < 2; ++j) {
            const double wy = j ? frac[1] : 1.0 - frac[1];
            const int y = j ? hi[1] : lo[1];
            for (int i = 0; i < 2; ++i) {
                const double wx = i ? frac[0] : 1.0 - frac[0];
                const int x = i ? hi[0] : lo[0];
                s.offset[corner] = g.offset(x, y, z);
                s.weight[corner] = wx * wy * wz;
                ++corner;
            }
        }
    }
    return true;
}

/// Nearest lattice voxel to continuous index `c`; false when it falls outside.
inline bool nearest_offset(const Geometry& g, const Vec3& c, std::size_t& offset) {
    int idx[3];
    for (int d = 0; d < 3; ++d) {
        const double r = std::floor(c[d] + 0.5);
        if (r < 0.0 || r > static_cast<double>(g.dims()[d] - 1)) return false;
        idx[d] = static_cast<int>(r);
    }
    offset = g.offset(idx[0], idx[1], idx[2]);
    return true;
}

template <class Span>
inline double apply_stencil(const LinearStencil& s, const Span& data) {
    double v = 0.0;
    for (int c = 0; c < 8; ++c) v += s.weight[c] * static_cast<double>(data[s.offset[c]]);
    return v;
}

} // namespace atlasfuse::detail
