#include "atlasfuse/synth.hpp"

#include <cmath>

namespace atlasfuse {

namespace {
void check(const SynthesisParams& p) {
    if (!(p.ti_ms > 0.0)) throw Error(ErrorCode::NonPositiveTI, "TI must be positive");
    if (!(p.t1_floor_ms >= 0.0)) throw Error(ErrorCode::InvalidArgument, "T1 floor must be >= 0");
    if (!(p.t1_unit_scale > 0.0)) throw Error(ErrorCode::InvalidArgument, "T1 unit scale must be positive");
}
} // namespace

double synthesize_voxel(double t1_ms, double m0, const SynthesisParams& params) {
    check(params);
    if (!(t1_ms > params.t1_floor_ms)) return 0.0;
    const double s = m0 * (1.0 - 2.0 * std::exp(-params.ti_ms / t1_ms));
    return params.output == SynthOutput::Magnitude ? std::abs(s) : s;
}

VolumeGrid synthesize_wmn(const VolumeGrid& t1_map, const SynthesisParams& params, const std::optional<VolumeGrid>& m0) {
    check(params);
    if (m0) require_same_geometry(t1_map.geometry(), m0->geometry(), "M0 map");
    VolumeGrid out(t1_map.geometry());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double t1 = t1_map[i] * params.t1_unit_scale;
        out[i] = synthesize_voxel(t1, m0 ? (*m0)[i] : 1.0, params);
    }
    return out;
}

} // namespace atlasfuse
