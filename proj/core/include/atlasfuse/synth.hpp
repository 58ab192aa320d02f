#pragma once

#include <optional>

#include "atlasfuse/geometry.hpp"

namespace atlasfuse {

enum class SynthOutput { Magnitude, Signed };

/// Inversion-recovery contrast synthesis settings.
struct SynthesisParams {
    double ti_ms = 750.0;
    SynthOutput output = SynthOutput::Magnitude;
    /// T1 at or below this (ms) is treated as background / fit failure.
    double t1_floor_ms = 1.0;
    /// Multiply input T1 values by this before use (1000 when the map is in seconds).
    double t1_unit_scale = 1.0;
};

/// Signal M0 * (1 - 2 exp(-TI/T1)) for one voxel, 0 at or below the T1 floor.
double synthesize_voxel(double t1_ms, double m0, const SynthesisParams& params);

/// White-matter-nulled contrast from a T1 map in ms. `m0` defaults to a constant 1
/// and must share the T1 map's geometry when supplied.
VolumeGrid synthesize_wmn(const VolumeGrid& t1_map, const SynthesisParams& params,
                          const std::optional<VolumeGrid>& m0 = std::nullopt);

} // namespace atlasfuse
