#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "atlasfuse/geometry.hpp"
#include "atlasfuse/grid.hpp"
#include "atlasfuse/transform.hpp"

namespace atlasfuse {

struct NucleusSpec {
    std::int32_t code = 0;
    /// World mm; the phantom lattice is centered on the world origin.
    Vec3 center_mm = Vec3::Zero();
    Vec3 semi_axes_mm = Vec3::Ones();
    double t1_ms = 1500.0;
};

struct PhantomSpec {
    Index3 dims{64, 64, 64};
    double spacing_mm = 1.0;
    std::uint64_t seed = 1;
    std::vector<NucleusSpec> nuclei;
    /// Head ellipsoid filled with the surround value; outside is air (T1 = 0).
    Vec3 head_semi_axes_mm{29.0, 30.0, 28.0};
    double surround_t1_ms = 1200.0;
    /// Gaussian noise sigma as a fraction of the T1 range; 0 disables noise.
    double noise_fraction = 0.01;

    /// Bilateral thalamic layout on the default scheme: five nuclei of at least
    /// 500 voxels and seven of 50-500 voxels per side.
    static PhantomSpec thalamic_default(std::uint64_t seed = 1);
    Geometry geometry() const;
    /// InvalidArgument for out-of-lattice or malformed nuclei, OverlappingNuclei for intersections.
    void validate() const;
};

struct Phantom {
    VolumeGrid t1_map;
    LabelVolume truth;
};

Phantom generate_phantom(const PhantomSpec& spec);

struct WarpSpec {
    std::uint64_t seed = 1;
    double max_displacement_mm = 4.0;
    double smoothness_sigma_mm = 8.0;
    /// Width over which the field is tapered to zero at the lattice faces.
    double taper_mm = 8.0;
    double min_jacobian = 0.05;
};

/// Smoothed, boundary-tapered random field with max |u| = max_displacement_mm.
/// JacobianViolation when det(I + grad u) <= min_jacobian anywhere.
DeformationField random_diffeo(const WarpSpec& spec, const Geometry& geometry);

struct AtlasPrior {
    std::string id;
    VolumeGrid intensity;
    LabelVolume labels;
    /// Template -> prior displacement on the template lattice.
    std::optional<DeformationField> warp_to_template;
};

struct AtlasLibrary {
    VolumeGrid template_image;
    CropBox crop_box;
    LabelScheme scheme;
    std::vector<AtlasPrior> priors;
};

struct AtlasDeriveSpec {
    int count = 5;
    std::uint64_t seed = 1;
    double max_displacement_mm = 4.0;
    double smoothness_sigma_mm = 8.0;
    /// Per-prior intensity noise, fraction of the base intensity range.
    double noise_fraction = 0.01;
    int crop_margin = 5;
};

/// Priors are the base pulled through independent random warps; the numerical
/// inverse of each warp is kept as that prior's template warp.
AtlasLibrary derive_atlases(const VolumeGrid& base_intensity, const LabelVolume& base_labels, const LabelScheme& scheme,
                            const AtlasDeriveSpec& spec);

struct SubjectSpec {
    std::uint64_t seed = 1000;
    Vec3 translation_mm{2.0, -1.5, 1.0};
    double rotation_deg = 2.0;
    /// Rotation axis through the lattice center.
    Vec3 rotation_axis = Vec3::UnitZ();
    double max_displacement_mm = 4.0;
    double smoothness_sigma_mm = 8.0;
    double noise_fraction = 0.01;
};

struct Subject {
    VolumeGrid t1_map;
    LabelVolume truth;
    /// Subject -> base displacement: subject(y) = base(y + truth_warp(y)).
    DeformationField truth_warp;
};

/// A rigidly moved and deformed copy of the base that no prior shares.
Subject make_subject(const VolumeGrid& base_t1, const LabelVolume& base_labels, const SubjectSpec& spec);

} // namespace atlasfuse
