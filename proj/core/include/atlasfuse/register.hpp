#pragma once

#include <optional>
#include <string>
#include <vector>

#include "atlasfuse/geometry.hpp"
#include "atlasfuse/grid.hpp"
#include "atlasfuse/transform.hpp"

namespace atlasfuse {

/// Multi-resolution registration settings shared by every stage.
struct RegConfig {
    /// Shrink factor per pyramid level, coarsest first.
    std::vector<int> shrink_factors{4, 2, 1};
    std::vector<int> linear_iterations{100, 75, 50};
    std::vector<int> deformable_iterations{60, 40, 20};

    int histogram_bins = 32;
    int cc_radius = 2;
    /// Gaussian sigmas in voxels of the current level.
    double sigma_update = 1.0;
    double sigma_total = 0.5;

    /// Initial coordinate-search step at full resolution (mm); scaled by the shrink factor.
    double linear_step_mm = 1.0;
    double linear_min_step_mm = 0.01;
    /// Cap on metric samples per linear-stage evaluation.
    std::size_t max_linear_samples = 60000;

    /// Largest per-iteration deformable update, in voxels of the current level.
    double deformable_step = 2.0;
    double deformable_min_step = 0.01;

    /// Relative metric change over `convergence_window` iterations that ends a level.
    double convergence_tol = 1e-5;
    int convergence_window = 10;
    /// Accepted deformable iterations may lose at most this much mean LNCC.
    double metric_tolerance = 1e-4;

    /// FoldingDetected when fewer voxels than this have a positive Jacobian.
    double min_positive_jacobian_fraction = 0.999;

    int levels() const { return static_cast<int>(shrink_factors.size()); }
    void validate() const;
    std::string to_json() const;
    static RegConfig from_json(const std::string& text);
};

AffineTransform register_rigid(const VolumeGrid& fixed, const VolumeGrid& moving, const RegConfig& config);

/// 12-parameter search seeded from `init`, or from a rigid stage when absent.
AffineTransform register_affine(const VolumeGrid& fixed, const VolumeGrid& moving, const RegConfig& config,
                                const std::optional<AffineTransform>& init = std::nullopt);

struct DeformableResult {
    /// Total fixed -> moving displacement on the fixed lattice, affine included.
    DeformationField field;
    double positive_jacobian_fraction = 1.0;
    bool converged = false;
    int iterations = 0;
    /// Mean local CC after every accepted iteration, all levels in order.
    std::vector<double> metric_history;
};

/// Demons-style diffeomorphic registration driven by local normalized cross-correlation.
DeformableResult register_deformable(const VolumeGrid& fixed, const VolumeGrid& moving, const AffineTransform& init,
                                     const RegConfig& config);

/// result(x) = inner(x + outer(x)) + outer(x); inner reads zero outside its lattice.
DeformationField compose_fields(const DeformationField& outer, const DeformationField& inner);

struct InversionResult {
    DeformationField field;
    double residual_mm = 0.0;
    int iterations = 0;
};

/// Fixed-point inverse g = -f(x + g(x)), evaluated on `target` (defaults to the field's lattice).
InversionResult invert_field(const DeformationField& field, double tol_mm = 0.01, int max_iter = 50,
                             const std::optional<Geometry>& target = std::nullopt);

LabelVolume warp_labels(const LabelVolume& labels, const AffineTransform& transform, const Geometry& target);
LabelVolume warp_labels(const LabelVolume& labels, const DeformationField& transform, const Geometry& target);

/// det(I + grad u) per voxel by central differences (one-sided at borders).
VolumeGrid jacobian_determinant(const DeformationField& field);
double positive_jacobian_fraction(const DeformationField& field);

/// Histogram mutual information (nats) of two images on one lattice.
double mutual_information(const VolumeGrid& a, const VolumeGrid& b, int bins = 32);
/// Mean local normalized cross-correlation over voxels with non-flat windows.
double mean_local_cc(const VolumeGrid& a, const VolumeGrid& b, int radius = 2);

} // namespace atlasfuse
