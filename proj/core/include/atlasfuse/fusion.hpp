#pragma once

#include <span>
#include <string>
#include <vector>

#include "atlasfuse/geometry.hpp"

namespace atlasfuse {

/// Joint label fusion settings.
struct JlfParams {
    int patch_radius = 2;
    int search_radius = 3;
    /// Exponent applied to pairwise patch-error products.
    double beta = 2.0;
    /// Diagonal regularization: max(epsilon_relative * mean diagonal, epsilon_min).
    double epsilon_relative = 0.1;
    double epsilon_min = 1e-6;
    /// Worker threads for the per-voxel loop (0 = hardware concurrency).
    unsigned threads = 0;

    void validate() const;
    std::string to_json() const;
    static JlfParams from_json(const std::string& text);
};

/// Per-voxel mode of the warped labels; ties go to the lowest code, background included.
LabelVolume majority_vote(std::span<const LabelVolume> warped_labels);

/// Atlas weights from absolute patch differences |D_i(p)|:
/// M(i,j) = (sum_p |D_i(p)| |D_j(p)|)^beta, w = (M + epsilon I)^-1 1, normalized to sum 1,
/// negatives clamped to 0 and renormalized.
std::vector<double> jlf_weights(const std::vector<std::vector<double>>& abs_differences, double beta, double epsilon);

/// Weighted voting where each atlas votes with its best-matching patch within the
/// search window; weights down-weight atlases whose errors are correlated.
LabelVolume joint_label_fusion(const VolumeGrid& target, std::span<const VolumeGrid> atlas_intensities,
                               std::span<const LabelVolume> atlas_labels, const JlfParams& params);

} // namespace atlasfuse
