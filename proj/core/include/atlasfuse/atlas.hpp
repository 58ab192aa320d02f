#pragma once

#include <filesystem>
#include <string>

#include "atlasfuse/phantom.hpp"

namespace atlasfuse {

/// Directory layout:
///   template.nii.gz, cropbox.json, scheme.json,
///   priors/<id>/{intensity.nii.gz, labels.nii.gz, warp_to_template.nii.gz?}
void save_atlas_library(const AtlasLibrary& library, const std::filesystem::path& dir);

/// Priors are returned sorted by id, so directory listing order never matters.
/// BadAtlasLibrary for missing pieces or inconsistent geometry and labels.
AtlasLibrary load_atlas_library(const std::filesystem::path& dir, bool load_warps = true);

std::filesystem::path prior_warp_path(const std::filesystem::path& dir, const std::string& prior_id);

} // namespace atlasfuse
