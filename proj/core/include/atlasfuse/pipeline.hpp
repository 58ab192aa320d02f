#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "atlasfuse/fusion.hpp"
#include "atlasfuse/metrics.hpp"
#include "atlasfuse/phantom.hpp"
#include "atlasfuse/register.hpp"
#include "atlasfuse/synth.hpp"

namespace atlasfuse {

inline constexpr const char* kToolVersion = "0.1.0";

enum class InputMode { Wmn, Mp2Syn, Mp2Uni };
enum class FusionMethod { Jlf, Mv };

std::string to_string(InputMode mode);
std::string to_string(FusionMethod method);
InputMode parse_input_mode(const std::string& text);
FusionMethod parse_fusion_method(const std::string& text);

/// Everything that determines a segmentation run; serialized next to every output.
struct RunManifest {
    InputMode mode = InputMode::Wmn;
    /// Unset means the mode default: JLF for wmn/mp2syn, MV for mp2uni.
    std::optional<FusionMethod> fusion;
    RegConfig registration;
    JlfParams jlf;
    SynthesisParams synthesis;
    /// Margin (voxels) added around the template crop box mapped into the input.
    int crop_margin = 4;
    /// Worker threads for the prior loop and JLF (0 = hardware concurrency).
    unsigned threads = 0;
    std::map<std::string, std::string> input_hashes;
    std::string tool_version = kToolVersion;

    FusionMethod resolved_fusion() const;
    std::string to_json() const;
    /// Accepts a full manifest or any subset of its fields (config files).
    static RunManifest from_json(const std::string& text);
};

struct SegmentDiagnostics {
    std::optional<AffineTransform> rigid;
    CropBox input_box;
    std::optional<DeformableResult> deformable;
    double inversion_residual_mm = 0.0;
    bool perfect_warp = false;
};

/// Image in the mode's native contrast -> white-matter-nulled-comparable intensity.
VolumeGrid prepare_input(const VolumeGrid& input, const RunManifest& manifest);

/// In-memory segmentation of `input` (already prepared) with `library`, whose priors
/// must all carry template warps. `truth_to_template`, when given, replaces the
/// registration with a known input -> template displacement on the input lattice.
LabelVolume segment_image(const VolumeGrid& input, const AtlasLibrary& library, const RunManifest& manifest,
                          const std::optional<DeformationField>& truth_to_template = std::nullopt,
                          SegmentDiagnostics* diagnostics = nullptr);

/// Registers the template to every prior lacking a cached warp, `threads` priors at a
/// time (0 = hardware concurrency); returns how many were computed.
int compute_missing_prior_warps(AtlasLibrary& library, const RegConfig& config, unsigned threads = 0);

struct SegmentRequest {
    std::filesystem::path input;
    std::filesystem::path atlas_dir;
    std::filesystem::path output_dir;
    RunManifest manifest;
    std::optional<std::filesystem::path> truth_warp;
    bool cache_prior_warps = true;
};

struct SegmentOutputs {
    std::filesystem::path segmentation;
    std::filesystem::path volumes_csv;
    std::filesystem::path manifest_json;
};

SegmentOutputs segment_output_paths(const std::filesystem::path& output_dir);

/// Full workflow with file outputs. On failure every output written so far is removed
/// before the error propagates.
SegmentOutputs run_segment(const SegmentRequest& request, LabelVolume* segmentation = nullptr);

struct EvalRequest {
    std::filesystem::path seg_a;
    std::filesystem::path seg_b;
    /// Intensity pair for affine alignment of a onto b.
    std::optional<std::filesystem::path> intensity_a;
    std::optional<std::filesystem::path> intensity_b;
    std::optional<std::filesystem::path> scheme;
    std::string subject_id = "subject";
    bool aggregate_hemispheres = false;
    std::filesystem::path output_dir;
    RegConfig registration;
};

SegmentationReport run_eval(const EvalRequest& request);

struct StatsRequest {
    std::filesystem::path metrics_a;
    std::filesystem::path metrics_b;
    std::string metric = "dice";
    int comparisons = kDefaultComparisons;
    std::filesystem::path output;
};

std::vector<PairedTestResult> run_stats(const StatsRequest& request);

/// Base phantom, its derived library and a held-out subject, all in memory.
struct PhantomDataset {
    Phantom base;
    VolumeGrid base_wmn;
    AtlasLibrary library;
    Subject subject;
    VolumeGrid subject_wmn;
};

struct PhantomDatasetSpec {
    std::uint64_t seed = 1;
    int atlases = 5;
    double noise_fraction = 0.01;
    double max_displacement_mm = 4.0;
};

PhantomDataset make_phantom_dataset(const PhantomDatasetSpec& spec);
/// Writes <dir>/atlas (library layout), <dir>/subject/{t1,wmn,labels,truth_warp}.nii.gz
/// and <dir>/base/{t1,wmn,labels}.nii.gz.
void write_phantom_dataset(const PhantomDataset& dataset, const std::filesystem::path& dir);

/// Volume CSV columns: label_code, label_name, voxels, volume_mm3.
void write_volume_csv(const std::filesystem::path& path, const LabelVolume& labels, const LabelScheme& scheme);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

/// Exit status for an error category: usage 1, data 2, numerical 3.
int exit_code_for(ErrorCategory category);
/// {"error": name, "category": ..., "exit_code": n, "message": ...}
std::string error_json(const Error& error);
std::string error_json(ErrorCode code, const std::string& message);

} // namespace atlasfuse
