#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "atlasfuse/geometry.hpp"
#include "atlasfuse/grid.hpp"

namespace atlasfuse {

/// Row code used for the union of every nucleus in the scheme.
inline constexpr std::int32_t kWholeThalamusCode = 0;
inline constexpr const char* kWholeThalamusName = "Thalamus";

/// 2|A∩B| / (|A|+|B|); 1 when both are empty.
double dice(const LabelVolume& a, const LabelVolume& b, std::int32_t code);
/// 1 - ||A|-|B|| / (|A|+|B|); 1 when both are empty.
double vsi(const LabelVolume& a, const LabelVolume& b, std::int32_t code);
/// World-mm distance between voxel-center centroids. EmptyStructure if either side is empty.
double centroid_distance(const LabelVolume& a, const LabelVolume& b, std::int32_t code);
/// Voxel count times voxel volume (mm³).
double nucleus_volume(const LabelVolume& labels, std::int32_t code);

struct NucleusMetrics {
    std::int32_t code = 0;
    std::string name;
    double volume_a = 0.0;
    double volume_b = 0.0;
    double dice = 0.0;
    double vsi = 0.0;
    /// Absent when either structure is empty.
    std::optional<double> centroid_distance;
    bool both_empty = false;
};

struct SegmentationReport {
    std::vector<NucleusMetrics> rows;

    const NucleusMetrics* find(std::int32_t code) const;
    std::string to_json() const;
};

/// One row per scheme code (or per abbreviation when `aggregate_hemispheres`),
/// followed by the whole-thalamus row.
SegmentationReport build_report(const LabelVolume& seg_a, const LabelVolume& seg_b, const LabelScheme& scheme,
                                bool aggregate_hemispheres = false);

/// Metrics for the voxel set whose labels are any of `codes`.
NucleusMetrics structure_metrics(const LabelVolume& seg_a, const LabelVolume& seg_b,
                                 const std::vector<std::int32_t>& codes);

struct PairedTestResult {
    std::int32_t code = 0;
    std::string name;
    double t = 0.0;
    int dof = 1;
    double p = 1.0;
    bool significant_raw = false;
    bool significant_bonferroni = false;
    /// Differences were constant and nonzero: t is infinite and p is reported as 0.
    bool zero_variance = false;
};

inline constexpr double kSignificanceLevel = 0.05;
inline constexpr int kDefaultComparisons = 13;

double bonferroni_threshold(int comparisons);

/// Two-sided paired t-test of x against y with Bonferroni correction over `comparisons`.
PairedTestResult paired_t_test(const std::vector<double>& x, const std::vector<double>& y,
                               int comparisons = kDefaultComparisons);

/// Regularized incomplete beta I_x(a, b).
double incomplete_beta(double a, double b, double x);
/// P(|T| >= |t|) for Student's t with `dof` degrees of freedom.
double student_t_two_sided_p(double t, double dof);

/// CSV columns: subject_id, label_code, label_name, vol_a_mm3, vol_b_mm3, dice, vsi, centroid_dist_mm.
void write_metrics_csv(std::ostream& out, const SegmentationReport& report, const std::string& subject_id,
                       bool header = true);
void write_metrics_csv(const std::filesystem::path& path, const SegmentationReport& report,
                       const std::string& subject_id);

struct MetricsRow {
    std::string subject_id;
    NucleusMetrics metrics;
};
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// CSV columns: label_code, label_name, t, dof, p, sig_raw, sig_bonferroni.
void write_stats_csv(std::ostream& out, const std::vector<PairedTestResult>& results);
void write_stats_csv(const std::filesystem::path& path, const std::vector<PairedTestResult>& results);

/// Per-label paired tests of one metric column across subjects present in both tables.
/// RowMismatch when the subject/label sets differ; InsufficientSubjects when n < 2.
std::vector<PairedTestResult> compare_methods(const std::vector<MetricsRow>& a, const std::vector<MetricsRow>& b,
                                              const std::string& metric = "dice",
                                              int comparisons = kDefaultComparisons);

} // namespace atlasfuse
