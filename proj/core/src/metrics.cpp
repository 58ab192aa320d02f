#include "atlasfuse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace atlasfuse {

namespace {

struct SetStats {
    std::size_t count_a = 0;
    std::size_t count_b = 0;
    std::size_t overlap = 0;
    Vec3 sum_a = Vec3::Zero();
    Vec3 sum_b = Vec3::Zero();
};

template <class Member>
SetStats gather(const LabelVolume& a, const LabelVolume& b, Member&& member, bool centroids) {
    require_same_geometry(a.geometry(), b.geometry(), "segmentation comparison");
    const Geometry& g = a.geometry();
    SetStats s;
    // Index sums are exact in double for any practical lattice; map to world once at the end.
    Vec3 idx_a = Vec3::Zero(), idx_b = Vec3::Zero();
    for (int k = 0; k < g.nz(); ++k)
        for (int j = 0; j < g.ny(); ++j)
            for (int i = 0; i < g.nx(); ++i) {
                const std::size_t v = g.offset(i, j, k);
                const bool in_a = member(a[v]);
                const bool in_b = member(b[v]);
                if (in_a) {
                    ++s.count_a;
                    if (centroids) idx_a += Vec3(i, j, k);
                }
                if (in_b) {
                    ++s.count_b;
                    if (centroids) idx_b += Vec3(i, j, k);
                }
                if (in_a && in_b) ++s.overlap;
            }
    s.sum_a = idx_a;
    s.sum_b = idx_b;
    return s;
}

double dice_of(const SetStats& s) {
    const std::size_t total = s.count_a + s.count_b;
    if (total == 0) return 1.0;
    return 2.0 * static_cast<double>(s.overlap) / static_cast<double>(total);
}

double vsi_of(const SetStats& s) {
    const std::size_t total = s.count_a + s.count_b;
    if (total == 0) return 1.0;
    const double diff = s.count_a > s.count_b ? static_cast<double>(s.count_a - s.count_b)
                                              : static_cast<double>(s.count_b - s.count_a);
    return 1.0 - diff / static_cast<double>(total);
}

std::optional<double> centroid_of(const SetStats& s, const Geometry& g) {
    if (s.count_a == 0 || s.count_b == 0) return std::nullopt;
    const Vec3 ca = g.index_to_world(s.sum_a / static_cast<double>(s.count_a));
    const Vec3 cb = g.index_to_world(s.sum_b / static_cast<double>(s.count_b));
    return (ca - cb).norm();
}

auto single_code(std::int32_t code) {
    return [code](std::int32_t v) { return v == code; };
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            fields.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(std::move(cur));
    return fields;
}

double parse_double(const std::string& s, const std::string& what) {
    if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorCode::InvalidArgument, "bad numeric field '" + s + "' in " + what);
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 500;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

} // namespace

double dice(const LabelVolume& a, const LabelVolume& b, std::int32_t code) {
    return dice_of(gather(a, b, single_code(code), false));
}

double vsi(const LabelVolume& a, const LabelVolume& b, std::int32_t code) {
    return vsi_of(gather(a, b, single_code(code), false));
}

double centroid_distance(const LabelVolume& a, const LabelVolume& b, std::int32_t code) {
    const auto d = centroid_of(gather(a, b, single_code(code), true), a.geometry());
    if (!d) throw Error(ErrorCode::EmptyStructure, "label " + std::to_string(code) + " is empty on one side");
    return *d;
}

double nucleus_volume(const LabelVolume& labels, std::int32_t code) {
    const auto n = std::count(labels.values().begin(), labels.values().end(), code);
    return static_cast<double>(n) * labels.geometry().voxel_volume();
}

NucleusMetrics structure_metrics(const LabelVolume& seg_a, const LabelVolume& seg_b,
                                 const std::vector<std::int32_t>& codes) {
    auto member = [&codes](std::int32_t v) { return v != 0 && std::find(codes.begin(), codes.end(), v) != codes.end(); };
    const SetStats s = gather(seg_a, seg_b, member, true);
    const double vox = seg_a.geometry().voxel_volume();
    NucleusMetrics m;
    m.code = codes.empty() ? 0 : *std::min_element(codes.begin(), codes.end());
    m.volume_a = static_cast<double>(s.count_a) * vox;
    m.volume_b = static_cast<double>(s.count_b) * vox;
    m.dice = dice_of(s);
    m.vsi = vsi_of(s);
    m.centroid_distance = centroid_of(s, seg_a.geometry());
    m.both_empty = s.count_a == 0 && s.count_b == 0;
    return m;
}

const NucleusMetrics* SegmentationReport::find(std::int32_t code) const {
    for (const auto& r : rows)
        if (r.code == code) return &r;
    return nullptr;
}

std::string SegmentationReport::to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j;
        j["label_code"] = r.code;
        j["label_name"] = r.name;
        j["vol_a_mm3"] = r.volume_a;
        j["vol_b_mm3"] = r.volume_b;
        j["dice"] = r.dice;
        j["vsi"] = r.vsi;
        j["centroid_dist_mm"] = r.centroid_distance ? nlohmann::json(*r.centroid_distance) : nlohmann::json(nullptr);
        j["both_empty"] = r.both_empty;
        arr.push_back(std::move(j));
    }
    return nlohmann::json{{"rows", arr}}.dump(2);
}

SegmentationReport build_report(const LabelVolume& seg_a, const LabelVolume& seg_b, const LabelScheme& scheme,
                                bool aggregate_hemispheres) {
    require_same_geometry(seg_a.geometry(), seg_b.geometry(), "build_report");
    SegmentationReport report;
    if (aggregate_hemispheres) {
        std::vector<std::pair<std::string, std::vector<std::int32_t>>> groups;
        for (const auto& e : scheme.entries()) {
            auto it = std::find_if(groups.begin(), groups.end(), [&](const auto& g) { return g.first == e.abbrev; });
            if (it == groups.end())
                groups.push_back({e.abbrev, {e.code}});
            else
                it->second.push_back(e.code);
        }
        for (const auto& [abbrev, codes] : groups) {
            NucleusMetrics m = structure_metrics(seg_a, seg_b, codes);
            m.name = abbrev;
            report.rows.push_back(std::move(m));
        }
    } else {
        for (const auto& e : scheme.entries()) {
            NucleusMetrics m = structure_metrics(seg_a, seg_b, {e.code});
            m.name = e.name;
            report.rows.push_back(std::move(m));
        }
    }
    NucleusMetrics whole = structure_metrics(seg_a, seg_b, scheme.codes());
    whole.code = kWholeThalamusCode;
    whole.name = kWholeThalamusName;
    report.rows.push_back(std::move(whole));
    return report;
}

double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw Error(ErrorCode::InvalidArgument, "incomplete beta needs a, b > 0");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double dof) {
    if (!(dof > 0.0)) throw Error(ErrorCode::InvalidArgument, "degrees of freedom must be > 0");
    if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
    if (std::isinf(t)) return 0.0;
    const double p = incomplete_beta(0.5 * dof, 0.5, dof / (dof + t * t));
    return std::clamp(p, 0.0, 1.0);
}

double bonferroni_threshold(int comparisons) {
    if (comparisons < 1) throw Error(ErrorCode::InvalidArgument, "comparison count must be >= 1");
    return kSignificanceLevel / comparisons;
}

PairedTestResult paired_t_test(const std::vector<double>& x, const std::vector<double>& y, int comparisons) {
    if (x.size() != y.size())
        throw Error(ErrorCode::LengthMismatch,
                    "paired samples differ in length (" + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
    if (x.size() < 2) throw Error(ErrorCode::InsufficientSubjects, "paired t-test needs n >= 2");
    const double alpha = bonferroni_threshold(comparisons);
    const std::size_t n = x.size();
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = x[i] - y[i];
    double mean = 0.0;
    for (double v : d) mean += v;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / static_cast<double>(n - 1));

    PairedTestResult r;
    r.dof = static_cast<int>(n - 1);
    // Differences that agree up to rounding noise carry no spread.
    if (sd == 0.0 || sd <= 1e-12 * std::abs(mean)) {
        if (mean == 0.0) {
            r.t = 0.0;
            r.p = 1.0;
        } else {
            r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
            r.p = 0.0;
            r.zero_variance = true;
        }
    } else {
        r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
        r.p = student_t_two_sided_p(r.t, r.dof);
    }
    r.significant_raw = r.p < kSignificanceLevel;
    r.significant_bonferroni = r.p < alpha;
    return r;
}

void write_metrics_csv(std::ostream& out, const SegmentationReport& report, const std::string& subject_id, bool header) {
    if (header) out << "subject_id,label_code,label_name,vol_a_mm3,vol_b_mm3,dice,vsi,centroid_dist_mm\n";
    for (const auto& r : report.rows) {
        out << csv_field(subject_id) << ',' << r.code << ',' << csv_field(r.name) << ',' << format_double(r.volume_a)
            << ',' << format_double(r.volume_b) << ',' << format_double(r.dice) << ',' << format_double(r.vsi) << ','
            << (r.centroid_distance ? format_double(*r.centroid_distance) : std::string()) << '\n';
    }
}

void write_metrics_csv(const std::filesystem::path& path, const SegmentationReport& report, const std::string& subject_id) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    write_metrics_csv(out, report, subject_id);
    if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::RowMismatch, "empty metrics CSV " + path.string());
    const auto header = split_csv_line(line);
    static const std::vector<std::string> kExpected = {"subject_id", "label_code", "label_name", "vol_a_mm3",
                                                       "vol_b_mm3",  "dice",       "vsi",        "centroid_dist_mm"};
    if (header != kExpected) throw Error(ErrorCode::RowMismatch, "unexpected metrics CSV header in " + path.string());
    std::vector<MetricsRow> rows;
    const std::string what = path.string();
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv_line(line);
        if (f.size() != kExpected.size()) throw Error(ErrorCode::RowMismatch, "wrong field count in " + what);
        MetricsRow row;
        row.subject_id = f[0];
        row.metrics.code = static_cast<std::int32_t>(parse_double(f[1], what));
        row.metrics.name = f[2];
        row.metrics.volume_a = parse_double(f[3], what);
        row.metrics.volume_b = parse_double(f[4], what);
        row.metrics.dice = parse_double(f[5], what);
        row.metrics.vsi = parse_double(f[6], what);
        if (!f[7].empty()) row.metrics.centroid_distance = parse_double(f[7], what);
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_stats_csv(std::ostream& out, const std::vector<PairedTestResult>& results) {
    out << "label_code,label_name,t,dof,p,sig_raw,sig_bonferroni\n";
    for (const auto& r : results) {
        out << r.code << ',' << csv_field(r.name) << ',' << format_double(r.t) << ',' << r.dof << ','
            << format_double(r.p) << ',' << (r.significant_raw ? 1 : 0) << ',' << (r.significant_bonferroni ? 1 : 0)
            << '\n';
    }
}

void write_stats_csv(const std::filesystem::path& path, const std::vector<PairedTestResult>& results) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    write_stats_csv(out, results);
    if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::vector<PairedTestResult> compare_methods(const std::vector<MetricsRow>& a, const std::vector<MetricsRow>& b,
                                              const std::string& metric, int comparisons) {
    auto pick = [&metric](const NucleusMetrics& m) -> double {
        if (metric == "dice") return m.dice;
        if (metric == "vsi") return m.vsi;
        if (metric == "centroid_dist_mm")
            return m.centroid_distance ? *m.centroid_distance : std::numeric_limits<double>::quiet_NaN();
        if (metric == "vol_a_mm3") return m.volume_a;
        if (metric == "vol_b_mm3") return m.volume_b;
        throw Error(ErrorCode::InvalidArgument, "unknown metric column '" + metric + "'");
    };
    using Key = std::pair<std::int32_t, std::string>;
    std::map<Key, double> table_b;
    for (const auto& r : b) {
        if (!table_b.emplace(Key{r.metrics.code, r.subject_id}, pick(r.metrics)).second)
            throw Error(ErrorCode::RowMismatch, "duplicate row for subject " + r.subject_id);
    }
    if (a.size() != b.size()) throw Error(ErrorCode::RowMismatch, "metric tables have different row counts");

    // Labels in order of first appearance; subjects sorted for a stable pairing.
    std::vector<std::int32_t> label_order;
    std::map<std::int32_t, std::string> names;
    std::map<std::int32_t, std::map<std::string, std::pair<double, double>>> pairs;
    for (const auto& r : a) {
        const auto it = table_b.find(Key{r.metrics.code, r.subject_id});
        if (it == table_b.end())
            throw Error(ErrorCode::RowMismatch, "no match for subject " + r.subject_id + " label " +
                                                    std::to_string(r.metrics.code));
        if (!names.count(r.metrics.code)) {
            label_order.push_back(r.metrics.code);
            names[r.metrics.code] = r.metrics.name;
        }
        if (!pairs[r.metrics.code].emplace(r.subject_id, std::make_pair(pick(r.metrics), it->second)).second)
            throw Error(ErrorCode::RowMismatch, "duplicate row for subject " + r.subject_id);
    }
    std::vector<PairedTestResult> out;
    for (const auto code : label_order) {
        std::vector<double> xs, ys;
        for (const auto& [subject, xy] : pairs[code]) {
            xs.push_back(xy.first);
            ys.push_back(xy.second);
        }
        if (xs.size() < 2)
            throw Error(ErrorCode::InsufficientSubjects, "label " + std::to_string(code) + " has fewer than 2 subjects");
        PairedTestResult r = paired_t_test(xs, ys, comparisons);
        r.code = code;
        r.name = names[code];
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace atlasfuse
