// atlasfuse command-line front end: synth, segment, eval, stats, phantom.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "atlasfuse/atlas.hpp"
#include "atlasfuse/nifti.hpp"
#include "atlasfuse/pipeline.hpp"

namespace fs = std::filesystem;
using namespace atlasfuse;

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Reports `e` on stderr and, when an output directory is known, as <dir>/error.json.
int fail(ErrorCode code, const std::string& message, const std::optional<fs::path>& out_dir) {
    const std::string doc = error_json(code, message);
    std::cerr << doc << '\n';
    if (out_dir) {
        std::error_code ec;
        fs::create_directories(*out_dir, ec);
        std::ofstream(*out_dir / "error.json") << doc << '\n';
    }
    return exit_code_for(error_category(code));
}

struct SynthArgs {
    fs::path t1, out;
    std::optional<fs::path> m0;
    double ti = 750.0;
    bool signed_output = false;
    std::string t1_unit = "ms";
    double t1_floor = 1.0;
};

int run_synth(const SynthArgs& a) {
    SynthesisParams p;
    p.ti_ms = a.ti;
    p.output = a.signed_output ? SynthOutput::Signed : SynthOutput::Magnitude;
    p.t1_floor_ms = a.t1_floor;
    p.t1_unit_scale = a.t1_unit == "s" ? 1000.0 : 1.0;
    const VolumeGrid t1 = nifti::read_volume(a.t1);
    std::optional<VolumeGrid> m0;
    if (a.m0) m0 = nifti::read_volume(*a.m0);
    nifti::write_volume(synthesize_wmn(t1, p, m0), a.out);
    return 0;
}

struct SegmentArgs {
    fs::path input, atlas_dir, out_dir;
    std::optional<fs::path> config, truth_warp;
    std::optional<std::string> mode, fusion, t1_unit;
    std::optional<int> patch_radius, search_radius, crop_margin;
    std::optional<double> beta, ti;
    std::optional<unsigned> threads;
    bool no_cache = false;
};

int run_segment_cmd(const SegmentArgs& a) {
    RunManifest m = a.config ? RunManifest::from_json(read_file(*a.config)) : RunManifest{};
    if (a.mode) m.mode = parse_input_mode(*a.mode);
    if (a.fusion) m.fusion = parse_fusion_method(*a.fusion);
    if (a.patch_radius) m.jlf.patch_radius = *a.patch_radius;
    if (a.search_radius) m.jlf.search_radius = *a.search_radius;
    if (a.beta) m.jlf.beta = *a.beta;
    if (a.ti) m.synthesis.ti_ms = *a.ti;
    if (a.t1_unit) m.synthesis.t1_unit_scale = *a.t1_unit == "s" ? 1000.0 : 1.0;
    if (a.crop_margin) m.crop_margin = *a.crop_margin;
    if (a.threads) m.threads = *a.threads;

    SegmentRequest req;
    req.input = a.input;
    req.atlas_dir = a.atlas_dir;
    req.output_dir = a.out_dir;
    req.manifest = m;
    req.truth_warp = a.truth_warp;
    req.cache_prior_warps = !a.no_cache;
    const SegmentOutputs out = run_segment(req);
    std::cout << "segmentation: " << out.segmentation.string() << '\n'
              << "volumes:      " << out.volumes_csv.string() << '\n'
              << "manifest:     " << out.manifest_json.string() << '\n';
    return 0;
}

struct EvalArgs {
    fs::path seg_a, seg_b, out_dir;
    std::optional<fs::path> intensity_a, intensity_b, scheme;
    bool align = false;
    bool aggregate = false;
    std::string subject_id = "subject";
};

int run_eval_cmd(const EvalArgs& a) {
    EvalRequest req;
    req.seg_a = a.seg_a;
    req.seg_b = a.seg_b;
    req.output_dir = a.out_dir;
    req.scheme = a.scheme;
    req.subject_id = a.subject_id;
    req.aggregate_hemispheres = a.aggregate;
    if (a.align) {
        if (!a.intensity_a || !a.intensity_b)
            throw Error(ErrorCode::Usage, "--align needs --intensity-a and --intensity-b");
        req.intensity_a = a.intensity_a;
        req.intensity_b = a.intensity_b;
    }
    const SegmentationReport report = run_eval(req);
    write_metrics_csv(std::cout, report, a.subject_id);
    return 0;
}

struct StatsArgs {
    fs::path a, b, out;
    int m = kDefaultComparisons;
    std::string metric = "dice";
};

int run_stats_cmd(const StatsArgs& a) {
    StatsRequest req;
    req.metrics_a = a.a;
    req.metrics_b = a.b;
    req.comparisons = a.m;
    req.metric = a.metric;
    req.output = a.out;
    const auto results = run_stats(req);
    std::cout << "bonferroni_threshold: " << std::setprecision(12) << bonferroni_threshold(a.m) << " (0.05/" << a.m
              << ")\n";
    write_stats_csv(std::cout, results);
    return 0;
}

struct PhantomArgs {
    std::uint64_t seed = 1;
    fs::path out_dir;
    int atlases = 5;
    double noise = 0.01;
    double max_disp = 4.0;
};

int run_phantom_cmd(const PhantomArgs& a) {
    PhantomDatasetSpec spec;
    spec.seed = a.seed;
    spec.atlases = a.atlases;
    spec.noise_fraction = a.noise;
    spec.max_displacement_mm = a.max_disp;
    write_phantom_dataset(make_phantom_dataset(spec), a.out_dir);
    std::cout << "atlas library: " << (a.out_dir / "atlas").string() << '\n'
              << "subject:       " << (a.out_dir / "subject").string() << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-atlas thalamic nuclei segmentation"};
    app.set_version_flag("--version", std::string(kToolVersion));
    app.require_subcommand(1);

    SynthArgs synth;
    auto* cs = app.add_subcommand("synth", "Synthesize white-matter-nulled contrast from a T1 map");
    cs->add_option("--t1", synth.t1, "T1 map (NIfTI)")->required();
    cs->add_option("--out", synth.out, "Output image")->required();
    cs->add_option("--ti", synth.ti, "Inversion time in ms")->capture_default_str();
    cs->add_flag("--signed", synth.signed_output, "Keep the sign instead of the magnitude");
    cs->add_option("--m0", synth.m0, "Optional M0 map on the T1 grid");
    cs->add_option("--t1-unit", synth.t1_unit, "Unit of the T1 map")->check(CLI::IsMember({"ms", "s"}))->capture_default_str();
    cs->add_option("--t1-floor", synth.t1_floor, "T1 (ms) at or below which output is 0")->capture_default_str();

    SegmentArgs seg;
    auto* cg = app.add_subcommand("segment", "Segment thalamic nuclei with an atlas library");
    cg->add_option("--input", seg.input, "Input image")->required();
    cg->add_option("--atlas-dir", seg.atlas_dir, "Atlas library directory")->required();
    cg->add_option("--out-dir", seg.out_dir, "Output directory")->required();
    cg->add_option("--config", seg.config, "JSON config (manifest fields); flags override it");
    cg->add_option("--mode", seg.mode, "Input contrast")->check(CLI::IsMember({"wmn", "mp2syn", "mp2uni"}));
    cg->add_option("--fusion", seg.fusion, "Label fusion (default: jlf, mv for mp2uni)")->check(CLI::IsMember({"jlf", "mv"}));
    cg->add_option("--truth-warp", seg.truth_warp, "Known input->template field; skips registration");
    cg->add_option("--patch-radius", seg.patch_radius, "JLF patch radius (voxels)");
    cg->add_option("--search-radius", seg.search_radius, "JLF search radius (voxels)");
    cg->add_option("--beta", seg.beta, "JLF exponent");
    cg->add_option("--ti", seg.ti, "Inversion time for mp2syn (ms)");
    cg->add_option("--t1-unit", seg.t1_unit, "Unit of an mp2syn T1 map")->check(CLI::IsMember({"ms", "s"}));
    cg->add_option("--crop-margin", seg.crop_margin, "Voxels added around the mapped crop box");
    cg->add_option("--threads", seg.threads, "Worker threads (0 = all cores)");
    cg->add_flag("--no-cache", seg.no_cache, "Do not write computed prior warps back to the library");

    EvalArgs ev;
    auto* ce = app.add_subcommand("eval", "Compare two segmentations");
    ce->add_option("--seg-a", ev.seg_a, "Segmentation A")->required();
    ce->add_option("--seg-b", ev.seg_b, "Segmentation B (reference grid)")->required();
    ce->add_option("--out-dir", ev.out_dir, "Directory for metrics.csv and metrics.json")->required();
    ce->add_flag("--align", ev.align, "Affine-align A onto B using the intensity pair first");
    ce->add_option("--intensity-a", ev.intensity_a, "Intensity image on A's grid");
    ce->add_option("--intensity-b", ev.intensity_b, "Intensity image on B's grid");
    ce->add_option("--scheme", ev.scheme, "Label scheme JSON (default: thalamic)");
    ce->add_option("--subject-id", ev.subject_id, "Subject id written to the CSV")->capture_default_str();
    ce->add_flag("--aggregate", ev.aggregate, "Merge left and right structures");

    StatsArgs st;
    auto* ct = app.add_subcommand("stats", "Paired t-tests between two methods' metric tables");
    ct->add_option("--a", st.a, "Metrics CSV of method A")->required();
    ct->add_option("--b", st.b, "Metrics CSV of method B")->required();
    ct->add_option("--out", st.out, "Output stats CSV")->required();
    ct->add_option("--m", st.m, "Comparison count for Bonferroni")->capture_default_str();
    ct->add_option("--metric", st.metric, "Metric column")
        ->check(CLI::IsMember({"dice", "vsi", "centroid_dist_mm", "vol_a_mm3", "vol_b_mm3"}))
        ->capture_default_str();

    PhantomArgs ph;
    auto* cp = app.add_subcommand("phantom", "Write a phantom atlas library and held-out subject");
    cp->add_option("--seed", ph.seed, "Random seed")->capture_default_str();
    cp->add_option("--out-dir", ph.out_dir, "Output directory")->required();
    cp->add_option("--n-atlases", ph.atlases, "Number of priors")->capture_default_str();
    cp->add_option("--noise", ph.noise, "Noise sigma as a fraction of the intensity range")->capture_default_str();
    cp->add_option("--max-disp", ph.max_disp, "Maximum random displacement (mm)")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    std::optional<fs::path> out_dir;
    if (*cg) out_dir = seg.out_dir;
    if (*ce) out_dir = ev.out_dir;
    if (*cp) out_dir = ph.out_dir;
    try {
        if (*cs) return run_synth(synth);
        if (*cg) return run_segment_cmd(seg);
        if (*ce) return run_eval_cmd(ev);
        if (*ct) return run_stats_cmd(st);
        if (*cp) return run_phantom_cmd(ph);
    } catch (const Error& e) {
        return fail(e.code(), e.what(), out_dir);
    } catch (const std::exception& e) {
        return fail(ErrorCode::IoFailure, e.what(), out_dir);
    }
    return 1;
}
