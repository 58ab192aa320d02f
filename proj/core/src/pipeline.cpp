#include "atlasfuse/pipeline.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "atlasfuse/atlas.hpp"
#include "atlasfuse/nifti.hpp"
#include "parallel.hpp"

namespace atlasfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json synthesis_to_json(const SynthesisParams& p) {
    return {{"ti_ms", p.ti_ms},
            {"output", p.output == SynthOutput::Magnitude ? "magnitude" : "signed"},
            {"t1_floor_ms", p.t1_floor_ms},
            {"t1_unit_scale", p.t1_unit_scale},
            {"m0", "constant"}};
}

SynthesisParams synthesis_from_json(const json& j) {
    SynthesisParams p;
    p.ti_ms = j.value("ti_ms", p.ti_ms);
    const std::string out = j.value("output", std::string("magnitude"));
    if (out == "magnitude")
        p.output = SynthOutput::Magnitude;
    else if (out == "signed")
        p.output = SynthOutput::Signed;
    else
        throw Error(ErrorCode::InvalidArgument, "synthesis output must be magnitude or signed");
    p.t1_floor_ms = j.value("t1_floor_ms", p.t1_floor_ms);
    p.t1_unit_scale = j.value("t1_unit_scale", p.t1_unit_scale);
    return p;
}

DeformationField crop_field(const DeformationField& field, const CropBox& box) {
    const Geometry g = crop_geometry(field.geometry(), box);
    DeformationField out(g);
    for (int k = 0; k < g.nz(); ++k)
        for (int j = 0; j < g.ny(); ++j)
            for (int i = 0; i < g.nx(); ++i)
                out[g.offset(i, j, k)] = field[field.geometry().offset(i + box.min[0], j + box.min[1], k + box.min[2])];
    return out;
}

CropBox box_around(const std::vector<Vec3>& indices, int margin, const Index3& dims) {
    if (indices.empty()) throw Error(ErrorCode::NoOverlap, "template crop region does not reach the input lattice");
    Vec3 lo = indices.front(), hi = indices.front();
    for (const auto& p : indices) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    CropBox box;
    for (int a = 0; a < 3; ++a) {
        box.min[a] = static_cast<int>(std::floor(lo[a])) - margin;
        box.max[a] = static_cast<int>(std::ceil(hi[a])) + margin;
    }
    box = box.clipped(dims);
    if (box.empty()) throw Error(ErrorCode::NoOverlap, "template crop region falls outside the input lattice");
    return box;
}

/// The template crop box carried into input voxel space by the template -> input affine.
CropBox map_crop_box(const CropBox& tbox, const Geometry& tg, const AffineTransform& to_input, const Geometry& ig,
                     int margin) {
    std::vector<Vec3> corners;
    for (int c = 0; c < 8; ++c) {
        const Vec3 idx((c & 1) ? tbox.max[0] : tbox.min[0], (c & 2) ? tbox.max[1] : tbox.min[1],
                       (c & 4) ? tbox.max[2] : tbox.min[2]);
        corners.push_back(ig.world_to_index(to_input.apply(tg.index_to_world(idx))));
    }
    return box_around(corners, margin, ig.dims());
}

/// Input voxels whose template image falls inside the template crop box.
CropBox box_from_field(const CropBox& tbox, const Geometry& tg, const DeformationField& to_template, int margin) {
    const Geometry& ig = to_template.geometry();
    std::vector<Vec3> hits;
    for (std::size_t v = 0; v < ig.voxel_count(); ++v) {
        const Vec3 t = tg.world_to_index(to_template.map_voxel(v));
        bool inside = true;
        for (int a = 0; a < 3; ++a) inside = inside && t[a] >= tbox.min[a] - 0.5 && t[a] <= tbox.max[a] + 0.5;
        if (inside) {
            const Index3 ix = ig.index_of(v);
            hits.emplace_back(ix[0], ix[1], ix[2]);
        }
    }
    return box_around(hits, margin, ig.dims());
}

class OutputGuard {
public:
    void track(const fs::path& p) { paths_.push_back(p); }
    void release() { paths_.clear(); }
    ~OutputGuard() {
        std::error_code ec;
        for (const auto& p : paths_) fs::remove(p, ec);
    }

private:
    std::vector<fs::path> paths_;
};

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    out << text << '\n';
    if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

void require_file(const fs::path& path) {
    if (!fs::is_regular_file(path)) throw Error(ErrorCode::MissingFile, path.string());
}

} // namespace

std::string to_string(InputMode mode) {
    switch (mode) {
    case InputMode::Wmn: return "wmn";
    case InputMode::Mp2Syn: return "mp2syn";
    case InputMode::Mp2Uni: return "mp2uni";
    }
    return "wmn";
}

std::string to_string(FusionMethod method) { return method == FusionMethod::Jlf ? "jlf" : "mv"; }

InputMode parse_input_mode(const std::string& text) {
    if (text == "wmn") return InputMode::Wmn;
    if (text == "mp2syn") return InputMode::Mp2Syn;
    if (text == "mp2uni") return InputMode::Mp2Uni;
    throw Error(ErrorCode::InvalidArgument, "mode must be wmn, mp2syn or mp2uni (got '" + text + "')");
}

FusionMethod parse_fusion_method(const std::string& text) {
    if (text == "jlf") return FusionMethod::Jlf;
    if (text == "mv") return FusionMethod::Mv;
    throw Error(ErrorCode::InvalidArgument, "fusion must be jlf or mv (got '" + text + "')");
}

FusionMethod RunManifest::resolved_fusion() const {
    if (fusion) return *fusion;
    return mode == InputMode::Mp2Uni ? FusionMethod::Mv : FusionMethod::Jlf;
}

std::string RunManifest::to_json() const {
    json j;
    j["tool_version"] = tool_version;
    j["mode"] = to_string(mode);
    j["fusion"] = to_string(resolved_fusion());
    j["registration"] = json::parse(registration.to_json());
    j["jlf"] = json::parse(jlf.to_json());
    j["synthesis"] = synthesis_to_json(synthesis);
    j["crop_margin"] = crop_margin;
    j["input_hashes"] = input_hashes;
    return j.dump(2);
}

RunManifest RunManifest::from_json(const std::string& text) {
    RunManifest m;
    try {
        const json j = json::parse(text);
        if (j.contains("mode")) m.mode = parse_input_mode(j.at("mode").get<std::string>());
        if (j.contains("fusion")) m.fusion = parse_fusion_method(j.at("fusion").get<std::string>());
        if (j.contains("registration")) m.registration = RegConfig::from_json(j.at("registration").dump());
        if (j.contains("jlf")) m.jlf = JlfParams::from_json(j.at("jlf").dump());
        if (j.contains("synthesis")) m.synthesis = synthesis_from_json(j.at("synthesis"));
        m.crop_margin = j.value("crop_margin", m.crop_margin);
        m.threads = j.value("threads", m.threads);
        if (j.contains("input_hashes")) m.input_hashes = j.at("input_hashes").get<std::map<std::string, std::string>>();
        m.tool_version = j.value("tool_version", m.tool_version);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument, std::string("manifest JSON: ") + e.what());
    }
    if (m.crop_margin < 0) throw Error(ErrorCode::InvalidArgument, "crop_margin must be >= 0");
    return m;
}

VolumeGrid prepare_input(const VolumeGrid& input, const RunManifest& manifest) {
    if (manifest.mode == InputMode::Mp2Syn) return synthesize_wmn(input, manifest.synthesis);
    return input;
}

LabelVolume segment_image(const VolumeGrid& input, const AtlasLibrary& library, const RunManifest& manifest,
                          const std::optional<DeformationField>& truth_to_template, SegmentDiagnostics* diagnostics) {
    if (library.priors.empty()) throw Error(ErrorCode::EmptyAtlasList, "atlas library has no priors");
    for (const auto& p : library.priors)
        if (!p.warp_to_template) throw Error(ErrorCode::BadAtlasLibrary, "prior " + p.id + " has no template warp");
    manifest.registration.validate();
    manifest.jlf.validate();

    const VolumeGrid& tmpl = library.template_image;
    const Geometry& tg = tmpl.geometry();
    const Geometry& ig = input.geometry();
    SegmentDiagnostics diag;

    // Input -> template displacement on the cropped input lattice.
    DeformationField to_template;
    if (truth_to_template) {
        require_same_geometry(truth_to_template->geometry(), ig, "truth warp vs input");
        diag.perfect_warp = true;
        diag.input_box = box_from_field(library.crop_box, tg, *truth_to_template, manifest.crop_margin);
        to_template = crop_field(*truth_to_template, diag.input_box);
    } else {
        const AffineTransform rigid = register_rigid(tmpl, input, manifest.registration);
        diag.rigid = rigid;
        diag.input_box = map_crop_box(library.crop_box, tg, rigid, ig, manifest.crop_margin);
        const VolumeGrid tmpl_c = crop(tmpl, library.crop_box);
        const VolumeGrid input_c = crop(input, diag.input_box);
        DeformableResult def = register_deformable(tmpl_c, input_c, rigid, manifest.registration);
        InversionResult inv = invert_field(def.field, 0.01, 50, input_c.geometry());
        diag.inversion_residual_mm = inv.residual_mm;
        diag.deformable = std::move(def);
        to_template = std::move(inv.field);
    }
    const Geometry cg = to_template.geometry();
    const VolumeGrid target = crop(input, diag.input_box);

    const std::size_t n = library.priors.size();
    std::vector<LabelVolume> labels(n);
    std::vector<VolumeGrid> intensities(n);
    const FusionMethod fusion = manifest.resolved_fusion();
    detail::parallel_for(
        0, n,
        [&](std::size_t i) {
            const AtlasPrior& prior = library.priors[i];
            const DeformationField field = compose_fields(to_template, *prior.warp_to_template);
            labels[i] = resample(prior.labels, cg, field, Interp::Nearest);
            if (fusion == FusionMethod::Jlf) intensities[i] = resample(prior.intensity, cg, field, Interp::Trilinear);
        },
        manifest.threads);

    LabelVolume fused;
    if (fusion == FusionMethod::Jlf) {
        JlfParams params = manifest.jlf;
        params.threads = manifest.threads;
        fused = joint_label_fusion(target, intensities, labels, params);
    } else {
        fused = majority_vote(labels);
    }
    const CropBox box = diag.input_box;
    if (diagnostics) *diagnostics = std::move(diag);
    return paste(LabelVolume(ig), fused, box);
}

int compute_missing_prior_warps(AtlasLibrary& library, const RegConfig& config, unsigned threads) {
    std::vector<std::size_t> missing;
    for (std::size_t i = 0; i < library.priors.size(); ++i)
        if (!library.priors[i].warp_to_template) missing.push_back(i);
    // Each prior is registered independently, so the worker count cannot change any result.
    detail::parallel_for(
        0, missing.size(),
        [&](std::size_t k) {
            AtlasPrior& prior = library.priors[missing[k]];
            const AffineTransform affine = register_affine(library.template_image, prior.intensity, config);
            prior.warp_to_template = register_deformable(library.template_image, prior.intensity, affine, config).field;
        },
        threads);
    return static_cast<int>(missing.size());
}

SegmentOutputs segment_output_paths(const fs::path& output_dir) {
    return {output_dir / "segmentation.nii.gz", output_dir / "volumes.csv", output_dir / "manifest.json"};
}

SegmentOutputs run_segment(const SegmentRequest& request, LabelVolume* segmentation) {
    require_file(request.input);
    const SegmentOutputs outputs = segment_output_paths(request.output_dir);
    std::error_code ec;
    fs::create_directories(request.output_dir, ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + request.output_dir.string() + ": " + ec.message());
    OutputGuard guard;

    RunManifest manifest = request.manifest;
    manifest.input_hashes["input"] = sha256_file(request.input);
    manifest.input_hashes["template"] = sha256_file(request.atlas_dir / "template.nii.gz");
    AtlasLibrary library = load_atlas_library(request.atlas_dir);
    if (compute_missing_prior_warps(library, manifest.registration, manifest.threads) > 0 && request.cache_prior_warps) {
        for (const auto& prior : library.priors) {
            const fs::path wp = prior_warp_path(request.atlas_dir, prior.id);
            if (!fs::exists(wp)) nifti::write_field(*prior.warp_to_template, wp);
        }
    }
    std::optional<DeformationField> truth;
    if (request.truth_warp) {
        require_file(*request.truth_warp);
        manifest.input_hashes["truth_warp"] = sha256_file(*request.truth_warp);
        truth = nifti::read_field(*request.truth_warp);
    }

    const VolumeGrid input = prepare_input(nifti::read_volume(request.input), manifest);
    SegmentDiagnostics diag;
    LabelVolume seg = segment_image(input, library, manifest, truth, &diag);

    guard.track(outputs.segmentation);
    nifti::write_volume(seg, outputs.segmentation);
    guard.track(outputs.volumes_csv);
    write_volume_csv(outputs.volumes_csv, seg, library.scheme);
    guard.track(outputs.manifest_json);
    write_text(outputs.manifest_json, manifest.to_json());
    guard.release();
    if (segmentation) *segmentation = std::move(seg);
    return outputs;
}

SegmentationReport run_eval(const EvalRequest& request) {
    require_file(request.seg_a);
    require_file(request.seg_b);
    LabelVolume a = nifti::read_labels(request.seg_a);
    const LabelVolume b = nifti::read_labels(request.seg_b);
    const LabelScheme scheme = request.scheme ? LabelScheme::load(*request.scheme) : LabelScheme::thalamic_default();
    if (request.intensity_a.has_value() != request.intensity_b.has_value())
        throw Error(ErrorCode::InvalidArgument, "alignment needs both intensity images");
    if (request.intensity_a) {
        const VolumeGrid ia = nifti::read_volume(*request.intensity_a);
        const VolumeGrid ib = nifti::read_volume(*request.intensity_b);
        require_same_geometry(ia.geometry(), a.geometry(), "intensity a vs seg a");
        require_same_geometry(ib.geometry(), b.geometry(), "intensity b vs seg b");
        const AffineTransform b_to_a = register_affine(ib, ia, request.registration);
        a = warp_labels(a, b_to_a, b.geometry());
    }
    const SegmentationReport report = build_report(a, b, scheme, request.aggregate_hemispheres);
    if (!request.output_dir.empty()) {
        std::error_code ec;
        fs::create_directories(request.output_dir, ec);
        if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + request.output_dir.string());
        OutputGuard guard;
        guard.track(request.output_dir / "metrics.csv");
        write_metrics_csv(request.output_dir / "metrics.csv", report, request.subject_id);
        guard.track(request.output_dir / "metrics.json");
        write_text(request.output_dir / "metrics.json", report.to_json());
        guard.release();
    }
    return report;
}

std::vector<PairedTestResult> run_stats(const StatsRequest& request) {
    require_file(request.metrics_a);
    require_file(request.metrics_b);
    const auto results = compare_methods(read_metrics_csv(request.metrics_a), read_metrics_csv(request.metrics_b),
                                         request.metric, request.comparisons);
    if (!request.output.empty()) write_stats_csv(request.output, results);
    return results;
}

PhantomDataset make_phantom_dataset(const PhantomDatasetSpec& spec) {
    PhantomSpec ps = PhantomSpec::thalamic_default(spec.seed);
    ps.noise_fraction = spec.noise_fraction;
    PhantomDataset ds;
    ds.base = generate_phantom(ps);
    const SynthesisParams synth;
    ds.base_wmn = synthesize_wmn(ds.base.t1_map, synth);

    AtlasDeriveSpec as;
    as.count = spec.atlases;
    as.seed = spec.seed;
    as.max_displacement_mm = spec.max_displacement_mm;
    as.noise_fraction = spec.noise_fraction;
    ds.library = derive_atlases(ds.base_wmn, ds.base.truth, LabelScheme::thalamic_default(), as);

    SubjectSpec ss;
    ss.seed = spec.seed + 0x5eedULL;
    ss.max_displacement_mm = spec.max_displacement_mm;
    ss.noise_fraction = spec.noise_fraction;
    ds.subject = make_subject(ds.base.t1_map, ds.base.truth, ss);

    // The acquired-contrast subject image shares the subject's geometry change but not its noise.
    ds.subject_wmn = resample(ds.base_wmn, ds.base_wmn.geometry(), ds.subject.truth_warp);
    const auto [lo, hi] = std::minmax_element(ds.base_wmn.values().begin(), ds.base_wmn.values().end());
    std::seed_seq seq{static_cast<std::uint32_t>(ss.seed), static_cast<std::uint32_t>(ss.seed >> 32), 7u};
    std::mt19937_64 rng(seq);
    std::normal_distribution<double> nd(0.0, spec.noise_fraction * (*hi - *lo));
    if (spec.noise_fraction > 0.0)
        for (auto& x : ds.subject_wmn.data()) x += nd(rng);
    return ds;
}

void write_phantom_dataset(const PhantomDataset& ds, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "subject", ec);
    fs::create_directories(dir / "base", ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
    save_atlas_library(ds.library, dir / "atlas");
    nifti::write_volume(ds.subject.t1_map, dir / "subject" / "t1.nii.gz");
    nifti::write_volume(ds.subject_wmn, dir / "subject" / "wmn.nii.gz");
    nifti::write_volume(ds.subject.truth, dir / "subject" / "labels.nii.gz");
    nifti::write_field(ds.subject.truth_warp, dir / "subject" / "truth_warp.nii.gz");
    nifti::write_volume(ds.base.t1_map, dir / "base" / "t1.nii.gz");
    nifti::write_volume(ds.base_wmn, dir / "base" / "wmn.nii.gz");
    nifti::write_volume(ds.base.truth, dir / "base" / "labels.nii.gz");
}

void write_volume_csv(const fs::path& path, const LabelVolume& labels, const LabelScheme& scheme) {
    std::ostringstream out;
    out << "label_code,label_name,voxels,volume_mm3\n";
    const double vox = labels.geometry().voxel_volume();
    char buf[40];
    for (const auto& e : scheme.entries()) {
        const auto count = std::count(labels.values().begin(), labels.values().end(), e.code);
        std::snprintf(buf, sizeof buf, "%.17g", static_cast<double>(count) * vox);
        out << e.code << ',' << e.name << ',' << count << ',' << buf << '\n';
    }
    std::ofstream f(path);
    if (!f) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    f << out.str();
    if (!f) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw Error(ErrorCode::IoFailure, "SHA-256 unavailable");
    }
    std::array<char, 1 << 16> buf;
    while (in) {
        in.read(buf.data(), buf.size());
        if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    static const char* kHex = "0123456789abcdef";
    std::string hex;
    for (unsigned i = 0; i < len; ++i) {
        hex += kHex[digest[i] >> 4];
        hex += kHex[digest[i] & 0xf];
    }
    return hex;
}

int exit_code_for(ErrorCategory category) {
    switch (category) {
    case ErrorCategory::Usage: return 1;
    case ErrorCategory::Data: return 2;
    case ErrorCategory::Numerical: return 3;
    }
    return 2;
}

std::string error_json(ErrorCode code, const std::string& message) {
    const ErrorCategory cat = error_category(code);
    const char* cat_name = cat == ErrorCategory::Usage ? "usage" : cat == ErrorCategory::Data ? "data" : "numerical";
    json j{{"error", std::string(error_name(code))},
           {"category", cat_name},
           {"exit_code", exit_code_for(cat)},
           {"message", message}};
    return j.dump(2);
}

std::string error_json(const Error& error) { return error_json(error.code(), error.what()); }

} // namespace atlasfuse
