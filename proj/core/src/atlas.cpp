#include "atlasfuse/atlas.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "atlasfuse/nifti.hpp"

namespace atlasfuse {

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::BadAtlasLibrary, "missing " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void require_file(const fs::path& path) {
    if (!fs::is_regular_file(path)) throw Error(ErrorCode::BadAtlasLibrary, "missing " + path.string());
}

} // namespace

fs::path prior_warp_path(const fs::path& dir, const std::string& prior_id) {
    return dir / "priors" / prior_id / "warp_to_template.nii.gz";
}

void save_atlas_library(const AtlasLibrary& library, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir / "priors", ec);
    if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
    nifti::write_volume(library.template_image, dir / "template.nii.gz");
    {
        std::ofstream out(dir / "cropbox.json");
        out << library.crop_box.to_json() << '\n';
        if (!out) throw Error(ErrorCode::IoFailure, "cannot write cropbox.json");
    }
    library.scheme.save(dir / "scheme.json");
    for (const auto& prior : library.priors) {
        const fs::path pdir = dir / "priors" / prior.id;
        fs::create_directories(pdir, ec);
        if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + pdir.string() + ": " + ec.message());
        nifti::write_volume(prior.intensity, pdir / "intensity.nii.gz");
        nifti::write_volume(prior.labels, pdir / "labels.nii.gz");
        if (prior.warp_to_template) nifti::write_field(*prior.warp_to_template, pdir / "warp_to_template.nii.gz");
    }
}

AtlasLibrary load_atlas_library(const fs::path& dir, bool load_warps) {
    if (!fs::is_directory(dir)) throw Error(ErrorCode::BadAtlasLibrary, "not a directory: " + dir.string());
    AtlasLibrary lib;
    require_file(dir / "template.nii.gz");
    lib.template_image = nifti::read_volume(dir / "template.nii.gz");
    lib.crop_box = CropBox::from_json(slurp(dir / "cropbox.json"));
    lib.scheme = LabelScheme::from_json(slurp(dir / "scheme.json"));
    const Geometry& tg = lib.template_image.geometry();
    const CropBox clipped = lib.crop_box.clipped(tg.dims());
    if (lib.crop_box.empty() || !(clipped == lib.crop_box))
        throw Error(ErrorCode::BadAtlasLibrary, "crop box lies outside the template lattice");

    std::vector<std::string> ids;
    if (fs::is_directory(dir / "priors"))
        for (const auto& entry : fs::directory_iterator(dir / "priors"))
            if (entry.is_directory()) ids.push_back(entry.path().filename().string());
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw Error(ErrorCode::EmptyAtlasList, "no priors under " + (dir / "priors").string());

    for (const auto& id : ids) {
        const fs::path pdir = dir / "priors" / id;
        require_file(pdir / "intensity.nii.gz");
        require_file(pdir / "labels.nii.gz");
        AtlasPrior prior;
        prior.id = id;
        prior.intensity = nifti::read_volume(pdir / "intensity.nii.gz");
        prior.labels = nifti::read_labels(pdir / "labels.nii.gz");
        if (!prior.intensity.geometry().matches(prior.labels.geometry()))
            throw Error(ErrorCode::BadAtlasLibrary, "prior " + id + " intensity and labels differ in geometry");
        try {
            validate_labels(prior.labels, lib.scheme);
        } catch (const Error& e) {
            throw Error(ErrorCode::BadAtlasLibrary, "prior " + id + ": " + e.what());
        }
        const fs::path wpath = pdir / "warp_to_template.nii.gz";
        if (load_warps && fs::is_regular_file(wpath)) {
            DeformationField warp = nifti::read_field(wpath);
            if (!warp.geometry().matches(tg, 1e-4))
                throw Error(ErrorCode::BadAtlasLibrary, "prior " + id + " warp is not on the template lattice");
            prior.warp_to_template = std::move(warp);
        }
        lib.priors.push_back(std::move(prior));
    }
    return lib;
}

} // namespace atlasfuse
