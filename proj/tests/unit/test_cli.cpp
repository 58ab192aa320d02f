#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "atlasfuse/metrics.hpp"
#include "atlasfuse/nifti.hpp"
#include "atlasfuse/pipeline.hpp"
#include "fixtures.hpp"

using namespace atlasfuse;
using namespace atlasfuse::testing;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
    int status = -1;
    std::string out;
};

/// Runs the CLI with `args`, capturing stdout; stderr is discarded.
Run cli(const std::string& args, const TempDir& dir) {
    const fs::path capture = dir / "stdout.txt";
    const std::string cmd = std::string("\"") + ATLASFUSE_CLI_PATH + "\" " + args + " > \"" + capture.string() + "\" 2>/dev/null";
    const int raw = std::system(cmd.c_str());
    Run r;
    r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    r.out = file_bytes(capture);
    return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

json error_doc(const fs::path& dir) { return json::parse(file_bytes(dir / "error.json")); }

} // namespace

TEST_CASE("usage errors exit with 1") {
    TempDir dir("cli");
    CHECK(cli("", dir).status == 1);
    CHECK(cli("frobnicate", dir).status == 1);
    CHECK(cli("segment --input x", dir).status == 1);
    CHECK(cli("segment --input x --atlas-dir y --out-dir z --mode t2", dir).status == 1);
    CHECK(cli("--help", dir).status == 0);
    const Run v = cli("--version", dir);
    CHECK(v.status == 0);
    CHECK(v.out.find(kToolVersion) != std::string::npos);
}

TEST_CASE("synth writes a nulled image") {
    TempDir dir("cli");
    VolumeGrid t1(cube_geometry(4), 1500.0);
    t1[0] = 0.0;
    nifti::write_volume(t1, dir / "t1.nii.gz");
    REQUIRE(cli("synth --t1 " + q(dir / "t1.nii.gz") + " --out " + q(dir / "w.nii.gz"), dir).status == 0);
    const VolumeGrid w = nifti::read_volume(dir / "w.nii.gz");
    CHECK(w[0] == 0.0);
    CHECK(w[1] == doctest::Approx(0.2130613).epsilon(1e-6));

    CHECK(cli("synth --t1 " + q(dir / "none.nii.gz") + " --out " + q(dir / "w.nii.gz"), dir).status == 2);
    CHECK(cli("synth --t1 " + q(dir / "t1.nii.gz") + " --out " + q(dir / "w.nii.gz") + " --ti 0", dir).status == 1);
}

TEST_CASE("data errors exit with 2 and leave error.json") {
    TempDir dir("cli");
    const Run r = cli("segment --input " + q(dir / "missing.nii.gz") + " --atlas-dir " + q(dir / "atlas") + " --out-dir " +
                          q(dir / "out"),
                      dir);
    CHECK(r.status == 2);
    const json e = error_doc(dir / "out");
    CHECK(e["category"] == "data");
    CHECK(e["exit_code"] == 2);
    CHECK(e.contains("error"));
    CHECK(e.contains("message"));
    CHECK_FALSE(fs::exists(dir / "out" / "segmentation.nii.gz"));
}

TEST_CASE("eval needs alignment across grids") {
    TempDir dir("cli");
    LabelVolume a(cube_geometry(8)), b(cube_geometry(6));
    a[0] = b[0] = 1;
    nifti::write_volume(a, dir / "a.nii.gz");
    nifti::write_volume(b, dir / "b.nii.gz");
    const std::string base = "eval --seg-a " + q(dir / "a.nii.gz") + " --seg-b " + q(dir / "b.nii.gz") + " --out-dir " + q(dir / "out");
    CHECK(cli(base, dir).status == 2);
    CHECK(error_doc(dir / "out")["error"] == "GeometryMismatch");
    CHECK(cli(base + " --align", dir).status == 1);
    CHECK(error_doc(dir / "out")["error"] == "Usage");

    const Run self = cli("eval --seg-a " + q(dir / "a.nii.gz") + " --seg-b " + q(dir / "a.nii.gz") + " --out-dir " + q(dir / "o2"), dir);
    CHECK(self.status == 0);
    CHECK(fs::exists(dir / "o2" / "metrics.csv"));
    CHECK(fs::exists(dir / "o2" / "metrics.json"));
}

TEST_CASE("stats prints the Bonferroni threshold") {
    TempDir dir("cli");
    SegmentationReport rep;
    NucleusMetrics m;
    m.code = 1;
    m.name = "right pulvinar";
    rep.rows.push_back(m);
    {
        std::ofstream fa(dir / "a.csv"), fb(dir / "b.csv");
        const double da[] = {0.9, 0.8, 0.85}, db[] = {0.7, 0.75, 0.8};
        for (int s = 0; s < 3; ++s) {
            rep.rows[0].dice = da[s];
            write_metrics_csv(fa, rep, "s" + std::to_string(s), s == 0);
            rep.rows[0].dice = db[s];
            write_metrics_csv(fb, rep, "s" + std::to_string(s), s == 0);
        }
    }
    const Run r = cli("stats --a " + q(dir / "a.csv") + " --b " + q(dir / "b.csv") + " --out " + q(dir / "s.csv"), dir);
    REQUIRE(r.status == 0);
    CHECK(r.out.rfind("bonferroni_threshold: 0.00384615384615 (0.05/13)\n", 0) == 0);
    CHECK(fs::exists(dir / "s.csv"));
    const Run one = cli("stats --a " + q(dir / "a.csv") + " --b " + q(dir / "b.csv") + " --out " + q(dir / "s.csv") + " --m 1", dir);
    CHECK(one.out.rfind("bonferroni_threshold: 0.05 (0.05/1)\n", 0) == 0);
}

TEST_CASE("phantom and segment end to end") {
    TempDir dir("cli");
    REQUIRE(cli("phantom --seed 2 --n-atlases 2 --out-dir " + q(dir / "ph"), dir).status == 0);
    CHECK(fs::exists(dir / "ph" / "atlas" / "template.nii.gz"));
    CHECK(fs::exists(dir / "ph" / "subject" / "truth_warp.nii.gz"));

    const std::string seg = "segment --input " + q(dir / "ph" / "subject" / "wmn.nii.gz") + " --atlas-dir " + q(dir / "ph" / "atlas") +
                            " --truth-warp " + q(dir / "ph" / "subject" / "truth_warp.nii.gz") + " --fusion mv";
    REQUIRE(cli(seg + " --out-dir " + q(dir / "o1") + " --threads 1", dir).status == 0);
    REQUIRE(cli(seg + " --out-dir " + q(dir / "o2") + " --threads 2", dir).status == 0);
    for (const char* f : {"segmentation.nii.gz", "volumes.csv", "manifest.json"})
        CHECK(file_bytes(dir / "o1" / f) == file_bytes(dir / "o2" / f));
    CHECK(json::parse(file_bytes(dir / "o1" / "manifest.json"))["fusion"] == "mv");

    const Run ev = cli("eval --seg-a " + q(dir / "o1" / "segmentation.nii.gz") + " --seg-b " + q(dir / "ph" / "subject" / "labels.nii.gz") +
                           " --out-dir " + q(dir / "ev"),
                       dir);
    CHECK(ev.status == 0);
    const auto rows = read_metrics_csv(dir / "ev" / "metrics.csv");
    bool found = false;
    for (const auto& row : rows)
        if (row.metrics.code == kWholeThalamusCode) {
            found = true;
            CHECK(row.metrics.dice > 0.9);
        }
    CHECK(found);
}
