#include <benchmark/benchmark.h>

#include "atlasfuse/fusion.hpp"
#include "atlasfuse/grid.hpp"
#include "bench_common.hpp"

using namespace atlasfuse;

namespace {

struct CroppedPriors {
    VolumeGrid target;
    std::vector<VolumeGrid> images;
    std::vector<LabelVolume> labels;
};

// Priors carried into the subject frame by their known warps, cropped to the thalamus.
const CroppedPriors& priors() {
    static const CroppedPriors c = [] {
        const PhantomDataset& ds = bench::dataset();
        const Geometry& g = ds.subject_wmn.geometry();
        const CropBox box = label_bounding_box(ds.subject.truth, 4);
        CroppedPriors out;
        out.target = crop(ds.subject_wmn, box);
        for (const auto& p : ds.library.priors) {
            const DeformationField f = compose_fields(ds.subject.truth_warp, *p.warp_to_template);
            out.images.push_back(crop(resample(p.intensity, g, f), box));
            out.labels.push_back(crop(resample(p.labels, g, f), box));
        }
        return out;
    }();
    return c;
}

void BM_JointLabelFusion(benchmark::State& state) {
    const CroppedPriors& c = priors();
    JlfParams params;
    params.threads = static_cast<unsigned>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(joint_label_fusion(c.target, c.images, c.labels, params));
    state.counters["voxels"] = static_cast<double>(c.target.size());
}
BENCHMARK(BM_JointLabelFusion)->Arg(1)->Arg(0)->Unit(benchmark::kMillisecond);

void BM_MajorityVote(benchmark::State& state) {
    const CroppedPriors& c = priors();
    for (auto _ : state) benchmark::DoNotOptimize(majority_vote(c.labels));
}
BENCHMARK(BM_MajorityVote)->Unit(benchmark::kMillisecond);

} // namespace
