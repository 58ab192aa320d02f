#include <benchmark/benchmark.h>

#include "atlasfuse/register.hpp"
#include "bench_common.hpp"

using namespace atlasfuse;

namespace {

// One deformable iteration per pyramid level, so the timing tracks the per-iteration cost.
void BM_DeformableIteration(benchmark::State& state) {
    const PhantomDataset& ds = bench::dataset();
    RegConfig cfg;
    cfg.deformable_iterations = {1, 1, 1};
    for (auto _ : state)
        benchmark::DoNotOptimize(register_deformable(ds.base_wmn, ds.subject_wmn, AffineTransform::identity(), cfg));
}
BENCHMARK(BM_DeformableIteration)->Unit(benchmark::kMillisecond);

void BM_RigidRegistration(benchmark::State& state) {
    const PhantomDataset& ds = bench::dataset();
    const RegConfig cfg;
    for (auto _ : state) benchmark::DoNotOptimize(register_rigid(ds.base_wmn, ds.subject_wmn, cfg));
}
BENCHMARK(BM_RigidRegistration)->Unit(benchmark::kMillisecond);

void BM_InvertField(benchmark::State& state) {
    const PhantomDataset& ds = bench::dataset();
    for (auto _ : state) benchmark::DoNotOptimize(invert_field(ds.subject.truth_warp));
}
BENCHMARK(BM_InvertField)->Unit(benchmark::kMillisecond);

} // namespace
