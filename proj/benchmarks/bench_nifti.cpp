#include <benchmark/benchmark.h>

#include <filesystem>

#include "atlasfuse/nifti.hpp"
#include "bench_common.hpp"

using namespace atlasfuse;
namespace fs = std::filesystem;

namespace {

fs::path scratch_file(const char* name) {
    const fs::path dir = fs::temp_directory_path() / "atlasfuse_bench";
    fs::create_directories(dir);
    return dir / name;
}

// state.range(0) selects gzip (1) or plain (0) output.
void BM_NiftiWrite(benchmark::State& state) {
    const VolumeGrid& v = bench::dataset().base_wmn;
    const fs::path path = scratch_file(state.range(0) ? "w.nii.gz" : "w.nii");
    for (auto _ : state) nifti::write_volume(v, path);
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * v.size() * sizeof(float)));
}
BENCHMARK(BM_NiftiWrite)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_NiftiRead(benchmark::State& state) {
    const VolumeGrid& v = bench::dataset().base_wmn;
    const fs::path path = scratch_file(state.range(0) ? "r.nii.gz" : "r.nii");
    nifti::write_volume(v, path);
    for (auto _ : state) benchmark::DoNotOptimize(nifti::read_volume(path));
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * v.size() * sizeof(float)));
}
BENCHMARK(BM_NiftiRead)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

} // namespace
