#pragma once

#include "atlasfuse/pipeline.hpp"

namespace bench {

/// Shared 64^3 phantom dataset, built on first use.
inline const atlasfuse::PhantomDataset& dataset() {
    static const atlasfuse::PhantomDataset ds = [] {
        atlasfuse::PhantomDatasetSpec spec;
        spec.atlases = 5;
        return atlasfuse::make_phantom_dataset(spec);
    }();
    return ds;
}

} // namespace bench
