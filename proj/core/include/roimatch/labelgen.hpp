// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "roimatch/geometry.hpp"

namespace roimatch::label {

// Supervision tensors for one target image. Merged masks are binary; the
// instance maps carry dense ids (last-drawn winner where regions overlap).
// Per-instance masks are kept in full because overlapping instances make a
// single id map lossy; index i holds instance id i+1.
struct SegTargets {
    geom::RasterMask region;
    geom::RasterMask kernel;
    geom::RasterMask region_instances;
    geom::RasterMask kernel_instances;
    std::vector<geom::RasterMask> per_instance_region;
    std::vector<geom::RasterMask> per_instance_kernel;
    // Instances dropped because their geometry was degenerate or rasterized
    // to zero pixels at this resolution; survivors are renumbered densely.
    int skipped_degenerate = 0;

    int num_instances() const { return static_cast<int>(per_instance_region.size()); }
};

// Rasterizes every instance, shrinks each polygon by its own offset
// D = A(1-r^2)/L, and composes merged + per-instance masks. Instances whose
// shrunk polygon vanishes get a single-pixel kernel at the region pixel
// nearest the centroid, so every surviving instance stays decodable.
SegTargets generate_targets(const geom::PolygonSet& polygons, int height, int width,
                            double shrink_ratio);

// Ring supervised by the aggregation loss: pixels of instance `id`'s region
// that are not in its kernel. Pixels are (y, x). Throws UsageError for ids
// outside 1..N.
std::vector<std::pair<int, int>> valid_pixels(const SegTargets& targets, int id);

// Pixels of instance `id`'s kernel (the cluster whose centroid anchors the
// aggregation and discrimination losses).
std::vector<std::pair<int, int>> kernel_pixels(const SegTargets& targets, int id);

// Disk cache: <prefix>_region.pgm, _kernel.pgm, _region_inst.pgm,
// _kernel_inst.pgm plus <prefix>_targets.json listing the instance ids.
void save_targets(const SegTargets& targets, const std::string& path_prefix);

}  // namespace roimatch::label
