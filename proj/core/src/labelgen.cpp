// SPDX-License-Identifier: Apache-2.0
#include "roimatch/labelgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "roimatch/image_io.hpp"

namespace roimatch::label {

namespace {

// Nearest region pixel to the polygon centroid; used when the shrunk polygon
// vanishes so the instance still has a one-pixel kernel.
std::pair<int, int> fallback_kernel_pixel(const geom::RasterMask& region_mask,
                                          geom::Point centroid) {
    double best = std::numeric_limits<double>::max();
    std::pair<int, int> best_px{-1, -1};
    for (int y = 0; y < region_mask.height; ++y) {
        for (int x = 0; x < region_mask.width; ++x) {
            if (region_mask.at(y, x) == 0) continue;
            const double dx = (x + 0.5) - centroid.x;
            const double dy = (y + 0.5) - centroid.y;
            const double d = dx * dx + dy * dy;
            if (d < best) {
                best = d;
                best_px = {y, x};
            }
        }
    }
    return best_px;
}

}  // namespace

SegTargets generate_targets(const geom::PolygonSet& polygons, int height, int width,
                            double shrink_ratio) {
    if (!(shrink_ratio > 0.0) || shrink_ratio > 1.0) {
        throw UsageError("shrink ratio must lie in (0, 1]");
    }
    SegTargets t;
    t.region = geom::RasterMask::zeros(height, width);
    t.kernel = geom::RasterMask::zeros(height, width);
    t.region_instances = geom::RasterMask::zeros(height, width);
    t.kernel_instances = geom::RasterMask::zeros(height, width);

    std::vector<const geom::Polygon*> order;
    order.reserve(polygons.polygons.size());
    for (const auto& p : polygons.polygons) order.push_back(&p);
    std::sort(order.begin(), order.end(),
              [](const geom::Polygon* a, const geom::Polygon* b) { return a->id < b->id; });

    for (const geom::Polygon* poly : order) {
        geom::RasterMask region_mask;
        geom::RasterMask kernel_mask = geom::RasterMask::zeros(height, width);
        try {
            const double offset = geom::shrink_offset(*poly, shrink_ratio);
            region_mask = geom::rasterize_binary(*poly, height, width);
            if (region_mask.count_nonzero() == 0) {
                ++t.skipped_degenerate;  // sub-pixel at this resolution
                continue;
            }
            if (auto shrunk = geom::shrink_polygon(*poly, offset)) {
                kernel_mask = geom::rasterize_binary(*shrunk, height, width);
                // Containment holds geometrically; enforce it pixel-wise too so
                // rasterization edge cases cannot break kernel <= region.
                for (size_t i = 0; i < kernel_mask.values.size(); ++i) {
                    if (region_mask.values[i] == 0) kernel_mask.values[i] = 0;
                }
            }
            if (kernel_mask.count_nonzero() == 0) {
                const auto [fy, fx] = fallback_kernel_pixel(region_mask, poly->centroid());
                kernel_mask.at(fy, fx) = 1;
            }
        } catch (const GeometryError&) {
            ++t.skipped_degenerate;
            continue;
        }
        const int id = static_cast<int>(t.per_instance_region.size()) + 1;
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                if (region_mask.at(y, x) != 0) {
                    t.region.at(y, x) = 1;
                    t.region_instances.at(y, x) = id;
                }
                if (kernel_mask.at(y, x) != 0) {
                    t.kernel.at(y, x) = 1;
                    t.kernel_instances.at(y, x) = id;
                }
            }
        }
        t.per_instance_region.push_back(std::move(region_mask));
        t.per_instance_kernel.push_back(std::move(kernel_mask));
    }
    return t;
}

namespace {
const geom::RasterMask& instance_mask(const std::vector<geom::RasterMask>& masks, int id) {
    if (id < 1 || id > static_cast<int>(masks.size())) {
        throw UsageError("unknown instance id " + std::to_string(id));
    }
    return masks[static_cast<size_t>(id) - 1];
}
}  // namespace

std::vector<std::pair<int, int>> valid_pixels(const SegTargets& targets, int id) {
    const geom::RasterMask& region = instance_mask(targets.per_instance_region, id);
    const geom::RasterMask& kernel = instance_mask(targets.per_instance_kernel, id);
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < region.height; ++y) {
        for (int x = 0; x < region.width; ++x) {
            if (region.at(y, x) != 0 && kernel.at(y, x) == 0) out.push_back({y, x});
        }
    }
    return out;
}

std::vector<std::pair<int, int>> kernel_pixels(const SegTargets& targets, int id) {
    const geom::RasterMask& kernel = instance_mask(targets.per_instance_kernel, id);
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < kernel.height; ++y) {
        for (int x = 0; x < kernel.width; ++x) {
            if (kernel.at(y, x) != 0) out.push_back({y, x});
        }
    }
    return out;
}

void save_targets(const SegTargets& targets, const std::string& path_prefix) {
    img::write_mask_binary(path_prefix + "_region.pgm", targets.region);
    img::write_mask_binary(path_prefix + "_kernel.pgm", targets.kernel);
    img::write_mask_instances(path_prefix + "_region_inst.pgm", targets.region_instances);
    img::write_mask_instances(path_prefix + "_kernel_inst.pgm", targets.kernel_instances);
    nlohmann::json meta;
    std::vector<int> ids(targets.per_instance_region.size());
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i) + 1;
    meta["instance_ids"] = ids;
    meta["skipped_degenerate"] = targets.skipped_degenerate;
    std::ofstream out(path_prefix + "_targets.json");
    if (!out) throw IoError("cannot write " + path_prefix + "_targets.json");
    out << meta.dump(2) << "\n";
}

}  // namespace roimatch::label
