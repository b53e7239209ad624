// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "roimatch/error.hpp"

namespace roimatch::geom {

struct Point {
    double x = 0.0;
    double y = 0.0;
};

inline Point operator+(Point a, Point b) { return {a.x + b.x, a.y + b.y}; }
inline Point operator-(Point a, Point b) { return {a.x - b.x, a.y - b.y}; }
inline Point operator*(Point a, double s) { return {a.x * s, a.y * s}; }
inline double dot(Point a, Point b) { return a.x * b.x + a.y * b.y; }
inline double cross(Point a, Point b) { return a.x * b.y - a.y * b.x; }

// Simple polygon in pixel coordinates. Vertices are counter-clockwise under
// the shoelace-positive convention (signed_area() > 0). Sub-pixel coordinates
// are kept exact; rounding happens only at rasterization.
struct Polygon {
    int id = 0;
    std::vector<Point> points;

    double signed_area() const;
    double perimeter() const;
    Point centroid() const;
    bool is_convex() const;
    bool is_simple() const;
    Polygon scaled(double sx, double sy) const;

    // Throws GeometryError unless the polygon has >= 3 vertices, positive
    // signed area and no self-intersections.
    void validate() const;
};

// Ground-truth region instances; ids must be unique and dense 1..N.
struct PolygonSet {
    std::vector<Polygon> polygons;

    void validate() const;
};

// Per-pixel labels; 0 = background. Instance maps store the instance id,
// binary masks store 1 for foreground.
struct RasterMask {
    int height = 0;
    int width = 0;
    std::vector<int32_t> values;

    static RasterMask zeros(int height, int width);
    int32_t at(int y, int x) const { return values[static_cast<size_t>(y) * width + x]; }
    int32_t& at(int y, int x) { return values[static_cast<size_t>(y) * width + x]; }
    int64_t count_nonzero() const;
};

// Inward offset distance D = A * (1 - r^2) / L for shrink ratio r in (0, 1].
// Throws GeometryError when the polygon is degenerate (zero area/perimeter).
double shrink_offset(const Polygon& polygon, double shrink_ratio);

// Offsets the polygon inward by `offset` pixels using miter joins (miter
// limit 2). Returns std::nullopt when the polygon vanishes. Non-convex inputs
// whose offset self-intersects are resolved by keeping the largest interior
// loop; loops that would leave the input polygon are discarded.
std::optional<Polygon> shrink_polygon(const Polygon& polygon, double offset);

// Pixel-center (x+0.5, y+0.5) even-odd scanline fill. Polygons are drawn in
// increasing id order, so where instances overlap the higher id wins.
RasterMask rasterize(const PolygonSet& polygons, int height, int width);

// Single-polygon binary fill ({0,1} values).
RasterMask rasterize_binary(const Polygon& polygon, int height, int width);

// Traces the outer boundary of every 4-connected nonzero component into a
// polygon on the pixel-corner lattice; component ids are assigned 1..N in
// scan order. Holes inside a component are not traced (they come back filled
// under rasterize). Round-trips exactly for hole-free masks.
PolygonSet mask_to_polygons(const RasterMask& binary_mask);

// Even-odd point-in-polygon test (boundary points count as inside).
bool point_in_polygon(Point p, const Polygon& polygon);

// Distance from a point to the polygon boundary (edges as segments).
double distance_to_boundary(Point p, const Polygon& polygon);

// JSON forms: polygon {"id": int, "points": [[x, y], ...]}, set = array.
std::string to_json_string(const PolygonSet& polygons);
PolygonSet polygon_set_from_json_string(const std::string& text);

}  // namespace roimatch::geom
