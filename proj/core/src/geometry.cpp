// SPDX-License-Identifier: Apache-2.0
#include "roimatch/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

#include <json.hpp>

namespace roimatch::geom {

namespace {

constexpr double kEps = 1e-9;
constexpr double kMiterLimit = 2.0;

double seg_point_distance(Point p, Point a, Point b) {
    const Point ab = b - a;
    const double len2 = dot(ab, ab);
    if (len2 <= 0.0) return std::hypot(p.x - a.x, p.y - a.y);
    double t = dot(p - a, ab) / len2;
    t = std::clamp(t, 0.0, 1.0);
    const Point proj = a + ab * t;
    return std::hypot(p.x - proj.x, p.y - proj.y);
}

struct SegHit {
    bool hit = false;
    double t = 0.0;  // parameter on segment 1
    double u = 0.0;  // parameter on segment 2
    Point at;
};

// Intersection of [p, p2] and [q, q2]; parallel segments report no hit
// (collinear overlap is handled separately where it matters).
SegHit segment_intersection(Point p, Point p2, Point q, Point q2) {
    SegHit r;
    const Point d1 = p2 - p;
    const Point d2 = q2 - q;
    const double denom = cross(d1, d2);
    const double scale = std::abs(d1.x) + std::abs(d1.y) + std::abs(d2.x) + std::abs(d2.y);
    if (std::abs(denom) <= kEps * std::max(1.0, scale * scale)) return r;
    const Point pq = q - p;
    const double t = cross(pq, d2) / denom;
    const double u = cross(pq, d1) / denom;
    if (t < -kEps || t > 1.0 + kEps || u < -kEps || u > 1.0 + kEps) return r;
    r.hit = true;
    r.t = t;
    r.u = u;
    r.at = p + d1 * t;
    return r;
}

bool collinear_overlap(Point p, Point p2, Point q, Point q2) {
    const Point d1 = p2 - p;
    const Point d2 = q2 - q;
    if (std::abs(cross(d1, d2)) > kEps) return false;
    if (std::abs(cross(d1, q - p)) > kEps) return false;
    // Project onto the dominant axis and test interval overlap.
    const bool use_x = std::abs(d1.x) >= std::abs(d1.y);
    auto coord = [use_x](Point v) { return use_x ? v.x : v.y; };
    double lo1 = std::min(coord(p), coord(p2)), hi1 = std::max(coord(p), coord(p2));
    double lo2 = std::min(coord(q), coord(q2)), hi2 = std::max(coord(q), coord(q2));
    return std::min(hi1, hi2) - std::max(lo1, lo2) > kEps;
}

Point unit(Point v) {
    const double n = std::hypot(v.x, v.y);
    if (n <= 0.0) return {0.0, 0.0};
    return {v.x / n, v.y / n};
}

// Inward normal of a CCW (shoelace-positive) polygon edge.
Point inward_normal(Point a, Point b) {
    const Point d = unit(b - a);
    return {-d.y, d.x};
}

void dedupe_ring(std::vector<Point>& ring) {
    std::vector<Point> out;
    for (const Point& p : ring) {
        if (out.empty() || std::hypot(p.x - out.back().x, p.y - out.back().y) > kEps) {
            out.push_back(p);
        }
    }
    while (out.size() >= 2 &&
           std::hypot(out.front().x - out.back().x, out.front().y - out.back().y) <= kEps) {
        out.pop_back();
    }
    ring = std::move(out);
}

void drop_collinear(std::vector<Point>& ring) {
    if (ring.size() < 3) return;
    std::vector<Point> out;
    const size_t n = ring.size();
    for (size_t i = 0; i < n; ++i) {
        const Point& prev = ring[(i + n - 1) % n];
        const Point& cur = ring[i];
        const Point& next = ring[(i + 1) % n];
        if (std::abs(cross(cur - prev, next - cur)) > kEps) out.push_back(cur);
    }
    if (out.size() >= 3) ring = std::move(out);
}

double ring_signed_area(const std::vector<Point>& ring) {
    double acc = 0.0;
    const size_t n = ring.size();
    for (size_t i = 0; i < n; ++i) {
        const Point& a = ring[i];
        const Point& b = ring[(i + 1) % n];
        acc += cross(a, b);
    }
    return 0.5 * acc;
}

bool ring_is_simple(const std::vector<Point>& ring) {
    const size_t n = ring.size();
    if (n < 3) return false;
    for (size_t i = 0; i < n; ++i) {
        const Point a = ring[i];
        const Point b = ring[(i + 1) % n];
        for (size_t j = i + 1; j < n; ++j) {
            if (j == i || (j + 1) % n == i || (i + 1) % n == j) continue;
            const Point c = ring[j];
            const Point d = ring[(j + 1) % n];
            if (segment_intersection(a, b, c, d).hit) return false;
            if (collinear_overlap(a, b, c, d)) return false;
        }
    }
    return true;
}

// Splits a possibly self-intersecting closed ring into simple loops by
// cutting at the first crossing found and recursing on both halves.
void split_loops(std::vector<Point> ring, std::vector<std::vector<Point>>& out, int depth) {
    dedupe_ring(ring);
    const size_t n = ring.size();
    if (n < 3 || depth > 64) return;
    for (size_t i = 0; i < n; ++i) {
        const Point a = ring[i];
        const Point b = ring[(i + 1) % n];
        for (size_t j = i + 2; j < n; ++j) {
            if (i == 0 && j == n - 1) continue;  // wrap-adjacent
            const Point c = ring[j];
            const Point d = ring[(j + 1) % n];
            const SegHit hit = segment_intersection(a, b, c, d);
            if (!hit.hit) continue;
            std::vector<Point> loop1, loop2;
            loop1.push_back(hit.at);
            for (size_t k = i + 1; k <= j; ++k) loop1.push_back(ring[k]);
            loop2.push_back(hit.at);
            for (size_t k = (j + 1) % n; k != (i + 1) % n; k = (k + 1) % n) {
                loop2.push_back(ring[k]);
            }
            split_loops(std::move(loop1), out, depth + 1);
            split_loops(std::move(loop2), out, depth + 1);
            return;
        }
    }
    out.push_back(std::move(ring));
}

bool loop_inside_polygon(const std::vector<Point>& loop, const Polygon& poly) {
    const size_t n = loop.size();
    for (size_t i = 0; i < n; ++i) {
        if (!point_in_polygon(loop[i], poly)) return false;
        const Point mid = (loop[i] + loop[(i + 1) % n]) * 0.5;
        if (!point_in_polygon(mid, poly)) return false;
    }
    // No loop edge may cross the polygon boundary.
    const size_t m = poly.points.size();
    for (size_t i = 0; i < n; ++i) {
        const Point a = loop[i];
        const Point b = loop[(i + 1) % n];
        for (size_t j = 0; j < m; ++j) {
            const SegHit hit =
                segment_intersection(a, b, poly.points[j], poly.points[(j + 1) % m]);
            if (hit.hit && hit.t > kEps && hit.t < 1.0 - kEps) return false;
        }
    }
    return true;
}

// Successive half-plane clipping against the inward-offset edge lines.
// Exact for convex polygons (equals the erosion by a disk up to corners).
std::optional<Polygon> shrink_convex(const Polygon& poly, double offset) {
    std::vector<Point> subject = poly.points;
    const size_t n = poly.points.size();
    for (size_t i = 0; i < n && subject.size() >= 3; ++i) {
        const Point a = poly.points[i];
        const Point b = poly.points[(i + 1) % n];
        const Point m = inward_normal(a, b);
        const double c = dot(m, a) + offset;  // keep dot(m, x) >= c
        std::vector<Point> clipped;
        const size_t s = subject.size();
        for (size_t k = 0; k < s; ++k) {
            const Point cur = subject[k];
            const Point nxt = subject[(k + 1) % s];
            const double dc = dot(m, cur) - c;
            const double dn = dot(m, nxt) - c;
            if (dc >= -kEps) clipped.push_back(cur);
            if ((dc > kEps && dn < -kEps) || (dc < -kEps && dn > kEps)) {
                const double t = dc / (dc - dn);
                clipped.push_back(cur + (nxt - cur) * t);
            }
        }
        subject = std::move(clipped);
    }
    dedupe_ring(subject);
    drop_collinear(subject);
    if (subject.size() < 3 || ring_signed_area(subject) <= kEps) return std::nullopt;
    Polygon out;
    out.id = poly.id;
    out.points = std::move(subject);
    return out;
}

std::optional<Polygon> shrink_concave(const Polygon& poly, double offset) {
    const size_t n = poly.points.size();
    std::vector<Point> normals(n);
    for (size_t i = 0; i < n; ++i) {
        normals[i] = inward_normal(poly.points[i], poly.points[(i + 1) % n]);
    }
    std::vector<Point> ring;
    ring.reserve(2 * n);
    for (size_t i = 0; i < n; ++i) {
        const Point mp = normals[(i + n - 1) % n];
        const Point mc = normals[i];
        const Point v = poly.points[i];
        const Point sum = mp + mc;
        const double sum_len = std::hypot(sum.x, sum.y);
        const double cos_half = std::sqrt(std::max(0.0, (1.0 + dot(mp, mc)) * 0.5));
        const double miter_len = offset / std::max(cos_half, 1e-9);
        if (sum_len <= kEps || miter_len > kMiterLimit * offset) {
            ring.push_back(v + mp * offset);  // bevel join
            ring.push_back(v + mc * offset);
        } else {
            const Point u = {sum.x / sum_len, sum.y / sum_len};
            ring.push_back(v + u * miter_len);
        }
    }
    std::vector<std::vector<Point>> loops;
    split_loops(std::move(ring), loops, 0);
    const std::vector<Point>* best = nullptr;
    double best_area = kEps;
    for (auto& loop : loops) {
        dedupe_ring(loop);
        drop_collinear(loop);
        if (loop.size() < 3) continue;
        const double area = ring_signed_area(loop);
        if (area <= best_area) continue;
        if (!loop_inside_polygon(loop, poly)) continue;
        best = &loop;
        best_area = area;
    }
    if (best == nullptr) return std::nullopt;
    Polygon out;
    out.id = poly.id;
    out.points = *best;
    return out;
}

}  // namespace

double Polygon::signed_area() const {
    return ring_signed_area(points);
}

double Polygon::perimeter() const {
    double acc = 0.0;
    const size_t n = points.size();
    for (size_t i = 0; i < n; ++i) {
        const Point d = points[(i + 1) % n] - points[i];
        acc += std::hypot(d.x, d.y);
    }
    return acc;
}

Point Polygon::centroid() const {
    const size_t n = points.size();
    const double a = signed_area();
    if (n == 0) return {0.0, 0.0};
    if (std::abs(a) <= kEps) {
        Point mean{0.0, 0.0};
        for (const Point& p : points) mean = mean + p;
        return mean * (1.0 / static_cast<double>(n));
    }
    double cx = 0.0, cy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const Point& p = points[i];
        const Point& q = points[(i + 1) % n];
        const double w = cross(p, q);
        cx += (p.x + q.x) * w;
        cy += (p.y + q.y) * w;
    }
    return {cx / (6.0 * a), cy / (6.0 * a)};
}

bool Polygon::is_convex() const {
    const size_t n = points.size();
    if (n < 3) return false;
    for (size_t i = 0; i < n; ++i) {
        const Point e0 = points[(i + 1) % n] - points[i];
        const Point e1 = points[(i + 2) % n] - points[(i + 1) % n];
        if (cross(e0, e1) < -kEps) return false;
    }
    return true;
}

bool Polygon::is_simple() const {
    return ring_is_simple(points);
}

Polygon Polygon::scaled(double sx, double sy) const {
    Polygon out;
    out.id = id;
    out.points.reserve(points.size());
    for (const Point& p : points) out.points.push_back({p.x * sx, p.y * sy});
    return out;
}

void Polygon::validate() const {
    if (points.size() < 3) throw GeometryError("polygon needs at least 3 vertices");
    for (const Point& p : points) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
            throw GeometryError("polygon has non-finite coordinates");
        }
    }
    if (signed_area() <= kEps) {
        throw GeometryError("polygon must be counter-clockwise with positive area");
    }
    if (!is_simple()) throw GeometryError("polygon is self-intersecting");
}

void PolygonSet::validate() const {
    std::vector<int> ids;
    ids.reserve(polygons.size());
    for (const Polygon& p : polygons) {
        p.validate();
        ids.push_back(p.id);
    }
    std::sort(ids.begin(), ids.end());
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] != static_cast<int>(i) + 1) {
            throw GeometryError("instance ids must be unique and dense 1..N");
        }
    }
}

RasterMask RasterMask::zeros(int height, int width) {
    if (height <= 0 || width <= 0) throw UsageError("mask dimensions must be positive");
    RasterMask m;
    m.height = height;
    m.width = width;
    m.values.assign(static_cast<size_t>(height) * width, 0);
    return m;
}

int64_t RasterMask::count_nonzero() const {
    int64_t n = 0;
    for (int32_t v : values) n += (v != 0);
    return n;
}

double shrink_offset(const Polygon& polygon, double shrink_ratio) {
    if (!(shrink_ratio > 0.0) || shrink_ratio > 1.0) {
        throw UsageError("shrink ratio must lie in (0, 1]");
    }
    polygon.validate();
    const double area = polygon.signed_area();
    const double perim = polygon.perimeter();
    if (area <= kEps || perim <= kEps) {
        throw GeometryError("degenerate polygon: zero area or perimeter");
    }
    return area * (1.0 - shrink_ratio * shrink_ratio) / perim;
}

std::optional<Polygon> shrink_polygon(const Polygon& polygon, double offset) {
    if (offset < 0.0) throw UsageError("shrink offset must be non-negative");
    polygon.validate();
    if (offset == 0.0) return polygon;
    if (polygon.is_convex()) return shrink_convex(polygon, offset);
    return shrink_concave(polygon, offset);
}

RasterMask rasterize(const PolygonSet& polygons, int height, int width) {
    RasterMask mask = RasterMask::zeros(height, width);
    std::vector<const Polygon*> order;
    order.reserve(polygons.polygons.size());
    for (const Polygon& p : polygons.polygons) order.push_back(&p);
    std::sort(order.begin(), order.end(),
              [](const Polygon* a, const Polygon* b) { return a->id < b->id; });

    for (const Polygon* poly : order) {
        const size_t n = poly->points.size();
        if (n < 3) continue;
        double lo = std::numeric_limits<double>::max();
        double hi = std::numeric_limits<double>::lowest();
        for (const Point& p : poly->points) {
            lo = std::min(lo, p.y);
            hi = std::max(hi, p.y);
        }
        const int y0 = std::max(0, static_cast<int>(std::floor(lo - 0.5)));
        const int y1 = std::min(height - 1, static_cast<int>(std::ceil(hi)));
        std::vector<double> xs;
        for (int y = y0; y <= y1; ++y) {
            const double cy = y + 0.5;
            xs.clear();
            for (size_t i = 0; i < n; ++i) {
                const Point& a = poly->points[i];
                const Point& b = poly->points[(i + 1) % n];
                // Half-open span rule keeps the crossing count even.
                if ((a.y <= cy && b.y > cy) || (b.y <= cy && a.y > cy)) {
                    xs.push_back(a.x + (cy - a.y) / (b.y - a.y) * (b.x - a.x));
                }
            }
            std::sort(xs.begin(), xs.end());
            for (size_t k = 0; k + 1 < xs.size(); k += 2) {
                int x0 = static_cast<int>(std::ceil(xs[k] - 0.5));
                int x1 = static_cast<int>(std::ceil(xs[k + 1] - 0.5)) - 1;
                x0 = std::max(x0, 0);
                x1 = std::min(x1, width - 1);
                for (int x = x0; x <= x1; ++x) mask.at(y, x) = poly->id;
            }
        }
    }
    return mask;
}

RasterMask rasterize_binary(const Polygon& polygon, int height, int width) {
    PolygonSet set;
    set.polygons.push_back(polygon);
    set.polygons.back().id = 1;
    return rasterize(set, height, width);
}

namespace {

// Crack following on the pixel-corner lattice with the component kept on the
// right of the travel direction; emits a corner at every turn.
std::vector<Point> trace_component(const RasterMask& labels, int comp, int px, int py) {
    auto inside = [&](int x, int y) {
        return x >= 0 && y >= 0 && x < labels.width && y < labels.height &&
               labels.at(y, x) == comp;
    };
    struct Dir {
        int dx, dy;
    };
    static constexpr Dir dirs[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};  // R D L U
    auto right_cell = [&](int x, int y, int d) {
        switch (d) {
            case 0: return std::pair<int, int>{x, y};
            case 1: return std::pair<int, int>{x - 1, y};
            case 2: return std::pair<int, int>{x - 1, y - 1};
            default: return std::pair<int, int>{x, y - 1};
        }
    };
    auto left_cell = [&](int x, int y, int d) {
        switch (d) {
            case 0: return std::pair<int, int>{x, y - 1};
            case 1: return std::pair<int, int>{x, y};
            case 2: return std::pair<int, int>{x - 1, y};
            default: return std::pair<int, int>{x - 1, y - 1};
        }
    };
    auto valid = [&](int x, int y, int d) {
        auto [rx, ry] = right_cell(x, y, d);
        auto [lx, ly] = left_cell(x, y, d);
        return inside(rx, ry) && !inside(lx, ly);
    };

    const int sx = px, sy = py, sd = 0;  // top-left corner of first pixel, heading right
    std::vector<Point> ring;
    int x = sx, y = sy, d = sd;
    do {
        x += dirs[d].dx;
        y += dirs[d].dy;
        // Right-hand rule: prefer the tightest turn that stays on the boundary.
        const int candidates[4] = {(d + 1) % 4, d, (d + 3) % 4, (d + 2) % 4};
        int next = -1;
        for (int c : candidates) {
            if (valid(x, y, c)) {
                next = c;
                break;
            }
        }
        if (next < 0) break;  // single-edge spur; cannot happen on component masks
        if (next != d) ring.push_back({static_cast<double>(x), static_cast<double>(y)});
        d = next;
    } while (!(x == sx && y == sy && d == sd));
    // Rotate so the ring starts at the walk origin.
    std::rotate(ring.begin(),
                std::find_if(ring.begin(), ring.end(),
                             [&](const Point& p) { return p.x == sx && p.y == sy; }),
                ring.end());
    return ring;
}

}  // namespace

PolygonSet mask_to_polygons(const RasterMask& binary_mask) {
    const int h = binary_mask.height;
    const int w = binary_mask.width;
    RasterMask labels = RasterMask::zeros(h, w);
    int next_id = 0;
    std::deque<std::pair<int, int>> frontier;
    PolygonSet out;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (binary_mask.at(y, x) == 0 || labels.at(y, x) != 0) continue;
            ++next_id;
            labels.at(y, x) = next_id;
            frontier.push_back({x, y});
            while (!frontier.empty()) {
                auto [cx, cy] = frontier.front();
                frontier.pop_front();
                constexpr int nx[4] = {1, -1, 0, 0};
                constexpr int ny[4] = {0, 0, 1, -1};
                for (int k = 0; k < 4; ++k) {
                    const int qx = cx + nx[k];
                    const int qy = cy + ny[k];
                    if (qx < 0 || qy < 0 || qx >= w || qy >= h) continue;
                    if (binary_mask.at(qy, qx) == 0 || labels.at(qy, qx) != 0) continue;
                    labels.at(qy, qx) = next_id;
                    frontier.push_back({qx, qy});
                }
            }
            Polygon poly;
            poly.id = next_id;
            poly.points = trace_component(labels, next_id, x, y);
            drop_collinear(poly.points);
            if (poly.points.size() >= 3) {
                if (poly.signed_area() < 0.0) {
                    std::reverse(poly.points.begin(), poly.points.end());
                }
                out.polygons.push_back(std::move(poly));
            } else {
                --next_id;  // degenerate trace; do not leave an id gap
            }
        }
    }
    // Re-number in case any component was dropped.
    for (size_t i = 0; i < out.polygons.size(); ++i) out.polygons[i].id = static_cast<int>(i) + 1;
    return out;
}

bool point_in_polygon(Point p, const Polygon& polygon) {
    if (distance_to_boundary(p, polygon) <= kEps) return true;
    const size_t n = polygon.points.size();
    bool in = false;
    for (size_t i = 0; i < n; ++i) {
        const Point& a = polygon.points[i];
        const Point& b = polygon.points[(i + 1) % n];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double xc = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
            if (p.x < xc) in = !in;
        }
    }
    return in;
}

double distance_to_boundary(Point p, const Polygon& polygon) {
    double best = std::numeric_limits<double>::max();
    const size_t n = polygon.points.size();
    for (size_t i = 0; i < n; ++i) {
        best = std::min(best,
                        seg_point_distance(p, polygon.points[i], polygon.points[(i + 1) % n]));
    }
    return best;
}

std::string to_json_string(const PolygonSet& polygons) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Polygon& poly : polygons.polygons) {
        nlohmann::json points = nlohmann::json::array();
        for (const Point& p : poly.points) points.push_back({p.x, p.y});
        arr.push_back({{"id", poly.id}, {"points", points}});
    }
    return arr.dump();
}

PolygonSet polygon_set_from_json_string(const std::string& text) {
    nlohmann::json arr;
    try {
        arr = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("polygon JSON parse error: ") + e.what());
    }
    if (!arr.is_array()) throw ConfigError("polygon JSON must be an array");
    PolygonSet out;
    for (const auto& item : arr) {
        if (!item.contains("id") || !item.contains("points")) {
            throw ConfigError("polygon JSON entries need 'id' and 'points'");
        }
        Polygon poly;
        poly.id = item["id"].get<int>();
        for (const auto& pt : item["points"]) {
            if (!pt.is_array() || pt.size() != 2) {
                throw ConfigError("polygon points must be [x, y] pairs");
            }
            poly.points.push_back({pt[0].get<double>(), pt[1].get<double>()});
        }
        out.polygons.push_back(std::move(poly));
    }
    return out;
}

}  // namespace roimatch::geom
