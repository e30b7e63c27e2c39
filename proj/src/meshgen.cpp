#include "cortexbridge/meshgen.hpp"

#include <cmath>
#include <map>

namespace cortexbridge::mesh {

namespace {

std::array<double, 3> normalized(std::array<double, 3> p) {
    double n = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    return {p[0] / n, p[1] / n, p[2] / n};
}

}  // namespace

std::string quadrant_label(double phi) {
    double c = std::cos(phi), s = std::sin(phi);
    if (c >= 0 && s >= 0) return "quad_px";
    if (c < 0 && s >= 0) return "quad_py";
    if (c < 0) return "quad_nx";
    return "quad_ny";
}

SurfaceMesh make_icosphere(int subdivisions) {
    const double t = (1.0 + std::sqrt(5.0)) / 2.0;
    SurfaceMesh m;
    m.vertices = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                  {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
    for (auto& v : m.vertices) v = normalized(v);
    m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
               {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
               {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
               {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

    for (int step = 0; step < subdivisions; ++step) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            auto key = std::make_pair(std::min(a, b), std::max(a, b));
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            const auto& pa = m.vertices[a];
            const auto& pb = m.vertices[b];
            m.vertices.push_back(normalized(
                {(pa[0] + pb[0]) / 2, (pa[1] + pb[1]) / 2, (pa[2] + pb[2]) / 2}));
            int idx = int(m.vertices.size()) - 1;
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<std::array<int, 3>> refined;
        refined.reserve(m.faces.size() * 4);
        for (const auto& f : m.faces) {
            int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
            refined.push_back({f[0], ab, ca});
            refined.push_back({f[1], bc, ab});
            refined.push_back({f[2], ca, bc});
            refined.push_back({ab, bc, ca});
        }
        m.faces = std::move(refined);
    }
    m.labels.assign(m.vertices.size(), "sphere");
    return m;
}

SurfaceMesh make_hemisphere(int rings, int segments) {
    SurfaceMesh m;
    const double pi = std::acos(-1.0);

    // Pole first, then rings of `segments` vertices from near-pole to equator.
    m.vertices.push_back({0, 0, 1});
    for (int r = 1; r <= rings; ++r) {
        double theta = (pi / 2) * r / rings;  // polar angle, equator at r == rings
        for (int s = 0; s < segments; ++s) {
            double phi = 2 * pi * s / segments;
            m.vertices.push_back(
                {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi),
                 std::cos(theta)});
        }
    }
    auto ring_vertex = [&](int r, int s) { return 1 + (r - 1) * segments + (s % segments); };

    // Cap fan around the pole; CCW seen from outside (+z above the cap).
    for (int s = 0; s < segments; ++s)
        m.faces.push_back({0, ring_vertex(1, s), ring_vertex(1, s + 1)});
    // Quads between consecutive rings, split into two triangles.
    for (int r = 1; r < rings; ++r) {
        for (int s = 0; s < segments; ++s) {
            int a = ring_vertex(r, s), b = ring_vertex(r, s + 1);
            int c = ring_vertex(r + 1, s), d = ring_vertex(r + 1, s + 1);
            m.faces.push_back({a, c, d});
            m.faces.push_back({a, d, b});
        }
    }

    m.labels.assign(m.vertices.size(), "");
    m.labels[0] = quadrant_label(0.0);
    for (int r = 1; r <= rings; ++r) {
        for (int s = 0; s < segments; ++s) {
            double phi = 2 * pi * s / segments;
            m.labels[ring_vertex(r, s)] = (r == rings) ? "other" : quadrant_label(phi);
        }
    }
    return m;
}

}  // namespace cortexbridge::mesh
