#include "cortexbridge/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include "cortexbridge/io_util.hpp"

namespace cortexbridge::mesh {

namespace {

using Vec3 = std::array<double, 3>;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 axpy(const Vec3& p, double s, const Vec3& d) {
    return {p[0] + s * d[0], p[1] + s * d[1], p[2] + s * d[2]};
}

// Closest point on triangle abc to p, returned as barycentric weights.
// Ericson, Real-Time Collision Detection, 5.1.5.
std::array<double, 3> closest_point_barycentric(const Vec3& p, const Vec3& a, const Vec3& b,
                                                const Vec3& c) {
    Vec3 ab = sub(b, a), ac = sub(c, a), ap = sub(p, a);
    double d1 = dot(ab, ap), d2 = dot(ac, ap);
    if (d1 <= 0 && d2 <= 0) return {1, 0, 0};

    Vec3 bp = sub(p, b);
    double d3 = dot(ab, bp), d4 = dot(ac, bp);
    if (d3 >= 0 && d4 <= d3) return {0, 1, 0};

    double vc = d1 * d4 - d3 * d2;
    if (vc <= 0 && d1 >= 0 && d3 <= 0) {
        double t = d1 / (d1 - d3);
        return {1 - t, t, 0};
    }

    Vec3 cp = sub(p, c);
    double d5 = dot(ab, cp), d6 = dot(ac, cp);
    if (d6 >= 0 && d5 <= d6) return {0, 0, 1};

    double vb = d5 * d2 - d1 * d6;
    if (vb <= 0 && d2 >= 0 && d6 <= 0) {
        double t = d2 / (d2 - d6);
        return {1 - t, 0, t};
    }

    double va = d3 * d6 - d5 * d4;
    if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
        double t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return {0, 1 - t, t};
    }

    double denom = 1.0 / (va + vb + vc);
    double v = vb * denom, w = vc * denom;
    return {1 - v - w, v, w};
}

// Directed-edge map of a triangulation: (i,j) -> owning face, or -2 if seen twice.
std::map<std::pair<int, int>, int> halfedge_map(const SurfaceMesh& m, bool* duplicate) {
    std::map<std::pair<int, int>, int> he;
    *duplicate = false;
    for (int f = 0; f < m.n_faces(); ++f) {
        const auto& tri = m.faces[f];
        for (int k = 0; k < 3; ++k) {
            auto key = std::make_pair(tri[k], tri[(k + 1) % 3]);
            auto [it, inserted] = he.emplace(key, f);
            if (!inserted) {
                it->second = -2;
                *duplicate = true;
            }
        }
    }
    return he;
}

std::vector<std::vector<int>> boundary_loops(const SurfaceMesh& m,
                                             const std::map<std::pair<int, int>, int>& he) {
    // Boundary halfedges are those without an opposite; with CCW faces the
    // successor walk keeps the surface on the left.
    std::map<int, int> next;  // tail -> head over boundary halfedges
    for (const auto& [edge, face] : he) {
        (void)face;
        if (!he.count({edge.second, edge.first})) next[edge.first] = edge.second;
    }
    std::vector<std::vector<int>> loops;
    std::set<int> seen;
    for (const auto& [start, head] : next) {
        (void)head;
        if (seen.count(start)) continue;
        std::vector<int> loop;
        int cur = start;
        while (true) {
            loop.push_back(cur);
            seen.insert(cur);
            auto it = next.find(cur);
            if (it == next.end()) break;  // non-manifold boundary, bail out
            cur = it->second;
            if (cur == start) break;
        }
        loops.push_back(std::move(loop));
    }
    return loops;
}

}  // namespace

void validate_mesh(const SurfaceMesh& m) {
    const int nv = m.n_vertices();
    if (!m.labels.empty() && int(m.labels.size()) != nv)
        throw InvalidMesh("labels must be empty or one per vertex");
    for (const auto& f : m.faces) {
        for (int idx : f)
            if (idx < 0 || idx >= nv) throw InvalidMesh("face index out of range");
        if (f[0] == f[1] || f[1] == f[2] || f[0] == f[2])
            throw InvalidMesh("degenerate face (repeated vertex)");
    }
    bool duplicate = false;
    halfedge_map(m, &duplicate);
    if (duplicate) throw InvalidMesh("inconsistent orientation: a directed edge appears twice");
}

TopologyReport validate_topology(const SurfaceMesh& m) {
    TopologyReport rep;
    rep.n_vertices = m.n_vertices();
    rep.n_faces = m.n_faces();

    bool duplicate = false;
    auto he = halfedge_map(m, &duplicate);
    rep.orientation_consistent = !duplicate;

    std::set<std::pair<int, int>> undirected;
    for (const auto& [edge, face] : he) {
        (void)face;
        undirected.insert({std::min(edge.first, edge.second), std::max(edge.first, edge.second)});
    }
    rep.n_edges = int(undirected.size());
    rep.euler_characteristic = rep.n_vertices - rep.n_edges + rep.n_faces;
    rep.boundary_loops = int(boundary_loops(m, he).size());
    return rep;
}

TopologyReport validate_topology(const RoiPatch& patch) { return validate_topology(patch.submesh); }

RoiPatch extract_roi(const SurfaceMesh& m, const std::set<std::string>& label_set) {
    validate_mesh(m);
    if (label_set.empty()) throw MeshError("label set is empty");
    if (m.labels.empty()) throw MeshError("mesh carries no labels");

    std::vector<char> vertex_in(m.n_vertices(), 0);
    for (int v = 0; v < m.n_vertices(); ++v)
        vertex_in[v] = label_set.count(m.labels[v]) ? 1 : 0;

    std::vector<int> kept_faces;
    for (int f = 0; f < m.n_faces(); ++f) {
        const auto& tri = m.faces[f];
        if (vertex_in[tri[0]] && vertex_in[tri[1]] && vertex_in[tri[2]]) kept_faces.push_back(f);
    }
    if (kept_faces.empty()) throw MeshError("no face has all three vertices in the label set");

    // Connectivity over shared edges.
    std::map<std::pair<int, int>, int> edge_owner;
    std::vector<int> comp(kept_faces.size());
    for (size_t i = 0; i < comp.size(); ++i) comp[i] = int(i);
    std::function<int(int)> find = [&](int x) {
        while (comp[x] != x) x = comp[x] = comp[comp[x]];
        return x;
    };
    for (size_t i = 0; i < kept_faces.size(); ++i) {
        const auto& tri = m.faces[kept_faces[i]];
        for (int k = 0; k < 3; ++k) {
            int a = tri[k], b = tri[(k + 1) % 3];
            auto key = std::make_pair(std::min(a, b), std::max(a, b));
            auto it = edge_owner.find(key);
            if (it == edge_owner.end())
                edge_owner.emplace(key, int(i));
            else
                comp[find(int(i))] = find(it->second);
        }
    }
    int root = find(0);
    for (size_t i = 1; i < kept_faces.size(); ++i)
        if (find(int(i)) != root)
            throw DisconnectedRoi("label set induces more than one face component");

    RoiPatch patch;
    std::vector<int> remap(m.n_vertices(), -1);
    for (int f : kept_faces) {
        std::array<int, 3> tri{};
        for (int k = 0; k < 3; ++k) {
            int pv = m.faces[f][k];
            if (remap[pv] < 0) {
                remap[pv] = int(patch.parent_index.size());
                patch.parent_index.push_back(pv);
                patch.submesh.vertices.push_back(m.vertices[pv]);
                patch.submesh.labels.push_back(m.labels[pv]);
            }
            tri[k] = remap[pv];
        }
        patch.submesh.faces.push_back(tri);
    }

    bool duplicate = false;
    auto he = halfedge_map(patch.submesh, &duplicate);
    auto loops = boundary_loops(patch.submesh, he);
    TopologyReport rep = validate_topology(patch.submesh);
    if (loops.size() != 1 || rep.euler_characteristic != 1)
        throw NotADisk("ROI is not a disk: loops=" + std::to_string(loops.size()) +
                       " euler=" + std::to_string(rep.euler_characteristic));
    patch.boundary = loops.front();
    return patch;
}

SignalSeries resample_between_meshes(const SurfaceMesh& src, const SignalSeries& signals,
                                     const SurfaceMesh& dst) {
    if (src.n_faces() == 0 || src.n_vertices() == 0) throw EmptySource("source mesh is empty");
    if (signals.n_vertices != src.n_vertices())
        throw MeshError("signal count does not match source vertex count");

    const int T = signals.n_samples;
    SignalSeries out;
    out.n_vertices = dst.n_vertices();
    out.n_samples = T;
    out.tr_seconds = signals.tr_seconds;
    out.values.assign(size_t(out.n_vertices) * T, 0.0);

    for (int dv = 0; dv < dst.n_vertices(); ++dv) {
        const Vec3& p = dst.vertices[dv];
        double best_d2 = std::numeric_limits<double>::infinity();
        int best_face = -1;
        std::array<double, 3> best_w{};
        for (int f = 0; f < src.n_faces(); ++f) {
            const auto& tri = src.faces[f];
            auto w = closest_point_barycentric(p, src.vertices[tri[0]], src.vertices[tri[1]],
                                               src.vertices[tri[2]]);
            Vec3 q = {0, 0, 0};
            for (int k = 0; k < 3; ++k) q = axpy(q, w[k], src.vertices[tri[k]]);
            Vec3 d = sub(p, q);
            double d2 = dot(d, d);
            if (d2 < best_d2) {  // strict: ties keep the lowest face index
                best_d2 = d2;
                best_face = f;
                best_w = w;
            }
        }
        const auto& tri = src.faces[best_face];
        // Snap to an exact vertex copy when the projection lands on a corner,
        // so identity resampling is bit-exact.
        int corner = -1;
        for (int k = 0; k < 3; ++k)
            if (best_w[k] >= 1.0 - 1e-12) corner = k;
        if (corner >= 0) {
            const double* row = &signals.values[size_t(tri[corner]) * T];
            std::copy(row, row + T, &out.values[size_t(dv) * T]);
        } else {
            double* orow = &out.values[size_t(dv) * T];
            for (int k = 0; k < 3; ++k) {
                const double* row = &signals.values[size_t(tri[k]) * T];
                for (int t = 0; t < T; ++t) orow[t] += best_w[k] * row[t];
            }
        }
    }
    return out;
}

SurfaceMesh load_mesh(const std::string& path) {
    auto is = io::open_input(path, false);
    std::string header;
    std::getline(is, header);
    if (header != "BMESH 1") throw io::IoError("expected 'BMESH 1' header in " + path);

    SurfaceMesh m;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        char kind;
        ss >> kind;
        if (kind == 'v') {
            Vec3 p{};
            std::string label;
            ss >> p[0] >> p[1] >> p[2] >> label;
            if (!ss) throw io::IoError("malformed vertex line: " + line);
            m.vertices.push_back(p);
            m.labels.push_back(label);
        } else if (kind == 'f') {
            std::array<int, 3> tri{};
            ss >> tri[0] >> tri[1] >> tri[2];
            if (!ss) throw io::IoError("malformed face line: " + line);
            m.faces.push_back(tri);
        } else {
            throw io::IoError("unknown record '" + std::string(1, kind) + "' in " + path);
        }
    }
    validate_mesh(m);
    return m;
}

void save_mesh(const SurfaceMesh& m, const std::string& path) {
    auto os = io::open_output(path, false);
    os << "BMESH 1\n";
    os.precision(17);
    for (int v = 0; v < m.n_vertices(); ++v) {
        const auto& p = m.vertices[v];
        const std::string& label = m.labels.empty() ? "none" : m.labels[v];
        os << "v " << p[0] << ' ' << p[1] << ' ' << p[2] << ' ' << label << '\n';
    }
    for (const auto& f : m.faces) os << "f " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
}

SignalSeries load_signals(const std::string& path) {
    auto is = io::open_input(path);
    io::check_magic(is, "BSIG1");
    SignalSeries s;
    s.n_vertices = int(io::read_pod<uint32_t>(is));
    s.n_samples = int(io::read_pod<uint32_t>(is));
    s.tr_seconds = io::read_pod<double>(is);
    io::read_array(is, s.values, size_t(s.n_vertices) * s.n_samples);
    for (double x : s.values)
        if (!std::isfinite(x)) throw io::IoError("non-finite sample in " + path);
    return s;
}

void save_signals(const SignalSeries& s, const std::string& path) {
    auto os = io::open_output(path);
    io::write_magic(os, "BSIG1");
    io::write_pod(os, uint32_t(s.n_vertices));
    io::write_pod(os, uint32_t(s.n_samples));
    io::write_pod(os, s.tr_seconds);
    io::write_array(os, s.values);
}

}  // namespace cortexbridge::mesh
