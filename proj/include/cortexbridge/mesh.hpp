#pragma once

#include <array>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace cortexbridge::mesh {

struct MeshError : std::runtime_error {
    explicit MeshError(const std::string& msg) : std::runtime_error(msg) {}
};
struct InvalidMesh : MeshError {
    explicit InvalidMesh(const std::string& msg) : MeshError(msg) {}
};
struct DisconnectedRoi : MeshError {
    explicit DisconnectedRoi(const std::string& msg) : MeshError(msg) {}
};
struct NotADisk : MeshError {
    explicit NotADisk(const std::string& msg) : MeshError(msg) {}
};
struct EmptySource : MeshError {
    explicit EmptySource(const std::string& msg) : MeshError(msg) {}
};

// Triangle mesh, counter-clockwise faces, one region tag per vertex.
// Immutable by convention once built; all operations below are pure.
struct SurfaceMesh {
    std::vector<std::array<double, 3>> vertices;  // mm
    std::vector<std::array<int, 3>> faces;
    std::vector<std::string> labels;              // empty or one per vertex

    int n_vertices() const { return int(vertices.size()); }
    int n_faces() const { return int(faces.size()); }
};

// Per-vertex time series, V x T row-major.
struct SignalSeries {
    int n_vertices = 0;
    int n_samples = 0;
    double tr_seconds = 1.0;
    std::vector<double> values;

    double at(int v, int t) const { return values[size_t(v) * n_samples + t]; }
    double& at(int v, int t) { return values[size_t(v) * n_samples + t]; }
};

// Simply-connected open submesh with its ordered boundary loop.
// boundary is counter-clockwise as seen from the outward normal side.
struct RoiPatch {
    SurfaceMesh submesh;
    std::vector<int> parent_index;  // injective, submesh vertex -> parent vertex
    std::vector<int> boundary;      // closed loop, submesh indices
};

struct TopologyReport {
    int n_vertices = 0;
    int n_edges = 0;
    int n_faces = 0;
    int euler_characteristic = 0;
    int boundary_loops = 0;
    bool orientation_consistent = false;

    bool is_disk() const {
        return euler_characteristic == 1 && boundary_loops == 1 && orientation_consistent;
    }
};

// Throws InvalidMesh on out-of-range indices, degenerate faces, or
// inconsistent orientation (an interior edge must appear once per direction).
void validate_mesh(const SurfaceMesh& m);

TopologyReport validate_topology(const SurfaceMesh& m);
TopologyReport validate_topology(const RoiPatch& patch);

// Keeps exactly the faces whose three vertices all carry a tag in label_set.
// The result must be a connected disk; DisconnectedRoi / NotADisk otherwise.
RoiPatch extract_roi(const SurfaceMesh& m, const std::set<std::string>& label_set);

// Closest-point barycentric projection of src signals onto dst vertices.
// Ties between equally close faces resolve to the lowest face index.
SignalSeries resample_between_meshes(const SurfaceMesh& src, const SignalSeries& signals,
                                     const SurfaceMesh& dst);

// Text format: header "BMESH 1", then "v x y z label" lines, then
// "f i j k" lines with 0-based indices.
SurfaceMesh load_mesh(const std::string& path);
void save_mesh(const SurfaceMesh& m, const std::string& path);

// Binary format: magic "BSIG1", u32 vertex count, u32 T, f64 tr_seconds,
// then V*T f64 row-major. Little-endian.
SignalSeries load_signals(const std::string& path);
void save_signals(const SignalSeries& s, const std::string& path);

}  // namespace cortexbridge::mesh
