#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>

#include "cortexbridge/mesh.hpp"
#include "cortexbridge/meshgen.hpp"

using namespace cortexbridge::mesh;

namespace {

// Planar triangulated grid in the z=0 plane, nx*ny vertices, CCW from +z.
SurfaceMesh make_grid(int nx, int ny, double spacing) {
    SurfaceMesh m;
    for (int j = 0; j < ny; ++j)
        for (int i = 0; i < nx; ++i) m.vertices.push_back({i * spacing, j * spacing, 0.0});
    auto v = [nx](int i, int j) { return j * nx + i; };
    for (int j = 0; j + 1 < ny; ++j) {
        for (int i = 0; i + 1 < nx; ++i) {
            m.faces.push_back({v(i, j), v(i + 1, j), v(i + 1, j + 1)});
            m.faces.push_back({v(i, j), v(i + 1, j + 1), v(i, j + 1)});
        }
    }
    m.labels.assign(m.vertices.size(), "grid");
    return m;
}

SignalSeries field_of(const SurfaceMesh& m, double (*f)(const std::array<double, 3>&)) {
    SignalSeries s;
    s.n_vertices = m.n_vertices();
    s.n_samples = 1;
    s.tr_seconds = 1.0;
    for (const auto& p : m.vertices) s.values.push_back(f(p));
    return s;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE("mesh_core") {

TEST_CASE("single triangle topology basics") {
    SurfaceMesh tri;
    tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    tri.faces = {{0, 1, 2}};
    tri.labels = {"roi", "roi", "roi"};
    validate_mesh(tri);

    auto rep = validate_topology(tri);
    CHECK(rep.n_vertices == 3);
    CHECK(rep.n_edges == 3);
    CHECK(rep.n_faces == 1);
    CHECK(rep.euler_characteristic == 1);
    CHECK(rep.boundary_loops == 1);
    CHECK(rep.orientation_consistent);
    CHECK(rep.is_disk());

    auto patch = extract_roi(tri, {"roi"});
    CHECK(patch.submesh.n_vertices() == 3);
    CHECK(patch.submesh.n_faces() == 1);
    CHECK(patch.boundary.size() == 3);
}

TEST_CASE("closed icosahedron is not a disk") {
    auto sphere = make_icosphere(0);
    auto rep = validate_topology(sphere);
    CHECK(rep.n_vertices == 12);
    CHECK(rep.n_edges == 30);
    CHECK(rep.n_faces == 20);
    CHECK(rep.euler_characteristic == 2);
    CHECK(rep.boundary_loops == 0);
    CHECK(rep.orientation_consistent);
    CHECK_FALSE(rep.is_disk());
}

TEST_CASE("icosphere upper half extracts to a disk") {
    auto sphere = make_icosphere(3);
    for (int v = 0; v < sphere.n_vertices(); ++v)
        sphere.labels[v] = sphere.vertices[v][2] > 0 ? "upper" : "lower";
    auto patch = extract_roi(sphere, {"upper"});
    auto rep = validate_topology(patch);
    CHECK(rep.euler_characteristic == 1);
    CHECK(rep.boundary_loops == 1);
    CHECK(rep.orientation_consistent);
    // parent_index injective
    std::set<int> parents(patch.parent_index.begin(), patch.parent_index.end());
    CHECK(parents.size() == patch.parent_index.size());
}

TEST_CASE("generated hemisphere patches are disks") {
    for (int rings : {4, 8, 16}) {
        auto hemi = make_hemisphere(rings, 3 * rings);
        validate_mesh(hemi);
        auto patch = extract_roi(hemi, {"quad_px", "quad_py", "quad_nx", "quad_ny", "other"});
        auto rep = validate_topology(patch);
        CHECK(rep.euler_characteristic == 1);
        CHECK(rep.boundary_loops == 1);
        CHECK(patch.boundary.size() == size_t(3 * rings));
        CHECK(patch.submesh.n_vertices() == hemi.n_vertices());
    }
}

TEST_CASE("two label islands raise DisconnectedRoi") {
    auto grid = make_grid(5, 2, 1.0);
    for (int v = 0; v < grid.n_vertices(); ++v) {
        double x = grid.vertices[v][0];
        grid.labels[v] = (x < 1.5 || x > 2.5) ? "roi" : "gap";
    }
    CHECK_THROWS_AS(extract_roi(grid, {"roi"}), DisconnectedRoi);
}

TEST_CASE("invalid meshes are rejected") {
    SurfaceMesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};

    SUBCASE("face index out of range") {
        m.faces = {{0, 1, 3}};
        CHECK_THROWS_AS(validate_mesh(m), InvalidMesh);
    }
    SUBCASE("degenerate face") {
        m.faces = {{0, 1, 1}};
        CHECK_THROWS_AS(validate_mesh(m), InvalidMesh);
    }
    SUBCASE("inconsistent orientation") {
        m.vertices.push_back({1, 1, 0});
        m.faces = {{0, 1, 2}, {0, 1, 3}};  // edge 0->1 traversed twice
        CHECK_THROWS_AS(validate_mesh(m), InvalidMesh);
    }
}

TEST_CASE("identity resample copies bit-exactly") {
    auto grid = make_grid(4, 4, 0.7);
    auto s = field_of(grid, [](const std::array<double, 3>& p) {
        return std::sin(3.1 * p[0]) + std::cos(1.7 * p[1]);
    });
    auto out = resample_between_meshes(grid, s, grid);
    REQUIRE(out.values.size() == s.values.size());
    CHECK(std::memcmp(out.values.data(), s.values.data(),
                      s.values.size() * sizeof(double)) == 0);
}

TEST_CASE("constant field stays constant under resampling") {
    auto hemi = make_hemisphere(6, 18);
    auto s = field_of(hemi, [](const std::array<double, 3>&) { return 4.25; });
    auto coarse = make_hemisphere(3, 9);
    auto out = resample_between_meshes(hemi, s, coarse);
    for (double v : out.values) CHECK(v == doctest::Approx(4.25).epsilon(1e-14));
}

TEST_CASE("linear field is reproduced exactly inside faces") {
    auto grid = make_grid(5, 5, 1.0);
    auto s = field_of(grid, [](const std::array<double, 3>& p) { return p[0]; });

    SurfaceMesh probes;  // face centroids, strictly interior
    for (const auto& f : grid.faces) {
        std::array<double, 3> c{};
        for (int k = 0; k < 3; ++k)
            for (int d = 0; d < 3; ++d) c[d] += grid.vertices[f[k]][d] / 3.0;
        probes.vertices.push_back(c);
    }
    auto out = resample_between_meshes(grid, s, probes);
    for (int v = 0; v < probes.n_vertices(); ++v)
        CHECK(std::abs(out.values[v] - probes.vertices[v][0]) <= 1e-12);
}

TEST_CASE("down then up preserves a linear field on nested grids") {
    auto fine = make_grid(9, 9, 0.5);
    auto coarse = make_grid(3, 3, 2.0);  // vertices coincide with every 4th fine vertex
    auto s = field_of(fine, [](const std::array<double, 3>& p) { return 2.0 * p[0] - p[1]; });
    auto down = resample_between_meshes(fine, s, coarse);
    auto up = resample_between_meshes(coarse, down, fine);
    double max_err = 0;
    for (int v = 0; v < fine.n_vertices(); ++v)
        max_err = std::max(max_err, std::abs(up.values[v] - s.values[v]));
    CHECK(max_err <= 1e-10);
}

TEST_CASE("resampling an empty source fails") {
    SurfaceMesh empty;
    SignalSeries s;
    auto grid = make_grid(2, 2, 1.0);
    CHECK_THROWS_AS(resample_between_meshes(empty, s, grid), EmptySource);
}

TEST_CASE("mesh file round-trip is exact") {
    auto hemi = make_hemisphere(3, 9);
    auto path = temp_path("roundtrip.bmesh");
    save_mesh(hemi, path);
    auto back = load_mesh(path);
    REQUIRE(back.n_vertices() == hemi.n_vertices());
    REQUIRE(back.n_faces() == hemi.n_faces());
    for (int v = 0; v < hemi.n_vertices(); ++v) {
        for (int d = 0; d < 3; ++d) CHECK(back.vertices[v][d] == hemi.vertices[v][d]);
        CHECK(back.labels[v] == hemi.labels[v]);
    }
    CHECK(back.faces == hemi.faces);
    std::filesystem::remove(path);
}

TEST_CASE("signal file round-trip is exact") {
    SignalSeries s;
    s.n_vertices = 3;
    s.n_samples = 4;
    s.tr_seconds = 1.5;
    s.values = {0.1, -2.75, 3e10, 1e-300, 0.0, 5.5, -1.0, 2.0, 9.0, 0.25, -0.125, 7.0};
    auto path = temp_path("roundtrip.bsig");
    save_signals(s, path);
    auto back = load_signals(path);
    CHECK(back.n_vertices == 3);
    CHECK(back.n_samples == 4);
    CHECK(back.tr_seconds == 1.5);
    CHECK(std::memcmp(back.values.data(), s.values.data(), sizeof(double) * 12) == 0);
    std::filesystem::remove(path);
}

}  // TEST_SUITE
