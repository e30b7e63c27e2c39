#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>

#include "cortexbridge/conformal.hpp"
#include "cortexbridge/meshgen.hpp"

using namespace cortexbridge;
using mesh::RoiPatch;
using mesh::SurfaceMesh;

namespace {

constexpr double kPi = 3.14159265358979323846;

// Planar disk fan: center vertex plus circular rings at radii k/rings.
SurfaceMesh fan_disk(int rings, int segments) {
    SurfaceMesh m;
    m.vertices.push_back({0, 0, 0});
    for (int r = 1; r <= rings; ++r) {
        for (int s = 0; s < segments; ++s) {
            double phi = 2 * kPi * s / segments;
            double rad = double(r) / rings;
            m.vertices.push_back({rad * std::cos(phi), rad * std::sin(phi), 0.0});
        }
    }
    auto rv = [&](int r, int s) { return 1 + (r - 1) * segments + (s % segments); };
    for (int s = 0; s < segments; ++s) m.faces.push_back({0, rv(1, s), rv(1, s + 1)});
    for (int r = 1; r < rings; ++r) {
        for (int s = 0; s < segments; ++s) {
            m.faces.push_back({rv(r, s), rv(r + 1, s), rv(r + 1, s + 1)});
            m.faces.push_back({rv(r, s), rv(r + 1, s + 1), rv(r, s + 1)});
        }
    }
    m.labels.assign(m.vertices.size(), "roi");
    return m;
}

SurfaceMesh square_grid_disk_cut(int n) {
    SurfaceMesh g;
    double lo = -1.2, sp = 2.4 / (n - 1);
    for (int j = 0; j < n; ++j)
        for (int i = 0; i < n; ++i) g.vertices.push_back({lo + i * sp, lo + j * sp, 0.0});
    auto vid = [n](int i, int j) { return j * n + i; };
    for (int j = 0; j + 1 < n; ++j)
        for (int i = 0; i + 1 < n; ++i) {
            g.faces.push_back({vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)});
            g.faces.push_back({vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)});
        }
    g.labels.assign(g.vertices.size(), "");
    for (size_t v = 0; v < g.vertices.size(); ++v)
        g.labels[v] = std::hypot(g.vertices[v][0], g.vertices[v][1]) <= 1.0 ? "roi" : "out";
    return g;
}

RoiPatch stretched_hemisphere(int rings, double stretch) {
    auto hemi = mesh::make_hemisphere(rings, 3 * rings);
    for (auto& v : hemi.vertices) v[0] *= stretch;
    return mesh::extract_roi(hemi, {"quad_px", "quad_py", "quad_nx", "quad_ny", "other"});
}

// Independent edge-sum oracle for the Dirichlet energy.
double cotan_edge_energy(const SurfaceMesh& m, const std::vector<std::array<double, 2>>& uv) {
    std::map<std::pair<int, int>, double> w;
    for (const auto& f : m.faces) {
        for (int k = 0; k < 3; ++k) {
            int apex = f[k], i = f[(k + 1) % 3], j = f[(k + 2) % 3];
            std::array<double, 3> u{}, v{};
            for (int d = 0; d < 3; ++d) {
                u[d] = m.vertices[i][d] - m.vertices[apex][d];
                v[d] = m.vertices[j][d] - m.vertices[apex][d];
            }
            double cx = u[1] * v[2] - u[2] * v[1];
            double cy = u[2] * v[0] - u[0] * v[2];
            double cz = u[0] * v[1] - u[1] * v[0];
            double cr = std::sqrt(cx * cx + cy * cy + cz * cz);
            double dotuv = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
            w[{std::min(i, j), std::max(i, j)}] += 0.5 * (cr > 0 ? dotuv / cr : 0.0);
        }
    }
    double e = 0;
    for (const auto& [edge, val] : w) {
        double wd = std::max(val, 1e-8);
        double du = uv[edge.first][0] - uv[edge.second][0];
        double dv = uv[edge.first][1] - uv[edge.second][1];
        e += wd * (du * du + dv * dv);
    }
    return 0.5 * e;
}

double boundary_radius_error(const RoiPatch& patch,
                             const std::vector<std::array<double, 2>>& uv) {
    double worst = 0;
    for (int b : patch.boundary)
        worst = std::max(worst, std::abs(std::hypot(uv[b][0], uv[b][1]) - 1.0));
    return worst;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE("conformal") {

TEST_CASE("planar disk maps to itself") {
    auto disk = fan_disk(12, 36);
    auto patch = mesh::extract_roi(disk, {"roi"});
    conformal::ConformalOptions opts;
    auto p = conformal::harmonic_disk_map(patch, opts);

    double worst = 0;
    for (int v = 0; v < patch.submesh.n_vertices(); ++v) {
        worst = std::max(worst, std::hypot(p.uv[v][0] - patch.submesh.vertices[v][0],
                                           p.uv[v][1] - patch.submesh.vertices[v][1]));
    }
    CHECK(worst <= 1e-8);
    CHECK(p.mu_max <= 1e-6);
    CHECK(p.flipped_faces == 0);
    CHECK(boundary_radius_error(patch, p.uv) <= 1e-9);
    // identity energy of the (near-)unit disk
    CHECK(std::abs(p.energy - kPi) / kPi <= 0.01);
}

TEST_CASE("recorded energy matches the cotangent edge sum") {
    auto grid = square_grid_disk_cut(25);
    auto patch = mesh::extract_roi(grid, {"roi"});
    conformal::ConformalOptions opts;
    auto p = conformal::harmonic_disk_map(patch, opts);

    double oracle = cotan_edge_energy(patch.submesh, p.uv);
    CHECK(p.energy == doctest::Approx(oracle).epsilon(1e-12));
    CHECK(boundary_radius_error(patch, p.uv) <= 1e-9);
    CHECK(p.flipped_faces == 0);
    for (const auto& z : p.mu) CHECK(std::abs(z) < 1.0);
}

TEST_CASE("anisotropic scaling gives |mu| = 1/3") {
    auto disk = fan_disk(6, 18);
    auto patch = mesh::extract_roi(disk, {"roi"});
    conformal::DiskParameterization param;
    param.uv.resize(patch.submesh.n_vertices());
    for (int v = 0; v < patch.submesh.n_vertices(); ++v)
        param.uv[v] = {2 * patch.submesh.vertices[v][0], patch.submesh.vertices[v][1]};
    auto mu = conformal::beltrami_coefficient(patch, param);
    for (const auto& z : mu) CHECK(std::abs(std::abs(z) - 1.0 / 3.0) <= 1e-10);
}

TEST_CASE("orientation-reversing map is flagged by |mu| > 1") {
    SurfaceMesh tri;
    tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    tri.faces = {{0, 1, 2}};
    tri.labels = {"roi", "roi", "roi"};
    auto patch = mesh::extract_roi(tri, {"roi"});
    conformal::DiskParameterization param;
    param.uv = {{0, 0}, {0, 1}, {2, 0}};  // (x,y) -> (2y, x)
    auto mu = conformal::beltrami_coefficient(patch, param);
    REQUIRE(mu.size() == 1);
    CHECK(std::abs(mu[0]) > 1.0);
}

TEST_CASE("degenerate parameter face is an error") {
    SurfaceMesh tri;
    tri.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    tri.faces = {{0, 1, 2}};
    tri.labels = {"roi", "roi", "roi"};
    auto patch = mesh::extract_roi(tri, {"roi"});
    conformal::DiskParameterization param;
    param.uv = {{0, 0}, {1, 1}, {1, 1}};
    CHECK_THROWS_AS(conformal::beltrami_coefficient(patch, param),
                    conformal::DegenerateFace);
}

TEST_CASE("round hemisphere: harmonic map is already conformal enough") {
    auto patch = stretched_hemisphere(16, 1.0);
    conformal::ConformalOptions opts;
    auto h = conformal::harmonic_disk_map(patch, opts);
    CHECK(h.mu_max <= 0.1);
    CHECK(h.flipped_faces == 0);
    CHECK(boundary_radius_error(patch, h.uv) <= 1e-9);

    // stereographic projection is the exact solution; discrete error is small
    double serr = 0;
    for (int v = 0; v < patch.submesh.n_vertices(); ++v) {
        const auto& p = patch.submesh.vertices[v];
        serr = std::max(serr, std::hypot(h.uv[v][0] - p[0] / (1 + p[2]),
                                         h.uv[v][1] - p[1] / (1 + p[2])));
    }
    CHECK(serr <= 1e-3);

    auto r = conformal::refine_conformal(patch, h, opts);
    CHECK(r.refine_iterations == 0);
    CHECK(r.converged);
    CHECK(std::memcmp(r.uv.data(), h.uv.data(), h.uv.size() * sizeof(h.uv[0])) == 0);
}

TEST_CASE("stretched hemisphere: refinement reduces the Beltrami sup norm") {
    auto patch = stretched_hemisphere(16, 1.4);
    conformal::ConformalOptions opts;
    auto h = conformal::harmonic_disk_map(patch, opts);
    REQUIRE(h.mu_max > 0.1);
    CHECK(h.flipped_faces == 0);

    auto r = conformal::refine_conformal(patch, h, opts);
    CHECK(r.converged);
    CHECK(r.mu_max <= 0.1);
    CHECK(r.mu_max < h.mu_max);
    CHECK(r.flipped_faces == 0);
    CHECK(r.refine_iterations >= 1);
    CHECK(boundary_radius_error(patch, r.uv) <= 1e-9);
    for (size_t k = 1; k < r.mu_history.size(); ++k)
        CHECK(r.mu_history[k] <= r.mu_history[k - 1]);
    // normalization: first boundary vertex sits at angle zero
    const auto& b0 = r.uv[patch.boundary[0]];
    CHECK(std::abs(std::atan2(b0[1], b0[0])) <= 1e-9);
}

TEST_CASE("refined distortion floor shrinks under mesh refinement") {
    conformal::ConformalOptions tight;
    tight.eps_mu = 0.005;
    tight.max_refine_iters = 60;
    double prev = 2.0;
    for (int rings : {8, 16, 32}) {
        auto patch = stretched_hemisphere(rings, 1.4);
        auto h = conformal::harmonic_disk_map(patch, tight);
        auto r = conformal::refine_conformal(patch, h, tight);
        CHECK(r.flipped_faces == 0);
        CHECK(r.mu_max <= prev);
        prev = r.mu_max;
    }
}

TEST_CASE("jittered sliver mesh refines without losing bijectivity") {
    auto grid = square_grid_disk_cut(13);
    uint64_t state = 12345;
    auto next01 = [&state]() {
        state = state * 6364136223846793005ull + 1442695040888963407ull;
        return double(state >> 11) / double(1ull << 53);
    };
    for (auto& v : grid.vertices) {
        v[0] += (next01() - 0.5) * 0.07;
        v[1] += (next01() - 0.5) * 0.07;
    }
    auto patch = mesh::extract_roi(grid, {"roi"});
    conformal::ConformalOptions opts;
    auto h = conformal::harmonic_disk_map(patch, opts);
    CHECK(h.flipped_faces == 0);
    auto r = conformal::refine_conformal(patch, h, opts);
    CHECK(r.flipped_faces == 0);
    CHECK(r.mu_max > 0.0);
    for (size_t k = 1; k < r.mu_history.size(); ++k)
        CHECK(r.mu_history[k] <= r.mu_history[k - 1]);
}

TEST_CASE("parameterization file round-trip is exact") {
    auto patch = stretched_hemisphere(8, 1.4);
    conformal::ConformalOptions opts;
    auto p = conformal::harmonic_disk_map(patch, opts);
    auto path = temp_path("roundtrip.buv");
    conformal::save_parameterization(p, path);
    auto back = conformal::load_parameterization(path);
    REQUIRE(back.uv.size() == p.uv.size());
    REQUIRE(back.mu.size() == p.mu.size());
    CHECK(std::memcmp(back.uv.data(), p.uv.data(), p.uv.size() * sizeof(p.uv[0])) == 0);
    CHECK(std::memcmp(back.mu.data(), p.mu.data(), p.mu.size() * sizeof(p.mu[0])) == 0);
    CHECK(back.energy == p.energy);
    std::filesystem::remove(path);
}

}  // TEST_SUITE
