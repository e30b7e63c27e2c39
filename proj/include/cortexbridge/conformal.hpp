#pragma once

#include <complex>

#include "cortexbridge/mesh.hpp"

namespace cortexbridge::conformal {

struct SolverFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DegenerateFace : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct BijectivityLost : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConformalOptions {
    double eps_mu = 0.1;       // Beltrami sup-norm target, in (0, 1)
    int max_refine_iters = 20;
    double solver_tol = 1e-10;
};

struct DiskParameterization {
    std::vector<std::array<double, 2>> uv;  // per-vertex, closed unit disk
    std::vector<std::complex<double>> mu;   // per-face
    double energy = 0.0;                    // Dirichlet energy of the map

    // Diagnostics filled in by the producing stage.
    double mu_max = 0.0;
    int flipped_faces = 0;
    int refine_iterations = 0;
    bool converged = true;
    std::vector<double> mu_history;  // sup norm before refinement, then per accepted iteration
};

// Harmonic map to the unit disk: boundary pinned to the circle by cumulative
// arc length, interior from the cotangent-Laplacian solve.
DiskParameterization harmonic_disk_map(const mesh::RoiPatch& patch, const ConformalOptions& opts);

// Per-face Beltrami coefficient of the piecewise-linear map from each
// isometrically flattened 3-D face to its parameter triangle.
std::vector<std::complex<double>> beltrami_coefficient(const mesh::RoiPatch& patch,
                                                       const DiskParameterization& param);

// Iterative Beltrami reduction. Returns once mu_max <= opts.eps_mu or the
// iteration budget is spent (converged=false); mu_max never increases across
// accepted iterations.
DiskParameterization refine_conformal(const mesh::RoiPatch& patch,
                                      const DiskParameterization& param,
                                      const ConformalOptions& opts);

double dirichlet_energy(const mesh::RoiPatch& patch, const std::vector<std::array<double, 2>>& uv);

int count_flipped_faces(const mesh::SurfaceMesh& m, const std::vector<std::array<double, 2>>& uv);

DiskParameterization load_parameterization(const std::string& path);
void save_parameterization(const DiskParameterization& p, const std::string& path);

}  // namespace cortexbridge::conformal
