#include "cortexbridge/conformal.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <algorithm>
#include <cmath>
#include <map>

#include "cortexbridge/io_util.hpp"

namespace cortexbridge::conformal {

namespace {

constexpr double kWeightFloor = 1e-8;  // keeps obtuse-triangle weights positive
constexpr double kDamping = 0.5;

using Vec3 = std::array<double, 3>;
using Vec2 = std::array<double, 2>;
using cplx = std::complex<double>;

Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross3(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
double norm3(const Vec3& a) { return std::sqrt(dot3(a, a)); }

// Isometric flattening of one 3-D face: p0 -> (0,0), p1 on +x, p2 at y > 0.
struct FlatFace {
    Vec2 q0{0, 0}, q1{0, 0}, q2{0, 0};
    double area = 0;
};

FlatFace flatten(const Vec3& p0, const Vec3& p1, const Vec3& p2) {
    Vec3 e1 = sub(p1, p0), e2 = sub(p2, p0);
    double x1 = norm3(e1);
    double cr = norm3(cross3(e1, e2));
    FlatFace f;
    if (x1 == 0) return f;
    f.q1 = {x1, 0};
    f.q2 = {dot3(e1, e2) / x1, cr / x1};
    f.area = 0.5 * x1 * f.q2[1];
    return f;
}

double tri_signed_area(const Vec2& a, const Vec2& b, const Vec2& c) {
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]));
}

// Cotangent edge weights, accumulated over both incident faces and clamped.
std::map<std::pair<int, int>, double> cotan_weights(const mesh::SurfaceMesh& m) {
    std::map<std::pair<int, int>, double> w;
    auto edge = [](int a, int b) { return std::make_pair(std::min(a, b), std::max(a, b)); };
    for (const auto& f : m.faces) {
        for (int k = 0; k < 3; ++k) {
            int apex = f[k], i = f[(k + 1) % 3], j = f[(k + 2) % 3];
            Vec3 u = sub(m.vertices[i], m.vertices[apex]);
            Vec3 v = sub(m.vertices[j], m.vertices[apex]);
            double cr = norm3(cross3(u, v));
            double cot = cr > 0 ? dot3(u, v) / cr : 0.0;
            w[edge(i, j)] += 0.5 * cot;
        }
    }
    for (auto& [e, val] : w) {
        (void)e;
        val = std::max(val, kWeightFloor);
    }
    return w;
}

// Dirichlet solve of L x = 0 with fixed boundary values, one column per
// coordinate. `weights` keys are (min,max) vertex pairs.
std::vector<Vec2> solve_dirichlet(int n_vertices,
                                  const std::vector<Eigen::Triplet<double>>& triplets,
                                  const std::vector<int>& boundary,
                                  const std::vector<Vec2>& boundary_uv, double solver_tol) {
    std::vector<int> interior_index(n_vertices, -1);
    std::vector<char> is_boundary(n_vertices, 0);
    for (int b : boundary) is_boundary[b] = 1;
    int n_interior = 0;
    for (int v = 0; v < n_vertices; ++v)
        if (!is_boundary[v]) interior_index[v] = n_interior++;

    std::vector<Vec2> uv(n_vertices);
    for (size_t k = 0; k < boundary.size(); ++k) uv[boundary[k]] = boundary_uv[k];
    if (n_interior == 0) return uv;

    std::vector<Eigen::Triplet<double>> tii;
    Eigen::MatrixX2d rhs = Eigen::MatrixX2d::Zero(n_interior, 2);
    for (const auto& t : triplets) {
        int i = t.row(), j = t.col();
        if (is_boundary[i]) continue;
        if (is_boundary[j]) {
            rhs(interior_index[i], 0) -= t.value() * uv[j][0];
            rhs(interior_index[i], 1) -= t.value() * uv[j][1];
        } else {
            tii.emplace_back(interior_index[i], interior_index[j], t.value());
        }
    }
    Eigen::SparseMatrix<double> L(n_interior, n_interior);
    L.setFromTriplets(tii.begin(), tii.end());

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(L);
    if (solver.info() != Eigen::Success) throw SolverFailure("Laplacian factorization failed");
    Eigen::MatrixX2d x = solver.solve(rhs);
    if (solver.info() != Eigen::Success) throw SolverFailure("Laplacian solve failed");

    double scale = std::max(1.0, rhs.cwiseAbs().maxCoeff());
    double resid = (L * x - rhs).cwiseAbs().maxCoeff();
    if (!(resid <= solver_tol * scale))
        throw SolverFailure("solver residual " + std::to_string(resid) + " above tolerance");

    for (int v = 0; v < n_vertices; ++v)
        if (interior_index[v] >= 0) uv[v] = {x(interior_index[v], 0), x(interior_index[v], 1)};
    return uv;
}

std::vector<Vec2> circle_boundary(const mesh::RoiPatch& patch) {
    const auto& loop = patch.boundary;
    const auto& verts = patch.submesh.vertices;
    size_t n = loop.size();
    std::vector<double> cum(n, 0.0);
    double total = 0;
    for (size_t k = 0; k < n; ++k) {
        cum[k] = total;
        total += norm3(sub(verts[loop[(k + 1) % n]], verts[loop[k]]));
    }
    std::vector<Vec2> uv(n);
    const double two_pi = 2 * std::acos(-1.0);
    for (size_t k = 0; k < n; ++k) {
        double ang = two_pi * cum[k] / total;
        uv[k] = {std::cos(ang), std::sin(ang)};
    }
    return uv;
}

std::vector<cplx> beltrami_impl(const mesh::SurfaceMesh& m, const std::vector<Vec2>& uv) {
    std::vector<cplx> mu(m.faces.size());
    for (size_t f = 0; f < m.faces.size(); ++f) {
        const auto& tri = m.faces[f];
        FlatFace ff = flatten(m.vertices[tri[0]], m.vertices[tri[1]], m.vertices[tri[2]]);
        if (ff.area <= 0) throw DegenerateFace("zero-area source face " + std::to_string(f));
        double warea = tri_signed_area(uv[tri[0]], uv[tri[1]], uv[tri[2]]);
        if (warea == 0) throw DegenerateFace("zero-area parameter face " + std::to_string(f));

        Eigen::Matrix2d Q, W;
        Q << ff.q1[0] - ff.q0[0], ff.q2[0] - ff.q0[0], ff.q1[1] - ff.q0[1], ff.q2[1] - ff.q0[1];
        W << uv[tri[1]][0] - uv[tri[0]][0], uv[tri[2]][0] - uv[tri[0]][0],
            uv[tri[1]][1] - uv[tri[0]][1], uv[tri[2]][1] - uv[tri[0]][1];
        Eigen::Matrix2d J = W * Q.inverse();
        double a = J(0, 0), b = J(0, 1), c = J(1, 0), d = J(1, 1);
        mu[f] = cplx(a - d, c + b) / cplx(a + d, c - b);
    }
    return mu;
}

double mu_sup_norm(const std::vector<cplx>& mu) {
    double m = 0;
    for (const auto& z : mu) m = std::max(m, std::abs(z));
    return m;
}

// Face field -> vertex average -> face average; one smoothing pass.
std::vector<cplx> smooth_mu(const mesh::SurfaceMesh& m, const std::vector<cplx>& mu) {
    std::vector<cplx> vsum(m.n_vertices(), 0.0);
    std::vector<int> vcount(m.n_vertices(), 0);
    for (size_t f = 0; f < m.faces.size(); ++f)
        for (int k = 0; k < 3; ++k) {
            vsum[m.faces[f][k]] += mu[f];
            vcount[m.faces[f][k]] += 1;
        }
    std::vector<cplx> out(mu.size());
    for (size_t f = 0; f < m.faces.size(); ++f) {
        cplx acc = 0;
        for (int k = 0; k < 3; ++k) {
            int v = m.faces[f][k];
            acc += vsum[v] / double(vcount[v]);
        }
        out[f] = acc / 3.0;
    }
    return out;
}

// Anisotropic stiffness matrix targeting Beltrami coefficient nu per face,
// assembled over flattened source faces.
std::vector<Eigen::Triplet<double>> lbs_triplets(const mesh::SurfaceMesh& m,
                                                 const std::vector<cplx>& nu) {
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(m.faces.size() * 9);
    for (size_t f = 0; f < m.faces.size(); ++f) {
        const auto& tri = m.faces[f];
        FlatFace ff = flatten(m.vertices[tri[0]], m.vertices[tri[1]], m.vertices[tri[2]]);
        if (ff.area <= 0) continue;

        cplx v = nu[f];
        if (std::abs(v) > 0.9) v *= 0.9 / std::abs(v);
        double rho = v.real(), sig = v.imag();
        double denom = 1.0 - std::norm(v);
        double a1 = ((rho - 1) * (rho - 1) + sig * sig) / denom;
        double a2 = -2 * sig / denom;
        double a3 = ((1 + rho) * (1 + rho) + sig * sig) / denom;
        Eigen::Matrix2d A;
        A << a1, a2, a2, a3;

        // Hat-function gradients: grad phi_k = rot90(opposite edge) / (2 area).
        Vec2 q[3] = {ff.q0, ff.q1, ff.q2};
        Eigen::Matrix<double, 2, 3> G;
        for (int k = 0; k < 3; ++k) {
            const Vec2& pj = q[(k + 1) % 3];
            const Vec2& pk = q[(k + 2) % 3];
            G(0, k) = -(pk[1] - pj[1]) / (2 * ff.area);
            G(1, k) = (pk[0] - pj[0]) / (2 * ff.area);
        }
        Eigen::Matrix3d K = ff.area * G.transpose() * A * G;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) trip.emplace_back(tri[r], tri[c], K(r, c));
    }
    return trip;
}

// LBS solve with the boundary sliding along the circle: interior vertices are
// free, each boundary vertex moves along its tangent line (first one pinned as
// the rotation gauge), then the boundary is renormalized back onto the circle.
std::vector<Vec2> solve_lbs_sliding(const mesh::SurfaceMesh& m, const std::vector<cplx>& nu,
                                    const std::vector<int>& boundary,
                                    const std::vector<Vec2>& cur) {
    const int n = m.n_vertices();
    auto trips = lbs_triplets(m, nu);
    Eigen::SparseMatrix<double> K(n, n);
    K.setFromTriplets(trips.begin(), trips.end());

    std::vector<int> border_order(n, -1);
    for (size_t k = 0; k < boundary.size(); ++k) border_order[boundary[k]] = int(k);
    std::vector<int> ivar(n, -1);
    int n_int = 0;
    for (int v = 0; v < n; ++v)
        if (border_order[v] < 0) ivar[v] = n_int++;
    const int n_bnd = int(boundary.size());
    const int nx = 2 * n_int + (n_bnd - 1);

    std::vector<Eigen::Triplet<double>> put, pvt;
    Eigen::VectorXd qu = Eigen::VectorXd::Zero(n), qv = Eigen::VectorXd::Zero(n);
    for (int v = 0; v < n; ++v) {
        if (border_order[v] < 0) {
            put.emplace_back(v, ivar[v], 1.0);
            pvt.emplace_back(v, n_int + ivar[v], 1.0);
        } else {
            double cx = cur[v][0], cy = cur[v][1];
            double r = std::hypot(cx, cy);
            cx /= r;
            cy /= r;
            qu(v) = cx;
            qv(v) = cy;
            int k = border_order[v];
            if (k > 0) {  // tangent direction (-cy, cx)
                put.emplace_back(v, 2 * n_int + (k - 1), -cy);
                pvt.emplace_back(v, 2 * n_int + (k - 1), cx);
            }
        }
    }
    Eigen::SparseMatrix<double> Pu(n, nx), Pv(n, nx);
    Pu.setFromTriplets(put.begin(), put.end());
    Pv.setFromTriplets(pvt.begin(), pvt.end());

    Eigen::SparseMatrix<double> A =
        (Eigen::SparseMatrix<double>(Pu.transpose()) * K * Pu +
         Eigen::SparseMatrix<double>(Pv.transpose()) * K * Pv)
            .pruned();
    Eigen::VectorXd rhs = -(Pu.transpose() * (K * qu) + Pv.transpose() * (K * qv));

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(A);
    if (solver.info() != Eigen::Success) throw SolverFailure("refinement factorization failed");
    Eigen::VectorXd x = solver.solve(rhs);
    if (solver.info() != Eigen::Success) throw SolverFailure("refinement solve failed");

    Eigen::VectorXd U = Pu * x + qu, V = Pv * x + qv;
    std::vector<Vec2> out(n);
    for (int v = 0; v < n; ++v) {
        if (border_order[v] >= 0) {
            double r = std::hypot(U(v), V(v));
            out[v] = {U(v) / r, V(v) / r};
        } else {
            out[v] = {U(v), V(v)};
        }
    }
    return out;
}

std::vector<Eigen::Triplet<double>> laplacian_triplets(const mesh::SurfaceMesh& m) {
    auto w = cotan_weights(m);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(w.size() * 4);
    for (const auto& [e, val] : w) {
        trip.emplace_back(e.first, e.second, -val);
        trip.emplace_back(e.second, e.first, -val);
        trip.emplace_back(e.first, e.first, val);
        trip.emplace_back(e.second, e.second, val);
    }
    return trip;
}

// Disk automorphism sending `a` to 0, then rotation putting the first
// boundary vertex at angle 0. Magnitude of mu is conformally invariant.
std::vector<Vec2> mobius_normalize(const std::vector<Vec2>& uv, const std::vector<int>& boundary,
                                   bool recenter, cplx a) {
    std::vector<cplx> z(uv.size());
    for (size_t i = 0; i < uv.size(); ++i) z[i] = cplx(uv[i][0], uv[i][1]);
    if (recenter)
        for (auto& zi : z) zi = (zi - a) / (1.0 - std::conj(a) * zi);
    cplx w0 = z[boundary[0]];
    cplx rot = std::abs(w0) > 0 ? std::conj(w0) / std::abs(w0) : cplx(1, 0);
    std::vector<Vec2> out(uv.size());
    for (size_t i = 0; i < uv.size(); ++i) {
        cplx r = z[i] * rot;
        out[i] = {r.real(), r.imag()};
    }
    return out;
}

cplx area_centroid(const mesh::SurfaceMesh& m, const std::vector<Vec2>& uv) {
    double asum = 0;
    cplx acc = 0;
    for (const auto& tri : m.faces) {
        double ar = tri_signed_area(uv[tri[0]], uv[tri[1]], uv[tri[2]]);
        cplx c = 0;
        for (int k = 0; k < 3; ++k) c += cplx(uv[tri[k]][0], uv[tri[k]][1]);
        acc += ar * c / 3.0;
        asum += ar;
    }
    return asum != 0 ? acc / asum : cplx(0, 0);
}

}  // namespace

int count_flipped_faces(const mesh::SurfaceMesh& m, const std::vector<Vec2>& uv) {
    int flips = 0;
    for (const auto& tri : m.faces)
        if (tri_signed_area(uv[tri[0]], uv[tri[1]], uv[tri[2]]) <= 0) ++flips;
    return flips;
}

double dirichlet_energy(const mesh::RoiPatch& patch, const std::vector<Vec2>& uv) {
    auto w = cotan_weights(patch.submesh);
    double e = 0;
    for (const auto& [edge, val] : w) {
        double du = uv[edge.first][0] - uv[edge.second][0];
        double dv = uv[edge.first][1] - uv[edge.second][1];
        e += val * (du * du + dv * dv);
    }
    return 0.5 * e;
}

DiskParameterization harmonic_disk_map(const mesh::RoiPatch& patch,
                                       const ConformalOptions& opts) {
    const auto& m = patch.submesh;
    DiskParameterization p;
    p.uv = solve_dirichlet(m.n_vertices(), laplacian_triplets(m), patch.boundary,
                           circle_boundary(patch), opts.solver_tol);
    p.mu = beltrami_impl(m, p.uv);
    p.mu_max = mu_sup_norm(p.mu);
    p.flipped_faces = count_flipped_faces(m, p.uv);
    p.energy = dirichlet_energy(patch, p.uv);
    return p;
}

std::vector<cplx> beltrami_coefficient(const mesh::RoiPatch& patch,
                                       const DiskParameterization& param) {
    if (int(param.uv.size()) != patch.submesh.n_vertices())
        throw std::invalid_argument("parameterization does not cover the patch");
    return beltrami_impl(patch.submesh, param.uv);
}

DiskParameterization refine_conformal(const mesh::RoiPatch& patch,
                                      const DiskParameterization& param,
                                      const ConformalOptions& opts) {
    const auto& m = patch.submesh;
    DiskParameterization cur = param;
    cur.mu = beltrami_impl(m, cur.uv);
    cur.mu_max = mu_sup_norm(cur.mu);
    cur.flipped_faces = count_flipped_faces(m, cur.uv);
    cur.refine_iterations = 0;
    cur.mu_history = {cur.mu_max};
    if (cur.mu_max <= opts.eps_mu && cur.flipped_faces == 0) {
        cur.converged = true;
        return cur;  // fixed point, input returned unchanged
    }

    for (int iter = 0; iter < opts.max_refine_iters; ++iter) {
        if (cur.mu_max <= opts.eps_mu && cur.flipped_faces == 0) break;

        std::vector<cplx> nu = smooth_mu(m, cur.mu);
        for (auto& z : nu) z *= kDamping;
        std::vector<Vec2> cand = solve_lbs_sliding(m, nu, patch.boundary, cur.uv);

        bool accepted = false;
        for (double alpha : {1.0, 0.5, 0.25, 0.125}) {
            std::vector<Vec2> blend(cur.uv.size());
            for (size_t i = 0; i < blend.size(); ++i) {
                blend[i] = {(1 - alpha) * cur.uv[i][0] + alpha * cand[i][0],
                            (1 - alpha) * cur.uv[i][1] + alpha * cand[i][1]};
            }
            for (int b : patch.boundary) {  // keep the rim exactly on the circle
                double r = std::hypot(blend[b][0], blend[b][1]);
                blend[b] = {blend[b][0] / r, blend[b][1] / r};
            }
            int flips = count_flipped_faces(m, blend);
            if (flips > cur.flipped_faces) continue;
            if (flips > 0 && flips == cur.flipped_faces) continue;
            std::vector<cplx> mu_b = beltrami_impl(m, blend);
            double mm = mu_sup_norm(mu_b);
            if (flips == cur.flipped_faces && mm > cur.mu_max) continue;
            cur.uv = std::move(blend);
            cur.mu = std::move(mu_b);
            cur.mu_max = mm;
            cur.flipped_faces = flips;
            accepted = true;
            break;
        }
        if (!accepted) break;  // stalled, report where we stopped
        cur.refine_iterations = iter + 1;
        cur.mu_history.push_back(cur.mu_max);
    }
    cur.converged = cur.mu_max <= opts.eps_mu;

    if (cur.refine_iterations > 0 && cur.flipped_faces == 0) {
        auto norm_uv = mobius_normalize(cur.uv, patch.boundary, true, area_centroid(m, cur.uv));
        int flips = count_flipped_faces(m, norm_uv);
        double mm = flips == 0 ? mu_sup_norm(beltrami_impl(m, norm_uv)) : 0.0;
        if (flips > 0 || mm > std::max(cur.mu_max, opts.eps_mu)) {
            // Recentring hurt the map; keep the rotation, which is exactly rigid.
            norm_uv = mobius_normalize(cur.uv, patch.boundary, false, 0.0);
        }
        cur.uv = std::move(norm_uv);
        cur.mu = beltrami_impl(m, cur.uv);
        cur.mu_max = mu_sup_norm(cur.mu);
        cur.flipped_faces = count_flipped_faces(m, cur.uv);
    }

    cur.energy = dirichlet_energy(patch, cur.uv);
    if (cur.flipped_faces > 0)
        throw BijectivityLost("refined map has " + std::to_string(cur.flipped_faces) +
                              " flipped faces");
    return cur;
}

DiskParameterization load_parameterization(const std::string& path) {
    auto is = io::open_input(path);
    io::check_magic(is, "BUV1");
    DiskParameterization p;
    auto nv = io::read_pod<uint32_t>(is);
    p.uv.resize(nv);
    for (auto& q : p.uv) {
        q[0] = io::read_pod<double>(is);
        q[1] = io::read_pod<double>(is);
    }
    auto nf = io::read_pod<uint32_t>(is);
    p.mu.resize(nf);
    for (auto& z : p.mu) {
        double re = io::read_pod<double>(is);
        double im = io::read_pod<double>(is);
        z = {re, im};
    }
    p.energy = io::read_pod<double>(is);
    p.mu_max = mu_sup_norm(p.mu);
    return p;
}

void save_parameterization(const DiskParameterization& p, const std::string& path) {
    auto os = io::open_output(path);
    io::write_magic(os, "BUV1");
    io::write_pod(os, uint32_t(p.uv.size()));
    for (const auto& q : p.uv) {
        io::write_pod(os, q[0]);
        io::write_pod(os, q[1]);
    }
    io::write_pod(os, uint32_t(p.mu.size()));
    for (const auto& z : p.mu) {
        io::write_pod(os, z.real());
        io::write_pod(os, z.imag());
    }
    io::write_pod(os, p.energy);
}

}  // namespace cortexbridge::conformal
