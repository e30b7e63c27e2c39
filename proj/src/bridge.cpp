#include "cortexbridge/bridge.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cortexbridge::bridge {

namespace {

constexpr double kEntropyFloor = 1e-8;
constexpr double kSmoothAbsEps = 1e-12;

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

double lse(const std::vector<double>& terms) {
    double m = -std::numeric_limits<double>::infinity();
    for (double t : terms) m = std::max(m, t);
    if (!std::isfinite(m)) return m;
    double s = 0;
    for (double t : terms) s += std::exp(t - m);
    return m + std::log(s);
}

}  // namespace

TimeGrid TimeGrid::uniform(int n) {
    if (n < 1) throw std::invalid_argument("time grid needs at least one step");
    TimeGrid g;
    g.steps.resize(size_t(n) + 1);
    for (int i = 0; i <= n; ++i) g.steps[size_t(i)] = double(i) / n;
    g.steps.front() = 0.0;
    g.steps.back() = 1.0;
    return g;
}

void TimeGrid::validate() const {
    if (steps.size() < 2) throw std::invalid_argument("time grid needs at least two values");
    if (steps.front() != 0.0 || steps.back() != 1.0)
        throw std::invalid_argument("time grid endpoints must be exactly 0 and 1");
    for (size_t i = 1; i < steps.size(); ++i)
        if (!(steps[i] > steps[i - 1]))
            throw std::invalid_argument("time grid must be strictly increasing");
}

Coupling sinkhorn_eot(const Eigen::MatrixXd& cost, const Eigen::VectorXd& row_marginal,
                      const Eigen::VectorXd& col_marginal, double epsilon, double tol,
                      int max_iters) {
    const int m = int(cost.rows()), n = int(cost.cols());
    require(m >= 1 && n >= 1, "cost matrix is empty");
    require(row_marginal.size() == m && col_marginal.size() == n,
            "marginal sizes do not match the cost matrix");
    require(epsilon > 0, "epsilon must be positive");
    require(max_iters >= 1, "max_iters must be positive");
    require(row_marginal.minCoeff() >= 0 && col_marginal.minCoeff() >= 0,
            "marginals must be nonnegative");
    require(std::abs(row_marginal.sum() - 1.0) <= 1e-6 &&
                std::abs(col_marginal.sum() - 1.0) <= 1e-6,
            "marginals must sum to 1");

    Eigen::VectorXd f = Eigen::VectorXd::Zero(m), g = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd loga(m), logb(n);
    for (int i = 0; i < m; ++i) loga[i] = std::log(row_marginal[i]);
    for (int j = 0; j < n; ++j) logb[j] = std::log(col_marginal[j]);

    auto plan = [&](const Eigen::VectorXd& fi, const Eigen::VectorXd& gj) {
        Eigen::MatrixXd gamma(m, n);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) gamma(i, j) = std::exp((fi[i] + gj[j] - cost(i, j)) / epsilon);
        return gamma;
    };
    auto objective = [&](const Eigen::MatrixXd& gamma) {
        double dual = 0;
        for (int i = 0; i < m; ++i)
            if (row_marginal[i] > 0) dual += f[i] * row_marginal[i];
        for (int j = 0; j < n; ++j)
            if (col_marginal[j] > 0) dual += g[j] * col_marginal[j];
        dual -= epsilon * gamma.sum();
        return -dual;
    };

    Coupling out;
    out.row_marginal = row_marginal;
    out.col_marginal = col_marginal;
    out.epsilon = epsilon;

    Eigen::VectorXd best_f = f, best_g = g;
    double best_err = std::numeric_limits<double>::infinity();
    std::vector<double> terms;
    bool converged = false;
    int iters = 0;

    for (int k = 1; k <= max_iters; ++k) {
        for (int i = 0; i < m; ++i) {
            terms.assign(size_t(n), 0.0);
            for (int j = 0; j < n; ++j) terms[size_t(j)] = (g[j] - cost(i, j)) / epsilon;
            f[i] = epsilon * (loga[i] - lse(terms));
        }
        for (int j = 0; j < n; ++j) {
            terms.assign(size_t(m), 0.0);
            for (int i = 0; i < m; ++i) terms[size_t(i)] = (f[i] - cost(i, j)) / epsilon;
            g[j] = epsilon * (logb[j] - lse(terms));
        }
        Eigen::MatrixXd gamma = plan(f, g);
        double err = (gamma.rowwise().sum() - row_marginal).cwiseAbs().maxCoeff();
        err = std::max(err, (gamma.colwise().sum().transpose() - col_marginal).cwiseAbs().maxCoeff());
        if (err < best_err) {
            best_err = err;
            best_f = f;
            best_g = g;
        }
        iters = k;
        if (k % 10 == 0) out.objective_trace.push_back(objective(gamma));
        if (err <= tol) {
            converged = true;
            break;
        }
    }
    if (iters % 10 != 0) out.objective_trace.push_back(objective(plan(f, g)));

    out.converged = converged;
    out.iterations = iters;
    if (!converged) {
        f = best_f;
        g = best_g;
    }
    out.matrix = plan(f, g);
    return out;
}

GridImage sample_bridge(const GridImage& x_a, const GridImage& x_b, const GridMask& mask,
                        double t_a, double t_b, double t, double tau, std::mt19937_64& rng) {
    require_same_shape(x_a, x_b);
    if (x_a.h != mask.h || x_a.w != mask.w) throw ShapeMismatch("mask shape mismatch");
    if (t_b == t_a) throw DegenerateInterval("bridge interval has zero length");
    require(t_b > t_a, "interval must be ordered");
    require(t_a <= t && t <= t_b, "t must lie inside the interval");
    require(tau >= 0, "tau must be nonnegative");

    if (t == t_a) return x_a;
    if (t == t_b) return x_b;

    const double s = (t - t_a) / (t_b - t_a);
    const double sd = std::sqrt(s * (1.0 - s) * tau * (t_b - t_a));
    std::normal_distribution<double> normal(0.0, 1.0);

    GridImage out = x_a;
    for (size_t p = 0; p < out.v.size(); ++p) {
        if (!mask.m[p]) continue;
        out.v[p] = s * x_b.v[p] + (1.0 - s) * x_a.v[p] + sd * normal(rng);
    }
    return out;
}

std::vector<GridImage> simulate_trajectory(const GridImage& x0, const GridMask& mask,
                                           const Sampler& gen, const BridgeConfig& cfg,
                                           std::mt19937_64& rng) {
    cfg.grid.validate();
    const int n = cfg.grid.n_steps();
    std::vector<GridImage> traj;
    traj.reserve(size_t(n) + 1);
    traj.push_back(x0);
    GridImage x = x0;
    for (int j = 0; j < n; ++j) {
        const double tj = cfg.grid.steps[size_t(j)];
        const double tnext = cfg.grid.steps[size_t(j) + 1];
        GridImage endpoint = gen.predict(x, tj, rng);
        x = sample_bridge(x, endpoint, mask, tj, 1.0, tnext, cfg.tau, rng);
        traj.push_back(x);
    }
    return traj;
}

double sb_loss(const std::vector<std::pair<GridImage, GridImage>>& batch, double t_i,
               const BridgeConfig& cfg, const GridMask& mask) {
    require(!batch.empty(), "batch must be nonempty");
    require(0.0 <= t_i && t_i <= 1.0, "t_i must lie in [0,1]");
    const size_t npix = mask.m.size();
    for (const auto& [xt, xhat] : batch) {
        require_same_shape(xt, xhat);
        if (xt.h != mask.h || xt.w != mask.w) throw ShapeMismatch("mask shape mismatch");
    }

    double mse = 0;
    for (const auto& [xt, xhat] : batch) {
        double acc = 0;
        for (size_t p = 0; p < npix; ++p) {
            if (!mask.m[p]) continue;
            double d = xhat.v[p] - xt.v[p];
            acc += d * d;
        }
        mse += acc;
    }
    mse /= double(batch.size());

    if (cfg.entropy_estimator != "gaussian-proxy") return mse;

    const double nb = double(batch.size());
    double entropy = 0;
    for (size_t p = 0; p < npix; ++p) {
        if (!mask.m[p]) continue;
        double mu = 0;
        for (const auto& pr : batch) mu += pr.second.v[p];
        mu /= nb;
        double var = 0;
        for (const auto& pr : batch) {
            double d = pr.second.v[p] - mu;
            var += d * d;
        }
        var /= nb;
        entropy += 0.5 * (std::log(var + kEntropyFloor) + std::log(2.0 * M_PI * M_E));
    }
    return mse - 2.0 * cfg.tau * (1.0 - t_i) * entropy;
}

PatchPlan make_patch_plan(const GridMask& mask, const PatchConfig& cfg) {
    require(mask.h >= 1 && mask.w >= 1, "mask is empty");
    require(cfg.patch_count >= 1 && cfg.embed_dim >= 1 && cfg.temperature > 0,
            "invalid patch configuration");
    PatchPlan plan;
    plan.h = mask.h;
    plan.w = mask.w;
    plan.patch_size = std::min({cfg.patch_size, mask.h, mask.w});
    plan.embed_dim = cfg.embed_dim;
    plan.temperature = cfg.temperature;
    const int ps = plan.patch_size;

    // Candidate corners whose window is at least half masked; all corners as
    // fallback for very sparse masks.
    std::vector<std::pair<int, int>> candidates;
    for (int r = 0; r + ps <= mask.h; ++r)
        for (int c = 0; c + ps <= mask.w; ++c) {
            int cnt = 0;
            for (int i = 0; i < ps; ++i)
                for (int j = 0; j < ps; ++j) cnt += mask.at(r + i, c + j) ? 1 : 0;
            if (2 * cnt >= ps * ps) candidates.emplace_back(r, c);
        }
    if (candidates.empty())
        for (int r = 0; r + ps <= mask.h; ++r)
            for (int c = 0; c + ps <= mask.w; ++c) candidates.emplace_back(r, c);

    std::mt19937_64 rng(cfg.seed);
    std::shuffle(candidates.begin(), candidates.end(), rng);
    const int count = std::min<int>(cfg.patch_count, int(candidates.size()));
    for (int k = 0; k < count; ++k) {
        plan.row0.push_back(candidates[size_t(k)].first);
        plan.col0.push_back(candidates[size_t(k)].second);
    }

    std::mt19937_64 prng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    plan.proj.resize(size_t(ps) * ps * cfg.embed_dim);
    for (auto& wv : plan.proj) wv = normal(prng) / ps;
    return plan;
}

int patch_loss_graph(ad::Tape& t, const PatchPlan& plan, int x0, int x1_hat) {
    const int k = int(plan.row0.size());
    if (k < 2) return t.zeros({1}, false);
    const int ps = plan.patch_size, pd = ps * ps, e = plan.embed_dim;

    auto gather = std::make_shared<ad::SparseMat>();
    gather->rows = k * pd;
    gather->cols = plan.h * plan.w;
    gather->row_ptr.push_back(0);
    for (int q = 0; q < k; ++q)
        for (int i = 0; i < ps; ++i)
            for (int j = 0; j < ps; ++j) {
                gather->col.push_back((plan.row0[size_t(q)] + i) * plan.w +
                                      plan.col0[size_t(q)] + j);
                gather->w.push_back(1.0);
                gather->row_ptr.push_back(int(gather->col.size()));
            }

    int proj = t.constant({pd, e}, plan.proj.data());
    std::vector<double> ones_e(size_t(e), 1.0);
    int ones = t.constant({e, 1}, ones_e.data());

    auto embed = [&](int img) {
        int patches = t.reshape(t.sparse_apply(gather, img), {k, pd});
        int sym = t.signed_pow(t.add_scalar(t.mul(patches, patches), kSmoothAbsEps), 0.5);
        int z = t.matmul(sym, proj);
        int nsq = t.reshape(t.matmul(t.mul(z, z), ones), {k});
        int inv = t.signed_pow(t.add_scalar(nsq, kSmoothAbsEps), -0.5);
        return t.row_scale(z, inv);
    };

    int keys = embed(x0);
    int queries = embed(x1_hat);
    int logits = t.mul_scalar(t.matmul(queries, t.transpose2(keys)), 1.0 / plan.temperature);
    return t.cross_entropy_rows(logits);
}

double patch_contrastive_loss(const GridImage& x0, const GridImage& x1_hat,
                              const GridMask& mask, const PatchConfig& cfg) {
    require_same_shape(x0, x1_hat);
    if (x0.h != mask.h || x0.w != mask.w) throw ShapeMismatch("mask shape mismatch");
    PatchPlan plan = make_patch_plan(mask, cfg);
    ad::Tape t;
    int a = t.constant({x0.h * x0.w}, x0.v.data());
    int b = t.constant({x0.h * x0.w}, x1_hat.v.data());
    return t.scalar(patch_loss_graph(t, plan, a, b));
}

}  // namespace cortexbridge::bridge
