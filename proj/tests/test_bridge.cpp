#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <vector>

#include "cortexbridge/bridge.hpp"
#include "cortexbridge/generator.hpp"
#include "cortexbridge/io_util.hpp"
#include "gradcheck.hpp"

using cortexbridge::GridImage;
using cortexbridge::GridMask;
namespace ad = cortexbridge::ad;
namespace br = cortexbridge::bridge;
namespace metrics = cortexbridge::metrics;

namespace {

GridMask disk_mask(int n, double rfrac = 0.45) {
    GridMask m(n, n);
    const double c = (n - 1) / 2.0, r2 = (rfrac * n) * (rfrac * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if ((i - c) * (i - c) + (j - c) * (j - c) <= r2) m.at(i, j) = 1;
    return m;
}

GridImage texture(int h, int w, int variant, const GridMask* mask = nullptr) {
    GridImage x(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double v = 0.45 * std::sin(0.7 * i + 0.31 * variant) * std::cos(0.4 * j - 0.2 * variant) +
                       0.3 * std::sin(1.3 * (i + j) + variant);
            x.at(i, j) = (mask && !mask->at(i, j)) ? 0.0 : v;
        }
    return x;
}

double sample_mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / double(v.size());
}

double sample_var(const std::vector<double>& v) {
    const double mu = sample_mean(v);
    double s = 0;
    for (double x : v) s += (x - mu) * (x - mu);
    return s / double(v.size() - 1);
}

// Brute-force reference minimizer for <C,X> + eps*sum(X*(log X - 1)) on the
// transport polytope: gradient steps projected onto the affine hull of the
// marginal constraints, with backtracking; the entropy barrier keeps every
// accepted iterate strictly positive.
Eigen::MatrixXd pg_eot(const Eigen::MatrixXd& C, const Eigen::VectorXd& a,
                       const Eigen::VectorXd& b, double eps, int max_iters) {
    const int m = int(C.rows()), n = int(C.cols());
    Eigen::MatrixXd x = a * b.transpose();
    auto value = [&](const Eigen::MatrixXd& z) {
        double f = 0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                f += C(i, j) * z(i, j) + eps * z(i, j) * (std::log(z(i, j)) - 1.0);
        return f;
    };
    auto project = [&](Eigen::MatrixXd z) {
        Eigen::VectorXd r = a - z.rowwise().sum();
        Eigen::VectorXd c = b - z.colwise().sum().transpose();
        Eigen::VectorXd u = r / double(n);
        const double p = r.sum() / double(n);
        Eigen::VectorXd v = (c.array() - p).matrix() / double(m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) z(i, j) += u[i] + v[j];
        return z;
    };
    double fx = value(x), eta = 0.5;
    for (int k = 0; k < max_iters; ++k) {
        Eigen::MatrixXd g = C + eps * x.array().log().matrix();
        bool accepted = false;
        for (int h = 0; h < 80 && !accepted; ++h) {
            Eigen::MatrixXd y = project(x - eta * g);
            if (y.minCoeff() <= 0) {
                eta *= 0.5;
                continue;
            }
            const double fy = value(y);
            if (fy <= fx) {
                const double step = (y - x).cwiseAbs().maxCoeff();
                x = y;
                fx = fy;
                accepted = true;
                eta *= 1.1;
                if (step < 1e-14) return x;
            } else {
                eta *= 0.5;
            }
        }
        if (!accepted) break;
    }
    return x;
}

struct IdentitySampler : br::Sampler {
    GridImage predict(const GridImage& x, double, std::mt19937_64&) const override { return x; }
};

struct ConstSampler : br::Sampler {
    GridImage target;
    explicit ConstSampler(GridImage t) : target(std::move(t)) {}
    GridImage predict(const GridImage&, double, std::mt19937_64&) const override {
        return target;
    }
};

// Exact endpoint posterior of a two-point coupling under the Gaussian bridge
// reference: P(y_j | x_t = v) ~ sum_i gamma_ij N(v; (1-t)x_i + t y_j, t(1-t)tau).
struct PosteriorSampler : br::Sampler {
    Eigen::MatrixXd gamma;
    std::vector<double> xs, ys;
    double tau;
    PosteriorSampler(Eigen::MatrixXd g, std::vector<double> x, std::vector<double> y, double tv)
        : gamma(std::move(g)), xs(std::move(x)), ys(std::move(y)), tau(tv) {}
    GridImage predict(const GridImage& xin, double t, std::mt19937_64& rng) const override {
        const double v = xin.v[0];
        std::vector<double> w(ys.size(), 0.0);
        if (t <= 0.0) {
            size_t i0 = 0;
            for (size_t i = 1; i < xs.size(); ++i)
                if (std::abs(v - xs[i]) < std::abs(v - xs[i0])) i0 = i;
            for (size_t j = 0; j < ys.size(); ++j) w[j] = gamma(int(i0), int(j));
        } else {
            const double s2 = t * (1.0 - t) * tau;
            for (size_t j = 0; j < ys.size(); ++j)
                for (size_t i = 0; i < xs.size(); ++i) {
                    const double mu = (1.0 - t) * xs[i] + t * ys[j];
                    w[j] += gamma(int(i), int(j)) * std::exp(-(v - mu) * (v - mu) / (2.0 * s2));
                }
        }
        double tot = 0;
        for (double wi : w) tot += wi;
        std::uniform_real_distribution<double> unif(0.0, tot);
        double u = unif(rng), acc = 0;
        size_t pick = ys.size() - 1;
        for (size_t j = 0; j < ys.size(); ++j) {
            acc += w[j];
            if (u <= acc) {
                pick = j;
                break;
            }
        }
        GridImage out(1, 1);
        out.v[0] = ys[pick];
        return out;
    }
};

br::BridgeConfig toy_config(double tau) {
    br::BridgeConfig cfg;
    cfg.tau = tau;
    return cfg;
}

}  // namespace

TEST_SUITE("bridge") {

TEST_CASE("uniform time grid spans zero to one") {
    auto g = br::TimeGrid::uniform(5);
    CHECK(g.steps.size() == 6);
    CHECK(g.n_steps() == 5);
    CHECK(g.steps.front() == 0.0);
    CHECK(g.steps.back() == 1.0);
    CHECK(g.steps[2] == doctest::Approx(0.4));
    CHECK_NOTHROW(g.validate());
    CHECK_THROWS_AS(br::TimeGrid::uniform(0), std::invalid_argument);

    br::TimeGrid flat;
    flat.steps = {0.0, 0.5, 0.5, 1.0};
    CHECK_THROWS_AS(flat.validate(), std::invalid_argument);
    br::TimeGrid offends;
    offends.steps = {0.1, 1.0};
    CHECK_THROWS_AS(offends.validate(), std::invalid_argument);
}

TEST_CASE("bridge endpoints are exact copies") {
    const GridMask mask = disk_mask(8);
    const GridImage xa = texture(8, 8, 0, &mask);
    const GridImage xb = texture(8, 8, 1, &mask);
    std::mt19937_64 rng(3);
    CHECK(br::sample_bridge(xa, xb, mask, 0.25, 0.75, 0.25, 0.7, rng).v == xa.v);
    CHECK(br::sample_bridge(xa, xb, mask, 0.25, 0.75, 0.75, 0.7, rng).v == xb.v);
}

TEST_CASE("bridge rejects malformed intervals") {
    const GridMask mask = disk_mask(4);
    const GridImage x = texture(4, 4, 0);
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(br::sample_bridge(x, x, mask, 0.5, 0.5, 0.5, 1.0, rng),
                    br::DegenerateInterval);
    CHECK_THROWS_AS(br::sample_bridge(x, x, mask, 0.8, 0.2, 0.5, 1.0, rng),
                    std::invalid_argument);
    CHECK_THROWS_AS(br::sample_bridge(x, x, mask, 0.2, 0.8, 0.9, 1.0, rng),
                    std::invalid_argument);
    CHECK_THROWS_AS(br::sample_bridge(x, x, mask, 0.2, 0.8, 0.5, -1.0, rng),
                    std::invalid_argument);
    CHECK_THROWS_AS(br::sample_bridge(x, texture(5, 5, 0), mask, 0.2, 0.8, 0.5, 1.0, rng),
                    std::invalid_argument);
    CHECK_THROWS_AS(br::sample_bridge(x, x, disk_mask(5), 0.2, 0.8, 0.5, 1.0, rng),
                    br::ShapeMismatch);
}

TEST_CASE("interior samples follow the bridge law") {
    const int n = 100000;
    std::mt19937_64 rng(11);

    GridImage xa(1, 1, 0.0), xb(1, 1, 0.0);
    GridMask mask(1, 1, 1);
    std::vector<double> draws(size_t(n), 0.0);
    for (auto& d : draws) d = br::sample_bridge(xa, xb, mask, 0.0, 1.0, 0.5, 1.0, rng).v[0];
    const double var_target = 0.25;
    const double se = var_target * std::sqrt(2.0 / (n - 1));
    CHECK(std::abs(sample_var(draws) - var_target) <= 3.0 * se);
    CHECK(std::abs(sample_mean(draws)) <= 3.0 * 0.5 / std::sqrt(double(n)));

    // Sub-interval under lower diffusion: s=0.5, var s(1-s)*tau*(t_b-t_a).
    GridImage ya(1, 1, 1.0), yb(1, 1, 3.0);
    for (auto& d : draws) d = br::sample_bridge(ya, yb, mask, 0.2, 0.7, 0.45, 0.4, rng).v[0];
    const double v2 = 0.25 * 0.4 * 0.5;
    CHECK(std::abs(sample_var(draws) - v2) <= 3.0 * v2 * std::sqrt(2.0 / (n - 1)));
    CHECK(std::abs(sample_mean(draws) - 2.0) <= 3.0 * std::sqrt(v2 / n));

    // Pixels outside the mask never move.
    GridMask half(1, 2, 0);
    half.m[0] = 1;
    GridImage za(1, 2, 0.0), zb(1, 2, 0.0);
    za.v[1] = 0.625;
    zb.v[1] = -4.0;
    for (int k = 0; k < 100; ++k) {
        GridImage out = br::sample_bridge(za, zb, half, 0.0, 1.0, 0.5, 1.0, rng);
        CHECK(out.v[1] == 0.625);
    }
}

TEST_CASE("one-cell coupling carries the whole mass") {
    Eigen::MatrixXd c(1, 1);
    c << 0.7;
    Eigen::VectorXd one(1);
    one << 1.0;
    auto cp = br::sinkhorn_eot(c, one, one, 0.5);
    CHECK(cp.converged);
    CHECK(cp.matrix(0, 0) == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("sinkhorn rejects malformed inputs") {
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(2, 2);
    Eigen::VectorXd u = Eigen::VectorXd::Constant(2, 0.5);
    Eigen::VectorXd bad = Eigen::VectorXd::Constant(2, 0.4);
    Eigen::VectorXd neg(2);
    neg << 1.2, -0.2;
    CHECK_THROWS_AS(br::sinkhorn_eot(c, u, u, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(br::sinkhorn_eot(c, bad, u, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(br::sinkhorn_eot(c, neg, u, 0.5), std::invalid_argument);
    CHECK_THROWS_AS(br::sinkhorn_eot(c, u, u, 0.5, 1e-8, 0), std::invalid_argument);
}

TEST_CASE("huge epsilon recovers the independent coupling") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    Eigen::MatrixXd c(3, 4);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) c(i, j) = unif(rng);
    Eigen::VectorXd a = Eigen::VectorXd::Constant(3, 1.0 / 3.0);
    Eigen::VectorXd b = Eigen::VectorXd::Constant(4, 0.25);
    auto cp = br::sinkhorn_eot(c, a, b, 1e6);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) CHECK(std::abs(cp.matrix(i, j) - a[i] * b[j]) <= 1e-6);

    // A separable cost factors exactly at any epsilon.
    Eigen::MatrixXd sep(3, 4);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) sep(i, j) = 0.3 * i + 0.7 * j;
    auto cps = br::sinkhorn_eot(sep, a, b, 0.5);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) CHECK(std::abs(cps.matrix(i, j) - a[i] * b[j]) <= 1e-9);
}

TEST_CASE("marginals are met and the objective trace never increases") {
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        const int m = 4, n = 6;
        Eigen::MatrixXd c(m, n);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) c(i, j) = unif(rng);
        Eigen::VectorXd a(m), b(n);
        for (int i = 0; i < m; ++i) a[i] = 0.2 + unif(rng);
        for (int j = 0; j < n; ++j) b[j] = 0.2 + unif(rng);
        a /= a.sum();
        b /= b.sum();

        auto cp = br::sinkhorn_eot(c, a, b, 0.3);
        REQUIRE(cp.converged);
        CHECK(cp.matrix.minCoeff() >= 0.0);
        CHECK((cp.matrix.rowwise().sum() - a).cwiseAbs().maxCoeff() <= 1e-8);
        CHECK((cp.matrix.colwise().sum().transpose() - b).cwiseAbs().maxCoeff() <= 1e-8);
        REQUIRE(!cp.objective_trace.empty());
        for (size_t k = 1; k < cp.objective_trace.size(); ++k)
            CHECK(cp.objective_trace[k] <= cp.objective_trace[k - 1] + 1e-12);
    }
}

TEST_CASE("zero marginal entries get empty rows") {
    Eigen::MatrixXd c(3, 3);
    c << 0.1, 0.9, 0.4, 0.5, 0.2, 0.8, 0.3, 0.6, 0.7;
    Eigen::VectorXd a(3), b(3);
    a << 0.5, 0.0, 0.5;
    b << 0.25, 0.5, 0.25;
    auto cp = br::sinkhorn_eot(c, a, b, 0.5);
    CHECK(cp.converged);
    for (int j = 0; j < 3; ++j) {
        CHECK(std::isfinite(cp.matrix(1, j)));
        CHECK(cp.matrix(1, j) <= 1e-12);
    }
}

TEST_CASE("hitting the iteration cap returns the best iterate flagged") {
    Eigen::MatrixXd c(3, 3);
    c << 0.0, 1.3, 0.2, 0.7, 0.05, 0.9, 0.4, 0.8, 0.1;
    Eigen::VectorXd a(3), b(3);
    a << 0.2, 0.3, 0.5;
    b << 0.45, 0.35, 0.2;
    auto cp = br::sinkhorn_eot(c, a, b, 0.01, 1e-14, 2);
    CHECK(!cp.converged);
    CHECK(cp.iterations == 2);
    CHECK(cp.matrix.allFinite());
    CHECK(!cp.objective_trace.empty());
    auto full = br::sinkhorn_eot(c, a, b, 0.01, 1e-14, 10000);
    const double viol_capped =
        (cp.matrix.rowwise().sum() - a).cwiseAbs().maxCoeff() +
        (cp.matrix.colwise().sum().transpose() - b).cwiseAbs().maxCoeff();
    const double viol_full =
        (full.matrix.rowwise().sum() - a).cwiseAbs().maxCoeff() +
        (full.matrix.colwise().sum().transpose() - b).cwiseAbs().maxCoeff();
    CHECK(viol_full <= viol_capped);
}

TEST_CASE("sinkhorn agrees with a projected-gradient minimizer") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int trial = 0; trial < 15; ++trial) {
        const int n = trial < 10 ? 3 : 5;
        Eigen::MatrixXd c(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) c(i, j) = unif(rng);
        Eigen::VectorXd a(n), b(n);
        for (int i = 0; i < n; ++i) a[i] = 0.2 + unif(rng);
        for (int j = 0; j < n; ++j) b[j] = 0.2 + unif(rng);
        a /= a.sum();
        b /= b.sum();

        auto cp = br::sinkhorn_eot(c, a, b, 0.5, 1e-12, 50000);
        Eigen::MatrixXd ref = pg_eot(c, a, b, 0.5, 100000);
        CHECK((cp.matrix - ref).cwiseAbs().maxCoeff() <= 1e-6);
    }
}

TEST_CASE("trajectory has one state per grid value") {
    const GridMask mask = disk_mask(8);
    const GridImage x0 = texture(8, 8, 0, &mask);
    IdentitySampler gen;
    std::mt19937_64 rng(7);
    auto traj = br::simulate_trajectory(x0, mask, gen, toy_config(0.5), rng);
    REQUIRE(traj.size() == 6);
    CHECK(traj[0].v == x0.v);
}

TEST_CASE("identity generator with vanishing diffusion keeps the state") {
    const GridMask mask = disk_mask(8);
    const GridImage x0 = texture(8, 8, 2, &mask);
    IdentitySampler gen;
    std::mt19937_64 rng(7);
    auto traj = br::simulate_trajectory(x0, mask, gen, toy_config(0.0), rng);
    for (const auto& state : traj)
        for (size_t p = 0; p < state.v.size(); ++p)
            CHECK(state.v[p] == doctest::Approx(x0.v[p]).epsilon(1e-12));
}

TEST_CASE("the last state is the final endpoint prediction") {
    const GridMask mask = disk_mask(8);
    const GridImage x0 = texture(8, 8, 0, &mask);
    const GridImage target = texture(8, 8, 3, &mask);
    ConstSampler gen(target);
    std::mt19937_64 rng(19);
    auto traj = br::simulate_trajectory(x0, mask, gen, toy_config(0.8), rng);
    CHECK(traj.back().v == target.v);
}

TEST_CASE("trajectory noise accumulates the per-interval variances") {
    // Identity predictions turn each step into a pure noise increment with
    // variance s_j(1-s_j)*tau*(1-t_j); the final step adds none.
    const int m = 20000;
    GridImage x0(1, 1, 0.0);
    GridMask mask(1, 1, 1);
    IdentitySampler gen;
    const auto cfg = toy_config(1.0);
    double target = 0.0;
    for (int j = 0; j + 1 < 5; ++j) {
        const double tj = j / 5.0;
        const double s = 0.2 / (1.0 - tj);
        target += s * (1.0 - s) * (1.0 - tj);
    }

    std::vector<double> finals1(m), finals2(m);
    std::mt19937_64 r1(100), r2(200);
    for (int k = 0; k < m; ++k) {
        finals1[size_t(k)] = br::simulate_trajectory(x0, mask, gen, cfg, r1).back().v[0];
        finals2[size_t(k)] = br::simulate_trajectory(x0, mask, gen, cfg, r2).back().v[0];
    }
    const double se_var = target * std::sqrt(2.0 / (m - 1));
    CHECK(std::abs(sample_var(finals1) - target) <= 3.5 * se_var);
    CHECK(std::abs(sample_var(finals2) - target) <= 3.5 * se_var);
    const double se_mean = std::sqrt(2.0 * target / m);
    CHECK(std::abs(sample_mean(finals1) - sample_mean(finals2)) <= 4.0 * se_mean);
}

TEST_CASE("two-point posterior simulation matches the mixture marginals") {
    // True-posterior sampling must reproduce the coupling-weighted mixture of
    // Gaussian bridges at every grid time.
    const double tau = 0.5;
    const std::vector<double> xs = {-1.0, 1.0}, ys = {-0.5, 1.5};
    Eigen::MatrixXd c(2, 2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) c(i, j) = (xs[size_t(i)] - ys[size_t(j)]) * (xs[size_t(i)] - ys[size_t(j)]);
    Eigen::VectorXd a(2), b(2);
    a << 0.5, 0.5;
    b << 0.3, 0.7;
    auto cp = br::sinkhorn_eot(c, a, b, 2.0 * tau);
    REQUIRE(cp.converged);

    PosteriorSampler gen(cp.matrix, xs, ys, tau);
    const auto cfg = toy_config(tau);
    GridMask mask(1, 1, 1);
    const int m = 20000;
    std::vector<std::vector<double>> states(6);
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (int k = 0; k < m; ++k) {
        GridImage x0(1, 1, unif(rng) < 0.5 ? xs[0] : xs[1]);
        auto traj = br::simulate_trajectory(x0, mask, gen, cfg, rng);
        for (size_t s = 0; s < traj.size(); ++s) states[s].push_back(traj[s].v[0]);
    }

    for (int s = 1; s <= 4; ++s) {
        const double t = s / 5.0;
        double mean = 0, second = 0;
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) {
                const double mu = (1.0 - t) * xs[size_t(i)] + t * ys[size_t(j)];
                mean += cp.matrix(i, j) * mu;
                second += cp.matrix(i, j) * (mu * mu + t * (1.0 - t) * tau);
            }
        const double var = second - mean * mean;
        CHECK(std::abs(sample_mean(states[size_t(s)]) - mean) <= 4.0 * std::sqrt(var / m));
        CHECK(std::abs(sample_var(states[size_t(s)]) - var) <= 0.06 * var);
    }

    // Final states are endpoint draws; their frequencies match the column
    // marginal.
    int hi = 0;
    for (double v : states[5]) {
        CHECK((v == ys[0] || v == ys[1]));
        hi += v == ys[1] ? 1 : 0;
    }
    CHECK(std::abs(double(hi) / m - 0.7) <= 4.0 * std::sqrt(0.3 * 0.7 / m));
}

TEST_CASE("transport cost matches the hand examples") {
    const GridMask mask = disk_mask(8);
    const int nmask = mask.count();
    br::BridgeConfig off;
    off.entropy_estimator = "off";

    const GridImage xt = texture(8, 8, 0, &mask);
    std::vector<std::pair<GridImage, GridImage>> same = {{xt, xt}, {xt, xt}, {xt, xt}};
    CHECK(br::sb_loss(same, 0.4, off, mask) == 0.0);

    GridImage shifted = xt;
    for (auto& v : shifted.v) v += 0.3;
    std::vector<std::pair<GridImage, GridImage>> offset = {{xt, shifted}, {xt, shifted}};
    CHECK(br::sb_loss(offset, 0.4, off, mask) ==
          doctest::Approx(0.09 * nmask).epsilon(1e-12));

    // At t=1 the entropy weight is exactly zero.
    br::BridgeConfig proxy;
    CHECK(br::sb_loss(offset, 1.0, proxy, mask) == br::sb_loss(offset, 1.0, off, mask));

    // A spread batch earns an entropy bonus at t<1.
    GridImage lo = xt, hiv = xt;
    for (auto& v : lo.v) v -= 1.0;
    for (auto& v : hiv.v) v += 1.0;
    std::vector<std::pair<GridImage, GridImage>> spread = {{xt, lo}, {xt, hiv}};
    proxy.tau = 0.4;
    CHECK(br::sb_loss(spread, 0.5, proxy, mask) < br::sb_loss(spread, 0.5, off, mask));
}

TEST_CASE("a fresh critic sits at chance") {
    br::CriticConfig cc;
    cc.image_h = cc.image_w = 8;
    cc.base_channels = 4;
    cc.blocks = 2;
    auto critic = br::make_critic(cc);
    const GridMask mask = disk_mask(8);
    std::vector<GridImage> real = {texture(8, 8, 0, &mask), texture(8, 8, 1, &mask)};
    std::vector<GridImage> fake = {texture(8, 8, 2, &mask), texture(8, 8, 3, &mask)};
    auto [gen_term, critic_term] = br::adv_loss(critic, real, fake, mask);
    CHECK(critic_term == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(gen_term == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("the critic learns to separate a frozen toy") {
    br::CriticConfig cc;
    cc.image_h = cc.image_w = 8;
    cc.base_channels = 4;
    cc.blocks = 2;
    auto critic = br::make_critic(cc);
    const GridMask mask = disk_mask(8);
    std::vector<GridImage> real, fake;
    for (int k = 0; k < 6; ++k) {
        GridImage r = texture(8, 8, 0, &mask), f = texture(8, 8, 1, &mask);
        for (size_t p = 0; p < r.v.size(); ++p) {
            r.v[p] += 0.02 * std::sin(3.1 * k + 0.7 * double(p));
            f.v[p] -= 0.02 * std::cos(1.7 * k + 0.3 * double(p));
        }
        real.push_back(r);
        fake.push_back(f);
    }

    std::vector<double> m(critic.layout.total, 0.0), v(critic.layout.total, 0.0), grad;
    std::vector<double> checkpoints;
    const double lr = 1e-2, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int step = 0; step <= 200; ++step) {
        const double loss = br::critic_loss(critic, real, fake, mask, &grad);
        if (step % 50 == 0) checkpoints.push_back(loss);
        if (step == 200) break;
        const double c1 = 1.0 - std::pow(b1, step + 1), c2 = 1.0 - std::pow(b2, step + 1);
        for (size_t i = 0; i < grad.size(); ++i) {
            m[i] = b1 * m[i] + (1 - b1) * grad[i];
            v[i] = b2 * v[i] + (1 - b2) * grad[i] * grad[i];
            critic.theta[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
    REQUIRE(checkpoints.size() == 5);
    CHECK(checkpoints[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    for (size_t k = 1; k < checkpoints.size(); ++k) CHECK(checkpoints[k] < checkpoints[k - 1]);
    CHECK(checkpoints.back() < std::log(2.0) / 10.0);
}

TEST_CASE("patch plan is frozen by its seed") {
    const GridMask mask = disk_mask(32);
    br::PatchConfig pc;
    pc.patch_count = 16;
    pc.patch_size = 8;
    pc.embed_dim = 8;
    auto p1 = br::make_patch_plan(mask, pc);
    auto p2 = br::make_patch_plan(mask, pc);
    CHECK(p1.row0 == p2.row0);
    CHECK(p1.col0 == p2.col0);
    CHECK(p1.proj == p2.proj);
    pc.seed = 99;
    auto p3 = br::make_patch_plan(mask, pc);
    CHECK(p1.proj != p3.proj);

    REQUIRE(int(p1.row0.size()) == 16);
    for (size_t k = 0; k < p1.row0.size(); ++k) {
        REQUIRE(p1.row0[k] >= 0);
        REQUIRE(p1.row0[k] + p1.patch_size <= 32);
        int masked = 0;
        for (int i = 0; i < p1.patch_size; ++i)
            for (int j = 0; j < p1.patch_size; ++j)
                masked += mask.at(p1.row0[k] + i, p1.col0[k] + j) ? 1 : 0;
        CHECK(2 * masked >= p1.patch_size * p1.patch_size);
    }
}

TEST_CASE("matching patches score better than displaced ones") {
    const GridMask mask = disk_mask(32);
    const GridImage x0 = texture(32, 32, 0, &mask);
    GridImage rolled(32, 32);
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) rolled.at(i, j) = x0.at((i + 9) % 32, (j + 13) % 32);
    br::PatchConfig pc;
    pc.patch_count = 24;
    pc.patch_size = 8;
    pc.embed_dim = 16;
    const double aligned = br::patch_contrastive_loss(x0, x0, mask, pc);
    const double displaced = br::patch_contrastive_loss(x0, rolled, mask, pc);
    CHECK(aligned >= 0.0);
    CHECK(aligned < displaced);
}

TEST_CASE("a single patch has no negatives") {
    const GridMask mask = disk_mask(32);
    const GridImage x0 = texture(32, 32, 0, &mask);
    br::PatchConfig pc;
    pc.patch_count = 1;
    CHECK(br::patch_contrastive_loss(x0, x0, mask, pc) == 0.0);

    GridMask tiny(1, 1, 1);
    GridImage dot(1, 1, 0.5);
    br::PatchConfig pd;
    CHECK(br::patch_contrastive_loss(dot, dot, tiny, pd) == 0.0);
}

TEST_CASE("a joint sign flip leaves the patch loss unchanged") {
    const GridMask mask = disk_mask(32);
    const GridImage x0 = texture(32, 32, 0, &mask);
    const GridImage x1 = texture(32, 32, 4, &mask);
    GridImage n0 = x0, n1 = x1;
    for (auto& v : n0.v) v = -v;
    for (auto& v : n1.v) v = -v;
    br::PatchConfig pc;
    pc.patch_count = 24;
    pc.patch_size = 8;
    pc.embed_dim = 16;
    CHECK(br::patch_contrastive_loss(x0, x1, mask, pc) ==
          br::patch_contrastive_loss(n0, n1, mask, pc));
}

TEST_CASE("structural loss vanishes only on identical images") {
    const GridMask mask = disk_mask(32);
    const GridImage x0 = texture(32, 32, 0, &mask);
    CHECK(br::msssim_loss(x0, x0, mask) == doctest::Approx(0.0).epsilon(1e-12));

    // Two pyramid levels keep an odd count of sign-flipped factors, so the
    // negated image lands in the "worse than uncorrelated" band above 1.
    const GridMask mask16 = disk_mask(16);
    const GridImage y0 = texture(16, 16, 0, &mask16);
    GridImage neg = y0;
    for (auto& v : neg.v) v = -v;
    const double flipped = br::msssim_loss(y0, neg, mask16);
    CHECK(flipped > 1.0);
    CHECK(flipped <= 2.0);

    std::mt19937_64 rng(41);
    std::normal_distribution<double> normal(0.0, 1.0);
    double prev = 0.0;
    for (double sigma : {0.01, 0.1, 0.5}) {
        double acc = 0;
        for (int rep = 0; rep < 4; ++rep) {
            GridImage noisy = x0;
            for (size_t p = 0; p < noisy.v.size(); ++p)
                if (mask.m[p]) noisy.v[p] += sigma * normal(rng);
            acc += br::msssim_loss(x0, noisy, mask);
        }
        acc /= 4;
        CHECK(acc >= prev);
        prev = acc;
    }
}

TEST_CASE("the structural graph reproduces the metric") {
    const GridMask mask = disk_mask(32);
    const GridImage x0 = texture(32, 32, 0, &mask);
    GridImage x1 = texture(32, 32, 5, &mask);
    const double via_graph = br::msssim_loss(x0, x1, mask);
    const auto direct = metrics::ms_ssim(x0, x1, mask, 5, 2.0);
    CHECK(via_graph == doctest::Approx(1.0 - direct.value).epsilon(1e-9));
}

TEST_CASE("a zero-scaled head makes the generator an identity") {
    br::GeneratorConfig gc;
    gc.image_h = gc.image_w = 8;
    gc.base_channels = 4;
    gc.depth = 2;
    gc.time_embed_dim = 4;
    auto gen = br::make_generator(gc);
    const GridMask mask = disk_mask(8);
    GridImage x = texture(8, 8, 0, &mask);
    for (auto& v : x.v) v = std::abs(v) + 0.01;
    for (size_t p = 0; p < x.v.size(); ++p)
        if (!mask.m[p]) x.v[p] = 0.0;
    std::mt19937_64 rng(3);
    GridImage out = br::predict(gen, x, mask, 0.4, rng);
    for (size_t p = 0; p < x.v.size(); ++p)
        CHECK(out.v[p] == (mask.m[p] ? x.v[p] : 0.0));

    br::GeneratorConfig mc;
    mc.arch = "mlp";
    mc.image_h = mc.image_w = 1;
    auto mlp = br::make_generator(mc);
    GridMask one(1, 1, 1);
    GridImage dot(1, 1, 0.375);
    CHECK(br::predict(mlp, dot, one, 0.2, rng).v[0] == 0.375);

    GridImage wrong(4, 4, 0.0);
    CHECK_THROWS_AS(br::predict(gen, wrong, disk_mask(4), 0.4, rng), br::ShapeMismatch);
}

TEST_CASE("parameter initialization is seeded and structured") {
    br::GeneratorConfig gc;
    gc.image_h = gc.image_w = 8;
    gc.base_channels = 4;
    gc.depth = 2;
    gc.time_embed_dim = 4;
    auto g1 = br::make_generator(gc);
    auto g2 = br::make_generator(gc);
    CHECK(g1.phi == g2.phi);
    CHECK(g1.phi.size() == g1.layout.total);
    gc.seed = 77;
    auto g3 = br::make_generator(gc);
    CHECK(g1.phi != g3.phi);

    bool saw_time = false, saw_bias = false, saw_final = false;
    for (const auto& e : g1.layout.entries) {
        size_t n = 1;
        for (int d : e.shape) n *= size_t(d);
        if (e.name.size() >= 7 && e.name.substr(e.name.size() - 7) == ".time.w") {
            saw_time = true;
            for (size_t i = 0; i < n; ++i) CHECK(g1.phi[e.offset + i] == 0.05);
        }
        if (e.name.back() == 'b') {
            saw_bias = true;
            for (size_t i = 0; i < n; ++i) CHECK(g1.phi[e.offset + i] == 0.0);
        }
        if (e.name == "final.w") {
            saw_final = true;
            for (size_t i = 0; i < n; ++i) CHECK(g1.phi[e.offset + i] == 0.0);
        }
    }
    CHECK(saw_time);
    CHECK(saw_bias);
    CHECK(saw_final);

    gc.final_init_scale = 0.05;
    auto g4 = br::make_generator(gc);
    double head = 0;
    for (const auto& e : g4.layout.entries)
        if (e.name == "final.w")
            for (size_t i = 0; i < 9; ++i) head += std::abs(g4.phi[e.offset + i]);
    CHECK(head > 0.0);
}

TEST_CASE("patch loss gradient matches finite differences") {
    const GridMask mask = disk_mask(8);
    br::PatchConfig pc;
    pc.patch_count = 8;
    pc.patch_size = 4;
    pc.embed_dim = 4;
    pc.seed = 11;
    const auto plan = br::make_patch_plan(mask, pc);
    const GridImage x0 = texture(8, 8, 0, &mask);

    gradcheck::Builder build = [&](ad::Tape& t, const std::vector<std::vector<double>>& p) {
        int x1 = t.input({64}, p[0].data(), true);
        int x0n = t.constant({64}, x0.v.data());
        return std::make_pair(br::patch_loss_graph(t, plan, x0n, x1), std::vector<int>{x1});
    };
    CHECK(gradcheck::max_rel_error(build, {gradcheck::uniform_vec(64, 13)}) <= 1e-4);
}

TEST_CASE("structural loss gradient matches finite differences") {
    const GridMask mask = disk_mask(8);
    const auto graph = br::make_msssim_graph(metrics::make_msssim_plan(mask, 5));
    const GridImage x0 = texture(8, 8, 0, &mask);

    gradcheck::Builder build = [&](ad::Tape& t, const std::vector<std::vector<double>>& p) {
        int x1 = t.input({64}, p[0].data(), true);
        int x0n = t.constant({64}, x0.v.data());
        return std::make_pair(br::msssim_loss_graph(t, graph, x0n, x1), std::vector<int>{x1});
    };
    CHECK(gradcheck::max_rel_error(build, {gradcheck::uniform_vec(64, 29, -0.8, 0.8)}) <= 1e-4);
}

TEST_CASE("adversarial gradient matches finite differences") {
    br::CriticConfig cc;
    cc.image_h = cc.image_w = 8;
    cc.base_channels = 4;
    cc.blocks = 2;
    cc.final_init_scale = 0.05;
    const auto critic = br::make_critic(cc);

    gradcheck::Builder build = [&](ad::Tape& t, const std::vector<std::vector<double>>& p) {
        auto bind = br::bind_params(t, critic.layout, critic.theta.data(), false);
        int x = t.input({1, 1, 8, 8}, p[0].data(), true);
        int d = br::critic_graph(t, cc, bind, x);
        int loss = t.mean(t.softplus(t.mul_scalar(d, -1.0)));
        return std::make_pair(loss, std::vector<int>{x});
    };
    CHECK(gradcheck::max_rel_error(build, {gradcheck::uniform_vec(64, 37)}) <= 1e-4);
}

TEST_CASE("transport-entropy gradient matches finite differences") {
    // Mirrors the training graph's cost plus Gaussian-proxy entropy block,
    // differentiated with respect to the predictions.
    const GridMask mask = disk_mask(4);
    const int npix = 16, m = 3;
    const GridImage xt = texture(4, 4, 0, &mask);
    std::vector<double> xrep(size_t(m) * npix);
    for (int s = 0; s < m; ++s)
        for (int p = 0; p < npix; ++p) xrep[size_t(s) * npix + p] = xt.v[size_t(p)];

    gradcheck::Builder build = [&](ad::Tape& t, const std::vector<std::vector<double>>& p) {
        int xe = t.input({m, 1, 4, 4}, p[0].data(), true);
        int xtn = t.constant({m, 1, 4, 4}, xrep.data());
        int diff = t.sub(xe, xtn);
        std::vector<double> wts(size_t(m) * npix, 0.0);
        for (int s = 0; s < m; ++s)
            for (int p2 = 0; p2 < npix; ++p2)
                if (mask.m[size_t(p2)]) wts[size_t(s) * npix + p2] = 1.0 / m;
        int cost = t.dot_const(t.mul(diff, diff), wts);
        int bm = t.batch_mean(xe);
        int dev = t.sub(xe, bm);
        int var = t.batch_mean(t.mul(dev, dev));
        int lv = t.log_op(t.add_scalar(var, 1e-8));
        std::vector<double> ewts(size_t(m) * npix, 0.0);
        for (int p2 = 0; p2 < npix; ++p2)
            if (mask.m[size_t(p2)]) ewts[size_t(p2)] = 0.5;
        int hent = t.dot_const(lv, ewts);
        int loss = t.sub(cost, t.mul_scalar(hent, 2.0 * 0.1 * (1.0 - 0.4)));
        return std::make_pair(loss, std::vector<int>{xe});
    };
    CHECK(gradcheck::max_rel_error(build, {gradcheck::uniform_vec(m * npix, 43)}) <= 1e-4);
}

TEST_CASE("checkpoints round-trip through the container") {
    br::GeneratorConfig gc;
    gc.image_h = gc.image_w = 8;
    gc.base_channels = 4;
    gc.depth = 2;
    gc.time_embed_dim = 4;
    gc.final_init_scale = 0.05;
    gc.seed = 9;
    auto gen = br::make_generator(gc);
    const std::string gpath = "bgen_roundtrip_gen.bgen";
    br::save_generator(gpath, gen);
    auto loaded = br::load_generator(gpath);
    CHECK(loaded.cfg.arch == gc.arch);
    CHECK(loaded.cfg.image_h == 8);
    CHECK(loaded.cfg.depth == 2);
    CHECK(loaded.cfg.final_init_scale == 0.05);
    CHECK(loaded.cfg.seed == 9);
    REQUIRE(loaded.phi.size() == gen.phi.size());
    for (size_t i = 0; i < gen.phi.size(); ++i)
        CHECK(loaded.phi[i] == double(float(gen.phi[i])));

    br::CriticConfig cc;
    cc.image_h = cc.image_w = 8;
    cc.base_channels = 4;
    cc.blocks = 2;
    cc.final_init_scale = 0.02;
    auto critic = br::make_critic(cc);
    const std::string cpath = "bgen_roundtrip_critic.bgen";
    br::save_critic(cpath, critic);
    auto lcrit = br::load_critic(cpath);
    CHECK(lcrit.cfg.blocks == 2);
    REQUIRE(lcrit.theta.size() == critic.theta.size());
    for (size_t i = 0; i < critic.theta.size(); ++i)
        CHECK(lcrit.theta[i] == double(float(critic.theta[i])));

    CHECK_THROWS_AS(br::load_generator(cpath), cortexbridge::io::IoError);
    CHECK_THROWS_AS(br::load_critic(gpath), cortexbridge::io::IoError);

    std::ofstream junk("bgen_junk.bgen", std::ios::binary);
    junk << "BOGUS";
    junk.close();
    CHECK_THROWS_AS(br::load_generator("bgen_junk.bgen"), cortexbridge::io::IoError);
    std::remove(gpath.c_str());
    std::remove(cpath.c_str());
    std::remove("bgen_junk.bgen");
}

TEST_CASE("history lands in the expected csv layout") {
    std::vector<br::EpochStats> hist(2);
    hist[0] = {1, 0.5, 1.25, 0.75, 0.25, 2.75};
    hist[1] = {2, 0.4, 1.0, 0.7, 0.2, 2.3};
    const std::string path = "history_layout.csv";
    br::write_history_csv(path, hist);
    std::ifstream is(path);
    std::string line;
    REQUIRE(bool(std::getline(is, line)));
    CHECK(line == "epoch,L_Adv,L_SB,L_NCE,L_MSSSIM,total");
    int rows = 0;
    while (std::getline(is, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
    std::remove(path.c_str());
}

}  // TEST_SUITE("bridge")
