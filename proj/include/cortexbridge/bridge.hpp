#pragma once

#include <Eigen/Dense>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cortexbridge/autodiff.hpp"
#include "cortexbridge/grid.hpp"
#include "cortexbridge/metrics.hpp"

namespace cortexbridge::bridge {

struct DegenerateInterval : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericalDivergence : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Ordered times t_0 = 0 < t_1 < ... < t_N = 1.
struct TimeGrid {
    std::vector<double> steps;

    static TimeGrid uniform(int n);
    int n_steps() const { return int(steps.size()) - 1; }
    void validate() const;
};

struct BridgeConfig {
    double tau = 0.1;
    TimeGrid grid = TimeGrid::uniform(5);
    double lambda_sb = 1.0;
    double lambda_reg_patchnce = 0.5;
    double lambda_reg_msssim = 1.0;
    std::string entropy_estimator = "gaussian-proxy";  // or "off"
};

// Entropic coupling between two discrete marginals.
struct Coupling {
    Eigen::MatrixXd matrix;
    Eigen::VectorXd row_marginal;
    Eigen::VectorXd col_marginal;
    double epsilon = 0.0;
    int iterations = 0;
    bool converged = true;
    // Dual objective in minimization orientation, recorded every 10 sweeps;
    // block-coordinate ascent makes it non-increasing.
    std::vector<double> objective_trace;
};

Coupling sinkhorn_eot(const Eigen::MatrixXd& cost, const Eigen::VectorXd& row_marginal,
                      const Eigen::VectorXd& col_marginal, double epsilon, double tol = 1e-8,
                      int max_iters = 10000);

// Interpolates between endpoint images on the masked region: mean
// s*x_b + (1-s)*x_a with variance s(1-s)*tau*(t_b-t_a), s = (t-t_a)/(t_b-t_a).
// Exact endpoint copies at t = t_a and t = t_b.
GridImage sample_bridge(const GridImage& x_a, const GridImage& x_b, const GridMask& mask,
                        double t_a, double t_b, double t, double tau, std::mt19937_64& rng);

// Time-conditioned stochastic map x -> endpoint prediction.
struct Sampler {
    virtual ~Sampler() = default;
    virtual GridImage predict(const GridImage& x, double t, std::mt19937_64& rng) const = 0;
};

// Forward simulation: at step j predict the endpoint from x_{t_j}, then draw
// x_{t_{j+1}} from the bridge between them. Returns all N+1 states; the last
// one is the final endpoint prediction.
std::vector<GridImage> simulate_trajectory(const GridImage& x0, const GridMask& mask,
                                           const Sampler& gen, const BridgeConfig& cfg,
                                           std::mt19937_64& rng);

// Transport cost minus entropy bonus: mean over the batch of the squared
// distance summed over masked pixels, minus 2*tau*(1-t_i) times the entropy
// of a diagonal Gaussian fitted to the batch of predictions.
double sb_loss(const std::vector<std::pair<GridImage, GridImage>>& batch, double t_i,
               const BridgeConfig& cfg, const GridMask& mask);

struct PatchConfig {
    int patch_count = 64;
    int patch_size = 16;
    int embed_dim = 32;
    double temperature = 0.07;
    uint64_t seed = 7;
};

// Frozen patch sampling locations and random-projection encoder. The first
// encoder layer is a smooth absolute value, so embeddings are invariant to a
// global sign flip of the input.
struct PatchPlan {
    int h = 0, w = 0;
    int patch_size = 0;
    int embed_dim = 0;
    double temperature = 0.07;
    std::vector<int> row0, col0;  // patch top-left corners
    std::vector<double> proj;     // [patch_size^2, embed_dim] row-major
};

PatchPlan make_patch_plan(const GridMask& mask, const PatchConfig& cfg);

double patch_contrastive_loss(const GridImage& x0, const GridImage& x1_hat,
                              const GridMask& mask, const PatchConfig& cfg);

// 1 - MS-SSIM through the shared multi-scale window plan.
double msssim_loss(const GridImage& x0, const GridImage& x1_hat, const GridMask& mask);

// Graph builder shared by training, the scalar wrapper above, and the
// gradient checks. Image nodes are flat [h*w].
int patch_loss_graph(ad::Tape& t, const PatchPlan& plan, int x0, int x1_hat);

}  // namespace cortexbridge::bridge
