#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cortexbridge/disk.hpp"
#include "cortexbridge/grid.hpp"

namespace cortexbridge::metrics {

struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyMask : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SingularCovariance : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One 11x11 Gaussian window (sigma 1.5) restricted to masked in-image pixels.
// A center is kept iff it is masked and the masked share of the in-image
// footprint is at least 50%; weights are renormalized to sum 1.
struct SparseWindow {
    int center = 0;
    std::vector<int> px;
    std::vector<double> wgt;
};

struct LevelPlan {
    int h = 0, w = 0;
    GridMask mask{0, 0};
    std::vector<SparseWindow> windows;
    // Masked 2x2 mean-pool to the next (floor-halved) level: one entry per
    // coarse masked pixel (>= 2 of 4 children masked). Empty at the coarsest.
    std::vector<SparseWindow> pool;
};

// Per-level weights follow the canonical five-level profile, truncated and
// renormalized when fewer levels fit. Levels auto-reduce until the coarsest
// grid is at least 8 pixels on its short side.
struct MsssimPlan {
    int levels = 1;
    std::vector<double> weights;
    std::vector<LevelPlan> level;
};

LevelPlan make_level_plan(const GridMask& mask);
MsssimPlan make_msssim_plan(const GridMask& mask, int levels);

double ssim(const GridImage& a, const GridImage& b, const GridMask& mask,
            double data_range = 2.0);
double ssim(const LevelPlan& plan, const std::vector<double>& a, const std::vector<double>& b,
            double data_range = 2.0);

struct MsSsimResult {
    double value = 0.0;
    int levels_used = 0;
};
MsSsimResult ms_ssim(const GridImage& a, const GridImage& b, const GridMask& mask,
                     int levels = 5, double data_range = 2.0);
MsSsimResult ms_ssim(const MsssimPlan& plan, const std::vector<double>& a,
                     const std::vector<double>& b, double data_range = 2.0);

struct PsnrResult {
    double db = 0.0;
    bool capped = false;  // identical masked content reports the 99 dB sentinel
};
PsnrResult psnr(const GridImage& a, const GridImage& b, const GridMask& mask,
                double data_range = 2.0);

// Symmetric positive definite square root (Denman-Beavers iteration).
Eigen::MatrixXd sqrt_spd(const Eigen::MatrixXd& m);

// Frechet distance between Gaussian fits of seeded random-projection features
// (64 dims) of the masked pixels. Values are comparable only across runs of
// this implementation with the same seed and mask.
struct FrechetResult {
    double distance = 0.0;
    bool jittered = false;    // covariances needed the 1e-6 diagonal jitter
    bool low_sample = false;  // a set had fewer than 128 samples
};
FrechetResult frechet_feature_distance(const std::vector<GridImage>& set_a,
                                       const std::vector<GridImage>& set_b,
                                       const GridMask& mask, uint64_t feature_seed);

struct SliceMetrics {
    int time_index = 0;
    double ssim = 0.0;
    double ms_ssim = 0.0;
    double psnr_db = 0.0;
    bool psnr_capped = false;
};

struct MetricReport {
    double ssim = 0.0;
    double ms_ssim = 0.0;
    double psnr_db = 0.0;
    double frechet_distance = 0.0;
    int n_slices = 0;
    int msssim_levels = 0;
    bool frechet_jittered = false;
    bool frechet_low_sample = false;
    std::vector<SliceMetrics> slices;
};

// Pairs slices by index; both series must share shape and mask.
MetricReport evaluate_series(const disk::DiskSeries& a, const disk::DiskSeries& b,
                             uint64_t feature_seed);

std::string to_json(const MetricReport& report);
std::string to_csv(const MetricReport& report);

}  // namespace cortexbridge::metrics
