#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

namespace cortexbridge::prf {

struct FlatSeries : std::runtime_error {
    explicit FlatSeries(const std::string& msg) : std::runtime_error(msg) {}
};
struct ZeroVariance : std::runtime_error {
    explicit ZeroVariance(const std::string& msg) : std::runtime_error(msg) {}
};

// T frames of G x G aperture contrast in [0,1] over the square
// [-extent_deg, extent_deg]^2, one frame per repetition time.
struct StimulusMovie {
    int t_frames = 0;
    int grid = 0;
    double extent_deg = 0.0;
    double tr_seconds = 1.0;
    std::vector<double> frames;  // t_frames * grid * grid, frame-major

    double& at(int t, int i, int j) {
        return frames[(size_t(t) * grid + i) * grid + j];
    }
    double at(int t, int i, int j) const {
        return frames[(size_t(t) * grid + i) * grid + j];
    }
    const double* frame(int t) const { return frames.data() + size_t(t) * grid * grid; }
};

// Double-gamma response kernel; each lobe peaks exactly at its delay.
struct HrfModel {
    double peak_delay_s = 6.0;
    double undershoot_delay_s = 16.0;
    double peak_dispersion_s = 1.0;
    double undershoot_dispersion_s = 1.0;
    double undershoot_ratio = 1.0 / 6.0;
    double kernel_length_s = 32.0;
};

// Causal taps at t = 0, tr, 2tr, ... up to kernel_length_s, peak normalized to 1.
std::vector<double> sample_hrf(const HrfModel& hrf, double tr_seconds);

struct PrfParams {
    double v1_deg = 0.0;
    double v2_deg = 0.0;
    double sigma_deg = 1.0;
    double beta = 1.0;
    double r2_percent = 0.0;
};

struct PrfFitOptions {
    int center_grid = 8;
    // Candidate sizes as fractions of the field half-width: 0.5/1/2/4 degrees
    // on a 6 degree field, proportional otherwise.
    std::array<double, 4> sigma_fracs = {1.0 / 12.0, 1.0 / 6.0, 1.0 / 3.0, 2.0 / 3.0};
    int max_evals = 500;
    double sse_tol = 1e-6;
    int threads = 0;  // fit_all: 0 picks the hardware count
};

// Visual-field coordinate of node i along one axis (pixel-center convention).
double grid_coordinate(int i, int grid, double extent_deg);

// G x G receptive-field weights, normalized to sum 1 over the grid.
std::vector<double> gaussian_rf(double v1_deg, double v2_deg, double sigma_deg, int grid,
                                double extent_deg);

// beta * (per-frame inner product of the RF with the stimulus) convolved with
// the causal HRF sampled at the movie's repetition time.
std::vector<double> predict_timeseries(const PrfParams& params, const StimulusMovie& stim,
                                       const HrfModel& hrf);

// Coarse lattice over (center, size) with the amplitude solved per candidate
// in closed form, then Nelder-Mead refinement from the best seed.
PrfParams fit_prf(const std::vector<double>& series, const StimulusMovie& stim,
                  const HrfModel& hrf, const PrfFitOptions& opts = {});

// Independent per-vertex fits, results in vertex order.
std::vector<PrfParams> fit_all(const std::vector<std::vector<double>>& series,
                               const StimulusMovie& stim, const HrfModel& hrf,
                               const PrfFitOptions& opts = {});

double variance_explained(const std::vector<double>& pred, const std::vector<double>& obs);

void write_stimulus(const StimulusMovie& stim, const std::string& path);
StimulusMovie read_stimulus(const std::string& path);

void write_prf_csv(const std::vector<PrfParams>& params, const std::string& path);

}  // namespace cortexbridge::prf
